#pragma once

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"
#include "cachex/config.hpp"
#include "cachex/evset.hpp"
#include "cachex/experiments.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/parallel_build.hpp"
#include "cachex/policy_cap.hpp"
#include "cachex/policy_cas.hpp"
#include "cachex/probe.hpp"
#include "cachex/scenario.hpp"
#include "cachex/tenant_sim.hpp"
#include "cachex/timing.hpp"
#include "cachex/vcol.hpp"
#include "cachex/vscan.hpp"
