#pragma once

// Guest virtual -> guest physical -> host physical page translation, host
// fragmentation, dynamic remapping, and the hypercall-analog color oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "cachex/common.hpp"

namespace cachex {

enum class Space : std::uint8_t { GVA, GPA, HPA };

struct Address {
  std::uint64_t value = 0;
  Space space = Space::GVA;

  std::uint64_t line_offset() const { return bits(value, 5, 0); }
  /// Aligned-line index within the page, bits [11:6].
  std::uint64_t page_line() const { return bits(value, 11, 6); }
  std::uint64_t page_offset() const { return bits(value, 11, 0); }
  std::uint64_t page_number() const { return value >> kPageBits; }
  bool line_aligned() const { return line_offset() == 0; }
};

enum class FragMode : std::uint8_t { contiguous, fragmented };

struct FragmentationProfile {
  FragMode mode = FragMode::contiguous;
  /// Fraction of GPA pages backed by randomly permuted HPA pages.
  double shuffle = 0.0;
  /// Host-enforced coloring: bitmask over the 16 L2 colors (HPA bits [15:12])
  /// the VM may receive. All ones means unrestricted.
  std::uint32_t allowed_l2_colors = 0xFFFF;

  static FragmentationProfile contiguous() { return {}; }
  static FragmentationProfile fragmented(double shuffle) {
    return {FragMode::fragmented, shuffle, 0xFFFF};
  }
};

struct RemapEvent {
  TimeNs at = 0;
  double fraction = 0.0;
  /// Optional weights over the 32 LLC colors (HPA bits [16:12]) for the new
  /// backings. Empty means uniform over free host pages.
  std::vector<double> color_bias;
};

inline constexpr unsigned kL2ColorBits = 4;
inline constexpr unsigned kLlcColorBits = 5;

constexpr unsigned l2_color_of_hpa(std::uint64_t hpa) { return static_cast<unsigned>(bits(hpa, 15, 12)); }
constexpr unsigned llc_color_of_hpa(std::uint64_t hpa) { return static_cast<unsigned>(bits(hpa, 16, 12)); }

class TranslationMap {
 public:
  static constexpr std::uint64_t kUnmapped = std::numeric_limits<std::uint64_t>::max();

  TranslationMap() = default;

  std::uint64_t guest_pages() const { return gpa_to_hpa_.size(); }
  std::uint64_t host_pages() const { return hpa_to_gpa_.size(); }
  std::uint64_t seed() const { return seed_; }
  const FragmentationProfile& profile() const { return profile_; }

  std::uint64_t gpa_page_of_gva_page(std::uint64_t gva_page) const {
    if (gva_page >= gva_to_gpa_.size() || gva_to_gpa_[gva_page] == kUnmapped)
      throw Error(Errc::translation_fault, "GVA page " + std::to_string(gva_page) + " unmapped");
    return gva_to_gpa_[gva_page];
  }

  std::uint64_t hpa_page_of_gpa_page(std::uint64_t gpa_page) const {
    if (gpa_page >= gpa_to_hpa_.size() || gpa_to_hpa_[gpa_page] == kUnmapped)
      throw Error(Errc::translation_fault, "GPA page " + std::to_string(gpa_page) + " unmapped");
    return gpa_to_hpa_[gpa_page];
  }

  std::optional<std::uint64_t> gpa_page_of_hpa_page(std::uint64_t hpa_page) const {
    if (hpa_page >= hpa_to_gpa_.size() || hpa_to_gpa_[hpa_page] == kUnmapped) return std::nullopt;
    return hpa_to_gpa_[hpa_page];
  }

  /// GVA -> HPA for a whole address; the hot path of every probe.
  std::uint64_t gva_to_hpa(std::uint64_t gva) const {
    const std::uint64_t gpa_page = gpa_page_of_gva_page(gva >> kPageBits);
    return (hpa_page_of_gpa_page(gpa_page) << kPageBits) | bits(gva, 11, 0);
  }

  /// Rewires one guest page-table entry. Both layers stay injective.
  void map_gva(std::uint64_t gva_page, std::uint64_t gpa_page) {
    if (gva_page >= gva_to_gpa_.size() || gpa_page >= gpa_to_hpa_.size())
      throw Error(Errc::invalid_argument, "map_gva out of range");
    for (std::uint64_t p = 0; p < gva_to_gpa_.size(); ++p)
      if (p != gva_page && gva_to_gpa_[p] == gpa_page) gva_to_gpa_[p] = kUnmapped;
    gva_to_gpa_[gva_page] = gpa_page;
  }

  void unmap_gva(std::uint64_t gva_page) {
    if (gva_page < gva_to_gpa_.size()) gva_to_gpa_[gva_page] = kUnmapped;
  }

  /// Rewires one host backing; fails if the host page is already in use.
  void map_gpa(std::uint64_t gpa_page, std::uint64_t hpa_page) {
    if (gpa_page >= gpa_to_hpa_.size() || hpa_page >= hpa_to_gpa_.size())
      throw Error(Errc::invalid_argument, "map_gpa out of range");
    if (hpa_to_gpa_[hpa_page] != kUnmapped && hpa_to_gpa_[hpa_page] != gpa_page)
      throw Error(Errc::invariant, "host page already backs another GPA page");
    if (gpa_to_hpa_[gpa_page] != kUnmapped) hpa_to_gpa_[gpa_to_hpa_[gpa_page]] = kUnmapped;
    gpa_to_hpa_[gpa_page] = hpa_page;
    hpa_to_gpa_[hpa_page] = gpa_page;
  }

  std::vector<RemapEvent>& remap_schedule() { return schedule_; }
  const std::vector<RemapEvent>& remap_schedule() const { return schedule_; }

  bool host_page_allowed(std::uint64_t hpa_page) const {
    return (profile_.allowed_l2_colors >> bits(hpa_page, 3, 0)) & 1u;
  }

  /// Scan-verifies both injectivity invariants.
  bool injective() const {
    std::vector<char> seen(gpa_to_hpa_.size(), 0);
    for (auto g : gva_to_gpa_) {
      if (g == kUnmapped) continue;
      if (seen[g]) return false;
      seen[g] = 1;
    }
    std::vector<char> hseen(hpa_to_gpa_.size(), 0);
    for (std::uint64_t g = 0; g < gpa_to_hpa_.size(); ++g) {
      const auto h = gpa_to_hpa_[g];
      if (h == kUnmapped) continue;
      if (hseen[h] || hpa_to_gpa_[h] != g) return false;
      hseen[h] = 1;
    }
    return true;
  }

  /// `gpa_page hpa_page` per line.
  void dump(std::ostream& os) const {
    for (std::uint64_t g = 0; g < gpa_to_hpa_.size(); ++g)
      if (gpa_to_hpa_[g] != kUnmapped) os << g << ' ' << gpa_to_hpa_[g] << '\n';
  }

 private:
  friend TranslationMap build_translation(const FragmentationProfile&, std::uint64_t,
                                          std::uint64_t, std::uint64_t);
  friend TranslationMap apply_remap(const TranslationMap&, const RemapEvent&);

  std::vector<std::uint64_t> gva_to_gpa_;
  std::vector<std::uint64_t> gpa_to_hpa_;
  std::vector<std::uint64_t> hpa_to_gpa_;
  std::vector<RemapEvent> schedule_;
  FragmentationProfile profile_;
  std::uint64_t seed_ = 0;
  Rng rng_;
};

/// Builds a guest of `guest_pages` pages. `host_pages` = 0 selects the default
/// of 4x guest space (scaled up when the host restricts colors).
inline TranslationMap build_translation(const FragmentationProfile& profile,
                                        std::uint64_t guest_pages, std::uint64_t seed,
                                        std::uint64_t host_pages = 0) {
  if (guest_pages == 0) throw Error(Errc::invalid_argument, "guest_pages must be >= 1");
  if (profile.shuffle < 0.0 || profile.shuffle > 1.0)
    throw Error(Errc::invalid_argument, "shuffle degree outside [0,1]");
  const unsigned allowed = static_cast<unsigned>(std::popcount(profile.allowed_l2_colors & 0xFFFFu));
  if (allowed == 0) throw Error(Errc::invalid_argument, "host allows no colors");

  const std::uint64_t needed_allowed = 4 * guest_pages;
  if (host_pages == 0) {
    host_pages = needed_allowed * 16 / allowed;
    host_pages = (host_pages + 15) / 16 * 16;
  }

  TranslationMap m;
  m.profile_ = profile;
  m.seed_ = seed;
  m.rng_ = make_rng(seed, 0x7a11);
  m.gva_to_gpa_.resize(guest_pages);
  m.gpa_to_hpa_.assign(guest_pages, TranslationMap::kUnmapped);
  m.hpa_to_gpa_.assign(host_pages, TranslationMap::kUnmapped);

  std::vector<std::uint64_t> usable;
  usable.reserve(host_pages);
  for (std::uint64_t p = 0; p < host_pages; ++p)
    if (m.host_page_allowed(p)) usable.push_back(p);
  if (usable.size() < needed_allowed)
    throw Error(Errc::capacity, "host space holds " + std::to_string(usable.size()) +
                                    " usable pages, need " + std::to_string(needed_allowed));

  for (std::uint64_t i = 0; i < guest_pages; ++i) m.gva_to_gpa_[i] = i;

  const std::uint64_t base = uniform_below(m.rng_, usable.size() - guest_pages + 1);
  for (std::uint64_t g = 0; g < guest_pages; ++g) m.map_gpa(g, usable[base + g]);

  if (profile.mode == FragMode::fragmented && profile.shuffle > 0.0) {
    const auto k = static_cast<std::uint64_t>(std::llround(profile.shuffle * static_cast<double>(guest_pages)));
    std::vector<std::uint64_t> order(guest_pages);
    for (std::uint64_t g = 0; g < guest_pages; ++g) order[g] = g;
    std::shuffle(order.begin(), order.end(), m.rng_);
    order.resize(k);
    for (auto g : order) {
      m.hpa_to_gpa_[m.gpa_to_hpa_[g]] = TranslationMap::kUnmapped;
      m.gpa_to_hpa_[g] = TranslationMap::kUnmapped;
    }
    std::vector<std::uint64_t> free_pages;
    for (auto p : usable)
      if (m.hpa_to_gpa_[p] == TranslationMap::kUnmapped) free_pages.push_back(p);
    std::shuffle(free_pages.begin(), free_pages.end(), m.rng_);
    for (std::uint64_t i = 0; i < order.size(); ++i) m.map_gpa(order[i], free_pages[i]);
  }
  return m;
}

/// Remaps ceil(fraction * guest_pages) GPA pages onto fresh host pages.
inline TranslationMap apply_remap(const TranslationMap& map, const RemapEvent& event) {
  if (!(event.fraction > 0.0) || event.fraction > 1.0)
    throw Error(Errc::invalid_argument, "remap fraction must be in (0,1]");
  if (!event.color_bias.empty() && event.color_bias.size() != (1u << kLlcColorBits))
    throw Error(Errc::invalid_argument, "color bias needs 32 weights");

  TranslationMap next = map;
  const std::uint64_t n = next.guest_pages();
  const auto k = static_cast<std::uint64_t>(std::ceil(event.fraction * static_cast<double>(n) - 1e-9));

  std::vector<std::uint64_t> order(n);
  for (std::uint64_t g = 0; g < n; ++g) order[g] = g;
  std::shuffle(order.begin(), order.end(), next.rng_);
  order.resize(k);

  std::vector<std::vector<std::uint64_t>> free_by_color(1u << kLlcColorBits);
  std::uint64_t free_total = 0;
  for (std::uint64_t p = 0; p < next.host_pages(); ++p) {
    if (next.hpa_to_gpa_[p] == TranslationMap::kUnmapped && next.host_page_allowed(p)) {
      free_by_color[bits(p, 4, 0)].push_back(p);
      ++free_total;
    }
  }
  if (free_total < k) throw Error(Errc::capacity, "not enough free host pages to remap");

  std::vector<double> weights = event.color_bias;
  if (weights.empty()) {
    weights.resize(free_by_color.size());
    for (std::size_t c = 0; c < weights.size(); ++c) weights[c] = static_cast<double>(free_by_color[c].size());
  }

  for (auto g : order) {
    std::vector<double> w(weights.size());
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = free_by_color[c].empty() ? 0.0 : weights[c];
    if (std::all_of(w.begin(), w.end(), [](double x) { return x <= 0.0; }))
      for (std::size_t c = 0; c < w.size(); ++c) w[c] = static_cast<double>(free_by_color[c].size());
    std::discrete_distribution<std::size_t> pick_color(w.begin(), w.end());
    auto& bucket = free_by_color[pick_color(next.rng_)];
    const std::size_t idx = uniform_below(next.rng_, bucket.size());
    const std::uint64_t fresh = bucket[idx];
    bucket[idx] = bucket.back();
    bucket.pop_back();

    next.hpa_to_gpa_[next.gpa_to_hpa_[g]] = TranslationMap::kUnmapped;
    next.gpa_to_hpa_[g] = fresh;
    next.hpa_to_gpa_[fresh] = g;
  }
  return next;
}

/// Translates toward HPA. Same-space requests are the identity.
inline Address translate(const TranslationMap& map, Address addr, Space to) {
  if (static_cast<int>(to) < static_cast<int>(addr.space))
    throw Error(Errc::invalid_argument, "translation only runs GVA->GPA->HPA");
  std::uint64_t page = addr.page_number();
  Space at = addr.space;
  if (at == Space::GVA && to != Space::GVA) {
    page = map.gpa_page_of_gva_page(page);
    at = Space::GPA;
  }
  if (at == Space::GPA && to == Space::HPA) {
    page = map.hpa_page_of_gpa_page(page);
    at = Space::HPA;
  }
  return Address{(page << kPageBits) | addr.page_offset(), to};
}

/// Ground-truth page color from the HPA backing a GVA: bits [15:12] for L2 and
/// [16:12] for LLC by default. `color_bits` adapts the oracle to geometries with
/// a different number of uncontrollable index bits.
inline unsigned oracle_color(const TranslationMap& map, Address gva, Level level,
                             std::optional<unsigned> color_bits = std::nullopt) {
  const unsigned nbits = color_bits.value_or(level == Level::L2 ? kL2ColorBits : kLlcColorBits);
  const std::uint64_t hpa = translate(map, gva, Space::HPA).value;
  if (nbits == 0) return 0;
  return static_cast<unsigned>(bits(hpa, kPageBits + nbits - 1, kPageBits));
}

}  // namespace cachex
