#pragma once

// Shared vocabulary: logical time, levels, bit helpers, seeded RNG streams and
// the error type every module throws.

#include <bit>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cachex {

inline constexpr unsigned kLineBits = 6;
inline constexpr unsigned kPageBits = 12;
inline constexpr std::uint64_t kLineSize = 1ull << kLineBits;
inline constexpr std::uint64_t kPageSize = 1ull << kPageBits;
inline constexpr unsigned kLinesPerPage = 1u << (kPageBits - kLineBits);

/// Logical time in nanoseconds.
using TimeNs = std::int64_t;

constexpr TimeNs ms_to_ns(double ms) { return static_cast<TimeNs>(ms * 1e6); }
constexpr TimeNs us_to_ns(double us) { return static_cast<TimeNs>(us * 1e3); }
constexpr double ns_to_ms(TimeNs ns) { return static_cast<double>(ns) / 1e6; }

enum class Level : std::uint8_t { L2, LLC };

inline const char* to_string(Level l) { return l == Level::L2 ? "L2" : "LLC"; }

/// Extracts bits [hi:lo] of `v`.
constexpr std::uint64_t bits(std::uint64_t v, unsigned hi, unsigned lo) {
  const unsigned width = hi - lo + 1;
  const std::uint64_t mask = width >= 64 ? ~0ull : ((1ull << width) - 1);
  return (v >> lo) & mask;
}

constexpr unsigned log2_exact(std::uint64_t v) {
  return static_cast<unsigned>(std::countr_zero(v));
}

constexpr bool is_pow2(std::uint64_t v) { return v != 0 && std::has_single_bit(v); }

constexpr std::uint64_t line_of(std::uint64_t addr) { return addr >> kLineBits; }
constexpr std::uint64_t page_of(std::uint64_t addr) { return addr >> kPageBits; }

// ---------------------------------------------------------------------------
// RNG

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent stream for (seed, stream...) so that tasks keyed by id draw the
/// same numbers regardless of scheduling order.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ 0x5ca1ab1eull) ^ a) ^ (b * 0x9e37u)) ^ c;
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
  return Rng(derive_seed(seed, a, b, c));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng);
}

// ---------------------------------------------------------------------------
// Errors

enum class Errc {
  invalid_argument,
  capacity,
  translation_fault,
  unregistered_actor,
  calibration,
  inference_ambiguous,
  prune_failed,
  partial_palette,
  classification_ambiguous,
  no_sets,
  parse,
  validation,
  invariant,
};

inline const char* to_string(Errc e) {
  switch (e) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::capacity: return "capacity";
    case Errc::translation_fault: return "translation-fault";
    case Errc::unregistered_actor: return "unregistered-actor";
    case Errc::calibration: return "calibration";
    case Errc::inference_ambiguous: return "inference-ambiguous";
    case Errc::prune_failed: return "prune-failed";
    case Errc::partial_palette: return "partial-palette";
    case Errc::classification_ambiguous: return "classification-ambiguous";
    case Errc::no_sets: return "no-sets";
    case Errc::parse: return "parse";
    case Errc::validation: return "validation";
    case Errc::invariant: return "invariant";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Fewer color filters than the geometry allows; `found` carries the count.
class PartialPaletteError : public Error {
 public:
  explicit PartialPaletteError(std::size_t found, std::size_t expected)
      : Error(Errc::partial_palette, "found " + std::to_string(found) + " of " +
                                         std::to_string(expected) + " color filters"),
        found_(found) {}
  std::size_t found() const noexcept { return found_; }

 private:
  std::size_t found_;
};

}  // namespace cachex
