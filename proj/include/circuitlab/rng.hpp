#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace circuitlab {

/// Derives an independent 64-bit seed for a named stream from a run seed.
std::uint64_t stream_seed(std::uint64_t run_seed, std::string_view stream);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t run_seed, std::string_view stream) {
  return Rng(stream_seed(run_seed, stream));
}

/// Uniform integer in [lo, hi] that does not depend on the standard
/// library's distribution implementation.
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

/// Standard normal sample via Box-Muller (library-independent).
double standard_normal(Rng& rng);

}  // namespace circuitlab
