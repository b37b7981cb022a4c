#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ctxdet {

using Rng = std::mt19937_64;

// Derives an independent seed for a named stream ("synth/scene/12",
// "train/detector/full", ...). All randomness in a run flows from one base
// seed through this function, so adding a stream never perturbs another.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream);

inline Rng make_rng(std::uint64_t base, std::string_view stream) {
  return Rng(derive_seed(base, stream));
}

}  // namespace ctxdet
