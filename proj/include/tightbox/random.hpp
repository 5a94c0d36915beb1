#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tightbox {

using Rng = std::mt19937_64;

/// Independent stream keyed by (seed, keys...). Used so that per-item samples
/// do not depend on iteration order or worker count.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::seed_seq::result_type words[2 + 2 * 8] = {};
  std::size_t n = 0;
  words[n++] = static_cast<std::uint32_t>(seed);
  words[n++] = static_cast<std::uint32_t>(seed >> 32);
  for (auto k : keys) {
    if (n + 2 > std::size(words)) break;
    words[n++] = static_cast<std::uint32_t>(k);
    words[n++] = static_cast<std::uint32_t>(k >> 32);
  }
  std::seed_seq seq(words, words + n);
  return Rng(seq);
}

}  // namespace tightbox
