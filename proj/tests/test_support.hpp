#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cgan/model.hpp"
#include "cgan/tensor.hpp"

namespace cgan::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline std::size_t random_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Smallest model that still exercises every code path.
inline ModelConfig micro_config(std::size_t layers = 1) {
  ModelConfig c;
  c.vocab_size = 7;
  c.context_length = 12;
  c.num_layers = layers;
  c.num_heads = 2;
  c.embed_dim = 8;
  c.mlp_multiplier = 2;
  c.dropout_rate = 0.0;
  c.seed = 3;
  return c;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& id : t) id = static_cast<TokenId>(random_size(rng, 0, vocab - 1));
  return t;
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_error(double a, double b, double floor = 1e-4) {
  const double d = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / d;
}

}  // namespace cgan::testing
