#pragma once

#include <cmath>
#include <vector>

#include "patchforge/model.hpp"
#include "patchforge/patch_bank.hpp"
#include "patchforge/random.hpp"

namespace testutil {

// Standard normal CDF by series expansion of erf; shares no code with the library.
// Accumulates in long double to keep the alternating series' cancellation small.
inline double phi_series(double x) {
  const long double z = x / std::sqrt(2.0L);
  long double term = z, sum = z;
  for (int n = 1; n < 300; ++n) {
    term *= -z * z / n;
    sum += term / (2 * n + 1);
  }
  return static_cast<double>(0.5L + sum / std::sqrt(3.14159265358979323846264L));
}

inline double gelu_oracle(double x) { return x * phi_series(x); }

inline patchforge::ModelConfig toy_config(std::uint64_t seed = 3) {
  patchforge::ModelConfig c;
  c.d_model = 8;
  c.d_ff = 12;
  c.n_layers = 2;
  c.n_heads = 2;
  c.vocab_size = 30;
  c.n_classes = 3;
  c.max_len = 10;
  c.embedding_std = 0.5;
  c.seed = seed;
  return c;
}

inline patchforge::TokenSequence random_sequence(patchforge::Rng& rng, const patchforge::ModelConfig& c) {
  patchforge::TokenSequence x;
  x.ids.push_back(1);
  const std::size_t len = 2 + rng.below(c.max_len - 2);
  for (std::size_t i = 0; i < len; ++i) x.ids.push_back(static_cast<int>(3 + rng.below(c.vocab_size - 3)));
  return x;
}

inline patchforge::Vector random_vector(patchforge::Rng& rng, std::size_t n, double scale = 1.0) {
  patchforge::Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline patchforge::Matrix random_matrix(patchforge::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  patchforge::Matrix m(r, c);
  for (double& x : m.data()) x = scale * rng.normal();
  return m;
}

inline patchforge::Patch random_patch(patchforge::Rng& rng, std::size_t d, std::uint64_t id, double bias = 0.0) {
  patchforge::Patch p;
  p.key = random_vector(rng, d);
  p.bias = bias;
  p.value = random_vector(rng, d);
  p.id = id;
  p.frozen = true;
  return p;
}

}  // namespace testutil
