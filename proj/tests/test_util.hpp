// Copyright 2026 The FedFisher Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

// Shared helpers for the test suites.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fedfisher/datasets.hpp"
#include "fedfisher/models.hpp"
#include "fedfisher/numerics.hpp"

namespace fedfisher::testing {

inline Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

inline DenseMatrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  return DenseMatrix(r, c, random_vector(rng, r * c));
}

inline DenseMatrix random_symmetric(std::mt19937_64& rng, std::size_t n) {
  DenseMatrix a = random_matrix(rng, n, n);
  return 0.5 * (a + transpose(a));
}

/// G G^T / k with G n x k: PSD of rank <= k.
inline DenseMatrix random_psd(std::mt19937_64& rng, std::size_t n, std::size_t rank) {
  const DenseMatrix g = random_matrix(rng, n, rank);
  DenseMatrix out = matmul(g, transpose(g));
  out *= 1.0 / static_cast<double>(std::max<std::size_t>(rank, 1));
  return out;
}

inline double rel_error(std::span<const double> a, std::span<const double> b) {
  return norm2(subtract(a, b)) / std::max(norm2(b), 1e-300);
}

inline std::vector<Example> random_regression(std::mt19937_64& rng, std::size_t n, std::size_t p) {
  std::vector<Example> out(n);
  std::normal_distribution<double> normal;
  for (auto& e : out) {
    e.x = random_vector(rng, p);
    e.y = normal(rng);
  }
  return out;
}

inline std::vector<Example> random_classification(std::mt19937_64& rng, std::size_t n, std::size_t p,
                                                  std::size_t classes) {
  std::vector<Example> out(n);
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  for (auto& e : out) {
    e.x = random_vector(rng, p);
    e.y = static_cast<double>(label(rng));
  }
  return out;
}

inline std::vector<Example> unit_inputs(std::mt19937_64& rng, std::size_t n, std::size_t p) {
  auto out = random_regression(rng, n, p);
  return normalize_unit(out);
}

}  // namespace fedfisher::testing
