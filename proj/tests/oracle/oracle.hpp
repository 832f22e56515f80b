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

// Brute-force references for the test suites. Everything here goes through
// Eigen's dense solvers or finite differences, never through the library's
// own eigensolver, Fisher code or backpropagation.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "fedfisher/datasets.hpp"
#include "fedfisher/models.hpp"
#include "fedfisher/numerics.hpp"

namespace fedfisher::oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_eigen(const DenseMatrix& m) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Vec to_eigen(std::span<const double> v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

inline Vector to_vector(const Vec& v) { return Vector(v.data(), v.data() + v.size()); }

inline double max_eigenvalue(const DenseMatrix& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(to_eigen(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

inline double min_eigenvalue(const DenseMatrix& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(to_eigen(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

struct ConstrainedSolution {
  Vector w;
  Mat nullspace;  // orthonormal basis of ker(sum F_i), one column per direction
};

/// W* = W_bar + F^+ (b - F W_bar), F = sum F_i, b = sum F_i W_i; eigenvalues
/// below 1e-10 lambda_max count as zero.
inline ConstrainedSolution constrained_min_norm_solution_full(const std::vector<DenseMatrix>& fishers,
                                                             const std::vector<Vector>& weights) {
  if (fishers.empty() || fishers.size() != weights.size()) throw std::invalid_argument("oracle: bad inputs");
  const Eigen::Index d = static_cast<Eigen::Index>(weights.front().size());
  Mat f = Mat::Zero(d, d);
  Vec b = Vec::Zero(d), mean = Vec::Zero(d);
  for (std::size_t i = 0; i < fishers.size(); ++i) {
    const Mat fi = to_eigen(fishers[i]);
    const Vec wi = to_eigen(weights[i]);
    f += fi;
    b += fi * wi;
    mean += wi / static_cast<double>(fishers.size());
  }
  f = 0.5 * (f + f.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(f);
  const double lmax = std::max(0.0, es.eigenvalues().maxCoeff());
  const double cut = 1e-10 * lmax;
  const Vec r = es.eigenvectors().transpose() * (b - f * mean);
  Vec coeff = Vec::Zero(d);
  std::vector<Eigen::Index> null_ids;
  for (Eigen::Index k = 0; k < d; ++k) {
    if (lmax > 0.0 && es.eigenvalues()[k] > cut) coeff[k] = r[k] / es.eigenvalues()[k];
    else null_ids.push_back(k);
  }
  ConstrainedSolution out;
  out.w = to_vector(mean + es.eigenvectors() * coeff);
  out.nullspace.resize(d, static_cast<Eigen::Index>(null_ids.size()));
  for (std::size_t k = 0; k < null_ids.size(); ++k)
    out.nullspace.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(null_ids[k]);
  return out;
}

inline Vector constrained_min_norm_solution(const std::vector<DenseMatrix>& fishers, const std::vector<Vector>& weights) {
  return constrained_min_norm_solution_full(fishers, weights).w;
}

/// Central differences of the loss on one example.
template <class Model>
Vector fd_gradient(const Model& net, const Example& ex, LossKind loss, double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("fd_gradient: h must be in [1e-7, 1e-3]");
  Vector p = net.parameters();
  Vector g(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double keep = p[k];
    p[k] = keep + h;
    const double up = example_loss(net.with_parameters(p), ex, loss);
    p[k] = keep - h;
    const double down = example_loss(net.with_parameters(p), ex, loss);
    p[k] = keep;
    if (!std::isfinite(up) || !std::isfinite(down)) throw std::runtime_error("fd_gradient: non-finite loss");
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Batch-mean version of fd_gradient.
template <class Model>
Vector fd_gradient(const Model& net, std::span<const Example> batch, LossKind loss, double h = 1e-5) {
  Vector g(net.num_params(), 0.0);
  for (const auto& ex : batch) axpy(1.0 / static_cast<double>(batch.size()), fd_gradient(net, ex, loss, h), g);
  return g;
}

/// Monte-Carlo Fisher E_y[s s^T] of the two-layer regression model with
/// y ~ N(f(W,x), 1): the score is (y - f) grad f, where grad f comes from
/// central differences of the network output.
inline DenseMatrix mc_fisher(const TwoLayerReLU& net, std::span<const Example> data, std::size_t draws,
                             std::uint64_t seed) {
  const std::size_t d = net.num_params();
  Mat acc = Mat::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (const auto& ex : data) {
    Vector p = net.parameters();
    Vec grad_f(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < d; ++k) {
      const double keep = p[k], h = 1e-6;
      p[k] = keep + h;
      const double up = forward(net.with_parameters(p), ex.x);
      p[k] = keep - h;
      const double down = forward(net.with_parameters(p), ex.x);
      p[k] = keep;
      grad_f[static_cast<Eigen::Index>(k)] = (up - down) / (2.0 * h);
    }
    double mean_sq = 0.0;
    for (std::size_t s = 0; s < draws; ++s) {
      const double eps = normal(rng);  // y - f
      mean_sq += eps * eps;
    }
    mean_sq /= static_cast<double>(draws);
    acc += mean_sq * grad_f * grad_f.transpose();
  }
  acc /= static_cast<double>(data.size());
  acc = 0.5 * (acc + acc.transpose()).eval();
  DenseMatrix out(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = acc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

/// Monte-Carlo Fisher of an MLP: y drawn from the predictive distribution,
/// score = -(finite-difference gradient of the loss at that y).
inline DenseMatrix mc_fisher(const MLP& net, std::span<const Example> data, LossKind loss, std::size_t draws,
                             std::uint64_t seed) {
  const std::size_t d = net.num_params();
  Mat acc = Mat::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (const auto& ex : data) {
    const Vector z = forward(net, ex.x);
    for (std::size_t s = 0; s < draws; ++s) {
      Example sample = ex;
      if (loss == LossKind::squared) {
        sample.y = z[0] + normal(rng);
      } else {
        Vector p(z.size());
        const double zmax = *std::max_element(z.begin(), z.end());
        double tot = 0.0;
        for (std::size_t c = 0; c < z.size(); ++c) tot += p[c] = std::exp(z[c] - zmax);
        std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
        sample.y = static_cast<double>(pick(rng));
      }
      const Vec g = to_eigen(fd_gradient(net, sample, loss, 1e-5));
      acc += g * g.transpose();
    }
  }
  acc /= static_cast<double>(data.size() * draws);
  acc = 0.5 * (acc + acc.transpose()).eval();
  DenseMatrix out(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = acc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

struct GramEstimate {
  DenseMatrix h_infty;
  double lambda_0 = 0.0;
  std::size_t samples = 0;
  double mc_error = 0.0;  // 1 / sqrt(samples)
};

/// H_kl = E_{w ~ N(0, I)} [x_k^T x_l 1{w^T x_k >= 0} 1{w^T x_l >= 0}].
inline GramEstimate gram_lambda0(std::span<const Example> data, std::size_t mc_samples, std::uint64_t seed) {
  if (data.empty() || data.size() > 500) throw std::invalid_argument("gram_lambda0: need 1..500 examples");
  const std::size_t n = data.size(), p = data.front().x.size();
  Mat x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < n; ++i) x.row(static_cast<Eigen::Index>(i)) = to_eigen(data[i].x).transpose();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Mat counts = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Vec w(static_cast<Eigen::Index>(p));
  for (std::size_t s = 0; s < mc_samples; ++s) {
    for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = normal(rng);
    const Vec active = ((x * w).array() >= 0.0).cast<double>();
    counts.noalias() += active * active.transpose();
  }
  const Mat h = (x * x.transpose()).cwiseProduct(counts) / static_cast<double>(mc_samples);
  GramEstimate out;
  out.samples = mc_samples;
  out.mc_error = 1.0 / std::sqrt(static_cast<double>(mc_samples));
  out.h_infty = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.h_infty(i, j) = h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  out.lambda_0 = min_eigenvalue(out.h_infty);
  return out;
}

}  // namespace fedfisher::oracle
