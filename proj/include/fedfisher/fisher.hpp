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

// Fisher information approximations at a trained local model and their
// matrix-vector products.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedfisher/datasets.hpp"
#include "fedfisher/models.hpp"
#include "fedfisher/numerics.hpp"
#include "fedfisher/random.hpp"

namespace fedfisher {

struct FullFisher {
  DenseMatrix matrix;
};

struct DiagFisher {
  Vector diagonal;
};

/// One layer's Kronecker block A kron B: `a` is the covariance of the layer
/// input with a trailing constant-1 coordinate, `b` the covariance of the
/// pre-activation log-likelihood gradient.
struct KfacBlock {
  DenseMatrix a;
  DenseMatrix b;

  std::size_t dim() const noexcept { return a.rows() * b.rows(); }
};

struct KfacFisher {
  std::vector<KfacBlock> blocks;
};

using FisherApprox = std::variant<FullFisher, DiagFisher, KfacFisher>;

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

inline std::size_t fisher_dim(const FisherApprox& f) {
  return std::visit(Overloaded{[](const FullFisher& x) { return x.matrix.rows(); },
                               [](const DiagFisher& x) { return x.diagonal.size(); },
                               [](const KfacFisher& x) {
                                 std::size_t d = 0;
                                 for (const auto& blk : x.blocks) d += blk.dim();
                                 return d;
                               }},
                    f);
}

inline double fisher_trace(const FisherApprox& f) {
  return std::visit(Overloaded{[](const FullFisher& x) { return x.matrix.trace(); },
                               [](const DiagFisher& x) {
                                 double t = 0.0;
                                 for (double v : x.diagonal) t += v;
                                 return t;
                               },
                               [](const KfacFisher& x) {
                                 double t = 0.0;
                                 for (const auto& blk : x.blocks) t += blk.a.trace() * blk.b.trace();
                                 return t;
                               }},
                    f);
}

inline const char* fisher_kind_name(const FisherApprox& f) {
  return std::visit(Overloaded{[](const FullFisher&) { return "full"; }, [](const DiagFisher&) { return "diag"; },
                               [](const KfacFisher&) { return "kfac"; }},
                    f);
}

/// How the expectation over labels y ~ P(y | x, W) is taken.
struct FisherMode {
  enum class Kind { expected, sampled } kind = Kind::expected;
  std::uint64_t seed = 0;
  std::size_t draws = 1;

  static FisherMode expected() { return {}; }
  static FisherMode sampled(std::uint64_t seed, std::size_t draws) { return {Kind::sampled, seed, draws}; }
};

namespace detail {

/// Weighted output-space score vectors u_c with sum_c w_c u_c u_c^T equal
/// to (expected) or an unbiased estimate of (sampled) E_y[s s^T], where s is
/// the gradient of log P(y | z) with respect to the output z.
struct OutputScores {
  std::vector<Vector> directions;
  Vector weights;
};

inline OutputScores output_scores(std::span<const double> z, LossKind loss, const FisherMode& mode, Rng& rng) {
  OutputScores s;
  const std::size_t k = z.size();
  if (loss == LossKind::squared) {
    if (mode.kind == FisherMode::Kind::expected) {
      for (std::size_t c = 0; c < k; ++c) {
        Vector e(k, 0.0);
        e[c] = 1.0;
        s.directions.push_back(std::move(e));
        s.weights.push_back(1.0);
      }
    } else {
      std::normal_distribution<double> normal;
      for (std::size_t t = 0; t < mode.draws; ++t) {
        Vector eps(k);
        for (double& v : eps) v = normal(rng);
        s.directions.push_back(std::move(eps));
        s.weights.push_back(1.0 / static_cast<double>(mode.draws));
      }
    }
    return s;
  }
  const Vector p = softmax(z);
  auto score = [&](std::size_t c) {
    Vector u(k);
    for (std::size_t i = 0; i < k; ++i) u[i] = -p[i];
    u[c] += 1.0;
    return u;
  };
  if (mode.kind == FisherMode::Kind::expected) {
    for (std::size_t c = 0; c < k; ++c) {
      if (p[c] == 0.0) continue;
      s.directions.push_back(score(c));
      s.weights.push_back(p[c]);
    }
  } else {
    std::discrete_distribution<std::size_t> draw(p.begin(), p.end());
    for (std::size_t t = 0; t < mode.draws; ++t) {
      s.directions.push_back(score(draw(rng)));
      s.weights.push_back(1.0 / static_cast<double>(mode.draws));
    }
  }
  return s;
}

inline void check_mode(const FisherMode& mode) {
  if (mode.kind == FisherMode::Kind::sampled && mode.draws == 0)
    throw std::invalid_argument("FisherMode: sampled mode needs draws >= 1");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Two-layer network (squared loss)

/// F = (1/n) sum_j phi(W, x_j) phi(W, x_j)^T.
inline FullFisher full_fisher_two_layer(const TwoLayerReLU& net, std::span<const Example> data) {
  if (data.empty()) throw std::invalid_argument("full_fisher_two_layer: no data");
  const std::size_t d = net.num_params();
  // Stack feature maps and form Phi^T Phi / n with one GEMM.
  DenseMatrix phis(data.size(), d);
  for (std::size_t j = 0; j < data.size(); ++j) {
    const Vector phi = feature_map(net, data[j].x);
    std::copy(phi.begin(), phi.end(), phis.row(j).begin());
  }
  FullFisher f{DenseMatrix(d, d)};
  detail::view(f.matrix).noalias() =
      detail::view(phis).transpose() * detail::view(phis) * (1.0 / static_cast<double>(data.size()));
  symmetrize_from_upper(f.matrix);
  return f;
}

/// Entry k = (1/n) sum_j E_y[(d/dW_k log P(y | x_j, W))^2]. The residual
/// y - f(W, x) has unit variance, so expected mode gives phi_k^2 exactly.
inline DiagFisher diag_fisher(const TwoLayerReLU& net, std::span<const Example> data,
                              const FisherMode& mode = FisherMode::expected()) {
  if (data.empty()) throw std::invalid_argument("diag_fisher: no data");
  detail::check_mode(mode);
  Rng rng = substream(mode.seed, stream::kFisherSampling);
  std::normal_distribution<double> normal;
  DiagFisher f{Vector(net.num_params(), 0.0)};
  const double inv = 1.0 / static_cast<double>(data.size());
  for (const auto& ex : data) {
    const Vector phi = feature_map(net, ex.x);
    double w = 1.0;
    if (mode.kind == FisherMode::Kind::sampled) {
      w = 0.0;
      for (std::size_t t = 0; t < mode.draws; ++t) {
        const double e = normal(rng);
        w += e * e;
      }
      w /= static_cast<double>(mode.draws);
    }
    for (std::size_t k = 0; k < phi.size(); ++k) f.diagonal[k] += inv * w * phi[k] * phi[k];
  }
  return f;
}

// ---------------------------------------------------------------------------
// MLP

namespace detail {

inline void check_loss(const MLP& net, LossKind loss) {
  if (loss != loss_for(net)) throw std::invalid_argument("Fisher: loss kind does not match the network head");
}

}  // namespace detail

inline DiagFisher diag_fisher(const MLP& net, std::span<const Example> data, LossKind loss,
                              const FisherMode& mode = FisherMode::expected()) {
  if (data.empty()) throw std::invalid_argument("diag_fisher: no data");
  detail::check_loss(net, loss);
  detail::check_mode(mode);
  Rng rng = substream(mode.seed, stream::kFisherSampling);
  DiagFisher f{Vector(net.num_params(), 0.0)};
  const double inv = 1.0 / static_cast<double>(data.size());
  const auto& layers = net.layers();
  std::vector<Vector> g2(layers.size());
  for (const auto& ex : data) {
    const ForwardTrace trace = forward_trace(net, ex.x);
    const auto scores = detail::output_scores(trace.output(), loss, mode, rng);
    for (std::size_t l = 0; l < layers.size(); ++l) g2[l].assign(layers[l].out, 0.0);
    for (std::size_t c = 0; c < scores.directions.size(); ++c) {
      const auto deltas = backprop_preactivations(net, trace, scores.directions[c]);
      for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t i = 0; i < layers[l].out; ++i) g2[l][i] += scores.weights[c] * deltas[l][i] * deltas[l][i];
    }
    // (g a_j)^2 summed over scores = a_j^2 * sum_c w_c g_{c,i}^2
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const DenseLayer& layer = layers[l];
      const Vector& a = trace.inputs[l];
      double* out = f.diagonal.data() + layer.offset;
      for (std::size_t j = 0; j <= layer.in; ++j) {
        const double aj = j < layer.in ? a[j] : 1.0;
        const double a2 = inv * aj * aj;
        if (a2 == 0.0) continue;
        double* col = out + j * layer.out;
        for (std::size_t i = 0; i < layer.out; ++i) col[i] += a2 * g2[l][i];
      }
    }
  }
  return f;
}

/// Per-layer Kronecker factors A_l = (1/n) sum_j [a_j;1][a_j;1]^T and
/// B_l = (1/n) sum_j E_y[g_j g_j^T], g the pre-activation score gradient.
inline KfacFisher kfac_fisher(const MLP& net, std::span<const Example> data, LossKind loss,
                              const FisherMode& mode = FisherMode::expected()) {
  if (data.empty()) throw std::invalid_argument("kfac_fisher: no data");
  detail::check_loss(net, loss);
  detail::check_mode(mode);
  Rng rng = substream(mode.seed, stream::kFisherSampling);
  const auto& layers = net.layers();
  const std::size_t n = data.size();

  // Stack homogeneous inputs and weighted score gradients, then one
  // symmetric rank-k update per factor.
  std::vector<DenseMatrix> inputs;
  for (const auto& layer : layers) inputs.emplace_back(n, layer.in + 1);
  std::vector<std::vector<double>> grads(layers.size());
  std::vector<std::size_t> grad_rows(layers.size(), 0);

  for (std::size_t j = 0; j < n; ++j) {
    const ForwardTrace trace = forward_trace(net, data[j].x);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto row = inputs[l].row(j);
      std::copy(trace.inputs[l].begin(), trace.inputs[l].end(), row.begin());
      row[layers[l].in] = 1.0;
    }
    const auto scores = detail::output_scores(trace.output(), loss, mode, rng);
    for (std::size_t c = 0; c < scores.directions.size(); ++c) {
      const auto deltas = backprop_preactivations(net, trace, scores.directions[c]);
      const double w = std::sqrt(scores.weights[c]);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        for (double v : deltas[l]) grads[l].push_back(w * v);
        ++grad_rows[l];
      }
    }
  }

  KfacFisher f;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    KfacBlock blk{DenseMatrix(layers[l].in + 1, layers[l].in + 1), DenseMatrix(layers[l].out, layers[l].out)};
    detail::view(blk.a).noalias() = detail::view(inputs[l]).transpose() * detail::view(inputs[l]) * inv;
    const detail::ConstRowMajorMap g(grads[l].data(), static_cast<Eigen::Index>(grad_rows[l]),
                                     static_cast<Eigen::Index>(layers[l].out));
    detail::view(blk.b).noalias() = g.transpose() * g * inv;
    symmetrize_from_upper(blk.a);
    symmetrize_from_upper(blk.b);
    f.blocks.push_back(std::move(blk));
  }
  return f;
}

/// Adds eps * I to every factor, eps = rel * mean diagonal of that factor.
inline KfacFisher damp_kfac(KfacFisher f, double rel = 1e-4) {
  auto damp = [rel](DenseMatrix& m) {
    if (m.rows() == 0) return;
    const double eps = rel * m.trace() / static_cast<double>(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += eps;
  };
  for (auto& blk : f.blocks) {
    damp(blk.a);
    damp(blk.b);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Products

inline Vector fisher_matvec(const FisherApprox& f, std::span<const double> v) {
  const std::size_t d = fisher_dim(f);
  if (v.size() != d) {
    throw std::invalid_argument("fisher_matvec: vector length " + std::to_string(v.size()) + " != " +
                                std::to_string(d));
  }
  return std::visit(Overloaded{[&](const FullFisher& x) { return matvec(x.matrix, v); },
                               [&](const DiagFisher& x) {
                                 Vector out(d);
                                 for (std::size_t k = 0; k < d; ++k) out[k] = x.diagonal[k] * v[k];
                                 return out;
                               },
                               [&](const KfacFisher& x) {
                                 Vector out;
                                 out.reserve(d);
                                 std::size_t offset = 0;
                                 for (const auto& blk : x.blocks) {
                                   const Vector part = kron_matvec(blk.a, blk.b, v.subspan(offset, blk.dim()));
                                   out.insert(out.end(), part.begin(), part.end());
                                   offset += blk.dim();
                                 }
                                 return out;
                               }},
                    f);
}

/// Dense d x d form of any approximation (K-FAC as a block-diagonal of
/// Kronecker products). Intended for small d.
inline DenseMatrix materialize(const FisherApprox& f) {
  return std::visit(Overloaded{[](const FullFisher& x) { return x.matrix; },
                               [](const DiagFisher& x) { return DenseMatrix::diagonal(x.diagonal); },
                               [&](const KfacFisher& x) {
                                 const std::size_t d = fisher_dim(f);
                                 DenseMatrix out(d, d);
                                 std::size_t offset = 0;
                                 for (const auto& blk : x.blocks) {
                                   const DenseMatrix k = kron(blk.a, blk.b);
                                   for (std::size_t i = 0; i < k.rows(); ++i)
                                     for (std::size_t j = 0; j < k.cols(); ++j) out(offset + i, offset + j) = k(i, j);
                                   offset += blk.dim();
                                 }
                                 return out;
                               }},
                    f);
}

}  // namespace fedfisher
