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

// Network definitions with analytic forward/backward passes, losses and the
// local SGD trainer run by every client.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedfisher/datasets.hpp"
#include "fedfisher/numerics.hpp"
#include "fedfisher/random.hpp"

namespace fedfisher {

enum class LossKind {
  squared,                // 1/2 (y - z)^2, Gaussian likelihood with unit variance
  softmax_cross_entropy,  // -log softmax(z)_y, categorical likelihood
};

// ---------------------------------------------------------------------------
// Two-layer ReLU network f(W, x) = 1/sqrt(m) sum_r a_r relu(w_r^T x); only
// the first layer is trainable.

struct TwoLayerReLU {
  std::size_t m = 0;
  std::size_t p = 0;
  Vector first_layer;   // m x p row-major, row r = w_r (so this is vec(w_1..w_m))
  Vector second_layer;  // a_r in {-1, +1}

  double scale() const { return 1.0 / std::sqrt(static_cast<double>(m)); }
  std::size_t num_params() const noexcept { return first_layer.size(); }
  const Vector& parameters() const noexcept { return first_layer; }

  TwoLayerReLU with_parameters(Vector params) const {
    if (params.size() != first_layer.size()) throw std::invalid_argument("TwoLayerReLU: parameter length mismatch");
    TwoLayerReLU out = *this;
    out.first_layer = std::move(params);
    return out;
  }

  void validate() const {
    if (first_layer.size() != m * p || second_layer.size() != m)
      throw std::invalid_argument("TwoLayerReLU: inconsistent dimensions");
    for (double a : second_layer)
      if (a != 1.0 && a != -1.0) throw std::invalid_argument("TwoLayerReLU: second layer must be +/-1");
  }
};

/// First layer w_r ~ N(0, kappa I) (kappa is a variance), signs a_r = +/-1
/// with probability 1/2.
inline TwoLayerReLU init_two_layer(std::size_t m, std::size_t p, double kappa, std::uint64_t seed) {
  if (m == 0 || p == 0) throw std::invalid_argument("init_two_layer: m and p must be >= 1");
  if (!(kappa > 0.0)) throw std::invalid_argument("init_two_layer: kappa must be positive");
  Rng rng = substream(seed, stream::kModelInit);
  std::normal_distribution<double> normal(0.0, std::sqrt(kappa));
  std::bernoulli_distribution coin(0.5);
  TwoLayerReLU net{m, p, Vector(m * p), Vector(m)};
  for (double& w : net.first_layer) w = normal(rng);
  for (double& a : net.second_layer) a = coin(rng) ? 1.0 : -1.0;
  return net;
}

inline double forward(const TwoLayerReLU& net, std::span<const double> x) {
  if (x.size() != net.p) throw std::invalid_argument("forward: input length mismatch");
  double acc = 0.0;
  for (std::size_t r = 0; r < net.m; ++r) {
    const double pre = dot(std::span(net.first_layer).subspan(r * net.p, net.p), x);
    if (pre > 0.0) acc += net.second_layer[r] * pre;
  }
  return acc * net.scale();
}

/// phi(W, x) with block r = a_r x 1{x^T w_r >= 0} / sqrt(m); f = phi^T vec(W).
inline Vector feature_map(const TwoLayerReLU& net, std::span<const double> x) {
  if (x.size() != net.p) throw std::invalid_argument("feature_map: input length mismatch");
  Vector phi(net.m * net.p, 0.0);
  const double s = net.scale();
  for (std::size_t r = 0; r < net.m; ++r) {
    const double pre = dot(std::span(net.first_layer).subspan(r * net.p, net.p), x);
    if (pre >= 0.0) {
      for (std::size_t k = 0; k < net.p; ++k) phi[r * net.p + k] = s * net.second_layer[r] * x[k];
    }
  }
  return phi;
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron. Hidden layers use ReLU, the last layer is linear.
// Each layer stores [W | b] (out x (in+1)) column-major in the flat
// parameter vector, so the gradient of a layer is vec(delta [a; 1]^T).

enum class Activation { relu, identity };
enum class Head { regression, softmax };

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::relu;
  std::size_t offset = 0;

  std::size_t num_params() const noexcept { return out * (in + 1); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

class MLP {
 public:
  MLP() = default;

  /// `dims` = {m_0, m_1, ..., m_L}; parameters are zero until assigned.
  MLP(std::vector<std::size_t> dims, Head head) : dims_(std::move(dims)), head_(head) {
    if (dims_.size() < 2) throw std::invalid_argument("MLP: need at least input and output dims");
    if (std::find(dims_.begin(), dims_.end(), std::size_t{0}) != dims_.end())
      throw std::invalid_argument("MLP: zero-width layer");
    if (head_ == Head::regression && dims_.back() != 1)
      throw std::invalid_argument("MLP: regression head needs a single output");
    std::size_t offset = 0;
    for (std::size_t l = 1; l < dims_.size(); ++l) {
      DenseLayer layer{dims_[l - 1], dims_[l], l + 1 == dims_.size() ? Activation::identity : Activation::relu,
                       offset};
      offset += layer.num_params();
      layers_.push_back(layer);
    }
    params_.assign(offset, 0.0);
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  Head head() const noexcept { return head_; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t output_dim() const noexcept { return dims_.back(); }
  std::size_t num_params() const noexcept { return params_.size(); }
  const Vector& parameters() const noexcept { return params_; }
  Vector& mutable_parameters() noexcept { return params_; }

  MLP with_parameters(Vector params) const {
    if (params.size() != params_.size()) throw std::invalid_argument("MLP: parameter length mismatch");
    MLP out = *this;
    out.params_ = std::move(params);
    return out;
  }

  std::span<const double> layer_params(std::size_t l) const {
    return std::span(params_).subspan(layers_[l].offset, layers_[l].num_params());
  }

  friend bool operator==(const MLP&, const MLP&) = default;

 private:
  std::vector<std::size_t> dims_;
  Head head_ = Head::softmax;
  std::vector<DenseLayer> layers_;
  Vector params_;
};

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline MLP init_mlp(std::vector<std::size_t> dims, Head head, std::uint64_t seed) {
  MLP net(std::move(dims), head);
  Rng rng = substream(seed, stream::kModelInit);
  Vector params(net.num_params());
  for (const auto& layer : net.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (std::size_t k = 0; k < layer.num_params(); ++k) params[layer.offset + k] = uni(rng);
  }
  return net.with_parameters(std::move(params));
}

inline LossKind loss_for(const MLP& net) {
  return net.head() == Head::softmax ? LossKind::softmax_cross_entropy : LossKind::squared;
}

/// Layer inputs and pre-activations of one forward pass.
struct ForwardTrace {
  std::vector<Vector> inputs;  // inputs[l] feeds layer l (inputs[0] = x)
  std::vector<Vector> pre;     // pre[l] = W_l inputs[l] + b_l
  const Vector& output() const { return pre.back(); }
};

inline ForwardTrace forward_trace(const MLP& net, std::span<const double> x) {
  if (x.size() != net.input_dim()) throw std::invalid_argument("forward: input length mismatch");
  ForwardTrace t;
  t.inputs.reserve(net.layers().size());
  t.pre.reserve(net.layers().size());
  t.inputs.emplace_back(x.begin(), x.end());
  const Vector& params = net.parameters();
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const DenseLayer& layer = net.layers()[l];
    const double* w = params.data() + layer.offset;
    const Vector& a = t.inputs[l];
    Vector z(w + layer.in * layer.out, w + layer.in * layer.out + layer.out);  // bias column
    for (std::size_t j = 0; j < layer.in; ++j) {
      const double aj = a[j];
      if (aj == 0.0) continue;
      const double* col = w + j * layer.out;
      for (std::size_t i = 0; i < layer.out; ++i) z[i] += aj * col[i];
    }
    if (l + 1 < net.layers().size()) {
      Vector next(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) next[i] = z[i] > 0.0 ? z[i] : 0.0;
      t.inputs.push_back(std::move(next));
    }
    t.pre.push_back(std::move(z));
  }
  return t;
}

inline Vector forward(const MLP& net, std::span<const double> x) { return forward_trace(net, x).output(); }

/// Propagates d(objective)/d(output) back through the network; returns the
/// gradient with respect to each layer's pre-activation (ReLU'(0) = 0).
inline std::vector<Vector> backprop_preactivations(const MLP& net, const ForwardTrace& trace, Vector output_grad) {
  const std::size_t nl = net.layers().size();
  std::vector<Vector> deltas(nl);
  deltas[nl - 1] = std::move(output_grad);
  const Vector& params = net.parameters();
  for (std::size_t l = nl - 1; l > 0; --l) {
    const DenseLayer& layer = net.layers()[l];
    const double* w = params.data() + layer.offset;
    const Vector& delta = deltas[l];
    const Vector& below = trace.pre[l - 1];
    Vector prev(layer.in, 0.0);
    for (std::size_t j = 0; j < layer.in; ++j) {
      if (below[j] <= 0.0) continue;
      const double* col = w + j * layer.out;
      double s = 0.0;
      for (std::size_t i = 0; i < layer.out; ++i) s += col[i] * delta[i];
      prev[j] = s;
    }
    deltas[l - 1] = std::move(prev);
  }
  return deltas;
}

inline Vector softmax(std::span<const double> z) {
  const double zmax = *std::max_element(z.begin(), z.end());
  Vector p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += (p[i] = std::exp(z[i] - zmax));
  for (double& v : p) v /= total;
  return p;
}

/// Loss of one output vector and its derivative with respect to the output.
inline double output_loss(std::span<const double> z, double y, LossKind loss, Vector* dz = nullptr) {
  if (loss == LossKind::squared) {
    if (z.size() != 1) throw std::invalid_argument("squared loss expects a scalar output");
    const double r = z[0] - y;
    if (dz) *dz = {r};
    return 0.5 * r * r;
  }
  const auto label = static_cast<std::size_t>(y);
  if (y < 0.0 || label >= z.size()) throw std::invalid_argument("softmax loss: label out of range");
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - zmax);
  const double log_norm = zmax + std::log(total);
  if (dz) {
    dz->resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) (*dz)[i] = std::exp(z[i] - log_norm);
    (*dz)[label] -= 1.0;
  }
  return log_norm - z[label];
}

// Accumulates scale * vec(delta [a; 1]^T) into `grad` at the layer offset.
inline void accumulate_layer_gradient(const DenseLayer& layer, std::span<const double> a,
                                      std::span<const double> delta, double scale, std::span<double> grad) {
  double* g = grad.data() + layer.offset;
  for (std::size_t j = 0; j < layer.in; ++j) {
    const double aj = scale * a[j];
    if (aj == 0.0) continue;
    double* col = g + j * layer.out;
    for (std::size_t i = 0; i < layer.out; ++i) col[i] += aj * delta[i];
  }
  double* bias = g + layer.in * layer.out;
  for (std::size_t i = 0; i < layer.out; ++i) bias[i] += scale * delta[i];
}

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;
};

inline LossAndGradient loss_and_gradient(const MLP& net, std::span<const Example> batch, LossKind loss) {
  if (batch.empty()) throw std::invalid_argument("gradient: empty batch");
  LossAndGradient out{0.0, Vector(net.num_params(), 0.0)};
  const double inv = 1.0 / static_cast<double>(batch.size());
  Vector dz;
  for (const Example& ex : batch) {
    const ForwardTrace trace = forward_trace(net, ex.x);
    out.loss += output_loss(trace.output(), ex.y, loss, &dz) * inv;
    const auto deltas = backprop_preactivations(net, trace, dz);
    for (std::size_t l = 0; l < net.layers().size(); ++l)
      accumulate_layer_gradient(net.layers()[l], trace.inputs[l], deltas[l], inv, out.gradient);
  }
  return out;
}

inline LossAndGradient loss_and_gradient(const TwoLayerReLU& net, std::span<const Example> batch, LossKind loss) {
  if (batch.empty()) throw std::invalid_argument("gradient: empty batch");
  if (loss != LossKind::squared) throw std::invalid_argument("TwoLayerReLU supports the squared loss only");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = batch.size();
  RowMat x(n, net.p);
  Eigen::VectorXd y(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (batch[j].x.size() != net.p) throw std::invalid_argument("gradient: input length mismatch");
    x.row(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::RowVectorXd>(batch[j].x.data(), net.p);
    y[static_cast<Eigen::Index>(j)] = batch[j].y;
  }
  const Eigen::Map<const RowMat> w(net.first_layer.data(), net.m, net.p);
  const Eigen::Map<const Eigen::VectorXd> a(net.second_layer.data(), net.m);
  const RowMat pre = x * w.transpose();  // n x m
  const double s = net.scale();
  const Eigen::VectorXd f = s * (pre.cwiseMax(0.0) * a);
  const Eigen::VectorXd resid = f - y;
  const double inv = 1.0 / static_cast<double>(n);

  // gradient = mean_j resid_j phi(W, x_j); phi keeps units with pre >= 0
  RowMat coeff = (pre.array() >= 0.0).cast<double>().matrix();
  coeff = (resid.asDiagonal() * coeff) * (a * (s * inv)).asDiagonal();
  LossAndGradient out{0.5 * resid.squaredNorm() * inv, Vector(net.num_params())};
  Eigen::Map<RowMat>(out.gradient.data(), net.m, net.p) = coeff.transpose() * x;
  return out;
}

template <class Model>
Vector gradient(const Model& net, std::span<const Example> batch, LossKind loss) {
  return loss_and_gradient(net, batch, loss).gradient;
}

// ---------------------------------------------------------------------------
// Evaluation

inline double example_loss(const TwoLayerReLU& net, const Example& ex, LossKind loss) {
  if (loss != LossKind::squared) throw std::invalid_argument("TwoLayerReLU supports the squared loss only");
  const double r = forward(net, ex.x) - ex.y;
  return 0.5 * r * r;
}

inline double example_loss(const MLP& net, const Example& ex, LossKind loss) {
  return output_loss(forward(net, ex.x), ex.y, loss);
}

/// Mean per-example loss.
template <class Model>
double loss_eval(const Model& net, std::span<const Example> examples, LossKind loss) {
  if (examples.empty()) throw std::invalid_argument("loss_eval: no examples");
  double total = 0.0;
  for (const auto& ex : examples) total += example_loss(net, ex, loss);
  return total / static_cast<double>(examples.size());
}

/// Fraction of examples whose arg-max output equals the label.
inline double accuracy_eval(const MLP& net, std::span<const Example> examples) {
  if (examples.empty()) throw std::invalid_argument("accuracy_eval: no examples");
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    const Vector z = forward(net, ex.x);
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (pred == ex.label()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Local training

enum class TrainUnit { steps, epochs };

struct TrainConfig {
  double eta = 0.01;
  double momentum = 0.0;
  std::size_t count = 1;  // K steps or E epochs, per `unit`
  TrainUnit unit = TrainUnit::epochs;
  std::size_t batch_size = 64;

  void validate() const {
    if (!(eta >= 0.0)) throw std::invalid_argument("TrainConfig: eta must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  }
};

template <class Model>
struct TrainResult {
  Model model;
  bool diverged = false;
  std::size_t steps = 0;
  double last_batch_loss = 0.0;
};

/// SGD with heavy-ball momentum (v <- mu v + g; W <- W - eta v). Batches
/// come from one shuffled permutation per epoch; with batch_size >= n every
/// step is full-batch gradient descent. Stops early, keeping the last finite
/// iterate, if the loss or parameters become non-finite.
template <class Model>
TrainResult<Model> sgd_train(const Model& init, std::span<const Example> data, const TrainConfig& cfg,
                             std::uint64_t seed, LossKind loss) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("sgd_train: no data");
  TrainResult<Model> out{init};
  const std::size_t n = data.size();
  const std::size_t batch = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = cfg.unit == TrainUnit::steps ? cfg.count : cfg.count * per_epoch;
  if (total_steps == 0 || cfg.eta == 0.0) return out;

  Rng rng = substream(seed, stream::kTraining);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Example> scratch;
  const bool full_batch = batch == n;

  Vector params = init.parameters();
  Vector velocity(params.size(), 0.0);
  Model current = init;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const std::size_t pos = step % per_epoch;
    std::span<const Example> mb = data;
    if (!full_batch) {
      if (pos == 0) std::shuffle(order.begin(), order.end(), rng);
      const std::size_t lo = pos * batch, hi = std::min(n, lo + batch);
      scratch.clear();
      for (std::size_t k = lo; k < hi; ++k) scratch.push_back(data[order[k]]);
      mb = scratch;
    }
    LossAndGradient lg = loss_and_gradient(current, mb, loss);
    if (!std::isfinite(lg.loss) || !all_finite(lg.gradient)) {
      out.diverged = true;
      break;
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      velocity[k] = cfg.momentum * velocity[k] + lg.gradient[k];
      params[k] -= cfg.eta * velocity[k];
    }
    if (!all_finite(params)) {
      out.diverged = true;
      break;
    }
    current = current.with_parameters(params);
    out.model = current;
    out.steps = step + 1;
    out.last_batch_loss = lg.loss;
  }
  return out;
}

}  // namespace fedfisher
