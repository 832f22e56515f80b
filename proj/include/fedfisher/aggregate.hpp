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

// Server-side one-shot merging: FedAvg, FedFisher by projected gradient
// descent or Adam on the Fisher-weighted quadratic, and the diagonal
// Fisher-merge baseline.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedfisher/fisher.hpp"
#include "fedfisher/numerics.hpp"

namespace fedfisher {

/// What a client sends after local training: its model and a Fisher
/// approximation at that model.
struct ClientUpdate {
  Vector weights;
  FisherApprox fisher;
  std::size_t n = 1;
};

struct GradientDescent {
  std::optional<double> eta_s;  // empty: 1 / (1.01 * lambda_max estimate)
};

struct Adam {
  double eta_s = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 0.01;
};

struct ServerConfig {
  std::variant<GradientDescent, Adam> optimizer = GradientDescent{};
  std::size_t t_max = 2000;
  double stop_tol = 1e-10;
  /// Evaluate `validate` every `val_every` steps and keep the best iterate
  /// (Adam only). Higher scores are better.
  std::size_t val_every = 0;
  std::function<double(std::span<const double>)> validate;
  /// Weight clients by n_i / N (times M) instead of equally.
  bool weight_by_size = false;
  /// Called after every server step with (step, iterate).
  std::function<void(std::size_t, std::span<const double>)> on_step;
  double power_tol = 1e-7;
  std::size_t power_max_iters = 20000;
};

struct ServerResult {
  Vector weights;
  std::size_t steps = 0;
  bool converged = false;
  bool diverged = false;
  bool step_size_warning = false;
  double eta_s = 0.0;
  double lambda_max = 0.0;
  bool lambda_max_converged = true;
  double best_score = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_step = 0;
};

namespace detail {

inline Vector client_weights(std::span<const ClientUpdate> updates, bool by_size) {
  Vector w(updates.size(), 1.0);
  if (!by_size) return w;
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.n);
  if (!(total > 0.0)) throw std::invalid_argument("aggregate: client sizes sum to zero");
  for (std::size_t i = 0; i < updates.size(); ++i)
    w[i] = static_cast<double>(updates[i].n) * static_cast<double>(updates.size()) / total;
  return w;
}

inline std::size_t check_updates(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no client updates");
  const std::size_t d = updates.front().weights.size();
  for (const auto& u : updates) {
    if (u.weights.size() != d) throw std::invalid_argument("aggregate: client weight lengths differ");
  }
  return d;
}

}  // namespace detail

/// Sum of client Fishers as a linear operator. Full and diagonal Fishers are
/// pre-summed; K-FAC Fishers stay per client since Kronecker factorisations
/// do not add.
class FisherSum {
 public:
  FisherSum(std::span<const FisherApprox> fishers, std::span<const double> weights) {
    if (fishers.empty()) throw std::invalid_argument("FisherSum: no fishers");
    dim_ = fisher_dim(fishers.front());
    for (std::size_t i = 0; i < fishers.size(); ++i) {
      if (fisher_dim(fishers[i]) != dim_) throw std::invalid_argument("FisherSum: fisher dimensions differ");
      const double w = weights.empty() ? 1.0 : weights[i];
      std::visit(Overloaded{[&](const FullFisher& f) {
                              if (dense_.empty()) dense_ = DenseMatrix(dim_, dim_);
                              dense_ += w * f.matrix;
                            },
                            [&](const DiagFisher& f) {
                              if (diag_.empty()) diag_.assign(dim_, 0.0);
                              axpy(w, f.diagonal, diag_);
                            },
                            [&](const KfacFisher& f) { kfac_.push_back({&f, w}); }},
                 fishers[i]);
    }
    if (!dense_.empty() && !diag_.empty()) {
      for (std::size_t k = 0; k < dim_; ++k) dense_(k, k) += diag_[k];
      diag_.clear();
    }
  }

  std::size_t dim() const noexcept { return dim_; }

  Vector apply(std::span<const double> v) const {
    if (v.size() != dim_) throw std::invalid_argument("FisherSum: vector length mismatch");
    Vector out = dense_.empty() ? Vector(dim_, 0.0) : matvec(dense_, v);
    if (!diag_.empty())
      for (std::size_t k = 0; k < dim_; ++k) out[k] += diag_[k] * v[k];
    for (const auto& [f, w] : kfac_) {
      std::size_t offset = 0;
      for (const auto& blk : f->blocks) {
        const Vector part = kron_matvec(blk.a, blk.b, v.subspan(offset, blk.dim()));
        for (std::size_t k = 0; k < part.size(); ++k) out[offset + k] += w * part[k];
        offset += blk.dim();
      }
    }
    return out;
  }

 private:
  struct WeightedKfac {
    const KfacFisher* fisher;
    double weight;
  };
  std::size_t dim_ = 0;
  DenseMatrix dense_;
  Vector diag_;
  std::vector<WeightedKfac> kfac_;
};

namespace detail {

inline std::vector<FisherApprox> fishers_of(std::span<const ClientUpdate> updates) {
  std::vector<FisherApprox> out;
  out.reserve(updates.size());
  for (const auto& u : updates) out.push_back(u.fisher);
  return out;
}

struct ServerProblem {
  std::vector<FisherApprox> fishers;  // owns the operator's storage
  Vector weights;
  FisherSum op;
  Vector rhs;   // sum_i F_i W_i
  Vector mean;  // (weighted) average of W_i

  ServerProblem(std::span<const ClientUpdate> updates, bool by_size)
      : fishers(fishers_of(updates)), weights(client_weights(updates, by_size)), op(fishers, weights) {
    const std::size_t d = check_updates(updates);
    if (op.dim() != d) throw std::invalid_argument("aggregate: fisher dimension != weight length");
    rhs.assign(d, 0.0);
    mean.assign(d, 0.0);
    const double m = static_cast<double>(updates.size());
    for (std::size_t i = 0; i < updates.size(); ++i) {
      axpy(weights[i], fisher_matvec(updates[i].fisher, updates[i].weights), rhs);
      axpy(weights[i] / m, updates[i].weights, mean);
    }
  }

  Vector gradient(std::span<const double> w) const {
    Vector g = op.apply(w);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] -= rhs[k];
    return g;
  }
};

}  // namespace detail

/// Arithmetic mean of the client models (n_i-weighted when requested).
inline Vector fedavg(std::span<const ClientUpdate> updates, bool weight_by_size = false) {
  const std::size_t d = detail::check_updates(updates);
  const Vector w = detail::client_weights(updates, weight_by_size);
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < updates.size(); ++i)
    axpy(w[i] / static_cast<double>(updates.size()), updates[i].weights, mean);
  return mean;
}

inline EigenEstimate estimate_lmax(std::span<const FisherApprox> fishers, double tol = 1e-7,
                                   std::size_t max_iters = 20000) {
  const FisherSum op(fishers, {});
  return power_iteration_max_eig([&op](std::span<const double> v) { return op.apply(v); }, op.dim(), tol, max_iters);
}

/// sum_i (W - W_i)^T F_i (W - W_i)
inline double fedfisher_objective(std::span<const ClientUpdate> updates, std::span<const double> w) {
  double total = 0.0;
  for (const auto& u : updates) {
    const Vector diff = subtract(w, u.weights);
    total += dot(diff, fisher_matvec(u.fisher, diff));
  }
  return total;
}

/// Gradient descent W <- W - eta_s ((sum F_i) W - sum F_i W_i) from the
/// client mean. Stops after t_max steps or once the update norm falls below
/// stop_tol (1 + |W|).
inline ServerResult fedfisher_gd(std::span<const ClientUpdate> updates, const ServerConfig& cfg) {
  const auto* gd = std::get_if<GradientDescent>(&cfg.optimizer);
  if (!gd) throw std::invalid_argument("fedfisher_gd: server optimizer must be gradient descent");
  if (cfg.t_max == 0) throw std::invalid_argument("fedfisher_gd: t_max must be >= 1");
  const detail::ServerProblem prob(updates, cfg.weight_by_size);

  ServerResult res;
  const EigenEstimate lmax = power_iteration_max_eig([&](std::span<const double> v) { return prob.op.apply(v); },
                                                     prob.op.dim(), cfg.power_tol, cfg.power_max_iters);
  res.lambda_max = lmax.eigenvalue;
  res.lambda_max_converged = lmax.converged;
  res.weights = prob.mean;
  if (gd->eta_s) {
    res.eta_s = *gd->eta_s;
    res.step_size_warning = lmax.eigenvalue > 0.0 && res.eta_s > 1.0 / lmax.eigenvalue;
  } else {
    if (!(lmax.eigenvalue > 0.0)) {  // zero operator: the mean already solves the system
      res.converged = true;
      return res;
    }
    res.eta_s = 1.0 / (1.01 * lmax.eigenvalue);
  }

  Vector w = prob.mean;
  for (std::size_t t = 0; t < cfg.t_max; ++t) {
    const Vector g = prob.gradient(w);
    double step_norm = 0.0;
    Vector next = w;
    for (std::size_t k = 0; k < w.size(); ++k) {
      next[k] -= res.eta_s * g[k];
      step_norm += (res.eta_s * g[k]) * (res.eta_s * g[k]);
    }
    if (!all_finite(next) || !std::isfinite(step_norm)) {
      res.diverged = true;
      break;
    }
    w = std::move(next);
    res.steps = t + 1;
    if (cfg.on_step) cfg.on_step(res.steps, w);
    if (std::sqrt(step_norm) <= cfg.stop_tol * (1.0 + norm2(w))) {
      res.converged = true;
      break;
    }
  }
  res.weights = std::move(w);
  return res;
}

/// Adam on the same quadratic. With a validator, returns the iterate with
/// the best score among those checked every val_every steps.
inline ServerResult fedfisher_adam(std::span<const ClientUpdate> updates, const ServerConfig& cfg) {
  const auto* adam = std::get_if<Adam>(&cfg.optimizer);
  if (!adam) throw std::invalid_argument("fedfisher_adam: server optimizer must be Adam");
  if (cfg.t_max == 0) throw std::invalid_argument("fedfisher_adam: t_max must be >= 1");
  if (cfg.val_every > 0 && !cfg.validate) throw std::invalid_argument("fedfisher_adam: val_every set without a validator");
  const detail::ServerProblem prob(updates, cfg.weight_by_size);

  ServerResult res;
  res.eta_s = adam->eta_s;
  Vector w = prob.mean;
  Vector m1(w.size(), 0.0), m2(w.size(), 0.0);
  const bool validating = cfg.val_every > 0;
  double p1 = 1.0, p2 = 1.0;
  Vector last_good = w;
  for (std::size_t t = 1; t <= cfg.t_max; ++t) {
    const Vector g = prob.gradient(w);
    p1 *= adam->beta1;
    p2 *= adam->beta2;
    double step_norm = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m1[k] = adam->beta1 * m1[k] + (1.0 - adam->beta1) * g[k];
      m2[k] = adam->beta2 * m2[k] + (1.0 - adam->beta2) * g[k] * g[k];
      const double mhat = m1[k] / (1.0 - p1);
      const double vhat = m2[k] / (1.0 - p2);
      const double step = adam->eta_s * mhat / (std::sqrt(vhat) + adam->eps);
      w[k] -= step;
      step_norm += step * step;
    }
    if (!all_finite(w) || !std::isfinite(step_norm)) {
      res.diverged = true;
      w = last_good;
      break;
    }
    last_good = w;
    res.steps = t;
    if (cfg.on_step) cfg.on_step(t, w);
    if (validating && t % cfg.val_every == 0) {
      const double score = cfg.validate(w);
      if (std::isnan(res.best_score) || score > res.best_score) {
        res.best_score = score;
        res.best_step = t;
        res.weights = w;
      }
    }
    if (std::sqrt(step_norm) <= cfg.stop_tol * (1.0 + norm2(w))) {
      res.converged = true;
      break;
    }
  }
  if (!validating || std::isnan(res.best_score)) {
    res.weights = w;
    res.best_step = res.steps;
  }
  return res;
}

/// Coordinatewise sum_i max(F_ik, floor) W_ik / sum_i max(F_ik, floor).
inline Vector fisher_merge_diag(std::span<const ClientUpdate> updates, double fisher_floor = 1e-6) {
  const std::size_t d = detail::check_updates(updates);
  Vector num(d, 0.0), den(d, 0.0);
  for (const auto& u : updates) {
    const auto* diag = std::get_if<DiagFisher>(&u.fisher);
    if (!diag) throw std::invalid_argument("fisher_merge_diag: every client must send a diagonal Fisher");
    if (diag->diagonal.size() != d) throw std::invalid_argument("fisher_merge_diag: fisher length mismatch");
    for (std::size_t k = 0; k < d; ++k) {
      const double f = std::max(diag->diagonal[k], fisher_floor);
      num[k] += f * u.weights[k];
      den[k] += f;
    }
  }
  for (std::size_t k = 0; k < d; ++k) num[k] /= den[k];
  return num;
}

}  // namespace fedfisher
