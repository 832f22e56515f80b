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

// Client and server sides of a federated round, with optional compression of
// what clients upload, and the multi-round driver built on top of them.

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedfisher/aggregate.hpp"
#include "fedfisher/compress.hpp"
#include "fedfisher/datasets.hpp"
#include "fedfisher/fisher.hpp"
#include "fedfisher/models.hpp"
#include "fedfisher/random.hpp"

namespace fedfisher {

enum class Method { fedavg, fedfisher_full, fedfisher_diag, fedfisher_kfac, fishermerge };

inline constexpr Method kAllMethods[] = {Method::fedavg, Method::fedfisher_full, Method::fedfisher_diag,
                                         Method::fedfisher_kfac, Method::fishermerge};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedfisher_full: return "fedfisher-full";
    case Method::fedfisher_diag: return "fedfisher-diag";
    case Method::fedfisher_kfac: return "fedfisher-kfac";
    case Method::fishermerge: return "fishermerge";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  return std::nullopt;
}

struct CompressionConfig {
  bool enabled = false;
  unsigned weight_s_q = 2;  // weights, quantised per layer
  unsigned diag_s_q = 2;    // diagonal Fisher, per layer
  unsigned kfac_s_q = 4;    // K-FAC singular factors
  std::optional<double> kfac_s_v;  // empty: largest uniform rank that fits the FedAvg budget
};

struct RoundConfig {
  TrainConfig local;
  ServerConfig server;
  LossKind loss = LossKind::softmax_cross_entropy;
  FisherMode fisher_mode;
  CompressionConfig compression;
  double fisher_floor = 1e-6;
  double kfac_damping = 1e-4;  // relative to the mean diagonal; 0 disables
};

// ---------------------------------------------------------------------------
// Layer structure used for per-layer quantisation and the K-FAC budget

inline std::vector<std::size_t> layer_sizes(const TwoLayerReLU& net) { return {net.num_params()}; }

inline std::vector<std::size_t> layer_sizes(const MLP& net) {
  std::vector<std::size_t> out;
  for (const auto& l : net.layers()) out.push_back(l.num_params());
  return out;
}

inline std::vector<KfacFactorDims> kfac_factor_dims(const MLP& net) {
  std::vector<KfacFactorDims> out;
  for (const auto& l : net.layers()) out.push_back({l.in + 1, l.out});
  return out;
}

// ---------------------------------------------------------------------------
// Client side

inline FisherApprox compute_fisher(const TwoLayerReLU& net, std::span<const Example> data, Method method,
                                   const RoundConfig& cfg) {
  switch (method) {
    case Method::fedfisher_full: return full_fisher_two_layer(net, data);
    case Method::fedfisher_diag:
    case Method::fishermerge: return diag_fisher(net, data, cfg.fisher_mode);
    case Method::fedfisher_kfac: throw std::invalid_argument("fedfisher-kfac needs an MLP model");
    case Method::fedavg: break;
  }
  return DiagFisher{};
}

inline FisherApprox compute_fisher(const MLP& net, std::span<const Example> data, Method method,
                                   const RoundConfig& cfg) {
  switch (method) {
    case Method::fedfisher_full: return FullFisher{materialize(diag_fisher(net, data, cfg.loss, cfg.fisher_mode))};
    case Method::fedfisher_diag:
    case Method::fishermerge: return diag_fisher(net, data, cfg.loss, cfg.fisher_mode);
    case Method::fedfisher_kfac: return kfac_fisher(net, data, cfg.loss, cfg.fisher_mode);
    case Method::fedavg: break;
  }
  return DiagFisher{};
}

struct ClientResult {
  ClientUpdate update;  // as received by the server (after any lossy coding)
  std::uint64_t weight_bits = 0;
  std::uint64_t fisher_bits = 0;
  double train_seconds = 0.0;
  double fisher_seconds = 0.0;
  bool diverged = false;

  std::uint64_t bits() const { return weight_bits + fisher_bits; }
};

namespace detail {

struct Coded {
  Vector values;
  std::uint64_t bits = 0;
};

/// Quantise each layer slice separately; each carries its own scale.
inline Coded code_per_layer(std::span<const double> x, const std::vector<std::size_t>& sizes, unsigned s_q) {
  Coded out;
  out.values.reserve(x.size());
  std::size_t offset = 0;
  for (std::size_t len : sizes) {
    const QuantizedVector q = quantize(x.subspan(offset, len), s_q);
    const Vector back = dequantize(q);
    out.values.insert(out.values.end(), back.begin(), back.end());
    out.bits += bit_cost(q);
    offset += len;
  }
  if (offset != x.size()) throw std::logic_error("code_per_layer: layer sizes do not cover the vector");
  return out;
}

inline std::uint64_t raw_fisher_bits(const FisherApprox& f) {
  return std::visit(Overloaded{[](const FullFisher& x) { return bit_cost(RawVector{x.matrix.size()}); },
                               [](const DiagFisher& x) { return bit_cost(RawVector{x.diagonal.size()}); },
                               [](const KfacFisher& x) {
                                 std::uint64_t total = 0;
                                 for (const auto& b : x.blocks) total += bit_cost(RawVector{b.a.size() + b.b.size()});
                                 return total;
                               }},
                    f);
}

template <class Model>
KfacFisher code_kfac(const KfacFisher& f, const Model& net, const CompressionConfig& cc, std::uint64_t& bits) {
  if constexpr (std::is_same_v<Model, MLP>) {
    const auto dims = kfac_factor_dims(net);
    std::vector<std::size_t> ranks;
    if (cc.kfac_s_v) {
      for (const auto& fd : dims) ranks.push_back(std::max<std::size_t>(1, svd_rank_for(std::max(fd.a, fd.b), *cc.kfac_s_v)));
    } else {
      const KfacBudgetPlan plan = kfac_budget_plan(dims, net.num_params(), cc.kfac_s_q);
      if (!plan.feasible) throw std::invalid_argument("K-FAC compression: " + plan.reason);
      ranks = plan.layer_ranks;
    }
    const CompressedKFAC c = compress_kfac(f, ranks, cc.kfac_s_q);
    bits = bit_cost(c);
    return decompress_kfac(c);
  } else {
    (void)net;
    (void)cc;
    bits = raw_fisher_bits(f);
    return f;
  }
}

}  // namespace detail

/// Local training from `start`, then the Fisher the method needs, then the
/// (optionally lossy) upload.
template <class Model>
ClientResult run_client(const Model& start, std::span<const Example> data, Method method, const RoundConfig& cfg,
                        std::uint64_t seed) {
  using Clock = std::chrono::steady_clock;
  ClientResult out;
  const auto t0 = Clock::now();
  TrainResult<Model> trained = sgd_train(start, data, cfg.local, seed, cfg.loss);
  const auto t1 = Clock::now();
  out.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  out.diverged = trained.diverged;
  const Model& local = trained.model;

  FisherApprox fisher = DiagFisher{};
  if (method != Method::fedavg) {
    RoundConfig fc = cfg;
    if (fc.fisher_mode.kind == FisherMode::Kind::sampled) fc.fisher_mode.seed = substream_seed(seed, stream::kFisherSampling);
    fisher = compute_fisher(local, data, method, fc);
  }
  out.fisher_seconds = std::chrono::duration<double>(Clock::now() - t1).count();

  const auto sizes = layer_sizes(local);
  const Vector params = local.parameters();
  const CompressionConfig& cc = cfg.compression;
  // FedAvg is the uncompressed 32 d reference the other methods are held to
  if (cc.enabled && method != Method::fedavg) {
    detail::Coded w = detail::code_per_layer(params, sizes, cc.weight_s_q);
    out.update.weights = std::move(w.values);
    out.weight_bits = w.bits;
  } else {
    out.update.weights = params;
    out.weight_bits = bit_cost(RawVector{params.size()});
  }

  if (method != Method::fedavg) {
    if (!cc.enabled) {
      out.fisher_bits = detail::raw_fisher_bits(fisher);
    } else if (auto* diag = std::get_if<DiagFisher>(&fisher)) {
      detail::Coded f = detail::code_per_layer(diag->diagonal, sizes, cc.diag_s_q);
      for (double& v : f.values) v = std::max(v, 0.0);
      diag->diagonal = std::move(f.values);
      out.fisher_bits = f.bits;
    } else if (auto* kf = std::get_if<KfacFisher>(&fisher)) {
      *kf = detail::code_kfac(*kf, local, cc, out.fisher_bits);
    } else {
      out.fisher_bits = detail::raw_fisher_bits(fisher);
    }
  }
  out.update.fisher = std::move(fisher);
  out.update.n = data.size();
  return out;
}

// ---------------------------------------------------------------------------
// Server side

struct ServerOutcome {
  Vector weights;
  ServerResult detail;  // optimizer diagnostics; only weights set for fedavg / fishermerge
};

inline ServerOutcome run_server(std::vector<ClientUpdate> updates, Method method, const RoundConfig& cfg) {
  ServerOutcome out;
  switch (method) {
    case Method::fedavg:
      out.weights = fedavg(updates, cfg.server.weight_by_size);
      break;
    case Method::fishermerge:
      out.weights = fisher_merge_diag(updates, cfg.fisher_floor);
      break;
    case Method::fedfisher_full:
    case Method::fedfisher_diag:
    case Method::fedfisher_kfac: {
      if (method == Method::fedfisher_kfac && cfg.kfac_damping > 0.0) {
        for (auto& u : updates)
          if (auto* kf = std::get_if<KfacFisher>(&u.fisher)) *kf = damp_kfac(std::move(*kf), cfg.kfac_damping);
      }
      out.detail = std::holds_alternative<Adam>(cfg.server.optimizer) ? fedfisher_adam(updates, cfg.server)
                                                                       : fedfisher_gd(updates, cfg.server);
      out.weights = out.detail.weights;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rounds

inline std::uint64_t client_seed(std::uint64_t master, std::size_t round, std::size_t client) {
  return substream_seed(master, (static_cast<std::uint64_t>(round) << 20) + client);
}

struct RoundMetrics {
  double loss = 0.0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t bits = 0;  // uploaded by all clients this round
  double client_seconds = 0.0;
  double server_seconds = 0.0;
  bool diverged = false;
};

template <class Model>
struct FewShotResult {
  std::vector<Model> models;  // global model after each round
  std::vector<RoundMetrics> metrics;
};

/// Evaluates a global model; fills loss and (for classification) accuracy.
template <class Model>
using Evaluator = std::function<RoundMetrics(const Model&)>;

/// Round r broadcasts the current global model, every client trains from it
/// and uploads, and the server aggregates with `method`. A one-round run is
/// the one-shot setting.
template <class Model>
FewShotResult<Model> few_shot_rounds(const FederatedDataset& data, const Model& init, std::size_t rounds,
                                     const RoundConfig& cfg, Method method, std::uint64_t seed,
                                     const Evaluator<Model>& evaluate) {
  if (rounds == 0) throw std::invalid_argument("few_shot_rounds: rounds must be >= 1");
  using Clock = std::chrono::steady_clock;
  FewShotResult<Model> out;
  Model global = init;
  for (std::size_t r = 0; r < rounds; ++r) {
    RoundMetrics m;
    std::vector<ClientUpdate> updates;
    for (std::size_t i = 0; i < data.num_clients(); ++i) {
      const std::vector<Example> local = data.client_examples(i);
      ClientResult c = run_client(global, local, method, cfg, client_seed(seed, r, i));
      m.bits += c.bits();
      m.client_seconds += c.train_seconds + c.fisher_seconds;
      m.diverged = m.diverged || c.diverged;
      updates.push_back(std::move(c.update));
    }
    const auto t0 = Clock::now();
    ServerOutcome s = run_server(std::move(updates), method, cfg);
    m.server_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    m.diverged = m.diverged || s.detail.diverged || !all_finite(s.weights);
    if (all_finite(s.weights)) global = global.with_parameters(s.weights);
    const RoundMetrics e = evaluate ? evaluate(global) : RoundMetrics{};
    m.loss = e.loss;
    m.accuracy = e.accuracy;
    out.models.push_back(global);
    out.metrics.push_back(m);
  }
  return out;
}

}  // namespace fedfisher
