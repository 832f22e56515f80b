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

// Experiment runners behind the command-line tool: configuration, the five
// experiment kinds, and CSV output.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "fedfisher/datasets.hpp"
#include "fedfisher/federated.hpp"
#include "fedfisher/models.hpp"

namespace fedfisher {

enum class Task { synthetic_width, synthetic_steps, one_shot, few_shot, compress_bench };

inline constexpr std::pair<Task, const char*> kTaskNames[] = {{Task::synthetic_width, "synthetic-width"},
                                                              {Task::synthetic_steps, "synthetic-steps"},
                                                              {Task::one_shot, "one-shot"},
                                                              {Task::few_shot, "few-shot"},
                                                              {Task::compress_bench, "compress-bench"}};

inline std::string task_name(Task t) {
  for (const auto& [task, name] : kTaskNames)
    if (task == t) return name;
  return "?";
}

inline std::optional<Task> parse_task(const std::string& s) {
  for (const auto& [task, name] : kTaskNames)
    if (s == name) return task;
  return std::nullopt;
}

/// A bad configuration key or value.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

enum class DataSource { synthetic, image_like, idx, csv };

struct ExperimentConfig {
  Task task = Task::one_shot;

  // [experiment]
  std::vector<std::uint64_t> seeds;
  std::vector<Method> methods;
  std::vector<double> sweep;  // widths, local steps K, or Dirichlet alphas
  std::size_t rounds = 1;
  bool record_time = true;
  std::string out;

  // [data]
  DataSource source = DataSource::image_like;
  std::size_t clients = 5;
  double alpha = 0.1;  // few-shot and compress-bench
  std::size_t n_per_client = 100;
  std::size_t p = 2;
  std::size_t n_train = 5000;
  std::size_t n_test = 1000;
  std::size_t val_size = 500;
  std::uint64_t data_seed = 0;
  double image_noise = 0.15;
  std::size_t image_side = 28;
  bool normalize = false;  // scale every input to unit L2 norm
  std::string train_images, train_labels, test_images, test_labels, train_csv, test_csv;

  // [model]
  std::size_t width = 512;
  double kappa = 0.5;
  std::vector<std::size_t> dims{784, 64, 10};

  // [local], [server], [fisher], [compress]
  RoundConfig round;

  // compress-bench grid; s_v = 0 stands for the budget planner
  std::vector<unsigned> bench_sq{2, 4, 6};
  std::vector<double> bench_sv{0.0};
};

inline ExperimentConfig default_config(Task task) {
  ExperimentConfig c;
  c.task = task;
  RoundConfig& r = c.round;
  switch (task) {
    case Task::synthetic_width:
    case Task::synthetic_steps:
      c.source = DataSource::synthetic;
      c.clients = 2;
      c.methods = {Method::fedfisher_full};
      r.loss = LossKind::squared;
      r.local = {0.1, 0.0, 2048, TrainUnit::steps, std::numeric_limits<std::size_t>::max()};
      r.server.optimizer = GradientDescent{0.001};
      r.server.t_max = 10000;
      r.kfac_damping = 0.0;
      if (task == Task::synthetic_width) {
        for (std::uint64_t s = 0; s < 50; ++s) c.seeds.push_back(s);
        c.sweep = {32, 64, 128, 256, 512};
      } else {
        for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
        for (int k = 4; k <= 12; ++k) c.sweep.push_back(std::ldexp(1.0, k));
      }
      break;
    case Task::one_shot:
    case Task::few_shot:
    case Task::compress_bench:
      c.source = DataSource::image_like;
      c.clients = 5;
      for (std::uint64_t s = 0; s < 5; ++s) c.seeds.push_back(s);
      r.loss = LossKind::softmax_cross_entropy;
      r.local = {0.01, 0.9, 30, TrainUnit::epochs, 64};
      r.server.optimizer = Adam{};
      r.server.t_max = 2000;
      r.server.val_every = 100;
      r.compression.enabled = true;
      if (task == Task::compress_bench) {
        c.methods = {Method::fedfisher_diag, Method::fedfisher_kfac};
        c.sweep = {0.1};
      } else {
        c.methods = {Method::fedavg, Method::fishermerge, Method::fedfisher_diag, Method::fedfisher_kfac};
        c.sweep = {0.1};
      }
      c.rounds = task == Task::few_shot ? 5 : 1;
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Key=value settings

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_count(const std::string& key, const std::string& v) {
  try {
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

/// Seed lists accept single values and inclusive ranges: "0-4,7".
inline std::vector<std::uint64_t> to_seeds(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_list(v)) {
    const auto dash = tok.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(to_count(key, tok));
      continue;
    }
    const std::uint64_t lo = to_count(key, tok.substr(0, dash)), hi = to_count(key, tok.substr(dash + 1));
    if (hi < lo || hi - lo > 1000000) throw ConfigError(key, "bad seed range '" + tok + "'");
    for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
  }
  return out;
}

}  // namespace config_detail

/// Every recognised key, as "section.key".
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "experiment.seeds",    "experiment.methods",   "experiment.sweep",      "experiment.rounds",
      "experiment.record_time", "experiment.out",    "data.source",           "data.clients",
      "data.alpha",          "data.n_per_client",    "data.p",                "data.n_train",
      "data.n_test",         "data.val_size",        "data.seed",             "data.image_noise",
      "data.image_side",     "data.normalize",       "data.train_images",   "data.train_labels",    "data.test_images",      "data.test_labels",
      "data.train_csv",      "data.test_csv",        "model.width",           "model.kappa",
      "model.dims",          "local.eta",            "local.momentum",        "local.count",
      "local.unit",          "local.batch_size",     "server.optimizer",      "server.eta_s",
      "server.t_max",        "server.stop_tol",      "server.val_every",      "server.weight_by_size",
      "server.beta1",        "server.beta2",         "server.eps",            "fisher.mode",
      "fisher.draws",        "fisher.floor",         "fisher.kfac_damping",   "compress.enabled",
      "compress.weight_sq",  "compress.diag_sq",     "compress.kfac_sq",      "compress.kfac_sv",
      "compress.bench_sq",   "compress.bench_sv"};
  return keys;
}

inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  using namespace config_detail;
  const std::string v = trim(raw);
  RoundConfig& r = c.round;
  auto count = [&] { return static_cast<std::size_t>(to_count(key, v)); };
  auto real = [&] { return to_real(key, v); };
  auto adam = [&]() -> Adam& {
    if (!std::holds_alternative<Adam>(r.server.optimizer))
      throw ConfigError(key, "only meaningful with server.optimizer = adam (set the optimizer first)");
    return std::get<Adam>(r.server.optimizer);
  };

  if (key == "experiment.seeds") c.seeds = to_seeds(key, v);
  else if (key == "experiment.methods") {
    c.methods.clear();
    for (const auto& tok : split_list(v)) {
      const auto m = parse_method(tok);
      if (!m) throw ConfigError(key, "unknown method '" + tok + "'");
      c.methods.push_back(*m);
    }
  } else if (key == "experiment.sweep") {
    c.sweep.clear();
    for (const auto& tok : split_list(v)) c.sweep.push_back(to_real(key, tok));
  } else if (key == "experiment.rounds") c.rounds = count();
  else if (key == "experiment.record_time") c.record_time = to_bool(key, v);
  else if (key == "experiment.out") c.out = v;
  else if (key == "data.source") {
    if (v == "synthetic") c.source = DataSource::synthetic;
    else if (v == "image-like") c.source = DataSource::image_like;
    else if (v == "idx") c.source = DataSource::idx;
    else if (v == "csv") c.source = DataSource::csv;
    else throw ConfigError(key, "expected synthetic, image-like, idx or csv");
  } else if (key == "data.clients") c.clients = count();
  else if (key == "data.alpha") c.alpha = real();
  else if (key == "data.n_per_client") c.n_per_client = count();
  else if (key == "data.p") c.p = count();
  else if (key == "data.n_train") c.n_train = count();
  else if (key == "data.n_test") c.n_test = count();
  else if (key == "data.val_size") c.val_size = count();
  else if (key == "data.seed") c.data_seed = to_count(key, v);
  else if (key == "data.image_noise") c.image_noise = real();
  else if (key == "data.image_side") c.image_side = count();
  else if (key == "data.normalize") c.normalize = to_bool(key, v);
  else if (key == "data.train_images") c.train_images = v;
  else if (key == "data.train_labels") c.train_labels = v;
  else if (key == "data.test_images") c.test_images = v;
  else if (key == "data.test_labels") c.test_labels = v;
  else if (key == "data.train_csv") c.train_csv = v;
  else if (key == "data.test_csv") c.test_csv = v;
  else if (key == "model.width") c.width = count();
  else if (key == "model.kappa") c.kappa = real();
  else if (key == "model.dims") {
    c.dims.clear();
    for (const auto& tok : split_list(v)) c.dims.push_back(static_cast<std::size_t>(to_count(key, tok)));
  } else if (key == "local.eta") r.local.eta = real();
  else if (key == "local.momentum") r.local.momentum = real();
  else if (key == "local.count") r.local.count = count();
  else if (key == "local.unit") {
    if (v == "steps") r.local.unit = TrainUnit::steps;
    else if (v == "epochs") r.local.unit = TrainUnit::epochs;
    else throw ConfigError(key, "expected steps or epochs");
  } else if (key == "local.batch_size") {
    r.local.batch_size = v == "full" ? std::numeric_limits<std::size_t>::max() : count();
  } else if (key == "server.optimizer") {
    if (v == "gd") r.server.optimizer = GradientDescent{};
    else if (v == "adam") r.server.optimizer = Adam{};
    else throw ConfigError(key, "expected gd or adam");
  } else if (key == "server.eta_s") {
    if (auto* gd = std::get_if<GradientDescent>(&r.server.optimizer)) {
      gd->eta_s = v == "auto" ? std::nullopt : std::optional<double>(real());
    } else {
      if (v == "auto") throw ConfigError(key, "auto step size needs server.optimizer = gd");
      std::get<Adam>(r.server.optimizer).eta_s = real();
    }
  } else if (key == "server.t_max") r.server.t_max = count();
  else if (key == "server.stop_tol") r.server.stop_tol = real();
  else if (key == "server.val_every") r.server.val_every = count();
  else if (key == "server.weight_by_size") r.server.weight_by_size = to_bool(key, v);
  else if (key == "server.beta1") adam().beta1 = real();
  else if (key == "server.beta2") adam().beta2 = real();
  else if (key == "server.eps") adam().eps = real();
  else if (key == "fisher.mode") {
    if (v == "expected") r.fisher_mode.kind = FisherMode::Kind::expected;
    else if (v == "sampled") r.fisher_mode.kind = FisherMode::Kind::sampled;
    else throw ConfigError(key, "expected 'expected' or 'sampled'");
  } else if (key == "fisher.draws") r.fisher_mode.draws = count();
  else if (key == "fisher.floor") r.fisher_floor = real();
  else if (key == "fisher.kfac_damping") r.kfac_damping = real();
  else if (key == "compress.enabled") r.compression.enabled = to_bool(key, v);
  else if (key == "compress.weight_sq") r.compression.weight_s_q = static_cast<unsigned>(count());
  else if (key == "compress.diag_sq") r.compression.diag_s_q = static_cast<unsigned>(count());
  else if (key == "compress.kfac_sq") r.compression.kfac_s_q = static_cast<unsigned>(count());
  else if (key == "compress.kfac_sv") {
    r.compression.kfac_s_v = v == "auto" ? std::nullopt : std::optional<double>(real());
  } else if (key == "compress.bench_sq") {
    c.bench_sq.clear();
    for (const auto& tok : split_list(v)) c.bench_sq.push_back(static_cast<unsigned>(to_count(key, tok)));
  } else if (key == "compress.bench_sv") {
    c.bench_sv.clear();
    for (const auto& tok : split_list(v)) c.bench_sv.push_back(tok == "auto" ? 0.0 : to_real(key, tok));
  } else {
    throw ConfigError(key, "unknown key");
  }
}

/// Parses "[section]" headers and "key = value" lines; '#' and ';' start
/// comments. Returns (section.key, value) pairs in file order.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  using config_detail::trim;
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno), "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

inline void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("experiment.seeds", "no seeds");
  if (c.methods.empty()) throw ConfigError("experiment.methods", "no methods");
  if (c.task != Task::few_shot && c.task != Task::compress_bench && c.sweep.empty())
    throw ConfigError("experiment.sweep", "sweep values must be nonempty");
  if (c.rounds == 0) throw ConfigError("experiment.rounds", "must be >= 1");
  if (c.clients == 0) throw ConfigError("data.clients", "must be >= 1");
  const RoundConfig& r = c.round;
  if (!(r.local.eta > 0.0)) throw ConfigError("local.eta", "must be > 0");
  if (!(r.local.momentum >= 0.0 && r.local.momentum < 1.0)) throw ConfigError("local.momentum", "must be in [0,1)");
  if (r.local.batch_size == 0) throw ConfigError("local.batch_size", "must be >= 1");
  if (r.server.t_max == 0) throw ConfigError("server.t_max", "must be >= 1");
  if (auto* gd = std::get_if<GradientDescent>(&r.server.optimizer); gd && gd->eta_s && !(*gd->eta_s > 0.0))
    throw ConfigError("server.eta_s", "must be > 0");
  if (r.fisher_mode.draws == 0) throw ConfigError("fisher.draws", "must be >= 1");
  for (unsigned sq : {r.compression.weight_s_q, r.compression.diag_s_q, r.compression.kfac_s_q})
    if (sq < 1 || sq > 16) throw ConfigError("compress", "s_q must be in [1, 16]");
  if (r.compression.kfac_s_v && *r.compression.kfac_s_v < 1.0) throw ConfigError("compress.kfac_sv", "must be >= 1");

  const bool synthetic = c.task == Task::synthetic_width || c.task == Task::synthetic_steps;
  for (Method m : c.methods) {
    if (synthetic && m == Method::fedfisher_kfac)
      throw ConfigError("experiment.methods", "fedfisher-kfac needs an MLP; synthetic tasks use the two-layer model");
    if (!synthetic && m == Method::fedfisher_full)
      throw ConfigError("experiment.methods", "fedfisher-full is only available for the two-layer synthetic tasks");
    if (c.task == Task::compress_bench && m != Method::fedfisher_diag && m != Method::fedfisher_kfac)
      throw ConfigError("experiment.methods", "compress-bench takes fedfisher-diag and fedfisher-kfac only");
  }
  if (synthetic) {
    if (c.p == 0 || c.n_per_client == 0) throw ConfigError("data", "p and n_per_client must be >= 1");
    if (!(c.kappa > 0.0)) throw ConfigError("model.kappa", "must be > 0");
    for (double s : c.sweep) {
      if (s < 0.0 || s != std::floor(s)) throw ConfigError("experiment.sweep", "values must be non-negative integers");
      if (c.task == Task::synthetic_width) {
        if (s < 1.0) throw ConfigError("experiment.sweep", "widths must be >= 1");
        const double d = s * static_cast<double>(c.p);
        if (d > 2000.0 && std::find(c.methods.begin(), c.methods.end(), Method::fedfisher_full) != c.methods.end())
          throw ConfigError("experiment.sweep", "fedfisher-full needs width * p <= 2000 for a dense Fisher");
      }
    }
    if (c.task == Task::synthetic_steps && c.width * c.p > 2000 &&
        std::find(c.methods.begin(), c.methods.end(), Method::fedfisher_full) != c.methods.end())
      throw ConfigError("model.width", "fedfisher-full needs width * p <= 2000 for a dense Fisher");
  } else {
    if (c.dims.size() < 2) throw ConfigError("model.dims", "need at least input and output sizes");
    if (c.n_train < c.clients) throw ConfigError("data.n_train", "fewer training examples than clients");
    if (c.n_test == 0) throw ConfigError("data.n_test", "must be >= 1");
    if (r.server.val_every > 0 && c.val_size == 0) throw ConfigError("data.val_size", "validation needs examples");
    const std::vector<double> alphas = c.task == Task::one_shot ? c.sweep : std::vector<double>{c.alpha};
    for (double a : alphas)
      if (!(a > 0.0)) throw ConfigError(c.task == Task::one_shot ? "experiment.sweep" : "data.alpha", "alpha must be > 0");
    if (c.task == Task::compress_bench) {
      if (c.bench_sq.empty() || c.bench_sv.empty()) throw ConfigError("compress.bench_sq", "empty grid");
      for (unsigned sq : c.bench_sq)
        if (sq < 1 || sq > 16) throw ConfigError("compress.bench_sq", "s_q must be in [1, 16]");
      for (double sv : c.bench_sv)
        if (sv != 0.0 && sv < 1.0) throw ConfigError("compress.bench_sv", "s_v must be >= 1 or auto");
    }
    if (c.source == DataSource::synthetic) throw ConfigError("data.source", "classification tasks need image data");
    if (c.source == DataSource::idx && (c.train_images.empty() || c.train_labels.empty() || c.test_images.empty() ||
                                        c.test_labels.empty()))
      throw ConfigError("data.source", "idx needs train_images, train_labels, test_images and test_labels");
    if (c.source == DataSource::csv && (c.train_csv.empty() || c.test_csv.empty()))
      throw ConfigError("data.source", "csv needs train_csv and test_csv");
  }
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::uint64_t seed = 0;
  std::string method;
  std::string sweep;
  double train_loss = 0.0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
  std::uint64_t bits = 0;  // uploaded per client
  // ordering keys, not written
  std::size_t method_index = 0;
  std::size_t sweep_index = 0;
};

struct RunOutput {
  std::vector<ResultRow> rows;
  bool diverged = false;
};

inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string sweep_label(double v) { return format_real(v); }

inline void write_csv(std::ostream& out, std::vector<ResultRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.seed, a.method_index, a.sweep_index) < std::tie(b.seed, b.method_index, b.sweep_index);
  });
  out << "seed,method,sweep,train_loss,test_accuracy,wall_time_s,bits\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << r.method << ',' << r.sweep << ',' << format_real(r.train_loss) << ','
        << format_real(r.test_accuracy) << ',' << format_real(r.wall_time) << ',' << r.bits << '\n';
  }
}

// ---------------------------------------------------------------------------
// Data

struct ClassificationData {
  std::vector<Example> train, val, test;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
};

inline ClassificationData load_classification(const ExperimentConfig& c) {
  ClassificationData d;
  std::vector<Example> pool, test;
  switch (c.source) {
    case DataSource::image_like: {
      ImageStyle style;
      style.noise = c.image_noise;
      style.side = c.image_side;
      pool = gen_image_like(substream_seed(c.data_seed, 0), c.n_train + c.val_size, style);
      test = gen_image_like(substream_seed(c.data_seed, 1), c.n_test, style);
      break;
    }
    case DataSource::idx:
      pool = load_idx(c.train_images, c.train_labels);
      test = load_idx(c.test_images, c.test_labels);
      break;
    case DataSource::csv:
      pool = load_csv(c.train_csv);
      test = load_csv(c.test_csv);
      break;
    case DataSource::synthetic: throw ConfigError("data.source", "not a classification source");
  }
  if (c.normalize) {
    pool = normalize_unit(std::move(pool));
    test = normalize_unit(std::move(test));
  }
  if (pool.size() < c.n_train + c.val_size)
    throw ConfigError("data.n_train", "only " + std::to_string(pool.size()) + " training examples available");
  if (test.size() < c.n_test) throw ConfigError("data.n_test", "only " + std::to_string(test.size()) + " test examples");
  d.train.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c.n_train));
  d.val.assign(pool.begin() + static_cast<std::ptrdiff_t>(c.n_train),
               pool.begin() + static_cast<std::ptrdiff_t>(c.n_train + c.val_size));
  d.test.assign(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(c.n_test));
  d.input_dim = d.train.front().x.size();
  for (const auto* set : {&d.train, &d.val, &d.test}) {
    for (const auto& e : *set) {
      if (e.x.size() != d.input_dim) throw ConfigError("data", "inconsistent feature lengths");
      d.num_classes = std::max(d.num_classes, e.label() + 1);
    }
  }
  if (c.dims.front() != d.input_dim)
    throw ConfigError("model.dims", "input size " + std::to_string(c.dims.front()) + " != data dimension " +
                                        std::to_string(d.input_dim));
  if (c.dims.back() < d.num_classes)
    throw ConfigError("model.dims", "output size " + std::to_string(c.dims.back()) + " < number of classes " +
                                        std::to_string(d.num_classes));
  return d;
}

// ---------------------------------------------------------------------------
// Runners

namespace run_detail {

inline std::uint64_t per_client_bits(std::uint64_t total, std::size_t clients) { return total / clients; }

template <class Model>
void emit(std::vector<ResultRow>& rows, bool& diverged, std::uint64_t seed, Method method, std::size_t mi,
          const std::string& sweep, std::size_t si, const RoundMetrics& m, std::size_t clients, bool record_time) {
  ResultRow row;
  row.seed = seed;
  row.method = std::string(method_name(method));
  row.sweep = sweep;
  row.train_loss = m.loss;
  row.test_accuracy = m.accuracy;
  row.wall_time = record_time ? m.client_seconds + m.server_seconds : 0.0;
  row.bits = per_client_bits(m.bits, clients);
  row.method_index = mi;
  row.sweep_index = si;
  rows.push_back(std::move(row));
  diverged = diverged || m.diverged;
}

/// One synthetic (seed, width, K) cell for every method.
inline void synthetic_cell(const ExperimentConfig& c, std::uint64_t seed, std::size_t width, std::size_t steps,
                           const std::string& label, std::size_t si, RunOutput& out) {
  const SyntheticData data = gen_synthetic(substream_seed(seed, stream::kDataset), c.clients, c.n_per_client, c.p);
  const TwoLayerReLU init = init_two_layer(width, c.p, c.kappa, substream_seed(seed, stream::kModelInit));
  RoundConfig rc = c.round;
  rc.local.count = steps;
  rc.local.unit = TrainUnit::steps;
  const std::vector<Example>& all = data.dataset.examples;
  const Evaluator<TwoLayerReLU> eval = [&all, &rc](const TwoLayerReLU& net) {
    RoundMetrics m;
    m.loss = loss_eval(net, all, rc.loss);
    return m;
  };
  for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
    const auto res = few_shot_rounds(data.dataset, init, 1, rc, c.methods[mi], seed, eval);
    emit<TwoLayerReLU>(out.rows, out.diverged, seed, c.methods[mi], mi, label, si, res.metrics.back(), c.clients,
                       c.record_time);
  }
}

}  // namespace run_detail

inline RunOutput run_width_sweep(const ExperimentConfig& c) {
  RunOutput out;
  for (std::uint64_t seed : c.seeds)
    for (std::size_t si = 0; si < c.sweep.size(); ++si)
      run_detail::synthetic_cell(c, seed, static_cast<std::size_t>(c.sweep[si]), c.round.local.count,
                                 sweep_label(c.sweep[si]), si, out);
  return out;
}

inline RunOutput run_local_steps_sweep(const ExperimentConfig& c) {
  RunOutput out;
  for (std::uint64_t seed : c.seeds)
    for (std::size_t si = 0; si < c.sweep.size(); ++si)
      run_detail::synthetic_cell(c, seed, c.width, static_cast<std::size_t>(c.sweep[si]), sweep_label(c.sweep[si]),
                                 si, out);
  return out;
}

namespace run_detail {

struct ClassificationRun {
  const ExperimentConfig& cfg;
  const ClassificationData& data;

  /// Runs `rounds` rounds of `method` at Dirichlet `alpha` and returns the
  /// per-round metrics.
  std::vector<RoundMetrics> run(std::uint64_t seed, Method method, double alpha, std::size_t rounds,
                                RoundConfig rc) const {
    FederatedDataset fed;
    fed.examples = data.train;
    fed.num_classes = data.num_classes;
    fed.partition = dirichlet_partition(fed.examples, cfg.clients, alpha, substream_seed(seed, stream::kPartition));
    const MLP init = init_mlp(cfg.dims, Head::softmax, substream_seed(seed, stream::kModelInit));
    if (rc.server.val_every > 0) {
      rc.server.validate = [this, &init](std::span<const double> w) {
        return accuracy_eval(init.with_parameters(Vector(w.begin(), w.end())), data.val);
      };
    }
    const Evaluator<MLP> eval = [this, &rc](const MLP& net) {
      RoundMetrics m;
      m.loss = loss_eval(net, data.train, rc.loss);
      m.accuracy = accuracy_eval(net, data.test);
      return m;
    };
    return few_shot_rounds(fed, init, rounds, rc, method, seed, eval).metrics;
  }
};

}  // namespace run_detail

inline RunOutput run_one_shot(const ExperimentConfig& c) {
  const ClassificationData data = load_classification(c);
  const run_detail::ClassificationRun runner{c, data};
  RunOutput out;
  for (std::uint64_t seed : c.seeds)
    for (std::size_t si = 0; si < c.sweep.size(); ++si)
      for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
        const auto metrics = runner.run(seed, c.methods[mi], c.sweep[si], 1, c.round);
        run_detail::emit<MLP>(out.rows, out.diverged, seed, c.methods[mi], mi, sweep_label(c.sweep[si]), si,
                              metrics.back(), c.clients, c.record_time);
      }
  return out;
}

/// Sweep column = round number; Dirichlet alpha from data.alpha.
inline RunOutput run_few_shot(const ExperimentConfig& c) {
  const ClassificationData data = load_classification(c);
  const run_detail::ClassificationRun runner{c, data};
  RunOutput out;
  for (std::uint64_t seed : c.seeds)
    for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
      const auto metrics = runner.run(seed, c.methods[mi], c.alpha, c.rounds, c.round);
      for (std::size_t r = 0; r < metrics.size(); ++r)
        run_detail::emit<MLP>(out.rows, out.diverged, seed, c.methods[mi], mi, std::to_string(r + 1), r, metrics[r],
                              c.clients, c.record_time);
    }
  return out;
}

/// Sweep column "sq=<s_q>;sv=<s_v|auto>" over the bench grid. s_q = 1 sends
/// everything uncompressed; diagonal Fishers ignore s_v.
inline RunOutput run_compress_bench(const ExperimentConfig& c) {
  const ClassificationData data = load_classification(c);
  const run_detail::ClassificationRun runner{c, data};
  RunOutput out;
  for (std::uint64_t seed : c.seeds)
    for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
      const Method method = c.methods[mi];
      std::size_t si = 0;
      for (unsigned sq : c.bench_sq) {
        for (std::size_t vi = 0; vi < c.bench_sv.size(); ++vi, ++si) {
          const double sv = c.bench_sv[vi];
          if ((method == Method::fedfisher_diag || sq == 1) && vi > 0) continue;
          RoundConfig rc = c.round;
          rc.compression.enabled = sq > 1;
          rc.compression.diag_s_q = sq;
          rc.compression.kfac_s_q = sq;
          rc.compression.kfac_s_v = sv == 0.0 ? std::nullopt : std::optional<double>(sv);
          const std::string label = "sq=" + std::to_string(sq) + ";sv=" +
                                    (method == Method::fedfisher_diag || sq == 1 ? std::string("-")
                                     : sv == 0.0                                ? std::string("auto")
                                                                                : format_real(sv));
          const auto metrics = runner.run(seed, method, c.alpha, 1, rc);
          run_detail::emit<MLP>(out.rows, out.diverged, seed, method, mi, label, si, metrics.back(), c.clients,
                                c.record_time);
        }
      }
    }
  return out;
}

inline RunOutput run_experiment(const ExperimentConfig& c) {
  validate(c);
  switch (c.task) {
    case Task::synthetic_width: return run_width_sweep(c);
    case Task::synthetic_steps: return run_local_steps_sweep(c);
    case Task::one_shot: return run_one_shot(c);
    case Task::few_shot: return run_few_shot(c);
    case Task::compress_bench: return run_compress_bench(c);
  }
  return {};
}

}  // namespace fedfisher
