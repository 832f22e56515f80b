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

// fedfisher_cli: runs one experiment and writes its result table as CSV.
//
//   fedfisher_cli <task> [--config FILE] [--seed-list 0-4] [--out FILE]
//                 [--<section>.<key> VALUE ...]
//
// Exit status: 0 success, 2 configuration error, 3 numerical divergence.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "fedfisher/experiments.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kDiverged = 3;

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fedfisher::ConfigError("--config", "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot federated learning experiments with Fisher-weighted model merging"};
  app.require_subcommand(1, 1);

  struct TaskOptions {
    std::string config_path, seed_list, out;
    std::map<std::string, std::string> overrides;
  };
  std::map<std::string, TaskOptions> options;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [task, name] : fedfisher::kTaskNames) {
    TaskOptions& o = options[name];
    CLI::App* sub = app.add_subcommand(name, "Run the " + std::string(name) + " experiment");
    sub->add_option("--config", o.config_path, "key = value file with [section] headers");
    sub->add_option("--seed-list", o.seed_list, "seeds, e.g. 0-4,7");
    sub->add_option("--out", o.out, "CSV output path (default: stdout)");
    for (const auto& key : fedfisher::config_keys()) {
      sub->add_option_function<std::string>(
          "--" + key, [&o, key](const std::string& v) { o.overrides[key] = v; }, "override " + key);
    }
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  std::string name;
  for (const auto& [n, sub] : subs)
    if (sub->parsed()) name = n;
  const TaskOptions& o = options[name];

  fedfisher::RunOutput result;
  std::string out_path;
  try {
    fedfisher::ExperimentConfig cfg = fedfisher::default_config(*fedfisher::parse_task(name));
    if (!o.config_path.empty())
      for (const auto& [key, value] : fedfisher::parse_config_text(read_text(o.config_path)))
        fedfisher::apply_setting(cfg, key, value);
    // server.optimizer first so that optimizer-specific overrides land on it
    if (auto it = o.overrides.find("server.optimizer"); it != o.overrides.end())
      fedfisher::apply_setting(cfg, it->first, it->second);
    for (const auto& [key, value] : o.overrides)
      if (key != "server.optimizer") fedfisher::apply_setting(cfg, key, value);
    if (!o.seed_list.empty()) fedfisher::apply_setting(cfg, "experiment.seeds", o.seed_list);
    if (!o.out.empty()) cfg.out = o.out;
    out_path = cfg.out;
    fedfisher::validate(cfg);
    result = fedfisher::run_experiment(cfg);
  } catch (const fedfisher::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const fedfisher::DatasetError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return kConfigError;
  }

  if (out_path.empty()) {
    fedfisher::write_csv(std::cout, result.rows);
  } else {
    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "cannot write " << out_path << '\n';
      return kConfigError;
    }
    fedfisher::write_csv(out, result.rows);
  }
  if (result.diverged) {
    std::cerr << "numerical divergence in at least one run\n";
    return kDiverged;
  }
  return 0;
}
