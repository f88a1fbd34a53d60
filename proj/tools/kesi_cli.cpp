/* Copyright 2026 The KESI-Desk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Command-line driver for experiments: kesi <subcommand> [options].

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kesi/errors.hpp"
#include "kesi/harness.hpp"
#include "kesi/snapshot_io.hpp"

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> arms;
};

void add_common(CLI::App* cmd, Common& c, bool with_arm) {
  cmd->add_option("-c,--config", c.config, "experiment config (YAML)")->required();
  cmd->add_option("-s,--seed", c.seed, "run only this seed");
  cmd->add_option("-o,--out", c.out, "output directory (overrides output_dir)");
  if (with_arm) {
    cmd->add_option("-a,--arm", c.arms,
                    "fixed_small_lr, one_cycle, kesi or single_teacher (repeatable)");
  }
}

kesi::ExperimentConfig load(const Common& c) {
  auto cfg = kesi::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.arms.empty()) cfg.arms = c.arms;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.output_dir = kesi::resolve_output_dir(cfg);
  cfg.validate();
  return cfg;
}

int finish(const kesi::RunOutcome& outcome) {
  for (const auto& r : outcome.records) {
    if (r.error) {
      std::fprintf(stderr, "seed %llu %s %s failed: %s\n",
                   static_cast<unsigned long long>(r.seed), r.arm.c_str(), r.stage.c_str(),
                   r.error->c_str());
    } else {
      std::printf("seed %llu %-15s %-9s params %-8lld macs %-10lld acc %.4f\n",
                  static_cast<unsigned long long>(r.seed), r.arm.c_str(), r.stage.c_str(),
                  static_cast<long long>(r.param_count), static_cast<long long>(r.mac_count),
                  r.eval_accuracy);
    }
  }
  return outcome.ok() ? 0 : 1;
}

int print_report(const fs::path& out) {
  const auto rep = kesi::report(out);
  std::printf("%-18s %10s %9s %10s %9s %3s\n", "method", "params", "%MACs", "acc_mean",
              "acc_std", "n");
  for (const auto& row : rep.summary) {
    std::printf("%-18s %10.1f %9.2f %10.6f %9.6f %3zu\n", row.method.c_str(), row.params,
                row.pct_macs_reduced, row.accuracy_mean, row.accuracy_std, row.n);
  }
  for (const auto& m : rep.missing) std::fprintf(stderr, "missing: %s\n", m.c_str());
  std::printf("report written to %s\n", (out / "report").string().c_str());
  return rep.complete() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative pruning, snapshot ensembles and ensemble distillation"};
  app.require_subcommand(1);

  Common run_opts, train_opts, prune_opts, distill_opts, eval_opts;
  auto* run = app.add_subcommand("run", "full pipeline for every seed and arm, then report");
  add_common(run, run_opts, true);
  auto* train = app.add_subcommand("train", "train the baseline of each seed");
  add_common(train, train_opts, false);
  auto* prune = app.add_subcommand("prune", "prune/retrain cycles from a saved baseline");
  add_common(prune, prune_opts, true);
  auto* distill = app.add_subcommand("distill", "distill the saved one-cycle snapshots");
  add_common(distill, distill_opts, true);

  auto* evaluate = app.add_subcommand("evaluate", "test accuracy of snapshots (ensemble if >1)");
  std::vector<std::string> snapshots;
  evaluate->add_option("-c,--config", eval_opts.config, "experiment config (YAML)")->required();
  evaluate->add_option("snapshots", snapshots, "snapshot files")->required();

  auto* rep = app.add_subcommand("report", "summarize a finished output directory");
  std::string report_dir, report_config;
  rep->add_option("-o,--out", report_dir, "output directory");
  rep->add_option("-c,--config", report_config, "config whose output_dir to summarize");

  CLI11_PARSE(app, argc, argv);

  try {
    auto stage_loop = [](const Common& c, auto&& fn) {
      const auto cfg = load(c);
      kesi::RunOutcome total;
      for (const auto seed : cfg.seeds) {
        auto o = fn(cfg, seed);
        total.failures += o.failures;
        for (auto& r : o.records) total.records.push_back(std::move(r));
      }
      return finish(total);
    };

    if (*run) {
      const auto cfg = load(run_opts);
      const int code = finish(kesi::run_experiment(cfg, cfg.output_dir));
      const int rep_code = print_report(cfg.output_dir);
      return code != 0 ? code : rep_code;
    }
    if (*train) {
      return stage_loop(train_opts, [](const kesi::ExperimentConfig& cfg, std::uint64_t seed) {
        return kesi::run_train_stage(cfg, cfg.output_dir, seed);
      });
    }
    if (*prune || *distill) {
      const bool is_prune = static_cast<bool>(*prune);
      Common& c = is_prune ? prune_opts : distill_opts;
      if (c.arms.empty()) c.arms = {is_prune ? "one_cycle" : "kesi"};
      const std::vector<std::string> arms = c.arms;
      return stage_loop(c, [&](const kesi::ExperimentConfig& cfg, std::uint64_t seed) {
        kesi::RunOutcome o;
        for (const auto& arm : arms) {
          auto part = is_prune ? kesi::run_prune_stage(cfg, cfg.output_dir, seed, arm)
                               : kesi::run_distill_stage(cfg, cfg.output_dir, seed, arm);
          o.failures += part.failures;
          for (auto& r : part.records) o.records.push_back(std::move(r));
        }
        return o;
      });
    }
    if (*evaluate) {
      const auto cfg = kesi::load_config(eval_opts.config);
      const auto splits = kesi::load_splits(cfg.dataset);
      std::vector<kesi::ModelSnapshot> members;
      for (const auto& p : snapshots) members.push_back(kesi::load_snapshot(p));
      double acc = 0.0;
      if (members.size() == 1) {
        acc = kesi::evaluate(members.front(), splits.test);
      } else {
        acc = kesi::evaluate(kesi::SnapshotEnsemble(std::move(members)), splits.test);
      }
      std::printf("accuracy %.6f on %zu test samples\n", acc, splits.test.size());
      return 0;
    }
    if (*rep) {
      fs::path out = report_dir;
      if (out.empty()) {
        if (report_config.empty()) {
          std::fprintf(stderr, "report needs --out or --config\n");
          return 2;
        }
        out = kesi::resolve_output_dir(kesi::load_config(report_config));
      }
      return print_report(out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
