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

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kesi/data.hpp"
#include "kesi/pipeline.hpp"

namespace kesi {

inline constexpr int kSchemaVersion = 1;

struct DatasetSpec {
  std::string kind = "idx";  // idx | blobs
  // idx
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 5000;
  std::size_t test_limit = 1000;
  std::size_t center_crop = 0;  // 0 keeps the full image
  std::size_t downsample = 1;
  bool standardize = true;
  // blobs
  std::size_t num_classes = 3;
  std::size_t dim = 2;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

struct ModelSpec {
  std::string kind = "desknet";  // desknet | mlp
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t blocks_per_stage = 1;
  std::vector<std::size_t> hidden{16};  // mlp hidden sizes
};

// Arms: fixed_small_lr, one_cycle, kesi (one_cycle + ensemble distillation)
// and single_teacher (one_cycle + distillation from the baseline alone).
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  DatasetSpec dataset;
  ModelSpec model;
  BaselineConfig baseline;
  CycleConfig cycles;
  DistillConfig distill;
  bool distill_enabled = true;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> arms{"fixed_small_lr", "one_cycle", "kesi"};
  std::filesystem::path output_dir = "runs";

  // Structural checks plus existence of the referenced dataset files.
  void validate() const;
};

// Parses a YAML document; relative dataset paths resolve against base_dir.
// Unknown keys and wrong schema versions are ParameterErrors.
ExperimentConfig parse_config(const std::string& text,
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
// YAML document that parses back to an equal configuration; dataset paths
// are written as given (absolute after load_config).
std::string dump_config(const ExperimentConfig& cfg);

// output_dir, placed under $KESI_OUTPUT_ROOT when it is relative and the
// variable is set.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

struct Splits {
  Dataset train;
  Dataset test;
};

// Loads, limits, resizes and standardizes (training-split statistics).
Splits load_splits(const DatasetSpec& spec);
ModelSnapshot build_model(const ModelSpec& spec, const Dataset& train, std::uint64_t seed);

struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string arm;
  std::string stage;  // baseline | cycle-k | ensemble | distill
  int cycle = 0;
  std::int64_t param_count = 0;
  std::int64_t mac_count = 0;
  std::vector<double> train_loss;
  double eval_accuracy = 0.0;
  std::optional<std::string> error;

  bool operator==(const MetricsRecord&) const = default;
};

std::string to_json_line(const MetricsRecord& record);
MetricsRecord parse_json_line(const std::string& line);
// Every complete line of a metrics file; a torn final line is ignored.
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

// Line-delimited append-only record sink; each line is flushed when written.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, bool truncate);
  void append(const MetricsRecord& record);

 private:
  std::filesystem::path path_;
};

// Output layout below one output directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path seed_dir(std::uint64_t seed) const;
  std::filesystem::path baseline(std::uint64_t seed) const;
  std::filesystem::path cycle(std::uint64_t seed, std::string_view schedule, int k) const;
  std::filesystem::path student(std::uint64_t seed, std::string_view arm) const;
  std::filesystem::path metrics(std::uint64_t seed) const;
  std::filesystem::path timing(std::uint64_t seed) const;
  std::filesystem::path config() const;
  std::filesystem::path report_dir() const;
};

// The retraining schedule an arm's snapshots come from.
RetrainSchedule arm_schedule(std::string_view arm);

struct RunOutcome {
  std::vector<MetricsRecord> records;
  std::size_t failures = 0;

  bool ok() const { return failures == 0; }
};

// Runs every configured arm for every seed from one shared baseline per
// seed, persisting snapshots and metrics below `out`. A failed stage is
// recorded and the remaining seeds still run.
RunOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Single stages, persisting the same files run_experiment does. Metrics are
// appended to the seed's file.
RunOutcome run_train_stage(const ExperimentConfig& cfg, const std::filesystem::path& out,
                           std::uint64_t seed);
RunOutcome run_prune_stage(const ExperimentConfig& cfg, const std::filesystem::path& out,
                           std::uint64_t seed, std::string_view arm);
RunOutcome run_distill_stage(const ExperimentConfig& cfg, const std::filesystem::path& out,
                             std::uint64_t seed, std::string_view arm);

struct SummaryRow {
  std::string method;
  double params = 0.0;
  double pct_macs_reduced = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;  // sample standard deviation
  std::size_t n = 0;
};

struct ReportResult {
  std::vector<SummaryRow> summary;
  std::vector<std::string> missing;  // "seed S arm A stage X" entries

  bool complete() const { return missing.empty(); }
};

// 100 * (1 - macs / baseline_macs).
double pct_reduction(std::int64_t value, std::int64_t baseline);

// Writes accuracy_vs_cycle.csv, size_vs_cycle.csv and summary.csv into
// report/ of the output directory.
ReportResult report(const std::filesystem::path& out);

}  // namespace kesi
