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

#include "kesi/harness.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "kesi/errors.hpp"
#include "kesi/rng.hpp"
#include "kesi/snapshot_io.hpp"

namespace kesi {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// ---- config ---------------------------------------------------------------

void check_keys(const YAML::Node& node, const std::string& section,
                std::initializer_list<std::string_view> allowed) {
  if (!node) return;
  if (!node.IsMap()) throw ParameterError("config section '" + section + "' must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ParameterError("unknown config key '" + (section.empty() ? "" : section + ".") + key +
                           "'");
    }
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out) {
  if (node && node[key]) out = node[key].as<T>();
}

void read_path(const YAML::Node& node, const char* key, fs::path& out, const fs::path& base) {
  if (!node || !node[key]) return;
  out = node[key].as<std::string>();
  if (!base.empty() && out.is_relative()) out = (base / out).lexically_normal();
}

void read_train(const YAML::Node& node, const std::string& section, TrainOptions& t) {
  read(node, "batch_size", t.batch_size);
  read(node, "momentum", t.momentum);
  read(node, "weight_decay", t.weight_decay);
  if (node && node["augment"]) {
    const auto a = node["augment"];
    check_keys(a, section + ".augment", {"crop_padding", "horizontal_flip"});
    read(a, "crop_padding", t.augment.crop_padding);
    read(a, "horizontal_flip", t.augment.horizontal_flip);
  }
}

YAML::Node augment_node(const AugmentOptions& a) {
  YAML::Node n;
  n["crop_padding"] = a.crop_padding;
  n["horizontal_flip"] = a.horizontal_flip;
  return n;
}

// ---- metrics --------------------------------------------------------------

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw RunError("cannot append to '" + path.string() + "'");
  out << line << '\n';
  out.flush();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot write '" + path.string() + "'");
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool uses_registry(std::string_view arm, RetrainSchedule schedule) {
  return arm_schedule(arm) == schedule;
}

bool is_distill_arm(std::string_view arm) { return arm == "kesi" || arm == "single_teacher"; }

// Runs the stages of one seed and records their outcome.
class SeedRunner {
 public:
  SeedRunner(const ExperimentConfig& cfg, const Splits& splits, const fs::path& out,
             std::uint64_t seed, bool truncate)
      : cfg_(cfg), splits_(splits), layout_{out}, seed_(seed),
        run_id_(hex64(derive_seed(0, dump_config(cfg))) + "-s" + std::to_string(seed)),
        metrics_(layout_.metrics(seed), truncate) {
    fs::create_directories(layout_.seed_dir(seed));
    fs::create_directories(layout_.timing(seed).parent_path());
    if (truncate) write_text(layout_.timing(seed), "");
  }

  RunOutcome& outcome() { return outcome_; }

  template <typename Fn>
  auto timed(const std::string& arm, const std::string& stage, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    auto result = fn();
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    Json j;
    j["run_id"] = run_id_;
    j["seed"] = seed_;
    j["arm"] = arm;
    j["stage"] = stage;
    j["wall_seconds"] = took.count();
    append_line(layout_.timing(seed_), j.dump());
    return result;
  }

  void record(const std::string& arm, const std::string& stage, int cycle,
              std::int64_t params, std::int64_t macs, const LossCurve& loss, double accuracy) {
    MetricsRecord r{run_id_, seed_, arm, stage, cycle, params, macs, loss, accuracy, {}};
    metrics_.append(r);
    outcome_.records.push_back(std::move(r));
  }

  void record(const std::string& arm, const std::string& stage, const ModelSnapshot& s,
              const LossCurve& loss) {
    record(arm, stage, s.meta().cycle_index, s.meta().param_count, s.meta().mac_count, loss,
           s.meta().eval_accuracy);
  }

  void fail(const std::string& arm, const std::string& stage, int cycle, const std::string& msg) {
    MetricsRecord r;
    r.run_id = run_id_;
    r.seed = seed_;
    r.arm = arm;
    r.stage = stage;
    r.cycle = cycle;
    r.error = msg;
    metrics_.append(r);
    outcome_.records.push_back(std::move(r));
    ++outcome_.failures;
  }

  ModelSnapshot baseline(const std::vector<std::string>& arms) {
    LossCurve curve;
    ModelSnapshot base = timed("*", "baseline", [&] {
      return train_baseline(build_model(cfg_.model, splits_.train, seed_), splits_.train,
                            splits_.test, cfg_.baseline, seed_, &curve);
    });
    save_snapshot(base, layout_.baseline(seed_));
    for (const auto& arm : arms) record(arm, "baseline", base, curve);
    return base;
  }

  // Arms in `arms` receive the cycle records; `cycle` tracks progress for
  // failure reports.
  SnapshotRegistry prune(const ModelSnapshot& base, RetrainSchedule schedule,
                         const std::vector<std::string>& arms, int& cycle) {
    CycleConfig c = cfg_.cycles;
    c.schedule = schedule;
    cycle = 1;
    const std::string label(to_string(schedule));
    return timed(label, "cycles", [&] {
      return run_iterative_pruning(
          base, c, splits_.train, splits_.test, seed_,
          [&](const ModelSnapshot& s, const LossCurve& curve) {
            const int k = s.meta().cycle_index;
            save_snapshot(s, layout_.cycle(seed_, label, k));
            for (const auto& arm : arms) record(arm, "cycle-" + std::to_string(k), s, curve);
            cycle = k + 1;
          });
    });
  }

  void distill(const SnapshotRegistry& registry, const std::string& arm, std::string& stage) {
    DistillConfig d = cfg_.distill;
    if (arm == "single_teacher") d.teachers = TeacherSet::baseline_only;
    const int last = registry.last().meta().cycle_index;
    if (!cfg_.distill_enabled) return;
    if (arm == "kesi") {
      stage = "ensemble";
      const SnapshotEnsemble ens = select_teachers(registry, d.teachers, 1.0);
      const double acc = timed(arm, stage, [&] { return evaluate(ens, splits_.test); });
      std::int64_t params = 0, macs = 0;
      for (const auto& m : ens.members()) {
        params += m.meta().param_count;
        macs += m.meta().mac_count;
      }
      record(arm, stage, last, params, macs, {}, acc);
    }
    stage = "distill";
    LossCurve curve;
    ModelSnapshot student = timed(arm, stage, [&] {
      return distill_student(registry, d, splits_.train, splits_.test, seed_, &curve);
    });
    save_snapshot(student, layout_.student(seed_, arm));
    record(arm, stage, student, curve);
  }

  SnapshotRegistry load_registry(RetrainSchedule schedule) const {
    SnapshotRegistry registry;
    registry.snapshots.push_back(load_snapshot(layout_.baseline(seed_)));
    for (int k = 1; k <= cfg_.cycles.num_cycles; ++k) {
      registry.snapshots.push_back(
          load_snapshot(layout_.cycle(seed_, to_string(schedule), k)));
    }
    return registry;
  }

 private:
  const ExperimentConfig& cfg_;
  const Splits& splits_;
  RunLayout layout_;
  std::uint64_t seed_;
  std::string run_id_;
  MetricsWriter metrics_;
  RunOutcome outcome_;
};

void merge(RunOutcome& into, RunOutcome&& from) {
  into.failures += from.failures;
  for (auto& r : from.records) into.records.push_back(std::move(r));
}

void write_config_copy(const ExperimentConfig& cfg, const fs::path& out) {
  write_text(RunLayout{out}.config(), dump_config(cfg));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string format_count(double v) {
  if (v == std::floor(v)) return std::to_string(static_cast<long long>(v));
  return fixed(v, 1);
}

}  // namespace

// ---- config ---------------------------------------------------------------

namespace {

void validate_structure(const ExperimentConfig& cfg) {
  const auto& schema_version = cfg.schema_version;
  const auto& seeds = cfg.seeds;
  const auto& arms = cfg.arms;
  const auto& dataset = cfg.dataset;
  const auto& model = cfg.model;
  const auto& baseline = cfg.baseline;
  const auto& cycles = cfg.cycles;
  const auto& distill = cfg.distill;
  if (schema_version != kSchemaVersion) {
    throw ParameterError("unsupported schema_version " + std::to_string(schema_version) +
                         " (expected " + std::to_string(kSchemaVersion) + ")");
  }
  if (seeds.empty()) throw ParameterError("config needs at least one seed");
  if (arms.empty()) throw ParameterError("config needs at least one arm");
  for (const auto& arm : arms) arm_schedule(arm);
  if (dataset.kind != "idx" && dataset.kind != "blobs") {
    throw ParameterError("dataset.kind must be idx or blobs, got '" + dataset.kind + "'");
  }
  if (model.kind != "desknet" && model.kind != "mlp") {
    throw ParameterError("model.kind must be desknet or mlp, got '" + model.kind + "'");
  }
  if (baseline.epochs < 0) throw ParameterError("baseline.epochs must be non-negative");
  cycles.validate();
  distill.validate();
}

}  // namespace

void ExperimentConfig::validate() const {
  validate_structure(*this);
  if (dataset.kind != "idx") return;
  for (const auto& [key, path] :
       {std::pair{"train_images", &dataset.train_images}, {"train_labels", &dataset.train_labels},
        {"test_images", &dataset.test_images}, {"test_labels", &dataset.test_labels}}) {
    if (path->empty() || !fs::exists(*path)) {
      throw ParameterError(std::string("dataset.") + key + " '" + path->string() +
                           "' does not exist");
    }
  }
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  ExperimentConfig cfg;
  try {
    const YAML::Node root = YAML::Load(text);
    if (!root.IsMap()) throw ParameterError("config must be a mapping");
    check_keys(root, "", {"schema_version", "dataset", "model", "baseline", "cycles", "distill",
                          "seeds", "arms", "output_dir"});
    if (!root["schema_version"]) throw ParameterError("config lacks schema_version");
    read(root, "schema_version", cfg.schema_version);
    read(root, "seeds", cfg.seeds);
    read(root, "arms", cfg.arms);
    if (root["output_dir"]) cfg.output_dir = root["output_dir"].as<std::string>();

    const auto ds = root["dataset"];
    check_keys(ds, "dataset",
               {"kind", "train_images", "train_labels", "test_images", "test_labels",
                "train_limit", "test_limit", "center_crop", "downsample", "standardize",
                "num_classes", "dim", "train_per_class", "test_per_class", "spread", "seed"});
    auto& d = cfg.dataset;
    read(ds, "kind", d.kind);
    read_path(ds, "train_images", d.train_images, base_dir);
    read_path(ds, "train_labels", d.train_labels, base_dir);
    read_path(ds, "test_images", d.test_images, base_dir);
    read_path(ds, "test_labels", d.test_labels, base_dir);
    read(ds, "train_limit", d.train_limit);
    read(ds, "test_limit", d.test_limit);
    read(ds, "center_crop", d.center_crop);
    read(ds, "downsample", d.downsample);
    read(ds, "standardize", d.standardize);
    read(ds, "num_classes", d.num_classes);
    read(ds, "dim", d.dim);
    read(ds, "train_per_class", d.train_per_class);
    read(ds, "test_per_class", d.test_per_class);
    read(ds, "spread", d.spread);
    read(ds, "seed", d.seed);

    const auto m = root["model"];
    check_keys(m, "model", {"kind", "widths", "blocks_per_stage", "hidden"});
    read(m, "kind", cfg.model.kind);
    read(m, "widths", cfg.model.widths);
    read(m, "blocks_per_stage", cfg.model.blocks_per_stage);
    read(m, "hidden", cfg.model.hidden);

    const auto b = root["baseline"];
    check_keys(b, "baseline",
               {"epochs", "lr", "batch_size", "momentum", "weight_decay", "augment"});
    read(b, "epochs", cfg.baseline.epochs);
    read(b, "lr", cfg.baseline.base_lr);
    read_train(b, "baseline", cfg.baseline.train);

    const auto c = root["cycles"];
    check_keys(c, "cycles",
               {"num_cycles", "retrain_epochs", "pruner", "base_fraction", "ramp",
                "magnitude_fraction", "fixed_lr", "one_cycle", "batch_size", "momentum",
                "weight_decay", "augment"});
    auto& cc = cfg.cycles;
    read(c, "num_cycles", cc.num_cycles);
    read(c, "retrain_epochs", cc.retrain_epochs);
    if (c && c["pruner"]) cc.pruner = parse_pruner_kind(c["pruner"].as<std::string>());
    read(c, "base_fraction", cc.base_fraction);
    read(c, "ramp", cc.ramp);
    read(c, "magnitude_fraction", cc.magnitude_fraction);
    read(c, "fixed_lr", cc.fixed_lr);
    read_train(c, "cycles", cc.train);
    if (c && c["one_cycle"]) {
      const auto oc = c["one_cycle"];
      check_keys(oc, "cycles.one_cycle",
                 {"eta_initial", "eta_max", "eta_min", "beta_initial", "beta_max",
                  "warmup_fraction"});
      read(oc, "eta_initial", cc.eta_initial);
      read(oc, "eta_max", cc.eta_max);
      read(oc, "eta_min", cc.eta_min);
      read(oc, "beta_initial", cc.beta_initial);
      read(oc, "beta_max", cc.beta_max);
      read(oc, "warmup_fraction", cc.warmup_fraction);
    }

    const auto k = root["distill"];
    check_keys(k, "distill",
               {"enabled", "tau", "objective", "teachers", "epochs", "batch_size", "eta_initial",
                "eta_max", "eta_min", "warmup_fraction", "beta1", "beta2", "eps", "warm_start",
                "joint_supervised", "augment"});
    auto& dc = cfg.distill;
    read(k, "enabled", cfg.distill_enabled);
    read(k, "tau", dc.tau);
    if (k && k["objective"]) dc.objective = parse_distill_objective(k["objective"].as<std::string>());
    if (k && k["teachers"]) dc.teachers = parse_teacher_set(k["teachers"].as<std::string>());
    read(k, "epochs", dc.epochs);
    read(k, "batch_size", dc.batch_size);
    read(k, "eta_initial", dc.eta_initial);
    read(k, "eta_max", dc.eta_max);
    read(k, "eta_min", dc.eta_min);
    read(k, "warmup_fraction", dc.warmup_fraction);
    read(k, "beta1", dc.adam.beta1);
    read(k, "beta2", dc.adam.beta2);
    read(k, "eps", dc.adam.eps);
    read(k, "warm_start", dc.warm_start);
    read(k, "joint_supervised", dc.joint_supervised);
    if (k && k["augment"]) {
      check_keys(k["augment"], "distill.augment", {"crop_padding", "horizontal_flip"});
      read(k["augment"], "crop_padding", dc.augment.crop_padding);
      read(k["augment"], "horizontal_flip", dc.augment.horizontal_flip);
    }
  } catch (const YAML::Exception& e) {
    throw ParameterError(std::string("invalid config: ") + e.what());
  }
  validate_structure(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  return parse_config(read_text(path), base);
}

std::string dump_config(const ExperimentConfig& cfg) {
  YAML::Node root;
  root["schema_version"] = cfg.schema_version;
  root["output_dir"] = cfg.output_dir.string();
  root["seeds"] = cfg.seeds;
  root["arms"] = cfg.arms;

  const auto& d = cfg.dataset;
  YAML::Node ds;
  ds["kind"] = d.kind;
  if (d.kind == "idx") {
    ds["train_images"] = d.train_images.string();
    ds["train_labels"] = d.train_labels.string();
    ds["test_images"] = d.test_images.string();
    ds["test_labels"] = d.test_labels.string();
    ds["train_limit"] = d.train_limit;
    ds["test_limit"] = d.test_limit;
    ds["center_crop"] = d.center_crop;
    ds["downsample"] = d.downsample;
  } else {
    ds["num_classes"] = d.num_classes;
    ds["dim"] = d.dim;
    ds["train_per_class"] = d.train_per_class;
    ds["test_per_class"] = d.test_per_class;
    ds["spread"] = d.spread;
    ds["seed"] = d.seed;
  }
  ds["standardize"] = d.standardize;
  root["dataset"] = ds;

  YAML::Node m;
  m["kind"] = cfg.model.kind;
  if (cfg.model.kind == "desknet") {
    m["widths"] = cfg.model.widths;
    m["blocks_per_stage"] = cfg.model.blocks_per_stage;
  } else {
    m["hidden"] = cfg.model.hidden;
  }
  root["model"] = m;

  YAML::Node b;
  b["epochs"] = cfg.baseline.epochs;
  b["lr"] = cfg.baseline.base_lr;
  b["batch_size"] = cfg.baseline.train.batch_size;
  b["momentum"] = cfg.baseline.train.momentum;
  b["weight_decay"] = cfg.baseline.train.weight_decay;
  b["augment"] = augment_node(cfg.baseline.train.augment);
  root["baseline"] = b;

  const auto& cc = cfg.cycles;
  YAML::Node c;
  c["num_cycles"] = cc.num_cycles;
  c["retrain_epochs"] = cc.retrain_epochs;
  c["pruner"] = std::string(to_string(cc.pruner));
  c["base_fraction"] = cc.base_fraction;
  c["ramp"] = cc.ramp;
  c["magnitude_fraction"] = cc.magnitude_fraction;
  c["fixed_lr"] = cc.fixed_lr;
  YAML::Node oc;
  oc["eta_initial"] = cc.eta_initial;
  oc["eta_max"] = cc.eta_max;
  oc["eta_min"] = cc.eta_min;
  oc["beta_initial"] = cc.beta_initial;
  oc["beta_max"] = cc.beta_max;
  oc["warmup_fraction"] = cc.warmup_fraction;
  c["one_cycle"] = oc;
  c["batch_size"] = cc.train.batch_size;
  c["momentum"] = cc.train.momentum;
  c["weight_decay"] = cc.train.weight_decay;
  c["augment"] = augment_node(cc.train.augment);
  root["cycles"] = c;

  const auto& dc = cfg.distill;
  YAML::Node k;
  k["enabled"] = cfg.distill_enabled;
  k["tau"] = dc.tau;
  k["objective"] = std::string(to_string(dc.objective));
  k["teachers"] = std::string(to_string(dc.teachers));
  k["epochs"] = dc.epochs;
  k["batch_size"] = dc.batch_size;
  k["eta_initial"] = dc.eta_initial;
  k["eta_max"] = dc.eta_max;
  k["eta_min"] = dc.eta_min;
  k["warmup_fraction"] = dc.warmup_fraction;
  k["beta1"] = dc.adam.beta1;
  k["beta2"] = dc.adam.beta2;
  k["eps"] = dc.adam.eps;
  k["warm_start"] = dc.warm_start;
  k["joint_supervised"] = dc.joint_supervised;
  k["augment"] = augment_node(dc.augment);
  root["distill"] = k;

  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << root;
  return std::string(out.c_str()) + "\n";
}

fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (cfg.output_dir.is_absolute()) return cfg.output_dir;
  if (const char* root = std::getenv("KESI_OUTPUT_ROOT"); root && *root) {
    return fs::path(root) / cfg.output_dir;
  }
  return cfg.output_dir;
}

// ---- data and models ------------------------------------------------------

Splits load_splits(const DatasetSpec& spec) {
  Splits s;
  if (spec.kind == "blobs") {
    s.train = make_blobs(spec.num_classes, spec.dim, spec.train_per_class, spec.spread, spec.seed);
    s.test = make_blobs(spec.num_classes, spec.dim, spec.test_per_class, spec.spread,
                        derive_seed(spec.seed, "blobs-test"));
  } else {
    for (const auto* p :
         {&spec.train_images, &spec.train_labels, &spec.test_images, &spec.test_labels}) {
      if (p->empty() || !fs::exists(*p)) {
        throw ParameterError("dataset file '" + p->string() + "' does not exist");
      }
    }
    s.train = load_idx_dataset(spec.train_images, spec.train_labels);
    s.test = load_idx_dataset(spec.test_images, spec.test_labels);
    const std::size_t classes = std::max(s.train.num_classes, s.test.num_classes);
    s.train.num_classes = s.test.num_classes = classes;
    if (spec.train_limit > 0 && spec.train_limit < s.train.size()) {
      s.train = s.train.slice(0, spec.train_limit);
    }
    if (spec.test_limit > 0 && spec.test_limit < s.test.size()) {
      s.test = s.test.slice(0, spec.test_limit);
    }
    if (spec.center_crop > 0) {
      s.train = center_crop(s.train, spec.center_crop);
      s.test = center_crop(s.test, spec.center_crop);
    }
    if (spec.downsample > 1) {
      s.train = downsample(s.train, spec.downsample);
      s.test = downsample(s.test, spec.downsample);
    }
  }
  if (spec.standardize) {
    const auto st = Standardizer::fit(s.train);
    st.apply(s.train);
    st.apply(s.test);
  }
  return s;
}

ModelSnapshot build_model(const ModelSpec& spec, const Dataset& train, std::uint64_t seed) {
  const Shape& in = train.sample_shape;
  if (spec.kind == "desknet") {
    if (in.size() != 3 || in[1] != in[2]) {
      throw ParameterError("desknet needs square C x H x W samples, got " + to_string(in));
    }
    return build_desknet(spec.widths, spec.blocks_per_stage, train.num_classes,
                         {in[0], in[1], seed});
  }
  if (in.size() != 1) throw ParameterError("mlp needs flat samples, got " + to_string(in));
  std::vector<std::size_t> sizes{in[0]};
  sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
  sizes.push_back(train.num_classes);
  return build_mlp(sizes, seed);
}

// ---- metrics --------------------------------------------------------------

std::string to_json_line(const MetricsRecord& r) {
  Json j;
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["arm"] = r.arm;
  j["stage"] = r.stage;
  j["cycle"] = r.cycle;
  j["param_count"] = r.param_count;
  j["mac_count"] = r.mac_count;
  j["train_loss"] = r.train_loss;
  j["eval_accuracy"] = r.eval_accuracy;
  if (r.error) j["error"] = *r.error;
  return j.dump();
}

MetricsRecord parse_json_line(const std::string& line) {
  try {
    const Json j = Json::parse(line);
    MetricsRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.arm = j.at("arm").get<std::string>();
    r.stage = j.at("stage").get<std::string>();
    r.cycle = j.at("cycle").get<int>();
    r.param_count = j.at("param_count").get<std::int64_t>();
    r.mac_count = j.at("mac_count").get<std::int64_t>();
    r.train_loss = j.at("train_loss").get<std::vector<double>>();
    r.eval_accuracy = j.at("eval_accuracy").get<double>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad metrics record: ") + e.what(), 0);
  }
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  const std::string text = read_text(path);
  std::vector<MetricsRecord> out;
  std::size_t start = 0;
  while (true) {
    const auto end = text.find('\n', start);
    if (end == std::string::npos) break;  // a torn tail has no newline yet
    if (end > start) {
      try {
        out.push_back(parse_json_line(text.substr(start, end - start)));
      } catch (const FormatError& e) {
        throw FormatError(e.what(), start);
      }
    }
    start = end + 1;
  }
  return out;
}

MetricsWriter::MetricsWriter(const fs::path& path, bool truncate) : path_(path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, truncate ? std::ios::trunc | std::ios::binary
                                   : std::ios::app | std::ios::binary);
  if (!out) throw RunError("cannot open metrics file '" + path.string() + "'");
}

void MetricsWriter::append(const MetricsRecord& record) { append_line(path_, to_json_line(record)); }

// ---- layout ---------------------------------------------------------------

fs::path RunLayout::seed_dir(std::uint64_t seed) const {
  return root / ("seed-" + std::to_string(seed));
}
fs::path RunLayout::baseline(std::uint64_t seed) const { return seed_dir(seed) / "baseline.snap"; }
fs::path RunLayout::cycle(std::uint64_t seed, std::string_view schedule, int k) const {
  return seed_dir(seed) / std::string(schedule) / ("cycle-" + std::to_string(k) + ".snap");
}
fs::path RunLayout::student(std::uint64_t seed, std::string_view arm) const {
  return seed_dir(seed) / std::string(arm) / "student.snap";
}
fs::path RunLayout::metrics(std::uint64_t seed) const {
  return root / "metrics" / ("seed-" + std::to_string(seed) + ".jsonl");
}
fs::path RunLayout::timing(std::uint64_t seed) const {
  return root / "timing" / ("seed-" + std::to_string(seed) + ".jsonl");
}
fs::path RunLayout::config() const { return root / "config.yaml"; }
fs::path RunLayout::report_dir() const { return root / "report"; }

RetrainSchedule arm_schedule(std::string_view arm) {
  if (arm == "fixed_small_lr") return RetrainSchedule::fixed_small_lr;
  if (arm == "one_cycle" || arm == "kesi" || arm == "single_teacher") {
    return RetrainSchedule::one_cycle;
  }
  throw ParameterError("unknown arm '" + std::string(arm) +
                       "' (expected fixed_small_lr, one_cycle, kesi or single_teacher)");
}

// ---- runs -----------------------------------------------------------------

RunOutcome run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  write_config_copy(cfg, out);
  const Splits splits = load_splits(cfg.dataset);
  RunOutcome total;
  for (const std::uint64_t seed : cfg.seeds) {
    SeedRunner run(cfg, splits, out, seed, true);
    std::optional<ModelSnapshot> base;
    try {
      base = run.baseline(cfg.arms);
    } catch (const std::exception& e) {
      for (const auto& arm : cfg.arms) run.fail(arm, "baseline", 0, e.what());
      merge(total, std::move(run.outcome()));
      continue;
    }
    std::map<RetrainSchedule, SnapshotRegistry> registries;
    for (const auto schedule : {RetrainSchedule::fixed_small_lr, RetrainSchedule::one_cycle}) {
      std::vector<std::string> arms;
      for (const auto& arm : cfg.arms) {
        if (uses_registry(arm, schedule)) arms.push_back(arm);
      }
      if (arms.empty()) continue;
      int cycle = 0;
      try {
        registries.emplace(schedule, run.prune(*base, schedule, arms, cycle));
      } catch (const std::exception& e) {
        for (const auto& arm : arms) {
          run.fail(arm, "cycle-" + std::to_string(cycle), cycle, e.what());
        }
      }
    }
    for (const auto& arm : cfg.arms) {
      if (!is_distill_arm(arm)) continue;
      const auto it = registries.find(RetrainSchedule::one_cycle);
      if (it == registries.end()) continue;  // failure already recorded
      std::string stage = "distill";
      try {
        run.distill(it->second, arm, stage);
      } catch (const std::exception& e) {
        run.fail(arm, stage, cfg.cycles.num_cycles, e.what());
      }
    }
    merge(total, std::move(run.outcome()));
  }
  const ReportResult rep = report(out);
  if (!rep.complete() && total.ok()) ++total.failures;
  return total;
}

RunOutcome run_train_stage(const ExperimentConfig& cfg, const fs::path& out, std::uint64_t seed) {
  cfg.validate();
  write_config_copy(cfg, out);
  const Splits splits = load_splits(cfg.dataset);
  SeedRunner run(cfg, splits, out, seed, false);
  try {
    run.baseline(cfg.arms);
  } catch (const std::exception& e) {
    for (const auto& arm : cfg.arms) run.fail(arm, "baseline", 0, e.what());
  }
  return std::move(run.outcome());
}

RunOutcome run_prune_stage(const ExperimentConfig& cfg, const fs::path& out, std::uint64_t seed,
                           std::string_view arm) {
  cfg.validate();
  const auto schedule = arm_schedule(arm);
  const Splits splits = load_splits(cfg.dataset);
  SeedRunner run(cfg, splits, out, seed, false);
  int cycle = 0;
  try {
    const ModelSnapshot base = load_snapshot(RunLayout{out}.baseline(seed));
    run.prune(base, schedule, {std::string(arm)}, cycle);
  } catch (const std::exception& e) {
    run.fail(std::string(arm), "cycle-" + std::to_string(cycle), cycle, e.what());
  }
  return std::move(run.outcome());
}

RunOutcome run_distill_stage(const ExperimentConfig& cfg, const fs::path& out,
                             std::uint64_t seed, std::string_view arm) {
  cfg.validate();
  if (!is_distill_arm(arm)) {
    throw ParameterError("distillation runs for the kesi and single_teacher arms, not '" +
                         std::string(arm) + "'");
  }
  const Splits splits = load_splits(cfg.dataset);
  SeedRunner run(cfg, splits, out, seed, false);
  std::string stage = "distill";
  try {
    const SnapshotRegistry registry = run.load_registry(RetrainSchedule::one_cycle);
    run.distill(registry, std::string(arm), stage);
  } catch (const std::exception& e) {
    run.fail(std::string(arm), stage, cfg.cycles.num_cycles, e.what());
  }
  return std::move(run.outcome());
}

// ---- report ---------------------------------------------------------------

double pct_reduction(std::int64_t value, std::int64_t baseline) {
  if (baseline <= 0) throw ParameterError("baseline count must be positive");
  return 100.0 * (1.0 - static_cast<double>(value) / static_cast<double>(baseline));
}

ReportResult report(const fs::path& out) {
  const RunLayout layout{out};
  if (!fs::exists(layout.config())) {
    throw RunError("no run found in '" + out.string() + "' (missing config.yaml)");
  }
  const ExperimentConfig cfg = parse_config(read_text(layout.config()));
  const int cycles = cfg.cycles.num_cycles;

  // Latest successful record per (seed, arm, stage).
  std::map<std::tuple<std::uint64_t, std::string, std::string>, MetricsRecord> found;
  for (const auto seed : cfg.seeds) {
    if (!fs::exists(layout.metrics(seed))) continue;
    for (auto& r : read_metrics(layout.metrics(seed))) {
      const auto key = std::make_tuple(r.seed, r.arm, r.stage);
      if (r.error) {
        found.erase(key);
      } else {
        found[key] = std::move(r);
      }
    }
  }
  auto lookup = [&](std::uint64_t seed, const std::string& arm,
                    const std::string& stage) -> const MetricsRecord* {
    const auto it = found.find({seed, arm, stage});
    return it == found.end() ? nullptr : &it->second;
  };

  ReportResult result;
  for (const auto seed : cfg.seeds) {
    for (const auto& arm : cfg.arms) {
      std::vector<std::string> stages{"baseline"};
      for (int k = 1; k <= cycles; ++k) stages.push_back("cycle-" + std::to_string(k));
      if (cfg.distill_enabled && arm == "kesi") stages.push_back("ensemble");
      if (cfg.distill_enabled && is_distill_arm(arm)) stages.push_back("distill");
      for (const auto& stage : stages) {
        if (!lookup(seed, arm, stage)) {
          result.missing.push_back("seed " + std::to_string(seed) + " arm " + arm + " stage " +
                                   stage);
        }
      }
    }
  }

  std::ostringstream acc, size;
  acc << "arm,seed,cycle,eval_accuracy\n";
  size << "arm,seed,cycle,param_count,mac_count,pct_params_reduced,pct_macs_reduced\n";
  for (const auto& arm : cfg.arms) {
    for (const auto seed : cfg.seeds) {
      const MetricsRecord* base = lookup(seed, arm, "baseline");
      for (int k = 0; k <= cycles; ++k) {
        const MetricsRecord* r = lookup(seed, arm, k == 0 ? "baseline" : "cycle-" + std::to_string(k));
        if (!r) continue;
        acc << arm << ',' << seed << ',' << k << ',' << fixed(r->eval_accuracy, 6) << '\n';
        size << arm << ',' << seed << ',' << k << ',' << r->param_count << ',' << r->mac_count;
        if (base && base->param_count > 0 && base->mac_count > 0) {
          size << ',' << fixed(pct_reduction(r->param_count, base->param_count), 2) << ','
               << fixed(pct_reduction(r->mac_count, base->mac_count), 2);
        } else {
          size << ",,";
        }
        size << '\n';
      }
    }
  }

  // Method rows: the shared baseline, then each arm's final model.
  std::vector<std::pair<std::string, std::pair<std::string, std::string>>> methods{
      {"baseline", {cfg.arms.front(), "baseline"}}};
  const std::string last = cycles > 0 ? "cycle-" + std::to_string(cycles) : "baseline";
  for (const auto& arm : cfg.arms) {
    if (arm == "fixed_small_lr" || arm == "one_cycle") methods.push_back({arm, {arm, last}});
    if (arm == "kesi" && cfg.distill_enabled) {
      methods.push_back({"snapshot_ensemble", {arm, "ensemble"}});
      methods.push_back({"kesi", {arm, "distill"}});
    }
    if (arm == "single_teacher" && cfg.distill_enabled) {
      methods.push_back({"single_teacher", {arm, "distill"}});
    }
  }
  std::ostringstream sum;
  sum << "method,params,pct_macs_reduced,accuracy_mean,accuracy_std,n\n";
  for (const auto& [method, where] : methods) {
    std::vector<double> params, macs, accs;
    for (const auto seed : cfg.seeds) {
      const MetricsRecord* r = lookup(seed, where.first, where.second);
      const MetricsRecord* base = lookup(seed, where.first, "baseline");
      if (!r || !base || base->mac_count <= 0) continue;
      params.push_back(static_cast<double>(r->param_count));
      macs.push_back(pct_reduction(r->mac_count, base->mac_count));
      accs.push_back(r->eval_accuracy);
    }
    if (accs.empty()) continue;
    SummaryRow row{method, mean_of(params), mean_of(macs), mean_of(accs), sample_std(accs),
                   accs.size()};
    sum << row.method << ',' << format_count(row.params) << ',' << fixed(row.pct_macs_reduced, 2)
        << ',' << fixed(row.accuracy_mean, 6) << ',' << fixed(row.accuracy_std, 6) << ','
        << row.n << '\n';
    result.summary.push_back(std::move(row));
  }

  write_text(layout.report_dir() / "accuracy_vs_cycle.csv", acc.str());
  write_text(layout.report_dir() / "size_vs_cycle.csv", size.str());
  write_text(layout.report_dir() / "summary.csv", sum.str());
  std::ostringstream missing;
  for (const auto& m : result.missing) missing << m << '\n';
  write_text(layout.report_dir() / "missing.txt", missing.str());
  return result;
}

}  // namespace kesi
