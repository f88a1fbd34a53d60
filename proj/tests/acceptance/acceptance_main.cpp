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

// Prints one PASS/FAIL line per acceptance criterion; exit code 0 iff all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "kesi/harness.hpp"
#include "kesi/losses.hpp"
#include "kesi/optim.hpp"
#include "kesi/pruning.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace kesi;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

int g_failed = 0;

template <typename F>
void criterion(const std::string& name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!v.pass) ++g_failed;
  std::printf("%s  %-28s %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict gradient_suite() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0;
  std::size_t entries = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto g = testing::make_random_graph(seed);
    const auto r = testing::check_gradients(g.leaves, g.build);
    worst = std::max(worst, r.max_rel_error);
    entries += r.checked;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 1e-4 && secs < 120,
          "50 graphs, " + std::to_string(entries) + " entries, max rel err " + fmt("%.2e", worst)};
}

Verdict schedule_exactness() {
  double worst = 0;
  const auto dev = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (auto [t, l] : {std::pair<std::int64_t, std::int64_t>{1, 2}, {10, 100}, {39, 390}, {3, 7}}) {
    const OneCycleConfig c{0.01, 0.1, 1e-4, 0.85, 0.95, t, l};
    dev(one_cycle_lr(c, 0), c.eta_initial);
    dev(one_cycle_lr(c, t), c.eta_max);
    dev(one_cycle_lr(c, l), c.eta_min);
    dev(one_cycle_momentum(c, 0), c.beta_initial);
    dev(one_cycle_momentum(c, t), c.beta_max);
    dev(one_cycle_momentum(c, l), c.beta_initial);
  }
  const OneCycleConfig paper{0.01, 0.1, 1e-4, 0.85, 0.95, 10, 100};
  const double mid = one_cycle_lr(paper, 5);
  dev(mid, 0.055);
  return {worst <= 1e-12, "max endpoint/midpoint deviation " + fmt("%.1e", worst) +
                              ", eta(T/2) = " + fmt("%.15f", mid)};
}

Verdict loss_properties() {
  Rng rng(0, "acceptance-losses");
  std::size_t violations = 0;
  double max_equal = 0, max_onehot = 0;
  for (int b = 0; b < 1000; ++b) {
    const std::size_t n = 1 + rng.below(8), m = 2 + rng.below(9);
    const double tau = rng.uniform(0.5, 8);
    const Tensor z = testing::random_tensor({n, m}, rng, -6, 6);
    Tape off(false);
    const ProbBatch q(softmax(off, testing::random_tensor({n, m}, rng, -4, 4)));
    Tape tape;
    const double kd = kd_loss_single(tape, z, q, tau).item();
    if (!(kd > 0)) ++violations;  // q is independent of p, so strictly positive
    const ProbBatch self(softmax(off, z, tau));
    const double zero = kd_loss_single(tape, z, self, tau).item();
    max_equal = std::max(max_equal, std::abs(zero));
    if (zero < -1e-12) ++violations;  // round-off around exact zero

    // tau^2 prefactor: powers of two keep z * t / t exact, so scaling is exact.
    const double t = std::ldexp(1.0, static_cast<int>(rng.below(4)));
    Tensor zt = z.clone();
    for (auto& v : zt.data()) v *= t;
    const double scaled = kd_loss_single(tape, zt, q, t).item();
    const double unit = kd_loss_single(tape, z, q, 1.0).item();
    if (scaled != t * t * unit) ++violations;

    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng.below(m));
    const LabelBatch lb(labels, m);
    max_onehot = std::max(max_onehot, std::abs(kd_loss_single(tape, z, ProbBatch(lb.one_hot()), 1.0).item() -
                                               cross_entropy(tape, z, lb).item()));

    const double k1 = kd_loss_mean_kl(tape, z, std::vector<ProbBatch>{q}, tau).item();
    if (std::memcmp(&k1, &kd, sizeof kd) != 0) ++violations;
  }
  const bool pass = violations == 0 && max_equal <= 1e-12 && max_onehot <= 1e-12;
  return {pass, "1000 batches, " + std::to_string(violations) + " violations, |KL(p,p)| <= " +
                    fmt("%.1e", max_equal) + ", one-hot vs CE <= " + fmt("%.1e", max_onehot)};
}

Verdict pruning_oracles() {
  std::size_t l1 = 0, mag = 0;
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto r = testing::run_prune_trial(1000 + trial);
    l1 += r.l1_match;
    mag += r.magnitude_match;
    worst = std::max(worst, r.compact_diff);
  }
  return {l1 == 100 && mag == 100 && worst <= 1e-12,
          "l1 " + std::to_string(l1) + "/100, magnitude " + std::to_string(mag) +
              "/100, compact max diff " + fmt("%.1e", worst)};
}

// Independent closed-form count of DeskNet[8,16,32] (1 block per stage, 1
// input channel, 12x12, 10 classes) given alive conv1 filters a[0..2].
struct HandCount {
  std::int64_t params, macs;
};

HandCount desknet_hand_count(const std::int64_t a[3]) {
  const std::int64_t w[3] = {8, 16, 32}, hw[3] = {144, 36, 9};
  std::int64_t params = 72 + 16, macs = 72 * 144;  // stem conv + bn
  std::int64_t cin = 8;
  for (int s = 0; s < 3; ++s) {
    const std::int64_t k2 = s == 0 ? 9 : 16;
    params += a[s] * cin * k2 + 2 * a[s] + w[s] * a[s] * 9 + 2 * w[s];
    macs += (a[s] * cin * k2 + w[s] * a[s] * 9) * hw[s];
    if (s > 0) {
      params += w[s] * cin * 4 + 2 * w[s];
      macs += w[s] * cin * 4 * hw[s];
    }
    cin = w[s];
  }
  params += 32 * 10 + 10;
  macs += 32 * 10;
  return {params, macs};
}

Verdict bookkeeping() {
  auto m = build_desknet({8, 16, 32}, 1, 10, {.in_channels = 1, .input_size = 12});
  const double base = 0.2, ramp = 0.05;
  std::int64_t alive[3] = {8, 16, 32};
  const std::int64_t full[3] = {8, 16, 32};
  const HandCount dense = desknet_hand_count(full);
  bool counts_ok = dense.params == m.meta().param_count && dense.macs == m.meta().mac_count;
  std::string detail;
  for (int cycle = 1; cycle <= 5; ++cycle) {
    m = apply_filter_prune(m, make_depth_ramped_plan(m, base, ramp));
    for (int d = 0; d < 3; ++d) {
      // floor(alive * fraction) with integer arithmetic: fraction = (20 + 5d) / 100.
      const std::int64_t cut = std::min(alive[d] * (20 + 5 * d) / 100, alive[d] - 1);
      alive[d] -= cut;
    }
    const HandCount hand = desknet_hand_count(alive);
    const auto rep = sparsity_report(m);
    counts_ok = counts_ok && hand.params == m.meta().param_count &&
                hand.params == rep.alive_params && hand.macs == m.meta().mac_count &&
                hand.macs == rep.alive_macs;
    const std::string hand_pct =
        fmt("%.2f", 100.0 * (1.0 - static_cast<double>(hand.macs) / dense.macs));
    counts_ok = counts_ok && hand_pct == fmt("%.2f", rep.pct_macs_pruned) &&
                hand_pct == fmt("%.2f", pct_reduction(m.meta().mac_count, dense.macs));
  }
  const auto rep = sparsity_report(m);
  const double filters_removed =
      100.0 * (1.0 - static_cast<double>(alive[0] + alive[1] + alive[2]) / (8 + 16 + 32));
  double max_layer = 0;
  for (int d = 0; d < 3; ++d)
    max_layer = std::max(max_layer, 100.0 * (1.0 - static_cast<double>(alive[d]) / full[d]));
  const bool quadratic = rep.pct_macs_pruned > filters_removed;

  // Reference: a chain where every conv is prunable shows the quadratic effect.
  auto chain = testing::make_conv_chain(1, 12, {8, 16, 32}, 10, 0);
  const auto chain_dense = sparsity_report(chain);
  for (int cycle = 0; cycle < 5; ++cycle)
    chain = apply_filter_prune(chain, make_depth_ramped_plan(chain, base, ramp));
  std::int64_t chain_alive = 0;
  for (const char* n : {"conv0.weight", "conv1.weight", "conv2.weight"})
    chain_alive += static_cast<std::int64_t>(alive_filters(chain.param(n).mask));
  const double chain_filters = 100.0 * (1.0 - static_cast<double>(chain_alive) / 56);
  const double chain_macs = sparsity_report(chain).pct_macs_pruned;

  detail = std::string("hand counts ") + (counts_ok ? "match" : "MISMATCH") + " (params " +
           std::to_string(m.meta().param_count) + "/" + std::to_string(dense.params) +
           ", %params " + fmt("%.2f", rep.pct_params_pruned) + ", %MACs " +
           fmt("%.2f", rep.pct_macs_pruned) + "); filters removed " + fmt("%.2f", filters_removed) +
           "% (max layer " + fmt("%.2f", max_layer) + "%), %MACs " +
           (quadratic ? "exceeds" : "does not exceed") + " it; all-prunable chain: filters " +
           fmt("%.2f", chain_filters) + "% vs MACs " + fmt("%.2f", chain_macs) + "%";
  (void)chain_dense;
  return {counts_ok && quadratic, detail};
}

struct SeedResult {
  double fixed = 0, one_cycle = 0, ensemble = 0, best_member = 0, kesi = 0, single = 0;
  double pct_params = 0;
};

Verdict desk_behavior(const fs::path& out, bool reuse) {
  auto cfg = load_config(fs::path(KESI_SOURCE_DIR) / "configs" / "desk.yaml");
  const auto start = std::chrono::steady_clock::now();
  if (!reuse || !report(out).complete()) {
    fs::remove_all(out);
    const auto outcome = run_experiment(cfg, out);
    if (!outcome.ok()) return {false, std::to_string(outcome.failures) + " failed stages"};
  }
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  const std::string last = "cycle-" + std::to_string(cfg.cycles.num_cycles);
  std::vector<SeedResult> seeds;
  for (auto seed : cfg.seeds) {
    std::map<std::string, MetricsRecord> rec;
    for (const auto& r : read_metrics(RunLayout{out}.metrics(seed))) rec[r.arm + "/" + r.stage] = r;
    SeedResult s;
    s.fixed = rec.at("fixed_small_lr/" + last).eval_accuracy;
    s.one_cycle = rec.at("one_cycle/" + last).eval_accuracy;
    s.ensemble = rec.at("kesi/ensemble").eval_accuracy;
    s.best_member = rec.at("one_cycle/baseline").eval_accuracy;
    for (int k = 1; k <= cfg.cycles.num_cycles; ++k)
      s.best_member = std::max(s.best_member, rec.at("one_cycle/cycle-" + std::to_string(k)).eval_accuracy);
    s.kesi = rec.at("kesi/distill").eval_accuracy;
    s.single = rec.at("single_teacher/distill").eval_accuracy;
    s.pct_params = pct_reduction(rec.at("one_cycle/" + last).param_count,
                                 rec.at("one_cycle/baseline").param_count);
    seeds.push_back(s);
    std::printf("      seed %llu: fixed %.4f one_cycle %.4f ensemble %.4f (best member %.4f) "
                "kesi %.4f single_teacher %.4f params -%.2f%%\n",
                static_cast<unsigned long long>(seed), s.fixed, s.one_cycle, s.ensemble,
                s.best_member, s.kesi, s.single, s.pct_params);
  }
  const auto mean = [&](auto f) {
    double t = 0;
    for (const auto& s : seeds) t += f(s);
    return t / static_cast<double>(seeds.size());
  };
  const double a = mean([](const SeedResult& s) { return s.one_cycle - s.fixed; });
  const double b = mean([](const SeedResult& s) { return s.ensemble - s.best_member; });
  const double c = mean([](const SeedResult& s) { return s.kesi - s.one_cycle; });
  const double d = mean([](const SeedResult& s) { return s.kesi - s.single; });
  const double reduction = mean([](const SeedResult& s) { return s.pct_params; });
  const bool pa = a >= 0, pb = b >= 0.002, pc = c > 0, pd = d >= 0;
  const bool size_ok = reduction >= 50.0, time_ok = minutes < 45.0;
  const auto mark = [](bool ok) { return ok ? "ok" : "NO"; };
  std::string detail = std::string("(a) ") + mark(pa) + " " + fmt("%+.2f", 100 * a) + " pts, (b) " +
                       mark(pb) + " " + fmt("%+.2f", 100 * b) + " pts, (c) " + mark(pc) + " " +
                       fmt("%+.2f", 100 * c) + " pts, (d) " + mark(pd) + " " +
                       fmt("%+.2f", 100 * d) + " pts; params -" + fmt("%.2f", reduction) + "% " +
                       mark(size_ok) + "; " + fmt("%.1f", minutes) + " min " + mark(time_ok) +
                       (reuse ? " (reused run)" : "");
  return {pa && pb && pc && pd && size_ok && time_ok, detail};
}

Verdict determinism(const fs::path& out) {
  std::vector<std::pair<std::string, ExperimentConfig>> configs;
  configs.emplace_back("smoke", load_config(fs::path(KESI_SOURCE_DIR) / "configs" / "smoke.yaml"));
  auto desk = load_config(fs::path(KESI_SOURCE_DIR) / "configs" / "desk.yaml");
  desk.seeds = {7};
  desk.dataset.train_limit = 600;
  desk.dataset.test_limit = 200;
  desk.baseline.epochs = 2;
  desk.cycles.num_cycles = 2;
  desk.cycles.retrain_epochs = 1;
  desk.distill.epochs = 1;
  configs.emplace_back("desk-mini", desk);
  std::size_t files = 0;
  for (const auto& [name, cfg] : configs) {
    const fs::path a = out / name / "a", b = out / name / "b";
    fs::remove_all(out / name);
    if (!run_experiment(cfg, a).ok() || !run_experiment(cfg, b).ok())
      return {false, name + " run failed"};
    for (auto seed : cfg.seeds) {
      const auto ma = read_bytes(RunLayout{a}.metrics(seed));
      if (ma.empty() || ma != read_bytes(RunLayout{b}.metrics(seed)))
        return {false, name + " seed " + std::to_string(seed) + " metrics differ"};
      ++files;
    }
  }
  return {true, std::to_string(files) + " metrics files bit-identical across two runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string out = "acceptance-runs";
  bool reuse = false;
  bool skip_desk = false;
  app.add_option("-o,--out", out, "Working directory for experiment runs");
  app.add_flag("--reuse", reuse, "Reuse a complete desk run found in the working directory");
  app.add_flag("--skip-desk", skip_desk, "Report the desk criterion as not run (FAIL)");
  CLI11_PARSE(app, argc, argv);

  criterion("gradient-suite", gradient_suite);
  criterion("schedule-exactness", schedule_exactness);
  criterion("loss-properties", loss_properties);
  criterion("pruning-oracle-equivalence", pruning_oracles);
  criterion("bookkeeping", bookkeeping);
  criterion("desk-behavior", [&] {
    return skip_desk ? Verdict{false, "not run (--skip-desk)"}
                     : desk_behavior(fs::path(out) / "desk", reuse);
  });
  criterion("determinism", [&] { return determinism(fs::path(out) / "determinism"); });
  std::printf("%d criteria failed\n", g_failed);
  return g_failed == 0 ? 0 : 1;
}
