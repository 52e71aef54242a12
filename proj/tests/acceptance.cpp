// Acceptance run: one [PASS]/[FAIL] line per criterion. Exit status is the
// number of failed criteria.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "reference.hpp"
#include "test_util.hpp"

using namespace smp;
using namespace smp::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kForwardTol = 1e-10;
constexpr double kSensitivityFloor = 1e-8;
constexpr int kSensitivityDraws = 100;
constexpr int kSensitivityNeeded = 90;
constexpr double kPeriodTol = 0.02;
constexpr double kEnergyTol = 0.01;
constexpr double kFastLimitSeconds = 60.0;
constexpr long kHopperSteps = 200'000;
constexpr int kHopperSeeds = 4;
constexpr int kHopperSeedsNeeded = 3;
constexpr double kHopperFactor = 3.0;
constexpr long kWalkerSteps = 300'000;
constexpr int kWalkerImprovedNeeded = 3;
constexpr int kTrainHidden = 64;
constexpr int kEvalEpisodes = 10;
constexpr int kRandomEpisodes = 20;
constexpr double kHoppingPeriodTol = 0.2;
constexpr int kAnalysisEpisodes = 3;
constexpr int kAnalysisNeeded = 2;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

ModularNet draw_net(Scheme s, int c_max, std::uint64_t seed, int hidden) {
  ModularConfig c;
  c.scheme = s;
  c.c_max = c_max;
  c.hidden = hidden;
  Rng rng(seed);
  return ModularNet(c, rng);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) return "<missing " + p.string() + ">";
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  os << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const auto g = chain(3);
  double worst = 0.0;
  long checked = 0, skipped = 0;
  for (int d = 0; d < 100; ++d) {
    const auto net = draw_net(Scheme::kBothWay, 1, derive_seed(101, d), 16);
    Rng rng(derive_seed(102, d));
    const auto states = random_states(3, rng);
    AgentInput in{&g, {}};
    for (const auto& s : states) in.limbs.push_back(ad::Tensor::parameter(limb_rows(s)));
    std::vector<double> w(3);
    for (auto& x : w) x = rng.normal();
    auto params = net.parameters();
    for (const auto& t : in.limbs) params.push_back(t);
    const LossFn loss = [&](ad::Tape& tape) {
      const auto out = net.forward(tape, std::span<const AgentInput>(&in, 1))[0];
      ad::Tensor sum = tape.scalar_mul(tape.tanh(out.head[0]), w[0]);
      for (int i = 1; i < 3; ++i) sum = tape.add(sum, tape.scalar_mul(tape.tanh(out.head[i]), w[i]));
      return sum;
    };
    const auto r = grad_check(params, loss, kGradStep, [&] { return relu_pattern(net, g, in.limbs); });
    worst = std::max(worst, r.max_error);
    checked += r.checked;
    skipped += r.skipped;
  }
  const double secs = seconds_since(t0);
  return {worst < kGradTol && secs < kFastLimitSeconds,
          "max rel err " + fmt(worst) + " over 100 draws (tol " + fmt(kGradTol) + "), " +
              std::to_string(checked) + " coordinates, " + std::to_string(skipped) +
              " skipped at ReLU kinks, " + fmt(secs, 3) + " s"};
}

double output_diff(const PolicyOutput& out, const RefResult& ref, Scheme s, int n) {
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    d = std::max(d, std::abs(out.actions[i] - ref.actions[i]));
    if (s == Scheme::kBottomUp || s == Scheme::kBothWay)
      d = std::max(d, (out.up_messages[i] - ref.up[i].transpose()).cwiseAbs().maxCoeff());
    if (s == Scheme::kTopDown || s == Scheme::kBothWay)
      d = std::max(d, (out.down_messages[i] - ref.down_in[i].transpose()).cwiseAbs().maxCoeff());
  }
  return d;
}

Outcome reference_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(201);
  std::vector<MorphologyGraph> trees;
  std::vector<std::vector<LimbState>> states;
  for (int t = 0; t < 50; ++t) {
    trees.push_back(random_tree(1 + static_cast<int>(rng.index(7)), rng, "t" + std::to_string(t)));
    states.push_back(random_states(trees.back().size(), rng));
  }
  const int c_max = std::max(1, max_children(trees));
  double worst = 0.0;
  for (Scheme s : {Scheme::kNone, Scheme::kBottomUp, Scheme::kTopDown, Scheme::kBothWay}) {
    const auto net = draw_net(s, c_max, 202, ModularConfig{}.hidden);
    // All 50 trees in one depth-batched pass, then each alone on the sequential schedule.
    const auto batched = depth_batched_forward(states, trees, net, Batching::kDepth);
    for (std::size_t t = 0; t < trees.size(); ++t) {
      const auto ref = reference_forward(net, trees[t], states[t]);
      const std::vector<std::vector<LimbState>> one{states[t]};
      const std::vector<MorphologyGraph> gt{trees[t]};
      const auto seq = depth_batched_forward(one, gt, net, Batching::kSequential)[0];
      worst = std::max(worst, output_diff(batched[t], ref, s, trees[t].size()));
      worst = std::max(worst, output_diff(seq, ref, s, trees[t].size()));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kForwardTol && secs < kFastLimitSeconds,
          "max |diff| " + fmt(worst) + " on 50 trees x 4 schemes x 2 schedules, " + fmt(secs, 3) +
              " s"};
}

Outcome information_flow() {
  const auto g = chain(3);
  const int root = g.root(), leaf = 2;
  int td_zero = 0, bu_zero = 0, bw_both = 0;
  const int hidden = ModularConfig{}.hidden;
  for (int d = 0; d < kSensitivityDraws; ++d) {
    Rng rng(derive_seed(301, d));
    const auto s = random_states(3, rng);
    td_zero += input_sensitivity(draw_net(Scheme::kTopDown, 1, derive_seed(302, d), hidden), g, s,
                                 root, leaf) == 0.0;
    bu_zero += input_sensitivity(draw_net(Scheme::kBottomUp, 1, derive_seed(303, d), hidden), g,
                                 s, leaf, root) == 0.0;
    const auto bw = draw_net(Scheme::kBothWay, 1, derive_seed(304, d), hidden);
    bw_both += input_sensitivity(bw, g, s, root, leaf) > kSensitivityFloor &&
               input_sensitivity(bw, g, s, leaf, root) > kSensitivityFloor;
  }
  return {td_zero == kSensitivityDraws && bu_zero == kSensitivityDraws &&
              bw_both >= kSensitivityNeeded,
          "top_down zero " + std::to_string(td_zero) + "/100, bottom_up zero " +
              std::to_string(bu_zero) + "/100, both_way both > 1e-8 in " +
              std::to_string(bw_both) + "/100"};
}

Outcome parameter_sharing() {
  const auto set = enumerate_variants(load_graph("walker.json"), default_feasibility, 0.0, 0);
  // The full walker comes last in mask order; every subset contains it.
  std::vector<MorphologyGraph> pool(set.variants.rbegin(), set.variants.rend());
  std::vector<std::size_t> counts;
  std::string detail;
  TrainConfig cfg;
  cfg.total_steps = 0;
  for (std::size_t n : {1u, 5u, 15u}) {
    if (pool.size() < n) return {false, "walker family has only " + std::to_string(pool.size())};
    JointTrainer<ModularActorCritic> t({pool.begin(), pool.begin() + n}, cfg);
    counts.push_back(ad::parameter_count(t.agent().actor_parameters()));
    detail += std::to_string(n) + " variants: " + std::to_string(counts.back()) + "  ";
  }
  return {counts[0] == counts[1] && counts[1] == counts[2], detail};
}

Outcome enumeration_counts() {
  Rng rng(501);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const auto g = random_tree(1 + static_cast<int>(rng.index(8)), rng);
    const auto n = enumerate_variants(g, always_feasible, 0.0, 0).variants.size();
    mismatches += static_cast<int>(n) != brute_force_count(g);
  }
  const auto hopper = load_graph("hopper.json");
  const auto h2 = enumerate_variants(hopper, min_limbs(2), 0.0, 0).variants.size();
  const auto hd = enumerate_variants(hopper, default_feasibility, 0.0, 0).variants.size();
  return {mismatches == 0 && h2 == 3 && hd == 3,
          std::to_string(mismatches) + " mismatches on 200 random trees <= 8 nodes; hopper gives " +
              std::to_string(h2) + " (>= 2 limbs), " + std::to_string(hd) + " (ground contact)"};
}

Outcome buffer_rule() {
  int bad = 0;
  std::string worst;
  for (int n : {1, 2, 5, 9, 10, 11, 12, 20, 33, 100, 3000, 10'000'000}) {
    const std::size_t expect = n <= 10 ? 1'000'000u : 10'000'000u / static_cast<std::size_t>(n);
    if (buffer_capacity(n) != expect) {
      ++bad;
      worst = "n=" + std::to_string(n) + " gives " + std::to_string(buffer_capacity(n));
    }
  }
  return {bad == 0, bad == 0 ? "1e6 for n <= 10, floor(1e7/n) above, 12 cases" : worst};
}

Outcome physics_oracles() {
  const auto g = chain(1, "body");
  EnvConfig cfg;
  cfg.dt = 0.01;
  cfg.frame_skip = 1;
  SimState s{{0.3, 1.0, 0.0}, {0.5, 0.0, 0.0}, 0};
  const auto r = step(s, std::vector<double>{}, g, cfg);
  const double vz = 0.0 - cfg.dt * cfg.gravity;
  const bool fall = r.state.qdot[1] == vz && r.state.q[1] == 1.0 + cfg.dt * vz &&
                    r.state.q[0] == 0.3 + cfg.dt * 0.5 && r.state.qdot[0] == 0.5;
  const auto pend = pendulum(0.4);
  const double coarse = pendulum_period(pend, 1e-3, 0.05, 3.5);
  const double fine = pendulum_period(pend, 1e-5, 0.05, 3.5);
  const double period_err = std::abs(coarse - fine) / fine;
  const double drift = chain_energy_drift(1e-3, 1000);
  return {fall && period_err < kPeriodTol && drift <= kEnergyTol,
          std::string("free fall ") + (fall ? "exact" : "MISMATCH") + ", period " + fmt(coarse, 6) +
              " vs " + fmt(fine, 6) + " (err " + fmt(period_err) + "), energy drift " + fmt(drift)};
}

// ---------------------------------------------------------------------------

struct HopperRuns {
  MorphologyGraph graph;
  double random_mean = 0.0;
  std::vector<double> final_mean;
  std::vector<fs::path> checkpoints;
};

MorphologyGraph two_limb_hopper() {
  const auto set = enumerate_variants(load_graph("hopper.json"), default_feasibility, 0.0, 0);
  for (const auto& v : set.variants)
    if (v.size() == 2) return v;
  throw Error("hopper family has no 2-limb variant");
}

Outcome desk_hopper(const fs::path& out, HopperRuns& runs) {
  runs.graph = two_limb_hopper();
  const std::vector<MorphologyGraph> gs{runs.graph};
  TrainConfig cfg;
  cfg.scheme = Scheme::kBothWay;
  cfg.total_steps = kHopperSteps;
  cfg.hidden = kTrainHidden;
  cfg.eval_interval = 20'000;
  cfg.eval_episodes = 3;
  runs.random_mean = random_policy_return(runs.graph, cfg.env, kRandomEpisodes, 801).first;
  int good = 0;
  std::string detail = "random " + fmt(runs.random_mean) + "; final";
  for (int seed = 0; seed < kHopperSeeds; ++seed) {
    const auto t0 = Clock::now();
    cfg.seed = static_cast<std::uint64_t>(seed);
    const fs::path dir = out / ("c8_seed" + std::to_string(seed));
    JointTrainer<ModularActorCritic> t(gs, cfg, dir);
    t.run();
    const double m = evaluate(t.agent(), std::span<const MorphologyGraph>(gs), kEvalEpisodes, 802,
                              cfg.env)[0]
                         .mean_return;
    runs.final_mean.push_back(m);
    runs.checkpoints.push_back(dir / "final.smp");
    good += m >= kHopperFactor * runs.random_mean;
    detail += " " + fmt(m);
    std::cout << "  hopper seed " << seed << ": final " << m << " (" << fmt(seconds_since(t0), 4)
              << " s)" << std::endl;
  }
  detail += "; " + std::to_string(good) + "/4 seeds >= 3x random";
  return {runs.random_mean > 0.0 && good >= kHopperSeedsNeeded, detail};
}

struct WalkerSplit {
  std::vector<MorphologyGraph> train;
  std::vector<MorphologyGraph> heldout;
};

// Four largest training variants; the first two held-out variants whose
// branching the trained policy covers.
WalkerSplit walker_split() {
  const auto set = enumerate_variants(load_graph("walker.json"), default_feasibility, 0.25, 0);
  WalkerSplit s;
  auto train = set.train();
  std::stable_sort(train.begin(), train.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  s.train.assign(train.begin(), train.begin() + 4);
  const int c_max = training_c_max(s.train);
  for (const auto& g : set.heldout())
    if (g.max_branching() <= c_max && s.heldout.size() < 2) s.heldout.push_back(g);
  return s;
}

struct WalkerResult {
  std::map<std::string, double> random, smp, mono;
};

EnvConfig no_termination(EnvConfig c) {
  c.termination_height = -1e9;
  c.termination_pitch = 1e9;
  return c;
}

Outcome desk_walker(const fs::path& out, const WalkerSplit& split, WalkerResult& res) {
  TrainConfig cfg;
  cfg.scheme = Scheme::kBothWay;
  cfg.total_steps = kWalkerSteps;
  cfg.hidden = kTrainHidden;
  cfg.eval_interval = 50'000;
  cfg.eval_episodes = 1;
  const auto t0 = Clock::now();
  JointTrainer<ModularActorCritic> t(split.train, cfg, out / "c9_smp");
  t.run();
  std::cout << "  walker smp trained (" << fmt(seconds_since(t0), 4) << " s)" << std::endl;
  int improved = 0;
  std::string detail = "train";
  const auto tr = evaluate(t.agent(), std::span<const MorphologyGraph>(split.train), kEvalEpisodes,
                           901, cfg.env);
  for (std::size_t k = 0; k < split.train.size(); ++k) {
    const auto& g = split.train[k];
    res.random[g.name()] = random_policy_return(g, cfg.env, kRandomEpisodes, 902).first;
    res.smp[g.name()] = tr[k].mean_return;
    improved += tr[k].mean_return > res.random[g.name()];
    detail += " " + g.name() + " " + fmt(tr[k].mean_return) + "/" + fmt(res.random[g.name()]);
  }
  bool structural_ok = split.heldout.size() == 2;
  int above = 0;
  detail += "; held-out";
  for (const auto& g : split.heldout) {
    res.random[g.name()] = random_policy_return(g, cfg.env, kRandomEpisodes, 902).first;
    try {
      const std::vector<MorphologyGraph> one{g};
      // Full-length rollout with termination switched off.
      const auto full = evaluate(t.agent(), std::span<const MorphologyGraph>(one), 1, 903,
                                 no_termination(cfg.env))[0];
      const bool full_ok = full.lengths[0] == cfg.env.episode_length && std::isfinite(full.mean_return);
      structural_ok = structural_ok && full_ok;
      const auto ev = evaluate(t.agent(), std::span<const MorphologyGraph>(one), kEvalEpisodes, 901,
                               cfg.env)[0];
      res.smp[g.name()] = ev.mean_return;
      above += ev.mean_return > res.random[g.name()];
      detail += " " + g.name() + " " + fmt(ev.mean_return) + "/" + fmt(res.random[g.name()]) +
                (full_ok ? " (1000 steps ok)" : " (full rollout FAILED)");
    } catch (const std::exception& e) {
      structural_ok = false;
      detail += " " + g.name() + " error: " + e.what();
    }
  }
  detail += "; improved " + std::to_string(improved) + "/4, held-out above random " +
            std::to_string(above) + "/2";
  return {improved >= kWalkerImprovedNeeded && structural_ok && above >= 1, detail};
}

Outcome monolithic_parity(const fs::path& out, const WalkerSplit& split, WalkerResult& res) {
  try {
    TrainConfig cfg;
    cfg.arch = "monolithic";
    cfg.total_steps = kWalkerSteps;
    cfg.hidden = kTrainHidden;
    cfg.eval_interval = 50'000;
    cfg.eval_episodes = 1;
    const auto t0 = Clock::now();
    JointTrainer<MonolithicActorCritic> t(split.train, cfg, out / "c10_monolithic");
    t.run();
    std::cout << "  walker monolithic trained (" << fmt(seconds_since(t0), 4) << " s)" << std::endl;
    const auto tr = evaluate(t.agent(), std::span<const MorphologyGraph>(split.train),
                             kEvalEpisodes, 901, cfg.env);
    for (std::size_t k = 0; k < split.train.size(); ++k)
      res.mono[split.train[k].name()] = tr[k].mean_return;
    std::ofstream os(out / "comparison.csv");
    os << "variant,split,random,smp,monolithic,smp_minus_monolithic\n" << std::setprecision(10);
    int smp_ahead = 0;
    for (const auto& g : split.train) {
      const auto n = g.name();
      os << n << ",train," << res.random[n] << ',' << res.smp[n] << ',' << res.mono[n] << ','
         << res.smp[n] - res.mono[n] << '\n';
      smp_ahead += res.smp[n] > res.mono[n];
    }
    // The baseline's input layout is fixed by its training registry.
    for (const auto& g : split.heldout) {
      const auto n = g.name();
      os << n << ",heldout," << res.random[n] << ',' << (res.smp.count(n) ? fmt(res.smp[n], 10) : "nan")
         << ",n/a,n/a\n";
    }
    os.close();
    return {fs::exists(out / "comparison.csv"),
            "report " + (out / "comparison.csv").string() + "; smp ahead on " +
                std::to_string(smp_ahead) + "/4 training variants"};
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SMP_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome determinism(const fs::path& out, const WalkerSplit& split) {
  const fs::path dir = out / "c11";
  fs::remove_all(dir);
  fs::create_directories(dir);
  VariantSet vs;
  vs.base = load_graph("walker.json");
  vs.variants = {split.train[2], split.train[3], split.heldout[0]};
  vs.train_split = {0, 1};
  vs.heldout_split = {2};
  write_json(dir / "variants.json", variant_set_to_json(vs));
  const std::string v = (dir / "variants.json").string();
  const std::string common =
      " --variants " + v + " --steps 3000 --warmup 500 --eval-interval 1000 --hidden 16 --seed 11";
  std::vector<std::string> diffs;
  int failures = 0;
  auto same = [&](const fs::path& a, const fs::path& b) {
    if (slurp(a) != slurp(b) || slurp(a).rfind("<missing", 0) == 0) diffs.push_back(a.string());
  };
  for (const std::string mode : {"", " --concurrent"}) {
    const std::string tag = mode.empty() ? "seq" : "con";
    for (int k : {1, 2}) {
      const fs::path r = dir / (tag + std::to_string(k));
      failures += run_cli("train" + common + mode + " --out " + r.string() + " --diagnostics " +
                              (r.string() + "_diag.csv"),
                          dir / "log.txt") != 0;
      failures += run_cli("eval --checkpoint " + (r / "final.smp").string() + " --variants " + v +
                              " --episodes 2 --out " + (r.string() + "_eval.csv"),
                          dir / "log.txt") != 0;
      failures += run_cli("eval --checkpoint " + (r / "final.smp").string() + " --variants " + v +
                              " --heldout-only --episodes 2 --out " + (r.string() + "_heldout.csv"),
                          dir / "log.txt") != 0;
      failures += run_cli("analyze --checkpoint " + (r / "final.smp").string() + " --variant " +
                              data_path("walker.json") + " --episodes 2 --out " +
                              (r.string() + "_an"),
                          dir / "log.txt") != 0;
    }
    const fs::path a = dir / (tag + "1"), b = dir / (tag + "2");
    for (const char* f : {"returns.csv", "episodes.csv"}) same(a / f, b / f);
    for (const char* f : {"_diag.csv", "_eval.csv", "_heldout.csv"})
      same(a.string() + f, b.string() + f);
    for (const char* f : {"messages.csv", "projection.csv", "correlation.csv"})
      same(fs::path(a.string() + "_an") / f, fs::path(b.string() + "_an") / f);
  }
  std::string detail = std::to_string(failures) + " command failures; ";
  if (diffs.empty()) {
    detail += "returns, episodes, diagnostics, eval, held-out eval and analysis CSVs identical "
              "(sequential and concurrent)";
  } else {
    detail += "differing:";
    for (const auto& d : diffs) detail += " " + d;
  }
  return {failures == 0 && diffs.empty(), detail};
}

// Picks up criterion 8's checkpoints from an earlier invocation.
void load_hopper_runs(const fs::path& out, HopperRuns& runs) {
  runs.graph = two_limb_hopper();
  const std::vector<MorphologyGraph> gs{runs.graph};
  for (int seed = 0; seed < kHopperSeeds; ++seed) {
    const fs::path ckpt = out / ("c8_seed" + std::to_string(seed)) / "final.smp";
    if (!fs::exists(ckpt)) continue;
    const auto p = load_policy(ckpt);
    runs.final_mean.push_back(
        evaluate(*p.modular, std::span<const MorphologyGraph>(gs), kEvalEpisodes, 802, p.env)[0]
            .mean_return);
    runs.checkpoints.push_back(ckpt);
  }
}

Outcome analysis_period(const fs::path& out, HopperRuns& runs) {
  if (runs.final_mean.empty()) load_hopper_runs(out, runs);
  if (runs.final_mean.empty()) return {false, "no trained hopper"};
  const auto best = static_cast<std::size_t>(
      std::max_element(runs.final_mean.begin(), runs.final_mean.end()) - runs.final_mean.begin());
  const auto p = load_policy(runs.checkpoints[best]);
  const auto log = record_messages(p.modular->actor(), runs.graph, p.env, kAnalysisEpisodes, 1201);
  {
    std::ofstream os(out / "c12_messages.csv");
    log.write_csv(os);
  }
  std::ofstream ps(out / "c12_periods.csv");
  ps << "episode,steps,hopping_period,message_period,match\n";
  int matched = 0;
  std::string detail = "seed " + std::to_string(best) + ":";
  for (int e : log.episodes()) {
    std::vector<double> height;
    for (const auto& r : log.rows)
      if (r.episode == e) height.push_back(r.states[runs.graph.root()].position[1]);
    std::optional<int> ph, pm;
    try {
      ph = dominant_period(height);
      pm = dominant_period(root_message_projection(log, runs.graph, e));
    } catch (const DegenerateData&) {
    }
    const bool ok = ph && pm && std::abs(*pm - *ph) <= kHoppingPeriodTol * *ph;
    matched += ok;
    auto show = [](const std::optional<int>& x) { return x ? std::to_string(*x) : std::string("none"); };
    ps << e << ',' << height.size() << ',' << show(ph) << ',' << show(pm) << ',' << ok << '\n';
    detail += " ep" + std::to_string(e) + " len " + std::to_string(height.size()) + " hop " +
              show(ph) + " msg " + show(pm) + (ok ? " ok;" : " no;");
  }
  detail += " matched " + std::to_string(matched) + "/" + std::to_string(kAnalysisEpisodes);
  return {matched >= kAnalysisNeeded, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string out = "acceptance_out";
  std::vector<int> only, expect_fail;
  app.add_option("--out", out, "Directory for runs and reports");
  app.add_option("--only", only, "Run just these criteria");
  app.add_option("--expect-fail", expect_fail,
                 "Criteria whose failure is documented; reported but not counted in the exit code");
  CLI11_PARSE(app, argc, argv);
  const fs::path dir(out);
  fs::create_directories(dir);
  const std::set<int> want(only.begin(), only.end());
  const std::set<int> expected(expect_fail.begin(), expect_fail.end());
  auto enabled = [&](int c) { return want.empty() || want.count(c) > 0; };

  HopperRuns hopper;
  WalkerResult walker;
  const WalkerSplit split = walker_split();
  nlohmann::json report = nlohmann::json::array();
  int failed = 0;
  auto record = [&](int c, const std::string& name, const std::function<Outcome()>& f) {
    if (!enabled(c)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool known = !o.pass && expected.count(c) > 0;
    failed += !o.pass && !known;
    std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << c << ": " << name << " -- "
              << o.detail << (known ? " (expected failure, see README)" : "") << std::endl;
    report.push_back({{"criterion", c},
                      {"name", name},
                      {"pass", o.pass},
                      {"expected_failure", known},
                      {"detail", o.detail},
                      {"seconds", seconds_since(t0)}});
    write_json(dir / "acceptance.json", report);
  };

  record(1, "gradient fidelity", gradient_fidelity);
  record(2, "reference interpreter equivalence", reference_equivalence);
  record(3, "information flow separation", information_flow);
  record(4, "parameter sharing", parameter_sharing);
  record(5, "variant enumeration", enumeration_counts);
  record(6, "buffer rule", buffer_rule);
  record(7, "physics oracles", physics_oracles);
  record(8, "desk-scale hopper learning", [&] { return desk_hopper(dir, hopper); });
  record(9, "joint walker training and held-out rollout",
         [&] { return desk_walker(dir, split, walker); });
  record(10, "monolithic baseline report", [&] { return monolithic_parity(dir, split, walker); });
  record(11, "determinism", [&] { return determinism(dir, split); });
  record(12, "root message period", [&] { return analysis_period(dir, hopper); });
  return failed;
}
