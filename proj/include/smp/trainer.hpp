#pragma once

// Joint multi-morphology training: every round collects one episode per
// environment, then trains on each environment's buffer in turn with one
// TD3 update per collected step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "smp/baseline.hpp"
#include "smp/morphology.hpp"
#include "smp/policy.hpp"
#include "smp/rl.hpp"
#include "smp/rng.hpp"
#include "smp/sim.hpp"
#include "smp/variants.hpp"

namespace smp {

struct TrainConfig {
  std::vector<std::string> variant_sets;  // labels of the sets trained on
  Scheme scheme = Scheme::kBothWay;
  std::string arch = "smp";  // or "monolithic"
  long total_steps = 1'000'000;
  long warmup_steps = 10'000;  // per environment
  double lr = 4e-4;
  double tau = 0.046;
  double exploration_noise = 0.13;
  double gamma = 0.99;
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  int policy_delay = 2;
  int batch_size = 100;
  double updates_per_step = 1.0;
  std::size_t per_env_buffer = 1'000'000;
  std::size_t global_buffer_cap = 10'000'000;
  long eval_interval = 10'000;
  int eval_episodes = 1;
  int hidden = 256;
  int layers = 4;
  std::uint64_t seed = 0;
  bool concurrent = false;
  EnvConfig env;

  void validate() const {
    if (total_steps < 0) throw ValidationError("total_steps must be >= 0");
    if (warmup_steps < 0) throw ValidationError("warmup_steps must be >= 0");
    if (total_steps > 0 && warmup_steps > total_steps)
      throw ValidationError("warmup_steps must not exceed total_steps");
    if (eval_interval <= 0) throw ValidationError("eval_interval must be > 0");
    if (batch_size <= 0) throw ValidationError("batch_size must be > 0");
    if (arch != "smp" && arch != "monolithic")
      throw ValidationError("arch must be 'smp' or 'monolithic'");
    env.validate();
  }

  Td3Config td3() const {
    Td3Config c;
    c.gamma = gamma;
    c.tau = tau;
    c.lr = lr;
    c.policy_noise = policy_noise;
    c.noise_clip = noise_clip;
    c.policy_delay = policy_delay;
    c.batch_size = static_cast<std::size_t>(batch_size);
    return c;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"variant_sets", c.variant_sets},
       {"scheme", to_string(c.scheme)},
       {"arch", c.arch},
       {"total_steps", c.total_steps},
       {"warmup_steps", c.warmup_steps},
       {"lr", c.lr},
       {"tau", c.tau},
       {"exploration_noise", c.exploration_noise},
       {"gamma", c.gamma},
       {"policy_noise", c.policy_noise},
       {"noise_clip", c.noise_clip},
       {"policy_delay", c.policy_delay},
       {"batch_size", c.batch_size},
       {"updates_per_step", c.updates_per_step},
       {"per_env_buffer", c.per_env_buffer},
       {"global_buffer_cap", c.global_buffer_cap},
       {"eval_interval", c.eval_interval},
       {"eval_episodes", c.eval_episodes},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"seed", c.seed},
       {"concurrent", c.concurrent},
       {"env", c.env}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.variant_sets = j.value("variant_sets", d.variant_sets);
  c.scheme = parse_scheme(j.value("scheme", to_string(d.scheme)));
  c.arch = j.value("arch", d.arch);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.lr = j.value("lr", d.lr);
  c.tau = j.value("tau", d.tau);
  c.exploration_noise = j.value("exploration_noise", d.exploration_noise);
  c.gamma = j.value("gamma", d.gamma);
  c.policy_noise = j.value("policy_noise", d.policy_noise);
  c.noise_clip = j.value("noise_clip", d.noise_clip);
  c.policy_delay = j.value("policy_delay", d.policy_delay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.updates_per_step = j.value("updates_per_step", d.updates_per_step);
  c.per_env_buffer = j.value("per_env_buffer", d.per_env_buffer);
  c.global_buffer_cap = j.value("global_buffer_cap", d.global_buffer_cap);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
  c.hidden = j.value("hidden", d.hidden);
  c.layers = j.value("layers", d.layers);
  c.seed = j.value("seed", d.seed);
  c.concurrent = j.value("concurrent", d.concurrent);
  c.env = j.value("env", d.env);
}

// Per-environment replay capacity: the global cap is split evenly once there
// are more than ten environments.
inline std::size_t buffer_capacity(int n_envs, const TrainConfig& cfg = {}) {
  if (n_envs < 1) throw ValidationError("need at least one environment");
  if (n_envs <= 10) return cfg.per_env_buffer;
  return cfg.global_buffer_cap / static_cast<std::size_t>(n_envs);
}

struct EpisodeLog {
  long step = 0;  // total environment steps when the episode ended
  int env = 0;
  double episode_return = 0.0;
  int length = 0;
  friend bool operator==(const EpisodeLog&, const EpisodeLog&) = default;
};

struct EvalPoint {
  long step = 0;
  std::vector<double> mean_return;  // per environment
  std::vector<double> std_return;
  friend bool operator==(const EvalPoint&, const EvalPoint&) = default;
};

struct RunRecord {
  nlohmann::json config;
  std::vector<std::string> env_names;
  std::vector<EvalPoint> evals;
  std::vector<EpisodeLog> episodes;
  std::vector<std::string> checkpoints;
  long updates = 0;
  int c_max = 0;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;

  void write_returns_csv(std::ostream& os) const {
    os << "step,env,mean_return,std_return\n";
    os << std::setprecision(10);
    for (const auto& e : evals)
      for (std::size_t k = 0; k < env_names.size(); ++k)
        os << e.step << ',' << env_names[k] << ',' << e.mean_return[k] << ',' << e.std_return[k]
           << '\n';
  }

  void write_episodes_csv(std::ostream& os) const {
    os << "step,env,return,length\n";
    os << std::setprecision(10);
    for (const auto& e : episodes)
      os << e.step << ',' << env_names[e.env] << ',' << e.episode_return << ',' << e.length
         << '\n';
  }

  nlohmann::json manifest() const {
    return {{"config", config},
            {"envs", env_names},
            {"checkpoints", checkpoints},
            {"updates", updates},
            {"c_max", c_max},
            {"eval_points", evals.size()},
            {"episodes", episodes.size()},
            {"returns_csv", "returns.csv"},
            {"episodes_csv", "episodes.csv"}};
  }
};

struct EvalResult {
  std::string name;
  double mean_return = 0.0;
  double std_return = 0.0;
  std::vector<double> returns;
  std::vector<int> lengths;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

template <class Arch>
void check_structure(const Arch& arch, const MorphologyGraph& g) {
  if constexpr (requires { arch.actor().config().c_max; }) {
    if (arch.actor().scheme() != Scheme::kNone && g.max_branching() > arch.actor().config().c_max)
      throw BranchingExceedsCmax("variant '" + g.name() + "' branches " +
                                 std::to_string(g.max_branching()) + " ways, policy c_max is " +
                                 std::to_string(arch.actor().config().c_max));
  } else {
    (void)arch.registry().index_of(g.name());
  }
}

inline std::uint64_t eval_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, 0x5e11, static_cast<std::uint64_t>(episode));
}

}  // namespace detail

// One deterministic episode; returns (return, length).
template <class Arch>
std::pair<double, int> run_episode(const Arch& arch, const MorphologyGraph& g,
                                   const EnvConfig& env_cfg, std::uint64_t seed, int env_id = 0) {
  Env env(g, env_cfg);
  auto obs = env.reset(seed);
  Rng unused(0);
  const EnvContext ctx{&env.graph(), env_id};
  double ret = 0.0;
  int len = 0;
  for (;;) {
    const auto a = select_action(arch, ctx, obs, 0.0, unused);
    const auto r = env.step(a);
    if (env.diverged()) break;
    ret += r.reward;
    ++len;
    obs = r.observation;
    if (r.done) break;
  }
  return {ret, len};
}

// Deterministic policy on fixed evaluation seeds.
template <class Arch>
std::vector<EvalResult> evaluate(const Arch& arch, std::span<const MorphologyGraph> variants,
                                 int episodes, std::uint64_t seed, const EnvConfig& env_cfg = {}) {
  std::vector<EvalResult> out;
  if (episodes <= 0) return out;
  for (const auto& g : variants) detail::check_structure(arch, g);
  for (const auto& g : variants) {
    EvalResult r;
    r.name = g.name();
    int env_id = 0;
    if constexpr (requires { arch.registry(); }) env_id = arch.registry().index_of(g.name());
    for (int e = 0; e < episodes; ++e) {
      const auto [ret, len] = run_episode(arch, g, env_cfg, detail::eval_seed(seed, e), env_id);
      r.returns.push_back(ret);
      r.lengths.push_back(len);
    }
    std::tie(r.mean_return, r.std_return) = detail::mean_std(r.returns);
    out.push_back(std::move(r));
  }
  return out;
}

// Mean and std of the return of uniform random actions.
inline std::pair<double, double> random_policy_return(const MorphologyGraph& g,
                                                      const EnvConfig& env_cfg, int episodes,
                                                      std::uint64_t seed) {
  std::vector<double> rets;
  Rng rng(derive_seed(seed, 0x7a4d));
  for (int e = 0; e < episodes; ++e) {
    Env env(g, env_cfg);
    env.reset(detail::eval_seed(seed, e));
    double ret = 0.0;
    for (;;) {
      const auto r = env.step(random_action(g, rng));
      if (env.diverged()) break;
      ret += r.reward;
      if (r.done) break;
    }
    rets.push_back(ret);
  }
  return detail::mean_std(rets);
}

inline int training_c_max(std::span<const MorphologyGraph> graphs) {
  return std::max(1, max_children(graphs));
}

template <class Arch>
Arch make_arch(const TrainConfig& cfg, std::span<const MorphologyGraph> graphs, Rng& rng);

template <>
inline ModularActorCritic make_arch<ModularActorCritic>(const TrainConfig& cfg,
                                                        std::span<const MorphologyGraph> graphs,
                                                        Rng& rng) {
  ModularConfig mc;
  mc.scheme = cfg.scheme;
  mc.c_max = training_c_max(graphs);
  mc.hidden = cfg.hidden;
  mc.layers = cfg.layers;
  return ModularActorCritic(mc, rng);
}

template <>
inline MonolithicActorCritic make_arch<MonolithicActorCritic>(
    const TrainConfig& cfg, std::span<const MorphologyGraph> graphs, Rng& rng) {
  return MonolithicActorCritic(EnvRegistry(graphs), {cfg.hidden, cfg.layers}, rng);
}

inline std::filesystem::path sidecar_path(std::filesystem::path checkpoint) {
  return checkpoint.replace_extension(".json");
}

// Actor weights plus the JSON sidecar describing how to rebuild the actor.
template <class Arch>
void save_checkpoint(const Arch& arch, const std::filesystem::path& file, const EnvConfig& env) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + file.string());
  ad::write_checkpoint(os, arch.actor_tensors());
  nlohmann::json side = arch.sidecar();
  side["env"] = env;
  std::ofstream js(sidecar_path(file));
  js << side.dump(2) << '\n';
}

struct LoadedPolicy {
  nlohmann::json sidecar;
  EnvConfig env;
  std::optional<ModularActorCritic> modular;
  std::optional<MonolithicActorCritic> monolithic;
};

inline LoadedPolicy load_policy(const std::filesystem::path& file) {
  LoadedPolicy p;
  std::ifstream js(sidecar_path(file));
  if (!js) throw CheckpointError("missing sidecar " + sidecar_path(file).string());
  try {
    p.sidecar = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad sidecar: ") + e.what());
  }
  p.env = p.sidecar.value("env", EnvConfig{});
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + file.string());
  const auto tensors = ad::read_checkpoint(is);
  Rng rng(0);
  if (p.sidecar.value("arch", "smp") == "monolithic") {
    MonolithicConfig mc{p.sidecar.at("hidden_width").get<int>(), p.sidecar.value("layers", 4)};
    p.monolithic.emplace(EnvRegistry::from_json(p.sidecar.at("registry")), mc, rng);
    p.monolithic->load_actor(tensors);
  } else {
    p.modular.emplace(modular_config_from_sidecar(p.sidecar), rng);
    p.modular->load_actor(tensors);
  }
  return p;
}

template <class Arch>
class JointTrainer {
 public:
  JointTrainer(std::vector<MorphologyGraph> graphs, TrainConfig cfg,
               std::optional<std::filesystem::path> out_dir = std::nullopt)
      : graphs_(std::move(graphs)), cfg_(std::move(cfg)), out_(std::move(out_dir)) {
    cfg_.validate();
    if (graphs_.empty()) throw EmptyVariantSet("no training environments");
    for (std::size_t i = 0; i < graphs_.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (graphs_[i].name() == graphs_[j].name())
          throw ValidationError("duplicate environment name '" + graphs_[i].name() + "'");
    Rng init(derive_seed(cfg_.seed, 0x1417));
    learner_ = std::make_unique<Td3<Arch>>(make_arch<Arch>(cfg_, graphs_, init), cfg_.td3());
    const std::size_t cap = buffer_capacity(static_cast<int>(graphs_.size()), cfg_);
    for (std::size_t e = 0; e < graphs_.size(); ++e) {
      envs_.emplace_back(graphs_[e], cfg_.env);
      buffers_.emplace_back(cap, graphs_[e].size(), static_cast<int>(e));
      collect_rng_.emplace_back(derive_seed(cfg_.seed, 0xC011, e));
    }
    env_steps_.assign(graphs_.size(), 0);
    episodes_.assign(graphs_.size(), 0);
    update_rng_ = Rng(derive_seed(cfg_.seed, 0x7D3));
    record_.config = cfg_;
    for (const auto& g : graphs_) record_.env_names.push_back(g.name());
    if constexpr (requires { learner_->online().actor().config().c_max; })
      record_.c_max = learner_->online().actor().config().c_max;
    if (out_) std::filesystem::create_directories(*out_);
  }

  const Td3<Arch>& learner() const { return *learner_; }
  const Arch& agent() const { return learner_->online(); }
  const RunRecord& record() const { return record_; }
  const std::vector<MorphologyGraph>& graphs() const { return graphs_; }
  const ReplayBuffer& buffer(int e) const { return buffers_.at(e); }
  long total_steps() const { return total_; }

  // Optional TD3 diagnostics stream.
  void set_diagnostics(std::ostream* os) {
    diag_ = os ? std::make_unique<DiagnosticsWriter>(*os) : nullptr;
  }

  const RunRecord& run() {
    const auto* shared = learner_->online().actor_parameters().front().node().get();
    if (cfg_.total_steps == 0) {
      checkpoint(0);
      finish();
      return record_;
    }
    long next_eval = cfg_.eval_interval;
    while (total_ < cfg_.total_steps) {
      std::vector<long> collected(graphs_.size(), 0);
      collect_round(collected);
      for (std::size_t e = 0; e < graphs_.size(); ++e) {
        if (env_steps_[e] < cfg_.warmup_steps) continue;
        if (buffers_[e].size() < static_cast<std::size_t>(cfg_.batch_size)) continue;
        const long n = std::lround(cfg_.updates_per_step * static_cast<double>(collected[e]));
        const EnvContext ctx{&graphs_[e], static_cast<int>(e)};
        for (long k = 0; k < n; ++k) {
          const auto d = learner_->update(buffers_[e], ctx, update_rng_);
          if (diag_) diag_->write(d);
        }
      }
      if (learner_->online().actor_parameters().front().node().get() != shared)
        throw Error("actor parameters were replaced during training");
      while (total_ >= next_eval) {
        eval_point(next_eval);
        next_eval += cfg_.eval_interval;
      }
    }
    if (record_.evals.empty() || record_.evals.back().step != total_) eval_point(total_);
    finish();
    return record_;
  }

 private:
  struct Step {
    Transition t;
    bool stored = true;
  };

  // One episode (or the remainder of the budget) for environment e.
  std::vector<Step> collect_episode(std::size_t e, long budget, const Arch& snapshot) {
    std::vector<Step> steps;
    Env& env = envs_[e];
    Rng& rng = collect_rng_[e];
    auto obs = env.reset(derive_seed(cfg_.seed, 0xE915 + e, static_cast<std::uint64_t>(episodes_[e])));
    const EnvContext ctx{&graphs_[e], static_cast<int>(e)};
    long local = env_steps_[e];
    while (static_cast<long>(steps.size()) < budget) {
      const auto a = local < cfg_.warmup_steps
                         ? random_action(graphs_[e], rng)
                         : select_action(snapshot, ctx, obs, cfg_.exploration_noise, rng);
      const auto r = env.step(a);
      Step s;
      s.t = {obs, a, r.reward, r.observation, r.terminal, static_cast<int>(e)};
      s.stored = !env.diverged();
      steps.push_back(std::move(s));
      ++local;
      obs = r.observation;
      if (r.done) break;
    }
    return steps;
  }

  void collect_round(std::vector<long>& collected) {
    const std::size_t n = graphs_.size();
    std::vector<std::vector<Step>> eps(n);
    std::vector<long> budgets(n);
    const Arch& snapshot = learner_->online();
    if (cfg_.concurrent) {
      // Budget is split up front so both modes stop at the same step count.
      long left = cfg_.total_steps - total_;
      for (std::size_t e = 0; e < n; ++e) budgets[e] = left;
      // Each worker acts with its own copy of the parameters.
      std::vector<Arch> copies;
      for (std::size_t e = 0; e < n; ++e) copies.push_back(snapshot.clone());
      std::vector<std::thread> pool;
      for (std::size_t e = 0; e < n; ++e)
        pool.emplace_back([&, e] { eps[e] = collect_episode(e, budgets[e], copies[e]); });
      for (auto& t : pool) t.join();
      for (std::size_t e = 0; e < n; ++e) {
        const long take = std::min<long>(static_cast<long>(eps[e].size()), left);
        eps[e].resize(take);
        left -= take;
      }
    } else {
      long left = cfg_.total_steps - total_;
      for (std::size_t e = 0; e < n; ++e) {
        eps[e] = left > 0 ? collect_episode(e, left, snapshot) : std::vector<Step>{};
        left -= static_cast<long>(eps[e].size());
      }
    }
    for (std::size_t e = 0; e < n; ++e) {
      if (eps[e].empty()) continue;
      double ret = 0.0;
      for (const auto& s : eps[e]) {
        if (s.stored) buffers_[e].add(s.t);
        ret += s.stored ? s.t.reward : 0.0;
      }
      collected[e] = static_cast<long>(eps[e].size());
      env_steps_[e] += collected[e];
      total_ += collected[e];
      ++episodes_[e];
      record_.episodes.push_back({total_, static_cast<int>(e), ret, static_cast<int>(eps[e].size())});
    }
  }

  void eval_point(long step) {
    const auto res = evaluate(learner_->online(), std::span<const MorphologyGraph>(graphs_),
                              cfg_.eval_episodes, derive_seed(cfg_.seed, 0xE7A1), cfg_.env);
    EvalPoint p;
    p.step = step;
    for (const auto& r : res) {
      p.mean_return.push_back(r.mean_return);
      p.std_return.push_back(r.std_return);
    }
    record_.evals.push_back(std::move(p));
    checkpoint(step);
    if (out_) write_csvs();
  }

  void write_csvs() const {
    std::ofstream r(*out_ / "returns.csv");
    record_.write_returns_csv(r);
    std::ofstream ep(*out_ / "episodes.csv");
    record_.write_episodes_csv(ep);
  }

  void checkpoint(long step) {
    std::ostringstream name;
    name << "ckpt_" << std::setw(9) << std::setfill('0') << step << ".smp";
    record_.checkpoints.push_back(name.str());
    if (out_) save_checkpoint(learner_->online(), *out_ / name.str(), cfg_.env);
  }

  void finish() {
    record_.updates = learner_->updates();
    if (!out_) return;
    save_checkpoint(learner_->online(), *out_ / "final.smp", cfg_.env);
    write_csvs();
    std::ofstream m(*out_ / "manifest.json");
    m << record_.manifest().dump(2) << '\n';
  }

  std::vector<MorphologyGraph> graphs_;
  TrainConfig cfg_;
  std::optional<std::filesystem::path> out_;
  std::unique_ptr<Td3<Arch>> learner_;
  std::vector<Env> envs_;
  std::vector<ReplayBuffer> buffers_;
  std::vector<Rng> collect_rng_;
  std::vector<long> env_steps_;
  std::vector<long> episodes_;
  Rng update_rng_;
  long total_ = 0;
  RunRecord record_;
  std::unique_ptr<DiagnosticsWriter> diag_;
};

// Runs the configured architecture on graphs; writes outputs when out_dir is set.
inline RunRecord train_joint(std::vector<MorphologyGraph> graphs, const TrainConfig& cfg,
                             std::optional<std::filesystem::path> out_dir = std::nullopt) {
  if (cfg.arch == "monolithic") {
    JointTrainer<MonolithicActorCritic> t(std::move(graphs), cfg, out_dir);
    return t.run();
  }
  JointTrainer<ModularActorCritic> t(std::move(graphs), cfg, out_dir);
  return t.run();
}

inline RunRecord train_joint(std::span<const VariantSet> sets, const TrainConfig& cfg,
                             std::optional<std::filesystem::path> out_dir = std::nullopt) {
  std::vector<MorphologyGraph> graphs;
  for (const auto& s : sets)
    for (auto& g : s.train()) graphs.push_back(std::move(g));
  return train_joint(std::move(graphs), cfg, std::move(out_dir));
}

struct RerootSummary {
  RunRecord torso_root;
  RunRecord limb_root;
  double torso_mean = 0.0, torso_std = 0.0;
  double limb_mean = 0.0, limb_std = 0.0;
};

// Mean and std of the last tenth (at least one) of the training episode returns.
inline std::pair<double, double> late_training_return(const RunRecord& r) {
  if (r.episodes.empty()) return {0.0, 0.0};
  const std::size_t n = std::max<std::size_t>(1, r.episodes.size() / 10);
  std::vector<double> v;
  for (std::size_t i = r.episodes.size() - n; i < r.episodes.size(); ++i)
    v.push_back(r.episodes[i].episode_return);
  return detail::mean_std(v);
}

// Two runs differing only in the message-tree root.
inline RerootSummary reroot_experiment(const MorphologyGraph& base, const std::string& new_root,
                                       const TrainConfig& cfg,
                                       const std::optional<std::filesystem::path>& out_dir = {}) {
  const MorphologyGraph rerooted = reroot(base, new_root);
  RerootSummary s;
  s.torso_root = train_joint(std::vector<MorphologyGraph>{base}, cfg,
                             out_dir ? std::optional(*out_dir / "root_base") : std::nullopt);
  s.limb_root = train_joint(std::vector<MorphologyGraph>{rerooted}, cfg,
                            out_dir ? std::optional(*out_dir / "root_limb") : std::nullopt);
  std::tie(s.torso_mean, s.torso_std) = late_training_return(s.torso_root);
  std::tie(s.limb_mean, s.limb_std) = late_training_return(s.limb_root);
  return s;
}

}  // namespace smp
