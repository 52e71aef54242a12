#pragma once

// Monolithic multi-task baseline: one fully connected actor and twin critics
// over the whole agent, with states and actions zero-padded to the largest
// registered morphology plus a task descriptor (limb count, env one-hot).

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smp/autodiff.hpp"
#include "smp/errors.hpp"
#include "smp/morphology.hpp"
#include "smp/rl.hpp"
#include "smp/sim.hpp"

namespace smp {

class EnvRegistry {
 public:
  EnvRegistry() = default;
  explicit EnvRegistry(std::span<const MorphologyGraph> graphs) {
    for (const auto& g : graphs) add(g.name(), g.size());
  }

  void add(const std::string& name, int limbs) {
    if (std::find(names_.begin(), names_.end(), name) != names_.end())
      throw ValidationError("environment '" + name + "' registered twice");
    names_.push_back(name);
    max_limbs_ = std::max(max_limbs_, limbs);
  }

  int index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw UnregisteredEnv("environment '" + name + "' is not registered");
    return static_cast<int>(it - names_.begin());
  }

  int size() const { return static_cast<int>(names_.size()); }
  int max_limbs() const { return max_limbs_; }
  const std::vector<std::string>& names() const { return names_; }
  // states + limb_count + one-hot
  int observation_dim() const { return max_limbs_ * LimbState::kDim + 1 + size(); }

  nlohmann::json to_json() const { return {{"names", names_}, {"max_limbs", max_limbs_}}; }
  static EnvRegistry from_json(const nlohmann::json& j) {
    EnvRegistry r;
    for (const auto& n : j.at("names")) r.names_.push_back(n.get<std::string>());
    r.max_limbs_ = j.at("max_limbs").get<int>();
    return r;
  }

 private:
  std::vector<std::string> names_;
  int max_limbs_ = 0;
};

struct PaddedObservation {
  std::vector<double> states;  // max_limbs * D_s, topological limb order
  double limb_count = 0.0;
  std::vector<double> env_onehot;

  std::vector<double> flat() const {
    std::vector<double> v = states;
    v.push_back(limb_count);
    v.insert(v.end(), env_onehot.begin(), env_onehot.end());
    return v;
  }
};

inline PaddedObservation pad_observation(std::span<const LimbState> states,
                                         const MorphologyGraph& g, const EnvRegistry& reg) {
  const int env = reg.index_of(g.name());
  if (static_cast<int>(states.size()) != g.size())
    throw DimensionMismatch("expected " + std::to_string(g.size()) + " limb states");
  if (g.size() > reg.max_limbs())
    throw DimensionMismatch("agent exceeds the registry's maximum limb count");
  PaddedObservation o;
  o.states.assign(static_cast<std::size_t>(reg.max_limbs()) * LimbState::kDim, 0.0);
  int p = 0;
  for (int i : topological_order(g))
    states[i].write(std::span<double>(&o.states[p++ * LimbState::kDim], LimbState::kDim));
  o.limb_count = g.size();
  o.env_onehot.assign(reg.size(), 0.0);
  o.env_onehot[env] = 1.0;
  return o;
}

struct MonolithicConfig {
  int hidden = 256;
  int layers = 4;
};

class MonolithicActorCritic {
 public:
  MonolithicActorCritic() = default;
  MonolithicActorCritic(EnvRegistry reg, const MonolithicConfig& cfg, Rng& rng,
                        double actor_final_scale = 0.01)
      : reg_(std::move(reg)), cfg_(cfg) {
    const int obs = reg_.observation_dim();
    const int act = reg_.max_limbs();
    actor_ = ad::Mlp(widths(obs, act), rng, actor_final_scale);
    critic1_ = ad::Mlp(widths(obs + act, 1), rng);
    critic2_ = ad::Mlp(widths(obs + act, 1), rng);
  }

  const EnvRegistry& registry() const { return reg_; }
  const MonolithicConfig& config() const { return cfg_; }

  ad::Matrix observations(const EnvContext& ctx, const StateBatch& states) const {
    const auto& g = *ctx.graph;
    const int env = reg_.index_of(g.name());
    if (static_cast<int>(states.size()) != g.size())
      throw DimensionMismatch("expected " + std::to_string(g.size()) + " limb state blocks");
    const auto rows = states.empty() ? 0 : states[0].rows();
    ad::Matrix o = ad::Matrix::Zero(rows, reg_.observation_dim());
    int p = 0;
    for (int i : topological_order(g)) o.middleCols(p++ * LimbState::kDim, LimbState::kDim) = states[i];
    const int tail = reg_.max_limbs() * LimbState::kDim;
    o.col(tail).setConstant(g.size());
    o.col(tail + 1 + env).setConstant(1.0);
    return o;
  }

  // Padded action vector from a padded observation.
  ad::Tensor padded_actions(ad::Tape& tape, const ad::Tensor& obs) const {
    if (obs.cols() != reg_.observation_dim())
      throw DimensionMismatch("observation has " + std::to_string(obs.cols()) +
                              " entries, network expects " +
                              std::to_string(reg_.observation_dim()));
    return tape.tanh(actor_.forward(tape, obs));
  }

  ad::Tensor act(ad::Tape& tape, const EnvContext& ctx, const StateBatch& states) const {
    const auto& g = *ctx.graph;
    const ad::Tensor padded = padded_actions(tape, ad::Tensor(observations(ctx, states)));
    // Topological slot p drives limb order[p]; slots past g.size() are dropped.
    const auto order = topological_order(g);
    std::vector<int> pos(g.size());
    for (int p = 0; p < g.size(); ++p) pos[order[p]] = p;
    std::vector<ad::Tensor> cols;
    for (int i = 0; i < g.size(); ++i) cols.push_back(tape.slice(padded, 1, pos[i], 1));
    const ad::Tensor a = cols.size() == 1 ? cols[0] : tape.concat(cols, 1);
    return tape.mul(a, ad::Tensor(actuation_mask(g)));
  }

  ad::Tensor q(ad::Tape& tape, int k, const EnvContext& ctx, const StateBatch& states,
               const ad::Tensor& actions) const {
    const auto& g = *ctx.graph;
    std::vector<ad::Tensor> parts{ad::Tensor(observations(ctx, states))};
    for (int i : topological_order(g)) parts.push_back(tape.slice(actions, 1, i, 1));
    if (reg_.max_limbs() > g.size())
      parts.push_back(ad::Tensor::zeros(actions.rows(), reg_.max_limbs() - g.size()));
    const ad::Tensor in = tape.concat(parts, 1);
    return (k == 0 ? critic1_ : critic2_).forward(tape, in);
  }

  std::vector<ad::Tensor> actor_parameters() const { return actor_.parameters(); }
  std::vector<ad::Tensor> critic_parameters() const {
    auto p = critic1_.parameters();
    for (auto& t : critic2_.parameters()) p.push_back(t);
    return p;
  }

  MonolithicActorCritic clone() const {
    MonolithicActorCritic c;
    c.reg_ = reg_;
    c.cfg_ = cfg_;
    c.actor_ = actor_.clone();
    c.critic1_ = critic1_.clone();
    c.critic2_ = critic2_.clone();
    return c;
  }

  ad::NamedTensors actor_tensors() const {
    ad::NamedTensors out;
    for (std::size_t l = 0; l < actor_.layers(); ++l) {
      out.emplace_back("actor.mlp.w" + std::to_string(l), actor_.weight(l).value());
      out.emplace_back("actor.mlp.b" + std::to_string(l), actor_.bias(l).value());
    }
    return out;
  }

  void load_actor(const ad::NamedTensors& tensors) {
    for (std::size_t l = 0; l < actor_.layers(); ++l)
      for (auto [t, kind] : {std::pair{actor_.weight(l), ".w"}, std::pair{actor_.bias(l), ".b"}}) {
        const std::string key = std::string("actor.mlp") + kind + std::to_string(l);
        auto it = std::find_if(tensors.begin(), tensors.end(),
                               [&](const auto& p) { return p.first == key; });
        if (it == tensors.end()) throw CheckpointError("missing tensor '" + key + "'");
        if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
          throw CheckpointError("shape mismatch for '" + key + "'");
        t.mutable_value() = it->second;
      }
  }

  nlohmann::json sidecar() const {
    return {{"arch", "monolithic"},
            {"D_s", LimbState::kDim},
            {"hidden_width", cfg_.hidden},
            {"layers", cfg_.layers},
            {"registry", reg_.to_json()}};
  }

 private:
  std::vector<int> widths(int in, int out) const {
    std::vector<int> w{in};
    for (int l = 0; l + 1 < cfg_.layers; ++l) w.push_back(cfg_.hidden);
    w.push_back(out);
    return w;
  }

  EnvRegistry reg_;
  MonolithicConfig cfg_;
  ad::Mlp actor_;
  ad::Mlp critic1_;
  ad::Mlp critic2_;
};

}  // namespace smp
