#pragma once

// TD3 on whole-agent transitions. The learner is generic over an
// actor-critic "architecture" type providing:
//
//   ad::Tensor act(ad::Tape&, const EnvContext&, const StateBatch&) const;
//       B x K actions in [-1, 1], unactuated limbs masked to 0
//   ad::Tensor q(ad::Tape&, int critic, const EnvContext&, const StateBatch&,
//                const ad::Tensor& actions) const;     // B x 1
//   std::vector<ad::Tensor> actor_parameters() const;
//   std::vector<ad::Tensor> critic_parameters() const;  // both critics
//   Arch clone() const;

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "smp/autodiff.hpp"
#include "smp/errors.hpp"
#include "smp/morphology.hpp"
#include "smp/policy.hpp"
#include "smp/rng.hpp"
#include "smp/sim.hpp"

namespace smp {

struct Transition {
  std::vector<LimbState> states;
  std::vector<double> actions;
  double reward = 0.0;
  std::vector<LimbState> next_states;
  bool done = false;
  int env_id = 0;
};

// Per-limb state matrices, each B x D_s, in limb order.
using StateBatch = std::vector<ad::Matrix>;

struct SampledBatch {
  StateBatch states;
  StateBatch next_states;
  ad::Matrix actions;  // B x K
  ad::Matrix rewards;  // B x 1
  ad::Matrix dones;    // B x 1
};

// Fixed-capacity ring over one environment's transitions. Storage grows on
// demand up to capacity.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int limbs, int env_id = 0)
      : capacity_(capacity), limbs_(limbs), env_id_(env_id) {
    if (capacity == 0) throw ValidationError("replay capacity must be > 0");
    if (limbs <= 0) throw ValidationError("replay buffer needs at least one limb");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return size_; }
  int limbs() const { return limbs_; }
  int env_id() const { return env_id_; }
  std::size_t stride() const { return static_cast<std::size_t>(limbs_) * LimbState::kDim; }

  void add(const Transition& t) {
    if (static_cast<int>(t.states.size()) != limbs_ ||
        static_cast<int>(t.next_states.size()) != limbs_ ||
        static_cast<int>(t.actions.size()) != limbs_)
      throw DimensionMismatch("transition limb count does not match buffer (" +
                              std::to_string(limbs_) + ")");
    const std::size_t slot = head_;
    if (size_ < capacity_ && slot == size_) {
      states_.resize(states_.size() + stride());
      next_states_.resize(next_states_.size() + stride());
      actions_.resize(actions_.size() + limbs_);
      rewards_.push_back(0.0);
      dones_.push_back(0);
    }
    for (int i = 0; i < limbs_; ++i) {
      t.states[i].write(std::span<double>(&states_[slot * stride() + i * LimbState::kDim],
                                          LimbState::kDim));
      t.next_states[i].write(std::span<double>(
          &next_states_[slot * stride() + i * LimbState::kDim], LimbState::kDim));
      actions_[slot * limbs_ + i] = t.actions[i];
    }
    rewards_[slot] = t.reward;
    dones_[slot] = t.done ? 1 : 0;
    head_ = (head_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }

  // Uniform with replacement.
  std::vector<std::size_t> sample_indices(std::size_t batch, Rng& rng) const {
    if (size_ < batch || size_ == 0)
      throw BufferTooSmall("buffer holds " + std::to_string(size_) + " transitions, batch needs " +
                           std::to_string(batch));
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.index(size_));
    return idx;
  }

  SampledBatch gather(std::span<const std::size_t> idx) const {
    const auto b = static_cast<Eigen::Index>(idx.size());
    SampledBatch s;
    s.states.assign(limbs_, ad::Matrix(b, LimbState::kDim));
    s.next_states.assign(limbs_, ad::Matrix(b, LimbState::kDim));
    s.actions.resize(b, limbs_);
    s.rewards.resize(b, 1);
    s.dones.resize(b, 1);
    for (Eigen::Index r = 0; r < b; ++r) {
      const std::size_t k = idx[r];
      for (int i = 0; i < limbs_; ++i) {
        const std::size_t off = k * stride() + i * LimbState::kDim;
        for (int d = 0; d < LimbState::kDim; ++d) {
          s.states[i](r, d) = states_[off + d];
          s.next_states[i](r, d) = next_states_[off + d];
        }
        s.actions(r, i) = actions_[k * limbs_ + i];
      }
      s.rewards(r, 0) = rewards_[k];
      s.dones(r, 0) = dones_[k];
    }
    return s;
  }

  SampledBatch sample(std::size_t batch, Rng& rng) const {
    const auto idx = sample_indices(batch, rng);
    return gather(idx);
  }

 private:
  std::size_t capacity_;
  int limbs_;
  int env_id_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;
  std::vector<double> states_;
  std::vector<double> next_states_;
  std::vector<double> actions_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> dones_;
};

struct EnvContext {
  const MorphologyGraph* graph = nullptr;
  int env_id = 0;
};

inline ad::Matrix actuation_mask(const MorphologyGraph& g) {
  ad::Matrix m(1, g.size());
  for (int i = 0; i < g.size(); ++i) m(0, i) = g.limb(i).is_actuated ? 1.0 : 0.0;
  return m;
}

inline StateBatch single_state_batch(std::span<const LimbState> states) {
  StateBatch b;
  for (const auto& s : states) b.push_back(limb_rows(s));
  return b;
}

// Deterministic actor output plus N(0, noise_std) per actuator, clipped to
// [-1, 1]. Unactuated limbs get 0.
template <class Arch>
std::vector<double> select_action(const Arch& arch, const EnvContext& ctx,
                                  std::span<const LimbState> states, double noise_std, Rng& rng) {
  if (noise_std < 0.0) throw ValidationError("noise_std must be >= 0");
  ad::Tape tape(ad::Tape::Mode::kNoGrad);
  const ad::Tensor a = arch.act(tape, ctx, single_state_batch(states));
  std::vector<double> out(a.cols());
  for (Eigen::Index i = 0; i < a.cols(); ++i) {
    if (!ctx.graph->limb(static_cast<int>(i)).is_actuated) {
      out[i] = 0.0;
      continue;
    }
    double v = a.value()(0, i);
    if (noise_std > 0.0) v += noise_std * rng.normal();
    out[i] = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

// Uniform in [-1, 1] per actuator, 0 for unactuated limbs.
inline std::vector<double> random_action(const MorphologyGraph& g, Rng& rng) {
  std::vector<double> a(g.size(), 0.0);
  for (int i = 0; i < g.size(); ++i)
    if (g.limb(i).is_actuated) a[i] = rng.uniform(-1.0, 1.0);
  return a;
}

struct Td3Config {
  double gamma = 0.99;
  double tau = 0.046;
  double lr = 4e-4;
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  int policy_delay = 2;
  std::size_t batch_size = 100;
};

struct Td3Diagnostics {
  long step = 0;
  int env_id = 0;
  double critic_loss = 0.0;
  double actor_loss = std::numeric_limits<double>::quiet_NaN();  // NaN on critic-only steps
  double mean_q = 0.0;
  bool actor_updated = false;
};

class DiagnosticsWriter {
 public:
  explicit DiagnosticsWriter(std::ostream& os) : os_(os) {
    os_ << "step,env_id,critic_loss,actor_loss,mean_Q\n";
    os_.precision(10);
  }
  void write(const Td3Diagnostics& d) {
    os_ << d.step << ',' << d.env_id << ',' << d.critic_loss << ',';
    if (d.actor_updated) os_ << d.actor_loss;
    os_ << ',' << d.mean_q << '\n';
  }

 private:
  std::ostream& os_;
};

template <class Arch>
class Td3 {
 public:
  Td3(Arch online, Td3Config cfg)
      : online_(std::move(online)), target_(online_.clone()), cfg_(cfg) {
    if (cfg.policy_delay < 1) throw ValidationError("policy_delay must be >= 1");
    actor_opt_ = ad::make_adam_state(online_.actor_parameters(), cfg.lr);
    critic_opt_ = ad::make_adam_state(online_.critic_parameters(), cfg.lr);
  }

  const Arch& online() const { return online_; }
  const Arch& target() const { return target_; }
  Arch& mutable_online() { return online_; }
  Arch& mutable_target() { return target_; }
  const Td3Config& config() const { return cfg_; }
  long updates() const { return updates_; }
  long actor_updates() const { return actor_updates_; }

  Td3Diagnostics update(const ReplayBuffer& buffer, const EnvContext& ctx, Rng& rng) {
    if (buffer.size() < cfg_.batch_size)
      throw BufferTooSmall("buffer holds " + std::to_string(buffer.size()) +
                           " transitions, batch needs " + std::to_string(cfg_.batch_size));
    return update(buffer.sample(cfg_.batch_size, rng), ctx, rng);
  }

  Td3Diagnostics update(const SampledBatch& b, const EnvContext& ctx, Rng& rng) {
    const auto rows = b.actions.rows();
    const ad::Matrix mask = actuation_mask(*ctx.graph);
    Td3Diagnostics d;
    d.env_id = ctx.env_id;

    // Bellman target with target-policy smoothing and the twin minimum.
    ad::Matrix y;
    {
      ad::Tape tape(ad::Tape::Mode::kNoGrad);
      ad::Matrix next = target_.act(tape, ctx, b.next_states).value();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < next.cols(); ++c) {
          const double eps = std::clamp(cfg_.policy_noise * rng.normal(), -cfg_.noise_clip,
                                        cfg_.noise_clip);
          next(r, c) = std::clamp(next(r, c) + eps, -1.0, 1.0) * mask(0, c);
        }
      const ad::Tensor na(next);
      const ad::Matrix q1 = target_.q(tape, 0, ctx, b.next_states, na).value();
      const ad::Matrix q2 = target_.q(tape, 1, ctx, b.next_states, na).value();
      const ad::Matrix qmin = q1.cwiseMin(q2);
      if ((qmin.array() > q1.array()).any() || (qmin.array() > q2.array()).any())
        throw Error("twin-critic target exceeds an individual critic");
      y = b.rewards.array() + cfg_.gamma * (1.0 - b.dones.array()) * qmin.array();
    }

    // Critic regression.
    {
      ad::Tape tape;
      const ad::Tensor a(b.actions);
      const ad::Tensor target(y);
      const ad::Tensor q1 = online_.q(tape, 0, ctx, b.states, a);
      const ad::Tensor q2 = online_.q(tape, 1, ctx, b.states, a);
      const ad::Tensor loss = tape.add(tape.mean(tape.square(tape.sub(q1, target))),
                                       tape.mean(tape.square(tape.sub(q2, target))));
      auto params = online_.critic_parameters();
      for (auto& p : params) p.clear_grad();
      tape.backward(loss);
      ad::adam_step(params, critic_opt_);
      d.critic_loss = loss.item();
      d.mean_q = q1.value().mean();
    }

    ++updates_;
    d.step = updates_;
    if (updates_ % cfg_.policy_delay == 0) {
      ad::Tape tape;
      const ad::Tensor a = online_.act(tape, ctx, b.states);
      const ad::Tensor q = online_.q(tape, 0, ctx, b.states, a);
      const ad::Tensor loss = tape.scalar_mul(tape.mean(q), -1.0);
      auto actor = online_.actor_parameters();
      auto critic = online_.critic_parameters();
      for (auto& p : actor) p.clear_grad();
      tape.backward(loss);
      // The actor loss also reaches critic 1; those gradients are dropped.
      for (auto& p : critic) p.clear_grad();
      ad::adam_step(actor, actor_opt_);
      d.actor_loss = loss.item();
      d.actor_updated = true;
      ++actor_updates_;

      auto ta = target_.actor_parameters();
      auto tc = target_.critic_parameters();
      ad::soft_update(ta, actor, cfg_.tau);
      ad::soft_update(tc, critic, cfg_.tau);
    }
    return d;
  }

 private:
  Arch online_;
  Arch target_;
  Td3Config cfg_;
  ad::AdamState actor_opt_;
  ad::AdamState critic_opt_;
  long updates_ = 0;
  long actor_updates_ = 0;
};

// ---------------------------------------------------------------------------
// Modular actor-critic: the shared modular policy as actor, and two critics
// with the same both-way modular structure whose per-limb input is the limb
// state followed by the limb's action. Agent Q is the mean of per-limb heads.

class ModularActorCritic {
 public:
  ModularActorCritic() = default;
  ModularActorCritic(const ModularConfig& actor_cfg, Rng& rng, double actor_final_scale = 0.01)
      : actor_(actor_cfg, rng, actor_final_scale) {
    ModularConfig c = actor_cfg;
    c.scheme = Scheme::kBothWay;
    c.input_dim = actor_cfg.input_dim + 1;
    critic1_ = ModularNet(c, rng);
    critic2_ = ModularNet(c, rng);
  }

  const ModularNet& actor() const { return actor_; }
  const ModularNet& critic(int k) const { return k == 0 ? critic1_ : critic2_; }
  ModularNet& mutable_actor() { return actor_; }

  ad::Tensor act(ad::Tape& tape, const EnvContext& ctx, const StateBatch& states) const {
    AgentInput in{ctx.graph, {}};
    for (const auto& s : states) in.limbs.emplace_back(s);
    const auto out = actor_.forward(tape, std::span<const AgentInput>(&in, 1))[0];
    const ad::Tensor heads = out.head.size() == 1 ? out.head[0] : tape.concat(out.head, 1);
    return tape.mul(tape.tanh(heads), ad::Tensor(actuation_mask(*ctx.graph)));
  }

  ad::Tensor q(ad::Tape& tape, int k, const EnvContext& ctx, const StateBatch& states,
               const ad::Tensor& actions) const {
    AgentInput in{ctx.graph, {}};
    for (std::size_t i = 0; i < states.size(); ++i)
      in.limbs.push_back(tape.concat(
          {ad::Tensor(states[i]), tape.slice(actions, 1, static_cast<Eigen::Index>(i), 1)}, 1));
    const auto out = critic(k).forward(tape, std::span<const AgentInput>(&in, 1))[0];
    ad::Tensor sum = out.head[0];
    for (std::size_t i = 1; i < out.head.size(); ++i) sum = tape.add(sum, out.head[i]);
    return tape.scalar_mul(sum, 1.0 / static_cast<double>(out.head.size()));
  }

  std::vector<ad::Tensor> actor_parameters() const { return actor_.parameters(); }
  std::vector<ad::Tensor> critic_parameters() const {
    auto p = critic1_.parameters();
    for (auto& t : critic2_.parameters()) p.push_back(t);
    return p;
  }

  ModularActorCritic clone() const {
    ModularActorCritic c;
    c.actor_ = actor_.clone();
    c.critic1_ = critic1_.clone();
    c.critic2_ = critic2_.clone();
    return c;
  }

  ad::NamedTensors actor_tensors() const { return actor_.named("actor."); }
  void load_actor(const ad::NamedTensors& t) { actor_.load(t, "actor."); }
  nlohmann::json sidecar() const { return modular_sidecar(actor_.config()); }

 private:
  ModularNet actor_;
  ModularNet critic1_;
  ModularNet critic2_;
};

}  // namespace smp
