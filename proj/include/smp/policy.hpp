#pragma once

// Shared Modular Policy: one per-limb module (or an up/down pair) evaluated
// at every node of a morphology tree, coordinating through normalized
// 32-dim messages.
//
// Module layouts per scheme (S = per-limb input, C = c_max, M = msg_dim):
//   none       up:   S         -> 1
//   bottom_up  up:   S + C*M   -> 1 + M
//   top_down   up:   S + M     -> 1 + C*M
//   both_way   up:   S + C*M   -> M         (messages only)
//              down: M + M     -> 1 + C*M   (own up-message, parent message)
// Child k of a node reads/writes message slot k (its sibling rank); unused
// slots carry zeros on the way up and are ignored on the way down.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "smp/autodiff.hpp"
#include "smp/errors.hpp"
#include "smp/morphology.hpp"
#include "smp/sim.hpp"

namespace smp {

enum class Scheme { kNone, kBottomUp, kTopDown, kBothWay };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::kNone: return "none";
    case Scheme::kBottomUp: return "bottom_up";
    case Scheme::kTopDown: return "top_down";
    case Scheme::kBothWay: return "both_way";
  }
  return "?";
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "none") return Scheme::kNone;
  if (s == "bottom_up") return Scheme::kBottomUp;
  if (s == "top_down") return Scheme::kTopDown;
  if (s == "both_way") return Scheme::kBothWay;
  throw ValidationError("unknown scheme '" + s + "'");
}

inline constexpr int kMessageDim = 32;
inline constexpr double kMessageEps = 1e-8;

using Message = Eigen::VectorXd;

inline Message normalize_message(const Message& m) {
  return m / std::max(m.norm(), kMessageEps);
}

// Slot i holds msgs[i]; slots past msgs.size() are zero.
inline std::vector<Message> pad_child_messages(const std::vector<Message>& msgs, int c_max,
                                               int msg_dim = kMessageDim) {
  if (static_cast<int>(msgs.size()) > c_max)
    throw TooManyChildren(std::to_string(msgs.size()) + " children but only " +
                          std::to_string(c_max) + " message slots");
  std::vector<Message> out(c_max, Message::Zero(msg_dim));
  for (std::size_t i = 0; i < msgs.size(); ++i) out[i] = msgs[i];
  return out;
}

struct ModularConfig {
  Scheme scheme = Scheme::kBothWay;
  int input_dim = LimbState::kDim;
  int c_max = 1;
  int msg_dim = kMessageDim;
  int hidden = 256;
  int layers = 4;
};

// One agent's per-limb inputs, each B x input_dim, in graph limb order.
struct AgentInput {
  const MorphologyGraph* graph = nullptr;
  std::vector<ad::Tensor> limbs;
};

struct AgentOutput {
  std::vector<ad::Tensor> head;      // raw head output per limb, B x 1
  std::vector<ad::Tensor> up;        // normalized message to parent, B x M
  std::vector<ad::Tensor> down_in;   // message received from parent, B x M
  std::vector<ad::Tensor> down_out;  // normalized child-slot messages, B x C*M
};

enum class Batching {
  kDepth,      // all nodes at one tree depth (across agents) share a matmul
  kSequential  // one node at a time in (reverse) topological order
};

class ModularNet {
 public:
  ModularNet() = default;
  ModularNet(const ModularConfig& cfg, Rng& rng, double final_scale = 1.0) : cfg_(cfg) {
    if (cfg.c_max < 0) throw ValidationError("c_max must be >= 0");
    const int s = cfg.input_dim, c = cfg.c_max, m = cfg.msg_dim;
    auto widths = [&](int in, int out) {
      std::vector<int> w{in};
      for (int l = 0; l + 1 < cfg.layers; ++l) w.push_back(cfg.hidden);
      w.push_back(out);
      return w;
    };
    switch (cfg.scheme) {
      case Scheme::kNone: up_ = ad::Mlp(widths(s, 1), rng, final_scale); break;
      case Scheme::kBottomUp: up_ = ad::Mlp(widths(s + c * m, 1 + m), rng, final_scale); break;
      case Scheme::kTopDown: up_ = ad::Mlp(widths(s + m, 1 + c * m), rng, final_scale); break;
      case Scheme::kBothWay:
        up_ = ad::Mlp(widths(s + c * m, m), rng, final_scale);
        down_ = ad::Mlp(widths(2 * m, 1 + c * m), rng, final_scale);
        break;
    }
  }

  const ModularConfig& config() const { return cfg_; }
  Scheme scheme() const { return cfg_.scheme; }
  const ad::Mlp& up_module() const { return up_; }
  const ad::Mlp& down_module() const { return down_; }

  std::vector<ad::Tensor> parameters() const {
    auto p = up_.parameters();
    for (auto& t : down_.parameters()) p.push_back(t);
    return p;
  }
  std::size_t parameter_count() const { return ad::parameter_count(parameters()); }

  ModularNet clone() const {
    ModularNet n;
    n.cfg_ = cfg_;
    n.up_ = up_.clone();
    n.down_ = down_.clone();
    return n;
  }

  ad::NamedTensors named(const std::string& prefix) const {
    ad::NamedTensors out;
    auto add = [&](const ad::Mlp& mlp, const std::string& tag) {
      for (std::size_t l = 0; l < mlp.layers(); ++l) {
        out.emplace_back(prefix + tag + ".w" + std::to_string(l), mlp.weight(l).value());
        out.emplace_back(prefix + tag + ".b" + std::to_string(l), mlp.bias(l).value());
      }
    };
    add(up_, "up");
    add(down_, "down");
    return out;
  }

  void load(const ad::NamedTensors& tensors, const std::string& prefix) {
    auto fill = [&](const ad::Mlp& mlp, const std::string& tag) {
      for (std::size_t l = 0; l < mlp.layers(); ++l) {
        for (auto [t, kind] : {std::pair{mlp.weight(l), ".w"}, std::pair{mlp.bias(l), ".b"}}) {
          const std::string key = prefix + tag + kind + std::to_string(l);
          auto it = std::find_if(tensors.begin(), tensors.end(),
                                 [&](const auto& p) { return p.first == key; });
          if (it == tensors.end()) throw CheckpointError("missing tensor '" + key + "'");
          if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
            throw CheckpointError("shape mismatch for '" + key + "'");
          t.mutable_value() = it->second;
        }
      }
    };
    fill(up_, "up");
    fill(down_, "down");
  }

  std::vector<AgentOutput> forward(ad::Tape& tape, std::span<const AgentInput> agents,
                                   Batching batching = Batching::kDepth) const {
    std::vector<AgentOutput> out(agents.size());
    for (std::size_t a = 0; a < agents.size(); ++a) {
      const auto& g = *agents[a].graph;
      if (static_cast<int>(agents[a].limbs.size()) != g.size())
        throw DimensionMismatch("agent '" + g.name() + "' has " + std::to_string(g.size()) +
                                " limbs but " + std::to_string(agents[a].limbs.size()) +
                                " inputs");
      for (const auto& t : agents[a].limbs)
        if (t.cols() != cfg_.input_dim)
          throw DimensionMismatch("limb input has " + std::to_string(t.cols()) +
                                  " features, module expects " + std::to_string(cfg_.input_dim));
      if (cfg_.scheme != Scheme::kNone && g.max_branching() > cfg_.c_max)
        throw TooManyChildren("agent '" + g.name() + "' branches " +
                              std::to_string(g.max_branching()) + " ways, c_max is " +
                              std::to_string(cfg_.c_max));
      out[a].head.resize(g.size());
      out[a].up.resize(g.size());
      out[a].down_in.resize(g.size());
      out[a].down_out.resize(g.size());
    }

    for (const auto& group : up_schedule(agents, batching)) up_step(tape, agents, out, group);
    if (cfg_.scheme == Scheme::kTopDown || cfg_.scheme == Scheme::kBothWay)
      for (const auto& group : down_schedule(agents, batching))
        down_step(tape, agents, out, group);
    return out;
  }

 private:
  using Item = std::pair<std::size_t, int>;  // (agent, limb)
  using Group = std::vector<Item>;

  // Groups evaluated by the first module, in dependency order.
  std::vector<Group> up_schedule(std::span<const AgentInput> agents, Batching b) const {
    if (cfg_.scheme == Scheme::kNone || cfg_.scheme == Scheme::kTopDown) {
      // No upward dependencies: top_down's first module runs in down order.
      if (cfg_.scheme == Scheme::kTopDown) return {};
      if (b == Batching::kSequential) {
        std::vector<Group> s;
        for (std::size_t a = 0; a < agents.size(); ++a)
          for (int i = 0; i < agents[a].graph->size(); ++i) s.push_back({{a, i}});
        return s;
      }
      Group all;
      for (std::size_t a = 0; a < agents.size(); ++a)
        for (int i = 0; i < agents[a].graph->size(); ++i) all.emplace_back(a, i);
      return {all};
    }
    auto s = down_schedule(agents, b);
    std::reverse(s.begin(), s.end());
    return s;
  }

  // Root-to-leaf groups.
  std::vector<Group> down_schedule(std::span<const AgentInput> agents, Batching b) const {
    std::vector<Group> s;
    if (b == Batching::kSequential) {
      for (std::size_t a = 0; a < agents.size(); ++a)
        for (int i : topological_order(*agents[a].graph)) s.push_back({{a, i}});
      return s;
    }
    int depth = 0;
    for (const auto& ag : agents) depth = std::max(depth, ag.graph->max_depth());
    s.resize(depth + 1);
    for (std::size_t a = 0; a < agents.size(); ++a)
      for (int i : topological_order(*agents[a].graph))
        s[agents[a].graph->depth(i)].emplace_back(a, i);
    return s;
  }

  // Runs mlp on the row-stack of inputs and splits the result back per item.
  static std::vector<ad::Tensor> run_stacked(ad::Tape& tape, const ad::Mlp& mlp,
                                             const std::vector<ad::Tensor>& inputs) {
    if (inputs.size() == 1) return {mlp.forward(tape, inputs[0])};
    const ad::Tensor y = mlp.forward(tape, tape.concat(inputs, 0));
    std::vector<ad::Tensor> parts;
    Eigen::Index off = 0;
    for (const auto& x : inputs) {
      parts.push_back(tape.slice(y, 0, off, x.rows()));
      off += x.rows();
    }
    return parts;
  }

  void up_step(ad::Tape& tape, std::span<const AgentInput> agents, std::vector<AgentOutput>& out,
               const Group& group) const {
    const int m = cfg_.msg_dim;
    std::vector<ad::Tensor> inputs;
    for (auto [a, i] : group) {
      const auto& g = *agents[a].graph;
      const ad::Tensor& s = agents[a].limbs[i];
      if (cfg_.scheme == Scheme::kNone) {
        inputs.push_back(s);
        continue;
      }
      std::vector<ad::Tensor> parts{s};
      for (int c : g.children(i)) parts.push_back(out[a].up[c]);
      for (int k = static_cast<int>(g.children(i).size()); k < cfg_.c_max; ++k)
        parts.push_back(ad::Tensor::zeros(s.rows(), m));
      inputs.push_back(parts.size() == 1 ? parts[0] : tape.concat(parts, 1));
    }
    const auto ys = run_stacked(tape, up_, inputs);
    for (std::size_t k = 0; k < group.size(); ++k) {
      auto [a, i] = group[k];
      const auto& y = ys[k];
      switch (cfg_.scheme) {
        case Scheme::kNone: out[a].head[i] = y; break;
        case Scheme::kBottomUp:
          out[a].head[i] = tape.slice(y, 1, 0, 1);
          out[a].up[i] = tape.normalize_blocks(tape.slice(y, 1, 1, m), m, kMessageEps);
          break;
        case Scheme::kBothWay: out[a].up[i] = tape.normalize_blocks(y, m, kMessageEps); break;
        case Scheme::kTopDown: break;
      }
    }
  }

  void down_step(ad::Tape& tape, std::span<const AgentInput> agents,
                 std::vector<AgentOutput>& out, const Group& group) const {
    const int m = cfg_.msg_dim;
    const int c = cfg_.c_max;
    std::vector<ad::Tensor> inputs;
    for (auto [a, i] : group) {
      const auto& g = *agents[a].graph;
      const ad::Tensor& s = agents[a].limbs[i];
      const int p = g.parent(i);
      out[a].down_in[i] = p == MorphologyGraph::kNone
                              ? ad::Tensor::zeros(s.rows(), m)
                              : tape.slice(out[a].down_out[p], 1, g.slot(i) * m, m);
      const ad::Tensor& own = cfg_.scheme == Scheme::kBothWay ? out[a].up[i] : s;
      inputs.push_back(tape.concat({own, out[a].down_in[i]}, 1));
    }
    const auto ys = run_stacked(tape, cfg_.scheme == Scheme::kBothWay ? down_ : up_, inputs);
    for (std::size_t k = 0; k < group.size(); ++k) {
      auto [a, i] = group[k];
      out[a].head[i] = tape.slice(ys[k], 1, 0, 1);
      if (c > 0)
        out[a].down_out[i] = tape.normalize_blocks(tape.slice(ys[k], 1, 1, c * m), m, kMessageEps);
    }
  }

  ModularConfig cfg_;
  ad::Mlp up_;    // theta_1
  ad::Mlp down_;  // theta_2, both_way only
};

// ---------------------------------------------------------------------------
// Single-agent actor API on LimbState lists.

struct PolicyOutput {
  std::vector<double> actions;         // tanh-bounded, one per limb
  std::vector<Message> up_messages;    // per limb, empty when the scheme has none
  std::vector<Message> down_messages;  // per limb, message received from parent
};

inline ad::Matrix limb_rows(const LimbState& s) {
  ad::Matrix m(1, LimbState::kDim);
  s.write(std::span<double>(m.data(), LimbState::kDim));
  return m;
}

inline AgentInput make_agent_input(const MorphologyGraph& g, std::span<const LimbState> states) {
  if (static_cast<int>(states.size()) != g.size())
    throw DimensionMismatch("expected " + std::to_string(g.size()) + " limb states, got " +
                            std::to_string(states.size()));
  AgentInput in{&g, {}};
  for (const auto& s : states) in.limbs.push_back(ad::Tensor(limb_rows(s)));
  return in;
}

inline PolicyOutput to_policy_output(const AgentOutput& o) {
  PolicyOutput p;
  for (std::size_t i = 0; i < o.head.size(); ++i) {
    p.actions.push_back(std::tanh(o.head[i].value()(0, 0)));
    if (o.up[i].defined()) p.up_messages.push_back(o.up[i].value().row(0).transpose());
    if (o.down_in[i].defined()) p.down_messages.push_back(o.down_in[i].value().row(0).transpose());
  }
  return p;
}

inline std::vector<PolicyOutput> depth_batched_forward(
    std::span<const std::vector<LimbState>> states, std::span<const MorphologyGraph> graphs,
    const ModularNet& net, Batching batching = Batching::kDepth) {
  if (states.size() != graphs.size()) throw DimensionMismatch("states/graphs count differ");
  std::vector<AgentInput> agents;
  for (std::size_t a = 0; a < graphs.size(); ++a)
    agents.push_back(make_agent_input(graphs[a], states[a]));
  ad::Tape tape(ad::Tape::Mode::kNoGrad);
  const auto outs = net.forward(tape, agents, batching);
  std::vector<PolicyOutput> result;
  for (const auto& o : outs) result.push_back(to_policy_output(o));
  return result;
}

inline PolicyOutput act(std::span<const LimbState> states, const MorphologyGraph& g,
                        const ModularNet& net) {
  ad::Tape tape(ad::Tape::Mode::kNoGrad);
  const AgentInput in = make_agent_input(g, states);
  return to_policy_output(net.forward(tape, std::span<const AgentInput>(&in, 1))[0]);
}

namespace detail {
inline void require_scheme(const ModularNet& net, Scheme s) {
  if (net.scheme() != s)
    throw SchemeMismatch("policy uses " + to_string(net.scheme()) + ", caller expects " +
                         to_string(s));
}
}  // namespace detail

inline PolicyOutput act_no_message(std::span<const LimbState> states, const MorphologyGraph& g,
                                   const ModularNet& net) {
  detail::require_scheme(net, Scheme::kNone);
  return act(states, g, net);
}
inline PolicyOutput act_bottom_up(std::span<const LimbState> states, const MorphologyGraph& g,
                                  const ModularNet& net) {
  detail::require_scheme(net, Scheme::kBottomUp);
  return act(states, g, net);
}
inline PolicyOutput act_top_down(std::span<const LimbState> states, const MorphologyGraph& g,
                                 const ModularNet& net) {
  detail::require_scheme(net, Scheme::kTopDown);
  return act(states, g, net);
}
inline PolicyOutput act_both_way(std::span<const LimbState> states, const MorphologyGraph& g,
                                 const ModularNet& net) {
  detail::require_scheme(net, Scheme::kBothWay);
  return act(states, g, net);
}

// Checkpoint sidecar.
inline nlohmann::json modular_sidecar(const ModularConfig& c) {
  return {{"arch", "smp"},
          {"scheme", to_string(c.scheme)},
          {"c_max", c.c_max},
          {"msg_dim", c.msg_dim},
          {"D_s", c.input_dim},
          {"hidden_width", c.hidden},
          {"layers", c.layers}};
}

inline ModularConfig modular_config_from_sidecar(const nlohmann::json& j) {
  ModularConfig c;
  c.scheme = parse_scheme(j.at("scheme").get<std::string>());
  c.c_max = j.at("c_max").get<int>();
  c.msg_dim = j.at("msg_dim").get<int>();
  c.input_dim = j.at("D_s").get<int>();
  c.hidden = j.at("hidden_width").get<int>();
  c.layers = j.value("layers", 4);
  return c;
}

}  // namespace smp
