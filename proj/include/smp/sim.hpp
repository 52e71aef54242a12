#pragma once

// Planar articulated rigid-body simulator.
//
// Each limb is a uniform rod. Dynamics are M(q) qdd + h(q, qd) = Q, with
// M and h assembled from per-limb point Jacobians and integrated with
// semi-implicit Euler. Ground contact is a vertical penalty spring-damper at
// the root origin and at every limb tip, with viscous horizontal friction
// capped by the Coulomb cone.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "smp/errors.hpp"
#include "smp/kinematics.hpp"
#include "smp/morphology.hpp"
#include "smp/rng.hpp"

namespace smp {

struct EnvConfig {
  double dt = 0.008;  // control interval; physics substep is dt / frame_skip
  int frame_skip = 4;
  double gravity = 9.81;
  double ground_stiffness = 3.0e4;  // N/m
  double ground_damping = 300.0;    // N s/m
  double friction_coefficient = 0.9;
  double friction_damping = 300.0;  // N s/m, tangential
  double alive_bonus = 1.0;
  double ctrl_cost_weight = 1e-3;
  int episode_length = 1000;
  double termination_height = 0.2;  // m, root frame height
  double termination_pitch = 1.0;   // rad
  double joint_damping = 0.1;       // N m s/rad
  double joint_limit_stiffness = 500.0;
  double joint_limit_damping = 5.0;
  double init_noise = 0.005;
  bool fixed_base = false;

  void validate() const {
    if (!(dt > 0.0)) throw ValidationError("EnvConfig.dt must be > 0");
    if (frame_skip < 1) throw ValidationError("EnvConfig.frame_skip must be >= 1");
    if (episode_length <= 0) throw ValidationError("EnvConfig.episode_length must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = {{"dt", c.dt},
       {"frame_skip", c.frame_skip},
       {"gravity", c.gravity},
       {"ground_stiffness", c.ground_stiffness},
       {"ground_damping", c.ground_damping},
       {"friction_coefficient", c.friction_coefficient},
       {"friction_damping", c.friction_damping},
       {"alive_bonus", c.alive_bonus},
       {"ctrl_cost_weight", c.ctrl_cost_weight},
       {"episode_length", c.episode_length},
       {"termination_height", c.termination_height},
       {"termination_pitch", c.termination_pitch},
       {"joint_damping", c.joint_damping},
       {"joint_limit_stiffness", c.joint_limit_stiffness},
       {"joint_limit_damping", c.joint_limit_damping},
       {"init_noise", c.init_noise},
       {"fixed_base", c.fixed_base}};
}

inline void from_json(const nlohmann::json& j, EnvConfig& c) {
  EnvConfig d;
  c.dt = j.value("dt", d.dt);
  c.frame_skip = j.value("frame_skip", d.frame_skip);
  c.gravity = j.value("gravity", d.gravity);
  c.ground_stiffness = j.value("ground_stiffness", d.ground_stiffness);
  c.ground_damping = j.value("ground_damping", d.ground_damping);
  c.friction_coefficient = j.value("friction_coefficient", d.friction_coefficient);
  c.friction_damping = j.value("friction_damping", d.friction_damping);
  c.alive_bonus = j.value("alive_bonus", d.alive_bonus);
  c.ctrl_cost_weight = j.value("ctrl_cost_weight", d.ctrl_cost_weight);
  c.episode_length = j.value("episode_length", d.episode_length);
  c.termination_height = j.value("termination_height", d.termination_height);
  c.termination_pitch = j.value("termination_pitch", d.termination_pitch);
  c.joint_damping = j.value("joint_damping", d.joint_damping);
  c.joint_limit_stiffness = j.value("joint_limit_stiffness", d.joint_limit_stiffness);
  c.joint_limit_damping = j.value("joint_limit_damping", d.joint_limit_damping);
  c.init_noise = j.value("init_noise", d.init_noise);
  c.fixed_base = j.value("fixed_base", d.fixed_base);
  c.validate();
}

struct SimState {
  std::vector<double> q;
  std::vector<double> qdot;
  int t = 0;

  bool finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    return std::all_of(q.begin(), q.end(), ok) && std::all_of(qdot.begin(), qdot.end(), ok);
  }
  friend bool operator==(const SimState&, const SimState&) = default;
};

// Per-limb observation. Planar quantities occupy the first slots of 3-vectors
// (positions and linear velocities as (x, z, 0); rotations about the plane
// normal in the third slot).
struct LimbState {
  static constexpr int kDim = 17;

  std::array<double, 3> position{};  // x relative to the root frame, world z
  std::array<double, 3> linear_velocity{};
  std::array<double, 3> angular_velocity{};
  std::array<double, 3> rotation{};     // exponential map
  std::array<double, 3> joint_range{};  // (position_t, low, high) in [0, 1]
  std::array<double, 2> limb_type{};    // (is_root, is_leaf)

  void write(std::span<double> out) const {
    auto it = out.begin();
    for (const auto* a : {&position, &linear_velocity, &angular_velocity, &rotation, &joint_range})
      it = std::copy(a->begin(), a->end(), it);
    std::copy(limb_type.begin(), limb_type.end(), it);
  }
  std::array<double, kDim> vector() const {
    std::array<double, kDim> v{};
    write(v);
    return v;
  }
  friend bool operator==(const LimbState&, const LimbState&) = default;
};

// Joint-range triple for limbs without a joint.
inline constexpr std::array<double, 3> kNoJointRange{0.5, 0.0, 1.0};

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  return a;
}

struct StepResult {
  SimState state;
  std::vector<LimbState> observation;
  double reward = 0.0;
  bool done = false;
  bool terminal = false;  // done for a reason other than the time limit
};

namespace detail {

struct Kinematics {
  Pose pose;
  std::vector<double> omega;        // world angular velocity per limb
  std::vector<Vec2> v_origin;       // origin velocity
  std::vector<Vec2> a_origin;       // velocity-product acceleration of origin
  std::vector<Vec2> v_tip;
  std::vector<Vec2> a_tip;
};

inline Kinematics kinematics(const PlanarModel& m, std::span<const double> q,
                             std::span<const double> qd) {
  const auto& g = m.graph();
  const int n = m.limb_count();
  Kinematics k;
  k.pose = m.pose(q);
  k.omega.assign(n, 0.0);
  k.v_origin.assign(n, Vec2::Zero());
  k.a_origin.assign(n, Vec2::Zero());
  k.v_tip.assign(n, Vec2::Zero());
  k.a_tip.assign(n, Vec2::Zero());
  for (int i : m.order()) {
    const double len = g.limb(i).length;
    const Vec2 u = direction(k.pose.angle[i]);
    if (i == m.root()) {
      k.omega[i] = qd[2];
      k.v_origin[i] = Vec2(qd[0], qd[1]);
    } else {
      const int p = g.body_parent(i);
      k.omega[i] = k.omega[p] + qd[m.coord(i)];
      const bool tip = *g.limb(i).attach == Attach::kTip;
      k.v_origin[i] = tip ? k.v_tip[p] : k.v_origin[p];
      k.a_origin[i] = tip ? k.a_tip[p] : k.a_origin[p];
    }
    k.v_tip[i] = k.v_origin[i] + len * k.omega[i] * perp(u);
    k.a_tip[i] = k.a_origin[i] - len * k.omega[i] * k.omega[i] * u;
  }
  return k;
}

// Translational Jacobian (2 x dof) of world point p rigidly attached to limb i.
inline Eigen::MatrixXd point_jacobian(const PlanarModel& m, const Pose& pose, int i,
                                      const Vec2& p) {
  const auto& g = m.graph();
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2, m.dof());
  J(0, 0) = 1.0;
  J(1, 1) = 1.0;
  J.col(2) = perp(p - pose.origin[m.root()]);
  for (int j = i; j != m.root(); j = g.body_parent(j)) J.col(m.coord(j)) = perp(p - pose.origin[j]);
  return J;
}

inline Eigen::RowVectorXd angular_jacobian(const PlanarModel& m, int i) {
  const auto& g = m.graph();
  Eigen::RowVectorXd J = Eigen::RowVectorXd::Zero(m.dof());
  J(2) = 1.0;
  for (int j = i; j != m.root(); j = g.body_parent(j)) J(m.coord(j)) = 1.0;
  return J;
}

struct Dynamics {
  Eigen::MatrixXd mass;
  Eigen::VectorXd bias;     // velocity-product terms h(q, qd)
  Eigen::VectorXd gravity;  // generalized gravity force
};

inline Dynamics dynamics(const PlanarModel& m, const Kinematics& k, double gravity) {
  const auto& g = m.graph();
  const int dof = m.dof();
  Dynamics d{Eigen::MatrixXd::Zero(dof, dof), Eigen::VectorXd::Zero(dof),
             Eigen::VectorXd::Zero(dof)};
  for (int i = 0; i < m.limb_count(); ++i) {
    const auto& l = g.limb(i);
    const Vec2 u = direction(k.pose.angle[i]);
    const Vec2 com = k.pose.origin[i] + 0.5 * l.length * u;
    const Vec2 a_com = k.a_origin[i] - 0.5 * l.length * k.omega[i] * k.omega[i] * u;
    const Eigen::MatrixXd Jc = point_jacobian(m, k.pose, i, com);
    const Eigen::RowVectorXd Jw = angular_jacobian(m, i);
    const double inertia = l.mass * l.length * l.length / 12.0;
    d.mass.noalias() += l.mass * Jc.transpose() * Jc;
    d.mass.noalias() += inertia * Jw.transpose() * Jw;
    d.bias.noalias() += l.mass * Jc.transpose() * a_com;
    d.gravity.noalias() += Jc.transpose() * Vec2(0.0, -l.mass * gravity);
  }
  return d;
}

}  // namespace detail

inline double mechanical_energy(const PlanarModel& m, const SimState& s, const EnvConfig& cfg) {
  const auto k = detail::kinematics(m, s.q, s.qdot);
  const auto d = detail::dynamics(m, k, cfg.gravity);
  const Eigen::Map<const Eigen::VectorXd> qd(s.qdot.data(), s.qdot.size());
  double potential = 0.0;
  const auto& g = m.graph();
  for (int i = 0; i < m.limb_count(); ++i) {
    const double zc = k.pose.origin[i].y() + 0.5 * g.limb(i).length * std::cos(k.pose.angle[i]);
    potential += g.limb(i).mass * cfg.gravity * zc;
  }
  return 0.5 * qd.dot(d.mass * qd) + potential;
}

inline std::vector<LimbState> observe(const PlanarModel& m, const SimState& s,
                                      const EnvConfig& /*cfg*/) {
  const auto& g = m.graph();
  const auto k = detail::kinematics(m, s.q, s.qdot);
  std::vector<LimbState> out(m.limb_count());
  // Orientation relative to rest: pitch plus joint angles along the path.
  std::vector<double> rel(m.limb_count(), 0.0);
  for (int i : m.order())
    rel[i] = i == m.root() ? s.q[2] : rel[g.body_parent(i)] + s.q[m.coord(i)];
  for (int i = 0; i < m.limb_count(); ++i) {
    auto& o = out[i];
    const auto& l = g.limb(i);
    o.position = {k.pose.origin[i].x() - s.q[0], k.pose.origin[i].y(), 0.0};
    o.linear_velocity = {k.v_origin[i].x(), k.v_origin[i].y(), 0.0};
    o.angular_velocity = {0.0, 0.0, k.omega[i]};
    o.rotation = {0.0, 0.0, wrap_angle(rel[i])};
    if (i == m.root()) {
      o.joint_range = kNoJointRange;
    } else {
      const double span = l.joint_high - l.joint_low;
      auto unit = [](double a) { return std::clamp((a + std::numbers::pi) / (2.0 * std::numbers::pi), 0.0, 1.0); };
      o.joint_range = {std::clamp((s.q[m.coord(i)] - l.joint_low) / span, 0.0, 1.0),
                       unit(l.joint_low), unit(l.joint_high)};
    }
    o.limb_type = {i == g.root() ? 1.0 : 0.0, g.is_leaf(i) ? 1.0 : 0.0};
  }
  return out;
}

inline std::pair<SimState, std::vector<LimbState>> reset(const PlanarModel& m,
                                                         const EnvConfig& cfg,
                                                         std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SimState s;
  s.q = m.rest_q();
  s.qdot.assign(m.dof(), 0.0);
  for (auto& v : s.q) v += rng.uniform(-cfg.init_noise, cfg.init_noise);
  for (auto& v : s.qdot) v += rng.uniform(-cfg.init_noise, cfg.init_noise);
  if (cfg.fixed_base)
    for (int c = 0; c < 3; ++c) s.qdot[c] = 0.0;
  auto obs = observe(m, s, cfg);
  return {std::move(s), std::move(obs)};
}

// Generalized accelerations for one substep. torques holds one entry per
// actuated limb in limb order.
inline Eigen::VectorXd accelerations(const PlanarModel& m, const SimState& s,
                                     std::span<const double> torques, const EnvConfig& cfg) {
  const auto& g = m.graph();
  const int dof = m.dof();
  const auto k = detail::kinematics(m, s.q, s.qdot);
  const auto d = detail::dynamics(m, k, cfg.gravity);
  Eigen::VectorXd force = d.gravity - d.bias;

  auto contact = [&](int limb, const Vec2& p, const Vec2& v) {
    if (p.y() >= 0.0) return;
    const double fz = std::max(0.0, -cfg.ground_stiffness * p.y() - cfg.ground_damping * v.y());
    const double cap = cfg.friction_coefficient * fz;
    const double fx = std::clamp(-cfg.friction_damping * v.x(), -cap, cap);
    force.noalias() += detail::point_jacobian(m, k.pose, limb, p).transpose() * Vec2(fx, fz);
  };
  contact(m.root(), k.pose.origin[m.root()], k.v_origin[m.root()]);
  for (int i = 0; i < m.limb_count(); ++i) contact(i, k.pose.tip[i], k.v_tip[i]);

  std::size_t a = 0;
  for (int i = 0; i < m.limb_count(); ++i) {
    const auto& l = g.limb(i);
    const bool has_joint = i != m.root();
    if (l.is_actuated) {
      const double u = std::clamp(torques[a++], -1.0, 1.0);
      if (has_joint) force(m.coord(i)) += l.gear * u;
    }
    if (!has_joint) continue;
    const int c = m.coord(i);
    const double th = s.q[c];
    const double w = s.qdot[c];
    force(c) -= cfg.joint_damping * w;
    if (th > l.joint_high)
      force(c) -= cfg.joint_limit_stiffness * (th - l.joint_high) + cfg.joint_limit_damping * std::max(w, 0.0);
    else if (th < l.joint_low)
      force(c) -= cfg.joint_limit_stiffness * (th - l.joint_low) + cfg.joint_limit_damping * std::min(w, 0.0);
  }

  Eigen::VectorXd qdd = Eigen::VectorXd::Zero(dof);
  if (cfg.fixed_base) {
    const int nj = dof - 3;
    if (nj > 0)
      qdd.tail(nj) = d.mass.bottomRightCorner(nj, nj).ldlt().solve(force.tail(nj));
  } else {
    qdd = d.mass.ldlt().solve(force);
  }
  return qdd;
}

// One semi-implicit Euler substep of length h.
inline void substep(const PlanarModel& m, SimState& s, std::span<const double> torques,
                    const EnvConfig& cfg, double h) {
  const Eigen::VectorXd qdd = accelerations(m, s, torques, cfg);
  for (int c = 0; c < m.dof(); ++c) {
    s.qdot[c] += h * qdd(c);
    s.q[c] += h * s.qdot[c];
  }
  const auto& g = m.graph();
  for (int i = 0; i < m.limb_count(); ++i) {
    if (i == m.root()) continue;
    const auto& l = g.limb(i);
    const int c = m.coord(i);
    const double slack = 0.1 * (l.joint_high - l.joint_low);
    if (s.q[c] > l.joint_high + slack) {
      s.q[c] = l.joint_high + slack;
      s.qdot[c] = std::min(s.qdot[c], 0.0);
    } else if (s.q[c] < l.joint_low - slack) {
      s.q[c] = l.joint_low - slack;
      s.qdot[c] = std::max(s.qdot[c], 0.0);
    }
  }
}

// Advance one control interval. Throws NonFiniteState when the dynamics
// diverge; callers end the episode.
inline StepResult step(const PlanarModel& m, const SimState& state,
                       std::span<const double> torques, const EnvConfig& cfg) {
  const auto& g = m.graph();
  if (static_cast<int>(torques.size()) != g.actuated_count())
    throw DimensionMismatch("expected " + std::to_string(g.actuated_count()) +
                            " torques, got " + std::to_string(torques.size()));
  StepResult r;
  r.state = state;
  const double h = cfg.dt / cfg.frame_skip;
  for (int k = 0; k < cfg.frame_skip; ++k) {
    substep(m, r.state, torques, cfg, h);
    if (!r.state.finite()) throw NonFiniteState("dynamics diverged at t=" + std::to_string(state.t));
  }
  r.state.t = state.t + 1;
  double ctrl = 0.0;
  for (double u : torques) {
    const double c = std::clamp(u, -1.0, 1.0);
    ctrl += c * c;
  }
  const double forward = (r.state.q[0] - state.q[0]) / cfg.dt;
  r.reward = forward + cfg.alive_bonus - cfg.ctrl_cost_weight * ctrl;
  r.terminal = r.state.q[1] < cfg.termination_height ||
               std::abs(r.state.q[2]) > cfg.termination_pitch;
  r.done = r.terminal || r.state.t >= cfg.episode_length;
  r.observation = observe(m, r.state, cfg);
  return r;
}

// Graph-based conveniences.
inline std::pair<SimState, std::vector<LimbState>> reset(const MorphologyGraph& g,
                                                         const EnvConfig& cfg,
                                                         std::uint64_t seed) {
  return reset(PlanarModel(g), cfg, seed);
}
inline StepResult step(const SimState& s, std::span<const double> torques,
                       const MorphologyGraph& g, const EnvConfig& cfg) {
  return step(PlanarModel(g), s, torques, cfg);
}
inline std::vector<LimbState> observe(const SimState& s, const MorphologyGraph& g,
                                      const EnvConfig& cfg) {
  return observe(PlanarModel(g), s, cfg);
}

// Per-actuator torques picked out of a per-limb action vector.
inline std::vector<double> actuated_torques(const MorphologyGraph& g,
                                            std::span<const double> limb_actions) {
  if (static_cast<int>(limb_actions.size()) != g.size())
    throw DimensionMismatch("expected one action per limb");
  std::vector<double> out;
  out.reserve(g.actuated_count());
  for (int i = 0; i < g.size(); ++i)
    if (g.limb(i).is_actuated) out.push_back(limb_actions[i]);
  return out;
}

// Gym-style wrapper owning one agent's state.
class Env {
 public:
  Env(MorphologyGraph g, EnvConfig cfg)
      : graph_(std::make_shared<const MorphologyGraph>(std::move(g))),
        cfg_(cfg),
        model_(*graph_) {
    cfg_.validate();
  }
  Env(const Env& o)
      : graph_(o.graph_), cfg_(o.cfg_), model_(*graph_), state_(o.state_),
        diverged_(o.diverged_) {}
  Env& operator=(const Env& o) {
    graph_ = o.graph_;
    cfg_ = o.cfg_;
    model_ = PlanarModel(*graph_);
    state_ = o.state_;
    diverged_ = o.diverged_;
    return *this;
  }

  const MorphologyGraph& graph() const { return *graph_; }
  const EnvConfig& config() const { return cfg_; }
  const PlanarModel& model() const { return model_; }
  const SimState& state() const { return state_; }

  std::vector<LimbState> reset(std::uint64_t seed) {
    auto [s, obs] = smp::reset(model_, cfg_, seed);
    state_ = std::move(s);
    diverged_ = false;
    return obs;
  }

  // One action per limb; actions of unactuated limbs are ignored. A diverged
  // simulation ends the episode (done and terminal, observation of the last
  // finite state).
  StepResult step(std::span<const double> limb_actions) {
    const auto torques = actuated_torques(*graph_, limb_actions);
    try {
      StepResult r = smp::step(model_, state_, torques, cfg_);
      state_ = r.state;
      return r;
    } catch (const NonFiniteState&) {
      StepResult r;
      r.state = state_;
      r.observation = smp::observe(model_, state_, cfg_);
      r.done = r.terminal = true;
      diverged_ = true;
      return r;
    }
  }

  bool diverged() const { return diverged_; }

 private:
  std::shared_ptr<const MorphologyGraph> graph_;
  EnvConfig cfg_;
  PlanarModel model_;
  SimState state_;
  bool diverged_ = false;
};

// CSV rows (t, q..., qdot..., reward, done).
class TrajectoryWriter {
 public:
  TrajectoryWriter(std::ostream& os, int dof) : os_(os) {
    os_ << "t";
    for (int i = 0; i < dof; ++i) os_ << ",q" << i;
    for (int i = 0; i < dof; ++i) os_ << ",qdot" << i;
    os_ << ",reward,done\n";
    os_.precision(17);
  }
  void write(const SimState& s, double reward, bool done) {
    os_ << s.t;
    for (double v : s.q) os_ << ',' << v;
    for (double v : s.qdot) os_ << ',' << v;
    os_ << ',' << reward << ',' << (done ? 1 : 0) << '\n';
  }

 private:
  std::ostream& os_;
};

}  // namespace smp
