#pragma once

// Post-hoc message analysis: full message logs of a both-way policy, 1-D
// principal-component projections, autocorrelation periods and
// message-vs-leaf correlations by tree distance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smp/errors.hpp"
#include "smp/morphology.hpp"
#include "smp/policy.hpp"
#include "smp/sim.hpp"

namespace smp {

struct MessageLogRow {
  int episode = 0;
  int t = 0;
  std::vector<LimbState> states;
  std::vector<double> actions;
  std::vector<Message> up;    // message each limb sends to its parent
  std::vector<Message> down;  // message each limb received from its parent
  double reward = 0.0;
};

struct MessageLog {
  std::string graph;
  int limbs = 0;
  int msg_dim = kMessageDim;
  std::vector<MessageLogRow> rows;

  std::vector<int> episodes() const {
    std::vector<int> e;
    for (const auto& r : rows)
      if (e.empty() || e.back() != r.episode) e.push_back(r.episode);
    return e;
  }

  void write_csv(std::ostream& os) const {
    os << "episode,t";
    for (int k = 0; k < limbs; ++k) {
      for (int d = 0; d < LimbState::kDim; ++d) os << ",s" << k << '_' << d;
      os << ",a" << k;
      for (int d = 0; d < msg_dim; ++d) os << ",up" << k << '_' << d;
      for (int d = 0; d < msg_dim; ++d) os << ",down" << k << '_' << d;
    }
    os << ",reward\n";
    os << std::setprecision(17);
    for (const auto& r : rows) {
      os << r.episode << ',' << r.t;
      for (int k = 0; k < limbs; ++k) {
        for (double v : r.states[k].vector()) os << ',' << v;
        os << ',' << r.actions[k];
        for (int d = 0; d < msg_dim; ++d) os << ',' << r.up[k](d);
        for (int d = 0; d < msg_dim; ++d) os << ',' << r.down[k](d);
      }
      os << ',' << r.reward << '\n';
    }
  }
};

inline std::uint64_t analysis_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, 0xA11A, static_cast<std::uint64_t>(episode));
}

// Deterministic rollouts of a both-way actor, logging every message.
inline MessageLog record_messages(const ModularNet& actor, const MorphologyGraph& g,
                                  const EnvConfig& cfg, int episodes, std::uint64_t seed) {
  if (actor.scheme() != Scheme::kBothWay)
    throw SchemeMismatch("message analysis needs a both_way policy, got " +
                         to_string(actor.scheme()));
  MessageLog log;
  log.graph = g.name();
  log.limbs = g.size();
  log.msg_dim = actor.config().msg_dim;
  for (int e = 0; e < episodes; ++e) {
    Env env(g, cfg);
    auto obs = env.reset(analysis_seed(seed, e));
    for (int t = 0;; ++t) {
      const PolicyOutput p = act(obs, env.graph(), actor);
      std::vector<double> a = p.actions;
      for (int i = 0; i < g.size(); ++i)
        if (!g.limb(i).is_actuated) a[i] = 0.0;
      const auto r = env.step(a);
      if (env.diverged()) break;
      log.rows.push_back({e, t, obs, a, p.up_messages, p.down_messages, r.reward});
      obs = r.observation;
      if (r.done) break;
    }
  }
  return log;
}

// Centered data projected on the first principal direction; the sign makes
// the first projected value non-negative.
inline std::vector<double> project_1d(std::span<const Eigen::VectorXd> series) {
  if (series.size() < 2) throw DegenerateData("need at least two vectors");
  const auto n = static_cast<Eigen::Index>(series.size());
  const auto d = series[0].size();
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (series[i].size() != d) throw DimensionMismatch("vectors differ in length");
    x.row(i) = series[i].transpose();
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double top = es.eigenvalues()(d - 1);
  if (!(top > 1e-20)) throw DegenerateData("series has zero variance");
  Eigen::VectorXd p = x * es.eigenvectors().col(d - 1);
  if (p(0) < 0.0) p = -p;
  return {p.data(), p.data() + p.size()};
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DegenerateData("need two equal series of length >= 2");
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 1e-24) || !(sbb > 1e-24)) throw DegenerateData("constant series");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// Normalized autocorrelation r(0..max_lag).
inline std::vector<double> autocorrelation(std::span<const double> x, int max_lag) {
  const int n = static_cast<int>(x.size());
  max_lag = std::min(max_lag, n - 1);
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  if (!(var > 1e-24)) throw DegenerateData("constant series");
  std::vector<double> r(std::max(max_lag, 0) + 1);
  for (int k = 0; k <= max_lag; ++k) {
    double s = 0.0;
    for (int i = 0; i + k < n; ++i) s += (x[i] - m) * (x[i + k] - m);
    r[k] = s / var;
  }
  return r;
}

// Lag of the highest autocorrelation local maximum after the first zero
// crossing. Empty when there is no such peak.
inline std::optional<int> dominant_period(std::span<const double> x, int max_lag = -1) {
  if (max_lag < 0) max_lag = static_cast<int>(x.size()) / 2;
  const auto r = autocorrelation(x, max_lag);
  std::size_t k = 1;
  while (k < r.size() && r[k] > 0.0) ++k;
  std::optional<int> best;
  double best_r = -2.0;
  for (; k + 1 < r.size(); ++k)
    if (r[k] > r[k - 1] && r[k] >= r[k + 1] && r[k] > best_r) {
      best_r = r[k];
      best = static_cast<int>(k);
    }
  return best;
}

// 1-D projection of the root's up-message over each episode of the log.
inline std::vector<double> root_message_projection(const MessageLog& log, const MorphologyGraph& g,
                                                   int episode) {
  std::vector<Eigen::VectorXd> v;
  for (const auto& r : log.rows)
    if (r.episode == episode) v.push_back(r.up[g.root()]);
  return project_1d(v);
}

struct RangeCorrelation {
  std::string leaf;
  int distance = 0;  // 0: the leaf's own incoming message
  std::string ancestor;
  double state_corr = 0.0;   // episode-averaged Pearson
  double action_corr = 0.0;
  double abs_state_corr = 0.0;
  double abs_action_corr = 0.0;
};

// For every leaf and every non-root node on its path to the root (distance d
// = number of edges from the leaf), correlates the 1-D projection of the
// message that node receives from its parent with the leaf's 1-D state
// projection and with the leaf's action.
inline std::vector<RangeCorrelation> message_range_correlation(const MessageLog& log,
                                                               const MorphologyGraph& g) {
  if (log.limbs != g.size()) throw DimensionMismatch("log was recorded on a different graph");
  const auto episodes = log.episodes();
  if (episodes.empty()) throw DegenerateData("empty message log");
  std::vector<RangeCorrelation> out;
  for (int leaf = 0; leaf < g.size(); ++leaf) {
    if (!g.is_leaf(leaf) || leaf == g.root()) continue;
    int node = leaf;
    for (int d = 0; node != g.root(); ++d, node = g.parent(node)) {
      RangeCorrelation rc{g.limb(leaf).name, d, g.limb(node).name};
      for (int e : episodes) {
        std::vector<Eigen::VectorXd> msgs, states;
        std::vector<double> actions;
        for (const auto& r : log.rows) {
          if (r.episode != e) continue;
          msgs.push_back(r.down[node]);
          const auto s = r.states[leaf].vector();
          states.push_back(Eigen::Map<const Eigen::VectorXd>(s.data(), LimbState::kDim));
          actions.push_back(r.actions[leaf]);
        }
        const auto mp = project_1d(msgs);
        const auto sp = project_1d(states);
        const double cs = pearson(mp, sp);
        const double ca = pearson(mp, actions);
        rc.state_corr += cs;
        rc.action_corr += ca;
        rc.abs_state_corr += std::abs(cs);
        rc.abs_action_corr += std::abs(ca);
      }
      const double n = static_cast<double>(episodes.size());
      rc.state_corr /= n;
      rc.action_corr /= n;
      rc.abs_state_corr /= n;
      rc.abs_action_corr /= n;
      out.push_back(rc);
    }
  }
  return out;
}

inline void write_correlation_csv(std::ostream& os, const std::vector<RangeCorrelation>& rows) {
  os << "# message projections: first principal component (stands in for 1-D t-SNE)\n";
  os << "leaf,distance,ancestor,state_corr,action_corr,abs_state_corr,abs_action_corr\n";
  os << std::setprecision(10);
  for (const auto& r : rows)
    os << r.leaf << ',' << r.distance << ',' << r.ancestor << ',' << r.state_corr << ','
       << r.action_corr << ',' << r.abs_state_corr << ',' << r.abs_action_corr << '\n';
}

}  // namespace smp
