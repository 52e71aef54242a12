#pragma once

// Planar forward kinematics over a graph's kinematic (body) tree.
//
// Generalized coordinates q = [x, z, pitch, joint angles...]. The root's
// frame sits at (x, z); a limb with world angle phi points along
// (sin phi, cos phi), so phi = 0 is straight up and positive angles lean
// towards +x. Joint coordinates are ordered as the non-root limbs appear in
// the graph's limb list.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "smp/morphology.hpp"

namespace smp {

using Vec2 = Eigen::Vector2d;

inline Vec2 direction(double angle) { return {std::sin(angle), std::cos(angle)}; }
// d/dangle of direction(angle); also the rotation of v by -90 degrees.
inline Vec2 perp(const Vec2& v) { return {v.y(), -v.x()}; }

struct Pose {
  std::vector<double> angle;  // world angle per limb
  std::vector<Vec2> origin;   // limb frame origin (joint location)
  std::vector<Vec2> tip;
};

class PlanarModel {
 public:
  PlanarModel() = default;
  explicit PlanarModel(const MorphologyGraph& g) : graph_(&g) {
    const int n = g.size();
    root_ = g.body_root();
    coord_.assign(n, -1);
    int next = 3;
    for (int i = 0; i < n; ++i)
      if (i != root_) coord_[i] = next++;
    body_children_.assign(n, {});
    for (int i = 0; i < n; ++i)
      if (g.body_parent(i) != MorphologyGraph::kNone) body_children_[g.body_parent(i)].push_back(i);
    order_.push_back(root_);
    for (std::size_t h = 0; h < order_.size(); ++h)
      for (int c : body_children_[order_[h]]) order_.push_back(c);
  }

  const MorphologyGraph& graph() const { return *graph_; }
  int limb_count() const { return graph_->size(); }
  int dof() const { return 2 + limb_count(); }
  int root() const { return root_; }
  // Generalized-coordinate index of limb i's joint, -1 for the root.
  int coord(int i) const { return coord_[i]; }
  // Root first, parents before children along the body tree.
  const std::vector<int>& order() const { return order_; }
  const std::vector<int>& body_children(int i) const { return body_children_[i]; }

  Pose pose(std::span<const double> q) const {
    const auto& g = *graph_;
    const int n = limb_count();
    Pose p;
    p.angle.assign(n, 0.0);
    p.origin.assign(n, Vec2::Zero());
    p.tip.assign(n, Vec2::Zero());
    for (int i : order_) {
      const auto& l = g.limb(i);
      if (i == root_) {
        p.angle[i] = q[2];
        p.origin[i] = Vec2(q[0], q[1]);
      } else {
        const int par = g.body_parent(i);
        p.angle[i] = p.angle[par] + *l.angle_offset + q[coord_[i]];
        p.origin[i] = *l.attach == Attach::kTip ? p.tip[par] : p.origin[par];
      }
      p.tip[i] = p.origin[i] + l.length * direction(p.angle[i]);
    }
    return p;
  }

  // Joint angles at zero (clamped into range), upright root, lowest point on
  // the ground plane.
  std::vector<double> rest_q() const {
    const auto& g = *graph_;
    std::vector<double> q(dof(), 0.0);
    for (int i = 0; i < limb_count(); ++i)
      if (i != root_) q[coord_[i]] = std::clamp(0.0, g.limb(i).joint_low, g.limb(i).joint_high);
    const Pose p = pose(q);
    q[1] = -lowest_point(p);
    return q;
  }

  static double lowest_point(const Pose& p) {
    double zmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p.origin.size(); ++i)
      zmin = std::min({zmin, p.origin[i].y(), p.tip[i].y()});
    return zmin;
  }

 private:
  const MorphologyGraph* graph_ = nullptr;
  int root_ = 0;
  std::vector<int> coord_;
  std::vector<int> order_;
  std::vector<std::vector<int>> body_children_;
};

// True when some actuated, non-root limb touches the ground in the rest pose.
inline bool actuated_limb_touches_ground_at_rest(const MorphologyGraph& g) {
  const PlanarModel model(g);
  const auto q = model.rest_q();
  const Pose p = model.pose(q);
  const double zmin = PlanarModel::lowest_point(p);
  constexpr double kTol = 1e-9;
  for (int i = 0; i < g.size(); ++i) {
    if (i == model.root() || !g.limb(i).is_actuated) continue;
    if (p.tip[i].y() - zmin < kTol || p.origin[i].y() - zmin < kTol) return true;
  }
  return false;
}

}  // namespace smp
