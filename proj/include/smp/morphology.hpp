#pragma once

// Agent morphologies as rooted limb trees.
//
// A graph carries two parent maps over the same undirected edge set:
//  - parent():      the message-passing tree (rooted at root()).
//  - body_parent(): the kinematic tree the simulator integrates (rooted at
//                   body_root()). The two only differ after reroot().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smp/errors.hpp"

namespace smp {

enum class Attach { kBase, kTip };

struct LimbSpec {
  std::string name;
  double length = 0.0;  // m
  double mass = 0.0;    // kg
  bool is_actuated = true;
  double joint_low = -1.0;  // rad
  double joint_high = 1.0;  // rad
  double gear = 1.0;
  int child_order_index = 0;
  // Where this limb hangs off its body parent and its rest angle relative to
  // the parent's direction. Unset values take the defaults described in
  // MorphologyGraph's constructor.
  std::optional<Attach> attach;
  std::optional<double> angle_offset;
};

class MorphologyGraph {
 public:
  static constexpr int kNone = -1;

  MorphologyGraph() = default;

  // parent_names[i] empty marks the root. body_parent_names, when given,
  // describes the kinematic tree; otherwise it equals the message tree.
  //
  // Attachment defaults: a child of the body root hangs from the root's base
  // pointing opposite to it (offset pi); every other limb continues from its
  // parent's tip (offset 0).
  MorphologyGraph(std::string name, std::vector<LimbSpec> limbs,
                  const std::vector<std::string>& parent_names,
                  const std::vector<std::string>& body_parent_names = {})
      : name_(std::move(name)), limbs_(std::move(limbs)) {
    const int n = static_cast<int>(limbs_.size());
    if (n == 0) throw ValidationError("morphology '" + name_ + "' has no limbs");
    if (static_cast<int>(parent_names.size()) != n)
      throw ValidationError("parent list size does not match limb count");
    for (int i = 0; i < n; ++i) {
      const auto& l = limbs_[i];
      if (l.name.empty()) throw ValidationError("limb with empty name");
      if (!index_.emplace(l.name, i).second)
        throw ValidationError("duplicate limb name '" + l.name + "'");
    }
    parent_ = resolve_parents(parent_names);
    root_ = find_root(parent_, "parent");
    if (body_parent_names.empty()) {
      body_parent_ = parent_;
    } else {
      if (static_cast<int>(body_parent_names.size()) != n)
        throw ValidationError("body parent list size does not match limb count");
      body_parent_ = resolve_parents(body_parent_names);
      check_same_edges();
    }
    body_root_ = find_root(body_parent_, "body parent");

    for (int i = 0; i < n; ++i) {
      auto& l = limbs_[i];
      if (!(l.length > 0.0) || !std::isfinite(l.length))
        throw ValidationError("limb '" + l.name + "' length must be > 0");
      if (!(l.mass > 0.0) || !std::isfinite(l.mass))
        throw ValidationError("limb '" + l.name + "' mass must be > 0");
      if (!(l.gear > 0.0) || !std::isfinite(l.gear))
        throw ValidationError("limb '" + l.name + "' gear must be > 0");
      if (!(l.joint_low < l.joint_high))
        throw ValidationError("limb '" + l.name + "' requires joint_low < joint_high");
      if (!l.is_actuated && i != body_root_)
        throw ValidationError("limb '" + l.name + "' is unactuated but is not the root");
      const bool under_root = body_parent_[i] == body_root_;
      if (!l.attach) l.attach = under_root ? Attach::kBase : Attach::kTip;
      if (!l.angle_offset) l.angle_offset = under_root ? std::numbers::pi : 0.0;
    }
    build_children();
  }

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  int size() const { return static_cast<int>(limbs_.size()); }
  const std::vector<LimbSpec>& limbs() const { return limbs_; }
  const LimbSpec& limb(int i) const { return limbs_.at(i); }

  int root() const { return root_; }
  int parent(int i) const { return parent_.at(i); }
  const std::vector<int>& children(int i) const { return children_.at(i); }
  // Position of i among its parent's children; the root has slot 0.
  int slot(int i) const { return slot_.at(i); }
  int depth(int i) const { return depth_.at(i); }
  int max_depth() const { return *std::max_element(depth_.begin(), depth_.end()); }
  bool is_leaf(int i) const { return children_.at(i).empty(); }

  int body_root() const { return body_root_; }
  int body_parent(int i) const { return body_parent_.at(i); }

  int index_of(const std::string& limb_name) const {
    auto it = index_.find(limb_name);
    if (it == index_.end())
      throw UnknownLimb("'" + limb_name + "' in morphology '" + name_ + "'");
    return it->second;
  }
  bool contains(const std::string& limb_name) const { return index_.count(limb_name) > 0; }

  int max_branching() const {
    std::size_t m = 0;
    for (const auto& c : children_) m = std::max(m, c.size());
    return static_cast<int>(m);
  }

  int actuated_count() const {
    return static_cast<int>(std::count_if(limbs_.begin(), limbs_.end(),
                                          [](const LimbSpec& l) { return l.is_actuated; }));
  }

  std::vector<std::string> parent_names() const { return names_of(parent_); }
  std::vector<std::string> body_parent_names() const { return names_of(body_parent_); }

  // Undirected edges as (min, max) limb-index pairs, sorted.
  std::vector<std::pair<int, int>> undirected_edges() const {
    std::vector<std::pair<int, int>> e;
    for (int i = 0; i < size(); ++i)
      if (parent_[i] != kNone) e.emplace_back(std::min(i, parent_[i]), std::max(i, parent_[i]));
    std::sort(e.begin(), e.end());
    return e;
  }

  friend bool operator==(const MorphologyGraph& a, const MorphologyGraph& b) {
    if (a.name_ != b.name_ || a.parent_ != b.parent_ || a.body_parent_ != b.body_parent_ ||
        a.size() != b.size())
      return false;
    for (int i = 0; i < a.size(); ++i) {
      const auto& x = a.limbs_[i];
      const auto& y = b.limbs_[i];
      if (x.name != y.name || x.length != y.length || x.mass != y.mass ||
          x.is_actuated != y.is_actuated || x.joint_low != y.joint_low ||
          x.joint_high != y.joint_high || x.gear != y.gear ||
          x.child_order_index != y.child_order_index || x.attach != y.attach ||
          x.angle_offset != y.angle_offset)
        return false;
    }
    return true;
  }

 private:
  std::vector<int> resolve_parents(const std::vector<std::string>& names) const {
    std::vector<int> p(names.size(), kNone);
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i].empty()) continue;
      auto it = index_.find(names[i]);
      if (it == index_.end())
        throw ValidationError("limb '" + limbs_[i].name + "' has unknown parent '" + names[i] +
                              "' (orphan limb)");
      if (it->second == static_cast<int>(i))
        throw ValidationError("cycle: limb '" + names[i] + "' is its own parent");
      p[i] = it->second;
    }
    return p;
  }

  int find_root(const std::vector<int>& p, const char* what) const {
    const int n = size();
    // Walking up more than n steps from any limb means a cycle.
    for (int i = 0; i < n; ++i) {
      int v = i;
      for (int steps = 0; v != kNone; ++steps) {
        if (steps > n)
          throw ValidationError(std::string("cycle in ") + what + " map through limb '" +
                                limbs_[i].name + "'");
        v = p[v];
      }
    }
    int root = kNone;
    for (int i = 0; i < n; ++i) {
      if (p[i] != kNone) continue;
      if (root != kNone)
        throw ValidationError(std::string("disconnected ") + what + " map: both '" +
                              limbs_[root].name + "' and '" + limbs_[i].name + "' are roots");
      root = i;
    }
    return root;
  }

  void check_same_edges() const {
    auto edges = [&](const std::vector<int>& p) {
      std::vector<std::pair<int, int>> e;
      for (int i = 0; i < size(); ++i)
        if (p[i] != kNone) e.emplace_back(std::min(i, p[i]), std::max(i, p[i]));
      std::sort(e.begin(), e.end());
      return e;
    };
    if (edges(parent_) != edges(body_parent_))
      throw ValidationError("body tree and message tree must share the same edges");
  }

  void build_children() {
    const int n = size();
    children_.assign(n, {});
    for (int i = 0; i < n; ++i)
      if (parent_[i] != kNone) children_[parent_[i]].push_back(i);
    slot_.assign(n, 0);
    for (auto& c : children_) {
      std::sort(c.begin(), c.end(), [&](int a, int b) {
        const auto& la = limbs_[a];
        const auto& lb = limbs_[b];
        if (la.child_order_index != lb.child_order_index)
          return la.child_order_index < lb.child_order_index;
        return la.name < lb.name;
      });
      for (std::size_t k = 0; k < c.size(); ++k) slot_[c[k]] = static_cast<int>(k);
    }
    depth_.assign(n, 0);
    std::vector<int> stack{root_};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int c : children_[v]) {
        depth_[c] = depth_[v] + 1;
        stack.push_back(c);
      }
    }
  }

  std::vector<std::string> names_of(const std::vector<int>& p) const {
    std::vector<std::string> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] != kNone) out[i] = limbs_[p[i]].name;
    return out;
  }

  std::string name_;
  std::vector<LimbSpec> limbs_;
  std::map<std::string, int> index_;
  std::vector<int> parent_;
  std::vector<int> body_parent_;
  std::vector<std::vector<int>> children_;
  std::vector<int> slot_;
  std::vector<int> depth_;
  int root_ = kNone;
  int body_root_ = kNone;
};

// Root first; each parent before its children; siblings in slot order.
inline std::vector<int> topological_order(const MorphologyGraph& g) {
  std::vector<int> order;
  order.reserve(g.size());
  order.push_back(g.root());
  for (std::size_t head = 0; head < order.size(); ++head)
    for (int c : g.children(order[head])) order.push_back(c);
  return order;
}

inline std::vector<std::string> topological_ordering(const MorphologyGraph& g) {
  std::vector<std::string> names;
  for (int i : topological_order(g)) names.push_back(g.limb(i).name);
  return names;
}

// Same undirected edges, message tree rooted at new_root. Existing children
// keep their relative order and the former parent is appended last. The
// kinematic tree is unchanged.
inline MorphologyGraph reroot(const MorphologyGraph& g, const std::string& new_root) {
  const int r = g.index_of(new_root);
  if (r == g.root()) return g;
  const int n = g.size();
  std::vector<std::vector<int>> adj(n);
  for (int i = 0; i < n; ++i) {
    adj[i] = g.children(i);
    if (g.parent(i) != MorphologyGraph::kNone) adj[i].push_back(g.parent(i));
  }
  std::vector<int> parent(n, MorphologyGraph::kNone);
  std::vector<LimbSpec> limbs = g.limbs();
  std::vector<bool> seen(n, false);
  std::vector<int> queue{r};
  seen[r] = true;
  limbs[r].child_order_index = 0;
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const int v = queue[head];
    int rank = 0;
    for (int u : adj[v]) {
      if (seen[u]) continue;
      seen[u] = true;
      parent[u] = v;
      limbs[u].child_order_index = rank++;
      queue.push_back(u);
    }
  }
  std::vector<std::string> parent_names(n);
  for (int i = 0; i < n; ++i)
    if (parent[i] != MorphologyGraph::kNone) parent_names[i] = g.limb(parent[i]).name;
  return MorphologyGraph(g.name() + "@" + new_root, std::move(limbs), parent_names,
                         g.body_parent_names());
}

// Largest branching factor over every node of every graph.
inline int max_children(std::span<const MorphologyGraph> graphs) {
  int m = 0;
  for (const auto& g : graphs) m = std::max(m, g.max_branching());
  return m;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json graph_to_json(const MorphologyGraph& g) {
  nlohmann::json limbs = nlohmann::json::array();
  const auto parents = g.parent_names();
  const auto body_parents = g.body_parent_names();
  for (int i = 0; i < g.size(); ++i) {
    const auto& l = g.limb(i);
    nlohmann::json j = {{"name", l.name},
                        {"parent", parents[i].empty() ? nlohmann::json(nullptr)
                                                      : nlohmann::json(parents[i])},
                        {"length", l.length},
                        {"mass", l.mass},
                        {"is_actuated", l.is_actuated},
                        {"joint_low", l.joint_low},
                        {"joint_high", l.joint_high},
                        {"gear", l.gear},
                        {"child_order_index", l.child_order_index},
                        {"attach", *l.attach == Attach::kTip ? "tip" : "base"},
                        {"angle_offset", *l.angle_offset}};
    if (body_parents[i] != parents[i])
      j["body_parent"] = body_parents[i].empty() ? nlohmann::json(nullptr)
                                                 : nlohmann::json(body_parents[i]);
    limbs.push_back(std::move(j));
  }
  return {{"name", g.name()}, {"root", g.limb(g.root()).name}, {"limbs", std::move(limbs)}};
}

inline MorphologyGraph graph_from_json(const nlohmann::json& doc) {
  try {
    if (!doc.is_object()) throw ParseError("morphology document must be an object");
    const auto name = doc.at("name").get<std::string>();
    const auto root = doc.at("root").get<std::string>();
    const auto& jl = doc.at("limbs");
    if (!jl.is_array()) throw ParseError("'limbs' must be an array");
    std::vector<LimbSpec> limbs;
    std::vector<std::string> parents;
    std::vector<std::string> body_parents;
    bool has_body = false;
    for (const auto& j : jl) {
      LimbSpec l;
      l.name = j.at("name").get<std::string>();
      l.length = j.at("length").get<double>();
      l.mass = j.at("mass").get<double>();
      l.is_actuated = j.at("is_actuated").get<bool>();
      l.joint_low = j.at("joint_low").get<double>();
      l.joint_high = j.at("joint_high").get<double>();
      l.gear = j.at("gear").get<double>();
      l.child_order_index = j.at("child_order_index").get<int>();
      if (j.contains("attach")) {
        const auto a = j.at("attach").get<std::string>();
        if (a == "tip") l.attach = Attach::kTip;
        else if (a == "base") l.attach = Attach::kBase;
        else throw ParseError("attach must be 'tip' or 'base', got '" + a + "'");
      }
      if (j.contains("angle_offset")) l.angle_offset = j.at("angle_offset").get<double>();
      const auto& p = j.at("parent");
      parents.push_back(p.is_null() ? std::string() : p.get<std::string>());
      if (j.contains("body_parent")) {
        has_body = true;
        const auto& bp = j.at("body_parent");
        body_parents.push_back(bp.is_null() ? std::string() : bp.get<std::string>());
      } else {
        body_parents.push_back(parents.back());
      }
      limbs.push_back(std::move(l));
    }
    MorphologyGraph g(name, std::move(limbs), parents, has_body ? body_parents
                                                                : std::vector<std::string>{});
    if (g.limb(g.root()).name != root)
      throw ValidationError("declared root '" + root + "' is not the parentless limb '" +
                            g.limb(g.root()).name + "'");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
}

inline MorphologyGraph parse_morphology(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
  return graph_from_json(doc);
}

}  // namespace smp
