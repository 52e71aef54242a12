#pragma once

// Morphology variants: every connected, root-containing subtree of a base
// graph, filtered by a feasibility predicate and split into train/held-out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "smp/kinematics.hpp"
#include "smp/morphology.hpp"

namespace smp {

using Feasibility = std::function<bool(const MorphologyGraph&)>;

inline bool always_feasible(const MorphologyGraph&) { return true; }

// At least two limbs and an actuated limb resting on the ground.
inline bool default_feasibility(const MorphologyGraph& g) {
  return g.size() >= 2 && actuated_limb_touches_ground_at_rest(g);
}

inline Feasibility min_limbs(int n) {
  return [n](const MorphologyGraph& g) { return g.size() >= n; };
}

struct VariantSet {
  MorphologyGraph base;
  std::vector<MorphologyGraph> variants;  // sorted by name
  std::vector<int> train_split;
  std::vector<int> heldout_split;

  std::vector<MorphologyGraph> train() const { return pick(train_split); }
  std::vector<MorphologyGraph> heldout() const { return pick(heldout_split); }

 private:
  std::vector<MorphologyGraph> pick(const std::vector<int>& idx) const {
    std::vector<MorphologyGraph> out;
    for (int i : idx) out.push_back(variants.at(i));
    return out;
  }
};

// Restriction of g to the limbs flagged in keep. keep must be closed under
// the message-tree parent relation and contain the root.
inline MorphologyGraph induced_subtree(const MorphologyGraph& g, const std::vector<bool>& keep,
                                       std::string name) {
  std::vector<LimbSpec> limbs;
  std::vector<std::string> parents;
  std::vector<std::string> body_parents;
  const bool body_root_kept = keep[g.body_root()];
  for (int i = 0; i < g.size(); ++i) {
    if (!keep[i]) continue;
    limbs.push_back(g.limb(i));
    parents.push_back(g.parent(i) == MorphologyGraph::kNone ? "" : g.limb(g.parent(i)).name);
    if (body_root_kept)
      body_parents.push_back(g.body_parent(i) == MorphologyGraph::kNone
                                 ? ""
                                 : g.limb(g.body_parent(i)).name);
  }
  return MorphologyGraph(std::move(name), std::move(limbs), parents, body_parents);
}

namespace detail {

// All root-containing connected subsets of the subtree at v, as limb masks.
inline std::vector<std::uint64_t> subtree_masks(const MorphologyGraph& g, int v) {
  std::vector<std::uint64_t> acc{std::uint64_t{1} << v};
  for (int c : g.children(v)) {
    const auto child = subtree_masks(g, c);
    std::vector<std::uint64_t> next;
    next.reserve(acc.size() * (child.size() + 1));
    for (auto m : acc) {
      next.push_back(m);
      for (auto cm : child) next.push_back(m | cm);
    }
    acc = std::move(next);
  }
  return acc;
}

inline std::string mask_name(const std::string& base, std::uint64_t mask, int width) {
  std::ostringstream os;
  os << base << "_";
  os << std::hex;
  os.width((width + 3) / 4);
  os.fill('0');
  os << mask;
  return os.str();
}

}  // namespace detail

inline VariantSet enumerate_variants(const MorphologyGraph& base, const Feasibility& feasible,
                                     double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0))
    throw ValidationError("heldout_fraction must lie in [0, 1)");
  if (base.size() > 64) throw ValidationError("variant enumeration supports at most 64 limbs");
  VariantSet set{base, {}, {}, {}};
  for (auto mask : detail::subtree_masks(base, base.root())) {
    std::vector<bool> keep(base.size());
    for (int i = 0; i < base.size(); ++i) keep[i] = (mask >> i) & 1U;
    auto v = induced_subtree(base, keep, detail::mask_name(base.name(), mask, base.size()));
    if (feasible(v)) set.variants.push_back(std::move(v));
  }
  if (set.variants.empty())
    throw EmptyVariantSet("feasibility rejected every subtree of '" + base.name() + "'");
  std::sort(set.variants.begin(), set.variants.end(),
            [](const auto& a, const auto& b) { return a.name() < b.name(); });

  const int n = static_cast<int>(set.variants.size());
  const int heldout = static_cast<int>(std::lround(heldout_fraction * n));
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(perm[i], perm[rng() % static_cast<std::uint64_t>(i + 1)]);
  set.heldout_split.assign(perm.begin(), perm.begin() + heldout);
  set.train_split.assign(perm.begin() + heldout, perm.end());
  std::sort(set.heldout_split.begin(), set.heldout_split.end());
  std::sort(set.train_split.begin(), set.train_split.end());
  return set;
}

inline nlohmann::json variant_set_to_json(const VariantSet& s) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : s.variants) variants.push_back(graph_to_json(v));
  return {{"name", s.base.name() + "++"},
          {"base", graph_to_json(s.base)},
          {"variants", std::move(variants)},
          {"split", {{"train", s.train_split}, {"heldout", s.heldout_split}}}};
}

inline VariantSet variant_set_from_json(const nlohmann::json& doc) {
  try {
    VariantSet s{graph_from_json(doc.at("base")), {}, {}, {}};
    for (const auto& v : doc.at("variants")) s.variants.push_back(graph_from_json(v));
    s.train_split = doc.at("split").at("train").get<std::vector<int>>();
    s.heldout_split = doc.at("split").at("heldout").get<std::vector<int>>();
    const int n = static_cast<int>(s.variants.size());
    std::vector<int> seen(n, 0);
    for (int i : s.train_split) {
      if (i < 0 || i >= n) throw ValidationError("split index out of range");
      ++seen[i];
    }
    for (int i : s.heldout_split) {
      if (i < 0 || i >= n) throw ValidationError("split index out of range");
      ++seen[i];
    }
    for (int c : seen)
      if (c != 1) throw ValidationError("train/heldout split must partition the variants");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
}

}  // namespace smp
