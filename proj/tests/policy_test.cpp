#include <gtest/gtest.h>

#include <cmath>

#include "reference.hpp"
#include "test_util.hpp"

using namespace smp;
using smp::testing::chain;
using smp::testing::from_parents;
using smp::testing::input_sensitivity;
using smp::testing::load_graph;
using smp::testing::random_states;
using smp::testing::reference_forward;

namespace {

constexpr Scheme kSchemes[] = {Scheme::kNone, Scheme::kBottomUp, Scheme::kTopDown, Scheme::kBothWay};

ModularNet make_net(Scheme s, int c_max, std::uint64_t seed, int hidden = 16) {
  Rng rng(seed);
  ModularConfig c;
  c.scheme = s;
  c.c_max = c_max;
  c.hidden = hidden;
  return ModularNet(c, rng);
}

double max_diff(const PolicyOutput& a, const PolicyOutput& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.actions.size(); ++i) d = std::max(d, std::abs(a.actions[i] - b.actions[i]));
  for (std::size_t i = 0; i < a.up_messages.size(); ++i)
    d = std::max(d, (a.up_messages[i] - b.up_messages[i]).cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < a.down_messages.size(); ++i)
    d = std::max(d, (a.down_messages[i] - b.down_messages[i]).cwiseAbs().maxCoeff());
  return d;
}

}  // namespace

TEST(NormalizeMessage, Cases) {
  Message unit = Message::Zero(32);
  unit(3) = 1.0;
  EXPECT_EQ(normalize_message(unit), unit);
  EXPECT_EQ(normalize_message(Message::Zero(32)), Message::Zero(32));
  Rng rng(1);
  for (int k = 0; k < 100; ++k) {
    Message m(32);
    for (int i = 0; i < 32; ++i) m(i) = rng.uniform(-5.0, 5.0);
    EXPECT_NEAR(normalize_message(m).norm(), 1.0, 1e-12);
  }
}

TEST(PadChildMessages, Cases) {
  const auto empty = pad_child_messages({}, 2);
  ASSERT_EQ(empty.size(), 2u);
  for (const auto& m : empty) EXPECT_EQ(m, Message::Zero(32));
  Message m = Message::Ones(32);
  const auto one = pad_child_messages({m}, 2);
  EXPECT_EQ(one[0], m);
  EXPECT_EQ(one[1], Message::Zero(32));
  EXPECT_THROW(pad_child_messages({m, m, m}, 2), TooManyChildren);
}

TEST(ModularNet, LayoutPerScheme) {
  const auto none = make_net(Scheme::kNone, 2, 0);
  EXPECT_EQ(none.up_module().in_dim(), 17);
  EXPECT_EQ(none.up_module().out_dim(), 1);
  EXPECT_TRUE(none.down_module().empty());
  const auto bu = make_net(Scheme::kBottomUp, 2, 0);
  EXPECT_EQ(bu.up_module().in_dim(), 17 + 64);
  EXPECT_EQ(bu.up_module().out_dim(), 33);
  const auto td = make_net(Scheme::kTopDown, 2, 0);
  EXPECT_EQ(td.up_module().in_dim(), 17 + 32);
  EXPECT_EQ(td.up_module().out_dim(), 1 + 64);
  const auto bw = make_net(Scheme::kBothWay, 2, 0);
  EXPECT_EQ(bw.up_module().in_dim(), 17 + 64);
  EXPECT_EQ(bw.up_module().out_dim(), 32);
  EXPECT_EQ(bw.down_module().in_dim(), 64);
  EXPECT_EQ(bw.down_module().out_dim(), 1 + 64);
  EXPECT_EQ(bw.up_module().layers(), 4u);
}

TEST(ModularNet, MatchesReferenceInterpreter) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto g = smp::testing::random_tree(1 + static_cast<int>(rng.index(7)), rng);
    const auto s = random_states(g.size(), rng);
    for (Scheme scheme : kSchemes) {
      const auto net = make_net(scheme, std::max(1, g.max_branching()), 100 + t);
      const auto ref = reference_forward(net, g, s);
      for (Batching b : {Batching::kDepth, Batching::kSequential}) {
        const std::vector<std::vector<LimbState>> ss{s};
        const std::vector<MorphologyGraph> gs{g};
        const auto out = depth_batched_forward(ss, gs, net, b)[0];
        for (int i = 0; i < g.size(); ++i) {
          EXPECT_NEAR(out.actions[i], ref.actions[i], 1e-12);
          if (scheme == Scheme::kBottomUp || scheme == Scheme::kBothWay)
            EXPECT_LT((out.up_messages[i] - ref.up[i].transpose()).cwiseAbs().maxCoeff(), 1e-12);
          if (scheme == Scheme::kTopDown || scheme == Scheme::kBothWay)
            EXPECT_LT((out.down_messages[i] - ref.down_in[i].transpose()).cwiseAbs().maxCoeff(), 1e-12);
        }
      }
    }
  }
}

TEST(DepthBatchedForward, BatchOfOneEqualsActBothWay) {
  const auto g = load_graph("walker.json");
  Rng rng(2);
  const auto s = random_states(7, rng);
  const auto net = make_net(Scheme::kBothWay, 2, 3);
  const std::vector<std::vector<LimbState>> ss{s};
  const std::vector<MorphologyGraph> gs{g};
  EXPECT_EQ(max_diff(depth_batched_forward(ss, gs, net)[0], act_both_way(s, g, net)), 0.0);
}

TEST(DepthBatchedForward, WalkerVariantsMatchSequentialLoop) {
  const auto set = enumerate_variants(load_graph("walker.json"), always_feasible, 0.0, 0);
  std::vector<MorphologyGraph> gs(set.variants.begin(), set.variants.begin() + 10);
  Rng rng(4);
  std::vector<std::vector<LimbState>> ss;
  for (const auto& g : gs) ss.push_back(random_states(g.size(), rng));
  for (Scheme scheme : kSchemes) {
    const auto net = make_net(scheme, 2, 5, 32);
    const auto batched = depth_batched_forward(ss, gs, net);
    for (std::size_t a = 0; a < gs.size(); ++a)
      EXPECT_LT(max_diff(batched[a], act(ss[a], gs[a], net)), 1e-10);
  }
}

TEST(DepthBatchedForward, MixedSizesInOneBatch) {
  const auto walker = load_graph("walker.json");
  const auto hopper = enumerate_variants(load_graph("hopper.json"), default_feasibility, 0.0, 0);
  std::vector<MorphologyGraph> gs{hopper.variants[0], walker, hopper.variants[0], walker};
  ASSERT_EQ(gs[0].size(), 2);
  Rng rng(6);
  std::vector<std::vector<LimbState>> ss;
  for (const auto& g : gs) ss.push_back(random_states(g.size(), rng));
  const auto net = make_net(Scheme::kBothWay, 2, 7);
  const auto batched = depth_batched_forward(ss, gs, net);
  for (std::size_t a = 0; a < gs.size(); ++a) {
    ASSERT_EQ(static_cast<int>(batched[a].actions.size()), gs[a].size());
    EXPECT_LT(max_diff(batched[a], act(ss[a], gs[a], net)), 1e-10);
  }
}

TEST(ActNoMessage, SharingAndIndependence) {
  const auto g = load_graph("walker.json");
  const auto net = make_net(Scheme::kNone, 2, 8);
  Rng rng(9);
  auto s = random_states(7, rng);
  s[3] = s[5];
  const auto out = act_no_message(s, g, net);
  EXPECT_EQ(out.actions[3], out.actions[5]);
  EXPECT_TRUE(out.up_messages.empty());
  for (int j = 0; j < 7; ++j) {
    auto p = s;
    p[j].position[0] += 0.5;
    const auto o2 = act_no_message(p, g, net);
    for (int i = 0; i < 7; ++i)
      if (i != j) EXPECT_EQ(o2.actions[i], out.actions[i]);
  }
}

TEST(ActNoMessage, PermutingLimbsPermutesActions) {
  const auto g = load_graph("walker.json");
  const auto net = make_net(Scheme::kNone, 2, 10);
  Rng rng(11);
  const auto s = random_states(7, rng);
  auto rev = s;
  std::reverse(rev.begin(), rev.end());
  const auto a = act_no_message(s, g, net).actions;
  const auto b = act_no_message(rev, g, net).actions;
  for (int i = 0; i < 7; ++i) EXPECT_EQ(a[i], b[6 - i]);
}

TEST(ActBottomUp, DirectionalSensitivity) {
  const auto g = chain(3);
  Rng rng(12);
  for (int t = 0; t < 10; ++t) {
    const auto net = make_net(Scheme::kBottomUp, 1, 200 + t);
    const auto s = random_states(3, rng);
    EXPECT_GT(input_sensitivity(net, g, s, 0, 2), 1e-8);
    EXPECT_EQ(input_sensitivity(net, g, s, 2, 0), 0.0);
  }
}

TEST(ActBottomUp, LeafSlotsAreZeroAndSingleLimbDegenerates) {
  const auto g = chain(1);
  const auto net = make_net(Scheme::kBottomUp, 2, 13);
  Rng rng(14);
  const auto s = random_states(1, rng);
  Eigen::RowVectorXd in = Eigen::RowVectorXd::Zero(17 + 64);
  const auto v = s[0].vector();
  for (int k = 0; k < 17; ++k) in(k) = v[k];
  const double expected = std::tanh(smp::testing::ref_mlp(net.up_module(), in)(0));
  EXPECT_EQ(act_bottom_up(s, g, net).actions[0], expected);
}

TEST(ActTopDown, SlotsBreakSymmetry) {
  const auto g = from_parents({-1, 0, 0});
  const auto net = make_net(Scheme::kTopDown, 2, 15);
  Rng rng(16);
  auto s = random_states(3, rng);
  s[2] = s[1];
  const auto out = act_top_down(s, g, net);
  EXPECT_NE(out.actions[1], out.actions[2]);
}

TEST(ActTopDown, DirectionalSensitivity) {
  const auto g = chain(3);
  Rng rng(17);
  for (int t = 0; t < 10; ++t) {
    const auto net = make_net(Scheme::kTopDown, 1, 300 + t);
    const auto s = random_states(3, rng);
    EXPECT_EQ(input_sensitivity(net, g, s, 0, 2), 0.0);
    EXPECT_GT(input_sensitivity(net, g, s, 2, 0), 1e-8);
  }
}

TEST(ActTopDown, UnusedSlotsWithLargeCmax) {
  const auto g = chain(2);
  const auto net = make_net(Scheme::kTopDown, 3, 18);
  Rng rng(19);
  const auto s = random_states(2, rng);
  const auto out = act_top_down(s, g, net);
  EXPECT_EQ(out.actions.size(), 2u);
  const auto ref = reference_forward(net, g, s);
  EXPECT_NEAR(out.actions[1], ref.actions[1], 1e-12);
}

TEST(ActBothWay, FullRangeInformationFlow) {
  const auto g = chain(4);
  Rng rng(20);
  for (int t = 0; t < 10; ++t) {
    const auto net = make_net(Scheme::kBothWay, 1, 400 + t);
    const auto s = random_states(4, rng);
    // Magnitude shrinks with depth at init; only the existence of a path is tested here.
    EXPECT_GT(input_sensitivity(net, g, s, 0, 3), 0.0);
    EXPECT_GT(input_sensitivity(net, g, s, 3, 0), 0.0);
  }
}

TEST(ActBothWay, SingleLimbSchedule) {
  const auto g = chain(1);
  const auto net = make_net(Scheme::kBothWay, 1, 21);
  Rng rng(22);
  const auto s = random_states(1, rng);
  Eigen::RowVectorXd in = Eigen::RowVectorXd::Zero(17 + 32);
  const auto v = s[0].vector();
  for (int k = 0; k < 17; ++k) in(k) = v[k];
  const Eigen::RowVectorXd up = smp::testing::ref_normalize(smp::testing::ref_mlp(net.up_module(), in));
  Eigen::RowVectorXd din(64);
  din << up, Eigen::RowVectorXd::Zero(32);
  const double expected = std::tanh(smp::testing::ref_mlp(net.down_module(), din)(0));
  const auto out = act_both_way(s, g, net);
  EXPECT_NEAR(out.actions[0], expected, 1e-15);
  EXPECT_EQ(out.down_messages[0], Message::Zero(32));
  EXPECT_NEAR(out.up_messages[0].norm(), 1.0, 1e-12);
}

TEST(ActBothWay, ActionsBoundedAndMessagesNormalized) {
  const auto g = load_graph("humanoid.json");
  Rng rng(23);
  const auto net = make_net(Scheme::kBothWay, g.max_branching(), 24);
  for (int t = 0; t < 20; ++t) {
    auto s = random_states(g.size(), rng);
    for (auto& x : s) x.linear_velocity[0] *= 100.0;
    const auto out = act_both_way(s, g, net);
    for (double a : out.actions) {
      EXPECT_GE(a, -1.0);
      EXPECT_LE(a, 1.0);
    }
    for (const auto& m : out.up_messages) EXPECT_NEAR(m.norm(), 1.0, 1e-12);
    for (int i = 0; i < g.size(); ++i)
      if (i != g.root()) EXPECT_NEAR(out.down_messages[i].norm(), 1.0, 1e-12);
  }
}

TEST(Policy, EveryEnumeratedVariantRuns) {
  for (const char* f : {"hopper.json", "walker.json", "humanoid.json"}) {
    const auto set = enumerate_variants(load_graph(f), always_feasible, 0.0, 0);
    const int c = std::max(1, max_children(set.variants));
    for (Scheme scheme : kSchemes) {
      const auto net = make_net(scheme, c, 25);
      for (const auto& v : set.variants) {
        const auto obs = reset(v, EnvConfig{}, 0).second;
        EXPECT_EQ(static_cast<int>(act(obs, v, net).actions.size()), v.size());
      }
    }
  }
}

TEST(Policy, Errors) {
  const auto g = load_graph("walker.json");
  Rng rng(26);
  const auto s = random_states(7, rng);
  const auto bw = make_net(Scheme::kBothWay, 2, 27);
  EXPECT_THROW(act_no_message(s, g, bw), SchemeMismatch);
  EXPECT_THROW(act_both_way(std::vector<LimbState>(s.begin(), s.begin() + 3), g, bw),
               DimensionMismatch);
  const auto narrow = make_net(Scheme::kBothWay, 1, 28);
  EXPECT_THROW(act_both_way(s, g, narrow), TooManyChildren);
  // Without messages there are no slots to overflow.
  EXPECT_NO_THROW(act_no_message(s, g, make_net(Scheme::kNone, 1, 29)));
}

TEST(Policy, ParameterCountIndependentOfAgentCount) {
  const auto net = make_net(Scheme::kBothWay, 2, 30, 64);
  const std::size_t n = net.parameter_count();
  // One parameter list whatever the batch: forwarding 1 or 20 agents reads the same tensors.
  const auto g = load_graph("walker.json");
  Rng rng(31);
  for (int agents : {1, 20}) {
    std::vector<std::vector<LimbState>> ss;
    std::vector<MorphologyGraph> gs;
    for (int a = 0; a < agents; ++a) {
      ss.push_back(random_states(7, rng));
      gs.push_back(g);
    }
    depth_batched_forward(ss, gs, net);
    EXPECT_EQ(net.parameter_count(), n);
  }
  const std::size_t up = (81 * 64 + 64) + 2 * (64 * 64 + 64) + (64 * 32 + 32);
  const std::size_t down = (64 * 64 + 64) + 2 * (64 * 64 + 64) + (64 * 65 + 65);
  EXPECT_EQ(n, up + down);
}

TEST(Policy, SidecarRoundTripAndLoad) {
  const auto net = make_net(Scheme::kTopDown, 3, 32);
  const auto cfg = modular_config_from_sidecar(modular_sidecar(net.config()));
  EXPECT_EQ(cfg.scheme, Scheme::kTopDown);
  EXPECT_EQ(cfg.c_max, 3);
  EXPECT_EQ(cfg.hidden, 16);
  Rng rng(0);
  ModularNet other(cfg, rng);
  other.load(net.named("x."), "x.");
  const auto g = chain(3);
  Rng r2(1);
  const auto s = random_states(3, r2);
  EXPECT_EQ(act(s, g, other).actions, act(s, g, net).actions);
  EXPECT_THROW(other.load(net.named("x."), "y."), CheckpointError);
}
