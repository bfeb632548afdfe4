#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "opt/checks/oracles.hpp"
#include "opt/checks/suites.hpp"
#include "opt/env.hpp"
#include "opt/mixer.hpp"
#include "opt/trainer.hpp"

using namespace opt;

namespace {

MixerConfig small_config(int max_agents = 3) {
  MixerConfig c;
  c.opt.d_in = env::kStateFeatures;
  c.opt.d_x = 6;
  c.opt.n_prototypes = 2;
  c.opt.n_layers = 2;
  c.opt.d_ff = 5;
  c.max_agents = max_agents;
  c.d_mix = 4;
  return c;
}

struct Mixer {
  MixerConfig cfg;
  ParamSet params;
  MixerLayout layout;
  Mixer(MixerConfig c, std::uint64_t seed) : cfg(c) {
    Rng rng(seed);
    layout = add_mixer(params, cfg, rng);
  }
};

env::GlobalState sample_state(std::uint64_t seed) {
  env::PredatorPrey world(env::ScenarioFamily{}, seed);
  world.reset(env::Split::train);
  return world.state();
}

void zero_all(ParamSet& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps.value(static_cast<int>(i)).setZero();
}

}  // namespace

TEST(Mix, OnlyFinalBiasGivesConstant) {
  Mixer m(small_config(), 1);
  zero_all(m.params);
  m.params.value(m.layout.b2.b)(0, 0) = 2.5;
  const env::GlobalState s = sample_state(2);
  for (const std::vector<double>& qs : {std::vector<double>{0.0, 0.0}, {3.0, -7.0, 11.0}, {-100.0}}) {
    EXPECT_DOUBLE_EQ(mix(qs, s, m.params, m.layout, m.cfg), 2.5);
  }
}

TEST(Mix, SingleAgentIsAffine) {
  Mixer m(small_config(1), 3);
  const env::GlobalState s = sample_state(4);
  // Pin the hypernetwork: W1 = 1, b1 = 0, W2 = 1, b2 = 0 regardless of the state.
  zero_all(m.params);
  m.params.value(m.layout.w1.b).setConstant(1.0);
  m.params.value(m.layout.w2.b).setConstant(1.0);
  auto q_tot = [&](double q) {
    const double v[] = {q};
    return mix(v, s, m.params, m.layout, m.cfg);
  };
  // elu is the identity for positive inputs, so the mix is d_mix * q there.
  for (double q : {0.5, 1.0, 2.0, 7.5}) EXPECT_NEAR(q_tot(q), m.cfg.d_mix * q, 1e-12);
  const double a = q_tot(1.0), b = q_tot(2.0), c = q_tot(3.0);
  EXPECT_NEAR(c - b, b - a, 1e-12);
}

TEST(Mix, IncreasingAnAgentValueNeverDecreasesTotal) {
  Rng rng(5);
  std::normal_distribution<double> d(0.0, 3.0);
  for (int k = 0; k < 100; ++k) {
    Mixer m(small_config(), 100 + static_cast<std::uint64_t>(k));
    const env::GlobalState s = sample_state(200 + static_cast<std::uint64_t>(k));
    std::vector<double> qs{d(rng), d(rng), d(rng)};
    const double base = mix(qs, s, m.params, m.layout, m.cfg);
    for (std::size_t a = 0; a < qs.size(); ++a) {
      std::vector<double> up = qs;
      up[a] += 1.0;
      EXPECT_GE(mix(up, s, m.params, m.layout, m.cfg), base - 1e-12);
    }
  }
}

TEST(Mix, MissingAgentsEqualExplicitZeros) {
  Mixer m(small_config(), 6);
  const env::GlobalState s = sample_state(7);
  const std::vector<double> two{1.5, -0.5};
  const std::vector<double> padded{1.5, -0.5, 0.0};
  EXPECT_EQ(mix(two, s, m.params, m.layout, m.cfg), mix(padded, s, m.params, m.layout, m.cfg));
}

TEST(Mix, Errors) {
  Mixer m(small_config(2), 8);
  const env::GlobalState s = sample_state(9);
  EXPECT_THROW(mix(std::vector<double>{}, s, m.params, m.layout, m.cfg), invalid_input);
  EXPECT_THROW(mix(std::vector<double>{1, 2, 3}, s, m.params, m.layout, m.cfg), invalid_input);
  env::GlobalState bad = s;
  bad.entity_features = Matrix::Zero(s.entity_features.rows(), 3);
  EXPECT_THROW(mix(std::vector<double>{1}, bad, m.params, m.layout, m.cfg), invalid_input);
}

TEST(VdnMix, Examples) {
  EXPECT_EQ(vdn_mix(std::vector<double>{1, 2, 3}), 6.0);
  EXPECT_EQ(vdn_mix(std::vector<double>{-1, 1}), 0.0);
  EXPECT_THROW(vdn_mix(std::vector<double>{}), invalid_input);
  MixerConfig c = small_config();
  c.kind = MixerKind::vdn;
  Mixer m(c, 10);
  EXPECT_EQ(m.params.size(), 0u);
  EXPECT_EQ(mix(std::vector<double>{1, 2, 3}, sample_state(11), m.params, m.layout, m.cfg), 6.0);
}

TEST(TdTargets, Examples) {
  EXPECT_NEAR(td_target(1.0, false, 2.0, 0.99), 2.98, 1e-12);
  EXPECT_EQ(td_target(5.0, true, 123.0, 0.99), 5.0);
  const std::vector<double> r{1.0, -0.05};
  const std::vector<std::uint8_t> term{0, 1};
  const std::vector<double> next{2.0, 9.0};
  const auto y = td_targets(r, term, next, 0.99);
  const auto want = oracle::td_targets_loop(r, {false, true}, next, 0.99);
  ASSERT_EQ(y.size(), want.size());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
  EXPECT_THROW(td_targets(r, term, std::vector<double>{1.0}, 0.99), invalid_input);
}

TEST(TdLoss, SingleTransitionResidual) {
  ad::Graph<double> g(false);
  auto pred = g.constant(Matrix::Constant(1, 1, 2.0));
  EXPECT_NEAR(ad::masked_mse<double>(pred, ad::Col<double>::Constant(1, 2.98), ad::Col<double>::Ones(1)).scalar(), 0.9604, 1e-12);
  EXPECT_EQ(ad::masked_mse<double>(pred, ad::Col<double>::Constant(1, 2.0), ad::Col<double>::Ones(1)).scalar(), 0.0);
}

TEST(TdLoss, TargetParametersReceiveNoGradient) {
  Model m = build_model(checks::detail::small_model_spec(Activation::sparsemax), 12);
  const std::vector<Episode> eps = checks::detail::small_episodes(2, 13);
  std::vector<const Episode*> batch{&eps[0], &eps[1]};
  ParamSet target = m.params;
  target.zero_grad();
  m.params.zero_grad();
  batch_loss<double>(m, target, batch, {}, true);
  EXPECT_EQ(target.grad_norm(), 0.0);
  EXPECT_GT(m.params.grad_norm(), 0.0);
}

TEST(TdLoss, BatchEqualsLengthWeightedAverageOfParts) {
  // Episodes of different lengths are padded to the longest; padding must not
  // enter the loss, so the batch TD loss is the step-weighted mean of the parts.
  Model m = build_model(checks::detail::small_model_spec(Activation::sparsemax), 14);
  env::ScenarioFamily f;
  f.grid_w = f.grid_h = 4;
  f.sight_range = 2;
  f.horizon = 3;
  f.n_agents = {2, 2};
  f.n_prey = {1, 1};
  f.n_obstacles = {0, 0};
  f.attack = {1, 1};
  f.defense = {1, 1};
  f.unseen_n_agents = {1, 1};
  f.unseen_n_prey = {2, 2};
  f.unseen_capability = {2, 2};
  Episode longer, shorter;
  {
    env::PredatorPrey world(f, 15);
    Rng rng(16);
    for (int i = 0; i < 50 && (longer.length() != 3 || shorter.length() == 0 || shorter.length() == 3); ++i) {
      Episode e = collect_episode(world, env::Split::train, m, 1.0, rng);
      e.max_entities = 3;
      if (e.length() == 3) {
        longer = e;
      } else {
        shorter = e;
      }
    }
  }
  ASSERT_EQ(longer.length(), 3);
  ASSERT_GT(shorter.length(), 0);
  ASSERT_LT(shorter.length(), 3);
  const LossWeights td_only{0.0, 0.0, 0.99, kKlClamp};
  const Episode* both[] = {&longer, &shorter};
  const Episode* a[] = {&longer};
  const Episode* b[] = {&shorter};
  const double joint = batch_loss<double>(m, m.params, both, td_only, false).td;
  const double la = batch_loss<double>(m, m.params, a, td_only, false).td;
  const double lb = batch_loss<double>(m, m.params, b, td_only, false).td;
  const double n1 = longer.length(), n2 = shorter.length();
  EXPECT_NEAR(joint, (n1 * la + n2 * lb) / (n1 + n2), 1e-10);
}

TEST(SyncTarget, CopySemantics) {
  Mixer live(small_config(), 17);
  Mixer target(small_config(), 18);
  const env::GlobalState s = sample_state(19);
  const std::vector<double> qs{0.3, -1.1, 2.0};
  EXPECT_NE(mix(qs, s, live.params, live.layout, live.cfg), mix(qs, s, target.params, target.layout, target.cfg));
  sync_target(live.params, target.params);
  EXPECT_EQ(mix(qs, s, live.params, live.layout, live.cfg), mix(qs, s, target.params, target.layout, target.cfg));
  ParamSet again = target.params;
  sync_target(live.params, again);
  EXPECT_TRUE(again.values_equal(target.params));
}

TEST(SyncTarget, DiffersAfterOneOptimizerStep) {
  Model m = build_model(checks::detail::small_model_spec(Activation::sparsemax), 20);
  ParamSet target = m.params;
  const std::vector<Episode> eps = checks::detail::small_episodes(2, 21);
  std::vector<const Episode*> batch{&eps[0], &eps[1]};
  RmsProp opt(m.params, {});
  m.params.zero_grad();
  batch_loss<double>(m, target, batch, {}, true);
  opt.step(m.params);
  EXPECT_FALSE(m.params.values_equal(target));
  const env::GlobalState s = eps[0].state(0);
  const std::vector<double> qs{0.4, 0.9};
  EXPECT_NE(mix(qs, s, m.params, m.mixer, m.spec.mixer), mix(qs, s, target, m.mixer, m.spec.mixer));
  ParamSet other_layout;
  EXPECT_THROW(sync_target(m.params, other_layout), invalid_input);
}
