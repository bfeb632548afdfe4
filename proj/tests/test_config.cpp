#include <string>

#include <gtest/gtest.h>

#include "opt/config.hpp"

using namespace opt;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text, "cfg.ini");
  } catch (const config_error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig d;
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(parse_config(write_config(d)), d);
  EXPECT_EQ(parse_config(""), d);
}

TEST(Config, ModifiedValuesRoundTrip) {
  RunConfig c;
  c.model.n_prototypes = 7;
  c.model.mixer = MixerKind::vdn;
  c.model.activation = Activation::softmax;
  c.loss.alpha = 0.123456789;
  c.train.lr = 3.3e-4;
  c.train.seed = 18446744073709551615ULL;
  c.train.eval_splits = {env::Split::unseen_both, env::Split::train};
  c.env.n_obstacles = {1, 2};
  c.env.reward.win = 12.5;
  c.env.require_feasible = false;
  const RunConfig back = parse_config(write_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, PartialFileKeepsOtherDefaults) {
  const RunConfig c = parse_config("[train]\nseed = 42\n[env]\nn_agents = 1..2\n");
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.env.n_agents, (env::IntRange{1, 2}));
  EXPECT_EQ(c.model, ModelSettings{});
}

TEST(Config, UnknownKeyReportsLine) {
  const std::string msg = error_of("[model]\nd_x = 16\nwidth = 3\n");
  EXPECT_NE(msg.find("cfg.ini:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("model.width"), std::string::npos) << msg;
}

TEST(Config, UnknownSectionAndBadValues) {
  EXPECT_NE(error_of("[optimizer]\nlr = 1\n").find("unknown section"), std::string::npos);
  EXPECT_NE(error_of("[train]\nbatch = many\n").find("cfg.ini:2"), std::string::npos);
  EXPECT_FALSE(error_of("[train]\ngamma = 1.5\n").empty());
  EXPECT_FALSE(error_of("[train]\nbatch = 64\nbuffer = 32\n").empty());
  EXPECT_FALSE(error_of("[loss]\nalpha = -1\n").empty());
  EXPECT_FALSE(error_of("[model]\nactivation = relu\n").empty());
  EXPECT_FALSE(error_of("[train]\neval_splits = train, nowhere\n").empty());
  EXPECT_FALSE(error_of("[env]\nunseen_n_agents = 2..3\n").empty());
  EXPECT_THROW(load_config("/nonexistent/run.ini"), config_error);
}

TEST(Config, AblationFlagsDriveEffectiveWeights) {
  RunConfig c;
  EXPECT_EQ(c.alpha(), 0.5);
  EXPECT_EQ(c.beta(), 0.1);
  EXPECT_EQ(c.activation(), Activation::sparsemax);
  c.train.no_cd = true;
  c.train.no_cmi = true;
  c.train.no_sparse = true;
  EXPECT_EQ(c.alpha(), 0.0);
  EXPECT_EQ(c.beta(), 0.0);
  EXPECT_EQ(c.activation(), Activation::softmax);
}

TEST(Config, Variants) {
  for (const char* v : {"no-sparse", "no-cd", "no-cmi"}) {
    RunConfig c;
    apply_variant(c, v);
    EXPECT_EQ(c.train.variant, v);
  }
  RunConfig c;
  apply_variant(c, "no-sparse");
  EXPECT_TRUE(c.train.no_sparse);
  RunConfig k;
  apply_variant(k, "n-prototypes=2");
  EXPECT_EQ(k.model.n_prototypes, 2);
  RunConfig bad;
  EXPECT_THROW(apply_variant(bad, "n-prototypes=0"), config_error);
  EXPECT_THROW(apply_variant(bad, "n-prototypes=x"), config_error);
  try {
    apply_variant(bad, "no-gru");
    FAIL() << "expected an error";
  } catch (const config_error& e) {
    EXPECT_NE(std::string(e.what()).find("no-sparse"), std::string::npos);
  }
}
