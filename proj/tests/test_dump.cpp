#include <cmath>

#include <gtest/gtest.h>

#include "opt/dump.hpp"
#include "tiny_config.hpp"

using namespace opt;

namespace {

Model tiny_model(Activation act, std::uint64_t seed) {
  RunConfig cfg = fixtures::tiny_config();
  cfg.model.n_layers = 2;
  cfg.model.n_prototypes = 3;
  cfg.model.activation = act;
  return build_model(model_spec(cfg), seed);
}

}  // namespace

TEST(DumpPrototypes, SchemaAndRowSums) {
  const RunConfig cfg = fixtures::tiny_config();
  const Model m = tiny_model(Activation::sparsemax, 1);
  SparsityCount count;
  const nlohmann::json doc = dump_prototypes(m, cfg.env, {env::Split::train, 2, 3}, &count);
  EXPECT_EQ(doc["split"], "train");
  EXPECT_EQ(doc["activation"], "sparsemax");
  EXPECT_EQ(doc["n_prototypes"], 3);
  EXPECT_EQ(doc["n_layers"], 2);
  EXPECT_EQ(doc["attention_entries"], count.entries);
  EXPECT_EQ(doc["exact_zeros"], count.zeros);
  ASSERT_EQ(doc["episodes"].size(), 2u);
  const int M = doc["max_entities"];
  long entries = 0;
  for (const auto& ep : doc["episodes"]) {
    const int A = ep["n_agents"];
    for (const auto& step : ep["steps"]) {
      // One record per agent plus one for the mixer.
      ASSERT_EQ(step["sites"].size(), static_cast<std::size_t>(A + 1));
      for (const auto& site : step["sites"]) {
        ASSERT_EQ(site["layers"].size(), 2u);
        for (const auto& layer : site["layers"]) {
          const auto& mask = layer["mask"];
          ASSERT_EQ(mask.size(), static_cast<std::size_t>(M));
          double blend_sum = 0.0;
          for (double w : layer["blend_weights"]) {
            EXPECT_GE(w, 0.0);
            blend_sum += w;
          }
          EXPECT_NEAR(blend_sum, 1.0, 1e-9);
          ASSERT_EQ(layer["prototypes"].size(), 3u);
          for (const auto& proto : layer["prototypes"]) {
            for (int i = 0; i < M; ++i) {
              if (!mask[static_cast<std::size_t>(i)].get<bool>()) continue;
              double sum = 0.0;
              for (int j = 0; j < M; ++j) {
                const double v = proto[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                if (!mask[static_cast<std::size_t>(j)].get<bool>()) {
                  EXPECT_EQ(v, 0.0);
                  continue;
                }
                EXPECT_GE(v, 0.0);
                sum += v;
                ++entries;
              }
              EXPECT_NEAR(sum, 1.0, 1e-9);
            }
          }
        }
      }
    }
  }
  EXPECT_EQ(entries, count.entries);
}

TEST(DumpPrototypes, SoftmaxHasNoExactZeros) {
  const RunConfig cfg = fixtures::tiny_config();
  SparsityCount count;
  const nlohmann::json doc = dump_prototypes(tiny_model(Activation::softmax, 4), cfg.env, {env::Split::train, 3, 5}, &count);
  EXPECT_EQ(doc["activation"], "softmax");
  EXPECT_GT(count.entries, 0);
  EXPECT_EQ(count.zeros, 0);
}

TEST(DumpPrototypes, FollowsTheEvaluationStream) {
  const RunConfig cfg = fixtures::tiny_config();
  const Model m = tiny_model(Activation::sparsemax, 6);
  const nlohmann::json doc = dump_prototypes(m, cfg.env, {env::Split::unseen_scale, 4, 7});
  const EvalResult r = evaluate(m, cfg.env, env::Split::unseen_scale, 4, 7);
  int wins = 0;
  for (const auto& ep : doc["episodes"]) wins += ep["win"].get<bool>() ? 1 : 0;
  EXPECT_EQ(wins / 4.0, r.win_rate);
  EXPECT_EQ(doc["episodes"][0]["n_agents"], cfg.env.unseen_n_agents.lo);
}

TEST(DumpPrototypes, Errors) {
  const RunConfig cfg = fixtures::tiny_config();
  EXPECT_THROW(dump_prototypes(tiny_model(Activation::sparsemax, 8), cfg.env, {env::Split::train, 0, 1}), invalid_input);
}

TEST(SparsityCount, Fraction) {
  SparsityCount c;
  EXPECT_EQ(c.fraction(), 0.0);
  c += SparsityCount{8, 2};
  c += SparsityCount{2, 0};
  EXPECT_DOUBLE_EQ(c.fraction(), 0.2);
}
