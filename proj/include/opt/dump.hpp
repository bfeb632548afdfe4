#ifndef OPT_DUMP_HPP
#define OPT_DUMP_HPP

// Prototype export: greedy episodes are played and replayed through the
// utility and mixer stacks, and every prototype attention matrix and blend
// weight vector is written out as JSON, per step, site and layer.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "opt/agent.hpp"
#include "opt/autograd.hpp"
#include "opt/env.hpp"
#include "opt/error.hpp"
#include "opt/mixer.hpp"
#include "opt/trainer.hpp"

namespace opt {

/// Attention entries between unmasked rows and unmasked columns, and how many are exactly zero.
struct SparsityCount {
  long entries = 0;
  long zeros = 0;
  double fraction() const { return entries == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(entries); }
  SparsityCount& operator+=(const SparsityCount& o) {
    entries += o.entries;
    zeros += o.zeros;
    return *this;
  }
};

struct DumpOptions {
  env::Split split = env::Split::train;
  int episodes = 1;
  std::uint64_t seed = 0;
};

namespace detail {

/// Per-layer records of site `site` from a stack trace recorded on `g`.
inline nlohmann::json layer_records(const ad::Graph<double>& g, const OptStackTrace<double>& trace,
                                    const ad::SiteLayout& sites, int site, int n_prototypes, SparsityCount& count) {
  const int M = sites.entities;
  const int base = site * M;
  std::vector<bool> mask(static_cast<std::size_t>(M));
  for (int e = 0; e < M; ++e) mask[static_cast<std::size_t>(e)] = sites.mask[static_cast<std::size_t>(base + e)] != 0;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t k = 0; k < trace.prototype_values.size(); ++k) {
    const auto probs = g.aux(trace.prototype_values[k]);
    if (!probs) throw invalid_state("prototype attention was not recorded");
    nlohmann::json protos = nlohmann::json::array();
    for (int n = 0; n < n_prototypes; ++n) {
      nlohmann::json rows = nlohmann::json::array();
      for (int i = 0; i < M; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < M; ++j) {
          const double v = (*probs)(base + i, n * M + j);
          row.push_back(v);
          if (mask[static_cast<std::size_t>(i)] && mask[static_cast<std::size_t>(j)]) {
            ++count.entries;
            if (v == 0.0) ++count.zeros;
          }
        }
        rows.push_back(std::move(row));
      }
      protos.push_back(std::move(rows));
    }
    const Vector blend = trace.blend[k].value().row(site).transpose();
    layers.push_back({{"layer", k},
                      {"blend_weights", std::vector<double>(blend.data(), blend.data() + blend.size())},
                      {"mask", mask},
                      {"prototypes", std::move(protos)}});
  }
  return layers;
}

}  // namespace detail

/// Greedy episodes on `opts.split` (same task stream as `evaluate` with the
/// same seed), with every prototype matrix of every site. Adds the exact-zero
/// audit of all dumped attention entries to `count` when given.
inline nlohmann::json dump_prototypes(const Model& m, const env::ScenarioFamily& family, const DumpOptions& opts,
                                      SparsityCount* count = nullptr) {
  if (opts.episodes < 1) throw invalid_input("dump needs at least one episode");
  const int N = m.spec.utility.opt.n_prototypes;
  const bool qmix = m.spec.mixer.kind == MixerKind::qmix;
  SparsityCount total;
  env::PredatorPrey world(family, derive_seed(opts.seed, 1));
  Rng rng(derive_seed(opts.seed, 2));
  nlohmann::json episodes = nlohmann::json::array();
  for (int i = 0; i < opts.episodes; ++i) {
    const Episode ep = collect_episode(world, opts.split, m, 0.0, rng);
    const int A = ep.n_agents();
    Matrix h = Matrix::Zero(A, m.spec.utility.d_h);
    nlohmann::json steps = nlohmann::json::array();
    for (int t = 0; t < ep.length(); ++t) {
      nlohmann::json sites = nlohmann::json::array();
      std::vector<env::Observation> obs;
      for (int a = 0; a < A; ++a) obs.push_back(ep.observation(t, a));
      {
        ad::Graph<double> g(false);
        Binder<double> bind(g, m.params, false);
        auto u = utility_step(bind, m.utility, m.spec.utility, std::span<const env::Observation>(obs), g.constant(h));
        h = u.h.value();
        for (int a = 0; a < A; ++a) {
          sites.push_back({{"site", "agent"},
                           {"agent", a},
                           {"layers", detail::layer_records(g, u.stack, u.sites, a, N, total)}});
        }
      }
      if (qmix) {
        const env::GlobalState st = ep.state(t);
        ad::Graph<double> g(false);
        Binder<double> bind(g, m.params, false);
        ad::SiteLayout layout{1, static_cast<int>(st.entity_features.rows()), {}};
        for (Eigen::Index e = 0; e < st.entity_mask.size(); ++e) layout.mask.push_back(st.entity_mask[e] ? 1 : 0);
        auto stack = opt_stack_forward(bind, m.mixer.stack, m.spec.mixer.opt, g.constant(st.entity_features), layout);
        sites.push_back({{"site", "mixer"}, {"layers", detail::layer_records(g, stack, layout, 0, N, total)}});
      }
      steps.push_back({{"t", t}, {"sites", std::move(sites)}});
    }
    episodes.push_back({{"episode", i},
                        {"n_agents", A},
                        {"n_prey", ep.task.n_prey},
                        {"n_obstacles", ep.task.n_obstacles},
                        {"win", ep.win},
                        {"steps", std::move(steps)}});
  }
  if (count) *count += total;
  return {{"split", env::to_string(opts.split)},
          {"activation", m.spec.utility.opt.activation == Activation::sparsemax ? "sparsemax" : "softmax"},
          {"n_prototypes", N},
          {"n_layers", m.spec.utility.opt.n_layers},
          {"max_entities", m.spec.max_entities},
          {"attention_entries", total.entries},
          {"exact_zeros", total.zeros},
          {"episodes", std::move(episodes)}};
}

}  // namespace opt

#endif  // OPT_DUMP_HPP
