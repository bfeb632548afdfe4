#ifndef OPT_MIXER_HPP
#define OPT_MIXER_HPP

// Monotone mixing network. The global state passes through its own OPT stack;
// the mean-pooled result drives hypernetworks that emit nonnegative mixing
// weights (absolute value) for a two-layer mix of the per-agent values.
// Also: additive (VDN) mixing, TD targets and target-network sync.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "opt/autograd.hpp"
#include "opt/env.hpp"
#include "opt/error.hpp"
#include "opt/numerics.hpp"
#include "opt/opt_module.hpp"
#include "opt/params.hpp"

namespace opt {

using env::GlobalState;

enum class MixerKind { qmix, vdn };

struct MixerConfig {
  OptConfig opt;       // opt.d_in is the state feature width
  int max_agents = 4;  // width of the agent-value input; missing agents contribute zero
  int d_mix = 32;
  MixerKind kind = MixerKind::qmix;
};

struct MixerLayout {
  OptStackLayout stack;
  LinearLayout w1;  // d_x -> max_agents * d_mix
  LinearLayout b1;  // d_x -> d_mix
  LinearLayout w2;  // d_x -> d_mix
  LinearLayout b2;  // d_x -> 1
};

/// Registers mixer parameters; the VDN variant has none.
inline MixerLayout add_mixer(ParamSet& ps, const MixerConfig& cfg, Rng& rng) {
  MixerLayout l;
  if (cfg.kind == MixerKind::vdn) return l;
  if (cfg.max_agents < 1 || cfg.d_mix < 1) throw invalid_input("mixer dimensions must be positive");
  const int d = cfg.opt.d_x;
  l.stack = add_opt_stack(ps, "mixer", cfg.opt, rng);
  l.w1 = add_linear(ps, "mixer.hyper_w1", d, cfg.max_agents * cfg.d_mix, rng);
  l.b1 = add_linear(ps, "mixer.hyper_b1", d, cfg.d_mix, rng);
  l.w2 = add_linear(ps, "mixer.hyper_w2", d, cfg.d_mix, rng);
  l.b2 = add_linear(ps, "mixer.hyper_b2", d, 1, rng);
  return l;
}

template <typename T>
struct MixerTrace {
  ad::Var<T> q_tot;        // S x 1
  OptStackTrace<T> stack;  // empty for VDN
};

/// Batched mix: `qs` is S x max_agents, `states` is (S*M) x d_state.
template <typename T>
MixerTrace<T> mixer_forward(Binder<T>& bind, const MixerLayout& l, const MixerConfig& cfg, ad::Var<T> qs,
                            ad::Var<T> states, const ad::SiteLayout& sites) {
  MixerTrace<T> t;
  auto& g = bind.graph();
  if (cfg.kind == MixerKind::vdn) {
    t.q_tot = ad::matmul(qs, g.constant(ad::Mat<T>::Ones(qs.cols(), 1)));
    return t;
  }
  if (qs.cols() != cfg.max_agents || qs.rows() != sites.sites) throw invalid_input("mixer: agent-value shape mismatch");
  t.stack = opt_stack_forward(bind, l.stack, cfg.opt, states, sites);
  ad::Var<T> pooled = ad::group_mean(t.stack.output, sites);
  ad::Var<T> w1 = ad::abs(bind.linear(pooled, l.w1));
  ad::Var<T> b1 = bind.linear(pooled, l.b1);
  ad::Var<T> hidden = ad::elu(ad::add(ad::batched_vecmat(qs, w1, cfg.d_mix), b1));
  ad::Var<T> w2 = ad::abs(bind.linear(pooled, l.w2));
  t.q_tot = ad::add(ad::row_dot(hidden, w2), bind.linear(pooled, l.b2));
  return t;
}

/// Sum of the agent values.
inline double vdn_mix(std::span<const double> agent_qs) {
  if (agent_qs.empty()) throw invalid_input("vdn_mix: no agent values");
  double s = 0.0;
  for (double q : agent_qs) s += q;
  return s;
}

/// Q_tot for one state and the chosen-action values of its agents.
inline double mix(std::span<const double> agent_qs, const GlobalState& state, const ParamSet& params,
                  const MixerLayout& l, const MixerConfig& cfg) {
  if (agent_qs.empty()) throw invalid_input("mix: no agent values");
  if (cfg.kind == MixerKind::vdn) return vdn_mix(agent_qs);
  if (static_cast<int>(agent_qs.size()) > cfg.max_agents) throw invalid_input("mix: more agents than the mixer supports");
  if (state.entity_features.cols() != cfg.opt.d_in || state.entity_mask.size() != state.entity_features.rows()) {
    throw invalid_input("mix: state shape mismatch");
  }
  if (!state.entity_mask.any()) throw invalid_input("mix: every state entity is masked");
  ad::Graph<double> g(false);
  Binder<double> bind(g, params, false);
  Matrix qs = Matrix::Zero(1, cfg.max_agents);
  for (std::size_t a = 0; a < agent_qs.size(); ++a) qs(0, static_cast<Eigen::Index>(a)) = agent_qs[a];
  ad::SiteLayout sites{1, static_cast<int>(state.entity_features.rows()), {}};
  for (Eigen::Index e = 0; e < state.entity_mask.size(); ++e) sites.mask.push_back(state.entity_mask[e] ? 1 : 0);
  auto t = mixer_forward(bind, l, cfg, g.constant(qs), g.constant(state.entity_features), sites);
  return t.q_tot.scalar();
}

/// y = r + gamma * (1 - terminated) * next_q_tot.
inline double td_target(double reward, bool terminated, double next_q_tot, double gamma) {
  return terminated ? reward : reward + gamma * next_q_tot;
}

inline std::vector<double> td_targets(std::span<const double> rewards, std::span<const std::uint8_t> terminated,
                                      std::span<const double> next_q_tot, double gamma) {
  if (rewards.size() != terminated.size() || rewards.size() != next_q_tot.size()) {
    throw invalid_input("td_targets: length mismatch");
  }
  std::vector<double> y(rewards.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = td_target(rewards[i], terminated[i] != 0, next_q_tot[i], gamma);
  return y;
}

/// Hard copy of live into target parameters.
inline void sync_target(const ParamSet& live, ParamSet& target) { target.copy_values_from(live); }

}  // namespace opt

#endif  // OPT_MIXER_HPP
