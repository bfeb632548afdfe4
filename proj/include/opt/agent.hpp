#ifndef OPT_AGENT_HPP
#define OPT_AGENT_HPP

// Per-agent utility network: observation entities -> OPT stack -> mean pool ->
// GRU -> action values read from the hidden state and the observer's own
// output row, plus epsilon-greedy selection.
// All agents share one set of parameters.

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/autograd.hpp"
#include "opt/env.hpp"
#include "opt/error.hpp"
#include "opt/numerics.hpp"
#include "opt/opt_module.hpp"
#include "opt/params.hpp"

namespace opt {

using env::Observation;

inline constexpr double kUnavailable = -std::numeric_limits<double>::infinity();

struct UtilityConfig {
  OptConfig opt;  // opt.d_in is the observation feature width
  int d_h = 32;
  int n_actions = env::kActionCount;
};

/// GRU weights in PyTorch gate order (reset, update, new), each block d_h wide.
struct GruLayout {
  LinearLayout input;   // d_in -> 3 d_h
  LinearLayout hidden;  // d_h -> 3 d_h
};

struct UtilityLayout {
  OptStackLayout stack;
  GruLayout gru;
  LinearLayout head;  // [h_t, Y_self] -> actions
  LinearLayout history_head;   // [h_prev, pooled] -> prototypes (variational posterior)
};

inline UtilityLayout add_utility(ParamSet& ps, const UtilityConfig& cfg, Rng& rng) {
  if (cfg.d_h < 1 || cfg.n_actions < 1) throw invalid_input("utility dimensions must be positive");
  UtilityLayout l;
  l.stack = add_opt_stack(ps, "utility", cfg.opt, rng);
  l.gru.input = add_linear(ps, "utility.gru.input", cfg.opt.d_x, 3 * cfg.d_h, rng);
  l.gru.hidden = add_linear(ps, "utility.gru.hidden", cfg.d_h, 3 * cfg.d_h, rng);
  l.head = add_linear(ps, "utility.head", cfg.d_h + cfg.opt.d_x, cfg.n_actions, rng);
  l.history_head = add_linear(ps, "utility.history_head", cfg.d_h + cfg.opt.d_x, cfg.opt.n_prototypes, rng);
  return l;
}

struct HiddenState {
  Vector h;
  static HiddenState zeros(int d_h) { return {Vector::Zero(d_h)}; }
};

struct ActionValues {
  Vector q;  // unavailable entries hold kUnavailable
  Mask available;
};

struct UtilityOutput {
  ActionValues q;
  HiddenState h;
  std::vector<ProbabilityVector> blend;  // per layer
  std::vector<double> cd_terms;          // per layer
  double cmi = 0.0;
};

// ---------------------------------------------------------------------------
// Building blocks shared by acting and training

/// h' = (1 - z) * n + z * h with r, z = sigmoid, n = tanh(i_n + r * (h W_hn + b_hn)).
/// `gi` holds the precomputed input projection x W_i + b_i.
template <typename T>
ad::Var<T> gru_cell(Binder<T>& bind, const GruLayout& l, ad::Var<T> gi, ad::Var<T> h, int d_h) {
  ad::Var<T> gh = bind.linear(h, l.hidden);
  ad::Var<T> r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, d_h), ad::slice_cols(gh, 0, d_h)));
  ad::Var<T> z = ad::sigmoid(ad::add(ad::slice_cols(gi, d_h, d_h), ad::slice_cols(gh, d_h, d_h)));
  ad::Var<T> n = ad::tanh(ad::add(ad::slice_cols(gi, 2 * d_h, d_h), ad::mul(r, ad::slice_cols(gh, 2 * d_h, d_h))));
  return ad::add(ad::mul(ad::one_minus(z), n), ad::mul(z, h));
}

template <typename T>
ad::Var<T> action_head(Binder<T>& bind, const UtilityLayout& l, ad::Var<T> h, ad::Var<T> self_rows) {
  return bind.linear(ad::concat_cols(h, self_rows), l.head);
}

/// Mean over rows of KL(blend || softmax([h_prev, pooled] W + b)) using the history head.
template <typename T>
ad::Var<T> cmi_term(Binder<T>& bind, const UtilityLayout& l, ad::Var<T> blend, ad::Var<T> h_prev,
                    ad::Var<T> pooled, double clamp) {
  ad::Var<T> q = ad::softmax_rows(bind.linear(ad::concat_cols(h_prev, pooled), l.history_head));
  return ad::kl_rows(blend, q, std::vector<T>(static_cast<std::size_t>(blend.rows()), T(1)), static_cast<T>(clamp));
}

/// Copies one observation into site `site` of a stacked entity matrix.
template <typename T>
void write_observation(ad::Mat<T>& raw, std::vector<std::uint8_t>& mask, int site, const Observation& o) {
  const Eigen::Index M = o.entity_features.rows();
  raw.middleRows(site * M, M) = o.entity_features.cast<T>();
  for (Eigen::Index e = 0; e < M; ++e) mask[static_cast<std::size_t>(site * M + e)] = o.visibility_mask[e] ? 1 : 0;
}

inline void check_observation(const Observation& o, const UtilityConfig& cfg) {
  if (o.entity_features.cols() != cfg.opt.d_in) throw invalid_input("observation feature width does not match the model");
  if (o.visibility_mask.size() != o.entity_features.rows()) throw invalid_input("visibility mask length mismatch");
  if (o.available_actions.size() != cfg.n_actions) throw invalid_input("availability mask length mismatch");
  if (o.self_index < 0 || o.self_index >= o.entity_features.rows() || !o.visibility_mask[o.self_index]) {
    throw invalid_input("the observing agent must be a visible entity");
  }
}

/// Action values of several agents for one timestep, plus internals for
/// inspection. Observations must share the entity count.
template <typename T>
struct UtilityStepTrace {
  ad::Var<T> q;       // A x n_actions, unmasked
  ad::Var<T> h;       // A x d_h
  ad::Var<T> cmi;     // 1 x 1
  OptStackTrace<T> stack;
  ad::SiteLayout sites;
};

template <typename T>
UtilityStepTrace<T> utility_step(Binder<T>& bind, const UtilityLayout& l, const UtilityConfig& cfg,
                                 std::span<const Observation> obs, ad::Var<T> h_prev, double kl_clamp = kKlClamp) {
  if (obs.empty()) throw invalid_input("utility_step: no observations");
  const int A = static_cast<int>(obs.size());
  const int M = static_cast<int>(obs.front().entity_features.rows());
  if (h_prev.rows() != A || h_prev.cols() != cfg.d_h) throw invalid_input("utility_step: hidden state shape mismatch");
  UtilityStepTrace<T> t;
  t.sites.sites = A;
  t.sites.entities = M;
  t.sites.mask.assign(static_cast<std::size_t>(A * M), 0);
  ad::Mat<T> raw(A * M, cfg.opt.d_in);
  std::vector<int> self_rows;
  for (int a = 0; a < A; ++a) {
    const Observation& o = obs[static_cast<std::size_t>(a)];
    check_observation(o, cfg);
    if (o.entity_features.rows() != M) throw invalid_input("utility_step: observations differ in entity count");
    write_observation(raw, t.sites.mask, a, o);
    self_rows.push_back(a * M + o.self_index);
  }
  auto& g = bind.graph();
  t.stack = opt_stack_forward(bind, l.stack, cfg.opt, g.constant(std::move(raw)), t.sites);
  ad::Var<T> pooled = ad::group_mean(t.stack.output, t.sites);
  t.h = gru_cell(bind, l.gru, bind.linear(pooled, l.gru.input), h_prev, cfg.d_h);
  t.q = action_head(bind, l, t.h, ad::gather_rows(t.stack.output, self_rows));
  t.cmi = cmi_term(bind, l, t.stack.blend.front(), h_prev, t.stack.pooled_input.front(), kl_clamp);
  return t;
}

/// Replaces unavailable entries by the sentinel.
inline ActionValues mask_action_values(const Vector& q, const Mask& available) {
  if (q.size() != available.size()) throw invalid_input("availability mask length mismatch");
  ActionValues v{q, available};
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!available[i]) v.q[i] = kUnavailable;
  }
  return v;
}

/// Decentralised forward of one agent: it consumes only that agent's own
/// observation and previous hidden state.
inline UtilityOutput utility_forward(const Observation& obs, const HiddenState& h_prev, const ParamSet& params,
                                     const UtilityLayout& l, const UtilityConfig& cfg, double kl_clamp = kKlClamp) {
  if (h_prev.h.size() != cfg.d_h) throw invalid_input("utility_forward: hidden state length mismatch");
  ad::Graph<double> g(false);
  Binder<double> bind(g, params, false);
  auto t = utility_step(bind, l, cfg, std::span<const Observation>(&obs, 1), g.constant(h_prev.h.transpose()), kl_clamp);
  UtilityOutput out;
  out.q = mask_action_values(t.q.value().row(0).transpose(), obs.available_actions);
  out.h.h = t.h.value().row(0).transpose();
  for (std::size_t k = 0; k < t.stack.blend.size(); ++k) {
    out.blend.push_back(ProbabilityVector::from(t.stack.blend[k].value().row(0).transpose()));
    out.cd_terms.push_back(t.stack.cd[k].scalar());
  }
  out.cmi = t.cmi.scalar();
  return out;
}

/// Greedy argmax over available actions; ties go to the lowest index.
inline int greedy_action(const ActionValues& q) {
  int best = -1;
  for (Eigen::Index i = 0; i < q.q.size(); ++i) {
    if (!q.available[i]) continue;
    if (best < 0 || q.q[i] > q.q[best]) best = static_cast<int>(i);
  }
  if (best < 0) throw invalid_input("no available action");
  return best;
}

/// With probability epsilon a uniformly random available action, otherwise the
/// greedy one. Always consumes one uniform draw (plus one more when exploring).
inline int select_action(const ActionValues& q, double epsilon, Rng& rng) {
  if (q.available.size() != q.q.size()) throw invalid_input("select_action: availability mask length mismatch");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw invalid_input("select_action: epsilon must lie in [0, 1]");
  std::vector<int> avail;
  for (Eigen::Index i = 0; i < q.available.size(); ++i) {
    if (q.available[i]) avail.push_back(static_cast<int>(i));
  }
  if (avail.empty()) throw invalid_input("select_action: no available action");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < epsilon) return avail[std::uniform_int_distribution<std::size_t>(0, avail.size() - 1)(rng)];
  return greedy_action(q);
}

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  long anneal_steps = 50000;
};

/// Linear from start to end over anneal_steps env steps, then constant.
inline double epsilon_schedule(long env_step, const EpsilonSchedule& s = {}) {
  if (env_step < 0) throw invalid_input("epsilon_schedule: negative step");
  if (s.anneal_steps <= 0 || env_step >= s.anneal_steps) return s.end;
  const double frac = static_cast<double>(env_step) / static_cast<double>(s.anneal_steps);
  return s.start + frac * (s.end - s.start);
}

}  // namespace opt

#endif  // OPT_AGENT_HPP
