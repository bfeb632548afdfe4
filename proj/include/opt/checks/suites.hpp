#ifndef OPT_CHECKS_SUITES_HPP
#define OPT_CHECKS_SUITES_HPP

// Verification suites run by `opt_cli check` and the acceptance binary. Each
// check compares a library routine against an oracle from oracles.hpp, a
// closed form, or central finite differences.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/agent.hpp"
#include "opt/autograd.hpp"
#include "opt/checks/oracles.hpp"
#include "opt/env.hpp"
#include "opt/mixer.hpp"
#include "opt/numerics.hpp"
#include "opt/opt_module.hpp"
#include "opt/params.hpp"
#include "opt/trainer.hpp"

namespace opt::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> results;

  bool passed() const {
    return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
  }
};

namespace detail {

template <typename... Parts>
std::string str(const Parts&... parts) {
  std::ostringstream os;
  os.precision(6);
  (os << ... << parts);
  return os.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline Vector random_vector(int n, double scale, Rng& rng) {
  std::normal_distribution<double> d(0.0, scale);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline Matrix random_matrix(int r, int c, double scale, Rng& rng) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = d(rng);
  }
  return m;
}

/// sum_ij x_ij c_ij as a graph scalar.
inline ad::Var<double> weighted_sum(ad::Var<double> x, const Matrix& c) {
  auto& g = *x.graph;
  return ad::matmul(g.constant(Matrix::Ones(1, x.rows())), ad::row_dot(x, g.constant(c)));
}

/// Finite-difference check of d loss / d params, where `loss` rebuilds the
/// scalar on a recording graph from bound parameters.
inline FdReport param_gradient_check(const ParamSet& params,
                                     const std::function<ad::Var<double>(Binder<double>&)>& loss,
                                     const FdOptions& options = {}) {
  ParamSet work = params;
  work.zero_grad();
  {
    ad::Graph<double> g(true);
    Binder<double> bind(g, work, true);
    g.backward(loss(bind));
    bind.accumulate_grads(work);
  }
  const std::vector<double> x = work.flat_values();
  const std::vector<double> grad = work.flat_grads();
  auto f = [&](std::span<const double> p) {
    work.assign_flat(p);
    ad::Graph<double> g(true);
    Binder<double> bind(g, work, true);
    const double v = loss(bind).scalar();
    return FdSample{v, g.signature()};
  };
  return finite_difference_check(std::function<FdSample(std::span<const double>)>(f), x, grad, options);
}

/// Pass when every smooth coordinate agrees and at most 5% are kinks.
inline CheckResult gradient_result(const std::string& name, const FdReport& r) {
  const double kink_share = r.coordinates.empty() ? 0.0 : static_cast<double>(r.kink_count()) / r.coordinates.size();
  CheckResult c{name, r.passed() && kink_share <= 0.05, {}};
  c.detail = str(r.coordinates.size(), " coords, ", r.kink_count(), " kinks (", 100.0 * kink_share,
                 "%), max rel err ", r.max_rel_error(), ", failures ", r.failures().size());
  return c;
}

inline ad::SiteLayout make_sites(int sites, int entities, const std::vector<std::uint8_t>& mask) {
  ad::SiteLayout l{sites, entities, mask};
  if (l.mask.empty()) l.mask.assign(static_cast<std::size_t>(sites * entities), 1);
  return l;
}

/// Small model used by the trainer-level gradient checks: 2 agents, 3 entities.
inline ModelSpec small_model_spec(Activation act) {
  OptConfig o;
  o.d_x = 6;
  o.n_prototypes = 3;
  o.n_layers = 2;
  o.d_ff = 5;
  o.activation = act;
  ModelSpec s;
  s.utility.opt = o;
  s.utility.opt.d_in = env::kObsFeatures;
  s.utility.d_h = 5;
  s.mixer.opt = o;
  s.mixer.opt.d_in = env::kStateFeatures;
  s.mixer.max_agents = 2;
  s.mixer.d_mix = 4;
  s.max_entities = 3;
  return s;
}

/// Random two-step episodes of a 2-agent, 1-prey task on a 4x4 grid.
inline std::vector<Episode> small_episodes(int count, std::uint64_t seed) {
  env::ScenarioFamily f;
  f.grid_w = f.grid_h = 4;
  f.sight_range = 2;
  f.horizon = 2;
  f.n_agents = {2, 2};
  f.n_prey = {1, 1};
  f.n_obstacles = {0, 0};
  f.attack = {1, 1};
  f.defense = {1, 1};
  f.unseen_n_agents = {1, 1};
  f.unseen_n_prey = {2, 2};
  f.unseen_capability = {2, 2};
  env::PredatorPrey world(f, seed);
  Rng rng(seed + 1);
  std::vector<Episode> out;
  for (int i = 0; i < count; ++i) {
    Episode e = run_episode(world, env::Split::train, [&](const std::vector<env::Observation>& obs) {
      std::vector<int> joint;
      for (const auto& o : obs) {
        std::vector<int> avail;
        for (int a = 0; a < o.available_actions.size(); ++a) {
          if (o.available_actions[a]) avail.push_back(a);
        }
        joint.push_back(avail[std::uniform_int_distribution<std::size_t>(0, avail.size() - 1)(rng)]);
      }
      return joint;
    });
    e.max_entities = 3;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// sparsemax

inline CheckResult check_sparsemax_oracle(int count = 1000, std::uint64_t seed = 1) {
  detail::Stopwatch clock;
  Rng rng(seed);
  const double scales[] = {0.1, 1.0, 3.0, 10.0};
  double max_err = 0.0;
  double max_sum_err = 0.0;
  for (int i = 0; i < count; ++i) {
    const int M = 2 + i % 7;
    const Vector z = detail::random_vector(M, scales[(i / 7) % 4], rng);
    const Vector p = sparsemax(z).values();
    max_err = std::max(max_err, (p - oracle::simplex_projection(z)).cwiseAbs().maxCoeff());
    const SupportResult s = sparsemax_support(z);
    max_sum_err = std::max(max_sum_err, std::abs((z.array() - s.threshold).cwiseMax(0.0).sum() - 1.0));
  }
  const double t = clock.seconds();
  return {"projection matches support-enumeration oracle", max_err <= 1e-9 && max_sum_err <= 1e-9 && t < 5.0,
          detail::str(count, " vectors, M in 2..8: max |p - oracle| ", max_err, ", max |sum[z-sigma]+ - 1| ",
                      max_sum_err, ", ", t, " s")};
}

inline CheckResult check_sparsemax_examples() {
  double err = 0.0;
  auto cmp = [&](const Vector& got, std::initializer_list<double> want) {
    Eigen::Index i = 0;
    for (double w : want) err = std::max(err, std::abs(got[i++] - w));
  };
  cmp(sparsemax(Vector{{0.5, 0.0}}).values(), {0.75, 0.25});
  cmp(sparsemax(Vector{{3.1, 2.6, 0.1}}).values(), {0.75, 0.25, 0.0});
  cmp(sparsemax(Vector{{2.0, 0.0}}).values(), {1.0, 0.0});
  const SupportResult a = sparsemax_support(Vector{{3.1, 2.6, 0.1}});
  const SupportResult b = sparsemax_support(Vector{{2.0, 0.0}});
  err = std::max({err, std::abs(a.threshold - 2.35), std::abs(b.threshold - 1.0)});
  const bool sizes = a.support_size == 2 && b.support_size == 1;
  const bool zero = sparsemax(Vector{{3.1, 2.6, 0.1}})[2] == 0.0;
  return {"closed-form examples", err <= 1e-12 && sizes && zero,
          detail::str("(0.5,0)->(0.75,0.25), (3.1,2.6,0.1)->(0.75,0.25,0) m=2 sigma=2.35, (2,0)->(1,0) m=1 sigma=1;",
                      " max err ", err)};
}

inline CheckResult check_sparsemax_invariances(int count = 500, std::uint64_t seed = 2) {
  Rng rng(seed);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  double shift_err = 0.0;
  int order_violations = 0;
  for (int i = 0; i < count; ++i) {
    const int M = 2 + i % 7;
    const Vector z = detail::random_vector(M, 2.0, rng);
    const Vector p = sparsemax(z).values();
    const Vector ps = sparsemax((z.array() + shift(rng)).matrix()).values();
    shift_err = std::max(shift_err, (p - ps).cwiseAbs().maxCoeff());
    for (int a = 0; a < M; ++a) {
      for (int b = 0; b < M; ++b) {
        if (z[a] >= z[b] && p[a] < p[b]) ++order_violations;
      }
    }
  }
  return {"shift invariance and order preservation", shift_err <= 1e-12 && order_violations == 0,
          detail::str("max shift deviation ", shift_err, ", order violations ", order_violations)};
}

inline CheckResult check_sparsemax_masking(int count = 300, std::uint64_t seed = 3) {
  Rng rng(seed);
  double err = 0.0;
  bool zeros = true;
  for (int i = 0; i < count; ++i) {
    const int M = 2 + i % 7;
    const Vector z = detail::random_vector(M, 2.0, rng);
    Mask mask(M);
    std::vector<double> kept;
    for (int j = 0; j < M; ++j) {
      mask[j] = std::bernoulli_distribution(0.6)(rng) || j == 0;
      if (mask[j]) kept.push_back(z[j]);
    }
    const Vector p = sparsemax(z, mask).values();
    const Vector sub = oracle::simplex_projection(Eigen::Map<const Vector>(kept.data(), static_cast<Eigen::Index>(kept.size())));
    for (int j = 0, k = 0; j < M; ++j) {
      if (mask[j]) {
        err = std::max(err, std::abs(p[j] - sub[k++]));
      } else if (p[j] != 0.0) {
        zeros = false;
      }
    }
  }
  return {"masked entries are outside the projection", err <= 1e-9 && zeros,
          detail::str("max err vs projection of the unmasked subvector ", err, ", masked entries exactly zero: ",
                      zeros ? "yes" : "no")};
}

inline CheckResult check_sparsemax_backward(int count = 300, std::uint64_t seed = 4) {
  Rng rng(seed);
  std::size_t coords = 0;
  std::size_t kinks = 0;
  std::size_t failures = 0;
  double max_rel = 0.0;
  for (int i = 0; i < count; ++i) {
    const int M = 2 + i % 7;
    const Vector z = detail::random_vector(M, 1.5, rng);
    const Vector up = detail::random_vector(M, 1.0, rng);
    const Vector grad = sparsemax_backward(sparsemax(z), up);
    auto f = [&](std::span<const double> x) {
      const Vector p = sparsemax(Eigen::Map<const Vector>(x.data(), M)).values();
      std::uint64_t sig = 0;
      for (int j = 0; j < M; ++j) sig = sig * 2 + (p[j] > 0.0 ? 1 : 0);
      return FdSample{up.dot(p), sig};
    };
    const FdReport r = finite_difference_check(std::function<FdSample(std::span<const double>)>(f),
                                               std::span<const double>(z.data(), M),
                                               std::span<const double>(grad.data(), M));
    coords += r.coordinates.size();
    kinks += r.kink_count();
    failures += r.failures().size();
    max_rel = std::max(max_rel, r.max_rel_error());
  }
  return {"backward matches finite differences", failures == 0,
          detail::str(coords, " coords, ", kinks, " kinks skipped, max rel err ", max_rel)};
}

inline CheckResult check_attention_sparsity() {
  // Dominant column per row with margin above sqrt(d) after scaling gives one-hot rows.
  const int M = 4;
  const int d = 4;
  Matrix x = Matrix::Identity(M, d) * 3.0;
  EntityEmbedding emb{x, Mask::Constant(M, true)};
  PrototypeWeights w{Matrix::Identity(d, d), Matrix::Identity(d, d), Matrix::Identity(d, d)};
  const std::vector<PrototypeWeights> ws{w};
  const PrototypeSet sp = disentangle(emb, ws, Activation::sparsemax);
  const PrototypeSet so = disentangle(emb, ws, Activation::softmax);
  int nonzero_sparse = 0;
  int zero_soft = 0;
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < M; ++j) {
      nonzero_sparse += sp.attention[0](i, j) != 0.0 ? 1 : 0;
      zero_soft += so.attention[0](i, j) == 0.0 ? 1 : 0;
    }
  }
  return {"dominant logits give one-hot sparsemax rows, softmax has no zeros", nonzero_sparse == M && zero_soft == 0,
          detail::str("sparsemax nonzeros ", nonzero_sparse, " (want ", M, "), softmax exact zeros ", zero_soft)};
}

inline SuiteReport sparsemax_suite() {
  return {"sparsemax",
          {check_sparsemax_oracle(), check_sparsemax_examples(), check_sparsemax_invariances(),
           check_sparsemax_masking(), check_sparsemax_backward(), check_attention_sparsity()}};
}

// ---------------------------------------------------------------------------
// gradients

inline CheckResult check_cd_identities() {
  const Mask one = Mask::Constant(1, true);
  // N = 1
  const std::vector<Matrix> single{Matrix{{0.3, -1.2, 2.0}}};
  const double n1 = cd_loss(single, one);
  // identical prototypes give ln N
  double ident_err = 0.0;
  for (int N = 2; N <= 4; ++N) {
    const std::vector<Matrix> same(static_cast<std::size_t>(N), Matrix{{0.4, 0.7}, {-0.1, 0.2}});
    ident_err = std::max(ident_err, std::abs(cd_loss(same, Mask::Constant(2, true)) - std::log(static_cast<double>(N))));
  }
  // hand case: prototype outputs (1,0) and (0,1)
  const std::vector<Matrix> hand{Matrix{{1.0, 0.0}}, Matrix{{0.0, 1.0}}};
  const double h = cd_loss(hand, one);
  // the batched graph route must agree on the hand case
  ad::Graph<double> g(false);
  const double hb = ad::cd_loss(g.constant(Matrix{{1.0, 0.0, 0.0, 1.0}}), detail::make_sites(1, 1, {}), 2, 2).scalar();
  const bool ok = n1 == 0.0 && ident_err <= 1e-9 && std::abs(h - 0.313262) <= 1e-6 && std::abs(hb - h) <= 1e-12;
  return {"cd_loss identities", ok,
          detail::str("N=1 -> ", n1, "; identical -> ln N err ", ident_err, "; hand case ", h, " (graph ", hb, ")")};
}

inline CheckResult check_cd_gradient(bool cosine) {
  Rng rng(11);
  const int S = 2, M = 4, N = 3, d = 5;
  ParamSet ps;
  ps.add("pv", detail::random_matrix(S * M, N * d, 0.7, rng));
  const auto sites = detail::make_sites(S, M, {1, 1, 1, 0, 1, 1, 0, 0});
  const FdReport r = detail::param_gradient_check(
      ps, [&](Binder<double>& b) { return ad::cd_loss(b(0), sites, N, d, cosine); });
  return detail::gradient_result(cosine ? "cd_loss (cosine) gradient" : "cd_loss gradient", r);
}

inline CheckResult check_cmi_gradient() {
  Rng rng(12);
  const int S = 3, N = 4, d_h = 3, d = 4;
  ParamSet ps;
  const int logits = ps.add("blend_logits", detail::random_matrix(S, N, 1.0, rng));
  const int h = ps.add("h_prev", detail::random_matrix(S, d_h, 1.0, rng));
  const int pooled = ps.add("pooled", detail::random_matrix(S, d, 1.0, rng));
  UtilityLayout l;
  l.history_head = add_linear(ps, "history_head", d_h + d, N, rng);
  const FdReport r = detail::param_gradient_check(ps, [&](Binder<double>& b) {
    return cmi_term(b, l, ad::softmax_rows(b(logits)), b(h), b(pooled), kKlClamp);
  });
  return detail::gradient_result("cmi_loss gradient", r);
}

inline CheckResult check_opt_stack_gradient(Activation act) {
  Rng rng(13);
  OptConfig cfg;
  cfg.d_in = 3;
  cfg.d_x = 6;
  cfg.n_prototypes = 3;
  cfg.n_layers = 2;
  cfg.d_ff = 5;
  cfg.activation = act;
  ParamSet ps;
  const OptStackLayout l = add_opt_stack(ps, "stack", cfg, rng);
  const int S = 2, M = 4;
  const auto sites = detail::make_sites(S, M, {1, 1, 1, 1, 1, 0, 1, 0});
  // Large inputs push the sparsemax rows onto partial supports.
  const Matrix raw = detail::random_matrix(S * M, cfg.d_in, 4.0, rng);
  const Matrix head = detail::random_matrix(S * M, cfg.d_x, 1.0, rng);
  const Matrix blend_head = detail::random_matrix(S, cfg.n_prototypes, 1.0, rng);
  const FdReport r = detail::param_gradient_check(ps, [&](Binder<double>& b) {
    auto t = opt_stack_forward(b, l, cfg, b.graph().constant(raw), sites);
    ad::Var<double> loss = detail::weighted_sum(t.output, head);
    for (std::size_t k = 0; k < t.cd.size(); ++k) {
      loss = ad::add(loss, ad::scale(t.cd[k], 0.3));
      loss = ad::add(loss, detail::weighted_sum(t.blend[k], blend_head));
    }
    return loss;
  });
  return detail::gradient_result(
      act == Activation::sparsemax ? "OPT layers + scalar head gradient (sparsemax)"
                                   : "OPT layers + scalar head gradient (softmax)",
      r);
}

inline CheckResult check_mix_gradient() {
  Rng rng(14);
  MixerConfig cfg;
  cfg.opt.d_in = env::kStateFeatures;
  cfg.opt.d_x = 6;
  cfg.opt.n_prototypes = 2;
  cfg.opt.n_layers = 1;
  cfg.opt.d_ff = 5;
  cfg.max_agents = 3;
  cfg.d_mix = 4;
  ParamSet ps;
  const MixerLayout l = add_mixer(ps, cfg, rng);
  const int S = 2, M = 4;
  const int qs = ps.add("qs", detail::random_matrix(S, cfg.max_agents, 1.0, rng));
  const auto sites = detail::make_sites(S, M, {1, 1, 1, 0, 1, 1, 1, 1});
  const Matrix states = detail::random_matrix(S * M, cfg.opt.d_in, 1.0, rng);
  const Matrix head = detail::random_matrix(S, 1, 1.0, rng);
  const FdReport r = detail::param_gradient_check(ps, [&](Binder<double>& b) {
    auto t = mixer_forward(b, l, cfg, b(qs), b.graph().constant(states), sites);
    return detail::weighted_sum(t.q_tot, head);
  });
  return detail::gradient_result("mix gradient", r);
}

/// Gradient of the batch loss of the trainer w.r.t. every live parameter on a
/// 2-agent, 3-entity, 2-step batch. `weights` selects td only or the total.
inline CheckResult check_batch_loss_gradient(const std::string& name, const LossWeights& weights) {
  Model m = build_model(detail::small_model_spec(Activation::sparsemax), 15);
  ParamSet target = m.params;
  Rng rng(16);
  std::vector<double> shifted = target.flat_values();
  for (double& v : shifted) v += std::normal_distribution<double>(0.0, 0.05)(rng);
  target.assign_flat(shifted);
  const std::vector<Episode> episodes = detail::small_episodes(3, 17);
  std::vector<const Episode*> batch;
  for (const auto& e : episodes) batch.push_back(&e);

  m.params.zero_grad();
  batch_loss<double>(m, target, batch, weights, true);
  const std::vector<double> x = m.params.flat_values();
  const std::vector<double> grad = m.params.flat_grads();
  Model work = m;
  auto f = [&](std::span<const double> p) {
    work.params.assign_flat(p);
    std::uint64_t sig = 0;
    const LossBreakdown l = batch_loss<double>(work, target, batch, weights, true, &sig);
    return FdSample{l.total, sig};
  };
  const FdReport r = finite_difference_check(std::function<FdSample(std::span<const double>)>(f), x, grad);
  return detail::gradient_result(name, r);
}

inline SuiteReport gradients_suite() {
  detail::Stopwatch clock;
  SuiteReport s{"gradients",
                {check_cd_identities(), check_cd_gradient(false), check_cd_gradient(true), check_cmi_gradient(),
                 check_opt_stack_gradient(Activation::sparsemax), check_opt_stack_gradient(Activation::softmax),
                 check_mix_gradient(), check_batch_loss_gradient("td_loss gradient", {0.0, 0.0, 0.99, kKlClamp}),
                 check_batch_loss_gradient("total loss gradient", {0.5, 0.1, 0.99, kKlClamp})}};
  const double t = clock.seconds();
  s.results.push_back({"suite runtime under 60 s", t < 60.0, detail::str(t, " s")});
  return s;
}

// ---------------------------------------------------------------------------
// cmi

/// I(w;t|o) >= H(w|o) + E[log q(w|t,o)] for arbitrary q, with equality at the
/// true posterior; the gap equals the expected KL from the posterior to q.
inline CheckResult check_cmi_bound(int joints = 100, int qs_per_joint = 20, std::uint64_t seed = 21) {
  detail::Stopwatch clock;
  Rng rng(seed);
  double eq_err = 0.0;
  double worst_slack = std::numeric_limits<double>::infinity();
  double gap_err = 0.0;
  for (int k = 0; k < joints; ++k) {
    const auto j = oracle::DiscreteJoint::random(3, 4, 2, rng);
    const double mi = oracle::conditional_mutual_information(j);
    const double h = oracle::conditional_entropy(j);
    std::vector<double> post(j.p.size());
    for (int w = 0; w < 3; ++w) {
      for (int t = 0; t < 4; ++t) {
        for (int o = 0; o < 2; ++o) post[static_cast<std::size_t>((w * 4 + t) * 2 + o)] = j.posterior(w, t, o);
      }
    }
    eq_err = std::max(eq_err, std::abs(mi - (h + oracle::expected_log_q(j, post))));
    for (int r = 0; r < qs_per_joint; ++r) {
      std::vector<double> q(j.p.size());
      double expected_kl = 0.0;
      for (int t = 0; t < 4; ++t) {
        for (int o = 0; o < 2; ++o) {
          Vector qv(3), pv(3);
          for (int w = 0; w < 3; ++w) {
            qv[w] = std::uniform_real_distribution<double>(1e-3, 1.0)(rng);
            pv[w] = j.posterior(w, t, o);
          }
          qv /= qv.sum();
          for (int w = 0; w < 3; ++w) q[static_cast<std::size_t>((w * 4 + t) * 2 + o)] = qv[w];
          expected_kl += j.p_to(t, o) * categorical_kl(ProbabilityVector::from(pv), ProbabilityVector::from(qv));
        }
      }
      const double bound = h + oracle::expected_log_q(j, q);
      worst_slack = std::min(worst_slack, mi - bound);
      gap_err = std::max(gap_err, std::abs((mi - bound) - expected_kl));
    }
  }
  const double t = clock.seconds();
  return {"lower bound on enumerable joints", eq_err <= 1e-9 && worst_slack >= -1e-12 && gap_err <= 1e-9 && t < 10.0,
          detail::str(joints, " joints (|w|=3,|t|=4,|o|=2) x ", qs_per_joint, " q: min slack ", worst_slack,
                      ", equality err at posterior ", eq_err, ", gap vs expected KL err ", gap_err, ", ", t, " s")};
}

inline CheckResult check_cmi_closed_forms() {
  const int N = 4;
  const Vector h = Vector::Constant(3, 0.5);
  const Vector pooled = Vector::Constant(2, -0.2);
  Vector one_hot = Vector::Zero(N);
  one_hot[2] = 1.0;
  const double uniform = cmi_loss(ProbabilityVector::from(one_hot), h, pooled, Matrix::Zero(5, N), Vector::Zero(N));
  const Vector blend{{0.1, 0.2, 0.3, 0.4}};
  const double same = cmi_loss(ProbabilityVector::from(blend), h, pooled, Matrix::Zero(5, N), blend.array().log().matrix());
  const bool ok = std::abs(uniform - std::log(4.0)) <= 1e-9 && std::abs(same) <= 1e-12;
  return {"cmi_loss closed forms", ok, detail::str("one-hot vs uniform ", uniform, " (ln 4 = ", std::log(4.0), "), q = blend ", same)};
}

inline CheckResult check_cmi_head_gradient() {
  Rng rng(22);
  const int N = 4, d_h = 3, d = 2;
  ParamSet ps;
  UtilityLayout l;
  l.history_head = add_linear(ps, "history_head", d_h + d, N, rng);
  const Matrix blend{{0.7, 0.1, 0.1, 0.1}};
  const Matrix h = detail::random_matrix(1, d_h, 1.0, rng);
  const Matrix pooled = detail::random_matrix(1, d, 1.0, rng);
  auto loss = [&](Binder<double>& b) {
    auto& g = b.graph();
    return cmi_term(b, l, g.constant(blend), g.constant(h), g.constant(pooled), kKlClamp);
  };
  ParamSet work = ps;
  work.zero_grad();
  {
    ad::Graph<double> g(true);
    Binder<double> b(g, work, true);
    g.backward(loss(b));
    b.accumulate_grads(work);
  }
  const double norm = work.grad_norm();
  CheckResult fd = detail::gradient_result("", detail::param_gradient_check(ps, loss));
  return {"history_head gradient is nonzero when blend != q", norm > 1e-6 && fd.passed,
          detail::str("|grad history_head| = ", norm, "; ", fd.detail)};
}

inline SuiteReport cmi_suite() {
  return {"cmi", {check_cmi_bound(), check_cmi_closed_forms(), check_cmi_head_gradient()}};
}

// ---------------------------------------------------------------------------
// mixer

inline CheckResult check_mixer_monotonicity(int draws = 1000, std::uint64_t seed = 31) {
  detail::Stopwatch clock;
  Rng rng(seed);
  MixerConfig cfg;
  cfg.opt.d_in = env::kStateFeatures;
  cfg.opt.d_x = 16;
  cfg.opt.n_prototypes = 4;
  cfg.opt.n_layers = 2;
  cfg.opt.d_ff = 16;
  cfg.max_agents = 4;
  cfg.d_mix = 8;
  env::ScenarioFamily family;
  double min_grad = std::numeric_limits<double>::infinity();
  double min_step = std::numeric_limits<double>::infinity();
  for (int i = 0; i < draws; ++i) {
    ParamSet ps;
    Rng init(rng());
    const MixerLayout l = add_mixer(ps, cfg, init);
    const double scale = std::exp(std::uniform_real_distribution<double>(std::log(0.1), std::log(10.0))(rng));
    std::vector<double> flat = ps.flat_values();
    for (double& v : flat) v *= scale;
    ps.assign_flat(flat);

    env::PredatorPrey world(family, rng());
    world.reset(i % 2 == 0 ? env::Split::train : env::Split::unseen_both);
    const env::GlobalState st = world.state();
    const int A = world.task().n_agents;
    const Vector q = detail::random_vector(A, 5.0, rng);

    ad::Graph<double> g(true);
    Binder<double> bind(g, ps, false);
    Matrix qs = Matrix::Zero(1, cfg.max_agents);
    qs.leftCols(A) = q.transpose();
    ad::Var<double> qv = g.leaf(qs, -1);
    ad::SiteLayout sites{1, static_cast<int>(st.entity_features.rows()), {}};
    for (Eigen::Index e = 0; e < st.entity_mask.size(); ++e) sites.mask.push_back(st.entity_mask[e] ? 1 : 0);
    auto t = mixer_forward(bind, l, cfg, qv, g.constant(st.entity_features), sites);
    g.backward(t.q_tot);
    min_grad = std::min(min_grad, g.grad(qv).leftCols(A).minCoeff());

    const double base = mix(std::span<const double>(q.data(), A), st, ps, l, cfg);
    for (int a = 0; a < A; ++a) {
      Vector q2 = q;
      q2[a] += 1.0;
      min_step = std::min(min_step, mix(std::span<const double>(q2.data(), A), st, ps, l, cfg) - base);
    }
  }
  const double t = clock.seconds();
  return {"monotone in every agent value", min_grad >= -1e-12 && min_step >= -1e-12,
          detail::str(draws, " random (state, params) draws: min dQtot/dQa ", min_grad, ", min Qtot(q+e_a)-Qtot(q) ",
                      min_step, ", ", t, " s")};
}

inline CheckResult check_mixer_degenerate() {
  Rng rng(32);
  MixerConfig cfg;
  cfg.opt.d_in = env::kStateFeatures;
  cfg.opt.d_x = 8;
  cfg.opt.n_prototypes = 2;
  cfg.opt.n_layers = 1;
  cfg.opt.d_ff = 8;
  cfg.max_agents = 3;
  cfg.d_mix = 4;
  ParamSet ps;
  const MixerLayout l = add_mixer(ps, cfg, rng);
  for (const LinearLayout* lin : {&l.w1, &l.b1, &l.w2, &l.b2}) {
    ps.value(lin->w).setZero();
    ps.value(lin->b).setZero();
  }
  ps.value(l.b2.b)(0, 0) = 1.75;
  env::PredatorPrey world(env::ScenarioFamily{}, 5);
  world.reset(env::Split::train);
  double err = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Vector q = detail::random_vector(2, 10.0, rng);
    err = std::max(err, std::abs(mix(std::span<const double>(q.data(), 2), world.state(), ps, l, cfg) - 1.75));
  }
  return {"zero hypernetworks except final bias give that bias", err <= 1e-12, detail::str("max |Qtot - b| ", err)};
}

inline CheckResult check_vdn_and_targets() {
  const std::vector<double> a{1, 2, 3}, b{-1, 1};
  bool ok = vdn_mix(a) == 6.0 && vdn_mix(b) == 0.0;
  try {
    vdn_mix(std::span<const double>());
    ok = false;
  } catch (const invalid_input&) {
  }
  const double y1 = td_target(1.0, false, 2.0, 0.99);
  const double y2 = td_target(5.0, true, 123.0, 0.99);
  const std::vector<double> r{1.0, -0.05}, nq{2.0, 7.5};
  const std::vector<std::uint8_t> term{0, 1};
  const std::vector<double> got = td_targets(r, term, nq, 0.99);
  const std::vector<double> want = oracle::td_targets_loop(r, {false, true}, nq, 0.99);
  double loop_err = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) loop_err = std::max(loop_err, std::abs(got[i] - want[i]));
  const double mse = (2.98 - 2.0) * (2.98 - 2.0);
  ok = ok && std::abs(y1 - 2.98) <= 1e-12 && y2 == 5.0 && loop_err <= 1e-12 && std::abs(mse - 0.9604) <= 1e-12;
  return {"vdn sums and td targets", ok,
          detail::str("vdn (1,2,3)=", vdn_mix(a), ", td 2.98 -> ", y1, ", terminal -> ", y2, ", loop err ", loop_err)};
}

inline CheckResult check_target_sync() {
  Rng rng(33);
  MixerConfig cfg;
  cfg.opt.d_in = env::kStateFeatures;
  cfg.opt.d_x = 8;
  cfg.opt.n_prototypes = 2;
  cfg.opt.n_layers = 1;
  cfg.opt.d_ff = 8;
  cfg.max_agents = 3;
  cfg.d_mix = 4;
  ParamSet live;
  const MixerLayout l = add_mixer(live, cfg, rng);
  ParamSet target = live;
  std::vector<double> v = target.flat_values();
  for (double& x : v) x += 0.1;
  target.assign_flat(v);
  env::PredatorPrey world(env::ScenarioFamily{}, 6);
  world.reset(env::Split::train);
  const std::vector<double> q{0.3, -1.0};
  const bool differ = mix(q, world.state(), live, l, cfg) != mix(q, world.state(), target, l, cfg);
  sync_target(live, target);
  const bool equal = mix(q, world.state(), live, l, cfg) == mix(q, world.state(), target, l, cfg);
  sync_target(live, target);
  const bool idempotent = target.values_equal(live);
  return {"target sync is a bit-exact copy", differ && equal && idempotent,
          detail::str("differ before ", differ, ", equal after ", equal, ", idempotent ", idempotent)};
}

inline SuiteReport mixer_suite() {
  return {"mixer", {check_mixer_monotonicity(), check_mixer_degenerate(), check_vdn_and_targets(), check_target_sync()}};
}

inline std::vector<std::string> suite_names() { return {"sparsemax", "gradients", "cmi", "mixer"}; }

inline SuiteReport run_suite(const std::string& name) {
  if (name == "sparsemax") return sparsemax_suite();
  if (name == "gradients") return gradients_suite();
  if (name == "cmi") return cmi_suite();
  if (name == "mixer") return mixer_suite();
  throw invalid_input("unknown suite '" + name + "'; valid suites: sparsemax, gradients, cmi, mixer");
}

}  // namespace opt::checks

#endif  // OPT_CHECKS_SUITES_HPP
