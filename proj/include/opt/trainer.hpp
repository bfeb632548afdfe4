#ifndef OPT_TRAINER_HPP
#define OPT_TRAINER_HPP

// Training loop: episode collection with epsilon-greedy decentralised
// execution, an episode replay buffer, the batched total loss
// (TD + alpha * CD + beta * CMI), target syncing, greedy evaluation,
// metrics.csv logging and binary checkpoints.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/agent.hpp"
#include "opt/autograd.hpp"
#include "opt/config.hpp"
#include "opt/env.hpp"
#include "opt/error.hpp"
#include "opt/mixer.hpp"
#include "opt/opt_module.hpp"
#include "opt/params.hpp"

namespace opt {

/// Independent 64-bit seed for stream `stream` of a run seeded with `seed` (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Model

struct ModelSpec {
  UtilityConfig utility;
  MixerConfig mixer;
  int max_entities = 0;
};

inline ModelSpec model_spec(const RunConfig& cfg) {
  OptConfig o;
  o.d_x = cfg.model.d_x;
  o.n_prototypes = cfg.model.n_prototypes;
  o.n_layers = cfg.model.n_layers;
  o.d_ff = cfg.model.d_ff;
  o.activation = cfg.activation();
  o.cosine_cd = cfg.model.cosine_cd;
  ModelSpec s;
  s.utility.opt = o;
  s.utility.opt.d_in = env::kObsFeatures;
  s.utility.d_h = cfg.model.d_h;
  s.mixer.opt = o;
  s.mixer.opt.d_in = env::kStateFeatures;
  s.mixer.max_agents = cfg.env.max_agents();
  s.mixer.d_mix = cfg.model.d_mix;
  s.mixer.kind = cfg.model.mixer;
  s.max_entities = cfg.env.max_entities();
  return s;
}

/// Utility and mixer parameters in one set.
struct Model {
  ModelSpec spec;
  ParamSet params;
  UtilityLayout utility;
  MixerLayout mixer;
};

inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  Model m;
  m.spec = spec;
  Rng rng(seed);
  m.utility = add_utility(m.params, spec.utility, rng);
  m.mixer = add_mixer(m.params, spec.mixer, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Episodes

/// One finished episode. World snapshots are stored and observations, states
/// and availability masks are re-derived from them on demand.
struct Episode {
  env::TaskSpec task;
  int max_entities = 0;
  std::vector<env::WorldState> worlds;   // length() + 1 snapshots
  std::vector<std::vector<int>> actions;  // length() x n_agents
  std::vector<double> rewards;            // length()
  bool win = false;

  int length() const { return static_cast<int>(rewards.size()); }
  int n_agents() const { return task.n_agents; }
  /// Termination (as opposed to horizon truncation) happens only on a win.
  bool terminated(int t) const { return win && t == length() - 1; }
  env::Observation observation(int t, int agent) const {
    return env::observe(task, worlds.at(static_cast<std::size_t>(t)), agent, max_entities);
  }
  env::GlobalState state(int t) const { return env::global_state(task, worlds.at(static_cast<std::size_t>(t)), max_entities); }
  bool capture_available(int t, int agent) const {
    return env::capture_available(worlds.at(static_cast<std::size_t>(t)), agent);
  }
  double total_return() const {
    double s = 0.0;
    for (double r : rewards) s += r;
    return s;
  }
};

/// Fixed-capacity FIFO of episodes.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw invalid_input("replay buffer capacity must be positive");
  }

  void push(Episode e) {
    if (episodes_.size() == capacity_) episodes_.pop_front();
    episodes_.push_back(std::move(e));
  }

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Episode& operator[](std::size_t i) const { return episodes_[i]; }

  /// `n` distinct episodes chosen uniformly (partial Fisher-Yates).
  std::vector<const Episode*> sample(std::size_t n, Rng& rng) const {
    if (n > episodes_.size()) throw invalid_state("replay buffer holds fewer episodes than requested");
    std::vector<std::size_t> idx(episodes_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<const Episode*> out;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, idx.size() - 1)(rng);
      std::swap(idx[i], idx[j]);
      out.push_back(&episodes_[idx[i]]);
    }
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

// ---------------------------------------------------------------------------
// Acting

/// Masked action values of all agents for one step; advances `h` (A x d_h).
inline Matrix act_values(const Model& m, std::span<const env::Observation> obs, Matrix& h) {
  ad::Graph<double> g(false);
  Binder<double> bind(g, m.params, false);
  auto t = utility_step(bind, m.utility, m.spec.utility, obs, g.constant(h));
  h = t.h.value();
  Matrix q = t.q.value();
  for (std::size_t a = 0; a < obs.size(); ++a) {
    for (Eigen::Index i = 0; i < q.cols(); ++i) {
      if (!obs[a].available_actions[i]) q(static_cast<Eigen::Index>(a), i) = kUnavailable;
    }
  }
  return q;
}

/// Chooses a joint action from the current observations.
using Policy = std::function<std::vector<int>(const std::vector<env::Observation>&)>;

/// Plays one episode on a freshly sampled task of `split`.
inline Episode run_episode(env::PredatorPrey& world, env::Split split, const Policy& policy) {
  Episode ep;
  auto obs = world.reset(split);
  ep.task = world.task();
  ep.max_entities = world.family().max_entities();
  ep.worlds.push_back(world.world());
  while (true) {
    std::vector<int> joint = policy(obs);
    env::StepResult r = world.step(joint);
    ep.actions.push_back(std::move(joint));
    ep.rewards.push_back(r.reward);
    ep.worlds.push_back(world.world());
    obs = std::move(r.observations);
    if (r.done) {
      ep.win = r.win;
      return ep;
    }
  }
}

/// Epsilon-greedy policy of the shared utility network; resets its hidden
/// state whenever it sees a new episode (call reset() before each episode).
class GreedyActor {
 public:
  GreedyActor(const Model& m, double epsilon, Rng& rng) : model_(m), epsilon_(epsilon), rng_(rng) {}

  void reset(int n_agents) { h_ = Matrix::Zero(n_agents, model_.spec.utility.d_h); }

  std::vector<int> operator()(const std::vector<env::Observation>& obs) {
    if (h_.rows() != static_cast<Eigen::Index>(obs.size())) reset(static_cast<int>(obs.size()));
    const Matrix q = act_values(model_, obs, h_);
    std::vector<int> joint;
    for (std::size_t a = 0; a < obs.size(); ++a) {
      ActionValues v{q.row(static_cast<Eigen::Index>(a)).transpose(), obs[a].available_actions};
      joint.push_back(select_action(v, epsilon_, rng_));
    }
    return joint;
  }

 private:
  const Model& model_;
  double epsilon_;
  Rng& rng_;
  Matrix h_;
};

/// One epsilon-greedy episode with hidden states starting at zero.
inline Episode collect_episode(env::PredatorPrey& world, env::Split split, const Model& m, double epsilon, Rng& rng) {
  GreedyActor actor(m, epsilon, rng);
  actor.reset(0);
  return run_episode(world, split, [&](const std::vector<env::Observation>& o) { return actor(o); });
}

struct EvalResult {
  env::Split split = env::Split::train;
  int episodes = 0;
  double win_rate = 0.0;
  double mean_return = 0.0;
};

inline EvalResult evaluate_policy(const env::ScenarioFamily& family, env::Split split, int n_episodes,
                                  std::uint64_t seed, const std::function<Episode(env::PredatorPrey&)>& play) {
  if (n_episodes < 1) throw invalid_input("evaluation needs at least one episode");
  env::PredatorPrey world(family, derive_seed(seed, 1));
  EvalResult r;
  r.split = split;
  r.episodes = n_episodes;
  int wins = 0;
  double ret = 0.0;
  for (int i = 0; i < n_episodes; ++i) {
    const Episode ep = play(world);
    wins += ep.win ? 1 : 0;
    ret += ep.total_return();
  }
  r.win_rate = static_cast<double>(wins) / n_episodes;
  r.mean_return = ret / n_episodes;
  return r;
}

/// Greedy (epsilon = 0) evaluation on `n_episodes` tasks drawn from `split`.
inline EvalResult evaluate(const Model& m, const env::ScenarioFamily& family, env::Split split, int n_episodes,
                           std::uint64_t seed) {
  Rng rng(derive_seed(seed, 2));
  return evaluate_policy(family, split, n_episodes, seed,
                         [&](env::PredatorPrey& w) { return collect_episode(w, split, m, 0.0, rng); });
}

/// Uniformly random available actions; the reference baseline.
inline EvalResult evaluate_random(const env::ScenarioFamily& family, env::Split split, int n_episodes,
                                  std::uint64_t seed) {
  Rng rng(derive_seed(seed, 3));
  return evaluate_policy(family, split, n_episodes, seed, [&](env::PredatorPrey& w) {
    return run_episode(w, split, [&](const std::vector<env::Observation>& obs) {
      std::vector<int> joint;
      for (const auto& o : obs) {
        std::vector<int> avail;
        for (int i = 0; i < o.available_actions.size(); ++i) {
          if (o.available_actions[i]) avail.push_back(i);
        }
        joint.push_back(avail[std::uniform_int_distribution<std::size_t>(0, avail.size() - 1)(rng)]);
      }
      return joint;
    });
  });
}

// ---------------------------------------------------------------------------
// Batched loss

struct LossWeights {
  double alpha = 0.5;
  double beta = 0.1;
  double gamma = 0.99;
  double kl_clamp = kKlClamp;
};

struct LossBreakdown {
  double td = 0.0;
  double cd = 0.0;
  double cmi = 0.0;
  double total = 0.0;
};

namespace detail {

/// Agent-timestep sites of a batch in time-major order. Pair p = b * A_max + a
/// indexes the GRU rows; site_of[t * pairs + p] is the site or -1.
template <typename T>
struct UtilitySites {
  int steps = 0;
  int pairs = 0;
  ad::SiteLayout layout;
  ad::Mat<T> raw;
  std::vector<int> site_of;
  std::vector<int> self_rows;
};

/// Sites for t < length (or t <= length with `include_final`).
template <typename T>
UtilitySites<T> utility_sites(std::span<const Episode* const> batch, int max_agents, int M, bool include_final) {
  UtilitySites<T> u;
  const int B = static_cast<int>(batch.size());
  for (const Episode* e : batch) u.steps = std::max(u.steps, e->length() + (include_final ? 1 : 0));
  u.pairs = B * max_agents;
  u.site_of.assign(static_cast<std::size_t>(u.steps * u.pairs), -1);
  int S = 0;
  for (int t = 0; t < u.steps; ++t) {
    for (int b = 0; b < B; ++b) {
      const Episode& e = *batch[static_cast<std::size_t>(b)];
      if (t >= e.length() + (include_final ? 1 : 0)) continue;
      for (int a = 0; a < e.n_agents(); ++a) u.site_of[static_cast<std::size_t>(t * u.pairs + b * max_agents + a)] = S++;
    }
  }
  u.layout.sites = S;
  u.layout.entities = M;
  u.layout.mask.assign(static_cast<std::size_t>(S * M), 0);
  u.raw = ad::Mat<T>::Zero(S * M, env::kObsFeatures);
  u.self_rows.resize(static_cast<std::size_t>(S));
  for (int t = 0; t < u.steps; ++t) {
    for (int b = 0; b < B; ++b) {
      for (int a = 0; a < max_agents; ++a) {
        const int s = u.site_of[static_cast<std::size_t>(t * u.pairs + b * max_agents + a)];
        if (s < 0) continue;
        const env::Observation o = batch[static_cast<std::size_t>(b)]->observation(t, a);
        write_observation(u.raw, u.layout.mask, s, o);
        u.self_rows[static_cast<std::size_t>(s)] = s * M + o.self_index;
      }
    }
  }
  return u;
}

template <typename T>
struct UtilityUnroll {
  ad::Var<T> q;            // S x n_actions
  ad::Var<T> h_prev;       // S x d_h, hidden state entering each site
  OptStackTrace<T> stack;
};

/// OPT stack over all sites at once, then the GRU threaded through time.
template <typename T>
UtilityUnroll<T> unroll_utility(Binder<T>& bind, const Model& m, UtilitySites<T>& u) {
  auto& g = bind.graph();
  const auto& cfg = m.spec.utility;
  const int S = u.layout.sites;
  UtilityUnroll<T> r;
  r.stack = opt_stack_forward(bind, m.utility.stack, cfg.opt, g.constant(std::move(u.raw)), u.layout);
  ad::Var<T> pooled = ad::group_mean(r.stack.output, u.layout);
  ad::Var<T> gi = bind.linear(pooled, m.utility.gru.input);
  ad::Var<T> gi_ext = ad::concat_rows<T>({gi, g.constant(ad::Mat<T>::Zero(1, gi.cols()))});
  std::vector<ad::Var<T>> hs{g.constant(ad::Mat<T>::Zero(u.pairs, cfg.d_h))};
  std::vector<int> idx(static_cast<std::size_t>(u.pairs));
  for (int t = 0; t < u.steps; ++t) {
    for (int p = 0; p < u.pairs; ++p) {
      const int s = u.site_of[static_cast<std::size_t>(t * u.pairs + p)];
      idx[static_cast<std::size_t>(p)] = s < 0 ? S : s;
    }
    hs.push_back(gru_cell(bind, m.utility.gru, ad::gather_rows(gi_ext, idx), hs.back(), cfg.d_h));
  }
  ad::Var<T> H = ad::concat_rows(hs);
  std::vector<int> prev(static_cast<std::size_t>(S)), cur(static_cast<std::size_t>(S));
  for (int t = 0; t < u.steps; ++t) {
    for (int p = 0; p < u.pairs; ++p) {
      const int s = u.site_of[static_cast<std::size_t>(t * u.pairs + p)];
      if (s < 0) continue;
      prev[static_cast<std::size_t>(s)] = t * u.pairs + p;
      cur[static_cast<std::size_t>(s)] = (t + 1) * u.pairs + p;
    }
  }
  r.h_prev = ad::gather_rows(H, prev);
  r.q = action_head(bind, m.utility, ad::gather_rows(H, cur), ad::gather_rows(r.stack.output, u.self_rows));
  return r;
}

/// Mixer sites (t, b), t < length, time-major; states taken at t + offset.
template <typename T>
struct MixerSites {
  std::vector<std::pair<int, int>> tb;
  ad::SiteLayout layout;
  ad::Mat<T> raw;
};

template <typename T>
MixerSites<T> mixer_sites(std::span<const Episode* const> batch, int steps, int M, int offset) {
  MixerSites<T> ms;
  for (int t = 0; t < steps; ++t) {
    for (int b = 0; b < static_cast<int>(batch.size()); ++b) {
      if (t < batch[static_cast<std::size_t>(b)]->length()) ms.tb.emplace_back(t, b);
    }
  }
  const int J = static_cast<int>(ms.tb.size());
  ms.layout.sites = J;
  ms.layout.entities = M;
  ms.layout.mask.assign(static_cast<std::size_t>(J * M), 0);
  ms.raw = ad::Mat<T>::Zero(J * M, env::kStateFeatures);
  for (int j = 0; j < J; ++j) {
    const auto [t, b] = ms.tb[static_cast<std::size_t>(j)];
    const env::GlobalState st = batch[static_cast<std::size_t>(b)]->state(t + offset);
    ms.raw.middleRows(j * M, M) = st.entity_features.cast<T>();
    for (int e = 0; e < M; ++e) ms.layout.mask[static_cast<std::size_t>(j * M + e)] = st.entity_mask[e] ? 1 : 0;
  }
  return ms;
}

}  // namespace detail

/// Total loss of a batch. With `accumulate` the gradients are added into
/// m.params' buffers; `signature` receives the piecewise signature of the
/// live forward pass (only meaningful with `accumulate`).
template <typename T>
LossBreakdown batch_loss(Model& m, const ParamSet& target, std::span<const Episode* const> batch,
                         const LossWeights& w, bool accumulate, std::uint64_t* signature = nullptr) {
  if (batch.empty()) throw invalid_input("batch_loss: empty batch");
  const int A = m.spec.mixer.max_agents;
  const int M = m.spec.max_entities;
  for (const Episode* e : batch) {
    if (e->n_agents() > A || e->max_entities != M || e->length() < 1) throw invalid_input("batch_loss: episode does not fit the model");
  }

  // Live networks.
  ad::Graph<T> g(accumulate);
  Binder<T> bind(g, m.params, accumulate);
  auto live_sites = detail::utility_sites<T>(batch, A, M, false);
  const int S = live_sites.layout.sites;
  const int pairs = live_sites.pairs;
  const int steps = live_sites.steps;
  std::vector<int> site_of = live_sites.site_of;
  std::vector<int> chosen_actions(static_cast<std::size_t>(S));
  for (int t = 0; t < steps; ++t) {
    for (int p = 0; p < pairs; ++p) {
      const int s = site_of[static_cast<std::size_t>(t * pairs + p)];
      if (s >= 0) chosen_actions[static_cast<std::size_t>(s)] = batch[static_cast<std::size_t>(p / A)]->actions[static_cast<std::size_t>(t)][static_cast<std::size_t>(p % A)];
    }
  }
  auto live = detail::unroll_utility(bind, m, live_sites);
  ad::Var<T> chosen = ad::gather_cols(live.q, chosen_actions);
  ad::Var<T> chosen_ext = ad::concat_rows<T>({chosen, g.constant(ad::Mat<T>::Zero(1, 1))});

  auto ms = detail::mixer_sites<T>(batch, steps, M, 0);
  const int J = ms.layout.sites;
  std::vector<int> qs_idx(static_cast<std::size_t>(J * A));
  for (int j = 0; j < J; ++j) {
    const auto [t, b] = ms.tb[static_cast<std::size_t>(j)];
    for (int a = 0; a < A; ++a) {
      const int s = site_of[static_cast<std::size_t>(t * pairs + b * A + a)];
      qs_idx[static_cast<std::size_t>(j * A + a)] = s < 0 ? S : s;
    }
  }
  ad::Var<T> qs = ad::reshape(ad::gather_rows(chosen_ext, qs_idx), J, A);
  auto mixed = mixer_forward(bind, m.mixer, m.spec.mixer, qs, g.constant(std::move(ms.raw)), ms.layout);

  // Target networks: greedy next actions of the target utility network, mixed
  // by the target mixer on the next state.
  ad::Col<T> y(J);
  {
    ad::Graph<T> tg(false);
    Binder<T> tbind(tg, target, false);
    auto tsites = detail::utility_sites<T>(batch, A, M, true);
    const std::vector<int> tsite_of = tsites.site_of;
    const int tpairs = tsites.pairs;
    auto tnet = detail::unroll_utility(tbind, m, tsites);
    const ad::Mat<T>& tq = tnet.q.value();
    ad::Mat<T> next_qs = ad::Mat<T>::Zero(J, A);
    for (int j = 0; j < J; ++j) {
      const auto [t, b] = ms.tb[static_cast<std::size_t>(j)];
      const Episode& e = *batch[static_cast<std::size_t>(b)];
      for (int a = 0; a < e.n_agents(); ++a) {
        const int s = tsite_of[static_cast<std::size_t>((t + 1) * tpairs + b * A + a)];
        int best = -1;
        for (int i = 0; i < tq.cols(); ++i) {
          if (i == env::capture && !e.capture_available(t + 1, a)) continue;
          if (best < 0 || tq(s, i) > tq(s, best)) best = i;
        }
        next_qs(j, a) = tq(s, best);
      }
    }
    auto next_ms = detail::mixer_sites<T>(batch, steps, M, 1);
    auto tmixed = mixer_forward(tbind, m.mixer, m.spec.mixer, tg.constant(std::move(next_qs)),
                                tg.constant(std::move(next_ms.raw)), next_ms.layout);
    for (int j = 0; j < J; ++j) {
      const auto [t, b] = ms.tb[static_cast<std::size_t>(j)];
      const Episode& e = *batch[static_cast<std::size_t>(b)];
      y(j) = static_cast<T>(td_target(e.rewards[static_cast<std::size_t>(t)], e.terminated(t),
                                      static_cast<double>(tmixed.q_tot.value()(j, 0)), w.gamma));
    }
  }
  ad::Var<T> td = ad::masked_mse<T>(mixed.q_tot, y, ad::Col<T>::Ones(J));

  std::vector<ad::Var<T>> cd_terms = live.stack.cd;
  cd_terms.insert(cd_terms.end(), mixed.stack.cd.begin(), mixed.stack.cd.end());
  ad::Var<T> cd_sum = cd_terms.front();
  for (std::size_t i = 1; i < cd_terms.size(); ++i) cd_sum = ad::add(cd_sum, cd_terms[i]);
  ad::Var<T> cd = ad::scale(cd_sum, T(1) / static_cast<T>(cd_terms.size()));
  ad::Var<T> cmi = cmi_term(bind, m.utility, live.stack.blend.front(), live.h_prev, live.stack.pooled_input.front(), w.kl_clamp);

  LossBreakdown out;
  out.td = static_cast<double>(td.scalar());
  out.cd = static_cast<double>(cd.scalar());
  out.cmi = static_cast<double>(cmi.scalar());
  out.total = out.td + w.alpha * out.cd + w.beta * out.cmi;
  if (accumulate) {
    ad::Var<T> total = ad::add(ad::add(td, ad::scale(cd, static_cast<T>(w.alpha))), ad::scale(cmi, static_cast<T>(w.beta)));
    g.backward(total);
    bind.accumulate_grads(m.params);
  }
  if (signature) *signature = g.signature();
  return out;
}

inline LossWeights loss_weights(const RunConfig& cfg) {
  return {cfg.alpha(), cfg.beta(), cfg.train.gamma, cfg.loss.kl_clamp};
}

/// One optimisation step on a sampled batch; nullopt when the buffer is not ready.
inline std::optional<LossBreakdown> train_step(const ReplayBuffer& buffer, Model& m, const ParamSet& target,
                                               RmsProp& optimizer, const RunConfig& cfg, Rng& rng) {
  if (buffer.size() < static_cast<std::size_t>(cfg.train.batch)) return std::nullopt;
  const auto batch = buffer.sample(static_cast<std::size_t>(cfg.train.batch), rng);
  m.params.zero_grad();
  const LossWeights w = loss_weights(cfg);
  const LossBreakdown l = cfg.train.precision == "double" ? batch_loss<double>(m, target, batch, w, true)
                                                          : batch_loss<float>(m, target, batch, w, true);
  m.params.clip_grad_norm(cfg.train.grad_clip);
  optimizer.step(m.params);
  return l;
}

// ---------------------------------------------------------------------------
// Metrics and checkpoints

struct MetricsRow {
  long step = 0;
  long episodes = 0;
  double epsilon = 0.0;
  std::optional<LossBreakdown> loss;  // mean over gradient steps since the previous row
  EvalResult eval;
  double auc_so_far = 0.0;
  std::string variant;
};

inline const char* kMetricsHeader =
    "step,episodes,epsilon,td_loss,cd_loss,cmi_loss,total_loss,eval_split,win_rate,mean_return,auc_so_far,variant";

inline std::string format_metrics_row(const MetricsRow& r) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  std::string s = std::to_string(r.step) + "," + std::to_string(r.episodes) + "," + num(r.epsilon) + ",";
  if (r.loss) {
    s += num(r.loss->td) + "," + num(r.loss->cd) + "," + num(r.loss->cmi) + "," + num(r.loss->total) + ",";
  } else {
    s += ",,,,";
  }
  s += env::to_string(r.eval.split) + "," + num(r.eval.win_rate) + "," + num(r.eval.mean_return) + "," +
       num(r.auc_so_far) + "," + r.variant;
  return s;
}

/// Trapezoidal area under win-rate-vs-step divided by the step range; a
/// single point yields its own win rate.
inline double area_under_curve(std::span<const double> steps, std::span<const double> win_rates) {
  if (steps.size() != win_rates.size() || steps.empty()) throw invalid_input("area_under_curve: bad input");
  if (steps.size() == 1) return win_rates[0];
  const double range = steps.back() - steps.front();
  if (range <= 0.0) return win_rates.back();
  double area = 0.0;
  for (std::size_t i = 1; i < steps.size(); ++i) area += 0.5 * (win_rates[i] + win_rates[i - 1]) * (steps[i] - steps[i - 1]);
  return area / range;
}

inline constexpr char kCheckpointMagic[8] = {'O', 'P', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  long env_steps = 0;
  long episodes = 0;
  long grad_steps = 0;
  Model model;
  ParamSet target;
  std::vector<Matrix> optimizer_state;
};

namespace detail {

template <typename V>
void write_pod(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw io_error("checkpoint is truncated");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1ULL << 30)) throw io_error("checkpoint string length is implausible");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw io_error("checkpoint is truncated");
  return s;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  write_pod<std::int64_t>(out, m.rows());
  write_pod<std::int64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline void read_matrix_into(std::istream& in, Matrix& m) {
  const auto r = read_pod<std::int64_t>(in);
  const auto c = read_pod<std::int64_t>(in);
  if (r != m.rows() || c != m.cols()) throw io_error("checkpoint tensor shape does not match the configured model");
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw io_error("checkpoint is truncated");
}

inline void write_params(std::ostream& out, const ParamSet& ps) {
  write_pod<std::uint64_t>(out, ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    write_string(out, ps.name(static_cast<int>(i)));
    write_matrix(out, ps.value(static_cast<int>(i)));
  }
}

inline void read_params_into(std::istream& in, ParamSet& ps) {
  if (read_pod<std::uint64_t>(in) != ps.size()) throw io_error("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (read_string(in) != ps.name(static_cast<int>(i))) throw io_error("checkpoint parameter names do not match the model");
    read_matrix_into(in, ps.value(static_cast<int>(i)));
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, long env_steps, long episodes,
                            long grad_steps, const Model& m, const ParamSet& target, const RmsProp& opt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod<std::uint64_t>(out, config_hash(cfg));
  detail::write_string(out, write_config(cfg));
  detail::write_pod<std::int64_t>(out, env_steps);
  detail::write_pod<std::int64_t>(out, episodes);
  detail::write_pod<std::int64_t>(out, grad_steps);
  detail::write_params(out, m.params);
  detail::write_params(out, target);
  detail::write_pod<std::uint64_t>(out, opt.state().size());
  for (const auto& s : opt.state()) detail::write_matrix(out, s);
  if (!out) throw io_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot read checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw io_error(path.string() + " is not a checkpoint");
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw io_error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                   std::to_string(kCheckpointVersion) + ")");
  }
  const auto hash = detail::read_pod<std::uint64_t>(in);
  Checkpoint c;
  try {
    c.config = parse_config(detail::read_string(in), path.string() + " (embedded config)");
  } catch (const config_error& e) {
    throw io_error(e.what());
  }
  if (config_hash(c.config) != hash) throw io_error("checkpoint config hash mismatch");
  c.env_steps = detail::read_pod<std::int64_t>(in);
  c.episodes = detail::read_pod<std::int64_t>(in);
  c.grad_steps = detail::read_pod<std::int64_t>(in);
  c.model = build_model(model_spec(c.config), derive_seed(c.config.train.seed, 0));
  detail::read_params_into(in, c.model.params);
  c.target = c.model.params;
  detail::read_params_into(in, c.target);
  const auto n = detail::read_pod<std::uint64_t>(in);
  if (n != c.model.params.size()) throw io_error("checkpoint optimiser state does not match the model");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = c.model.params.value(static_cast<int>(i));
    c.optimizer_state.push_back(Matrix::Zero(v.rows(), v.cols()));
    detail::read_matrix_into(in, c.optimizer_state.back());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Trainer

class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)),
        model_((cfg_.validate(), build_model(model_spec(cfg_), derive_seed(cfg_.train.seed, 0)))),
        target_(model_.params),
        optimizer_(model_.params, {cfg_.train.lr, cfg_.train.rms_alpha, cfg_.train.rms_eps}),
        buffer_(static_cast<std::size_t>(cfg_.train.buffer)),
        world_(cfg_.env, derive_seed(cfg_.train.seed, 10)),
        act_rng_(derive_seed(cfg_.train.seed, 11)),
        sample_rng_(derive_seed(cfg_.train.seed, 12)) {}

  const RunConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const ParamSet& target() const { return target_; }
  const RmsProp& optimizer() const { return optimizer_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  long env_steps() const { return env_steps_; }
  long episodes() const { return episodes_; }
  long grad_steps() const { return grad_steps_; }
  double epsilon() const {
    return epsilon_schedule(env_steps_, {cfg_.train.epsilon_start, cfg_.train.epsilon_end, cfg_.train.epsilon_anneal});
  }

  /// Seed of the evaluation stream; every periodic evaluation replays the same task draws.
  std::uint64_t eval_seed() const { return derive_seed(cfg_.train.seed, 20); }

  /// Collects one episode and, every train_interval episodes, takes a gradient
  /// step (syncing the target every target_interval steps).
  std::optional<LossBreakdown> iterate() {
    Episode ep = collect_episode(world_, env::Split::train, model_, epsilon(), act_rng_);
    env_steps_ += ep.length();
    ++episodes_;
    buffer_.push(std::move(ep));
    if (episodes_ % cfg_.train.train_interval != 0) return std::nullopt;
    auto loss = train_step(buffer_, model_, target_, optimizer_, cfg_, sample_rng_);
    if (loss) {
      ++grad_steps_;
      if (grad_steps_ % cfg_.train.target_interval == 0) sync_target(model_.params, target_);
    }
    return loss;
  }

  EvalResult evaluate(env::Split split, int n_episodes) const {
    return opt::evaluate(model_, cfg_.env, split, n_episodes, eval_seed());
  }

  void save(const std::filesystem::path& path) const {
    save_checkpoint(path, cfg_, env_steps_, episodes_, grad_steps_, model_, target_, optimizer_);
  }

  /// Trains until total_steps env steps (or the early-stop win rate) and
  /// writes config.ini, metrics.csv and checkpoints into `out_dir`.
  std::vector<MetricsRow> run(const std::filesystem::path& out_dir, std::ostream* log = nullptr) {
    std::filesystem::create_directories(out_dir);
    {
      std::ofstream c(out_dir / "config.ini", std::ios::trunc);
      if (!c) throw io_error("cannot write " + (out_dir / "config.ini").string());
      c << write_config(cfg_);
    }
    std::ofstream csv(out_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw io_error("cannot write " + (out_dir / "metrics.csv").string());
    csv << kMetricsHeader << "\n";

    std::vector<MetricsRow> rows;
    std::vector<std::vector<double>> steps(cfg_.train.eval_splits.size()), wins(cfg_.train.eval_splits.size());
    LossBreakdown sum;
    int n_loss = 0;
    bool stop = false;
    auto log_eval = [&]() {
      for (std::size_t k = 0; k < cfg_.train.eval_splits.size(); ++k) {
        MetricsRow r;
        r.step = env_steps_;
        r.episodes = episodes_;
        r.epsilon = epsilon();
        if (n_loss > 0) r.loss = LossBreakdown{sum.td / n_loss, sum.cd / n_loss, sum.cmi / n_loss, sum.total / n_loss};
        r.eval = evaluate(cfg_.train.eval_splits[k], cfg_.train.eval_episodes);
        steps[k].push_back(static_cast<double>(env_steps_));
        wins[k].push_back(r.eval.win_rate);
        r.auc_so_far = area_under_curve(steps[k], wins[k]);
        r.variant = cfg_.train.variant;
        csv << format_metrics_row(r) << "\n";
        if (log != nullptr) *log << format_metrics_row(r) << std::endl;
        if (k == 0 && r.eval.win_rate >= cfg_.train.stop_win_rate) stop = true;
        rows.push_back(std::move(r));
      }
      csv.flush();
      sum = {};
      n_loss = 0;
    };

    log_eval();
    long next_eval = cfg_.train.eval_interval;
    long next_ckpt = cfg_.train.checkpoint_interval;
    while (env_steps_ < cfg_.train.total_steps && !stop) {
      if (auto l = iterate()) {
        sum.td += l->td;
        sum.cd += l->cd;
        sum.cmi += l->cmi;
        sum.total += l->total;
        ++n_loss;
      }
      if (env_steps_ >= next_eval) {
        log_eval();
        while (next_eval <= env_steps_) next_eval += cfg_.train.eval_interval;
      }
      if (env_steps_ >= next_ckpt) {
        save(out_dir / ("checkpoint_" + std::to_string(next_ckpt) + ".bin"));
        while (next_ckpt <= env_steps_) next_ckpt += cfg_.train.checkpoint_interval;
      }
    }
    if (!csv) throw io_error("failed writing metrics.csv");
    save(out_dir / "checkpoint.bin");
    return rows;
  }

 private:
  RunConfig cfg_;
  Model model_;
  ParamSet target_;
  RmsProp optimizer_;
  ReplayBuffer buffer_;
  env::PredatorPrey world_;
  Rng act_rng_;
  Rng sample_rng_;
  long env_steps_ = 0;
  long episodes_ = 0;
  long grad_steps_ = 0;
};

}  // namespace opt

#endif  // OPT_TRAINER_HPP
