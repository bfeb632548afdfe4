#ifndef OPT_OPT_MODULE_HPP
#define OPT_OPT_MODULE_HPP

// The interaction-pattern block: entity embedding, per-prototype QKV
// projection, sparse prototype attention, contrastive disagreement loss,
// prototype aggregation and restructuring, stacked into residual layers.
//
// Two routes are provided. The functions taking plain Eigen values evaluate
// one site (one entity set) directly and serve as the readable reference.
// opt_stack_forward() evaluates many sites at once on the autograd tape and is
// what the networks train through; tests hold the two routes equal.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/autograd.hpp"
#include "opt/error.hpp"
#include "opt/numerics.hpp"
#include "opt/params.hpp"

namespace opt {

using ad::Activation;

struct OptConfig {
  int d_in = 8;          // raw entity feature width d_e
  int d_x = 32;          // embedding / prototype width
  int n_prototypes = 4;  // N
  int n_layers = 2;      // K
  int d_ff = 32;         // hidden width of the entity-wise feed-forward
  Activation activation = Activation::sparsemax;
  bool cosine_cd = false;
};

struct OptLayerLayout {
  int wq = -1, wk = -1, wv = -1;  // each d_x x (N*d_x), prototype n in column block n
  LinearLayout aggregator;        // d_x -> N
  LinearLayout ff_in;             // d_x -> d_ff
  LinearLayout ff_out;            // d_ff -> d_x
};

struct OptStackLayout {
  LinearLayout embed;  // d_in -> d_x
  std::vector<OptLayerLayout> layers;
};

inline OptStackLayout add_opt_stack(ParamSet& ps, const std::string& prefix, const OptConfig& cfg, Rng& rng) {
  if (cfg.n_prototypes < 1 || cfg.n_layers < 1 || cfg.d_x < 1 || cfg.d_in < 1 || cfg.d_ff < 1) {
    throw invalid_input("OPT stack dimensions must be positive");
  }
  OptStackLayout l;
  l.embed = add_linear(ps, prefix + ".embed", cfg.d_in, cfg.d_x, rng);
  const int d = cfg.d_x, nd = cfg.n_prototypes * cfg.d_x;
  for (int k = 0; k < cfg.n_layers; ++k) {
    const std::string p = prefix + ".layer" + std::to_string(k);
    OptLayerLayout layer;
    layer.wq = ps.add(p + ".wq", uniform_init(d, nd, rng));
    layer.wk = ps.add(p + ".wk", uniform_init(d, nd, rng));
    layer.wv = ps.add(p + ".wv", uniform_init(d, nd, rng));
    layer.aggregator = add_linear(ps, p + ".aggregator", d, cfg.n_prototypes, rng);
    layer.ff_in = add_linear(ps, p + ".ff_in", d, cfg.d_ff, rng);
    layer.ff_out = add_linear(ps, p + ".ff_out", cfg.d_ff, d, rng);
    l.layers.push_back(layer);
  }
  return l;
}

// ---------------------------------------------------------------------------
// Reference (single-site) route

/// Embedded entity set; padded rows are zero.
struct EntityEmbedding {
  Matrix x;
  Mask entity_mask;
};

/// Query, key and value projections of one prototype.
struct PrototypeWeights {
  Matrix wq, wk, wv;
};

struct Qkv {
  Matrix q, k, v;
};

/// One attention matrix per prototype (M x M) and the values it mixes (M x d_x).
struct PrototypeSet {
  std::vector<Matrix> attention;
  std::vector<Matrix> values;
};

struct Aggregation {
  Vector pooled;  // mean of the unmasked rows
  ProbabilityVector blend;
};

struct OptLayerWeights {
  std::vector<PrototypeWeights> prototypes;
  Matrix agg_w;
  Vector agg_b;
  Matrix ff_in_w;
  Vector ff_in_b;
  Matrix ff_out_w;
  Vector ff_out_b;
};

struct OptLayerResult {
  EntityEmbedding y;
  ProbabilityVector blend;
  Vector pooled_input;
  double cd = 0.0;
  PrototypeSet prototypes;
};

/// Multiply-accumulate counter for the complexity audit.
struct MacCounter {
  std::uint64_t macs = 0;
};

namespace detail {

inline void count(MacCounter* c, std::uint64_t n) {
  if (c != nullptr) c->macs += n;
}

inline void require_mask_rows(const Matrix& m, const Mask& mask, const char* what) {
  if (mask.size() != m.rows()) throw invalid_input(std::string(what) + ": mask length does not match rows");
}

}  // namespace detail

inline OptLayerWeights layer_weights(const ParamSet& ps, const OptLayerLayout& l, const OptConfig& cfg) {
  OptLayerWeights w;
  const int d = cfg.d_x;
  for (int n = 0; n < cfg.n_prototypes; ++n) {
    w.prototypes.push_back({ps.value(l.wq).middleCols(n * d, d), ps.value(l.wk).middleCols(n * d, d),
                            ps.value(l.wv).middleCols(n * d, d)});
  }
  w.agg_w = ps.value(l.aggregator.w);
  w.agg_b = ps.value(l.aggregator.b).row(0).transpose();
  w.ff_in_w = ps.value(l.ff_in.w);
  w.ff_in_b = ps.value(l.ff_in.b).row(0).transpose();
  w.ff_out_w = ps.value(l.ff_out.w);
  w.ff_out_b = ps.value(l.ff_out.b).row(0).transpose();
  return w;
}

/// Row-wise ReLU(raw W + b), padded rows zeroed.
inline EntityEmbedding embed_entities(const Matrix& raw, const Mask& entity_mask, const Matrix& w,
                                      const Vector& b, MacCounter* counter = nullptr) {
  detail::require_mask_rows(raw, entity_mask, "embed_entities");
  if (raw.cols() != w.rows() || w.cols() != b.size()) throw invalid_input("embed_entities: dimension mismatch");
  if (!raw.allFinite()) throw invalid_input("embed_entities: non-finite input");
  EntityEmbedding e;
  e.x = ((raw * w).rowwise() + b.transpose()).cwiseMax(0.0);
  for (Eigen::Index r = 0; r < e.x.rows(); ++r) {
    if (!entity_mask[r]) e.x.row(r).setZero();
  }
  e.entity_mask = entity_mask;
  detail::count(counter, static_cast<std::uint64_t>(raw.rows() * raw.cols() * w.cols()));
  return e;
}

inline Qkv project_qkv(const EntityEmbedding& x, const PrototypeWeights& w, MacCounter* counter = nullptr) {
  const Eigen::Index d = x.x.cols();
  for (const Matrix* m : {&w.wq, &w.wk, &w.wv}) {
    if (m->rows() != d) throw invalid_input("project_qkv: weight rows must equal d_x");
  }
  detail::count(counter, static_cast<std::uint64_t>(x.x.rows() * d * (w.wq.cols() + w.wk.cols() + w.wv.cols())));
  return {x.x * w.wq, x.x * w.wk, x.x * w.wv};
}

/// Per prototype: attention = act(q k^T / sqrt(d_x)) row-wise over unmasked
/// columns, and the attended values attention * v.
inline PrototypeSet disentangle(const EntityEmbedding& x, std::span<const PrototypeWeights> prototypes,
                                Activation activation, MacCounter* counter = nullptr) {
  if (prototypes.empty()) throw invalid_input("disentangle: need at least one prototype");
  if (!x.entity_mask.any()) throw invalid_input("disentangle: every entity is masked");
  const Eigen::Index M = x.x.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(x.x.cols()));
  PrototypeSet out;
  for (const auto& w : prototypes) {
    const Qkv qkv = project_qkv(x, w, counter);
    const Matrix logits = qkv.q * qkv.k.transpose() * inv_sqrt;
    detail::count(counter, static_cast<std::uint64_t>(M * M * qkv.q.cols()));
    Matrix p = Matrix::Zero(M, M);
    for (Eigen::Index i = 0; i < M; ++i) {
      if (!x.entity_mask[i]) continue;
      const Vector row = logits.row(i).transpose();
      const ProbabilityVector pr = activation == Activation::sparsemax ? sparsemax(row, x.entity_mask)
                                                                       : softmax(row, x.entity_mask);
      p.row(i) = pr.values().transpose();
    }
    out.values.push_back(p * qkv.v);
    detail::count(counter, static_cast<std::uint64_t>(M * M * qkv.v.cols()));
    out.attention.push_back(std::move(p));
  }
  return out;
}

/// Contrastive disagreement loss: mean over prototypes n and unmasked
/// entities e of -log(exp(s_nn) / sum_i exp(s_ni)), where s_ni is the dot
/// product of row e of prototype n's and prototype i's attended values.
inline double cd_loss(std::span<const Matrix> pv, const Mask& entity_mask, bool cosine = false) {
  if (pv.empty()) throw invalid_input("cd_loss: need at least one prototype");
  const Eigen::Index N = static_cast<Eigen::Index>(pv.size());
  const Eigen::Index M = pv.front().rows();
  detail::require_mask_rows(pv.front(), entity_mask, "cd_loss");
  double total = 0.0;
  int count = 0;
  for (Eigen::Index e = 0; e < M; ++e) {
    if (!entity_mask[e]) continue;
    Matrix u(N, pv.front().cols());
    for (Eigen::Index n = 0; n < N; ++n) {
      u.row(n) = pv[static_cast<std::size_t>(n)].row(e);
      if (cosine) u.row(n) /= std::max(u.row(n).norm(), 1e-12);
    }
    const Matrix s = u * u.transpose();
    for (Eigen::Index n = 0; n < N; ++n) {
      const double mx = s.row(n).maxCoeff();
      const double lse = mx + std::log((s.row(n).array() - mx).exp().sum());
      total += lse - s(n, n);
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

/// Mean-pools the unmasked rows and maps the pooled vector through
/// softmax(x W + b) to prototype weights.
inline Aggregation aggregate_weights(const EntityEmbedding& x, const Matrix& w, const Vector& b,
                                     MacCounter* counter = nullptr) {
  if (!x.entity_mask.any()) throw invalid_input("aggregate_weights: every entity is masked");
  if (w.rows() != x.x.cols() || w.cols() != b.size()) throw invalid_input("aggregate_weights: dimension mismatch");
  Vector pooled = Vector::Zero(x.x.cols());
  int c = 0;
  for (Eigen::Index r = 0; r < x.x.rows(); ++r) {
    if (x.entity_mask[r]) {
      pooled += x.x.row(r).transpose();
      ++c;
    }
  }
  pooled /= c;
  detail::count(counter, static_cast<std::uint64_t>(x.x.rows() * x.x.cols() + w.rows() * w.cols()));
  const Vector logits = w.transpose() * pooled + b;
  return {pooled, softmax(logits)};
}

/// Blend-weighted sum of the prototypes' attended values.
inline Matrix restructure(const PrototypeSet& prototypes, const ProbabilityVector& blend,
                          MacCounter* counter = nullptr) {
  if (static_cast<Eigen::Index>(prototypes.values.size()) != blend.size() || prototypes.values.empty()) {
    throw invalid_input("restructure: prototype count does not match blend");
  }
  Matrix y = Matrix::Zero(prototypes.values.front().rows(), prototypes.values.front().cols());
  for (std::size_t n = 0; n < prototypes.values.size(); ++n) {
    y += blend[static_cast<Eigen::Index>(n)] * prototypes.values[n];
  }
  detail::count(counter, static_cast<std::uint64_t>(prototypes.values.size() * y.size()));
  return y;
}

/// One residual layer: the restructured prototype output is added to the
/// input, then an entity-wise two-layer ReLU feed-forward map is added on top.
/// Padded rows stay zero.
inline OptLayerResult opt_layer_forward(const EntityEmbedding& x, const OptLayerWeights& w, Activation activation,
                                        bool cosine_cd = false, MacCounter* counter = nullptr) {
  OptLayerResult r;
  Aggregation agg = aggregate_weights(x, w.agg_w, w.agg_b, counter);
  r.prototypes = disentangle(x, w.prototypes, activation, counter);
  r.cd = cd_loss(r.prototypes.values, x.entity_mask, cosine_cd);
  const Matrix h = x.x + restructure(r.prototypes, agg.blend, counter);
  const Matrix hidden = ((h * w.ff_in_w).rowwise() + w.ff_in_b.transpose()).cwiseMax(0.0);
  Matrix y = h + ((hidden * w.ff_out_w).rowwise() + w.ff_out_b.transpose());
  detail::count(counter, static_cast<std::uint64_t>(h.rows() * w.ff_in_w.size() + h.rows() * w.ff_out_w.size()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (!x.entity_mask[i]) y.row(i).setZero();
  }
  r.y = {std::move(y), x.entity_mask};
  r.blend = std::move(agg.blend);
  r.pooled_input = std::move(agg.pooled);
  return r;
}

/// KL(blend || q), where q = softmax([h_prev, pooled] W + b) predicts the
/// blend weights from the agent's previous hidden state.
inline double cmi_loss(const ProbabilityVector& blend, const Vector& h_prev, const Vector& pooled,
                       const Matrix& head_w, const Vector& head_b, double clamp = kKlClamp) {
  if (head_w.rows() != h_prev.size() + pooled.size() || head_w.cols() != blend.size() || head_b.size() != blend.size()) {
    throw invalid_input("cmi_loss: dimension mismatch");
  }
  Vector joint(h_prev.size() + pooled.size());
  joint << h_prev, pooled;
  const Vector logits = head_w.transpose() * joint + head_b;
  return categorical_kl(blend, softmax(logits), clamp);
}

// ---------------------------------------------------------------------------
// Batched (autograd) route

template <typename T>
struct OptStackTrace {
  ad::Var<T> output;                       // (S*M) x d_x
  std::vector<ad::Var<T>> blend;           // per layer, S x N
  std::vector<ad::Var<T>> pooled_input;    // per layer, S x d_x
  std::vector<ad::Var<T>> cd;              // per layer, 1 x 1
  std::vector<ad::Var<T>> prototype_values;  // per layer, (S*M) x (N*d_x); aux holds P
};

/// Embeds `raw` ((S*M) x d_in) and runs every layer of the stack.
template <typename T>
OptStackTrace<T> opt_stack_forward(Binder<T>& bind, const OptStackLayout& layout, const OptConfig& cfg,
                                   ad::Var<T> raw, const ad::SiteLayout& sites) {
  if (raw.cols() != cfg.d_in) throw invalid_input("opt_stack_forward: feature width mismatch");
  OptStackTrace<T> trace;
  ad::Var<T> x = ad::mask_rows(ad::relu(bind.linear(raw, layout.embed)), sites.mask);
  for (const auto& layer : layout.layers) {
    ad::Var<T> pooled = ad::group_mean(x, sites);
    ad::Var<T> blend = ad::softmax_rows(bind.linear(pooled, layer.aggregator));
    ad::Var<T> q = ad::matmul(x, bind(layer.wq));
    ad::Var<T> k = ad::matmul(x, bind(layer.wk));
    ad::Var<T> v = ad::matmul(x, bind(layer.wv));
    ad::Var<T> pv = ad::attention(q, k, v, sites, cfg.n_prototypes, cfg.d_x, cfg.activation);
    ad::Var<T> h = ad::add(x, ad::restructure(pv, blend, sites, cfg.n_prototypes, cfg.d_x));
    ad::Var<T> ff = bind.linear(ad::relu(bind.linear(h, layer.ff_in)), layer.ff_out);
    x = ad::mask_rows(ad::add(h, ff), sites.mask);
    trace.blend.push_back(blend);
    trace.pooled_input.push_back(pooled);
    trace.cd.push_back(ad::cd_loss(pv, sites, cfg.n_prototypes, cfg.d_x, cfg.cosine_cd));
    trace.prototype_values.push_back(pv);
  }
  trace.output = x;
  return trace;
}

}  // namespace opt

#endif  // OPT_OPT_MODULE_HPP
