#ifndef OPT_AUTOGRAD_HPP
#define OPT_AUTOGRAD_HPP

// A small reverse-mode tape over dense matrices. It only knows the operations
// the OPT networks need; several of them are fused and batched over "sites"
// (one site = one agent-timestep or one mixer-timestep holding M entity rows).
//
// Row layout convention for batched entity tensors: site s occupies rows
// [s*M, (s+1)*M). Prototype n of a concatenated projection occupies columns
// [n*d, (n+1)*d).

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/error.hpp"
#include "opt/numerics.hpp"

namespace opt::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Activation { sparsemax, softmax };

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Mat<T>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

/// Entity-row bookkeeping for batched attention ops.
struct SiteLayout {
  int sites = 0;
  int entities = 0;  // M, rows per site
  /// One flag per entity row (sites * entities); zero rows are padding.
  std::vector<std::uint8_t> mask;

  bool valid(Eigen::Index row) const { return mask[static_cast<std::size_t>(row)] != 0; }
  int valid_in_site(int s) const {
    int c = 0;
    for (int e = 0; e < entities; ++e) c += mask[static_cast<std::size_t>(s * entities + e)];
    return c;
  }
  std::size_t rows() const { return static_cast<std::size_t>(sites) * static_cast<std::size_t>(entities); }
};

template <typename T>
class Graph {
 public:
  /// Receives the node's accumulated output gradient and its forward value.
  using BackFn = std::function<void(const Mat<T>&, const Mat<T>&)>;

  /// With `record` false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, {}); }

  /// Trainable leaf; `slot` identifies the parameter it was bound from.
  Var<T> leaf(Mat<T> v, int slot) {
    Var<T> out = push(std::move(v), true, {});
    nodes_[static_cast<std::size_t>(out.id)].slot = slot;
    if (record_) leaves_.push_back(out.id);
    return out;
  }

  const Mat<T>& value(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool needs_grad(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  /// Gradient accumulated into `v` by backward(); empty if none reached it.
  const Mat<T>& grad(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  /// Accumulates d(loss)/d(node) for every node upstream of `loss` (1x1).
  void backward(Var<T> loss) {
    if (!record_) throw invalid_state("backward on a non-recording graph");
    if (loss.rows() != 1 || loss.cols() != 1) throw invalid_input("backward: loss must be scalar");
    acc(loss) += Mat<T>::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() > 0) n.back(n.grad, n.value);
    }
  }

  /// Trainable leaves created so far, as (slot, node) pairs.
  std::vector<std::pair<int, Var<T>>> leaves() {
    std::vector<std::pair<int, Var<T>>> out;
    for (int id : leaves_) out.emplace_back(nodes_[static_cast<std::size_t>(id)].slot, Var<T>{this, id});
    return out;
  }

  /// Hash of every piecewise decision taken so far (sparsemax supports,
  /// ReLU/abs signs). Used to flag finite-difference kinks.
  std::uint64_t signature() const { return signature_; }
  void mix_signature(std::uint64_t bits) {
    signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }

  /// Attention matrices recorded by attention(), (S*M) x (N*M).
  std::shared_ptr<const Mat<T>> aux(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].aux; }
  void set_aux(Var<T> v, std::shared_ptr<const Mat<T>> a) { nodes_[static_cast<std::size_t>(v.id)].aux = std::move(a); }

  Var<T> push(Mat<T> v, bool needs_grad, BackFn back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad && record_;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Gradient accumulator of `v`, zero-initialised on first use.
  Mat<T>& acc(Var<T> v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    BackFn back;
    bool needs_grad = false;
    int slot = -1;
    std::shared_ptr<const Mat<T>> aux;
  };
  bool record_;
  std::deque<Node> nodes_;
  std::vector<int> leaves_;
  std::uint64_t signature_ = 0;
};

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs) {
    if (v.graph->needs_grad(v)) return true;
  }
  return false;
}

template <typename T>
bool wants(Var<T> v) {
  return v.graph->needs_grad(v);
}

struct BitHasher {
  std::uint64_t h = 1469598103934665603ULL;
  void add(bool b) {
    h ^= b ? 0x9bULL : 0x35ULL;
    h *= 1099511628211ULL;
  }
};

inline void require(bool ok, const char* what) {
  if (!ok) throw invalid_input(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Mat<T> out;
  out.noalias() = a.value() * b.value();
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a).noalias() += g * b.value().transpose();
    if (detail::wants(b)) b.graph->acc(b).noalias() += a.value().transpose() * g;
  });
}

/// a + broadcast row vector b (1 x cols).
template <typename T>
Var<T> add_row(Var<T> a, Var<T> b) {
  detail::require(b.rows() == 1 && b.cols() == a.cols(), "add_row: shape mismatch");
  Mat<T> out = a.value().rowwise() + b.value().row(0);
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += g;
    if (detail::wants(b)) b.graph->acc(b) += g.colwise().sum();
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Mat<T> out = a.value() + b.value();
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += g;
    if (detail::wants(b)) b.graph->acc(b) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Mat<T> out = a.value() - b.value();
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += g;
    if (detail::wants(b)) b.graph->acc(b) -= g;
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Mat<T> out = a.value().cwiseProduct(b.value());
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += g.cwiseProduct(b.value());
    if (detail::wants(b)) b.graph->acc(b) += g.cwiseProduct(a.value());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Mat<T> out = a.value() * c;
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, c](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a) += g * c;
  });
}

/// 1 - a.
template <typename T>
Var<T> one_minus(Var<T> a) {
  Mat<T> out = (T(1) - a.value().array()).matrix();
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a) -= g;
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename T>
Var<T> relu(Var<T> a) {
  Mat<T> out = a.value().cwiseMax(T(0));
  if (a.graph->recording()) {
    detail::BitHasher h;
    const Mat<T>& v = a.value();
    for (Eigen::Index i = 0; i < v.size(); ++i) h.add(v.data()[i] > T(0));
    a.graph->mix_signature(h.h);
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a) += (a.value().array() > T(0)).select(g, T(0));
  });
}

/// ELU with alpha = 1.
template <typename T>
Var<T> elu(Var<T> a) {
  Mat<T> out = (a.value().array() > T(0)).select(a.value(), (a.value().array().exp() - T(1)).matrix());
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a) +=
        (a.value().array() > T(0)).select(g, g.cwiseProduct(a.value().array().exp().matrix()));
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Mat<T> out = a.value().array().tanh().matrix();
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>& y) mutable {
    a.graph->acc(a) += (g.array() * (T(1) - y.array().square())).matrix();
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Mat<T> out = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>& y) mutable {
    a.graph->acc(a) += (g.array() * y.array() * (T(1) - y.array())).matrix();
  });
}

template <typename T>
Var<T> abs(Var<T> a) {
  Mat<T> out = a.value().cwiseAbs();
  if (a.graph->recording()) {
    detail::BitHasher h;
    const Mat<T>& v = a.value();
    for (Eigen::Index i = 0; i < v.size(); ++i) h.add(v.data()[i] >= T(0));
    a.graph->mix_signature(h.h);
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a) += (g.array() * a.value().array().sign()).matrix();
  });
}

/// Row-wise softmax over all columns.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const Mat<T>& x = a.value();
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    kernel::softmax<T>(x.row(r), out.row(r), x.cols(), [](Eigen::Index) { return true; });
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a](const Mat<T>& g, const Mat<T>& y) mutable {
    Col<T> dots = g.cwiseProduct(y).rowwise().sum();
    a.graph->acc(a) += (y.array() * (g.colwise() - dots).array()).matrix();
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

/// Multiplies row r by mask[r] (0 or 1).
template <typename T>
Var<T> mask_rows(Var<T> a, const std::vector<std::uint8_t>& mask) {
  detail::require(static_cast<Eigen::Index>(mask.size()) == a.rows(), "mask_rows: length mismatch");
  Mat<T> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) out.row(r).setZero();
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, mask](const Mat<T>& g, const Mat<T>&) mutable {
    Mat<T>& da = a.graph->acc(a);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (mask[static_cast<std::size_t>(r)]) da.row(r) += g.row(r);
    }
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows(), "concat_cols: row mismatch");
  Mat<T> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += g.leftCols(a.cols());
    if (detail::wants(b)) b.graph->acc(b) += g.rightCols(b.cols());
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && start + n <= a.cols(), "slice_cols: out of range");
  Mat<T> out = a.value().middleCols(start, n);
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, start, n](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a).middleCols(start, n) += g;
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && start + n <= a.rows(), "slice_rows: out of range");
  Mat<T> out = a.value().middleRows(start, n);
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, start, n](const Mat<T>& g, const Mat<T>&) mutable {
    a.graph->acc(a).middleRows(start, n) += g;
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool ng = false;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || detail::wants(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  Graph<T>* gr = parts.front().graph;
  return gr->push(std::move(out), ng, [parts](const Mat<T>& g, const Mat<T>&) mutable {
    Eigen::Index at = 0;
    for (auto& p : parts) {
      if (detail::wants(p)) p.graph->acc(p) += g.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

/// out.row(i) = a.row(index[i]).
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
  Mat<T> out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] >= 0 && index[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, index](const Mat<T>& g, const Mat<T>&) mutable {
    Mat<T>& da = a.graph->acc(a);
    for (std::size_t i = 0; i < index.size(); ++i) da.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// out(r) = a(r, index[r]); an R x 1 column.
template <typename T>
Var<T> gather_cols(Var<T> a, std::vector<int> index) {
  detail::require(static_cast<Eigen::Index>(index.size()) == a.rows(), "gather_cols: length mismatch");
  Mat<T> out(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const int c = index[static_cast<std::size_t>(r)];
    detail::require(c >= 0 && c < a.cols(), "gather_cols: index out of range");
    out(r, 0) = a.value()(r, c);
  }
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, index](const Mat<T>& g, const Mat<T>&) mutable {
    Mat<T>& da = a.graph->acc(a);
    for (Eigen::Index r = 0; r < g.rows(); ++r) da(r, index[static_cast<std::size_t>(r)]) += g(r, 0);
  });
}

/// Row-major reshape: element k of the row-major flattening keeps its position.
template <typename T>
Var<T> reshape(Var<T> a, Eigen::Index rows, Eigen::Index cols) {
  detail::require(rows * cols == a.rows() * a.cols(), "reshape: size mismatch");
  const Eigen::Index src_cols = a.cols();
  Mat<T> out(rows, cols);
  for (Eigen::Index k = 0; k < rows * cols; ++k) out(k / cols, k % cols) = a.value()(k / src_cols, k % src_cols);
  return a.graph->push(std::move(out), detail::any_grad({a}), [a, rows, cols, src_cols](const Mat<T>& g, const Mat<T>&) mutable {
    Mat<T>& da = a.graph->acc(a);
    for (Eigen::Index k = 0; k < rows * cols; ++k) da(k / src_cols, k % src_cols) += g(k / cols, k % cols);
  });
}

// ---------------------------------------------------------------------------
// Entity-set ops

/// Mean of the valid rows of each site: (S*M) x d -> S x d. Sites without
/// valid rows pool to zero.
template <typename T>
Var<T> group_mean(Var<T> x, const SiteLayout& layout) {
  detail::require(static_cast<std::size_t>(x.rows()) == layout.rows(), "group_mean: row mismatch");
  const int S = layout.sites, M = layout.entities;
  Mat<T> out = Mat<T>::Zero(S, x.cols());
  std::vector<T> inv(static_cast<std::size_t>(S), T(0));
  for (int s = 0; s < S; ++s) {
    const int c = layout.valid_in_site(s);
    if (c == 0) continue;
    inv[static_cast<std::size_t>(s)] = T(1) / T(c);
    for (int e = 0; e < M; ++e) {
      if (layout.valid(s * M + e)) out.row(s) += x.value().row(s * M + e);
    }
    out.row(s) *= inv[static_cast<std::size_t>(s)];
  }
  return x.graph->push(std::move(out), detail::any_grad({x}), [x, layout, inv](const Mat<T>& g, const Mat<T>&) mutable {
    Mat<T>& dx = x.graph->acc(x);
    const int M = layout.entities;
    for (int s = 0; s < layout.sites; ++s) {
      for (int e = 0; e < M; ++e) {
        if (layout.valid(s * M + e)) dx.row(s * M + e) += g.row(s) * inv[static_cast<std::size_t>(s)];
      }
    }
  });
}

/// Batched prototype attention. q, k, v are (S*M) x (N*d) with prototype n in
/// column block n. For each site and prototype computes
///   attention = act(q k^T / sqrt(d)) over valid columns (padded rows zero),
/// and returns attention * v stacked the same way. The attention matrices are
/// attached as aux data, (S*M) x (N*M).
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const SiteLayout& layout, int n_proto, int d,
                 Activation act) {
  const int S = layout.sites, M = layout.entities;
  detail::require(static_cast<std::size_t>(q.rows()) == layout.rows() && q.cols() == n_proto * d,
                  "attention: q shape");
  detail::require(k.rows() == q.rows() && k.cols() == q.cols(), "attention: k shape");
  detail::require(v.rows() == q.rows() && v.cols() == q.cols(), "attention: v shape");
  const T inv_sqrt = T(1) / std::sqrt(T(d));
  auto probs = std::make_shared<Mat<T>>(Mat<T>::Zero(S * M, n_proto * M));
  Mat<T> out = Mat<T>::Zero(S * M, n_proto * d);
  Mat<T> logits(M, M);
  std::vector<T> scratch;
  detail::BitHasher support_bits;
  const Mat<T>& Q = q.value();
  const Mat<T>& K = k.value();
  const Mat<T>& V = v.value();
  for (int s = 0; s < S; ++s) {
    const int base = s * M;
    if (layout.valid_in_site(s) == 0) continue;
    auto col_valid = [&](Eigen::Index j) { return layout.valid(base + j); };
    for (int n = 0; n < n_proto; ++n) {
      logits.noalias() = Q.block(base, n * d, M, d) * K.block(base, n * d, M, d).transpose();
      logits *= inv_sqrt;
      for (int i = 0; i < M; ++i) {
        if (!layout.valid(base + i)) continue;
        auto row = probs->row(base + i).segment(n * M, M);
        if (act == Activation::sparsemax) {
          kernel::sparsemax<T>(logits.row(i), row, M, col_valid, scratch);
          for (int j = 0; j < M; ++j) support_bits.add(row(j) > T(0));
        } else {
          kernel::softmax<T>(logits.row(i), row, M, col_valid);
        }
      }
      out.block(base, n * d, M, d).noalias() = probs->block(base, n * M, M, M) * V.block(base, n * d, M, d);
    }
  }
  Graph<T>& gr = *q.graph;
  if (gr.recording() && act == Activation::sparsemax) gr.mix_signature(support_bits.h);
  Var<T> r = gr.push(std::move(out), detail::any_grad({q, k, v}),
                     [q, k, v, layout, n_proto, d, act, probs, inv_sqrt](const Mat<T>& g, const Mat<T>&) mutable {
    const int S = layout.sites, M = layout.entities;
    const bool wq = detail::wants(q), wk = detail::wants(k), wv = detail::wants(v);
    const Mat<T>& Q = q.value();
    const Mat<T>& K = k.value();
    const Mat<T>& V = v.value();
    Mat<T> dP(M, M), dL(M, M);
    for (int s = 0; s < S; ++s) {
      const int base = s * M;
      if (layout.valid_in_site(s) == 0) continue;
      for (int n = 0; n < n_proto; ++n) {
        auto G = g.block(base, n * d, M, d);
        auto P = probs->block(base, n * M, M, M);
        if (wv) v.graph->acc(v).block(base, n * d, M, d).noalias() += P.transpose() * G;
        if (!wq && !wk) continue;
        dP.noalias() = G * V.block(base, n * d, M, d).transpose();
        for (int i = 0; i < M; ++i) {
          if (!layout.valid(base + i)) {
            dL.row(i).setZero();
            continue;
          }
          if (act == Activation::sparsemax) {
            kernel::sparsemax_backward<T>(P.row(i), dP.row(i), dL.row(i), M);
          } else {
            kernel::softmax_backward<T>(P.row(i), dP.row(i), dL.row(i), M);
          }
        }
        dL *= inv_sqrt;
        if (wq) q.graph->acc(q).block(base, n * d, M, d).noalias() += dL * K.block(base, n * d, M, d);
        if (wk) k.graph->acc(k).block(base, n * d, M, d).noalias() += dL.transpose() * Q.block(base, n * d, M, d);
      }
    }
  });
  gr.set_aux(r, probs);
  return r;
}

/// Per site, the blend-weighted sum of the prototype blocks: (S*M) x (N*d), S x N -> (S*M) x d.
template <typename T>
Var<T> restructure(Var<T> pv, Var<T> blend, const SiteLayout& layout, int n_proto, int d) {
  const int S = layout.sites, M = layout.entities;
  detail::require(static_cast<std::size_t>(pv.rows()) == layout.rows() && pv.cols() == n_proto * d,
                  "restructure: pv shape");
  detail::require(blend.rows() == S && blend.cols() == n_proto, "restructure: blend shape");
  Mat<T> out = Mat<T>::Zero(S * M, d);
  for (int s = 0; s < S; ++s) {
    for (int n = 0; n < n_proto; ++n) {
      out.middleRows(s * M, M) += blend.value()(s, n) * pv.value().block(s * M, n * d, M, d);
    }
  }
  return pv.graph->push(std::move(out), detail::any_grad({pv, blend}),
                        [pv, blend, S, M, n_proto, d](const Mat<T>& g, const Mat<T>&) mutable {
    const bool wp = detail::wants(pv), wo = detail::wants(blend);
    for (int s = 0; s < S; ++s) {
      auto G = g.middleRows(s * M, M);
      for (int n = 0; n < n_proto; ++n) {
        if (wp) pv.graph->acc(pv).block(s * M, n * d, M, d) += blend.value()(s, n) * G;
        if (wo) blend.graph->acc(blend)(s, n) += pv.value().block(s * M, n * d, M, d).cwiseProduct(G).sum();
      }
    }
  });
}

/// Contrastive disagreement loss averaged over valid entity rows and
/// prototypes. For each row e the N vectors u_n (row e of prototype n's attended values) give
/// similarities s_ni = <u_n, u_i>; the per-(e, n) term is
/// -log softmax_i(s_n.)[n]. With `cosine` the u_n are unit-normalised first.
template <typename T>
Var<T> cd_loss(Var<T> pv, const SiteLayout& layout, int n_proto, int d, bool cosine = false) {
  detail::require(static_cast<std::size_t>(pv.rows()) == layout.rows() && pv.cols() == n_proto * d,
                  "cd_loss: pv shape");
  const Mat<T>& X = pv.value();
  const T norm_floor = T(1e-12);
  auto unit_rows = [&](Eigen::Index r, Mat<T>& U, Col<T>& norms) {
    for (int n = 0; n < n_proto; ++n) U.row(n) = X.block(r, n * d, 1, d);
    if (cosine) {
      for (int n = 0; n < n_proto; ++n) {
        norms(n) = std::max(U.row(n).norm(), norm_floor);
        U.row(n) /= norms(n);
      }
    }
  };
  Mat<T> U(n_proto, d), Sim(n_proto, n_proto);
  Col<T> norms(n_proto);
  T total = T(0);
  int count = 0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    if (!layout.valid(r)) continue;
    ++count;
    unit_rows(r, U, norms);
    Sim.noalias() = U * U.transpose();
    for (int n = 0; n < n_proto; ++n) {
      const T mx = Sim.row(n).maxCoeff();
      const T lse = mx + std::log((Sim.row(n).array() - mx).exp().sum());
      total += lse - Sim(n, n);
    }
  }
  const T denom = T(count) * T(n_proto);
  Mat<T> out(1, 1);
  out(0, 0) = count > 0 ? total / denom : T(0);
  return pv.graph->push(std::move(out), detail::any_grad({pv}) && count > 0,
                        [pv, layout, n_proto, d, cosine, denom, norm_floor](const Mat<T>& g, const Mat<T>&) mutable {
    const Mat<T>& X = pv.value();
    Mat<T>& dX = pv.graph->acc(pv);
    Mat<T> U(n_proto, d), Sim(n_proto, n_proto), G(n_proto, n_proto), dU(n_proto, d);
    Col<T> norms(n_proto);
    const T scale = g(0, 0) / denom;
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      if (!layout.valid(r)) continue;
      for (int n = 0; n < n_proto; ++n) U.row(n) = X.block(r, n * d, 1, d);
      if (cosine) {
        for (int n = 0; n < n_proto; ++n) {
          norms(n) = std::max(U.row(n).norm(), norm_floor);
          U.row(n) /= norms(n);
        }
      }
      Sim.noalias() = U * U.transpose();
      for (int n = 0; n < n_proto; ++n) {
        const T mx = Sim.row(n).maxCoeff();
        G.row(n) = (Sim.row(n).array() - mx).exp().matrix();
        G.row(n) /= G.row(n).sum();
        G(n, n) -= T(1);
      }
      G *= scale;
      dU.noalias() = (G + G.transpose()) * U;
      for (int n = 0; n < n_proto; ++n) {
        if (cosine) {
          const T proj = U.row(n).dot(dU.row(n));
          dX.block(r, n * d, 1, d) += (dU.row(n) - proj * U.row(n)) / norms(n);
        } else {
          dX.block(r, n * d, 1, d) += dU.row(n);
        }
      }
    }
  });
}

/// Weighted mean over rows of KL(p_r || q_r), q clamped at `clamp` inside the log.
template <typename T>
Var<T> kl_rows(Var<T> p, Var<T> q, std::vector<T> weights, T clamp) {
  detail::require(p.rows() == q.rows() && p.cols() == q.cols(), "kl_rows: shape mismatch");
  detail::require(static_cast<Eigen::Index>(weights.size()) == p.rows(), "kl_rows: weight length");
  T wsum = T(0);
  for (T w : weights) wsum += w;
  T total = T(0);
  const Mat<T>& P = p.value();
  const Mat<T>& Q = q.value();
  for (Eigen::Index r = 0; r < P.rows(); ++r) {
    const T w = weights[static_cast<std::size_t>(r)];
    if (w == T(0)) continue;
    T kl = T(0);
    for (Eigen::Index i = 0; i < P.cols(); ++i) {
      if (P(r, i) > T(0)) kl += P(r, i) * (std::log(P(r, i)) - std::log(std::max(Q(r, i), clamp)));
    }
    total += w * kl;
  }
  Mat<T> out(1, 1);
  out(0, 0) = wsum > T(0) ? total / wsum : T(0);
  return p.graph->push(std::move(out), detail::any_grad({p, q}) && wsum > T(0),
                       [p, q, weights, wsum, clamp](const Mat<T>& g, const Mat<T>&) mutable {
    const Mat<T>& P = p.value();
    const Mat<T>& Q = q.value();
    const bool wp = detail::wants(p), wq = detail::wants(q);
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      const T w = weights[static_cast<std::size_t>(r)] * g(0, 0) / wsum;
      if (w == T(0)) continue;
      for (Eigen::Index i = 0; i < P.cols(); ++i) {
        if (!(P(r, i) > T(0))) continue;
        const T qc = std::max(Q(r, i), clamp);
        if (wp) p.graph->acc(p)(r, i) += w * (std::log(P(r, i)) - std::log(qc) + T(1));
        if (wq && Q(r, i) > clamp) q.graph->acc(q)(r, i) -= w * P(r, i) / Q(r, i);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Mixing and losses

/// Per-row vector-matrix product used by the monotone mixer:
/// out[s, j] = sum_{a < A} qs[s, a] * w[s, a*D + j], with w holding at least
/// A blocks of width D.
template <typename T>
Var<T> batched_vecmat(Var<T> qs, Var<T> w, int width) {
  const Eigen::Index S = qs.rows(), A = qs.cols();
  detail::require(w.rows() == S && w.cols() >= A * width, "batched_vecmat: shape mismatch");
  Mat<T> out = Mat<T>::Zero(S, width);
  for (Eigen::Index s = 0; s < S; ++s) {
    for (Eigen::Index a = 0; a < A; ++a) out.row(s) += qs.value()(s, a) * w.value().block(s, a * width, 1, width);
  }
  return qs.graph->push(std::move(out), detail::any_grad({qs, w}), [qs, w, width](const Mat<T>& g, const Mat<T>&) mutable {
    const Eigen::Index S = qs.rows(), A = qs.cols();
    const bool wq = detail::wants(qs), ww = detail::wants(w);
    for (Eigen::Index s = 0; s < S; ++s) {
      for (Eigen::Index a = 0; a < A; ++a) {
        if (wq) qs.graph->acc(qs)(s, a) += g.row(s).dot(w.value().row(s).segment(a * width, width));
        if (ww) w.graph->acc(w).block(s, a * width, 1, width) += qs.value()(s, a) * g.row(s);
      }
    }
  });
}

/// Row-wise dot product: S x D, S x D -> S x 1.
template <typename T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "row_dot: shape mismatch");
  Mat<T> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return a.graph->push(std::move(out), detail::any_grad({a, b}), [a, b](const Mat<T>& g, const Mat<T>&) mutable {
    if (detail::wants(a)) a.graph->acc(a) += (b.value().array().colwise() * g.col(0).array()).matrix();
    if (detail::wants(b)) b.graph->acc(b) += (a.value().array().colwise() * g.col(0).array()).matrix();
  });
}

/// sum_r mask_r (pred_r - target_r)^2 / sum_r mask_r for an R x 1 prediction.
template <typename T>
Var<T> masked_mse(Var<T> pred, Col<T> target, Col<T> mask) {
  detail::require(pred.cols() == 1 && pred.rows() == target.size() && target.size() == mask.size(),
                  "masked_mse: shape mismatch");
  const T count = mask.sum();
  Col<T> resid = (pred.value().col(0) - target).cwiseProduct(mask);
  Mat<T> out(1, 1);
  out(0, 0) = count > T(0) ? resid.squaredNorm() / count : T(0);
  return pred.graph->push(std::move(out), detail::any_grad({pred}) && count > T(0),
                          [pred, resid, count](const Mat<T>& g, const Mat<T>&) mutable {
    pred.graph->acc(pred).col(0) += resid * (T(2) * g(0, 0) / count);
  });
}

}  // namespace opt::ad

#endif  // OPT_AUTOGRAD_HPP
