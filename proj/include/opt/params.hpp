#ifndef OPT_PARAMS_HPP
#define OPT_PARAMS_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/autograd.hpp"
#include "opt/error.hpp"

namespace opt {

using Rng = std::mt19937_64;

/// Named dense parameters with gradient buffers. Values are kept in double
/// precision regardless of the precision a forward pass runs in.
class ParamSet {
 public:
  int add(std::string name, Matrix init) {
    names_.push_back(std::move(name));
    grads_.push_back(Matrix::Zero(init.rows(), init.cols()));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size()) - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  const Matrix& value(int i) const { return values_[static_cast<std::size_t>(i)]; }
  Matrix& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const Matrix& grad(int i) const { return grads_[static_cast<std::size_t>(i)]; }
  Matrix& grad(int i) { return grads_[static_cast<std::size_t>(i)]; }

  std::optional<int> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return static_cast<int>(i);
    }
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  void zero_grad() {
    for (auto& g : grads_) g.setZero();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& g : grads_) s += g.squaredNorm();
    return std::sqrt(s);
  }

  /// Scales gradients so their global norm is at most `max_norm`; returns the
  /// norm before clipping.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (norm > max_norm && norm > 0.0) {
      const double f = max_norm / norm;
      for (auto& g : grads_) g *= f;
    }
    return norm;
  }

  std::vector<double> flat_values() const { return flatten(values_); }
  std::vector<double> flat_grads() const { return flatten(grads_); }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != scalar_count()) throw invalid_input("assign_flat: length mismatch");
    std::size_t k = 0;
    for (auto& v : values_) {
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = flat[k++];
    }
  }

  /// Copies values from a set with identical layout.
  void copy_values_from(const ParamSet& other) {
    if (!same_layout(other)) throw invalid_input("copy_values_from: layout mismatch");
    values_ = other.values_;
  }

  bool same_layout(const ParamSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (names_[i] != other.names_[i] || values_[i].rows() != other.values_[i].rows() ||
          values_[i].cols() != other.values_[i].cols()) {
        return false;
      }
    }
    return true;
  }

  bool values_equal(const ParamSet& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (values_[i] != other.values_[i]) return false;
    }
    return true;
  }

 private:
  static std::vector<double> flatten(const std::vector<Matrix>& ms) {
    std::vector<double> out;
    for (const auto& m : ms) out.insert(out.end(), m.data(), m.data() + m.size());
    return out;
  }

  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::vector<Matrix> grads_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation of a fan_in x fan_out block.
inline Matrix uniform_init(int fan_in, int fan_out, Rng& rng, int rows = -1) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows < 0 ? fan_in : rows, fan_out);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
  }
  return m;
}

/// Indices of an affine map x W + b.
struct LinearLayout {
  int w = -1;
  int b = -1;
};

inline LinearLayout add_linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng) {
  LinearLayout l;
  l.w = ps.add(name + ".w", uniform_init(in, out, rng));
  l.b = ps.add(name + ".b", uniform_init(in, out, rng, 1));
  return l;
}

/// Binds ParamSet entries into a graph, once per parameter. Bound parameters
/// are trainable leaves unless the binder is frozen (target networks).
template <typename T>
class Binder {
 public:
  Binder(ad::Graph<T>& graph, const ParamSet& params, bool trainable = true)
      : graph_(graph), params_(params), trainable_(trainable), cache_(params.size()) {}

  ad::Var<T> operator()(int index) {
    auto& slot = cache_[static_cast<std::size_t>(index)];
    if (!slot) {
      ad::Mat<T> v = params_.value(index).template cast<T>();
      slot = trainable_ ? graph_.leaf(std::move(v), index) : graph_.constant(std::move(v));
    }
    return *slot;
  }

  ad::Var<T> linear(ad::Var<T> x, const LinearLayout& l) { return ad::linear(x, (*this)(l.w), (*this)(l.b)); }

  ad::Graph<T>& graph() { return graph_; }

  /// Adds the graph's leaf gradients into `params`' gradient buffers.
  void accumulate_grads(ParamSet& params) {
    for (auto& [slot, var] : graph_.leaves()) {
      const auto& g = graph_.grad(var);
      if (g.size() > 0) params.grad(slot) += g.template cast<double>();
    }
  }

 private:
  ad::Graph<T>& graph_;
  const ParamSet& params_;
  bool trainable_;
  std::vector<std::optional<ad::Var<T>>> cache_;
};

/// RMSprop without momentum or weight decay:
///   v <- a v + (1 - a) g^2;  p <- p - lr g / (sqrt(v) + eps).
class RmsProp {
 public:
  struct Settings {
    double lr = 5e-4;
    double alpha = 0.99;
    double eps = 1e-5;
  };

  RmsProp() = default;
  RmsProp(const ParamSet& params, Settings s) : settings_(s) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& v = params.value(static_cast<int>(i));
      square_avg_.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }

  void step(ParamSet& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const int k = static_cast<int>(i);
      const Matrix& g = params.grad(k);
      Matrix& v = square_avg_[i];
      v = settings_.alpha * v + (1.0 - settings_.alpha) * g.cwiseProduct(g);
      params.value(k).array() -= settings_.lr * g.array() / (v.array().sqrt() + settings_.eps);
    }
  }

  const Settings& settings() const { return settings_; }
  std::vector<Matrix>& state() { return square_avg_; }
  const std::vector<Matrix>& state() const { return square_avg_; }

 private:
  Settings settings_;
  std::vector<Matrix> square_avg_;
};

}  // namespace opt

#endif  // OPT_PARAMS_HPP
