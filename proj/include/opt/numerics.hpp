#ifndef OPT_NUMERICS_HPP
#define OPT_NUMERICS_HPP

// Simplex projections (sparsemax, softmax), categorical KL and a central
// finite-difference gradient checker. The templated kernels are shared with
// the batched autograd ops; the non-template functions form the checked
// public surface.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opt/error.hpp"

namespace opt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

inline constexpr double kKlClamp = 1e-8;

/// A point on the probability simplex: nonnegative entries summing to one.
class ProbabilityVector {
 public:
  ProbabilityVector() = default;

  /// Validates the simplex invariants to `tol`.
  static ProbabilityVector from(Vector values, double tol = 1e-9) {
    if (values.size() == 0) throw invalid_input("probability vector is empty");
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i]) || values[i] < 0.0) {
        throw invalid_input("probability vector has a negative or non-finite entry");
      }
    }
    if (std::abs(values.sum() - 1.0) > tol) {
      throw invalid_input("probability vector does not sum to one");
    }
    ProbabilityVector p;
    p.values_ = std::move(values);
    return p;
  }

  const Vector& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_[i]; }

 private:
  Vector values_;
};

/// Support size m and threshold sigma of a sparsemax projection.
struct SupportResult {
  int support_size = 0;
  double threshold = 0.0;
  Mask support_mask;
};

namespace kernel {

/// Writes sparsemax(z) restricted to entries where `valid(i)` holds into `out`;
/// excluded entries are set to exactly zero. Returns the threshold sigma and
/// stores the support size in `*support_size` when non-null.
/// `scratch` is reused across calls to avoid allocations.
template <typename T, typename In, typename Out, typename Valid>
T sparsemax(const In& z, Out&& out, Eigen::Index n, Valid valid,
            std::vector<T>& scratch, int* support_size = nullptr) {
  scratch.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (valid(i)) scratch.push_back(z(i));
  }
  if (scratch.empty()) throw invalid_input("sparsemax over an empty domain");
  // Descending order; equal values are interchangeable for the cumulative test.
  std::stable_sort(scratch.begin(), scratch.end(), std::greater<T>());
  T cumsum = T(0);
  T cumsum_support = T(0);
  int m = 0;
  for (std::size_t k = 0; k < scratch.size(); ++k) {
    cumsum += scratch[k];
    if (T(1) + T(k + 1) * scratch[k] > cumsum) {
      m = static_cast<int>(k + 1);
      cumsum_support = cumsum;
    }
  }
  const T sigma = (cumsum_support - T(1)) / T(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (valid(i)) {
      const T v = z(i) - sigma;
      out(i) = v > T(0) ? v : T(0);
    } else {
      out(i) = T(0);
    }
  }
  if (support_size != nullptr) *support_size = m;
  return sigma;
}

/// Max-subtracted softmax over entries where `valid(i)` holds.
template <typename T, typename In, typename Out, typename Valid>
void softmax(const In& z, Out&& out, Eigen::Index n, Valid valid) {
  T max_v = -std::numeric_limits<T>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (valid(i)) max_v = std::max<T>(max_v, z(i));
  }
  if (!std::isfinite(max_v)) throw invalid_input("softmax over an empty domain");
  T total = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (valid(i)) {
      out(i) = std::exp(z(i) - max_v);
      total += out(i);
    } else {
      out(i) = T(0);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) out(i) /= total;
}

/// J^T g for sparsemax at output p: on the support S, g_i - mean_S(g); zero elsewhere.
template <typename T, typename P, typename G, typename Out>
void sparsemax_backward(const P& p, const G& g, Out&& out, Eigen::Index n) {
  T sum = T(0);
  int count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (p(i) > T(0)) {
      sum += g(i);
      ++count;
    }
  }
  const T mean = count > 0 ? sum / T(count) : T(0);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = p(i) > T(0) ? g(i) - mean : T(0);
}

/// J^T g for softmax at output p: p_i (g_i - <g, p>).
template <typename T, typename P, typename G, typename Out>
void softmax_backward(const P& p, const G& g, Out&& out, Eigen::Index n) {
  T dot = T(0);
  for (Eigen::Index i = 0; i < n; ++i) dot += p(i) * g(i);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = p(i) * (g(i) - dot);
}

}  // namespace kernel

namespace detail {

inline void require_finite(const Vector& z, const char* what) {
  if (z.size() == 0) throw invalid_input(std::string(what) + ": empty input");
  if (!z.allFinite()) throw invalid_input(std::string(what) + ": non-finite input");
}

inline void require_mask(const Vector& z, const std::optional<Mask>& mask, const char* what) {
  if (mask && mask->size() != z.size()) {
    throw invalid_input(std::string(what) + ": mask length does not match input");
  }
  if (mask && !mask->any()) throw invalid_input(std::string(what) + ": every entry is masked");
}

}  // namespace detail

/// Euclidean projection of z onto the probability simplex. Masked-out entries
/// are excluded from the projection and returned as exact zeros.
inline ProbabilityVector sparsemax(const Vector& z, const std::optional<Mask>& mask = std::nullopt) {
  detail::require_finite(z, "sparsemax");
  detail::require_mask(z, mask, "sparsemax");
  Vector p(z.size());
  std::vector<double> scratch;
  kernel::sparsemax<double>(z, p, z.size(),
                            [&](Eigen::Index i) { return !mask || (*mask)[i]; }, scratch);
  return ProbabilityVector::from(std::move(p));
}

/// Support size and threshold of sparsemax(z).
inline SupportResult sparsemax_support(const Vector& z) {
  detail::require_finite(z, "sparsemax_support");
  Vector p(z.size());
  std::vector<double> scratch;
  SupportResult r;
  r.threshold = kernel::sparsemax<double>(z, p, z.size(), [](Eigen::Index) { return true; },
                                          scratch, &r.support_size);
  r.support_mask = (z.array() > r.threshold);
  return r;
}

/// Vector-Jacobian product of sparsemax at output p.
inline Vector sparsemax_backward(const ProbabilityVector& p, const Vector& upstream) {
  if (upstream.size() != p.size()) throw invalid_input("sparsemax_backward: shape mismatch");
  Vector out(p.size());
  kernel::sparsemax_backward<double>(p.values(), upstream, out, p.size());
  return out;
}

/// Numerically stabilised softmax over unmasked entries.
inline ProbabilityVector softmax(const Vector& z, const std::optional<Mask>& mask = std::nullopt) {
  detail::require_finite(z, "softmax");
  detail::require_mask(z, mask, "softmax");
  Vector p(z.size());
  kernel::softmax<double>(z, p, z.size(), [&](Eigen::Index i) { return !mask || (*mask)[i]; });
  return ProbabilityVector::from(std::move(p));
}

/// KL(p || q) with q clamped below at `clamp` inside the logarithm.
/// Terms with p_i = 0 contribute zero.
inline double categorical_kl(const ProbabilityVector& p, const ProbabilityVector& q,
                             double clamp = kKlClamp) {
  if (p.size() != q.size()) throw invalid_input("categorical_kl: length mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], clamp)));
  }
  return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

/// One evaluation of the checked function. `signature` identifies the active
/// piece of a piecewise-smooth function (e.g. sparsemax supports); coordinates
/// whose perturbation changes it are reported as kinks and not judged.
struct FdSample {
  double value = 0.0;
  std::uint64_t signature = 0;
};

struct FdOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  /// Lower bound of the normaliser max(|analytic|, |numeric|, abs_floor).
  double abs_floor = 1e-6;
};

struct FdCoordinate {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool kink = false;
  bool finite = true;
  bool passed = true;
};

struct FdReport {
  std::vector<FdCoordinate> coordinates;

  std::size_t kink_count() const {
    return static_cast<std::size_t>(std::count_if(coordinates.begin(), coordinates.end(),
                                                  [](const auto& c) { return c.kink; }));
  }
  std::vector<FdCoordinate> failures() const {
    std::vector<FdCoordinate> out;
    for (const auto& c : coordinates) {
      if (!c.passed) out.push_back(c);
    }
    return out;
  }
  bool passed() const { return failures().empty(); }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& c : coordinates) {
      if (!c.kink && c.finite) m = std::max(m, c.rel_error);
    }
    return m;
  }
};

/// Compares `analytic_grad` against central differences of `f` around `x`.
inline FdReport finite_difference_check(const std::function<FdSample(std::span<const double>)>& f,
                                        std::span<const double> x,
                                        std::span<const double> analytic_grad,
                                        const FdOptions& options = {}) {
  if (x.size() != analytic_grad.size()) {
    throw invalid_input("finite_difference_check: gradient length mismatch");
  }
  if (!(options.step > 0.0)) throw invalid_input("finite_difference_check: step must be positive");
  std::vector<double> point(x.begin(), x.end());
  const std::uint64_t base_signature = f(point).signature;
  FdReport report;
  report.coordinates.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + options.step;
    const FdSample plus = f(point);
    point[i] = saved - options.step;
    const FdSample minus = f(point);
    point[i] = saved;

    FdCoordinate c;
    c.index = i;
    c.analytic = analytic_grad[i];
    c.numeric = (plus.value - minus.value) / (2.0 * options.step);
    c.finite = std::isfinite(plus.value) && std::isfinite(minus.value) && std::isfinite(c.analytic);
    c.kink = plus.signature != base_signature || minus.signature != base_signature;
    if (c.finite) {
      const double scale = std::max({std::abs(c.analytic), std::abs(c.numeric), options.abs_floor});
      c.rel_error = std::abs(c.analytic - c.numeric) / scale;
    } else {
      c.rel_error = std::numeric_limits<double>::infinity();
    }
    c.passed = c.kink || (c.finite && c.rel_error <= options.rel_tol);
    report.coordinates.push_back(c);
  }
  return report;
}

/// Convenience overload for smooth functions without a piece signature.
inline FdReport finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> x,
                                        std::span<const double> analytic_grad,
                                        const FdOptions& options = {}) {
  return finite_difference_check(
      std::function<FdSample(std::span<const double>)>(
          [&](std::span<const double> p) { return FdSample{f(p), 0}; }),
      x, analytic_grad, options);
}

}  // namespace opt

#endif  // OPT_NUMERICS_HPP
