#ifndef OPT_CHECKS_ORACLES_HPP
#define OPT_CHECKS_ORACLES_HPP

// Brute-force reference computations that share no code with the library
// routines they are compared against.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace opt::oracle {

/// Euclidean projection onto the probability simplex by enumerating every
/// nonempty support S: on S the projection is z_S - (sum z_S - 1)/|S|, it is
/// feasible when nonnegative, and the feasible candidate nearest to z wins.
inline Eigen::VectorXd simplex_projection(const Eigen::VectorXd& z) {
  const int n = static_cast<int>(z.size());
  Eigen::VectorXd best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::uint32_t subset = 1; subset < (1u << n); ++subset) {
    double sum = 0.0;
    int size = 0;
    for (int i = 0; i < n; ++i) {
      if (subset & (1u << i)) {
        sum += z[i];
        ++size;
      }
    }
    const double shift = (sum - 1.0) / size;
    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    bool feasible = true;
    for (int i = 0; i < n; ++i) {
      if (!(subset & (1u << i))) continue;
      p[i] = z[i] - shift;
      if (p[i] < 0.0) feasible = false;
    }
    if (!feasible) continue;
    const double dist = (p - z).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = p;
    }
  }
  return best;
}

/// Triple-loop matrix product.
inline Eigen::MatrixXd naive_matmul(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd c(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  }
  return c;
}

/// One-step TD targets written as a plain loop.
inline std::vector<double> td_targets_loop(const std::vector<double>& rewards, const std::vector<bool>& terminal,
                                           const std::vector<double>& next_q, double gamma) {
  std::vector<double> y;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    double v = rewards[i];
    if (!terminal[i]) v += gamma * next_q[i];
    y.push_back(v);
  }
  return y;
}

/// Joint distribution p(w, t, o) over small finite alphabets, indexed [w][t][o].
struct DiscreteJoint {
  int n_w = 0;
  int n_t = 0;
  int n_o = 0;
  std::vector<double> p;

  double& at(int w, int t, int o) { return p[static_cast<std::size_t>((w * n_t + t) * n_o + o)]; }
  double at(int w, int t, int o) const { return p[static_cast<std::size_t>((w * n_t + t) * n_o + o)]; }

  static DiscreteJoint random(int n_w, int n_t, int n_o, std::mt19937_64& rng) {
    DiscreteJoint j{n_w, n_t, n_o, std::vector<double>(static_cast<std::size_t>(n_w * n_t * n_o))};
    std::gamma_distribution<double> g(1.0, 1.0);
    double s = 0.0;
    for (double& v : j.p) {
      v = g(rng) + 1e-6;
      s += v;
    }
    for (double& v : j.p) v /= s;
    return j;
  }

  double p_to(int t, int o) const {
    double s = 0.0;
    for (int w = 0; w < n_w; ++w) s += at(w, t, o);
    return s;
  }
  double p_wo(int w, int o) const {
    double s = 0.0;
    for (int t = 0; t < n_t; ++t) s += at(w, t, o);
    return s;
  }
  double p_o(int o) const {
    double s = 0.0;
    for (int w = 0; w < n_w; ++w) s += p_wo(w, o);
    return s;
  }
  /// True posterior p(w | t, o).
  double posterior(int w, int t, int o) const { return at(w, t, o) / p_to(t, o); }
};

/// I(w; t | o) = sum p(w,t,o) log [p(w|t,o) / p(w|o)].
inline double conditional_mutual_information(const DiscreteJoint& j) {
  double s = 0.0;
  for (int w = 0; w < j.n_w; ++w) {
    for (int t = 0; t < j.n_t; ++t) {
      for (int o = 0; o < j.n_o; ++o) {
        const double p = j.at(w, t, o);
        s += p * std::log(j.posterior(w, t, o) / (j.p_wo(w, o) / j.p_o(o)));
      }
    }
  }
  return s;
}

/// H(w | o) = -sum p(w,o) log p(w|o).
inline double conditional_entropy(const DiscreteJoint& j) {
  double s = 0.0;
  for (int w = 0; w < j.n_w; ++w) {
    for (int o = 0; o < j.n_o; ++o) {
      const double p = j.p_wo(w, o);
      s -= p * std::log(p / j.p_o(o));
    }
  }
  return s;
}

/// E_{p(w,t,o)}[log q(w | t, o)]; q is indexed like the joint.
inline double expected_log_q(const DiscreteJoint& j, const std::vector<double>& q) {
  double s = 0.0;
  for (int w = 0; w < j.n_w; ++w) {
    for (int t = 0; t < j.n_t; ++t) {
      for (int o = 0; o < j.n_o; ++o) s += j.at(w, t, o) * std::log(q[static_cast<std::size_t>((w * j.n_t + t) * j.n_o + o)]);
    }
  }
  return s;
}

}  // namespace opt::oracle

#endif  // OPT_CHECKS_ORACLES_HPP
