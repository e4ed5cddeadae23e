#pragma once

#include <stdexcept>

#include "wisdom/numerics.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// Label-model parameters: theta(j,y) is the affinity of LF j for class y,
// w(j) in [0,1] its reliability weight, q(j) the quality guide, and
// target_class(j) the class the LF assigns when it fires.
template <typename S>
struct AggregatorParams {
  Mat<S> theta;             // m x K
  Vec<S> w;                 // m
  Vec<S> q;                 // m
  Eigen::VectorXi target_class;  // m, entries 1..K

  int lf_count() const { return static_cast<int>(theta.rows()); }
  int class_count() const { return static_cast<int>(theta.cols()); }

  static AggregatorParams uniform_init(int m, int k,
                                       const std::vector<int>& targets,
                                       const Vec<S>& guides) {
    AggregatorParams p;
    p.theta = Mat<S>::Constant(m, k, S(1));
    p.w = Vec<S>::Ones(m);
    p.q = guides;
    p.target_class = Eigen::VectorXi(m);
    for (int j = 0; j < m; ++j) p.target_class[j] = targets[static_cast<std::size_t>(j)];
    return p;
  }
};

template <typename S>
struct AggGrads {
  Mat<S> theta;
  Vec<S> w;

  void init_zero(int m, int k) {
    theta = Mat<S>::Zero(m, k);
    w = Vec<S>::Zero(m);
  }
};

// effective potentials in log space: A(j,y) = w_j * theta(j,y)
template <typename S>
Mat<S> active_weights(const AggregatorParams<S>& p) {
  return p.w.asDiagonal() * p.theta;
}

// psi(j, y, fired) = exp(w_j theta_jy) when fired, 1 otherwise
template <typename S>
S potential(const AggregatorParams<S>& p, int j, int y, bool fired) {
  if (j < 0 || j >= p.lf_count() || y < 1 || y > p.class_count()) {
    throw std::runtime_error("potential: index out of range");
  }
  return fired ? std::exp(p.w[j] * p.theta(j, y - 1)) : S(1);
}

// unnormalized class scores for each instance: S = L * A, n x K
template <typename S>
Mat<S> posterior_scores(const AggregatorParams<S>& p, const Mat<S>& l) {
  if (l.cols() != p.lf_count()) {
    throw std::runtime_error("posterior_scores: trigger matrix width != m");
  }
  return l * active_weights(p);
}

template <typename S>
Mat<S> posterior_batch(const AggregatorParams<S>& p, const Mat<S>& l) {
  return softmax_rows<S>(posterior_scores(p, l));
}

template <typename S>
Vec<S> posterior(const AggregatorParams<S>& p, const Vec<S>& l_row) {
  Mat<S> l(1, l_row.size());
  l.row(0) = l_row.transpose();
  return posterior_batch(p, l).row(0).transpose();
}

template <typename S>
int predict_g(const AggregatorParams<S>& p, const Vec<S>& l_row) {
  const Vec<S> s = active_weights(p).transpose() * l_row;
  return argmax_tie_low(s) + 1;
}

template <typename S>
Eigen::VectorXi predict_g_batch(const AggregatorParams<S>& p, const Mat<S>& l) {
  const Mat<S> scores = posterior_scores(p, l);
  Eigen::VectorXi out(scores.rows());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    out[i] = argmax_tie_low(scores.row(i)) + 1;
  }
  return out;
}

// log Z = log sum_y prod_j (1 + exp(A_jy)); the partition runs over firing
// patterns and labels jointly, making P(l, y) a proper joint
template <typename S>
S log_partition(const AggregatorParams<S>& p) {
  const Mat<S> a = active_weights(p);
  Vec<S> b = Vec<S>::Zero(p.class_count());
  for (int y = 0; y < p.class_count(); ++y) {
    for (int j = 0; j < p.lf_count(); ++j) {
      b[y] += softplus(a(j, y));
    }
  }
  return log_sum_exp(b);
}

namespace detail {

// d logZ / dA = sigma(A) scaled columnwise by softmax of the per-class
// partition terms
template <typename S>
Mat<S> log_partition_grad_a(const AggregatorParams<S>& p) {
  const Mat<S> a = active_weights(p);
  const int m = p.lf_count();
  const int k = p.class_count();
  Vec<S> b = Vec<S>::Zero(k);
  for (int y = 0; y < k; ++y) {
    for (int j = 0; j < m; ++j) b[y] += softplus(a(j, y));
  }
  const Vec<S> pz = softmax(b);
  Mat<S> g(m, k);
  for (int y = 0; y < k; ++y) {
    for (int j = 0; j < m; ++j) g(j, y) = sigmoid(a(j, y)) * pz[y];
  }
  return g;
}

// chain dA into (dtheta, dw)
template <typename S>
void accumulate_from_a(const AggregatorParams<S>& p, const Mat<S>& da,
                       AggGrads<S>* grads) {
  if (!grads) return;
  grads->theta += p.w.asDiagonal() * da;
  grads->w += (da.array() * p.theta.array()).rowwise().sum().matrix();
}

}  // namespace detail

// -sum_i log P(l_i, y_i); labels are 1..K
template <typename S>
S ll_supervised(const AggregatorParams<S>& p, const Mat<S>& l,
                const Eigen::VectorXi& y, AggGrads<S>* grads = nullptr) {
  if (l.rows() != y.size()) {
    throw std::runtime_error("ll_supervised: batch size mismatch");
  }
  const auto n = l.rows();
  if (n == 0) return S(0);
  const Mat<S> scores = posterior_scores(p, l);
  const S log_z = log_partition(p);
  S loss = S(n) * log_z;
  for (Eigen::Index i = 0; i < n; ++i) {
    loss -= scores(i, y[i] - 1);
  }
  if (grads) {
    Mat<S> da = S(n) * detail::log_partition_grad_a(p);
    // d(-sum_i s_i(y_i))/dA = -L^T Y with Y one-hot
    Mat<S> y_hot = Mat<S>::Zero(n, p.class_count());
    for (Eigen::Index i = 0; i < n; ++i) y_hot(i, y[i] - 1) = S(1);
    da -= l.transpose() * y_hot;
    detail::accumulate_from_a(p, da, grads);
  }
  return loss;
}

// -sum_i log sum_y P(l_i, y)
template <typename S>
S ll_unsupervised(const AggregatorParams<S>& p, const Mat<S>& l,
                  AggGrads<S>* grads = nullptr) {
  const auto n = l.rows();
  if (n == 0) return S(0);
  const Mat<S> scores = posterior_scores(p, l);
  const S log_z = log_partition(p);
  S loss = S(n) * log_z;
  for (Eigen::Index i = 0; i < n; ++i) {
    loss -= log_sum_exp(Vec<S>(scores.row(i).transpose()));
  }
  if (grads) {
    Mat<S> da = S(n) * detail::log_partition_grad_a(p);
    da -= l.transpose() * softmax_rows<S>(scores);
    detail::accumulate_from_a(p, da, grads);
  }
  return loss;
}

// rho_j: model probability that LF j agrees with its own target class
template <typename S>
Vec<S> agreement_probs(const AggregatorParams<S>& p) {
  const Mat<S> a = active_weights(p);
  Vec<S> rho(p.lf_count());
  for (int j = 0; j < p.lf_count(); ++j) {
    const Vec<S> pj = softmax(Vec<S>(a.row(j).transpose()));
    rho[j] = pj[p.target_class[j] - 1];
  }
  return rho;
}

// cross-entropy between quality guides q_j and agreement probabilities rho_j;
// rho is clipped to [1e-6, 1-1e-6] before the logs
template <typename S>
S quality_guide_loss(const AggregatorParams<S>& p,
                     AggGrads<S>* grads = nullptr) {
  const S lo = S(1e-6);
  const S hi = S(1) - S(1e-6);
  const Mat<S> a = active_weights(p);
  S loss = S(0);
  for (int j = 0; j < p.lf_count(); ++j) {
    const Vec<S> pj = softmax(Vec<S>(a.row(j).transpose()));
    const S rho_raw = pj[p.target_class[j] - 1];
    const S rho = std::min(std::max(rho_raw, lo), hi);
    const S qj = p.q[j];
    loss -= qj * std::log(rho) + (S(1) - qj) * std::log(S(1) - rho);
    if (grads && rho_raw > lo && rho_raw < hi) {
      const S drho = -qj / rho + (S(1) - qj) / (S(1) - rho);
      Mat<S> da_row(1, p.class_count());
      for (int y = 0; y < p.class_count(); ++y) {
        const S indicator = (y == p.target_class[j] - 1) ? S(1) : S(0);
        da_row(0, y) = drho * rho_raw * (indicator - pj[y]);
      }
      grads->theta.row(j) += p.w[j] * da_row.row(0);
      grads->w[j] += (da_row.row(0).array() *
                      p.theta.row(j).array()).sum();
    }
  }
  return loss;
}

}  // namespace wisdom
