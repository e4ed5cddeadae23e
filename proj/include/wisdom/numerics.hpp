#pragma once

#include <cmath>

#include "wisdom/types.hpp"

namespace wisdom {

template <typename S>
S softplus(S x) {
  // max(x,0) + log1p(exp(-|x|))
  const S m = x > S(0) ? x : S(0);
  return m + std::log1p(std::exp(-std::abs(x)));
}

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S log_sum_exp(const Vec<S>& v) {
  const S m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

// rowwise softmax of an n x K matrix
template <typename S>
Mat<S> softmax_rows(const Mat<S>& z) {
  Mat<S> p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const S m = z.row(i).maxCoeff();
    p.row(i) = (z.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// rowwise log-softmax; safe against underflow of small class probabilities
template <typename S>
Mat<S> log_softmax_rows(const Mat<S>& z) {
  Mat<S> lp(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const S m = z.row(i).maxCoeff();
    const S lse = m + std::log((z.row(i).array() - m).exp().sum());
    lp.row(i) = z.row(i).array() - lse;
  }
  return lp;
}

template <typename S>
Vec<S> softmax(const Vec<S>& z) {
  const S m = z.maxCoeff();
  Vec<S> p = (z.array() - m).exp();
  p /= p.sum();
  return p;
}

// argmax over a row; ties resolved toward the lowest index
template <typename Derived>
int argmax_tie_low(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (int k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = k;
  }
  return best;
}

}  // namespace wisdom
