#pragma once

#include <stdexcept>

#include "wisdom/model.hpp"
#include "wisdom/numerics.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// Unweighted mean of per-class F1. A class with no predicted and no true
// instances has precision = recall = 0 and therefore F1 = 0.
inline double evaluate_macro_f1(const VecXi& preds, const VecXi& truths,
                                int num_classes) {
  if (preds.size() != truths.size()) {
    throw std::runtime_error("evaluate_macro_f1: length mismatch");
  }
  if (preds.size() == 0) {
    throw std::runtime_error("evaluate_macro_f1: empty input");
  }
  double sum_f1 = 0.0;
  for (int c = 1; c <= num_classes; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (Eigen::Index i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c;
      const bool t = truths[i] == c;
      if (p && t) ++tp;
      if (p && !t) ++fp;
      if (!p && t) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    sum_f1 += denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  return sum_f1 / num_classes;
}

// eval-mode argmax predictions, 1..K, ties to the lowest class
template <typename S>
VecXi predict_classes(const MlpParams<S>& params, const Mat<S>& x) {
  const Mat<S> probs = forward(params, x, /*train_mode=*/false, nullptr);
  VecXi out(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    out[i] = argmax_tie_low(probs.row(i)) + 1;
  }
  return out;
}

}  // namespace wisdom
