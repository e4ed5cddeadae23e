#pragma once

#include <cstdint>
#include <vector>

#include "wisdom/bilevel.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// Planted-noise study data: two classes over binary features sampled from a
// Gaussian bag per class, with trigger matrices built from LFs of known
// construction precision (some clean, some noisy).
struct SyntheticSpec {
  int n_labeled = 400;
  int n_unlabeled = 4000;
  int n_test = 1000;
  int dim = 20;
  int n_clean = 4;
  int n_noisy = 2;
  double clean_precision = 0.9;
  double noisy_precision = 0.55;
  double lf_coverage = 0.2;
  double feature_noise = 0.3;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  TrainData train;
  MatX xtest;
  VecXi ytest;
  std::vector<int> clean_lfs;  // indices into the LF list
  std::vector<int> noisy_lfs;
  VecX construction_precision;  // per LF, by design
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

}  // namespace wisdom
