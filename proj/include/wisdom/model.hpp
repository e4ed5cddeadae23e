#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "wisdom/numerics.hpp"
#include "wisdom/rng.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// Fully connected ReLU network over count features. hidden = {512, 512} is
// the standard shape; an empty hidden list gives the logistic-regression
// variant. Dropout (inverted scaling, rate = drop probability) is applied to
// hidden activations in train mode only.
template <typename S>
struct MlpParams {
  std::vector<Mat<S>> weights;  // layer l: out x in
  std::vector<Vec<S>> biases;
  S dropout_rate = S(0);

  int layer_count() const { return static_cast<int>(weights.size()); }
  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  int output_dim() const { return static_cast<int>(weights.back().rows()); }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& w : weights) n += w.size();
    for (const auto& b : biases) n += b.size();
    return n;
  }

  Vec<S> flatten() const {
    Vec<S> out(parameter_count());
    Eigen::Index at = 0;
    for (int l = 0; l < layer_count(); ++l) {
      for (Eigen::Index r = 0; r < weights[l].rows(); ++r) {
        for (Eigen::Index c = 0; c < weights[l].cols(); ++c) {
          out[at++] = weights[l](r, c);
        }
      }
      for (Eigen::Index r = 0; r < biases[l].size(); ++r) out[at++] = biases[l][r];
    }
    return out;
  }

  void set_flat(const Vec<S>& flat) {
    if (flat.size() != parameter_count()) {
      throw std::runtime_error("set_flat: size mismatch");
    }
    Eigen::Index at = 0;
    for (int l = 0; l < layer_count(); ++l) {
      for (Eigen::Index r = 0; r < weights[l].rows(); ++r) {
        for (Eigen::Index c = 0; c < weights[l].cols(); ++c) {
          weights[l](r, c) = flat[at++];
        }
      }
      for (Eigen::Index r = 0; r < biases[l].size(); ++r) biases[l][r] = flat[at++];
    }
  }

  MlpParams zeros_like() const {
    MlpParams g;
    g.dropout_rate = dropout_rate;
    for (const auto& w : weights) g.weights.push_back(Mat<S>::Zero(w.rows(), w.cols()));
    for (const auto& b : biases) g.biases.push_back(Vec<S>::Zero(b.size()));
    return g;
  }

  void axpy(S alpha, const MlpParams& other) {
    for (int l = 0; l < layer_count(); ++l) {
      weights[l] += alpha * other.weights[l];
      biases[l] += alpha * other.biases[l];
    }
  }
};

// He-style fan-in scaled uniform init, biases zero; fill order is fixed so
// the same seed gives the same parameters everywhere
template <typename S>
MlpParams<S> init_params(int input_dim, int num_classes,
                         const std::vector<int>& hidden, S dropout_rate,
                         std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 1) {
    throw std::runtime_error("init_params: dims must be >= 1");
  }
  std::vector<int> dims;
  dims.push_back(input_dim);
  for (int h : hidden) {
    if (h < 1) throw std::runtime_error("init_params: hidden width must be >= 1");
    dims.push_back(h);
  }
  dims.push_back(num_classes);

  Rng rng(stream_seed(seed, kStreamInit));
  MlpParams<S> params;
  params.dropout_rate = dropout_rate;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l];
    const int fan_out = dims[l + 1];
    const S limit = std::sqrt(S(6) / S(fan_in));
    Mat<S> w(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) {
        w(r, c) = static_cast<S>(rng.uniform(-limit, limit));
      }
    }
    params.weights.push_back(std::move(w));
    params.biases.push_back(Vec<S>::Zero(fan_out));
  }
  return params;
}

template <typename S>
struct MlpCache {
  std::vector<Mat<S>> inputs;   // input to each layer (post-dropout)
  std::vector<Mat<S>> pre;      // pre-activations per layer
  std::vector<Mat<S>> masks;    // dropout masks per hidden layer
  Mat<S> probs;                 // softmax of final pre-activation

  const Mat<S>& logits() const { return pre.back(); }
};

// Softmax class distribution; train_mode draws dropout masks from rng.
// Outputs are checked finite; the first offending layer is named on failure.
template <typename S>
Mat<S> forward(const MlpParams<S>& params, const Mat<S>& x, bool train_mode,
               Rng* rng, MlpCache<S>* cache = nullptr) {
  if (x.cols() != params.input_dim()) {
    throw std::runtime_error("forward: input dim mismatch");
  }
  const bool drop = train_mode && params.dropout_rate > S(0);
  if (drop && rng == nullptr) {
    throw std::runtime_error("forward: train mode with dropout needs an rng");
  }
  const S keep = S(1) - params.dropout_rate;

  MlpCache<S> local;
  MlpCache<S>& c = cache ? *cache : local;
  c.inputs.clear();
  c.pre.clear();
  c.masks.clear();

  Mat<S> act = x;
  for (int l = 0; l < params.layer_count(); ++l) {
    c.inputs.push_back(act);
    Mat<S> z = act * params.weights[l].transpose();
    z.rowwise() += params.biases[l].transpose();
    c.pre.push_back(z);
    if (l + 1 == params.layer_count()) break;
    act = z.cwiseMax(S(0));
    if (drop) {
      Mat<S> mask(act.rows(), act.cols());
      for (Eigen::Index i = 0; i < act.rows(); ++i) {
        for (Eigen::Index j = 0; j < act.cols(); ++j) {
          mask(i, j) = rng->uniform01() < keep ? S(1) / keep : S(0);
        }
      }
      act.array() *= mask.array();
      c.masks.push_back(std::move(mask));
    } else {
      c.masks.push_back(Mat<S>());
    }
  }

  if (!c.pre.back().allFinite()) {
    for (int l = 0; l < params.layer_count(); ++l) {
      if (!c.pre[l].allFinite()) {
        throw std::runtime_error("forward: non-finite output at layer " +
                                 std::to_string(l));
      }
    }
    throw std::runtime_error("forward: non-finite output");
  }
  c.probs = softmax_rows<S>(c.pre.back());
  return c.probs;
}

// Parameter gradients given dLoss/dLogits for a cached forward pass.
template <typename S>
MlpParams<S> backward(const MlpParams<S>& params, const MlpCache<S>& cache,
                      const Mat<S>& d_logits) {
  MlpParams<S> grads = params.zeros_like();
  Mat<S> dz = d_logits;
  for (int l = params.layer_count() - 1; l >= 0; --l) {
    grads.weights[l] = dz.transpose() * cache.inputs[l];
    grads.biases[l] = dz.colwise().sum().transpose();
    if (l == 0) break;
    Mat<S> dact = dz * params.weights[l];
    if (cache.masks[l - 1].size() > 0) {
      dact.array() *= cache.masks[l - 1].array();
    }
    dz = (cache.pre[l - 1].array() > S(0)).template cast<S>() * dact.array();
  }
  return grads;
}

// Forward-mode directional derivative of the logits along a parameter
// direction, reusing the cached activations and dropout masks.
template <typename S>
Mat<S> tangent_logits(const MlpParams<S>& params, const MlpCache<S>& cache,
                      const MlpParams<S>& dir) {
  Mat<S> t;  // tangent of the current layer input
  for (int l = 0; l < params.layer_count(); ++l) {
    Mat<S> tz = cache.inputs[l] * dir.weights[l].transpose();
    tz.rowwise() += dir.biases[l].transpose();
    if (l > 0) tz += t * params.weights[l].transpose();
    if (l + 1 == params.layer_count()) return tz;
    t = (cache.pre[l].array() > S(0)).template cast<S>() * tz.array();
    if (cache.masks[l].size() > 0) t.array() *= cache.masks[l].array();
  }
  throw std::runtime_error("tangent_logits: empty network");
}

template <typename S>
S cross_entropy(const Vec<S>& pred, int target) {
  if (target < 1 || target > pred.size()) {
    throw std::runtime_error("cross_entropy: target out of range");
  }
  return -std::log(std::max(pred[target - 1], S(1e-12)));
}

template <typename S>
S cross_entropy(const Vec<S>& pred, const Vec<S>& target) {
  if (pred.size() != target.size()) {
    throw std::runtime_error("cross_entropy: size mismatch");
  }
  S loss = S(0);
  for (Eigen::Index y = 0; y < pred.size(); ++y) {
    loss -= target[y] * std::log(std::max(pred[y], S(1e-12)));
  }
  return loss;
}

template <typename S>
S entropy(const Vec<S>& pred) {
  S h = S(0);
  for (Eigen::Index y = 0; y < pred.size(); ++y) {
    if (pred[y] > S(0)) h -= pred[y] * std::log(pred[y]);
  }
  return h;
}

// Adam over a flat parameter vector, standard bias correction.
struct AdamState {
  VecX m;
  VecX v;
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState create(Eigen::Index n, double lr) {
    AdamState s;
    s.m = VecX::Zero(n);
    s.v = VecX::Zero(n);
    s.lr = lr;
    return s;
  }
};

inline void adam_step(VecX& params, const VecX& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::runtime_error("adam_step: shape mismatch");
  }
  if (!grads.allFinite()) {
    throw std::runtime_error("adam_step: non-finite gradient");
  }
  state.step += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v.array().matrix() +
            (1.0 - state.beta2) * grads.array().square().matrix();
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.lr * (state.m.array() / bc1) /
                    ((state.v.array() / bc2).sqrt() + state.eps);
}

}  // namespace wisdom
