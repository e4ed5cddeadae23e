#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "wisdom/aggregator.hpp"
#include "wisdom/model.hpp"
#include "wisdom/numerics.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// Per-term switches and scalar weights for the joint semi-supervised loss.
struct TermConfig {
  bool use_ce_supervised = true;
  bool use_entropy_unsup = true;
  bool use_ce_vs_g = true;
  bool use_ll_s = true;
  bool use_ll_u = true;
  bool use_kl = true;
  bool use_quality_guide = true;

  double c_ce_supervised = 1.0;
  double c_entropy_unsup = 1.0;
  double c_ce_vs_g = 1.0;
  double c_ll_s = 1.0;
  double c_ll_u = 1.0;
  double c_kl = 1.0;
  double c_quality_guide = 1.0;

  // when set, the aggregator target for the consistency CE is the posterior
  // distribution instead of the hard argmax label
  bool soft_g_target = false;

  static TermConfig supervised_only() {
    TermConfig t;
    t.use_entropy_unsup = t.use_ce_vs_g = t.use_ll_s = t.use_ll_u = t.use_kl =
        t.use_quality_guide = false;
    return t;
  }
};

// Raw (unweighted) term values; total applies the configured weights over the
// enabled terms. Losses are sums over the minibatch, not means.
template <typename S>
struct LossBreakdown {
  S ce_supervised = S(0);
  S entropy_unsup = S(0);
  S ce_vs_g = S(0);
  S ll_s = S(0);
  S ll_u = S(0);
  S kl_consistency = S(0);
  S quality_guide = S(0);
  S total = S(0);
};

template <typename S>
struct BatchS {
  Mat<S> x;
  Eigen::VectorXi y;  // 1..K
  Mat<S> l;
};

template <typename S>
struct BatchU {
  Mat<S> x;
  Mat<S> l;

  Eigen::Index rows() const { return x.rows(); }
};

template <typename S>
struct JointGrads {
  AggGrads<S> agg;
  MlpParams<S> phi;
};

template <typename S>
struct JointEval {
  LossBreakdown<S> loss;
  MlpCache<S> cache_s, cache_u;
  Mat<S> post_s, post_u;  // aggregator posteriors per row
  Eigen::VectorXi g_u;    // hard consistency targets; 0 marks all-abstain rows
};

namespace detail {

template <typename S>
void check_finite(S value, const char* term) {
  if (!std::isfinite(static_cast<double>(value))) {
    throw std::runtime_error(std::string("joint_loss: non-finite term ") +
                             term);
  }
}

}  // namespace detail

// The reweighted joint SSL objective. Gradients are exact for theta, w and
// phi; the hard consistency target g is a stop-gradient (no derivative flows
// through the argmax). All-abstain unlabeled rows are skipped by the
// consistency CE and enter the KL with a uniform posterior.
template <typename S>
JointEval<S> joint_loss(const AggregatorParams<S>& agg,
                        const MlpParams<S>& mlp, const BatchS<S>& bs,
                        const BatchU<S>& bu, const TermConfig& terms,
                        bool train_mode, std::uint64_t mask_seed,
                        JointGrads<S>* grads = nullptr) {
  const Eigen::Index ns = bs.x.rows();
  const Eigen::Index nu = bu.x.rows();
  if (ns == 0) throw std::runtime_error("joint_loss: empty supervised batch");
  const int k = static_cast<int>(mlp.output_dim());

  JointEval<S> eval;
  if (grads) {
    grads->agg.init_zero(agg.lf_count(), agg.class_count());
    grads->phi = mlp.zeros_like();
  }

  Rng rng(mask_seed);
  forward(mlp, bs.x, train_mode, &rng, &eval.cache_s);
  if (nu > 0) forward(mlp, bu.x, train_mode, &rng, &eval.cache_u);

  const Mat<S> log_f_s = log_softmax_rows<S>(eval.cache_s.logits());
  const Mat<S> log_f_u =
      nu > 0 ? log_softmax_rows<S>(eval.cache_u.logits()) : Mat<S>();
  const Mat<S>& f_s = eval.cache_s.probs;
  const Mat<S>& f_u = eval.cache_u.probs;

  const Mat<S> scores_s = posterior_scores(agg, bs.l);
  eval.post_s = softmax_rows<S>(scores_s);
  if (nu > 0) {
    const Mat<S> scores_u = posterior_scores(agg, bu.l);
    eval.post_u = softmax_rows<S>(scores_u);
    eval.g_u = Eigen::VectorXi::Zero(nu);
    for (Eigen::Index i = 0; i < nu; ++i) {
      if (bu.l.row(i).sum() > S(0)) {
        eval.g_u[i] = argmax_tie_low(scores_u.row(i)) + 1;
      }
    }
  }

  Mat<S> dz_s = Mat<S>::Zero(ns, k);
  Mat<S> dz_u = Mat<S>::Zero(nu, k);
  Mat<S> ds_s = Mat<S>::Zero(ns, agg.class_count());  // d/d posterior scores
  Mat<S> ds_u = Mat<S>::Zero(nu, agg.class_count());

  auto& loss = eval.loss;

  if (terms.use_ce_supervised) {
    for (Eigen::Index i = 0; i < ns; ++i) {
      loss.ce_supervised -= log_f_s(i, bs.y[i] - 1);
    }
    detail::check_finite(loss.ce_supervised, "ce_supervised");
    if (grads) {
      const S c = static_cast<S>(terms.c_ce_supervised);
      dz_s += c * f_s;
      for (Eigen::Index i = 0; i < ns; ++i) dz_s(i, bs.y[i] - 1) -= c;
    }
  }

  if (terms.use_entropy_unsup && nu > 0) {
    for (Eigen::Index i = 0; i < nu; ++i) {
      S h = S(0);
      for (int y = 0; y < k; ++y) {
        if (f_u(i, y) > S(0)) h -= f_u(i, y) * log_f_u(i, y);
      }
      loss.entropy_unsup += h;
      if (grads) {
        const S c = static_cast<S>(terms.c_entropy_unsup);
        for (int y = 0; y < k; ++y) {
          dz_u(i, y) += c * (-f_u(i, y) * (log_f_u(i, y) + h));
        }
      }
    }
    detail::check_finite(loss.entropy_unsup, "entropy_unsup");
  }

  if (terms.use_ce_vs_g && nu > 0) {
    const S c = static_cast<S>(terms.c_ce_vs_g);
    for (Eigen::Index i = 0; i < nu; ++i) {
      if (eval.g_u[i] == 0) continue;  // all LFs abstained
      if (terms.soft_g_target) {
        S ce = S(0);
        for (int y = 0; y < k; ++y) ce -= eval.post_u(i, y) * log_f_u(i, y);
        loss.ce_vs_g += ce;
        if (grads) {
          dz_u.row(i) += c * (f_u.row(i) - eval.post_u.row(i));
          // gradient through the soft target
          S dot = S(0);
          for (int y = 0; y < k; ++y) {
            dot += eval.post_u(i, y) * (-log_f_u(i, y));
          }
          for (int y = 0; y < k; ++y) {
            ds_u(i, y) += c * eval.post_u(i, y) * (-log_f_u(i, y) - dot);
          }
        }
      } else {
        loss.ce_vs_g -= log_f_u(i, eval.g_u[i] - 1);
        if (grads) {
          dz_u.row(i) += c * f_u.row(i);
          dz_u(i, eval.g_u[i] - 1) -= c;
        }
      }
    }
    detail::check_finite(loss.ce_vs_g, "ce_vs_g");
  }

  if (terms.use_ll_s) {
    AggGrads<S> tmp;
    if (grads) tmp.init_zero(agg.lf_count(), agg.class_count());
    loss.ll_s = ll_supervised(agg, bs.l, bs.y, grads ? &tmp : nullptr);
    detail::check_finite(loss.ll_s, "ll_s");
    if (grads) {
      const S c = static_cast<S>(terms.c_ll_s);
      grads->agg.theta += c * tmp.theta;
      grads->agg.w += c * tmp.w;
    }
  }

  if (terms.use_ll_u && nu > 0) {
    AggGrads<S> tmp;
    if (grads) tmp.init_zero(agg.lf_count(), agg.class_count());
    loss.ll_u = ll_unsupervised(agg, bu.l, grads ? &tmp : nullptr);
    detail::check_finite(loss.ll_u, "ll_u");
    if (grads) {
      const S c = static_cast<S>(terms.c_ll_u);
      grads->agg.theta += c * tmp.theta;
      grads->agg.w += c * tmp.w;
    }
  }

  if (terms.use_kl) {
    const S c = static_cast<S>(terms.c_kl);
    auto add_kl = [&](const Mat<S>& post, const Mat<S>& log_f, const Mat<S>& f,
                      Mat<S>& dz, Mat<S>& ds) {
      for (Eigen::Index i = 0; i < post.rows(); ++i) {
        S kl = S(0);
        for (int y = 0; y < k; ++y) {
          if (post(i, y) > S(0)) {
            kl += post(i, y) * (std::log(post(i, y)) - log_f(i, y));
          }
        }
        loss.kl_consistency += kl;
        if (grads) {
          dz.row(i) += c * (f.row(i) - post.row(i));
          for (int y = 0; y < k; ++y) {
            if (post(i, y) > S(0)) {
              ds(i, y) += c * post(i, y) *
                          (std::log(post(i, y)) - log_f(i, y) - kl);
            }
          }
        }
      }
    };
    add_kl(eval.post_s, log_f_s, f_s, dz_s, ds_s);
    if (nu > 0) add_kl(eval.post_u, log_f_u, f_u, dz_u, ds_u);
    detail::check_finite(loss.kl_consistency, "kl_consistency");
  }

  if (terms.use_quality_guide) {
    AggGrads<S> tmp;
    if (grads) tmp.init_zero(agg.lf_count(), agg.class_count());
    loss.quality_guide = quality_guide_loss(agg, grads ? &tmp : nullptr);
    detail::check_finite(loss.quality_guide, "quality_guide");
    if (grads) {
      const S c = static_cast<S>(terms.c_quality_guide);
      grads->agg.theta += c * tmp.theta;
      grads->agg.w += c * tmp.w;
    }
  }

  if (grads) {
    // chain the posterior-score gradients into (theta, w)
    Mat<S> da = bs.l.transpose() * ds_s;
    if (nu > 0) da += bu.l.transpose() * ds_u;
    detail::accumulate_from_a(agg, da, &grads->agg);

    grads->phi = backward(mlp, eval.cache_s, dz_s);
    if (nu > 0) {
      const MlpParams<S> gu = backward(mlp, eval.cache_u, dz_u);
      grads->phi.axpy(S(1), gu);
    }
  }

  loss.total = S(0);
  if (terms.use_ce_supervised)
    loss.total += static_cast<S>(terms.c_ce_supervised) * loss.ce_supervised;
  if (terms.use_entropy_unsup)
    loss.total += static_cast<S>(terms.c_entropy_unsup) * loss.entropy_unsup;
  if (terms.use_ce_vs_g)
    loss.total += static_cast<S>(terms.c_ce_vs_g) * loss.ce_vs_g;
  if (terms.use_ll_s) loss.total += static_cast<S>(terms.c_ll_s) * loss.ll_s;
  if (terms.use_ll_u) loss.total += static_cast<S>(terms.c_ll_u) * loss.ll_u;
  if (terms.use_kl) loss.total += static_cast<S>(terms.c_kl) * loss.kl_consistency;
  if (terms.use_quality_guide)
    loss.total += static_cast<S>(terms.c_quality_guide) * loss.quality_guide;
  detail::check_finite(loss.total, "total");

  return eval;
}

// Gradient w.r.t. w of the directional derivative of the joint loss along a
// model-parameter direction. This is the only second-order quantity the
// one-step hypergradient needs: w couples to phi through the aggregator
// posterior inside the KL (and the soft consistency target when enabled);
// the hard argmax target contributes nothing almost everywhere.
template <typename S>
Vec<S> mixed_grad_w(const AggregatorParams<S>& agg, const MlpParams<S>& mlp,
                    const BatchS<S>& bs, const BatchU<S>& bu,
                    const TermConfig& terms, const JointEval<S>& eval,
                    const MlpParams<S>& dir) {
  Vec<S> mixed = Vec<S>::Zero(agg.lf_count());
  if (agg.lf_count() == 0) return mixed;

  auto add_batch = [&](const Mat<S>& x_l, const Mat<S>& post,
                       const MlpCache<S>& cache, const Vec<S>& coef) {
    if (post.rows() == 0) return;
    const Mat<S> tz = tangent_logits(mlp, cache, dir);
    const Mat<S>& f = cache.probs;
    // tangent of log-softmax: d_iy = tz_iy - sum_y' f_iy' tz_iy'
    Mat<S> d = tz;
    const Vec<S> row_dot = (f.array() * tz.array()).rowwise().sum();
    d.colwise() -= row_dot;

    const Vec<S> pd = (post.array() * d.array()).rowwise().sum();
    const Mat<S> m1 = (post.array() * d.array()).matrix() * agg.theta.transpose();
    const Mat<S> m2 = post * agg.theta.transpose();
    // mixed_j += -sum_i coef_i l_ij (m1_ij - pd_i m2_ij)
    Mat<S> contrib = m1 - m2.array().colwise() * pd.array();
    contrib.array() *= x_l.array();
    contrib.array().colwise() *= coef.array();
    mixed -= contrib.colwise().sum().transpose();
  };

  const S c_kl = terms.use_kl ? static_cast<S>(terms.c_kl) : S(0);
  const Vec<S> coef_s = Vec<S>::Constant(bs.x.rows(), c_kl);
  add_batch(bs.l, eval.post_s, eval.cache_s, coef_s);

  if (bu.rows() > 0) {
    Vec<S> coef_u = Vec<S>::Constant(bu.rows(), c_kl);
    if (terms.use_ce_vs_g && terms.soft_g_target) {
      for (Eigen::Index i = 0; i < bu.rows(); ++i) {
        if (eval.g_u[i] != 0) coef_u[i] += static_cast<S>(terms.c_ce_vs_g);
      }
    }
    add_batch(bu.l, eval.post_u, eval.cache_u, coef_u);
  }
  return mixed;
}

}  // namespace wisdom
