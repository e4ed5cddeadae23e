#include "wisdom/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "wisdom/metrics.hpp"
#include "wisdom/rng.hpp"

namespace wisdom {

using nlohmann::json;

Method method_from_string(const std::string& s) {
  if (s == "supervised") return Method::kSupervised;
  if (s == "snuba") return Method::kSnuba;
  if (s == "auto-spear" || s == "auto_spear") return Method::kAutoSpear;
  if (s == "wisdom") return Method::kWisdom;
  throw std::runtime_error("unknown method: " + s);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kSupervised: return "supervised";
    case Method::kSnuba: return "snuba";
    case Method::kAutoSpear: return "auto_spear";
    case Method::kWisdom: return "wisdom";
  }
  return "?";
}

namespace {

json json_from_mat(const MatX& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatX mat_from_json(const json& j, Eigen::Index cols_hint = 0) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return MatX(0, cols_hint);
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  MatX m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]
                    .get<double>();
    }
  }
  return m;
}

json json_from_vec(const VecX& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

VecX vec_from_json(const json& j) {
  VecX v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v[i] = j[static_cast<std::size_t>(i)].get<double>();
  }
  return v;
}

json json_from_adam(const AdamState& s) {
  json j;
  j["m"] = json_from_vec(s.m);
  j["v"] = json_from_vec(s.v);
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["beta1"] = s.beta1;
  j["beta2"] = s.beta2;
  j["eps"] = s.eps;
  return j;
}

AdamState adam_from_json(const json& j) {
  AdamState s;
  s.m = vec_from_json(j.at("m"));
  s.v = vec_from_json(j.at("v"));
  s.step = j.at("step").get<long>();
  s.lr = j.at("lr").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  return s;
}

json json_from_agg(const AggregatorParams<double>& a) {
  json j;
  j["theta"] = json_from_mat(a.theta);
  j["w"] = json_from_vec(a.w);
  j["q"] = json_from_vec(a.q);
  json t = json::array();
  for (Eigen::Index i = 0; i < a.target_class.size(); ++i) {
    t.push_back(a.target_class[i]);
  }
  j["target_class"] = t;
  return j;
}

AggregatorParams<double> agg_from_json(const json& j, int num_classes) {
  AggregatorParams<double> a;
  a.theta = mat_from_json(j.at("theta"), num_classes);
  a.w = vec_from_json(j.at("w"));
  a.q = vec_from_json(j.at("q"));
  const auto& t = j.at("target_class");
  a.target_class = Eigen::VectorXi(static_cast<Eigen::Index>(t.size()));
  for (Eigen::Index i = 0; i < a.target_class.size(); ++i) {
    a.target_class[i] = t[static_cast<std::size_t>(i)].get<int>();
  }
  return a;
}

json json_from_model(const MlpParams<double>& m) {
  json j;
  j["dropout_rate"] = m.dropout_rate;
  json w = json::array();
  for (const auto& layer : m.weights) w.push_back(json_from_mat(layer));
  j["weights"] = w;
  json b = json::array();
  for (const auto& bias : m.biases) b.push_back(json_from_vec(bias));
  j["biases"] = b;
  return j;
}

MlpParams<double> model_from_json(const json& j) {
  MlpParams<double> m;
  m.dropout_rate = j.at("dropout_rate").get<double>();
  for (const auto& layer : j.at("weights")) m.weights.push_back(mat_from_json(layer));
  for (const auto& bias : j.at("biases")) {
    m.biases.push_back(vec_from_json(bias));
  }
  return m;
}

MatX gather_rows(const MatX& x, const std::vector<int>& idx) {
  MatX out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
  }
  return out;
}

VecXi gather(const VecXi& v, const std::vector<int>& idx) {
  VecXi out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out[static_cast<Eigen::Index>(r)] = v[idx[r]];
  }
  return out;
}

VecX flatten_mat(const MatX& m) {
  VecX v(m.size());
  Eigen::Index at = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[at++] = m(i, j);
  }
  return v;
}

void unflatten_mat(const VecX& v, MatX& m) {
  Eigen::Index at = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = v[at++];
  }
}

struct TraceWriter {
  std::ofstream step_out;
  std::ofstream epoch_out;

  TraceWriter(const TrainerConfig& cfg, int lf_count, bool append) {
    if (!cfg.trace_path.empty()) {
      step_out.open(cfg.trace_path, append ? std::ios::app : std::ios::trunc);
      if (!step_out) {
        throw std::runtime_error("cannot write trace: " + cfg.trace_path);
      }
      step_out << std::setprecision(17);
      if (!append) {
        step_out << "step,ce_supervised,entropy_unsup,ce_vs_g,ll_s,ll_u,"
                    "kl_consistency,quality_guide,total\n";
      }
    }
    if (!cfg.epoch_trace_path.empty()) {
      epoch_out.open(cfg.epoch_trace_path,
                     append ? std::ios::app : std::ios::trunc);
      if (!epoch_out) {
        throw std::runtime_error("cannot write trace: " + cfg.epoch_trace_path);
      }
      epoch_out << std::setprecision(17);
      if (!append) {
        epoch_out << "epoch,val_macro_f1";
        for (int j = 0; j < lf_count; ++j) epoch_out << ",w" << j;
        epoch_out << "\n";
      }
    }
  }

  void step(const StepTrace& t) {
    if (!step_out.is_open()) return;
    const auto& l = t.loss;
    step_out << t.step << ',' << l.ce_supervised << ',' << l.entropy_unsup
             << ',' << l.ce_vs_g << ',' << l.ll_s << ',' << l.ll_u << ','
             << l.kl_consistency << ',' << l.quality_guide << ',' << l.total
             << '\n';
  }

  void epoch(const EpochTrace& t) {
    if (!epoch_out.is_open()) return;
    epoch_out << t.epoch << ',' << t.val_macro_f1;
    for (Eigen::Index j = 0; j < t.w.size(); ++j) epoch_out << ',' << t.w[j];
    epoch_out << '\n';
  }
};

// cycling minibatch sampler over the unlabeled rows; reshuffles each pass
struct UnlabeledSampler {
  const std::uint64_t seed;
  const int n;
  std::vector<int> perm;
  std::size_t cursor = 0;
  std::uint64_t pass = 0;

  UnlabeledSampler(std::uint64_t seed_in, int n_in, std::size_t cursor_in,
                   std::uint64_t pass_in)
      : seed(seed_in), n(n_in), cursor(cursor_in), pass(pass_in) {
    rebuild();
  }

  void rebuild() {
    perm.resize(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(stream_seed(seed, kStreamSampleU, pass));
    rng.shuffle(perm);
  }

  std::vector<int> next(int batch) {
    std::vector<int> idx;
    if (n == 0) return idx;
    const int take = std::min(batch, n);
    idx.reserve(static_cast<std::size_t>(take));
    for (int b = 0; b < take; ++b) {
      if (cursor >= perm.size()) {
        ++pass;
        cursor = 0;
        rebuild();
      }
      idx.push_back(perm[cursor++]);
    }
    return idx;
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json j;
  j["version"] = ck.version;
  j["method"] = to_string(ck.method);
  j["seed"] = ck.seed;
  j["epoch"] = ck.epoch;
  j["global_step"] = ck.global_step;
  j["agg"] = json_from_agg(ck.agg);
  j["model"] = json_from_model(ck.model);
  j["adam_theta"] = json_from_adam(ck.adam_theta);
  j["adam_phi"] = json_from_adam(ck.adam_phi);
  j["u_cursor"] = ck.u_cursor;
  j["u_epoch"] = ck.u_epoch;
  j["best_val_f1"] = ck.best_val_f1;
  j["best_epoch"] = ck.best_epoch;
  j["bad_epochs"] = ck.bad_epochs;
  j["best_agg"] = json_from_agg(ck.best_agg);
  j["best_model"] = json_from_model(ck.best_model);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
    out << j.dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j;
  in >> j;
  Checkpoint ck;
  ck.version = j.at("version").get<int>();
  if (ck.version != 1) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  ck.method = method_from_string(j.at("method").get<std::string>());
  ck.seed = j.at("seed").get<std::uint64_t>();
  ck.epoch = j.at("epoch").get<int>();
  ck.global_step = j.at("global_step").get<long>();
  const int k = static_cast<int>(j.at("agg").at("theta").empty()
                                     ? 0
                                     : j.at("agg").at("theta")[0].size());
  ck.agg = agg_from_json(j.at("agg"), k);
  ck.model = model_from_json(j.at("model"));
  ck.adam_theta = adam_from_json(j.at("adam_theta"));
  ck.adam_phi = adam_from_json(j.at("adam_phi"));
  ck.u_cursor = j.at("u_cursor").get<std::size_t>();
  ck.u_epoch = j.at("u_epoch").get<std::uint64_t>();
  ck.best_val_f1 = j.at("best_val_f1").get<double>();
  ck.best_epoch = j.at("best_epoch").get<int>();
  ck.bad_epochs = j.at("bad_epochs").get<int>();
  ck.best_agg = agg_from_json(j.at("best_agg"), k);
  ck.best_model = model_from_json(j.at("best_model"));
  return ck;
}

std::pair<AggregatorParams<double>, MlpParams<double>> virtual_inner_step(
    const AggregatorParams<double>& agg, const MlpParams<double>& mlp,
    const BatchS<double>& bs, const BatchU<double>& bu,
    const TermConfig& terms, double alpha_theta, double alpha_phi,
    std::uint64_t mask_seed) {
  JointGrads<double> grads;
  joint_loss(agg, mlp, bs, bu, terms, /*train_mode=*/true, mask_seed, &grads);
  if (!grads.agg.theta.allFinite() || !grads.agg.w.allFinite()) {
    throw std::runtime_error("virtual_inner_step: non-finite gradient");
  }
  for (const auto& w : grads.phi.weights) {
    if (!w.allFinite()) {
      throw std::runtime_error("virtual_inner_step: non-finite gradient");
    }
  }
  AggregatorParams<double> agg_star = agg;
  agg_star.theta -= alpha_theta * grads.agg.theta;
  MlpParams<double> phi_star = mlp;
  phi_star.axpy(-alpha_phi, grads.phi);
  return {std::move(agg_star), std::move(phi_star)};
}

namespace {

// gradient of the mean validation CE w.r.t. model parameters, eval mode
MlpParams<double> validation_grad(const MlpParams<double>& phi, const MatX& xv,
                                  const VecXi& yv, double* loss_out = nullptr) {
  MlpCache<double> cache;
  const MatX probs = forward(phi, xv, /*train_mode=*/false, nullptr, &cache);
  const double inv_n = 1.0 / static_cast<double>(xv.rows());
  MatX dz = probs * inv_n;
  double loss = 0.0;
  const MatX log_f = log_softmax_rows<double>(cache.logits());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    dz(i, yv[i] - 1) -= inv_n;
    loss -= log_f(i, yv[i] - 1) * inv_n;
  }
  if (loss_out) *loss_out = loss;
  return backward(phi, cache, dz);
}

VecX hypergradient_impl(const AggregatorParams<double>& agg,
                        const MlpParams<double>& mlp, const BatchS<double>& bs,
                        const BatchU<double>& bu, const MatX& xv,
                        const VecXi& yv, const TrainerConfig& config,
                        std::uint64_t mask_seed,
                        const JointEval<double>& eval,
                        const JointGrads<double>& grads) {
  // virtual phi step, then the validation gradient at the stepped point
  MlpParams<double> phi_star = mlp;
  phi_star.axpy(-config.alpha_phi, grads.phi);
  const MlpParams<double> v = validation_grad(phi_star, xv, yv);

  const bool analytic =
      config.hyper_mode == TrainerConfig::HyperMode::kFirstOrder ||
      config.jvp_mode == TrainerConfig::JvpMode::kAnalytic;
  if (analytic) {
    const VecX mixed = mixed_grad_w(agg, mlp, bs, bu, config.terms, eval, v);
    return -config.alpha_phi * mixed;
  }

  // symmetric finite-difference JVP with the same dropout masks
  double v_norm_sq = 0.0;
  for (const auto& w : v.weights) v_norm_sq += w.squaredNorm();
  for (const auto& b : v.biases) v_norm_sq += b.squaredNorm();
  const double v_norm = std::sqrt(v_norm_sq);
  if (v_norm == 0.0) return VecX::Zero(agg.lf_count());

  double phi_inf = 0.0;
  for (const auto& w : mlp.weights) {
    phi_inf = std::max(phi_inf, w.cwiseAbs().maxCoeff());
  }
  for (const auto& b : mlp.biases) {
    if (b.size() > 0) phi_inf = std::max(phi_inf, b.cwiseAbs().maxCoeff());
  }
  const double eps = 1e-3 * (1.0 + phi_inf);

  MlpParams<double> phi_plus = mlp;
  phi_plus.axpy(eps / v_norm, v);
  MlpParams<double> phi_minus = mlp;
  phi_minus.axpy(-eps / v_norm, v);

  JointGrads<double> gp, gm;
  joint_loss(agg, phi_plus, bs, bu, config.terms, true, mask_seed, &gp);
  joint_loss(agg, phi_minus, bs, bu, config.terms, true, mask_seed, &gm);
  const VecX mixed = (gp.agg.w - gm.agg.w) * (v_norm / (2.0 * eps));
  return -config.alpha_phi * mixed;
}

}  // namespace

VecX hypergradient(const AggregatorParams<double>& agg,
                   const MlpParams<double>& mlp, const BatchS<double>& bs,
                   const BatchU<double>& bu, const MatX& xv, const VecXi& yv,
                   const TrainerConfig& config, std::uint64_t mask_seed) {
  if (xv.rows() == 0) {
    throw std::runtime_error("hypergradient: empty validation split");
  }
  JointGrads<double> grads;
  const JointEval<double> eval = joint_loss(agg, mlp, bs, bu, config.terms,
                                            true, mask_seed, &grads);
  return hypergradient_impl(agg, mlp, bs, bu, xv, yv, config, mask_seed, eval,
                            grads);
}

VecX outer_weight_step(const AggregatorParams<double>& agg,
                       const MlpParams<double>& mlp, const BatchS<double>& bs,
                       const BatchU<double>& bu, const MatX& xv,
                       const VecXi& yv, const TrainerConfig& config,
                       std::uint64_t mask_seed, std::string* warning) {
  const VecX h = hypergradient(agg, mlp, bs, bu, xv, yv, config, mask_seed);
  if (!h.allFinite()) {
    if (warning) *warning = "outer step skipped: non-finite hypergradient";
    return agg.w;
  }
  return (agg.w - config.beta * h).cwiseMax(0.0).cwiseMin(1.0);
}

namespace {

TrainResult train_snuba(const TrainData& data, const TrainerConfig& config,
                        Checkpoint* final_state) {
  const int m = data.lf_count();
  const int k = data.num_classes;
  const int nu = static_cast<int>(data.xu.rows());
  if (nu == 0) {
    throw std::runtime_error("snuba baseline needs unlabeled rows");
  }

  // (i) fit the unweighted label model on the unlabeled triggers
  AggregatorParams<double> agg = AggregatorParams<double>::uniform_init(
      m, k, data.lf_targets, data.lf_q);
  AdamState adam_theta = AdamState::create(agg.theta.size(), config.alpha_theta);
  for (int it = 0; it < config.cage_iters; ++it) {
    AggGrads<double> g;
    g.init_zero(m, k);
    ll_unsupervised(agg, data.lu, &g);
    quality_guide_loss(agg, &g);
    VecX theta_flat = flatten_mat(agg.theta);
    adam_step(theta_flat, flatten_mat(g.theta), adam_theta);
    unflatten_mat(theta_flat, agg.theta);
  }

  // (ii) probabilistic labels for the unlabeled set
  const MatX soft = posterior_batch(agg, data.lu);

  // (iii) train the classifier on the probabilistic labels
  MlpParams<double> phi = init_params<double>(
      data.feature_dim(), k, config.hidden, config.dropout, config.seed);
  AdamState adam_phi = AdamState::create(phi.parameter_count(), config.alpha_phi);

  TrainResult result;
  TraceWriter traces(config, m, /*append=*/false);
  AggregatorParams<double> best_agg = agg;
  MlpParams<double> best_model = phi;
  double best_f1 = -1.0;
  int best_epoch = -1;
  int bad = 0;
  long gstep = 0;

  const int steps = (nu + config.batch_size - 1) / config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> perm(static_cast<std::size_t>(nu));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(stream_seed(config.seed, kStreamSampleS, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(perm);

    for (int s = 0; s < steps; ++s) {
      const int lo = s * config.batch_size;
      const int hi = std::min(lo + config.batch_size, nu);
      std::vector<int> idx(perm.begin() + lo, perm.begin() + hi);
      const MatX xb = gather_rows(data.xu, idx);
      MatX tb(static_cast<Eigen::Index>(idx.size()), k);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        tb.row(static_cast<Eigen::Index>(r)) = soft.row(idx[r]);
      }

      MlpCache<double> cache;
      Rng mask_rng(stream_seed(config.seed, kStreamMaskCommit,
                               static_cast<std::uint64_t>(gstep)));
      forward(phi, xb, /*train_mode=*/true, &mask_rng, &cache);
      const MatX log_f = log_softmax_rows<double>(cache.logits());
      double ce = 0.0;
      for (Eigen::Index i = 0; i < xb.rows(); ++i) {
        for (int y = 0; y < k; ++y) ce -= tb(i, y) * log_f(i, y);
      }
      const MatX dz = cache.probs - tb;
      const MlpParams<double> g = backward(phi, cache, dz);

      VecX phi_flat = phi.flatten();
      adam_step(phi_flat, g.flatten(), adam_phi);
      phi.set_flat(phi_flat);

      StepTrace t;
      t.step = gstep;
      t.loss.ce_vs_g = ce;
      t.loss.total = ce;
      traces.step(t);
      result.steps.push_back(t);
      ++gstep;
    }

    const double f1 =
        evaluate_macro_f1(predict_classes(phi, data.xv), data.yv, k);
    EpochTrace et{epoch, f1, agg.w};
    traces.epoch(et);
    result.epochs.push_back(et);
    result.epochs_run = epoch + 1;
    if (config.verbose) {
      std::cerr << "[snuba] epoch " << epoch << " val_f1 " << f1 << "\n";
    }
    if (f1 > best_f1) {
      best_f1 = f1;
      best_epoch = epoch;
      best_agg = agg;
      best_model = phi;
      bad = 0;
    } else if (++bad > config.patience) {
      break;
    }
  }

  result.agg = best_epoch >= 0 ? best_agg : agg;
  result.model = best_epoch >= 0 ? best_model : phi;
  result.best_val_f1 = best_f1 < 0.0 ? 0.0 : best_f1;
  result.best_epoch = best_epoch;
  if (final_state) {
    final_state->method = Method::kSnuba;
    final_state->seed = config.seed;
    final_state->agg = agg;
    final_state->model = phi;
    final_state->adam_theta = adam_theta;
    final_state->adam_phi = adam_phi;
    final_state->epoch = result.epochs_run;
    final_state->global_step = gstep;
    final_state->best_val_f1 = result.best_val_f1;
    final_state->best_epoch = best_epoch;
    final_state->best_agg = result.agg;
    final_state->best_model = result.model;
  }
  return result;
}

}  // namespace

TrainResult train(const TrainData& data, const TrainerConfig& config,
                  const Checkpoint* resume, Checkpoint* final_state) {
  const int m = data.lf_count();
  const int k = data.num_classes;
  const int ns = static_cast<int>(data.xs.rows());
  const int nu = static_cast<int>(data.xu.rows());
  if (k < 2) throw std::runtime_error("train: need at least 2 classes");
  if (ns == 0) throw std::runtime_error("train: empty supervised split");
  if (data.xv.rows() == 0) {
    throw std::runtime_error("train: empty validation split");
  }
  if (config.method != Method::kSupervised && m == 0) {
    throw std::runtime_error(
        "train: method requires labeling functions but none were provided");
  }

  TrainerConfig cfg = config;
  if (cfg.method == Method::kSupervised) {
    cfg.terms = TermConfig::supervised_only();
  }
  if (cfg.method == Method::kSnuba) {
    return train_snuba(data, cfg, final_state);
  }

  const bool use_u = cfg.method != Method::kSupervised && nu > 0;
  const bool joint_theta = cfg.method != Method::kSupervised && m > 0;
  const bool outer = cfg.method == Method::kWisdom;

  AggregatorParams<double> agg;
  MlpParams<double> phi;
  AdamState adam_theta, adam_phi;
  long gstep = 0;
  int start_epoch = 0;
  std::size_t u_cursor = 0;
  std::uint64_t u_epoch = 0;
  double best_f1 = -1.0;
  int best_epoch = -1;
  int bad = 0;
  AggregatorParams<double> best_agg;
  MlpParams<double> best_model;

  if (resume) {
    agg = resume->agg;
    phi = resume->model;
    adam_theta = resume->adam_theta;
    adam_phi = resume->adam_phi;
    gstep = resume->global_step;
    start_epoch = resume->epoch;
    u_cursor = resume->u_cursor;
    u_epoch = resume->u_epoch;
    best_f1 = resume->best_epoch >= 0 ? resume->best_val_f1 : -1.0;
    best_epoch = resume->best_epoch;
    bad = resume->bad_epochs;
    best_agg = resume->best_agg;
    best_model = resume->best_model;
  } else {
    agg = AggregatorParams<double>::uniform_init(m, k, data.lf_targets,
                                                 data.lf_q);
    if (cfg.random_w_init && m > 0) {
      Rng rng(stream_seed(cfg.seed, kStreamWInit));
      for (int j = 0; j < m; ++j) agg.w[j] = rng.uniform01();
    }
    phi = init_params<double>(data.feature_dim(), k, cfg.hidden, cfg.dropout,
                              cfg.seed);
    adam_theta = AdamState::create(agg.theta.size(), cfg.alpha_theta);
    adam_phi = AdamState::create(phi.parameter_count(), cfg.alpha_phi);
    best_agg = agg;
    best_model = phi;
  }

  TrainResult result;
  TraceWriter traces(cfg, m, /*append=*/resume != nullptr);
  UnlabeledSampler u_sampler(cfg.seed, use_u ? nu : 0, u_cursor, u_epoch);

  const int steps = (ns + cfg.batch_size - 1) / cfg.batch_size;
  int epoch = start_epoch;
  for (; epoch < cfg.epochs; ++epoch) {
    std::vector<int> s_perm(static_cast<std::size_t>(ns));
    std::iota(s_perm.begin(), s_perm.end(), 0);
    Rng s_rng(stream_seed(cfg.seed, kStreamSampleS,
                          static_cast<std::uint64_t>(epoch)));
    s_rng.shuffle(s_perm);

    for (int s = 0; s < steps; ++s) {
      const int lo = s * cfg.batch_size;
      const int hi = std::min(lo + cfg.batch_size, ns);
      const std::vector<int> s_idx(s_perm.begin() + lo, s_perm.begin() + hi);

      BatchS<double> bs;
      bs.x = gather_rows(data.xs, s_idx);
      bs.y = gather(data.ys, s_idx);
      bs.l = gather_rows(data.ls, s_idx);

      BatchU<double> bu;
      if (use_u) {
        const auto u_idx = u_sampler.next(cfg.batch_size);
        bu.x = gather_rows(data.xu, u_idx);
        bu.l = gather_rows(data.lu, u_idx);
      } else {
        bu.x = MatX(0, data.feature_dim());
        bu.l = MatX(0, m);
      }

      if (outer) {
        const std::uint64_t inner_seed = stream_seed(
            cfg.seed, kStreamMaskInner, static_cast<std::uint64_t>(gstep));
        JointGrads<double> inner_grads;
        const JointEval<double> inner_eval = joint_loss(
            agg, phi, bs, bu, cfg.terms, true, inner_seed, &inner_grads);
        const VecX h =
            hypergradient_impl(agg, phi, bs, bu, data.xv, data.yv, cfg,
                               inner_seed, inner_eval, inner_grads);
        if (h.allFinite()) {
          agg.w = (agg.w - cfg.beta * h).cwiseMax(0.0).cwiseMin(1.0);
        } else {
          result.warnings.push_back("step " + std::to_string(gstep) +
                                    ": non-finite hypergradient, outer step "
                                    "skipped");
        }
      }

      const std::uint64_t commit_seed = stream_seed(
          cfg.seed, kStreamMaskCommit, static_cast<std::uint64_t>(gstep));
      JointGrads<double> grads;
      const JointEval<double> eval =
          joint_loss(agg, phi, bs, bu, cfg.terms, true, commit_seed, &grads);

      if (joint_theta) {
        VecX theta_flat = flatten_mat(agg.theta);
        adam_step(theta_flat, flatten_mat(grads.agg.theta), adam_theta);
        unflatten_mat(theta_flat, agg.theta);
      }
      VecX phi_flat = phi.flatten();
      adam_step(phi_flat, grads.phi.flatten(), adam_phi);
      phi.set_flat(phi_flat);

      StepTrace t;
      t.step = gstep;
      t.loss = eval.loss;
      traces.step(t);
      result.steps.push_back(t);
      ++gstep;
    }

    const double f1 =
        evaluate_macro_f1(predict_classes(phi, data.xv), data.yv, k);
    EpochTrace et{epoch, f1, agg.w};
    traces.epoch(et);
    result.epochs.push_back(et);
    result.epochs_run = epoch + 1;
    if (cfg.verbose) {
      std::cerr << "[" << to_string(cfg.method) << "] epoch " << epoch
                << " val_f1 " << f1 << "\n";
    }

    if (f1 > best_f1) {
      best_f1 = f1;
      best_epoch = epoch;
      best_agg = agg;
      best_model = phi;
      bad = 0;
    } else if (++bad > cfg.patience) {
      ++epoch;
      break;
    }
  }

  result.agg = best_epoch >= 0 ? best_agg : agg;
  result.model = best_epoch >= 0 ? best_model : phi;
  result.best_val_f1 = best_f1 < 0.0 ? 0.0 : best_f1;
  result.best_epoch = best_epoch;

  if (final_state) {
    final_state->version = 1;
    final_state->method = cfg.method;
    final_state->seed = cfg.seed;
    final_state->epoch = epoch;
    final_state->global_step = gstep;
    final_state->agg = agg;
    final_state->model = phi;
    final_state->adam_theta = adam_theta;
    final_state->adam_phi = adam_phi;
    final_state->u_cursor = u_sampler.cursor;
    final_state->u_epoch = u_sampler.pass;
    final_state->best_val_f1 = best_f1 < 0.0 ? 0.0 : best_f1;
    final_state->best_epoch = best_epoch;
    final_state->bad_epochs = bad;
    final_state->best_agg = best_agg;
    final_state->best_model = best_model;
  }
  return result;
}

}  // namespace wisdom
