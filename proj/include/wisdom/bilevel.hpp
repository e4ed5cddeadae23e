#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wisdom/aggregator.hpp"
#include "wisdom/model.hpp"
#include "wisdom/objective.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

enum class Method { kSupervised, kSnuba, kAutoSpear, kWisdom };

Method method_from_string(const std::string& s);
std::string to_string(Method m);

// Everything a training run consumes: features and labels per split plus the
// LF trigger matrices for the supervised and unlabeled splits.
struct TrainData {
  MatX xs;
  VecXi ys;
  MatX ls;
  MatX xu;
  MatX lu;
  MatX xv;
  VecXi yv;
  std::vector<int> lf_targets;  // 1..K per LF
  VecX lf_q;
  int num_classes = 0;

  int lf_count() const { return static_cast<int>(ls.cols()); }
  int feature_dim() const { return static_cast<int>(xs.cols()); }
};

struct TrainerConfig {
  double alpha_theta = 0.01;   // aggregator learning rate
  double alpha_phi = 0.0003;   // classifier learning rate
  double beta = 0.01;          // LF-weight learning rate
  int batch_size = 32;
  int epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;

  enum class HyperMode { kExact, kFirstOrder };
  enum class JvpMode { kAnalytic, kFiniteDifference };
  HyperMode hyper_mode = HyperMode::kExact;
  JvpMode jvp_mode = JvpMode::kAnalytic;

  bool random_w_init = false;  // default: w0 = 1, every LF trusted
  TermConfig terms;
  std::vector<int> hidden{512, 512};
  double dropout = 0.8;
  Method method = Method::kWisdom;
  int cage_iters = 100;  // generative fit iterations for the snuba baseline

  std::string trace_path;        // per-step loss rows (CSV); empty disables
  std::string epoch_trace_path;  // per-epoch validation/w rows (CSV)
  bool verbose = false;
};

struct StepTrace {
  long step = 0;
  LossBreakdown<double> loss;
};

struct EpochTrace {
  int epoch = 0;
  double val_macro_f1 = 0.0;
  VecX w;
};

struct TrainResult {
  AggregatorParams<double> agg;
  MlpParams<double> model;
  double best_val_f1 = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  std::vector<StepTrace> steps;
  std::vector<EpochTrace> epochs;
  std::vector<std::string> warnings;
};

// Full trainer state for exact resume.
struct Checkpoint {
  int version = 1;
  Method method = Method::kWisdom;
  std::uint64_t seed = 0;
  int epoch = 0;  // next epoch to run
  long global_step = 0;
  AggregatorParams<double> agg;
  MlpParams<double> model;
  AdamState adam_theta;
  AdamState adam_phi;
  std::size_t u_cursor = 0;
  std::uint64_t u_epoch = 0;
  double best_val_f1 = 0.0;
  int best_epoch = -1;
  int bad_epochs = 0;
  AggregatorParams<double> best_agg;
  MlpParams<double> best_model;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// One plain gradient-descent step on (theta, phi) at fixed w; kept free of
// momentum so the step stays differentiable in w.
std::pair<AggregatorParams<double>, MlpParams<double>> virtual_inner_step(
    const AggregatorParams<double>& agg, const MlpParams<double>& mlp,
    const BatchS<double>& bs, const BatchU<double>& bu,
    const TermConfig& terms, double alpha_theta, double alpha_phi,
    std::uint64_t mask_seed);

// Hypergradient of the mean validation CE through the virtual phi step.
VecX hypergradient(const AggregatorParams<double>& agg,
                   const MlpParams<double>& mlp, const BatchS<double>& bs,
                   const BatchU<double>& bu, const MatX& xv, const VecXi& yv,
                   const TrainerConfig& config, std::uint64_t mask_seed);

// w <- clamp(w - beta * h, 0, 1); a non-finite h leaves w unchanged and
// reports a warning through the optional out-parameter.
VecX outer_weight_step(const AggregatorParams<double>& agg,
                       const MlpParams<double>& mlp, const BatchS<double>& bs,
                       const BatchU<double>& bu, const MatX& xv,
                       const VecXi& yv, const TrainerConfig& config,
                       std::uint64_t mask_seed,
                       std::string* warning = nullptr);

TrainResult train(const TrainData& data, const TrainerConfig& config,
                  const Checkpoint* resume = nullptr,
                  Checkpoint* final_state = nullptr);

}  // namespace wisdom
