#pragma once

// Defensive entropy minimization: per-batch test-time optimization of the
// normalization parameters (affine scale/shift plus estimated statistics) and
// the Gaussian smoothing width, wrapped around a trained model. The backbone
// weights never change; everything the defense touches is restored from a
// pristine snapshot by reset(), which runs between batches.

#include <optional>

#include "dentlab/attacks.hpp"
#include "dentlab/nn.hpp"
#include "dentlab/optim.hpp"
#include "dentlab/smoothing.hpp"

namespace dentlab {

enum class Granularity { BatchWise, SampleWise };
enum class StatsMode { TrainTime, TestTime };
enum class Objective { MinEnt, MaxInf };
enum class FinalPassStats { Train, Batch };
enum class InterleaveMode { Lockstep, OnSubmission };

std::string granularity_name(Granularity g);
Granularity granularity_from_name(const std::string& s);
std::string stats_mode_name(StatsMode s);
StatsMode stats_mode_from_name(const std::string& s);
std::string objective_name(Objective o);
Objective objective_from_name(const std::string& s);
std::string final_pass_name(FinalPassStats f);
FinalPassStats final_pass_from_name(const std::string& s);
std::string interleave_name(InterleaveMode m);
InterleaveMode interleave_from_name(const std::string& s);

struct DefenseConfig {
  int steps = 10;
  float model_lr = 0.001f;   // Adam rate for the affine parameters
  float sigma_lr = 0.25f;    // Adam rate for the smoothing width
  Granularity granularity = Granularity::BatchWise;
  StatsMode stats_mode = StatsMode::TestTime;
  bool adapt_affine = true;
  bool adapt_sigma = true;
  Objective objective = Objective::MinEnt;
  std::string optimizer = "adam";
  std::string reset = "per-batch";
  uint64_t seed = 0;
  float maxinf_weight = 1.0f;      // marginal-entropy regularizer weight
  float grad_clip = 0.0f;          // 0 disables; the sample-wise preset uses 1.0
  FinalPassStats final_pass_stats = FinalPassStats::Batch;
  InterleaveMode interleave = InterleaveMode::Lockstep;
  float sigma_init = 0.7f;
  bool sigma_per_sample = false;

  void validate() const;

  // Sample-wise preset: per-sample affine, higher rate, clipped updates,
  // information-maximization objective.
  static DefenseConfig dent_plus(const DefenseConfig& base);
};

// Objective over softmax probabilities: minent is the mean per-sample
// entropy; maxinf subtracts the entropy of the batch-marginal prediction
// (confident and balanced is its optimum).
Tensor<float> defense_objective(const Tensor<float>& probs, Objective objective, float maxinf_weight = 1.0f);

struct DefenseEvents {
  int nonfinite_objectives = 0;
};

class Dent {
 public:
  Dent(Model<float>& model, DefenseConfig cfg);
  // leaves the wrapped model pristine
  ~Dent();
  Dent(const Dent&) = delete;
  Dent& operator=(const Dent&) = delete;

  const DefenseConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }

  // Restores every adapted value from the pristine snapshot and zeroes the
  // optimizer; idempotent.
  void reset();

  // Runs cfg.steps adaptation iterations on this batch. Requires a freshly
  // reset state (per-batch reset policy is enforced).
  void adapt(const Tensor<float>& x);

  // Defended forward with the statistics mode used during adaptation;
  // records on the current tape if one is active.
  Tensor<float> defended_forward(const Tensor<float>& x);

  // Final prediction pass (after the defense's last move).
  Tensor<float> final_logits(const Tensor<float>& x);
  std::vector<int> predict(const Tensor<float>& x);

  // One reset+adapt+predict round on a batch, bumping the state timestamp.
  std::vector<int> adapt_and_predict(const Tensor<float>& x);

  float sigma_mean() const;
  std::vector<float> sigma_trajectory() const { return sigma_trace_; }

  int64_t timestamp() const { return timestamp_; }
  int64_t step_counter() const { return step_counter_; }
  const DefenseEvents& events() const { return events_; }
  uint64_t backbone_checksum() { return model_.backbone_checksum(); }
  bool smoothing_enabled() const { return use_sigma_; }

 private:
  struct Snapshot {
    std::vector<std::vector<float>> gamma, beta, mu, var;
    uint64_t backbone = 0;
  };

  std::vector<TensorF*> adapted_params();
  std::vector<float> adapted_lrs();
  void take_snapshot();
  void expand_samplewise(int64_t batch);
  void collapse_samplewise();
  bool batch_stats() const { return cfg_.stats_mode == StatsMode::TestTime; }

  Model<float>& model_;
  DefenseConfig cfg_;
  Snapshot snap_;
  SmoothingParams<float> sigma_;
  Adam opt_;
  bool use_sigma_ = false;
  bool fresh_ = false;
  int64_t step_counter_ = 0;
  int64_t timestamp_ = 0;
  std::vector<float> sigma_trace_;
  DefenseEvents events_;
};

// Replicates every BN affine along the batch dimension so gradients flow
// independently per sample. Errors when the model has no normalization
// layers to adapt.
void expand_samplewise(Model<float>& model, int64_t batch);
void collapse_samplewise(Model<float>& model);

// ---------------------------------------------------------------------------
// Attack facades around the defense
// ---------------------------------------------------------------------------

// White-box view. In lockstep mode the defense re-adapts after every
// committed attack step, so attack gradients are always one defense state
// stale; in on-submission mode the attack sees the frozen snapshot and the
// defense only adapts when the final perturbation is submitted.
class DentWhiteBox : public ModelUnderAttack {
 public:
  DentWhiteBox(Dent& dent, InterleaveMode mode)
      : dent_(dent), mode_(mode), chain_start_ts_(dent.timestamp()) {}

  Tensor<float> forward_attack(const Tensor<float>& x_adv) override {
    // stale-gradient contract: the gradient at attack step t is computed
    // against the defense state of round t-1
    if (dent_.timestamp() != chain_start_ts_ + rounds_)
      throw ValueError("dent: stale-gradient bookkeeping violated");
    last_grad_timestamp_ = dent_.timestamp();
    return dent_.defended_forward(x_adv);
  }
  Tensor<float> eval_logits(const Tensor<float>& x_adv) override {
    dent_.reset();
    dent_.adapt(x_adv);
    return dent_.final_logits(x_adv);
  }
  void on_attack_step(const Tensor<float>& x_adv) override {
    if (mode_ == InterleaveMode::Lockstep) {
      dent_.reset();
      dent_.adapt(x_adv);
      ++rounds_;
    }
  }
  void on_restart_begin() override {
    dent_.reset();
    chain_start_ts_ = dent_.timestamp();
    rounds_ = 0;
  }
  int64_t defense_timestamp() const override { return dent_.timestamp(); }
  int64_t last_grad_timestamp() const { return last_grad_timestamp_; }

 private:
  Dent& dent_;
  InterleaveMode mode_;
  int64_t chain_start_ts_ = 0;
  int64_t rounds_ = 0;
  int64_t last_grad_timestamp_ = -1;
};

// Black-box view: the defense adapts once on the first query of a batch and
// the adapted state persists across queries; the submission is evaluated by
// a fresh adapt-and-predict round (the defense keeps the last move).
class DentBlackBox : public BlackBoxModel {
 public:
  explicit DentBlackBox(Dent& dent) : dent_(dent) {}

  Tensor<float> logits(const Tensor<float>& x) override {
    if (!adapted_) {
      dent_.reset();
      dent_.adapt(x);
      adapted_ = true;
    }
    NoTapeScope<float> guard;
    return dent_.defended_forward(x);
  }
  void new_batch() { adapted_ = false; }

 private:
  Dent& dent_;
  bool adapted_ = false;
};

}  // namespace dentlab
