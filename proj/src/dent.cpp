#include "dentlab/dent.hpp"

#include <cmath>
#include <cstring>

namespace dentlab {

std::string granularity_name(Granularity g) { return g == Granularity::BatchWise ? "batch-wise" : "sample-wise"; }
Granularity granularity_from_name(const std::string& s) {
  if (s == "batch-wise") return Granularity::BatchWise;
  if (s == "sample-wise") return Granularity::SampleWise;
  throw ValueError("unknown granularity '" + s + "'");
}
std::string stats_mode_name(StatsMode s) { return s == StatsMode::TrainTime ? "train-time" : "test-time"; }
StatsMode stats_mode_from_name(const std::string& s) {
  if (s == "train-time") return StatsMode::TrainTime;
  if (s == "test-time") return StatsMode::TestTime;
  throw ValueError("unknown stats mode '" + s + "'");
}
std::string objective_name(Objective o) { return o == Objective::MinEnt ? "minent" : "maxinf"; }
Objective objective_from_name(const std::string& s) {
  if (s == "minent") return Objective::MinEnt;
  if (s == "maxinf") return Objective::MaxInf;
  throw ValueError("unknown objective '" + s + "'");
}
std::string final_pass_name(FinalPassStats f) { return f == FinalPassStats::Train ? "train" : "batch"; }
FinalPassStats final_pass_from_name(const std::string& s) {
  if (s == "train") return FinalPassStats::Train;
  if (s == "batch") return FinalPassStats::Batch;
  throw ValueError("unknown final-pass-stats '" + s + "'");
}
std::string interleave_name(InterleaveMode m) { return m == InterleaveMode::Lockstep ? "lockstep" : "on-submission"; }
InterleaveMode interleave_from_name(const std::string& s) {
  if (s == "lockstep") return InterleaveMode::Lockstep;
  if (s == "on-submission") return InterleaveMode::OnSubmission;
  throw ValueError("unknown interleave mode '" + s + "'");
}

void DefenseConfig::validate() const {
  if (steps < 0) throw ValueError("defense: steps must be >= 0");
  if (model_lr < 0.f || sigma_lr < 0.f) throw ValueError("defense: learning rates must be nonnegative");
  if (optimizer != "adam") throw ValueError("defense: unknown optimizer '" + optimizer + "'");
  if (reset != "per-batch") throw ValueError("defense: unknown reset policy '" + reset + "'");
  if (sigma_init < 0.f) throw ValueError("defense: sigma_init must be nonnegative");
  if (maxinf_weight < 0.f) throw ValueError("defense: maxinf_weight must be nonnegative");
}

DefenseConfig DefenseConfig::dent_plus(const DefenseConfig& base) {
  DefenseConfig c = base;
  c.granularity = Granularity::SampleWise;
  c.model_lr = 0.006f;
  c.grad_clip = 1.0f;
  c.objective = Objective::MaxInf;
  return c;
}

Tensor<float> defense_objective(const Tensor<float>& probs, Objective objective, float maxinf_weight) {
  if (probs.ndim() != 2 || probs.dim(0) < 1)
    throw ValueError("defense objective: needs a nonempty (B,C) probability matrix");
  Tensor<float> per_sample = entropy_rows(probs);
  Tensor<float> mean_ent = mean(per_sample);
  if (objective == Objective::MinEnt) return mean_ent;
  Tensor<float> marginal = mean_axis0(probs);
  Tensor<float> marginal_ent = reshape(entropy_rows(marginal), {1});
  return sub(mean_ent, mul_scalar(marginal_ent, maxinf_weight));
}

// ---------------------------------------------------------------------------
// Sample-wise expansion
// ---------------------------------------------------------------------------

void expand_samplewise(Model<float>& model, int64_t batch) {
  auto bns = model.bn_layers();
  if (bns.empty()) throw ValueError("dent requires normalization layers to adapt");
  if (batch < 1) throw ValueError("expand_samplewise: batch must be >= 1");
  for (auto* bn : bns) {
    int64_t C = bn->channels();
    bn->gamma_sw = Tensor<float>::param({batch, C});
    bn->beta_sw = Tensor<float>::param({batch, C});
    for (int64_t b = 0; b < batch; ++b) {
      std::memcpy(bn->gamma_sw.data() + b * C, bn->gamma.data(), size_t(C) * sizeof(float));
      std::memcpy(bn->beta_sw.data() + b * C, bn->beta.data(), size_t(C) * sizeof(float));
    }
  }
}

void collapse_samplewise(Model<float>& model) {
  for (auto* bn : model.bn_layers()) {
    bn->gamma_sw = Tensor<float>();
    bn->beta_sw = Tensor<float>();
  }
}

// ---------------------------------------------------------------------------
// Dent
// ---------------------------------------------------------------------------

Dent::Dent(Model<float>& model, DefenseConfig cfg) : model_(model), cfg_(cfg) {
  cfg_.validate();
  if (model_.bn_layers().empty()) throw ValueError("dent requires normalization layers to adapt");
  use_sigma_ = cfg_.adapt_sigma;  // the smoothing toggle
  sigma_.per_sample = cfg_.sigma_per_sample;
  take_snapshot();
  reset();
}

Dent::~Dent() {
  try {
    reset();
  } catch (...) {
  }
}

void Dent::take_snapshot() {
  snap_.gamma.clear();
  snap_.beta.clear();
  snap_.mu.clear();
  snap_.var.clear();
  for (auto* bn : model_.bn_layers()) {
    snap_.gamma.push_back(bn->gamma.vec());
    snap_.beta.push_back(bn->beta.vec());
    snap_.mu.push_back(bn->mu.vec());
    snap_.var.push_back(bn->var.vec());
  }
  snap_.backbone = model_.backbone_checksum();
}

void Dent::reset() {
  auto bns = model_.bn_layers();
  for (size_t i = 0; i < bns.size(); ++i) {
    bns[i]->gamma.vec() = snap_.gamma[i];
    bns[i]->beta.vec() = snap_.beta[i];
    bns[i]->mu.vec() = snap_.mu[i];
    bns[i]->var.vec() = snap_.var[i];
    bns[i]->gamma.drop_grad();
    bns[i]->beta.drop_grad();
  }
  dentlab::collapse_samplewise(model_);
  sigma_ = SmoothingParams<float>();
  sigma_.per_sample = cfg_.sigma_per_sample;
  sigma_trace_.clear();
  opt_.reset();
  step_counter_ = 0;
  fresh_ = true;
}

void Dent::expand_samplewise(int64_t batch) { dentlab::expand_samplewise(model_, batch); }
void Dent::collapse_samplewise() { dentlab::collapse_samplewise(model_); }

std::vector<TensorF*> Dent::adapted_params() {
  std::vector<TensorF*> out;
  if (cfg_.adapt_affine) {
    for (auto* bn : model_.bn_layers()) {
      if (bn->samplewise()) {
        out.push_back(&bn->gamma_sw);
        out.push_back(&bn->beta_sw);
      } else {
        out.push_back(&bn->gamma);
        out.push_back(&bn->beta);
      }
    }
  }
  if (cfg_.adapt_sigma && sigma_.defined()) out.push_back(&sigma_.raw);
  return out;
}

std::vector<float> Dent::adapted_lrs() {
  std::vector<float> out;
  if (cfg_.adapt_affine)
    for (size_t i = 0; i < model_.bn_layers().size(); ++i) {
      out.push_back(cfg_.model_lr);
      out.push_back(cfg_.model_lr);
    }
  if (cfg_.adapt_sigma && sigma_.defined()) out.push_back(cfg_.sigma_lr);
  return out;
}

Tensor<float> Dent::defended_forward(const Tensor<float>& x) {
  Tensor<float> h = x;
  if (use_sigma_) {
    if (!sigma_.defined()) sigma_.init(cfg_.sigma_init, x.dim(0));
    h = gaussian_smooth(h, sigma_);
  }
  // test-time statistics are estimated from the current batch and written
  // back to the state; reset() restores the train-time values
  StatsWrite write = batch_stats() ? StatsWrite::Overwrite : StatsWrite::None;
  return model_.forward(h, {batch_stats(), write});
}

void Dent::adapt(const Tensor<float>& x) {
  if (!fresh_) throw ValueError("dent: adapt requires a freshly reset state (per-batch reset policy)");
  fresh_ = false;
  int64_t B = x.dim(0);
  if (cfg_.granularity == Granularity::SampleWise) expand_samplewise(B);
  if (use_sigma_ && !sigma_.defined()) sigma_.init(cfg_.sigma_init, B);

  auto params = adapted_params();
  auto lrs = adapted_lrs();
  bool any_grad_params = !params.empty();

  // last iterate whose objective evaluated finite; the fallback target
  std::vector<std::vector<float>> last_finite;

  auto finite_tensor = [](const Tensor<float>& t) {
    for (int64_t i = 0, n = t.numel(); i < n; ++i)
      if (!std::isfinite(t.data()[i])) return false;
    return true;
  };

  for (int it = 0; it < cfg_.steps && any_grad_params; ++it) {
    Tape<float> tape;
    bool finite = true;
    {
      TapeScope<float> scope(tape);
      Tensor<float> logits = defended_forward(x);
      if (!finite_tensor(logits)) {
        finite = false;
      } else {
        Tensor<float> probs = softmax_rows(logits);
        Tensor<float> obj = defense_objective(probs, cfg_.objective, cfg_.maxinf_weight);
        if (!std::isfinite(obj.item())) {
          finite = false;
        } else {
          last_finite.clear();
          for (auto* p : params) last_finite.push_back(p->vec());
          zero_grads(params);
          tape.backward(obj);
        }
      }
    }
    if (!finite) {
      // stop adapting this batch, fall back to the last finite state
      ++events_.nonfinite_objectives;
      if (!last_finite.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i]->vec() = last_finite[i];
      break;
    }
    clip_grad_norm(params, cfg_.grad_clip);
    opt_.step(params, lrs);
    zero_grads(params);
    ++step_counter_;
    if (use_sigma_ && sigma_.defined()) sigma_trace_.push_back(sigma_.sigma_mean());
  }
  ++timestamp_;
}

Tensor<float> Dent::final_logits(const Tensor<float>& x) {
  NoTapeScope<float> guard;
  Tensor<float> h = x;
  if (use_sigma_) {
    if (!sigma_.defined()) sigma_.init(cfg_.sigma_init, x.dim(0));
    h = gaussian_smooth(h, sigma_);
  }
  bool use_batch;
  if (cfg_.final_pass_stats == FinalPassStats::Batch) {
    use_batch = batch_stats();
  } else {
    // restore the train-time statistics the estimation pass overwrote
    auto bns = model_.bn_layers();
    for (size_t i = 0; i < bns.size(); ++i) {
      bns[i]->mu.vec() = snap_.mu[i];
      bns[i]->var.vec() = snap_.var[i];
    }
    use_batch = false;
  }
  return model_.forward(h, {use_batch, StatsWrite::None});
}

std::vector<int> Dent::predict(const Tensor<float>& x) { return argmax_rows(final_logits(x)); }

std::vector<int> Dent::adapt_and_predict(const Tensor<float>& x) {
  reset();
  adapt(x);
  return predict(x);
}

float Dent::sigma_mean() const {
  if (!sigma_.defined()) return cfg_.sigma_init;
  return sigma_.sigma_mean();
}

}  // namespace dentlab
