#pragma once

// White-box and black-box attacks against any target, static or dynamic.
// Targets are abstracted behind two facades: ModelUnderAttack exposes a
// differentiable forward (white-box), BlackBoxModel exposes logits only.
// Dynamic defenses react through the on_attack_step hook, which fires after
// every committed perturbation update, so the gradient the attacker consumed
// was computed against the previous defense state.

#include <functional>
#include <optional>
#include <string>

#include "dentlab/nn.hpp"
#include "dentlab/ops.hpp"

namespace dentlab {

enum class Norm { Linf, L2 };

enum class AttackLoss { CrossEntropy, Dlr, Margin };

std::string norm_name(Norm n);
Norm norm_from_name(const std::string& s);
std::string attack_loss_name(AttackLoss l);
AttackLoss attack_loss_from_name(const std::string& s);

struct AttackSpec {
  std::string name = "pgd-ce";
  std::string method = "pgd";  // "pgd" | "square"
  Norm norm = Norm::Linf;
  float epsilon = 0.1f;
  float alpha = 0.01f;
  int steps = 40;
  int restarts = 1;
  float momentum = 0.0f;
  AttackLoss loss = AttackLoss::CrossEntropy;
  bool targeted = false;  // target = runner-up class of the clean prediction
  int query_budget = 2000;  // square only
  bool random_init = true;
  uint64_t seed = 0;

  void validate() const;
};

struct AttackResult {
  Tensor<float> delta;              // (B,C,H,W), feasible by construction
  std::vector<char> success;        // per-sample prediction flip
  int64_t queries_or_steps = 0;
  std::vector<float> per_sample_loss;  // max over visited iterates (untargeted)
  std::vector<int> adv_pred;           // prediction on the submitted input
  int grad_anomalies = 0;              // non-finite gradients that forced a re-init
};

// White-box view of the target.
class ModelUnderAttack {
 public:
  virtual ~ModelUnderAttack() = default;
  // Differentiable forward; x_adv is already on the caller's tape.
  virtual Tensor<float> forward_attack(const Tensor<float>& x_adv) = 0;
  // Full evaluation of a submission (dynamic defenses adapt and then predict).
  virtual Tensor<float> eval_logits(const Tensor<float>& x_adv) = 0;
  // Fired after the attacker commits delta^t; dynamic defenses adapt here.
  virtual void on_attack_step(const Tensor<float>& x_adv) { (void)x_adv; }
  virtual void on_restart_begin() {}
  virtual int64_t defense_timestamp() const { return 0; }
};

// Black-box view: logits only, no gradients.
class BlackBoxModel {
 public:
  virtual ~BlackBoxModel() = default;
  virtual Tensor<float> logits(const Tensor<float>& x) = 0;
};

// Projection onto the epsilon ball followed by pixel-range feasibility:
// l-inf clamps elementwise, l-2 rescales each sample; x + delta is then
// forced into [0,1] exactly by adjusting delta (which can only shrink it).
Tensor<float> project(const Tensor<float>& delta, Norm norm, float epsilon, const Tensor<float>& x);

// Throws unless every sample satisfies the norm bound (epsilon + 1e-6) and
// x + delta lies in [0,1]; called by every attack before returning.
void check_feasible(const Tensor<float>& delta, const Tensor<float>& x, Norm norm, float epsilon);

float sample_norm(const Tensor<float>& delta, int64_t b, Norm norm);

// Projected gradient descent per the update
//   delta^t = proj(delta^{t-1} + alpha * dir(grad)),
// with sign(grad) for l-inf and the normalized gradient for l-2, random init
// inside the ball, optional momentum, and per-sample worst case kept across
// restarts. Untargeted runs maximize the loss; targeted runs minimize it
// toward the runner-up class of the clean prediction. success marks
// misclassification in both modes. update_mask, when given, pins delta to
// zero for masked-out samples (mixed-batch attacks) and restricts the
// attacker's objective to the unmasked rows.
AttackResult pgd_attack(ModelUnderAttack& model, const Tensor<float>& x, const std::vector<int>& y,
                        const AttackSpec& spec, const std::vector<char>* update_mask = nullptr);

// Square attack: random search with square-shaped updates; accepts a proposal
// when the per-sample margin loss improves, always re-projects, stops at the
// per-sample query budget or on success. Never touches gradients.
AttackResult square_attack(BlackBoxModel& model, const Tensor<float>& x, const std::vector<int>& y,
                           const AttackSpec& spec, int query_budget);

// Both views of one target plus its clean predictions.
struct AttackTarget {
  ModelUnderAttack* white = nullptr;
  BlackBoxModel* black = nullptr;
};

struct EnsembleResult {
  AttackResult combined;
  std::vector<std::string> names;
  std::vector<AttackResult> members;
};

// Cumulative worst case: per sample the first attack that flips the
// prediction wins; a sample is robust only if every attack fails. All specs
// must share the norm and epsilon.
EnsembleResult worst_case_ensemble(AttackTarget target, const Tensor<float>& x, const std::vector<int>& y,
                                   const std::vector<AttackSpec>& specs);

// Static-model facades used for plain attacks and adversarial training.
template <typename ModelT>
class StaticWhiteBox : public ModelUnderAttack {
 public:
  explicit StaticWhiteBox(ModelT& m) : m_(m) {}
  Tensor<float> forward_attack(const Tensor<float>& x_adv) override {
    return m_.forward(x_adv, {/*batch_stats=*/false, StatsWrite::None});
  }
  Tensor<float> eval_logits(const Tensor<float>& x_adv) override {
    NoTapeScope<float> guard;
    return m_.forward(x_adv, {false, StatsWrite::None});
  }

 private:
  ModelT& m_;
};

template <typename ModelT>
class StaticBlackBox : public BlackBoxModel {
 public:
  explicit StaticBlackBox(ModelT& m) : m_(m) {}
  Tensor<float> logits(const Tensor<float>& x) override {
    NoTapeScope<float> guard;
    return m_.forward(x, {false, StatsWrite::None});
  }

 private:
  ModelT& m_;
};

}  // namespace dentlab
