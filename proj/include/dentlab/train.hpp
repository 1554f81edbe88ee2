#pragma once

#include <optional>

#include "dentlab/attacks.hpp"
#include "dentlab/data.hpp"
#include "dentlab/nn.hpp"
#include "dentlab/optim.hpp"

namespace dentlab {

struct TrainSpec {
  std::string optimizer = "sgd-momentum";  // "sgd-momentum" | "adam"
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  int epochs = 10;
  int batch_size = 128;
  bool cosine_lr = true;
  std::optional<AttackSpec> adversarial;  // inner maximization when set
  uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  std::vector<float> epoch_losses;
  std::vector<float> batch_losses;
};

// Minimizes cross-entropy over the dataset; when spec.adversarial is set,
// every minibatch is replaced by its PGD perturbation before the loss step
// (the saddle-point objective). Returns the loss curve; training aborts with
// diagnostics on a non-finite loss. BN running statistics are frozen as the
// train-time statistics.
TrainResult train(Model<float>& model, const Dataset& data, const TrainSpec& spec);

// Accuracy of the static model (running statistics) over a dataset.
double evaluate_accuracy(Model<float>& model, const Dataset& data, int batch_size = 256);

}  // namespace dentlab
