#include "dentlab/train.hpp"

#include <cmath>

namespace dentlab {

void TrainSpec::validate() const {
  if (optimizer != "sgd-momentum" && optimizer != "adam")
    throw ValueError("train: unknown optimizer '" + optimizer + "'");
  if (!std::isfinite(lr) || lr < 0.f) throw ValueError("train: lr must be finite and nonnegative");
  if (epochs < 1) throw ValueError("train: epochs must be >= 1");
  if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
  if (adversarial) adversarial->validate();
}

TrainResult train(Model<float>& model, const Dataset& data, const TrainSpec& spec) {
  spec.validate();
  if (data.size() == 0) throw ValueError("train: dataset is empty");
  data.validate();

  auto params = model.parameters();
  SgdMomentum sgd;
  sgd.lr = spec.lr;
  sgd.momentum = spec.momentum;
  sgd.weight_decay = spec.weight_decay;
  Adam adam;
  adam.lr = spec.lr;

  Rng shuffle_rng(splitmix64(spec.seed ^ 0x7261a9ULL));
  TrainResult result;
  int64_t n = data.size();
  int64_t batches_per_epoch = (n + spec.batch_size - 1) / spec.batch_size;
  int64_t total_steps = batches_per_epoch * spec.epochs;
  int64_t step = 0;

  StaticWhiteBox<Model<float>> white(model);

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto perm = shuffle_rng.permutation(n);
    double epoch_loss = 0;
    int64_t epoch_batches = 0;
    for (int64_t start = 0; start < n; start += spec.batch_size) {
      int64_t count = std::min<int64_t>(spec.batch_size, n - start);
      std::vector<int64_t> idx(perm.begin() + start, perm.begin() + start + count);
      Tensor<float> x = data.gather_images(idx);
      std::vector<int> y = data.gather_labels(idx);

      if (spec.adversarial) {
        AttackSpec aspec = *spec.adversarial;
        aspec.seed = splitmix64(spec.seed ^ uint64_t(step) ^ 0xadf0ULL);
        AttackResult ar = pgd_attack(white, x, y, aspec);
        NoTapeScope<float> guard;
        x = add(x, ar.delta);
      }

      float lr_t = spec.lr;
      if (spec.cosine_lr)
        lr_t = spec.lr * 0.5f * (1.f + std::cos(float(M_PI) * float(step) / float(total_steps)));

      Tape<float> tape;
      float loss_value;
      {
        TapeScope<float> scope(tape);
        Tensor<float> logits = model.forward(x, {/*batch_stats=*/true, StatsWrite::Ema});
        Tensor<float> loss = mean(cross_entropy_rows(logits, y));
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw NumericError("train: non-finite loss " + std::to_string(loss_value) + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(start / spec.batch_size));
        zero_grads(params);
        tape.backward(loss);
      }
      if (spec.optimizer == "sgd-momentum") {
        sgd.lr = lr_t;
        sgd.step(params);
      } else {
        adam.lr = lr_t;
        adam.step(params);
      }
      zero_grads(params);
      result.batch_losses.push_back(loss_value);
      epoch_loss += loss_value;
      ++epoch_batches;
      ++step;
    }
    result.epoch_losses.push_back(float(epoch_loss / double(epoch_batches)));
  }
  return result;
}

double evaluate_accuracy(Model<float>& model, const Dataset& data, int batch_size) {
  NoTapeScope<float> guard;
  int64_t n = data.size();
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    Dataset b = data.slice(start, count);
    Tensor<float> logits = model.forward(b.images, {false, StatsWrite::None});
    auto pred = argmax_rows(logits);
    for (int64_t i = 0; i < count; ++i)
      if (pred[size_t(i)] == b.labels[size_t(i)]) ++correct;
  }
  return 100.0 * double(correct) / double(n);
}

}  // namespace dentlab
