#pragma once

// Run configuration: a flat `key = value` text format with dotted paths and
// indexed lists (attack.0.norm = linf). Parsing validates everything before
// any compute runs and rejects unknown keys; parse -> serialize -> parse is
// the identity.

#include "dentlab/dent.hpp"
#include "dentlab/harness.hpp"
#include "dentlab/train.hpp"

namespace dentlab {

struct DatasetSpec {
  std::string name = "synth";  // synth | mnist | cifar10
  std::string dir;             // root; empty falls back to DENTLAB_DATA_DIR
  int64_t train_count = 2000;
  int64_t test_count = 512;
  int64_t holdout_count = 1024;  // natural pool for mixed batches
  int classes = 8;               // synth only
};

struct ScenarioSpec {
  std::string kind = "dent-dent";
  // static-static | static-dent | dent-dent | mixed-batch | batch-sweep |
  // step-sweep | eps-sweep | norm-affine-ablation | loss-ablation | profile
  std::string attacks = "all";  // "all" | "none" | comma list of attack indices
  int batch_size = 128;
  double mix_ratio = 0.0;
  bool one_of_16 = false;
  int num_batches = 0;  // mixed-batch; 0 = as many as the pool allows
  std::vector<double> sweep_values;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "runs/out";
  int workers = 0;  // scenario fan-out; 0 = physical cores
  bool stable_output = false;

  DatasetSpec dataset;
  std::string model_arch = "convnet-bn-small";
  std::string checkpoint;  // produced by `train`, consumed by the others

  TrainSpec train;
  std::vector<AttackSpec> attacks;
  DefenseConfig defense;
  std::vector<ScenarioSpec> scenarios;

  void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Resolved attack subset for a scenario ("all"/"none"/index list).
std::vector<AttackSpec> scenario_attacks(const RunConfig& cfg, const ScenarioSpec& sc);

}  // namespace dentlab
