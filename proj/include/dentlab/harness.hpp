#pragma once

// Orchestrates attack/defense interleavings and threat-model scenarios,
// computes metrics, and emits result tables (report.json + summary.csv).

#include <map>

#include "dentlab/data.hpp"
#include "dentlab/dent.hpp"
#include "dentlab/flops.hpp"
#include "dentlab/train.hpp"

namespace dentlab {

struct SampleRecord {
  int label = -1;
  int clean_pred = -1;
  int adv_pred = -1;
  bool success = false;  // the attack flipped this sample
};

struct EvalReport {
  std::string scenario;
  std::string attack;
  std::string norm;
  double eps = 0;
  int defense_steps = 0;
  double natural_acc = 0;
  double adv_acc = 0;
  std::vector<std::pair<std::string, double>> per_attack_acc;
  std::vector<SampleRecord> samples;
  double wall_seconds = 0;
  double flops_rel = 1.0;
  uint64_t seed = 0;
  int grad_anomalies = 0;
  int nonfinite_events = 0;

  // adv_acc <= every per-attack accuracy; per-sample records sum consistently
  // to the reported percentages.
  void check_invariants() const;
};

// Interleaved white-box evaluation: per batch the attacker computes its
// gradient against defense state t-1, commits delta^t, and the defender runs
// one adaptation round to produce state t; the final prediction uses the last
// defense state; everything resets between batches. Defense steps = 0
// collapses to attacking the static model.
EvalReport run_interleaved(Model<float>& model, const DefenseConfig& defense,
                           const std::vector<AttackSpec>& attacks, const Dataset& test,
                           int batch_size, uint64_t seed);

struct DenyUpdatesResult {
  EvalReport static_static;
  EvalReport static_dent;
  EvalReport dent_dent;
};

// Adaptive attack that denies updates: the perturbation is crafted offline
// against the frozen static model and replayed against (a) the static model
// and (b) the defense; the interleaved dent-dent row completes the table.
DenyUpdatesResult run_deny_updates(Model<float>& model, const DefenseConfig& defense,
                                   const AttackSpec& attack, const Dataset& test, int batch_size,
                                   uint64_t seed, bool include_dent_dent = true);

// Adaptive attack that mixes data: only the adversarial members of each batch
// are attacked (natural members come from held-out data without replacement);
// accuracy is reported on the adversarial portion alone. adv_per_batch = 1
// with batch_size 16 is the one-adversarial-in-16 case; otherwise
// adv_per_batch = round(mix_ratio * batch_size).
EvalReport run_mixed_batch(Model<float>& model, const DefenseConfig& defense, const AttackSpec& attack,
                           const Dataset& adversarial_pool, const Dataset& natural_pool,
                           int batch_size, int adv_per_batch, int num_batches, uint64_t seed);

enum class SweepAxis { BatchSize, DefenseSteps, Epsilon };

std::string sweep_axis_name(SweepAxis a);
SweepAxis sweep_axis_from_name(const std::string& s);

struct SweepRow {
  double value = 0;
  EvalReport report;
};

// One report per axis value, constant seeds otherwise; values must be sorted
// ascending and nonempty. The batch-size sweep measures natural accuracy
// (attack list optional); the steps and epsilon sweeps run interleaved.
std::vector<SweepRow> run_sweep(Model<float>& model, const DefenseConfig& defense,
                                const std::vector<AttackSpec>& attacks, const Dataset& test,
                                SweepAxis axis, const std::vector<double>& values, int batch_size,
                                uint64_t seed);

struct ProfileRow {
  int steps = 0;
  double seconds = 0;
  double flops = 0;
  double relative = 1.0;  // flops(steps) / flops(0)
};

// Wall time and analytic FLOPs for defended prediction at each step count.
std::vector<ProfileRow> profile_defense(Model<float>& model, const DefenseConfig& defense,
                                        const Tensor<float>& batch, const std::vector<int>& steps_list);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void write_report_json(const std::string& path, const std::vector<EvalReport>& reports,
                       const std::string& config_echo, bool with_timing);
std::vector<EvalReport> read_report_json(const std::string& path);
void write_summary_csv(const std::string& path, const std::vector<EvalReport>& reports, bool with_timing);
void write_sweep_csv(const std::string& path, SweepAxis axis, const std::vector<SweepRow>& rows);
void write_sigma_trace_csv(const std::string& path, const std::vector<std::vector<float>>& per_batch);

}  // namespace dentlab
