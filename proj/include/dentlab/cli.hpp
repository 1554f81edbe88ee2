#pragma once

#include <string>
#include <vector>

#include "dentlab/config.hpp"

namespace dentlab {

struct LoadedData {
  Dataset train;
  Dataset test;
  Dataset holdout;  // natural pool for mixed batches
};

LoadedData load_data(const RunConfig& cfg);

// Runs one scenario against a trained model; may emit side CSVs into out_dir.
std::vector<EvalReport> run_scenario(Model<float>& model, const RunConfig& cfg, const ScenarioSpec& sc,
                                     const LoadedData& data, const std::string& out_dir, int index);

// Entry point behind the binary: subcommands train | attack | defend | sweep
// | profile | report. Exit 0 on success, 2 on config/usage errors (with the
// offending field), 3 on a missing checkpoint.
int cli_main(int argc, const char* const* argv);

}  // namespace dentlab
