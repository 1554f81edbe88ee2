#include "dentlab/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <thread>

#include "dentlab/checkpoint.hpp"

namespace dentlab {

namespace fs = std::filesystem;

namespace {

const char* kUsage =
    "usage: dentlab <train|attack|defend|sweep|profile|report> [options]\n"
    "options:\n"
    "  --config FILE     run configuration (key = value lines)\n"
    "  --seed N          override the run seed\n"
    "  --out-dir DIR     override the output directory\n"
    "  --steps N         override defense.steps\n"
    "  --batch-size N    override every scenario batch size\n"
    "  --eps X           override every attack epsilon\n"
    "  --norm linf|l2    override every attack norm\n"
    "  --data-dir DIR    override dataset.dir\n"
    "  --workers N       scenario fan-out (default: physical cores)\n"
    "  --stable-output   zero timing fields for byte-identical outputs\n";

struct CliArgs {
  std::string subcommand;
  std::string config_path;
  RunConfig cfg;
};

CliArgs parse_args(int argc, const char* const* argv) {
  if (argc < 2) throw ConfigError("usage", "missing subcommand");
  CliArgs out;
  out.subcommand = argv[1];
  const std::vector<std::string> subs{"train", "attack", "defend", "sweep", "profile", "report"};
  bool known = false;
  for (const auto& s : subs) known = known || s == out.subcommand;
  if (!known) throw ConfigError("usage", "unknown subcommand '" + out.subcommand + "'");

  std::string config_path, seed, out_dir, steps, batch, eps, norm, data_dir, workers;
  bool stable = false;
  for (int i = 2; i < argc; ++i) {
    std::string a = argv[i];
    auto need_value = [&](std::string& dst) {
      if (i + 1 >= argc) throw ConfigError("usage", "flag " + a + " needs a value");
      dst = argv[++i];
    };
    if (a == "--config") need_value(config_path);
    else if (a == "--seed") need_value(seed);
    else if (a == "--out-dir") need_value(out_dir);
    else if (a == "--steps") need_value(steps);
    else if (a == "--batch-size") need_value(batch);
    else if (a == "--eps") need_value(eps);
    else if (a == "--norm") need_value(norm);
    else if (a == "--data-dir") need_value(data_dir);
    else if (a == "--workers") need_value(workers);
    else if (a == "--stable-output") stable = true;
    else throw ConfigError("usage", "unknown flag '" + a + "'");
  }

  out.config_path = config_path;
  out.cfg = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  if (config_path.empty()) {
    // defaults need the same full validation as a parsed file
    out.cfg = parse_config_text("");
  }

  try {
    if (!seed.empty()) out.cfg.seed = std::stoull(seed);
    if (!out_dir.empty()) out.cfg.out_dir = out_dir;
    if (!steps.empty()) out.cfg.defense.steps = std::stoi(steps);
    if (!batch.empty())
      for (auto& sc : out.cfg.scenarios) sc.batch_size = std::stoi(batch);
    if (!eps.empty())
      for (auto& a : out.cfg.attacks) a.epsilon = std::stof(eps);
    if (!norm.empty())
      for (auto& a : out.cfg.attacks) a.norm = norm_from_name(norm);
    if (!data_dir.empty()) out.cfg.dataset.dir = data_dir;
    if (!workers.empty()) out.cfg.workers = std::stoi(workers);
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw ConfigError("usage", "bad flag value");
  }
  if (stable) out.cfg.stable_output = true;
  out.cfg.validate();
  return out;
}

std::string join_path(const std::string& dir, const std::string& leaf) {
  return (fs::path(dir) / leaf).string();
}

}  // namespace

LoadedData load_data(const RunConfig& cfg) {
  LoadedData d;
  const auto& ds = cfg.dataset;
  std::string dir = ds.dir.empty() ? data_dir_fallback() : ds.dir;
  if (ds.name == "synth") {
    int64_t total = ds.train_count + ds.test_count + ds.holdout_count;
    Dataset all = synth_shapes(total, ds.classes, splitmix64(cfg.seed ^ 0xda7aULL));
    d.train = all.slice(0, ds.train_count);
    d.train.split = "train";
    d.test = all.slice(ds.train_count, ds.test_count);
    d.test.split = "test";
    d.holdout = all.slice(ds.train_count + ds.test_count, ds.holdout_count);
    d.holdout.split = "test";
  } else if (ds.name == "mnist") {
    Dataset train_full = load_mnist_idx(join_path(dir, "train-images-idx3-ubyte"),
                                        join_path(dir, "train-labels-idx1-ubyte"), "train");
    Dataset test_full = load_mnist_idx(join_path(dir, "t10k-images-idx3-ubyte"),
                                       join_path(dir, "t10k-labels-idx1-ubyte"), "test");
    if (train_full.size() < ds.train_count + ds.holdout_count)
      throw ConfigError("dataset.train_count", "not enough training samples");
    if (test_full.size() < ds.test_count) throw ConfigError("dataset.test_count", "not enough test samples");
    d.train = train_full.slice(0, ds.train_count);
    d.holdout = train_full.slice(ds.train_count, ds.holdout_count);
    d.test = test_full.slice(0, ds.test_count);
  } else {  // cifar10
    std::vector<std::string> files;
    for (int i = 1; i <= 5; ++i) {
      std::string p = join_path(dir, "data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(p)) files.push_back(p);
    }
    if (files.empty()) throw FileMissingError("cifar10: no data_batch_*.bin under " + dir);
    Dataset train_full = load_cifar10_binary(files, "train");
    Dataset test_full = load_cifar10_binary({join_path(dir, "test_batch.bin")}, "test");
    if (train_full.size() < ds.train_count + ds.holdout_count)
      throw ConfigError("dataset.train_count", "not enough training samples");
    if (test_full.size() < ds.test_count) throw ConfigError("dataset.test_count", "not enough test samples");
    d.train = train_full.slice(0, ds.train_count);
    d.holdout = train_full.slice(ds.train_count, ds.holdout_count);
    d.test = test_full.slice(0, ds.test_count);
  }
  return d;
}

namespace {

DefenseConfig static_collapse(const DefenseConfig& base) {
  DefenseConfig c = base;
  c.steps = 0;
  c.stats_mode = StatsMode::TrainTime;
  c.adapt_affine = false;
  c.adapt_sigma = false;
  c.final_pass_stats = FinalPassStats::Train;
  return c;
}

std::vector<double> default_sweep_values(const ScenarioSpec& sc, const RunConfig& cfg) {
  if (!sc.sweep_values.empty()) return sc.sweep_values;
  if (sc.kind == "batch-sweep") return {1, 2, 4, 8, 16, 32, 64, 128, 256};
  if (sc.kind == "step-sweep") return {0, 5, 10, 20};
  // eps-sweep
  double e = cfg.attacks.empty() ? 0.1 : double(cfg.attacks[0].epsilon);
  return {0.5 * e, e, 1.5 * e};
}

}  // namespace

std::vector<EvalReport> run_scenario(Model<float>& model, const RunConfig& cfg, const ScenarioSpec& sc,
                                     const LoadedData& data, const std::string& out_dir, int index) {
  std::vector<EvalReport> out;
  std::vector<AttackSpec> attacks = scenario_attacks(cfg, sc);
  uint64_t seed = splitmix64(cfg.seed ^ splitmix64(0x5ce0ULL + uint64_t(index)));

  if (sc.kind == "static-static") {
    out.push_back(run_interleaved(model, static_collapse(cfg.defense), attacks, data.test, sc.batch_size, seed));
    out.back().scenario = "static-static";
  } else if (sc.kind == "dent-dent") {
    out.push_back(run_interleaved(model, cfg.defense, attacks, data.test, sc.batch_size, seed));
    out.back().scenario = "dent-dent";
  } else if (sc.kind == "static-dent") {
    if (attacks.empty()) throw ConfigError("scenario." + std::to_string(index), "static-dent needs an attack");
    auto rows = run_deny_updates(model, cfg.defense, attacks[0], data.test, sc.batch_size, seed,
                                 /*include_dent_dent=*/false);
    out.push_back(rows.static_static);
    out.push_back(rows.static_dent);
  } else if (sc.kind == "mixed-batch") {
    if (attacks.empty()) throw ConfigError("scenario." + std::to_string(index), "mixed-batch needs an attack");
    int bs = sc.one_of_16 ? 16 : sc.batch_size;
    int adv = sc.one_of_16 ? 1 : int(std::lround(sc.mix_ratio * bs));
    int max_batches = int(data.test.size() / std::max(1, adv));
    int nb = sc.num_batches > 0 ? std::min(sc.num_batches, max_batches) : max_batches;
    out.push_back(run_mixed_batch(model, cfg.defense, attacks[0], data.test, data.holdout, bs, adv, nb, seed));
  } else if (sc.kind == "batch-sweep" || sc.kind == "step-sweep" || sc.kind == "eps-sweep") {
    SweepAxis axis = sc.kind == "batch-sweep"   ? SweepAxis::BatchSize
                     : sc.kind == "step-sweep" ? SweepAxis::DefenseSteps
                                               : SweepAxis::Epsilon;
    auto rows = run_sweep(model, cfg.defense, attacks, data.test, axis, default_sweep_values(sc, cfg),
                          sc.batch_size, seed);
    write_sweep_csv(join_path(out_dir, "sweep_" + sweep_axis_name(axis) + "_" + std::to_string(index) + ".csv"),
                    axis, rows);
    for (auto& r : rows) {
      r.report.scenario = sc.kind + "-" + std::to_string(int64_t(std::llround(r.value * 1000)));
      out.push_back(r.report);
    }
  } else if (sc.kind == "norm-affine-ablation") {
    for (int stats = 0; stats <= 1; ++stats) {
      for (int affine = 0; affine <= 1; ++affine) {
        DefenseConfig c = cfg.defense;
        c.stats_mode = stats ? StatsMode::TestTime : StatsMode::TrainTime;
        c.adapt_affine = affine;
        c.adapt_sigma = false;
        EvalReport r = run_interleaved(model, c, attacks, data.test, sc.batch_size, seed);
        r.scenario = std::string("ablation-stats") + (stats ? "1" : "0") + "-affine" + (affine ? "1" : "0");
        out.push_back(std::move(r));
      }
    }
  } else if (sc.kind == "loss-ablation") {
    for (Objective obj : {Objective::MinEnt, Objective::MaxInf}) {
      DefenseConfig c = cfg.defense;
      c.objective = obj;
      EvalReport r = run_interleaved(model, c, attacks, data.test, sc.batch_size, seed);
      r.scenario = "loss-" + objective_name(obj);
      out.push_back(std::move(r));
    }
  } else if (sc.kind == "profile") {
    std::vector<int> steps_list{0, 1, 5, 10};
    if (!sc.sweep_values.empty()) {
      steps_list.clear();
      for (double v : sc.sweep_values) steps_list.push_back(int(v));
    }
    int64_t count = std::min<int64_t>(sc.batch_size, data.test.size());
    Dataset b = data.test.slice(0, count);
    auto rows = profile_defense(model, cfg.defense, b.images, steps_list);
    std::ofstream f(join_path(out_dir, "profile_" + std::to_string(index) + ".csv"));
    f << "steps,seconds,flops,relative\n";
    for (const auto& r : rows) {
      f << r.steps << "," << (cfg.stable_output ? 0.0 : r.seconds) << "," << r.flops << "," << r.relative
        << "\n";
      EvalReport rep;
      rep.scenario = "profile-steps-" + std::to_string(r.steps);
      rep.attack = "none";
      rep.norm = "-";
      rep.defense_steps = r.steps;
      rep.wall_seconds = r.seconds;
      rep.flops_rel = r.relative;
      rep.seed = seed;
      out.push_back(rep);
    }
  } else {
    throw ConfigError("scenario." + std::to_string(index) + ".kind", "unknown kind '" + sc.kind + "'");
  }
  return out;
}

namespace {

Model<float> model_for(const RunConfig& cfg, const LoadedData& data, bool require_checkpoint) {
  std::string path = cfg.checkpoint.empty() ? join_path(cfg.out_dir, "model.ckpt") : cfg.checkpoint;
  if (require_checkpoint && !fs::exists(path))
    throw FileMissingError("checkpoint not found: " + path);
  if (fs::exists(path)) {
    Model<float> m = load_checkpoint(path);
    if (m.in_channels != data.train.channels() || m.input_hw != data.train.hw() ||
        m.num_classes != data.train.num_classes)
      throw ConfigError("model.checkpoint", "checkpoint does not match the configured dataset");
    return m;
  }
  return build_model<float>(cfg.model_arch, data.train.num_classes, cfg.seed, data.train.channels(),
                            data.train.hw());
}

int run_cli(const CliArgs& args) {
  const RunConfig& cfg = args.cfg;
  fs::create_directories(cfg.out_dir);

  if (args.subcommand == "report") {
    auto reports = read_report_json(join_path(cfg.out_dir, "report.json"));
    write_summary_csv(join_path(cfg.out_dir, "summary.csv"), reports, !cfg.stable_output);
    std::cout << "summary.csv re-rendered from report.json (" << reports.size() << " rows)\n";
    return 0;
  }

  LoadedData data = load_data(cfg);

  if (args.subcommand == "train") {
    Model<float> m = build_model<float>(cfg.model_arch, data.train.num_classes, cfg.seed,
                                        data.train.channels(), data.train.hw());
    TrainResult tr = train(m, data.train, cfg.train);
    std::string path = cfg.checkpoint.empty() ? join_path(cfg.out_dir, "model.ckpt") : cfg.checkpoint;
    save_checkpoint(m, path);
    std::ofstream f(join_path(cfg.out_dir, "train_loss.csv"));
    f << "epoch,loss\n";
    for (size_t e = 0; e < tr.epoch_losses.size(); ++e) f << e << "," << tr.epoch_losses[e] << "\n";
    double acc = evaluate_accuracy(m, data.test);
    std::cout << "trained " << cfg.model_arch << " for " << cfg.train.epochs << " epochs; test accuracy "
              << acc << "%; checkpoint " << path << "\n";
    return 0;
  }

  Model<float> model = model_for(cfg, data, /*require_checkpoint=*/true);

  std::vector<ScenarioSpec> scenarios;
  if (args.subcommand == "attack") {
    ScenarioSpec sc;
    sc.kind = "static-static";
    sc.batch_size = cfg.scenarios.empty() ? 128 : cfg.scenarios[0].batch_size;
    scenarios.push_back(sc);
  } else if (args.subcommand == "sweep") {
    for (const auto& sc : cfg.scenarios)
      if (sc.kind == "batch-sweep" || sc.kind == "step-sweep" || sc.kind == "eps-sweep")
        scenarios.push_back(sc);
    if (scenarios.empty()) {
      ScenarioSpec sc;
      sc.kind = "step-sweep";
      scenarios.push_back(sc);
    }
  } else if (args.subcommand == "profile") {
    ScenarioSpec sc;
    sc.kind = "profile";
    sc.batch_size = cfg.scenarios.empty() ? 128 : cfg.scenarios[0].batch_size;
    scenarios.push_back(sc);
  } else {  // defend
    scenarios = cfg.scenarios;
  }

  int workers = cfg.workers > 0 ? cfg.workers : int(std::thread::hardware_concurrency());
  workers = std::max(1, std::min<int>(workers, int(scenarios.size())));

  std::vector<EvalReport> reports;
  if (workers <= 1 || scenarios.size() <= 1) {
    for (size_t i = 0; i < scenarios.size(); ++i) {
      auto rows = run_scenario(model, cfg, scenarios[i], data, cfg.out_dir, int(i));
      reports.insert(reports.end(), rows.begin(), rows.end());
    }
  } else {
    // scenarios are embarrassingly parallel; each worker gets a private model
    std::vector<std::future<std::vector<EvalReport>>> futs;
    std::vector<Model<float>> clones;
    clones.reserve(scenarios.size());
    for (size_t i = 0; i < scenarios.size(); ++i) clones.push_back(model.clone());
    for (size_t i = 0; i < scenarios.size(); ++i)
      futs.push_back(std::async(std::launch::async, [&, i] {
        return run_scenario(clones[i], cfg, scenarios[i], data, cfg.out_dir, int(i));
      }));
    for (auto& f : futs) {
      auto rows = f.get();
      reports.insert(reports.end(), rows.begin(), rows.end());
    }
  }

  bool timing = !cfg.stable_output;
  write_report_json(join_path(cfg.out_dir, "report.json"), reports, serialize_config(cfg), timing);
  write_summary_csv(join_path(cfg.out_dir, "summary.csv"), reports, timing);
  for (const auto& r : reports)
    std::cout << r.scenario << " [" << r.attack << "]: natural " << r.natural_acc << "%, adversarial "
              << r.adv_acc << "%\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  try {
    CliArgs args = parse_args(argc, argv);
    return run_cli(args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n" << kUsage;
    return 2;
  } catch (const FileMissingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dentlab
