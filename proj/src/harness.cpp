#include "dentlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dentlab {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_seconds(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<AttackSpec> seeded_specs(const std::vector<AttackSpec>& attacks, uint64_t run_seed,
                                     int64_t batch_idx) {
  std::vector<AttackSpec> out = attacks;
  for (size_t a = 0; a < out.size(); ++a)
    out[a].seed = splitmix64(run_seed ^ splitmix64(0xa77ac4ULL + uint64_t(batch_idx) * 131 + a));
  return out;
}

std::string attack_list_name(const std::vector<AttackSpec>& attacks) {
  std::string s;
  for (const auto& a : attacks) s += (s.empty() ? "" : "+") + a.name;
  return s;
}

double percent(int64_t hits, int64_t total) { return total ? 100.0 * double(hits) / double(total) : 0.0; }

}  // namespace

void EvalReport::check_invariants() const {
  for (const auto& [name, acc] : per_attack_acc)
    if (adv_acc > acc + 1e-9)
      throw ValueError("report: worst-case accuracy " + std::to_string(adv_acc) + " exceeds attack '" + name +
                       "' accuracy " + std::to_string(acc));
  if (!samples.empty()) {
    int64_t nat = 0, adv = 0;
    for (const auto& s : samples) {
      if (s.clean_pred == s.label) ++nat;
      if (!s.success) ++adv;
    }
    if (std::abs(percent(nat, int64_t(samples.size())) - natural_acc) > 1e-6)
      throw ValueError("report: natural accuracy does not match per-sample records");
    if (std::abs(percent(adv, int64_t(samples.size())) - adv_acc) > 1e-6)
      throw ValueError("report: adversarial accuracy does not match per-sample records");
  }
}

EvalReport run_interleaved(Model<float>& model, const DefenseConfig& defense,
                           const std::vector<AttackSpec>& attacks, const Dataset& test,
                           int batch_size, uint64_t seed) {
  if (attacks.empty()) throw ValueError("run_interleaved: no attacks given");
  if (attacks[0].steps == 0 && defense.steps == 0)
    throw ValueError("run_interleaved: degenerate scenario, attack and defense step counts are both zero");
  defense.validate();
  if (batch_size < 1) throw ValueError("run_interleaved: batch size must be >= 1");

  auto t0 = Clock::now();
  Dent dent(model, defense);

  EvalReport rep;
  rep.scenario = "interleaved-" + interleave_name(defense.interleave);
  rep.attack = attack_list_name(attacks);
  rep.norm = norm_name(attacks[0].norm);
  rep.eps = attacks[0].epsilon;
  rep.defense_steps = defense.steps;
  rep.seed = seed;

  int64_t n = test.size();
  int64_t nat_hits = 0, adv_hits = 0;
  std::vector<int64_t> member_hits(attacks.size(), 0);

  for (int64_t start = 0, bi = 0; start < n; start += batch_size, ++bi) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    Dataset b = test.slice(start, count);

    // defended natural prediction
    std::vector<int> nat_pred = dent.adapt_and_predict(b.images);

    DentWhiteBox white(dent, defense.interleave);
    DentBlackBox black(dent);
    AttackTarget target{&white, &black};
    EnsembleResult ens = worst_case_ensemble(target, b.images, b.labels, seeded_specs(attacks, seed, bi));

    // last-move contract: the state used for the final prediction postdates
    // the final attack iterate
    if (white.last_grad_timestamp() >= 0 && dent.timestamp() <= white.last_grad_timestamp())
      throw ValueError("run_interleaved: last-move contract violated");

    for (int64_t i = 0; i < count; ++i) {
      SampleRecord r;
      r.label = b.labels[size_t(i)];
      r.clean_pred = nat_pred[size_t(i)];
      r.adv_pred = ens.combined.adv_pred[size_t(i)];
      r.success = ens.combined.success[size_t(i)];
      rep.samples.push_back(r);
      if (r.clean_pred == r.label) ++nat_hits;
      if (!r.success) ++adv_hits;
      for (size_t a = 0; a < ens.members.size(); ++a)
        if (!ens.members[a].success[size_t(i)]) ++member_hits[a];
    }
    rep.grad_anomalies += ens.combined.grad_anomalies;
    rep.nonfinite_events += dent.events().nonfinite_objectives;
  }

  rep.natural_acc = percent(nat_hits, n);
  rep.adv_acc = percent(adv_hits, n);
  for (size_t a = 0; a < attacks.size(); ++a)
    rep.per_attack_acc.emplace_back(attacks[a].name, percent(member_hits[a], n));

  int64_t nparams = 0;
  for (auto* bn : model.bn_layers()) nparams += 2 * bn->channels();
  rep.flops_rel = defense.steps == 0
                      ? 1.0
                      : defense_flops(model, batch_size, defense.steps, defense.adapt_sigma, 3, nparams) /
                            defense_flops(model, batch_size, 0, defense.adapt_sigma, 3, nparams);
  rep.wall_seconds = elapsed_seconds(t0);
  rep.check_invariants();
  return rep;
}

DenyUpdatesResult run_deny_updates(Model<float>& model, const DefenseConfig& defense,
                                   const AttackSpec& attack, const Dataset& test, int batch_size,
                                   uint64_t seed, bool include_dent_dent) {
  defense.validate();
  DenyUpdatesResult out;
  auto t0 = Clock::now();

  auto init_report = [&](const char* scenario) {
    EvalReport r;
    r.scenario = scenario;
    r.attack = attack.name;
    r.norm = norm_name(attack.norm);
    r.eps = attack.epsilon;
    r.seed = seed;
    return r;
  };
  out.static_static = init_report("static-static");
  out.static_dent = init_report("static-dent");
  out.static_dent.defense_steps = defense.steps;

  Dent dent(model, defense);
  StaticWhiteBox<Model<float>> static_white(model);

  int64_t n = test.size();
  int64_t ss_nat = 0, ss_adv = 0, sd_nat = 0, sd_adv = 0;
  for (int64_t start = 0, bi = 0; start < n; start += batch_size, ++bi) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    Dataset b = test.slice(start, count);
    AttackSpec spec = seeded_specs({attack}, seed, bi)[0];

    // crafted offline against the frozen static model
    AttackResult ar = pgd_attack(static_white, b.images, b.labels, spec);
    Tensor<float> x_adv;
    {
      NoTapeScope<float> guard;
      x_adv = add(b.images, ar.delta);
    }

    // static-static: replay against the static model
    std::vector<int> ss_clean = argmax_rows(static_white.eval_logits(b.images));
    std::vector<int> ss_pred = argmax_rows(static_white.eval_logits(x_adv));
    // static-dent: replay the same fixed perturbation against the defense
    std::vector<int> sd_clean = dent.adapt_and_predict(b.images);
    std::vector<int> sd_pred = dent.adapt_and_predict(x_adv);
    dent.reset();  // the next batch's static rows need the pristine model

    for (int64_t i = 0; i < count; ++i) {
      int label = b.labels[size_t(i)];
      SampleRecord rs{label, ss_clean[size_t(i)], ss_pred[size_t(i)], ss_pred[size_t(i)] != label};
      out.static_static.samples.push_back(rs);
      if (rs.clean_pred == label) ++ss_nat;
      if (!rs.success) ++ss_adv;
      SampleRecord rd{label, sd_clean[size_t(i)], sd_pred[size_t(i)], sd_pred[size_t(i)] != label};
      out.static_dent.samples.push_back(rd);
      if (rd.clean_pred == label) ++sd_nat;
      if (!rd.success) ++sd_adv;
    }
  }
  out.static_static.natural_acc = percent(ss_nat, n);
  out.static_static.adv_acc = percent(ss_adv, n);
  out.static_static.per_attack_acc.emplace_back(attack.name, out.static_static.adv_acc);
  out.static_dent.natural_acc = percent(sd_nat, n);
  out.static_dent.adv_acc = percent(sd_adv, n);
  out.static_dent.per_attack_acc.emplace_back(attack.name, out.static_dent.adv_acc);
  double half = elapsed_seconds(t0);
  out.static_static.wall_seconds = half;
  out.static_dent.wall_seconds = half;
  out.static_static.check_invariants();
  out.static_dent.check_invariants();

  if (include_dent_dent) {
    out.dent_dent = run_interleaved(model, defense, {attack}, test, batch_size, seed);
    out.dent_dent.scenario = "dent-dent";
  }
  return out;
}

EvalReport run_mixed_batch(Model<float>& model, const DefenseConfig& defense, const AttackSpec& attack,
                           const Dataset& adversarial_pool, const Dataset& natural_pool,
                           int batch_size, int adv_per_batch, int num_batches, uint64_t seed) {
  defense.validate();
  if (adv_per_batch < 1)
    throw ValueError("run_mixed_batch: mix ratio yields zero adversarial samples per batch");
  if (adv_per_batch > batch_size) throw ValueError("run_mixed_batch: more adversarial samples than batch size");
  if (num_batches < 1) throw ValueError("run_mixed_batch: need at least one batch");
  if (int64_t(adv_per_batch) * num_batches > adversarial_pool.size())
    throw ValueError("run_mixed_batch: adversarial pool too small");

  auto t0 = Clock::now();
  Dent dent(model, defense);
  Rng rng(splitmix64(seed ^ 0x313a7ULL));

  // natural members drawn without replacement from the held-out pool
  std::vector<int64_t> nat_order = rng.permutation(natural_pool.size());
  size_t nat_cursor = 0;
  auto draw_natural = [&]() {
    if (nat_cursor >= nat_order.size()) nat_cursor = 0;  // pool exhausted: recycle
    return nat_order[nat_cursor++];
  };

  EvalReport rep;
  rep.scenario = "mixed-batch-" + std::to_string(adv_per_batch) + "-of-" + std::to_string(batch_size);
  rep.attack = attack.name;
  rep.norm = norm_name(attack.norm);
  rep.eps = attack.epsilon;
  rep.defense_steps = defense.steps;
  rep.seed = seed;

  int64_t C = adversarial_pool.channels(), H = adversarial_pool.hw();
  int64_t nat_hits = 0, adv_hits = 0, n_adv_total = 0;

  for (int bi = 0; bi < num_batches; ++bi) {
    Tensor<float> x({batch_size, C, H, H});
    std::vector<int> y(size_t(batch_size), 0);
    std::vector<char> mask(size_t(batch_size), 0);
    int64_t M = C * H * H;
    for (int i = 0; i < adv_per_batch; ++i) {
      int64_t src = int64_t(bi) * adv_per_batch + i;
      std::memcpy(x.data() + i * M, adversarial_pool.images.data() + src * M, size_t(M) * sizeof(float));
      y[size_t(i)] = adversarial_pool.labels[size_t(src)];
      mask[size_t(i)] = 1;
    }
    for (int i = adv_per_batch; i < batch_size; ++i) {
      int64_t src = draw_natural();
      std::memcpy(x.data() + i * M, natural_pool.images.data() + src * M, size_t(M) * sizeof(float));
      y[size_t(i)] = natural_pool.labels[size_t(src)];
    }

    std::vector<int> nat_pred = dent.adapt_and_predict(x);

    DentWhiteBox white(dent, defense.interleave);
    AttackSpec spec = seeded_specs({attack}, seed, bi)[0];
    AttackResult ar = pgd_attack(white, x, y, spec, &mask);

    for (int i = 0; i < batch_size; ++i) {
      if (!mask[size_t(i)]) continue;  // accuracy on the adversarial portion alone
      SampleRecord r{y[size_t(i)], nat_pred[size_t(i)], ar.adv_pred[size_t(i)],
                     bool(ar.success[size_t(i)])};
      rep.samples.push_back(r);
      ++n_adv_total;
      if (r.clean_pred == r.label) ++nat_hits;
      if (!r.success) ++adv_hits;
    }
    rep.grad_anomalies += ar.grad_anomalies;
  }
  rep.natural_acc = percent(nat_hits, n_adv_total);
  rep.adv_acc = percent(adv_hits, n_adv_total);
  rep.per_attack_acc.emplace_back(attack.name, rep.adv_acc);
  rep.wall_seconds = elapsed_seconds(t0);
  rep.check_invariants();
  return rep;
}

std::string sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::BatchSize: return "batch_size";
    case SweepAxis::DefenseSteps: return "defense_steps";
    case SweepAxis::Epsilon: return "epsilon";
  }
  return "?";
}

SweepAxis sweep_axis_from_name(const std::string& s) {
  if (s == "batch_size") return SweepAxis::BatchSize;
  if (s == "defense_steps") return SweepAxis::DefenseSteps;
  if (s == "epsilon") return SweepAxis::Epsilon;
  throw ValueError("unknown sweep axis '" + s + "'");
}

namespace {

// Natural-accuracy-only evaluation of the defense over a dataset.
EvalReport eval_defended_natural(Model<float>& model, const DefenseConfig& defense, const Dataset& test,
                                 int batch_size, uint64_t seed) {
  Dent dent(model, defense);
  EvalReport rep;
  rep.scenario = "natural";
  rep.attack = "none";
  rep.norm = "-";
  rep.defense_steps = defense.steps;
  rep.seed = seed;
  int64_t n = test.size();
  int64_t hits = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, n - start);
    Dataset b = test.slice(start, count);
    std::vector<int> pred = dent.adapt_and_predict(b.images);
    for (int64_t i = 0; i < count; ++i) {
      SampleRecord r{b.labels[size_t(i)], pred[size_t(i)], pred[size_t(i)], false};
      rep.samples.push_back(r);
      if (r.clean_pred == r.label) ++hits;
    }
  }
  rep.natural_acc = percent(hits, n);
  rep.adv_acc = 100.0;  // no attack ran
  rep.check_invariants();
  return rep;
}

}  // namespace

std::vector<SweepRow> run_sweep(Model<float>& model, const DefenseConfig& defense,
                                const std::vector<AttackSpec>& attacks, const Dataset& test,
                                SweepAxis axis, const std::vector<double>& values, int batch_size,
                                uint64_t seed) {
  if (values.empty()) throw ValueError("run_sweep: empty axis");
  for (size_t i = 1; i < values.size(); ++i)
    if (values[i] <= values[i - 1]) throw ValueError("run_sweep: axis values must be sorted ascending");

  std::vector<SweepRow> rows;
  for (double v : values) {
    SweepRow row;
    row.value = v;
    switch (axis) {
      case SweepAxis::BatchSize: {
        int bs = int(v);
        if (bs < 1) throw ValueError("run_sweep: batch size must be >= 1");
        if (attacks.empty())
          row.report = eval_defended_natural(model, defense, test, bs, seed);
        else
          row.report = run_interleaved(model, defense, attacks, test, bs, seed);
        break;
      }
      case SweepAxis::DefenseSteps: {
        DefenseConfig cfg = defense;
        cfg.steps = int(v);
        row.report = run_interleaved(model, cfg, attacks, test, batch_size, seed);
        break;
      }
      case SweepAxis::Epsilon: {
        std::vector<AttackSpec> sp = attacks;
        for (auto& a : sp) {
          // step size scales with the bound so attack strength stays comparable
          a.alpha *= float(v) / a.epsilon;
          a.epsilon = float(v);
        }
        row.report = run_interleaved(model, defense, sp, test, batch_size, seed);
        break;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ProfileRow> profile_defense(Model<float>& model, const DefenseConfig& defense,
                                        const Tensor<float>& batch, const std::vector<int>& steps_list) {
  int64_t nparams = 0;
  for (auto* bn : model.bn_layers()) nparams += 2 * bn->channels();
  int64_t radius = std::min<int64_t>(7, int64_t(std::ceil(3.0 * defense.sigma_init)));

  // warm-up pass
  {
    DefenseConfig warm = defense;
    warm.steps = 1;
    Dent d(model, warm);
    d.adapt_and_predict(batch);
  }

  std::vector<ProfileRow> rows;
  double base = defense_flops(model, batch.dim(0), 0, defense.adapt_sigma, radius, nparams);
  for (int s : steps_list) {
    DefenseConfig cfg = defense;
    cfg.steps = s;
    Dent d(model, cfg);
    auto t0 = Clock::now();
    d.adapt_and_predict(batch);
    ProfileRow r;
    r.steps = s;
    r.seconds = elapsed_seconds(t0);
    r.flops = defense_flops(model, batch.dim(0), s, defense.adapt_sigma, radius, nparams);
    r.relative = r.flops / base;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

nlohmann::json report_to_json(const EvalReport& r, bool with_timing) {
  nlohmann::json j;
  j["scenario"] = r.scenario;
  j["attack"] = r.attack;
  j["norm"] = r.norm;
  j["eps"] = r.eps;
  j["defense_steps"] = r.defense_steps;
  j["natural_acc"] = r.natural_acc;
  j["adv_acc"] = r.adv_acc;
  j["seed"] = r.seed;
  j["wall_seconds"] = with_timing ? r.wall_seconds : 0.0;
  j["flops_rel"] = r.flops_rel;
  j["grad_anomalies"] = r.grad_anomalies;
  j["nonfinite_events"] = r.nonfinite_events;
  nlohmann::json pa = nlohmann::json::array();
  for (const auto& [name, acc] : r.per_attack_acc) pa.push_back({{"attack", name}, {"accuracy", acc}});
  j["per_attack_acc"] = pa;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples)
    samples.push_back({s.label, s.clean_pred, s.adv_pred, int(s.success)});
  j["samples"] = samples;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.scenario = j.at("scenario").get<std::string>();
  r.attack = j.at("attack").get<std::string>();
  r.norm = j.at("norm").get<std::string>();
  r.eps = j.at("eps").get<double>();
  r.defense_steps = j.at("defense_steps").get<int>();
  r.natural_acc = j.at("natural_acc").get<double>();
  r.adv_acc = j.at("adv_acc").get<double>();
  r.seed = j.at("seed").get<uint64_t>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.flops_rel = j.at("flops_rel").get<double>();
  r.grad_anomalies = j.at("grad_anomalies").get<int>();
  r.nonfinite_events = j.at("nonfinite_events").get<int>();
  for (const auto& pa : j.at("per_attack_acc"))
    r.per_attack_acc.emplace_back(pa.at("attack").get<std::string>(), pa.at("accuracy").get<double>());
  for (const auto& s : j.at("samples")) {
    SampleRecord rec;
    rec.label = s.at(0).get<int>();
    rec.clean_pred = s.at(1).get<int>();
    rec.adv_pred = s.at(2).get<int>();
    rec.success = s.at(3).get<int>() != 0;
    r.samples.push_back(rec);
  }
  return r;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void write_report_json(const std::string& path, const std::vector<EvalReport>& reports,
                       const std::string& config_echo, bool with_timing) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = config_echo;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) rows.push_back(report_to_json(r, with_timing));
  j["reports"] = rows;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(1) << "\n";
}

std::vector<EvalReport> read_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileMissingError("cannot open " + path);
  nlohmann::json j;
  f >> j;
  int version = j.at("format_version").get<int>();
  if (version > 1)
    throw IoError("report: format version " + std::to_string(version) + " is newer than supported");
  std::vector<EvalReport> out;
  for (const auto& r : j.at("reports")) out.push_back(report_from_json(r));
  return out;
}

void write_summary_csv(const std::string& path, const std::vector<EvalReport>& reports, bool with_timing) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "scenario,attack,norm,eps,steps,natural_acc,adv_acc,seconds,flops_rel\n";
  for (const auto& r : reports) {
    f << r.scenario << "," << r.attack << "," << r.norm << "," << fmt(r.eps) << "," << r.defense_steps << ","
      << fmt(r.natural_acc) << "," << fmt(r.adv_acc) << "," << fmt(with_timing ? r.wall_seconds : 0.0, 3)
      << "," << fmt(r.flops_rel, 3) << "\n";
  }
}

void write_sweep_csv(const std::string& path, SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << sweep_axis_name(axis) << ",natural_acc,adv_acc\n";
  for (const auto& r : rows)
    f << fmt(r.value, 6) << "," << fmt(r.report.natural_acc) << "," << fmt(r.report.adv_acc) << "\n";
}

void write_sigma_trace_csv(const std::string& path, const std::vector<std::vector<float>>& per_batch) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "batch,step,sigma\n";
  for (size_t b = 0; b < per_batch.size(); ++b)
    for (size_t s = 0; s < per_batch[b].size(); ++s)
      f << b << "," << s << "," << fmt(double(per_batch[b][s]), 6) << "\n";
}

}  // namespace dentlab
