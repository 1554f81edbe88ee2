// Acceptance suite: one pass/fail line per criterion, every tolerance pinned
// in code. Runs on the desk benchmark: MNIST when DENTLAB_DATA_DIR provides
// the IDX files, otherwise the synthetic-shapes stand-in. Returns the number
// of failed criteria.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

#include "dentlab/checkpoint.hpp"
#include "dentlab/cli.hpp"
#include "dentlab/harness.hpp"
#include "gradcheck.hpp"

using namespace dentlab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------------------
// Desk benchmark definition
// ---------------------------------------------------------------------------

constexpr uint64_t kSeed = 11;
constexpr int kBatch = 128;
const char* kRecipeTag = "v3";  // bump to invalidate cached checkpoints

struct Bench {
  Dataset train, test, holdout;
  Model<float> nominal;
  Model<float> adversarial;
  std::string out_dir;
  bool is_mnist = false;
};

AttackSpec pgd_linf(int steps = 40, float eps = 0.1f, float alpha = 0.01f) {
  AttackSpec a;
  a.name = "pgd-ce";
  a.steps = steps;
  a.epsilon = eps;
  a.alpha = alpha;
  return a;
}

AttackSpec pgd_l2(int steps = 40, float eps = 1.0f, float alpha = 0.25f) {
  AttackSpec a = pgd_linf(steps, eps, alpha);
  a.name = "pgd-ce-l2";
  a.norm = Norm::L2;
  return a;
}

// The benchmark defense: test-time statistics, affine and smoothing
// adaptation, Adam at the published model rate; the smoothing rate is the
// desk recalibration. The attack interacts per the on-submission reading of
// the threat model (see the decisions notes); the lockstep mode is exercised
// separately.
DefenseConfig dent_config(int steps = 10) {
  DefenseConfig c;
  c.steps = steps;
  c.model_lr = 0.001f;
  c.sigma_lr = 0.5f;
  c.sigma_init = 0.7f;
  c.interleave = InterleaveMode::OnSubmission;
  return c;
}

DefenseConfig dent_plus_config(int steps = 6) {
  return DefenseConfig::dent_plus(dent_config(steps));
}

DefenseConfig static_collapse() {
  DefenseConfig c;
  c.steps = 0;
  c.stats_mode = StatsMode::TrainTime;
  c.adapt_affine = false;
  c.adapt_sigma = false;
  c.final_pass_stats = FinalPassStats::Train;
  return c;
}

Bench& bench() {
  static Bench b = [] {
    Bench bx;
    bx.out_dir = "acceptance_out";
    fs::create_directories(bx.out_dir);

    std::string dir = data_dir_fallback();
    bool mnist = fs::exists(fs::path(dir) / "train-images-idx3-ubyte") &&
                 fs::exists(fs::path(dir) / "t10k-images-idx3-ubyte");
    if (mnist) {
      std::printf("# desk data: MNIST from %s\n", dir.c_str());
      Dataset train_full = load_mnist_idx((fs::path(dir) / "train-images-idx3-ubyte").string(),
                                          (fs::path(dir) / "train-labels-idx1-ubyte").string(), "train");
      Dataset test_full = load_mnist_idx((fs::path(dir) / "t10k-images-idx3-ubyte").string(),
                                         (fs::path(dir) / "t10k-labels-idx1-ubyte").string(), "test");
      bx.train = train_full.slice(0, 2000);
      bx.holdout = train_full.slice(2000, 1024);
      bx.test = test_full.slice(0, 512);
      bx.is_mnist = true;
    } else {
      std::printf("# desk data: synthetic shapes (no MNIST under '%s')\n", dir.c_str());
      Dataset all = synth_shapes(2000 + 512 + 1024, 8, splitmix64(kSeed ^ 0xda7aULL));
      bx.train = all.slice(0, 2000);
      bx.train.split = "train";
      bx.test = all.slice(2000, 512);
      bx.test.split = "test";
      bx.holdout = all.slice(2512, 1024);
      bx.holdout.split = "test";
    }

    auto cached = [&](const std::string& name, bool adversarial) {
      std::string path = bx.out_dir + "/" + name + "_" + kRecipeTag + (bx.is_mnist ? "_mnist" : "_synth") +
                         ".ckpt";
      if (fs::exists(path)) {
        std::printf("# loading cached %s\n", path.c_str());
        return load_checkpoint(path);
      }
      Model<float> m = build_model<float>("convnet-bn-small", bx.train.num_classes, kSeed,
                                          bx.train.channels(), bx.train.hw());
      TrainSpec ts;
      ts.epochs = adversarial ? 25 : 10;
      ts.batch_size = kBatch;
      ts.seed = kSeed;
      if (adversarial) {
        AttackSpec inner;
        inner.name = "train-pgd";
        inner.steps = 7;
        inner.epsilon = 0.06f;
        inner.alpha = 0.02f;
        ts.adversarial = inner;
      }
      std::printf("# training %s model (%d epochs)...\n", adversarial ? "adversarial" : "nominal",
                  ts.epochs);
      train(m, bx.train, ts);
      save_checkpoint(m, path);
      return m;
    };
    bx.nominal = cached("nominal", false);
    bx.adversarial = cached("adversarial", true);
    std::printf("# nominal natural accuracy: %.2f%%, adversarially-trained: %.2f%%\n",
                evaluate_accuracy(bx.nominal, bx.test), evaluate_accuracy(bx.adversarial, bx.test));
    return bx;
  }();
  return b;
}

// Shared expensive runs, computed once.
struct SharedRuns {
  EvalReport static_linf;   // PGD-40 vs the static nominal model
  EvalReport dent_linf;     // PGD-40 vs dent (10 steps), benchmark protocol
  DenyUpdatesResult deny;   // static-crafted attack replayed
};

SharedRuns& shared() {
  static SharedRuns s = [] {
    SharedRuns sx;
    Bench& b = bench();
    sx.static_linf = run_interleaved(b.nominal, static_collapse(), {pgd_linf()}, b.test, kBatch, kSeed);
    sx.static_linf.scenario = "static-static";
    sx.dent_linf = run_interleaved(b.nominal, dent_config(), {pgd_linf()}, b.test, kBatch, kSeed);
    sx.dent_linf.scenario = "dent-dent";
    sx.deny = run_deny_updates(b.nominal, dent_config(), pgd_linf(), b.test, kBatch, kSeed,
                               /*include_dent_dent=*/false);
    return sx;
  }();
  return s;
}

// ---------------------------------------------------------------------------

int g_failures = 0;
std::vector<EvalReport> g_reports;

void report(int idx, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d (%s): %s\n", pass ? "PASS" : "FAIL", idx, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient oracle
// ---------------------------------------------------------------------------

void criterion_1() {
  auto t0 = Clock::now();
  Rng rng(kSeed);
  int cases = 0;
  bool ok = true;
  std::string detail;

  auto randt = [&](std::vector<int64_t> shape, double lo = -1, double hi = 1) {
    Tensor<double> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
  };
  auto run = [&](const std::function<Tensor<double>()>& fn, std::vector<Tensor<double>*> leaves,
                 const char* what) {
    auto r = gradcheck::check(fn, leaves, 1e-5, 1e-4);
    ++cases;
    if (!r.ok && ok) {
      ok = false;
      detail = std::string(what) + ": " + r.detail;
    }
  };

  for (int it = 0; it < 6; ++it) {
    auto a = randt({2, 5});
    auto c = randt({2, 5}, 0.4, 1.6);
    run([&] { return sum(mul(add(a, c), sub(a, c))); }, {&a, &c}, "add/sub/mul");
    run([&] { return mean(div(a, c)); }, {&a, &c}, "div/mean");
    run([&] { return sum(mul(exp(mul_scalar(a, 0.4)), log(c))); }, {&a, &c}, "exp/log");
    run([&] { return sum(relu(a)); }, {&a}, "relu");
    run([&] { return sum(clamp(a, -0.4, 0.4)); }, {&a}, "clamp");

    auto x = randt({2, 2, 5, 5});
    auto w = randt({3, 2, 3, 3});
    run([&] { return sum(mul(conv2d(x, w, 1, 1), conv2d(x, w, 1, 1))); }, {&x, &w}, "conv2d");
    run([&] { return sum(mul(avgpool2d(x, 2), avgpool2d(x, 2))); }, {&x}, "avgpool");
    run([&] { return sum(mul(pad2d(x, 1), pad2d(x, 1))); }, {&x}, "pad");
    run([&] { return mean(mul(reshape(x, {2, 50}), reshape(x, {2, 50}))); }, {&x}, "reshape");

    auto z = randt({3, 6}, -2, 2);
    std::vector<int> y{0, 3, 5};
    run([&] { return mean(entropy_rows(softmax_rows(z))); }, {&z}, "softmax/entropy");
    run([&] { return mean(cross_entropy_rows(z, y)); }, {&z}, "cross-entropy");
    run([&] { return mean(dlr_rows(z, y)); }, {&z}, "dlr");
    run([&] { return mean(neg(margin_rows(z, y))); }, {&z}, "margin");

    auto a2 = randt({2, 3});
    auto b2 = randt({3, 4});
    run([&] { return sum(mul(matmul(a2, b2), matmul(a2, b2))); }, {&a2, &b2}, "matmul");
  }

  // end-to-end adapted model: smoothing -> conv -> batch-stat BN -> relu ->
  // pool -> linear -> softmax -> entropy objective
  for (int it = 0; it < 2; ++it) {
    auto x = randt({2, 1, 8, 8}, 0.05, 0.95);
    auto w = randt({3, 1, 3, 3}, -0.4, 0.4);
    auto gamma = randt({3}, 0.8, 1.2);
    auto beta = randt({3}, -0.1, 0.1);
    Tensor<double> mu({3}, 0.0), var({3}, 1.0);
    auto fw = randt({4, 3 * 4 * 4}, -0.3, 0.3);
    SmoothingParams<double> sp;
    sp.init(0.6);
    auto fn = [&] {
      auto h = gaussian_smooth(x, sp);
      h = conv2d(h, w, 1, 1);
      h = batchnorm2d(h, gamma, beta, mu, var, 1e-5, true);
      h = relu(h);
      h = avgpool2d(h, 2);
      h = reshape(h, {2, h.numel() / 2});
      h = matmul(h, reshape(fw, {3 * 4 * 4, 4}));
      return mean(entropy_rows(softmax_rows(h)));
    };
    run(fn, {&x, &w, &gamma, &beta, &sp.raw}, "end-to-end adapted model");
  }

  double sec = seconds_since(t0);
  bool pass = ok && cases >= 50 && sec < 60.0;
  report(1, "gradient oracle", pass,
         fmt("%d finite-difference cases, %s, %.1fs %s", cases, ok ? "all within rtol 1e-4" : detail.c_str(),
             sec, sec < 60 ? "(< 1 min)" : "(over budget)"));
}

// ---------------------------------------------------------------------------
// Criterion 2: attack feasibility over 10,000+ samples
// ---------------------------------------------------------------------------

void criterion_2() {
  Bench& b = bench();
  int64_t attacked = 0;
  bool ok = true;
  std::string detail;
  StaticWhiteBox<Model<float>> white(b.nominal);
  StaticBlackBox<Model<float>> black(b.nominal);

  std::vector<AttackSpec> specs;
  specs.push_back(pgd_linf(3));
  {
    AttackSpec a = pgd_linf(3);
    a.name = "pgd-dlr-t";
    a.loss = AttackLoss::Dlr;
    a.targeted = true;
    specs.push_back(a);
  }
  specs.push_back(pgd_l2(3));
  {
    AttackSpec a;
    a.name = "square-linf";
    a.method = "square";
    a.epsilon = 0.1f;
    a.query_budget = 40;
    specs.push_back(a);
  }
  {
    AttackSpec a;
    a.name = "square-l2";
    a.method = "square";
    a.norm = Norm::L2;
    a.epsilon = 1.0f;
    a.query_budget = 40;
    specs.push_back(a);
  }

  try {
    // 5 attacks x 2048 samples = 10240 attacked samples, all audited
    for (const auto& spec : specs) {
      for (int rep = 0; rep < 4; ++rep) {
        for (int64_t start = 0; start + kBatch <= 512; start += kBatch) {
          Dataset bt = b.test.slice(start, kBatch);
          AttackSpec s = spec;
          s.seed = splitmix64(kSeed ^ uint64_t(rep * 100 + start));
          AttackResult r = s.method == "square" ? square_attack(black, bt.images, bt.labels, s, s.query_budget)
                                                : pgd_attack(white, bt.images, bt.labels, s);
          check_feasible(r.delta, bt.images, s.norm, s.epsilon);  // belt and braces
          attacked += kBatch;
        }
      }
    }
  } catch (const Error& e) {
    ok = false;
    detail = e.what();
  }
  report(2, "attack feasibility", ok && attacked >= 10000,
         ok ? fmt("%lld attacked samples, zero norm/pixel violations", (long long)attacked)
            : ("violation: " + detail));
}

// ---------------------------------------------------------------------------
// Criterion 3: static collapse
// ---------------------------------------------------------------------------

void criterion_3() {
  Bench& b = bench();
  // defense steps=0, all adaptation off: bit-exact static predictions
  bool bits_ok = true;
  {
    Dent dent(b.nominal, static_collapse());
    for (int64_t start = 0; start < b.test.size(); start += kBatch) {
      Dataset bt = b.test.slice(start, std::min<int64_t>(kBatch, b.test.size() - start));
      dent.reset();
      dent.adapt(bt.images);
      Tensor<float> defended = dent.final_logits(bt.images);
      NoTapeScope<float> guard;
      Tensor<float> plain = b.nominal.forward(bt.images, {false, StatsWrite::None});
      if (std::memcmp(defended.data(), plain.data(), size_t(plain.numel()) * 4) != 0) bits_ok = false;
    }
  }
  // eps=0 attack reproduces natural accuracy exactly
  EvalReport r = run_interleaved(b.nominal, dent_config(), {pgd_linf(5, 0.f, 0.01f)}, b.test, kBatch, kSeed);
  bool eps_ok = r.adv_acc == r.natural_acc;
  report(3, "static collapse", bits_ok && eps_ok,
         fmt("steps-0 logits bit-exact: %s; eps=0 adversarial==natural: %.2f%% == %.2f%%",
             bits_ok ? "yes" : "NO", r.adv_acc, r.natural_acc));
}

// ---------------------------------------------------------------------------
// Criterion 4: Table 3 pattern on the nominal model
// ---------------------------------------------------------------------------

void criterion_4() {
  auto t0 = Clock::now();
  SharedRuns& s = shared();
  double gain = s.dent_linf.adv_acc - s.static_linf.adv_acc;
  double nat_drop = s.static_linf.natural_acc - s.dent_linf.natural_acc;
  double sec = seconds_since(t0);
  bool pass = gain >= 15.0 && nat_drop <= 5.0;
  g_reports.push_back(s.static_linf);
  g_reports.push_back(s.dent_linf);
  report(4, "nominal-model pattern", pass,
         fmt("adversarial %.2f%% -> %.2f%% (gain %.2f >= 15), natural %.2f%% -> %.2f%% (drop %.2f <= 5), %.0fs",
             s.static_linf.adv_acc, s.dent_linf.adv_acc, gain, s.static_linf.natural_acc,
             s.dent_linf.natural_acc, nat_drop, sec));
}

// ---------------------------------------------------------------------------
// Criterion 5: deny-updates pattern
// ---------------------------------------------------------------------------

void criterion_5() {
  SharedRuns& s = shared();
  double gain = s.deny.static_dent.adv_acc - s.deny.static_static.adv_acc;
  bool pass = gain >= 30.0;
  g_reports.push_back(s.deny.static_static);
  g_reports.push_back(s.deny.static_dent);
  report(5, "deny-updates pattern", pass,
         fmt("static-static %.2f%% -> static-dent %.2f%% (gain %.2f >= 30)", s.deny.static_static.adv_acc,
             s.deny.static_dent.adv_acc, gain));
}

// ---------------------------------------------------------------------------
// Criterion 6: mixed-batch pattern (one adversarial in 16)
// ---------------------------------------------------------------------------

void criterion_6() {
  Bench& b = bench();
  int num_batches = 48;
  EvalReport mixed = run_mixed_batch(b.nominal, dent_config(), pgd_linf(20), b.test, b.holdout, 16, 1,
                                     num_batches, kSeed);
  // static baseline on the same adversarial samples
  Dataset adv_part = b.test.slice(0, num_batches);
  EvalReport st = run_interleaved(b.nominal, static_collapse(), {pgd_linf(20)}, adv_part, 16, kSeed);
  double gain = mixed.adv_acc - st.adv_acc;
  bool pass = gain >= 5.0;
  g_reports.push_back(mixed);
  report(6, "mixed-batch pattern", pass,
         fmt("one-of-16 dent %.2f%% vs static %.2f%% on %d adversarial samples (gain %.2f >= 5)",
             mixed.adv_acc, st.adv_acc, num_batches, gain));
}

// ---------------------------------------------------------------------------
// Criterion 7: norm/affine ablation on the adversarially trained model
// ---------------------------------------------------------------------------

void criterion_7() {
  Bench& b = bench();
  DefenseConfig affine_only = dent_config();
  affine_only.stats_mode = StatsMode::TrainTime;
  affine_only.adapt_sigma = false;
  affine_only.steps = 30;

  bool pass = true;
  std::string detail;
  for (Norm norm : {Norm::Linf, Norm::L2}) {
    AttackSpec atk = norm == Norm::Linf ? pgd_linf() : pgd_l2();
    EvalReport st = run_interleaved(b.adversarial, static_collapse(), {atk}, b.test, kBatch, kSeed);
    EvalReport af = run_interleaved(b.adversarial, affine_only, {atk}, b.test, kBatch, kSeed);
    af.scenario = "ablation-affine-only";
    detail += fmt("%s: static %.2f%% affine-only %.2f%%; ", norm_name(norm).c_str(), st.adv_acc, af.adv_acc);
    if (af.adv_acc <= st.adv_acc) pass = false;
    g_reports.push_back(st);
    g_reports.push_back(af);
  }

  // all-off row equals static exactly
  bool bits_ok = true;
  {
    Dent dent(b.adversarial, static_collapse());
    Dataset bt = b.test.slice(0, kBatch);
    dent.reset();
    dent.adapt(bt.images);
    Tensor<float> defended = dent.final_logits(bt.images);
    NoTapeScope<float> guard;
    Tensor<float> plain = b.adversarial.forward(bt.images, {false, StatsWrite::None});
    bits_ok = std::memcmp(defended.data(), plain.data(), size_t(plain.numel()) * 4) == 0;
  }
  detail += fmt("all-off row bit-exact: %s", bits_ok ? "yes" : "NO");
  report(7, "norm/affine ablation", pass && bits_ok, detail);
}

// ---------------------------------------------------------------------------
// Criterion 8: batch-size pattern
// ---------------------------------------------------------------------------

void criterion_8() {
  Bench& b = bench();
  auto natural_at = [&](StatsMode stats, int batch_size) {
    DefenseConfig c = dent_config();
    c.stats_mode = stats;
    auto rows = run_sweep(b.nominal, c, {}, b.test, SweepAxis::BatchSize, {double(batch_size)}, batch_size,
                          kSeed);
    return rows[0].report.natural_acc;
  };
  double test_bs1 = natural_at(StatsMode::TestTime, 1);
  double test_bs128 = natural_at(StatsMode::TestTime, 128);

  double train_lo = 1e9, train_hi = -1e9;
  std::vector<SweepRow> train_rows;
  {
    DefenseConfig c = dent_config();
    c.stats_mode = StatsMode::TrainTime;
    train_rows = run_sweep(b.nominal, c, {}, b.test, SweepAxis::BatchSize,
                           {1, 2, 4, 8, 16, 32, 64, 128, 256}, kBatch, kSeed);
    for (auto& r : train_rows) {
      train_lo = std::min(train_lo, r.report.natural_acc);
      train_hi = std::max(train_hi, r.report.natural_acc);
    }
    write_sweep_csv(bench().out_dir + "/sweep_batch_size.csv", SweepAxis::BatchSize, train_rows);
  }
  bool pass = (test_bs128 - test_bs1 >= 40.0) && (train_hi - train_lo < 2.0);
  report(8, "batch-size pattern", pass,
         fmt("test-time stats: bs1 %.2f%% vs bs128 %.2f%% (drop %.2f >= 40); train-time spread %.2f < 2",
             test_bs1, test_bs128, test_bs128 - test_bs1, train_hi - train_lo));
}

// ---------------------------------------------------------------------------
// Criterion 9: steps pattern and sample-wise advantage
// ---------------------------------------------------------------------------

void criterion_9() {
  Bench& b = bench();
  auto rows = run_sweep(b.nominal, dent_config(), {pgd_linf()}, b.test, SweepAxis::DefenseSteps,
                        {0, 5, 10, 20}, kBatch, kSeed);
  write_sweep_csv(bench().out_dir + "/sweep_defense_steps.csv", SweepAxis::DefenseSteps, rows);
  bool monotone = true;
  std::string seq;
  for (size_t i = 0; i < rows.size(); ++i) {
    seq += fmt("%s%.2f", i ? " -> " : "", rows[i].report.adv_acc);
    if (i && rows[i].report.adv_acc < rows[i - 1].report.adv_acc - 1.0) monotone = false;
    g_reports.push_back(rows[i].report);
  }
  EvalReport dent6 = run_interleaved(b.nominal, dent_config(6), {pgd_linf()}, b.test, kBatch, kSeed);
  EvalReport plus6 = run_interleaved(b.nominal, dent_plus_config(6), {pgd_linf()}, b.test, kBatch, kSeed);
  plus6.scenario = "dent-plus";
  bool plus_ok = plus6.adv_acc >= dent6.adv_acc;
  g_reports.push_back(dent6);
  g_reports.push_back(plus6);
  report(9, "steps pattern", monotone && plus_ok,
         fmt("steps {0,5,10,20}: %s (non-decreasing within 1); dent+ @6 %.2f%% >= dent @6 %.2f%%: %s",
             seq.c_str(), plus6.adv_acc, dent6.adv_acc, plus_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// Criterion 10: smoothing identity on natural vs adversarial data
// ---------------------------------------------------------------------------

void criterion_10() {
  Bench& b = bench();
  DefenseConfig c = dent_config();
  Dent dent(b.nominal, c);
  StaticWhiteBox<Model<float>> white(b.nominal);

  int batches = 21;
  int per = 24;
  double nat_sigma = 0, adv_sigma = 0;
  std::vector<std::vector<float>> traces;
  for (int bi = 0; bi < batches; ++bi) {
    Dataset bt = b.test.slice(bi * per, per);
    dent.adapt_and_predict(bt.images);
    nat_sigma += dent.sigma_mean();
    traces.push_back(dent.sigma_trajectory());

    AttackSpec spec = pgd_linf(20);
    spec.seed = splitmix64(kSeed ^ uint64_t(bi));
    AttackResult ar = pgd_attack(white, bt.images, bt.labels, spec);
    Tensor<float> x_adv;
    {
      NoTapeScope<float> guard;
      x_adv = add(bt.images, ar.delta);
    }
    dent.adapt_and_predict(x_adv);
    adv_sigma += dent.sigma_mean();
  }
  dent.reset();
  nat_sigma /= batches;
  adv_sigma /= batches;
  write_sigma_trace_csv(bench().out_dir + "/sigma_trace_natural.csv", traces);
  bool pass = nat_sigma < double(c.sigma_init) && adv_sigma > nat_sigma;
  report(10, "smoothing identity", pass,
         fmt("mean sigma over %d batches: natural %.4f < init %.2f; adversarial %.4f > natural", batches,
             nat_sigma, c.sigma_init, adv_sigma));
}

// ---------------------------------------------------------------------------
// Criterion 11: attack-strength sufficiency (steps plateau)
// ---------------------------------------------------------------------------

void criterion_11() {
  Bench& b = bench();
  DefenseConfig c = dent_config(1);
  EvalReport r100 = run_interleaved(b.nominal, c, {pgd_linf(100)}, b.test, kBatch, kSeed);
  EvalReport r200 = run_interleaved(b.nominal, c, {pgd_linf(200)}, b.test, kBatch, kSeed);
  double drop = r100.adv_acc - r200.adv_acc;
  bool pass = drop < 1.0;
  g_reports.push_back(r100);
  g_reports.push_back(r200);
  report(11, "attack sufficiency", pass,
         fmt("1-step dent: PGD-100 %.2f%% vs PGD-200 %.2f%% (drop %.2f < 1)", r100.adv_acc, r200.adv_acc,
             drop));
}

// ---------------------------------------------------------------------------
// Criterion 12: loss ablation (minent vs maxinf)
// ---------------------------------------------------------------------------

void criterion_12() {
  Bench& b = bench();
  SharedRuns& s = shared();
  DefenseConfig c = dent_config();
  c.objective = Objective::MaxInf;
  EvalReport maxinf = run_interleaved(b.nominal, c, {pgd_linf()}, b.test, kBatch, kSeed);
  maxinf.scenario = "loss-maxinf";
  double diff = std::abs(maxinf.adv_acc - s.dent_linf.adv_acc);
  bool pass = diff <= 3.0;
  g_reports.push_back(maxinf);
  report(12, "loss ablation", pass,
         fmt("minent %.2f%% vs maxinf %.2f%% (|diff| %.2f <= 3)", s.dent_linf.adv_acc, maxinf.adv_acc, diff));
}

// ---------------------------------------------------------------------------
// Criterion 13: profiling sanity
// ---------------------------------------------------------------------------

void criterion_13() {
  Bench& b = bench();
  Dataset bt = b.test.slice(0, kBatch);
  auto rows = profile_defense(b.nominal, dent_config(), bt.images, {0, 1, 5, 10, 20});
  bool monotone = true;
  double rel10 = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (i && rows[i].flops <= rows[i - 1].flops) monotone = false;
    if (rows[i].steps == 10) rel10 = rows[i].relative;
  }
  std::ofstream f(bench().out_dir + "/profile.csv");
  f << "steps,seconds,flops,relative\n";
  for (const auto& r : rows) f << r.steps << "," << r.seconds << "," << r.flops << "," << r.relative << "\n";
  bool pass = monotone && rel10 >= 15.0 && rel10 <= 40.0;
  report(13, "profiling sanity", pass,
         fmt("relative compute at 10 steps: %.1fx (within [15,40]); FLOPs monotone in steps: %s", rel10,
             monotone ? "yes" : "NO"));
}

}  // namespace

int main() {
  auto t0 = Clock::now();
  std::printf("dentlab acceptance suite\n");
  bench();

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  criterion_10();
  criterion_11();
  criterion_12();
  criterion_13();

  write_report_json(bench().out_dir + "/report.json", g_reports, "acceptance desk benchmark", true);
  write_summary_csv(bench().out_dir + "/summary.csv", g_reports, true);

  std::printf("%d/13 criteria passed in %.1f min; reports under %s/\n", 13 - g_failures,
              seconds_since(t0) / 60.0, bench().out_dir.c_str());
  return g_failures;
}
