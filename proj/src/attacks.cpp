#include "dentlab/attacks.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace dentlab {

std::string norm_name(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

Norm norm_from_name(const std::string& s) {
  if (s == "linf") return Norm::Linf;
  if (s == "l2") return Norm::L2;
  throw ValueError("unknown norm '" + s + "', expected linf or l2");
}

std::string attack_loss_name(AttackLoss l) {
  switch (l) {
    case AttackLoss::CrossEntropy: return "cross-entropy";
    case AttackLoss::Dlr: return "dlr";
    case AttackLoss::Margin: return "margin";
  }
  return "?";
}

AttackLoss attack_loss_from_name(const std::string& s) {
  if (s == "cross-entropy" || s == "ce") return AttackLoss::CrossEntropy;
  if (s == "dlr") return AttackLoss::Dlr;
  if (s == "margin") return AttackLoss::Margin;
  throw ValueError("unknown attack loss '" + s + "'");
}

void AttackSpec::validate() const {
  if (method != "pgd" && method != "square")
    throw ValueError("attack '" + name + "': unknown method '" + method + "'");
  if (!std::isfinite(epsilon) || epsilon < 0.f)
    throw ValueError("attack '" + name + "': epsilon must be finite and nonnegative");
  if (!std::isfinite(alpha) || alpha <= 0.f)
    throw ValueError("attack '" + name + "': alpha must be finite and positive");
  if (steps < 1) throw ValueError("attack '" + name + "': steps must be >= 1");
  if (restarts < 1) throw ValueError("attack '" + name + "': restarts must be >= 1");
  if (momentum < 0.f || momentum >= 1.f)
    throw ValueError("attack '" + name + "': momentum must be in [0, 1)");
  if (method == "square") {
    if (query_budget < 1) throw ValueError("attack '" + name + "': query budget must be >= 1");
    if (targeted) throw ValueError("attack '" + name + "': square attack is untargeted");
  }
}

float sample_norm(const Tensor<float>& delta, int64_t b, Norm norm) {
  int64_t M = delta.numel() / delta.dim(0);
  const float* d = delta.data() + b * M;
  if (norm == Norm::Linf) {
    float m = 0;
    for (int64_t i = 0; i < M; ++i) m = std::max(m, std::abs(d[i]));
    return m;
  }
  double s = 0;
  for (int64_t i = 0; i < M; ++i) s += double(d[i]) * double(d[i]);
  return float(std::sqrt(s));
}

Tensor<float> project(const Tensor<float>& delta, Norm norm, float epsilon, const Tensor<float>& x) {
  if (delta.shape() != x.shape())
    throw ShapeError("project: delta " + shape_str(delta.shape()) + " does not match input " +
                     shape_str(x.shape()));
  if (epsilon < 0.f) throw ValueError("project: epsilon must be nonnegative");
  Tensor<float> out = delta.clone();
  int64_t B = out.dim(0);
  int64_t M = out.numel() / B;
  float* d = out.data();
  const float* px = x.data();

  if (norm == Norm::Linf) {
    for (int64_t i = 0, n = out.numel(); i < n; ++i)
      d[i] = std::min(epsilon, std::max(-epsilon, d[i]));
  } else {
    for (int64_t b = 0; b < B; ++b) {
      double s = 0;
      float* db = d + b * M;
      for (int64_t i = 0; i < M; ++i) s += double(db[i]) * double(db[i]);
      double nrm = std::sqrt(s);
      if (nrm > double(epsilon) && nrm > 0.0) {
        float scale = float(double(epsilon) / nrm);
        for (int64_t i = 0; i < M; ++i) db[i] *= scale;
      }
    }
  }

  // pixel-range feasibility, exact in fp32: clamp delta into [-x, 1-x] and
  // nudge any residual rounding past the boundary
  for (int64_t i = 0, n = out.numel(); i < n; ++i) {
    float lo = -px[i], hi = 1.f - px[i];
    if (d[i] < lo) d[i] = lo;
    if (d[i] > hi) d[i] = hi;
    while (px[i] + d[i] > 1.f) d[i] = std::nextafterf(d[i], -2.f);
    while (px[i] + d[i] < 0.f) d[i] = std::nextafterf(d[i], 2.f);
  }
  return out;
}

void check_feasible(const Tensor<float>& delta, const Tensor<float>& x, Norm norm, float epsilon) {
  int64_t B = delta.dim(0);
  for (int64_t b = 0; b < B; ++b) {
    float n = sample_norm(delta, b, norm);
    if (n > epsilon + 1e-6f)
      throw ValueError("attack: norm bound violated for sample " + std::to_string(b) + ": " +
                       std::to_string(n) + " > " + std::to_string(epsilon));
  }
  const float* d = delta.data();
  const float* px = x.data();
  for (int64_t i = 0, n = delta.numel(); i < n; ++i) {
    float v = px[i] + d[i];
    if (v < 0.f || v > 1.f)
      throw ValueError("attack: pixel range violated at flat index " + std::to_string(i) + ": " +
                       std::to_string(v));
  }
}

namespace {

// Per-sample attack loss with an ascending convention: the attacker always
// climbs it. Targeted runs flip the sign (minimize toward the target).
Tensor<float> attack_loss_rows(const Tensor<float>& logits, const std::vector<int>& labels,
                               AttackLoss loss, bool targeted) {
  Tensor<float> l;
  switch (loss) {
    case AttackLoss::CrossEntropy: l = cross_entropy_rows(logits, labels); break;
    case AttackLoss::Dlr: l = dlr_rows(logits, labels); break;
    case AttackLoss::Margin: l = neg(margin_rows(logits, labels)); break;
  }
  return targeted ? neg(l) : l;
}

std::vector<int> runner_up_targets(const Tensor<float>& logits) {
  int64_t B = logits.dim(0), C = logits.dim(1);
  const float* z = logits.data();
  std::vector<int> t(size_t(B), 0);
  for (int64_t b = 0; b < B; ++b) {
    int p1 = 0;
    for (int c = 1; c < C; ++c)
      if (z[b * C + c] > z[b * C + p1]) p1 = c;
    int p2 = p1 == 0 ? 1 : 0;
    for (int c = 0; c < C; ++c)
      if (c != p1 && z[b * C + c] > z[b * C + p2]) p2 = c;
    t[size_t(b)] = p2;
  }
  return t;
}

void random_init_delta(Tensor<float>& delta, Norm norm, float eps, Rng& rng) {
  int64_t B = delta.dim(0);
  int64_t M = delta.numel() / B;
  float* d = delta.data();
  if (norm == Norm::Linf) {
    for (int64_t i = 0, n = delta.numel(); i < n; ++i) d[i] = float(rng.uniform(-eps, eps));
  } else {
    for (int64_t b = 0; b < B; ++b) {
      float* db = d + b * M;
      double s = 0;
      for (int64_t i = 0; i < M; ++i) {
        db[i] = float(rng.normal());
        s += double(db[i]) * double(db[i]);
      }
      double nrm = std::sqrt(std::max(s, 1e-24));
      double radius = double(eps) * std::pow(rng.uniform(), 1.0 / double(M));
      for (int64_t i = 0; i < M; ++i) db[i] = float(double(db[i]) / nrm * radius);
    }
  }
}

bool all_finite(const float* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

}  // namespace

AttackResult pgd_attack(ModelUnderAttack& model, const Tensor<float>& x, const std::vector<int>& y,
                        const AttackSpec& spec, const std::vector<char>* update_mask) {
  spec.validate();
  if (spec.method != "pgd") throw ValueError("pgd_attack: spec method is '" + spec.method + "'");
  int64_t B = x.dim(0);
  int64_t M = x.numel() / B;
  if (int64_t(y.size()) != B) throw ShapeError("pgd: label count does not match batch");
  if (update_mask && int64_t(update_mask->size()) != B)
    throw ShapeError("pgd: update mask does not match batch");

  Tensor<float> loss_mask;
  if (update_mask) {
    loss_mask = Tensor<float>({B});
    for (int64_t b = 0; b < B; ++b) loss_mask.data()[b] = (*update_mask)[size_t(b)] ? 1.f : 0.f;
  }
  auto pin_masked = [&](Tensor<float>& dlt) {
    if (!update_mask) return;
    for (int64_t b = 0; b < B; ++b)
      if (!(*update_mask)[size_t(b)])
        std::fill(dlt.data() + b * M, dlt.data() + (b + 1) * M, 0.f);
  };

  std::vector<int> labels = y;
  if (spec.targeted) {
    Tensor<float> clean = model.eval_logits(x);
    labels = runner_up_targets(clean);
  }

  AttackResult best;
  best.delta = Tensor<float>(x.shape());
  best.success.assign(size_t(B), 0);
  best.adv_pred.assign(size_t(B), -1);
  best.per_sample_loss.assign(size_t(B), -std::numeric_limits<float>::infinity());
  std::vector<float> best_final(size_t(B), -std::numeric_limits<float>::infinity());
  std::vector<char> have(size_t(B), 0);

  Rng root(splitmix64(spec.seed ^ 0xa77ac4ULL));

  for (int r = 0; r < spec.restarts; ++r) {
    model.on_restart_begin();
    Rng rng = root.split(uint64_t(r));
    Tensor<float> delta(x.shape());
    if (spec.random_init) random_init_delta(delta, spec.norm, spec.epsilon, rng);
    delta = project(delta, spec.norm, spec.epsilon, x);
    pin_masked(delta);
    std::vector<float> mom(size_t(B * M), 0.f);

    Tape<float> tape;
    for (int t = 0; t < spec.steps; ++t) {
      delta.set_requires_grad(true);
      Tensor<float> loss_vec;
      {
        TapeScope<float> scope(tape);
        Tensor<float> x_adv = add(x, delta);
        Tensor<float> logits = model.forward_attack(x_adv);
        loss_vec = attack_loss_rows(logits, labels, spec.loss, spec.targeted);
        Tensor<float> total = update_mask ? sum(mul(loss_vec, loss_mask)) : sum(loss_vec);
        tape.backward(total);
      }
      const float* g = delta.grad();
      if (!g || !all_finite(g, B * M)) {
        // chain restarts from a fresh init; the event is recorded
        ++best.grad_anomalies;
        tape.clear();
        if (spec.random_init) random_init_delta(delta, spec.norm, spec.epsilon, rng);
        else std::fill(delta.data(), delta.data() + B * M, 0.f);
        delta = project(delta, spec.norm, spec.epsilon, x);
        pin_masked(delta);
        std::fill(mom.begin(), mom.end(), 0.f);
        model.on_attack_step(add(x, delta));
        continue;
      }
      // visited-iterate bookkeeping (ascending loss convention)
      for (int64_t b = 0; b < B; ++b)
        best.per_sample_loss[size_t(b)] = std::max(best.per_sample_loss[size_t(b)], loss_vec.data()[b]);

      for (size_t i = 0; i < mom.size(); ++i) mom[i] = spec.momentum * mom[i] + g[i];

      Tensor<float> next = delta.detached().clone();
      float* d = next.data();
      if (spec.norm == Norm::Linf) {
        for (int64_t i = 0; i < B * M; ++i) {
          float s = mom[size_t(i)];
          d[i] += spec.alpha * (s > 0.f ? 1.f : (s < 0.f ? -1.f : 0.f));
        }
      } else {
        for (int64_t b = 0; b < B; ++b) {
          double s = 0;
          for (int64_t i = 0; i < M; ++i) s += double(mom[size_t(b * M + i)]) * double(mom[size_t(b * M + i)]);
          double nrm = std::sqrt(s);
          if (nrm > 0) {
            float scale = float(double(spec.alpha) / nrm);
            for (int64_t i = 0; i < M; ++i) d[b * M + i] += scale * mom[size_t(b * M + i)];
          }
        }
      }
      delta = project(next, spec.norm, spec.epsilon, x);
      pin_masked(delta);
      tape.clear();
      model.on_attack_step(add(x, delta));  // the defense reacts to delta^t
    }

    // candidate evaluation: the defense evaluates the submission in full
    Tensor<float> x_adv = add(x, delta);
    Tensor<float> logits = model.eval_logits(x_adv);
    std::vector<int> pred = argmax_rows(logits);
    Tensor<float> final_loss;
    {
      NoTapeScope<float> guard;
      final_loss = attack_loss_rows(logits, labels, spec.loss, spec.targeted);
    }
    for (int64_t b = 0; b < B; ++b)
      best.per_sample_loss[size_t(b)] = std::max(best.per_sample_loss[size_t(b)], final_loss.data()[b]);

    for (int64_t b = 0; b < B; ++b) {
      // success reported as misclassification; targeted chains additionally
      // prefer candidates that reached the target
      bool wrong = pred[size_t(b)] != y[size_t(b)];
      bool goal = spec.targeted ? (pred[size_t(b)] == labels[size_t(b)]) : wrong;
      float score = final_loss.data()[b] + (goal ? 1e6f : 0.f) + (wrong ? 1e5f : 0.f);
      bool better = !have[size_t(b)] || score > best_final[size_t(b)];
      if (better) {
        have[size_t(b)] = 1;
        best.success[size_t(b)] = wrong;
        best_final[size_t(b)] = score;
        best.adv_pred[size_t(b)] = pred[size_t(b)];
        std::memcpy(best.delta.data() + b * M, delta.data() + b * M, size_t(M) * sizeof(float));
      }
    }
  }

  best.queries_or_steps = int64_t(spec.steps) * spec.restarts;
  check_feasible(best.delta, x, spec.norm, spec.epsilon);
  return best;
}

AttackResult square_attack(BlackBoxModel& model, const Tensor<float>& x, const std::vector<int>& y,
                           const AttackSpec& spec, int query_budget) {
  spec.validate();
  if (query_budget < 1) throw ValueError("square: query budget must be >= 1");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (int64_t(y.size()) != B) throw ShapeError("square: label count does not match batch");

  NoTapeScope<float> no_grad;  // structurally gradient-free
  Rng rng(splitmix64(spec.seed ^ 0x59a4eULL));
  float eps = spec.epsilon;

  // vertical stripe init: one sign per (sample, channel, column)
  Tensor<float> delta(x.shape());
  {
    float* d = delta.data();
    float mag = spec.norm == Norm::Linf ? eps : eps / std::sqrt(float(H));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t w = 0; w < W; ++w) {
          float v = float(rng.sign()) * mag;
          for (int64_t h = 0; h < H; ++h) d[((b * C + c) * H + h) * W + w] = v;
        }
  }
  delta = project(delta, spec.norm, eps, x);

  auto margins_of = [&](const Tensor<float>& dlt) {
    Tensor<float> logits = model.logits(add(x, dlt));
    Tensor<float> m = margin_rows(logits, y);
    return std::pair<std::vector<float>, std::vector<int>>(
        std::vector<float>(m.data(), m.data() + B), argmax_rows(logits));
  };

  auto [margin, pred] = margins_of(delta);
  std::vector<int64_t> queries(size_t(B), 1);
  std::vector<char> success(size_t(B), 0);
  for (int64_t b = 0; b < B; ++b) success[size_t(b)] = margin[size_t(b)] < 0.f;
  int64_t accepted = 0;

  int64_t max_side = std::max<int64_t>(1, int64_t(std::ceil(0.3 * double(H))));
  while (true) {
    bool any_active = false;
    int64_t qdone = 0;
    for (int64_t b = 0; b < B; ++b) {
      qdone = std::max(qdone, queries[size_t(b)]);
      if (!success[size_t(b)] && queries[size_t(b)] < query_budget) any_active = true;
    }
    if (!any_active) break;

    // patch side halves every 20% of the budget, floor 1
    double frac = double(qdone) / double(query_budget);
    int64_t side = std::max<int64_t>(1, int64_t(std::ceil(double(max_side) / std::pow(2.0, std::floor(frac / 0.2)))));

    Tensor<float> cand = delta.clone();
    std::vector<char> active(size_t(B), 0);
    for (int64_t b = 0; b < B; ++b) {
      if (success[size_t(b)] || queries[size_t(b)] >= query_budget) continue;
      active[size_t(b)] = 1;
      int64_t r0 = rng.randint(H - side + 1);
      int64_t c0 = rng.randint(W - side + 1);
      for (int64_t c = 0; c < C; ++c) {
        float v;
        if (spec.norm == Norm::Linf) {
          v = float(rng.sign()) * eps;
        } else {
          v = float(rng.sign()) * 2.f * eps / std::sqrt(float(side * side * C));
        }
        float* d = cand.data() + (b * C + c) * H * W;
        for (int64_t i = 0; i < side; ++i)
          for (int64_t j = 0; j < side; ++j) d[(r0 + i) * W + c0 + j] = v;
      }
    }
    cand = project(cand, spec.norm, eps, x);

    auto [cand_margin, cand_pred] = margins_of(cand);
    int64_t M = C * H * W;
    for (int64_t b = 0; b < B; ++b) {
      if (!active[size_t(b)]) continue;
      ++queries[size_t(b)];
      if (cand_margin[size_t(b)] < margin[size_t(b)]) {
        ++accepted;
        margin[size_t(b)] = cand_margin[size_t(b)];
        pred[size_t(b)] = cand_pred[size_t(b)];
        std::memcpy(delta.data() + b * M, cand.data() + b * M, size_t(M) * sizeof(float));
        if (margin[size_t(b)] < 0.f) success[size_t(b)] = 1;
      }
    }
  }

  AttackResult res;
  res.delta = delta;
  res.success = success;
  res.adv_pred = pred;
  res.per_sample_loss.resize(size_t(B));
  for (int64_t b = 0; b < B; ++b) res.per_sample_loss[size_t(b)] = -margin[size_t(b)];
  int64_t maxq = 0, total = 0;
  for (auto q : queries) {
    maxq = std::max(maxq, q);
    total += q;
  }
  res.queries_or_steps = maxq;
  if (accepted > total) throw ValueError("square: accepted more proposals than queries");
  check_feasible(res.delta, x, spec.norm, eps);
  return res;
}

EnsembleResult worst_case_ensemble(AttackTarget target, const Tensor<float>& x, const std::vector<int>& y,
                                   const std::vector<AttackSpec>& specs) {
  if (specs.empty()) throw ValueError("ensemble: no attacks given");
  for (const auto& s : specs) {
    if (s.norm != specs[0].norm || s.epsilon != specs[0].epsilon)
      throw ValueError("ensemble: attack '" + s.name + "' does not share norm/epsilon with '" +
                       specs[0].name + "'");
  }
  int64_t B = x.dim(0);
  int64_t M = x.numel() / B;

  EnsembleResult out;
  out.combined.delta = Tensor<float>(x.shape());
  out.combined.success.assign(size_t(B), 0);
  out.combined.adv_pred.assign(size_t(B), -1);
  out.combined.per_sample_loss.assign(size_t(B), -std::numeric_limits<float>::infinity());
  std::vector<char> decided(size_t(B), 0);

  for (const auto& spec : specs) {
    AttackResult r;
    if (spec.method == "square") {
      if (!target.black) throw ValueError("ensemble: square attack needs a black-box view of the target");
      r = square_attack(*target.black, x, y, spec, spec.query_budget);
    } else {
      if (!target.white) throw ValueError("ensemble: pgd needs a white-box view of the target");
      r = pgd_attack(*target.white, x, y, spec);
    }
    out.combined.queries_or_steps += r.queries_or_steps;
    out.combined.grad_anomalies += r.grad_anomalies;
    for (int64_t b = 0; b < B; ++b) {
      out.combined.per_sample_loss[size_t(b)] =
          std::max(out.combined.per_sample_loss[size_t(b)], r.per_sample_loss[size_t(b)]);
      // first flipping attack wins the sample; otherwise keep the first seen
      if (!decided[size_t(b)] || (!out.combined.success[size_t(b)] && r.success[size_t(b)])) {
        decided[size_t(b)] = 1;
        out.combined.success[size_t(b)] = r.success[size_t(b)];
        out.combined.adv_pred[size_t(b)] = r.adv_pred[size_t(b)];
        std::memcpy(out.combined.delta.data() + b * M, r.delta.data() + b * M, size_t(M) * sizeof(float));
        if (r.success[size_t(b)]) decided[size_t(b)] = 2;  // locked
      }
    }
    out.names.push_back(spec.name);
    out.members.push_back(std::move(r));
  }
  check_feasible(out.combined.delta, x, specs[0].norm, specs[0].epsilon);
  return out;
}

}  // namespace dentlab
