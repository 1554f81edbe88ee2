#include "dentlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dentlab {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

class Binder {
 public:
  explicit Binder(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
      if (kv_.count(key)) throw ConfigError(key, "duplicate key");
      kv_[key] = val;
    }
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& dflt) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    consumed_.insert(key);
    return it->second;
  }

  bool boolean(const std::string& key, bool dflt) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    consumed_.insert(key);
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError(key, "expected true or false, got '" + it->second + "'");
  }

  double number(const std::string& key, double dflt) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError(key, "expected a number, got '" + it->second + "'");
    }
  }

  int64_t integer(const std::string& key, int64_t dflt) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError(key, "expected an integer, got '" + it->second + "'");
    }
  }

  uint64_t unsigned_int(const std::string& key, uint64_t dflt) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      uint64_t v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError(key, "expected an unsigned integer, got '" + it->second + "'");
    }
  }

  std::vector<double> number_list(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return {};
    consumed_.insert(key);
    std::vector<double> out;
    std::istringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      try {
        out.push_back(std::stod(tok));
      } catch (...) {
        throw ConfigError(key, "bad list element '" + tok + "'");
      }
    }
    return out;
  }

  // Index set present under prefix "name.<i>."
  int list_size(const std::string& prefix) const {
    int n = 0;
    while (true) {
      std::string p = prefix + "." + std::to_string(n) + ".";
      bool found = false;
      for (const auto& [k, v] : kv_)
        if (k.rfind(p, 0) == 0) found = true;
      if (!found) break;
      ++n;
    }
    return n;
  }

  void finish() const {
    for (const auto& [k, v] : kv_)
      if (!consumed_.count(k)) throw ConfigError(k, "unknown key");
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> consumed_;
};

std::string fmt_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", double(v));
  return buf;
}

const std::set<std::string>& known_scenario_kinds() {
  static const std::set<std::string> kinds{
      "static-static", "static-dent",        "dent-dent",     "mixed-batch", "batch-sweep",
      "step-sweep",    "norm-affine-ablation", "loss-ablation", "eps-sweep",   "profile"};
  return kinds;
}

}  // namespace

void RunConfig::validate() const {
  if (dataset.name != "synth" && dataset.name != "mnist" && dataset.name != "cifar10")
    throw ConfigError("dataset.name", "unknown dataset '" + dataset.name + "'");
  if (dataset.train_count < 1 || dataset.test_count < 1)
    throw ConfigError("dataset.train_count", "dataset sizes must be positive");
  if (dataset.name == "synth" && (dataset.classes < 2 || dataset.classes > 8))
    throw ConfigError("dataset.classes", "synth supports 2..8 classes");
  bool arch_ok = false;
  for (const auto& a : known_archs()) arch_ok = arch_ok || a == model_arch;
  if (!arch_ok) throw ConfigError("model.arch", "unknown arch '" + model_arch + "'");
  try {
    train.validate();
  } catch (const Error& e) {
    throw ConfigError("train", e.what());
  }
  for (size_t i = 0; i < attacks.size(); ++i) {
    try {
      attacks[i].validate();
    } catch (const Error& e) {
      throw ConfigError("attack." + std::to_string(i), e.what());
    }
  }
  try {
    defense.validate();
  } catch (const Error& e) {
    throw ConfigError("defense", e.what());
  }
  for (size_t i = 0; i < scenarios.size(); ++i) {
    const auto& sc = scenarios[i];
    std::string field = "scenario." + std::to_string(i);
    if (!known_scenario_kinds().count(sc.kind))
      throw ConfigError(field + ".kind", "unknown scenario kind '" + sc.kind + "'");
    if (sc.batch_size < 1) throw ConfigError(field + ".batch_size", "batch size must be >= 1");
    if (sc.kind == "mixed-batch" && !sc.one_of_16 && (sc.mix_ratio <= 0.0 || sc.mix_ratio > 1.0))
      throw ConfigError(field + ".mix_ratio", "mixed-batch needs 0 < mix_ratio <= 1 or one_of_16");
    if (sc.attacks != "all" && sc.attacks != "none") {
      std::istringstream ss(sc.attacks);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          size_t idx = size_t(std::stoul(trim(tok)));
          if (idx >= attacks.size()) throw std::out_of_range("");
        } catch (...) {
          throw ConfigError(field + ".attacks", "bad attack index '" + tok + "'");
        }
      }
    }
  }
  if (workers < 0) throw ConfigError("workers", "must be >= 0");
}

RunConfig parse_config_text(const std::string& text) {
  Binder b(text);
  RunConfig cfg;

  auto bind_enum = [](const std::string& key, auto fn) {
    try {
      return fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(key, e.what());
    }
  };

  cfg.seed = b.unsigned_int("seed", cfg.seed);
  cfg.out_dir = b.str("out_dir", cfg.out_dir);
  cfg.workers = int(b.integer("workers", cfg.workers));
  cfg.stable_output = b.boolean("stable_output", cfg.stable_output);

  cfg.dataset.name = b.str("dataset.name", cfg.dataset.name);
  cfg.dataset.dir = b.str("dataset.dir", cfg.dataset.dir);
  cfg.dataset.train_count = b.integer("dataset.train_count", cfg.dataset.train_count);
  cfg.dataset.test_count = b.integer("dataset.test_count", cfg.dataset.test_count);
  cfg.dataset.holdout_count = b.integer("dataset.holdout_count", cfg.dataset.holdout_count);
  cfg.dataset.classes = int(b.integer("dataset.classes", cfg.dataset.classes));

  cfg.model_arch = b.str("model.arch", cfg.model_arch);
  cfg.checkpoint = b.str("model.checkpoint", cfg.checkpoint);

  cfg.train.optimizer = b.str("train.optimizer", cfg.train.optimizer);
  cfg.train.lr = float(b.number("train.lr", double(cfg.train.lr)));
  cfg.train.momentum = float(b.number("train.momentum", double(cfg.train.momentum)));
  cfg.train.weight_decay = float(b.number("train.weight_decay", double(cfg.train.weight_decay)));
  cfg.train.epochs = int(b.integer("train.epochs", cfg.train.epochs));
  cfg.train.batch_size = int(b.integer("train.batch_size", cfg.train.batch_size));
  cfg.train.cosine_lr = b.boolean("train.cosine_lr", cfg.train.cosine_lr);
  cfg.train.seed = b.unsigned_int("train.seed", cfg.seed);
  if (b.boolean("train.adversarial", false)) {
    AttackSpec a;
    a.name = "train-pgd";
    a.norm = bind_enum("train.attack.norm", [&] { return norm_from_name(b.str("train.attack.norm", "linf")); });
    a.epsilon = float(b.number("train.attack.eps", 0.1));
    a.alpha = float(b.number("train.attack.alpha", 0.03));
    a.steps = int(b.integer("train.attack.steps", 7));
    a.restarts = 1;
    cfg.train.adversarial = a;
  }

  int n_attacks = b.list_size("attack");
  for (int i = 0; i < n_attacks; ++i) {
    std::string p = "attack." + std::to_string(i) + ".";
    AttackSpec a;
    a.name = b.str(p + "name", "attack" + std::to_string(i));
    a.method = b.str(p + "method", a.method);
    a.norm = bind_enum(p + "norm", [&] { return norm_from_name(b.str(p + "norm", norm_name(a.norm))); });
    a.epsilon = float(b.number(p + "eps", double(a.epsilon)));
    a.alpha = float(b.number(p + "alpha", double(a.alpha)));
    a.steps = int(b.integer(p + "steps", a.steps));
    a.restarts = int(b.integer(p + "restarts", a.restarts));
    a.momentum = float(b.number(p + "momentum", double(a.momentum)));
    a.loss = bind_enum(p + "loss", [&] { return attack_loss_from_name(b.str(p + "loss", attack_loss_name(a.loss))); });
    a.targeted = b.boolean(p + "targeted", a.targeted);
    a.query_budget = int(b.integer(p + "query_budget", a.query_budget));
    a.random_init = b.boolean(p + "random_init", a.random_init);
    cfg.attacks.push_back(a);
  }
  if (cfg.attacks.empty()) {
    AttackSpec a;  // benchmark default
    a.name = "pgd-ce";
    cfg.attacks.push_back(a);
  }

  cfg.defense.steps = int(b.integer("defense.steps", cfg.defense.steps));
  cfg.defense.model_lr = float(b.number("defense.model_lr", double(cfg.defense.model_lr)));
  cfg.defense.sigma_lr = float(b.number("defense.sigma_lr", double(cfg.defense.sigma_lr)));
  cfg.defense.granularity = bind_enum("defense.granularity", [&] {
    return granularity_from_name(b.str("defense.granularity", granularity_name(cfg.defense.granularity)));
  });
  cfg.defense.stats_mode = bind_enum("defense.stats_mode", [&] {
    return stats_mode_from_name(b.str("defense.stats_mode", stats_mode_name(cfg.defense.stats_mode)));
  });
  cfg.defense.adapt_affine = b.boolean("defense.adapt_affine", cfg.defense.adapt_affine);
  cfg.defense.adapt_sigma = b.boolean("defense.adapt_sigma", cfg.defense.adapt_sigma);
  cfg.defense.objective = bind_enum("defense.objective", [&] {
    return objective_from_name(b.str("defense.objective", objective_name(cfg.defense.objective)));
  });
  cfg.defense.optimizer = b.str("defense.optimizer", cfg.defense.optimizer);
  cfg.defense.reset = b.str("defense.reset", cfg.defense.reset);
  cfg.defense.seed = b.unsigned_int("defense.seed", cfg.seed);
  cfg.defense.maxinf_weight = float(b.number("defense.maxinf_weight", double(cfg.defense.maxinf_weight)));
  cfg.defense.grad_clip = float(b.number("defense.grad_clip", double(cfg.defense.grad_clip)));
  cfg.defense.final_pass_stats = bind_enum("defense.final_pass_stats", [&] {
    return final_pass_from_name(
        b.str("defense.final_pass_stats", final_pass_name(cfg.defense.final_pass_stats)));
  });
  cfg.defense.interleave = bind_enum("defense.interleave", [&] {
    return interleave_from_name(b.str("defense.interleave", interleave_name(cfg.defense.interleave)));
  });
  cfg.defense.sigma_init = float(b.number("defense.sigma_init", double(cfg.defense.sigma_init)));
  cfg.defense.sigma_per_sample = b.boolean("defense.sigma_per_sample", cfg.defense.sigma_per_sample);

  int n_sc = b.list_size("scenario");
  for (int i = 0; i < n_sc; ++i) {
    std::string p = "scenario." + std::to_string(i) + ".";
    ScenarioSpec sc;
    sc.kind = b.str(p + "kind", sc.kind);
    sc.attacks = b.str(p + "attacks", sc.attacks);
    sc.batch_size = int(b.integer(p + "batch_size", sc.batch_size));
    sc.mix_ratio = b.number(p + "mix_ratio", sc.mix_ratio);
    sc.one_of_16 = b.boolean(p + "one_of_16", sc.one_of_16);
    sc.num_batches = int(b.integer(p + "num_batches", sc.num_batches));
    sc.sweep_values = b.number_list(p + "sweep_values");
    cfg.scenarios.push_back(sc);
  }
  if (cfg.scenarios.empty()) cfg.scenarios.push_back(ScenarioSpec{});

  b.finish();
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileMissingError("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream o;
  o << "seed = " << cfg.seed << "\n";
  o << "out_dir = " << cfg.out_dir << "\n";
  o << "workers = " << cfg.workers << "\n";
  o << "stable_output = " << (cfg.stable_output ? "true" : "false") << "\n";
  o << "dataset.name = " << cfg.dataset.name << "\n";
  o << "dataset.dir = " << cfg.dataset.dir << "\n";
  o << "dataset.train_count = " << cfg.dataset.train_count << "\n";
  o << "dataset.test_count = " << cfg.dataset.test_count << "\n";
  o << "dataset.holdout_count = " << cfg.dataset.holdout_count << "\n";
  o << "dataset.classes = " << cfg.dataset.classes << "\n";
  o << "model.arch = " << cfg.model_arch << "\n";
  o << "model.checkpoint = " << cfg.checkpoint << "\n";
  o << "train.optimizer = " << cfg.train.optimizer << "\n";
  o << "train.lr = " << fmt_float(cfg.train.lr) << "\n";
  o << "train.momentum = " << fmt_float(cfg.train.momentum) << "\n";
  o << "train.weight_decay = " << fmt_float(cfg.train.weight_decay) << "\n";
  o << "train.epochs = " << cfg.train.epochs << "\n";
  o << "train.batch_size = " << cfg.train.batch_size << "\n";
  o << "train.cosine_lr = " << (cfg.train.cosine_lr ? "true" : "false") << "\n";
  o << "train.seed = " << cfg.train.seed << "\n";
  o << "train.adversarial = " << (cfg.train.adversarial ? "true" : "false") << "\n";
  if (cfg.train.adversarial) {
    o << "train.attack.norm = " << norm_name(cfg.train.adversarial->norm) << "\n";
    o << "train.attack.eps = " << fmt_float(cfg.train.adversarial->epsilon) << "\n";
    o << "train.attack.alpha = " << fmt_float(cfg.train.adversarial->alpha) << "\n";
    o << "train.attack.steps = " << cfg.train.adversarial->steps << "\n";
  }
  for (size_t i = 0; i < cfg.attacks.size(); ++i) {
    const auto& a = cfg.attacks[i];
    std::string p = "attack." + std::to_string(i) + ".";
    o << p << "name = " << a.name << "\n";
    o << p << "method = " << a.method << "\n";
    o << p << "norm = " << norm_name(a.norm) << "\n";
    o << p << "eps = " << fmt_float(a.epsilon) << "\n";
    o << p << "alpha = " << fmt_float(a.alpha) << "\n";
    o << p << "steps = " << a.steps << "\n";
    o << p << "restarts = " << a.restarts << "\n";
    o << p << "momentum = " << fmt_float(a.momentum) << "\n";
    o << p << "loss = " << attack_loss_name(a.loss) << "\n";
    o << p << "targeted = " << (a.targeted ? "true" : "false") << "\n";
    o << p << "query_budget = " << a.query_budget << "\n";
    o << p << "random_init = " << (a.random_init ? "true" : "false") << "\n";
  }
  o << "defense.steps = " << cfg.defense.steps << "\n";
  o << "defense.model_lr = " << fmt_float(cfg.defense.model_lr) << "\n";
  o << "defense.sigma_lr = " << fmt_float(cfg.defense.sigma_lr) << "\n";
  o << "defense.granularity = " << granularity_name(cfg.defense.granularity) << "\n";
  o << "defense.stats_mode = " << stats_mode_name(cfg.defense.stats_mode) << "\n";
  o << "defense.adapt_affine = " << (cfg.defense.adapt_affine ? "true" : "false") << "\n";
  o << "defense.adapt_sigma = " << (cfg.defense.adapt_sigma ? "true" : "false") << "\n";
  o << "defense.objective = " << objective_name(cfg.defense.objective) << "\n";
  o << "defense.optimizer = " << cfg.defense.optimizer << "\n";
  o << "defense.reset = " << cfg.defense.reset << "\n";
  o << "defense.seed = " << cfg.defense.seed << "\n";
  o << "defense.maxinf_weight = " << fmt_float(cfg.defense.maxinf_weight) << "\n";
  o << "defense.grad_clip = " << fmt_float(cfg.defense.grad_clip) << "\n";
  o << "defense.final_pass_stats = " << final_pass_name(cfg.defense.final_pass_stats) << "\n";
  o << "defense.interleave = " << interleave_name(cfg.defense.interleave) << "\n";
  o << "defense.sigma_init = " << fmt_float(cfg.defense.sigma_init) << "\n";
  o << "defense.sigma_per_sample = " << (cfg.defense.sigma_per_sample ? "true" : "false") << "\n";
  for (size_t i = 0; i < cfg.scenarios.size(); ++i) {
    const auto& sc = cfg.scenarios[i];
    std::string p = "scenario." + std::to_string(i) + ".";
    o << p << "kind = " << sc.kind << "\n";
    o << p << "attacks = " << sc.attacks << "\n";
    o << p << "batch_size = " << sc.batch_size << "\n";
    o << p << "mix_ratio = " << fmt_float(float(sc.mix_ratio)) << "\n";
    o << p << "one_of_16 = " << (sc.one_of_16 ? "true" : "false") << "\n";
    o << p << "num_batches = " << sc.num_batches << "\n";
    if (!sc.sweep_values.empty()) {
      o << p << "sweep_values = ";
      for (size_t v = 0; v < sc.sweep_values.size(); ++v)
        o << (v ? "," : "") << fmt_float(float(sc.sweep_values[v]));
      o << "\n";
    }
  }
  return o.str();
}

std::vector<AttackSpec> scenario_attacks(const RunConfig& cfg, const ScenarioSpec& sc) {
  if (sc.attacks == "none") return {};
  if (sc.attacks == "all") return cfg.attacks;
  std::vector<AttackSpec> out;
  std::istringstream ss(sc.attacks);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    out.push_back(cfg.attacks.at(std::stoul(tok)));
  }
  return out;
}

}  // namespace dentlab
