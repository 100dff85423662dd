#pragma once

// Run configuration: a flat "stage.key = value" text format with a default for
// every field and strict unknown-key rejection. The fully resolved config is
// dumped alongside every stage's outputs so a run can be reproduced from its
// artifacts alone. parse_config(dump_config(c)) round-trips exactly.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/io.hpp"
#include "rllr/model.hpp"
#include "rllr/synthlang.hpp"

namespace rllr {

enum class PpoMode : int32_t { rlhf = 0, rllr = 1, mixed = 2 };

inline const char* ppo_mode_name(PpoMode m) {
  switch (m) {
    case PpoMode::rlhf: return "rlhf";
    case PpoMode::rllr: return "rllr";
    case PpoMode::mixed: return "mixed";
  }
  throw std::invalid_argument("bad ppo mode");
}

inline std::optional<PpoMode> ppo_mode_from_name(std::string_view s) {
  if (s == "rlhf") return PpoMode::rlhf;
  if (s == "rllr") return PpoMode::rllr;
  if (s == "mixed") return PpoMode::mixed;
  return std::nullopt;
}

struct RunConfig {
  uint64_t seed = 7;
  std::vector<TaskId> tasks = {TaskId::polarity, TaskId::topic4, TaskId::rating};

  struct Data {
    int64_t n_train = 2000;
    int64_t n_test = 500;
    int64_t n_unsup = 2000;
    friend bool operator==(const Data&, const Data&) = default;
  } data;

  struct Model {
    int32_t width = 64;
    int32_t layers = 2;
    int32_t heads = 4;
    int32_t context_length = 128;
    double init_std = 0.02;
    friend bool operator==(const Model&, const Model&) = default;
  } model;

  struct Sft {
    double lr = 3e-4;
    int32_t batch_size = 32;
    int32_t epochs = 10;
    bool with_rationale = true;  // false = plain answer baseline (ANS ++ label)
    int32_t n_paraphrase = 4;
    friend bool operator==(const Sft&, const Sft&) = default;
  } sft;

  struct Pairs {
    int32_t k = 5;             // samples per prompt for ranked pairs
    double temperature = 0.8;  // sampling temperature for ranked pairs
    int32_t max_new = 64;      // decode budget per sample
    int32_t cap = 10;          // max ranked pairs kept per question
    int32_t n_label = 2;       // label-sensitive pairs requested per example
    int64_t n_prompts = 0;     // ranked-pair prompt budget; 0 = whole train pool
    friend bool operator==(const Pairs&, const Pairs&) = default;
  } pairs;

  struct Reward {
    double lr = 1e-4;
    int32_t batch_size = 16;
    int32_t label_epochs = 1;      // r over label-sensitive pairs
    int32_t rationale_epochs = 10; // r over judge-ranked pairs
    friend bool operator==(const Reward&, const Reward&) = default;
  } reward;

  struct Ppo {
    PpoMode mode = PpoMode::mixed;
    double lambda = std::numeric_limits<double>::quiet_NaN();  // NaN = probe
    double beta = 0.05;
    double clip_eps = 0.2;
    double value_clip = 0.2;
    double gamma = 1.0;
    double gae_lambda = 0.95;
    int32_t rollout_size = 32;
    int32_t epochs = 4;
    double lr = 1e-5;
    int32_t iterations = 60;
    int32_t max_new = 64;
    int32_t snapshot_every = 0;   // 0 = final checkpoint only
    int32_t probe_samples = 256;  // lambda percentile probe
    int32_t eval_every = 0;       // 0 = no scheduled accuracy column
    friend bool operator==(const Ppo&, const Ppo&) = default;
  } ppo;

  struct Eval {
    int32_t max_new = 64;
    friend bool operator==(const Eval&, const Eval&) = default;
  } eval;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    if (data.n_train < 0 || data.n_test < 0 || data.n_unsup < 0)
      throw ConfigError("data pool sizes must be nonnegative");
    if (tasks.empty()) throw ConfigError("tasks must be nonempty");
    ModelConfig mc{.vocab_size = 1, .context_length = model.context_length,
                   .width = model.width, .layers = model.layers, .heads = model.heads};
    try {
      mc.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("model block: ") + e.what());
    }
    if (!(model.init_std > 0.0)) throw ConfigError("model.init_std must be positive");
    if (!(sft.lr > 0.0) || sft.batch_size <= 0 || sft.epochs < 0)
      throw ConfigError("sft block: lr > 0, batch_size > 0, epochs >= 0 required");
    if (sft.n_paraphrase < 1 || sft.n_paraphrase > 4)
      throw ConfigError("sft.n_paraphrase must be in [1,4]");
    if (pairs.k < 2 || !(pairs.temperature > 0.0) || pairs.max_new <= 0 || pairs.cap <= 0 ||
        pairs.n_label < 1 || pairs.n_prompts < 0)
      throw ConfigError("pairs block: k >= 2, temperature > 0, positive budgets required");
    if (!(reward.lr > 0.0) || reward.batch_size <= 0 || reward.label_epochs < 0 ||
        reward.rationale_epochs < 0)
      throw ConfigError("reward block: lr > 0, batch_size > 0, epochs >= 0 required");
    if (std::isinf(ppo.lambda)) throw ConfigError("ppo.lambda must be finite or auto");
    if (!(ppo.beta >= 0.0)) throw ConfigError("ppo.beta must be >= 0");
    if (!(ppo.clip_eps > 0.0 && ppo.clip_eps < 1.0))
      throw ConfigError("ppo.clip_eps must be in (0,1)");
    if (!(ppo.value_clip > 0.0)) throw ConfigError("ppo.value_clip must be positive");
    if (!(ppo.gamma >= 0.0 && ppo.gamma <= 1.0)) throw ConfigError("ppo.gamma must be in [0,1]");
    if (!(ppo.gae_lambda >= 0.0 && ppo.gae_lambda <= 1.0))
      throw ConfigError("ppo.gae_lambda must be in [0,1]");
    if (ppo.rollout_size <= 0 || ppo.epochs <= 0 || !(ppo.lr > 0.0) || ppo.iterations < 0 ||
        ppo.max_new <= 0 || ppo.snapshot_every < 0 || ppo.probe_samples <= 0 ||
        ppo.eval_every < 0)
      throw ConfigError("ppo block: positive sizes and lr required");
    if (eval.max_new <= 0) throw ConfigError("eval.max_new must be positive");
  }
};

namespace detail {

struct ConfigField {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

inline std::string tasks_to_string(const std::vector<TaskId>& tasks) {
  std::string out;
  for (size_t i = 0; i < tasks.size(); ++i) {
    if (i) out += ',';
    out += task_name(tasks[i]);
  }
  return out;
}

inline std::vector<TaskId> tasks_from_string(std::string_view s) {
  std::vector<TaskId> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    const size_t comma = std::min(s.find(',', pos), s.size());
    const std::string_view piece = s.substr(pos, comma - pos);
    const auto t = task_from_name(piece);
    if (!t) throw ConfigError("unknown task: " + std::string(piece));
    for (TaskId seen : out)
      if (seen == *t) throw ConfigError("duplicate task: " + std::string(piece));
    out.push_back(*t);
    pos = comma + 1;
    if (comma == s.size()) break;
  }
  if (out.empty()) throw ConfigError("tasks list is empty");
  return out;
}

inline int64_t config_int(std::string_view key, std::string_view v, int64_t lo, int64_t hi) {
  bool ok = false;
  const int64_t x = parse_int(v, &ok);
  if (!ok || x < lo || x > hi)
    throw ConfigError(std::string(key) + ": expected integer in [" + format_int(lo) + "," +
                      format_int(hi) + "], got '" + std::string(v) + "'");
  return x;
}

inline double config_real(std::string_view key, std::string_view v) {
  bool ok = false;
  const double x = parse_double(v, &ok);
  if (!ok) throw ConfigError(std::string(key) + ": expected number, got '" + std::string(v) + "'");
  return x;
}

inline bool config_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(std::string(key) + ": expected true/false, got '" + std::string(v) + "'");
}

// Field table in dump order. std::map would alphabetize; a vector keeps the
// file grouped by stage.
inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  using F = ConfigField;
  auto ints = [](auto getter, auto setter, int64_t lo, int64_t hi, std::string key) {
    return std::pair<std::string, F>{
        key, F{[getter](const RunConfig& c) { return format_int(getter(c)); },
               [setter, lo, hi, key](RunConfig& c, std::string_view v) {
                 setter(c, config_int(key, v, lo, hi));
               }}};
  };
  auto reals = [](auto getter, auto setter, std::string key) {
    return std::pair<std::string, F>{
        key, F{[getter](const RunConfig& c) { return format_double(getter(c)); },
               [setter, key](RunConfig& c, std::string_view v) {
                 setter(c, config_real(key, v));
               }}};
  };
  static const std::vector<std::pair<std::string, F>> fields = {
      {"seed", F{[](const RunConfig& c) { return format_int(static_cast<int64_t>(c.seed)); },
                 [](RunConfig& c, std::string_view v) {
                   c.seed = static_cast<uint64_t>(
                       config_int("seed", v, 0, std::numeric_limits<int64_t>::max()));
                 }}},
      {"tasks", F{[](const RunConfig& c) { return tasks_to_string(c.tasks); },
                  [](RunConfig& c, std::string_view v) { c.tasks = tasks_from_string(v); }}},
      ints([](const RunConfig& c) { return c.data.n_train; },
           [](RunConfig& c, int64_t v) { c.data.n_train = v; }, 0, 1000000, "data.n_train"),
      ints([](const RunConfig& c) { return c.data.n_test; },
           [](RunConfig& c, int64_t v) { c.data.n_test = v; }, 0, 1000000, "data.n_test"),
      ints([](const RunConfig& c) { return c.data.n_unsup; },
           [](RunConfig& c, int64_t v) { c.data.n_unsup = v; }, 0, 1000000, "data.n_unsup"),
      ints([](const RunConfig& c) { return int64_t{c.model.width}; },
           [](RunConfig& c, int64_t v) { c.model.width = static_cast<int32_t>(v); }, 1, 4096,
           "model.width"),
      ints([](const RunConfig& c) { return int64_t{c.model.layers}; },
           [](RunConfig& c, int64_t v) { c.model.layers = static_cast<int32_t>(v); }, 1, 64,
           "model.layers"),
      ints([](const RunConfig& c) { return int64_t{c.model.heads}; },
           [](RunConfig& c, int64_t v) { c.model.heads = static_cast<int32_t>(v); }, 1, 64,
           "model.heads"),
      ints([](const RunConfig& c) { return int64_t{c.model.context_length}; },
           [](RunConfig& c, int64_t v) { c.model.context_length = static_cast<int32_t>(v); }, 8,
           8192, "model.context_length"),
      reals([](const RunConfig& c) { return c.model.init_std; },
            [](RunConfig& c, double v) { c.model.init_std = v; }, "model.init_std"),
      reals([](const RunConfig& c) { return c.sft.lr; },
            [](RunConfig& c, double v) { c.sft.lr = v; }, "sft.lr"),
      ints([](const RunConfig& c) { return int64_t{c.sft.batch_size}; },
           [](RunConfig& c, int64_t v) { c.sft.batch_size = static_cast<int32_t>(v); }, 1, 65536,
           "sft.batch_size"),
      ints([](const RunConfig& c) { return int64_t{c.sft.epochs}; },
           [](RunConfig& c, int64_t v) { c.sft.epochs = static_cast<int32_t>(v); }, 0, 100000,
           "sft.epochs"),
      {"sft.with_rationale",
       F{[](const RunConfig& c) { return std::string(c.sft.with_rationale ? "true" : "false"); },
         [](RunConfig& c, std::string_view v) {
           c.sft.with_rationale = config_bool("sft.with_rationale", v);
         }}},
      ints([](const RunConfig& c) { return int64_t{c.sft.n_paraphrase}; },
           [](RunConfig& c, int64_t v) { c.sft.n_paraphrase = static_cast<int32_t>(v); }, 1, 4,
           "sft.n_paraphrase"),
      ints([](const RunConfig& c) { return int64_t{c.pairs.k}; },
           [](RunConfig& c, int64_t v) { c.pairs.k = static_cast<int32_t>(v); }, 2, 64, "pairs.k"),
      reals([](const RunConfig& c) { return c.pairs.temperature; },
            [](RunConfig& c, double v) { c.pairs.temperature = v; }, "pairs.temperature"),
      ints([](const RunConfig& c) { return int64_t{c.pairs.max_new}; },
           [](RunConfig& c, int64_t v) { c.pairs.max_new = static_cast<int32_t>(v); }, 1, 8192,
           "pairs.max_new"),
      ints([](const RunConfig& c) { return int64_t{c.pairs.cap}; },
           [](RunConfig& c, int64_t v) { c.pairs.cap = static_cast<int32_t>(v); }, 1, 10000,
           "pairs.cap"),
      ints([](const RunConfig& c) { return int64_t{c.pairs.n_label}; },
           [](RunConfig& c, int64_t v) { c.pairs.n_label = static_cast<int32_t>(v); }, 1, 64,
           "pairs.n_label"),
      ints([](const RunConfig& c) { return c.pairs.n_prompts; },
           [](RunConfig& c, int64_t v) { c.pairs.n_prompts = v; }, 0, 1000000, "pairs.n_prompts"),
      reals([](const RunConfig& c) { return c.reward.lr; },
            [](RunConfig& c, double v) { c.reward.lr = v; }, "reward.lr"),
      ints([](const RunConfig& c) { return int64_t{c.reward.batch_size}; },
           [](RunConfig& c, int64_t v) { c.reward.batch_size = static_cast<int32_t>(v); }, 1,
           65536, "reward.batch_size"),
      ints([](const RunConfig& c) { return int64_t{c.reward.label_epochs}; },
           [](RunConfig& c, int64_t v) { c.reward.label_epochs = static_cast<int32_t>(v); }, 0,
           100000, "reward.label_epochs"),
      ints([](const RunConfig& c) { return int64_t{c.reward.rationale_epochs}; },
           [](RunConfig& c, int64_t v) { c.reward.rationale_epochs = static_cast<int32_t>(v); },
           0, 100000, "reward.rationale_epochs"),
      {"ppo.mode", F{[](const RunConfig& c) { return std::string(ppo_mode_name(c.ppo.mode)); },
                     [](RunConfig& c, std::string_view v) {
                       const auto m = ppo_mode_from_name(v);
                       if (!m) throw ConfigError("ppo.mode: expected rlhf/rllr/mixed, got '" +
                                                 std::string(v) + "'");
                       c.ppo.mode = *m;
                     }}},
      {"ppo.lambda",
       F{[](const RunConfig& c) {
           return std::isnan(c.ppo.lambda) ? std::string("auto") : format_double(c.ppo.lambda);
         },
         [](RunConfig& c, std::string_view v) {
           c.ppo.lambda = (v == "auto") ? std::numeric_limits<double>::quiet_NaN()
                                        : config_real("ppo.lambda", v);
         }}},
      reals([](const RunConfig& c) { return c.ppo.beta; },
            [](RunConfig& c, double v) { c.ppo.beta = v; }, "ppo.beta"),
      reals([](const RunConfig& c) { return c.ppo.clip_eps; },
            [](RunConfig& c, double v) { c.ppo.clip_eps = v; }, "ppo.clip_eps"),
      reals([](const RunConfig& c) { return c.ppo.value_clip; },
            [](RunConfig& c, double v) { c.ppo.value_clip = v; }, "ppo.value_clip"),
      reals([](const RunConfig& c) { return c.ppo.gamma; },
            [](RunConfig& c, double v) { c.ppo.gamma = v; }, "ppo.gamma"),
      reals([](const RunConfig& c) { return c.ppo.gae_lambda; },
            [](RunConfig& c, double v) { c.ppo.gae_lambda = v; }, "ppo.gae_lambda"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.rollout_size}; },
           [](RunConfig& c, int64_t v) { c.ppo.rollout_size = static_cast<int32_t>(v); }, 1,
           65536, "ppo.rollout_size"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.epochs}; },
           [](RunConfig& c, int64_t v) { c.ppo.epochs = static_cast<int32_t>(v); }, 1, 1000,
           "ppo.epochs"),
      reals([](const RunConfig& c) { return c.ppo.lr; },
            [](RunConfig& c, double v) { c.ppo.lr = v; }, "ppo.lr"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.iterations}; },
           [](RunConfig& c, int64_t v) { c.ppo.iterations = static_cast<int32_t>(v); }, 0,
           1000000, "ppo.iterations"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.max_new}; },
           [](RunConfig& c, int64_t v) { c.ppo.max_new = static_cast<int32_t>(v); }, 1, 8192,
           "ppo.max_new"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.snapshot_every}; },
           [](RunConfig& c, int64_t v) { c.ppo.snapshot_every = static_cast<int32_t>(v); }, 0,
           1000000, "ppo.snapshot_every"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.probe_samples}; },
           [](RunConfig& c, int64_t v) { c.ppo.probe_samples = static_cast<int32_t>(v); }, 1,
           100000, "ppo.probe_samples"),
      ints([](const RunConfig& c) { return int64_t{c.ppo.eval_every}; },
           [](RunConfig& c, int64_t v) { c.ppo.eval_every = static_cast<int32_t>(v); }, 0,
           1000000, "ppo.eval_every"),
      ints([](const RunConfig& c) { return int64_t{c.eval.max_new}; },
           [](RunConfig& c, int64_t v) { c.eval.max_new = static_cast<int32_t>(v); }, 1, 8192,
           "eval.max_new"),
  };
  return fields;
}

inline const ConfigField& config_field(std::string_view key) {
  for (const auto& [name, field] : config_fields())
    if (name == key) return field;
  throw ConfigError("unknown config key: " + std::string(key));
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Applies one "key = value" assignment (the CLI --set payload uses the same
// grammar as a config-file line).
inline void apply_config_line(RunConfig& cfg, std::string_view line) {
  const size_t eq = line.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("expected 'key = value', got '" + std::string(line) + "'");
  const std::string_view key = detail::trim(line.substr(0, eq));
  const std::string_view value = detail::trim(line.substr(eq + 1));
  if (key.empty()) throw ConfigError("empty key in '" + std::string(line) + "'");
  detail::config_field(key).set(cfg, value);
}

// Parses a whole config file on top of `base` (defaults unless told otherwise).
// '#' starts a comment; blank lines are skipped; anything else must be a
// well-formed assignment with a known key.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  int lineno = 0;
  for (const auto& raw : split_lines(text)) {
    ++lineno;
    std::string_view line = raw;
    const size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_config_line(base, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + format_int(lineno) + ": " + e.what());
    }
  }
  return base;
}

// Serializes every field (one per line, dump order = stage order). The output
// parses back to an equal config.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::config_fields()) {
    out += name;
    out += " = ";
    out += field.get(cfg);
    out += '\n';
  }
  return out;
}

// The model every stage instantiates: vocab size and head set vary by role,
// everything else comes from the config's model block.
inline ModelConfig model_config(const RunConfig& cfg, int32_t vocab_size, bool lm, bool value,
                                bool reward) {
  return ModelConfig{.vocab_size = vocab_size,
                     .context_length = cfg.model.context_length,
                     .width = cfg.model.width,
                     .layers = cfg.model.layers,
                     .heads = cfg.model.heads,
                     .head_lm = lm,
                     .head_value = value,
                     .head_reward = reward};
}

}  // namespace rllr
