#pragma once

// Stage orchestration over a run directory:
//
//   runs/<name>/{data, sft, pairs, rm, ppo-<mode>, eval}
//
// Each stage reads only declared inputs, writes only into its own
// subdirectory, and leaves a manifest recording the resolved config hash plus
// the FNV hash of every input and output file. Downstream stages refuse to
// start when an input is missing or its bytes no longer match what the
// producing stage recorded; the report stage re-verifies the whole chain.
// A lock directory serializes writers on the run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rllr/checkpoint_io.hpp"
#include "rllr/config.hpp"
#include "rllr/eval.hpp"
#include "rllr/io.hpp"
#include "rllr/pairs.hpp"
#include "rllr/ppo.hpp"
#include "rllr/records.hpp"
#include "rllr/reward.hpp"
#include "rllr/sft.hpp"
#include "rllr/synthlang.hpp"
#include "rllr/vocab.hpp"

namespace rllr {

// --- layout --------------------------------------------------------------------

struct RunPaths {
  fs::path root;

  fs::path data_dir(TaskId t) const { return root / "data" / task_name(t); }
  fs::path sft_dir(TaskId t) const { return root / "sft" / task_name(t); }
  fs::path pairs_dir(TaskId t) const { return root / "pairs" / task_name(t); }
  fs::path rm_dir(TaskId t) const { return root / "rm" / task_name(t); }
  fs::path ppo_dir(PpoMode m, TaskId t) const {
    return root / (std::string("ppo-") + ppo_mode_name(m)) / task_name(t);
  }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path eval_task_dir(TaskId t) const { return eval_dir() / task_name(t); }
  fs::path lock_path() const { return root / ".lock"; }

  std::string rel(const fs::path& p) const {
    return fs::path(p).lexically_relative(root).generic_string();
  }
};

// Prevents two writers on one run directory. Implemented as an atomically
// created lock directory; released (removed) on destruction.
class RunLock {
 public:
  explicit RunLock(const RunPaths& run) : path_(run.lock_path()) {
    fs::create_directories(run.root);
    std::error_code ec;
    if (!fs::create_directory(path_, ec) || ec)
      throw PreconditionError("run directory is locked by another writer (" +
                              path_.string() + "); remove it if that writer is gone");
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// --- manifests -------------------------------------------------------------------

struct Manifest {
  std::string stage;
  uint64_t seed = 0;
  std::string config_hash;
  std::map<std::string, std::string> inputs;       // run-relative path -> hex64 hash
  std::map<std::string, std::string> outputs;      // run-relative path -> hex64 hash
  std::map<std::string, int64_t> diagnostics;      // stage-specific counters
};

inline void save_manifest(const Manifest& m, const fs::path& path) {
  json j{{"stage", m.stage},
         {"seed", m.seed},
         {"config_hash", m.config_hash},
         {"inputs", m.inputs},
         {"outputs", m.outputs},
         {"diagnostics", m.diagnostics}};
  write_file(path, j.dump(2) + "\n");
}

inline Manifest load_manifest(const fs::path& path) {
  const json j = json::parse(read_file(path));
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.diagnostics = j.at("diagnostics").get<std::map<std::string, int64_t>>();
  return m;
}

namespace detail {

inline std::string file_hash_hex(const fs::path& p) { return hex64(hash_file(p)); }

// Verifies one declared input: the file must exist and, if the producing
// stage's manifest is present, its bytes must still hash to what that stage
// recorded. Returns the current hash for the consumer's own manifest.
inline std::string verify_input(const RunPaths& run, const fs::path& input,
                                const fs::path& producer_manifest) {
  if (!fs::exists(input))
    throw PreconditionError("missing input: " + input.string() +
                            " (run the upstream stage first)");
  const std::string found = file_hash_hex(input);
  if (!fs::exists(producer_manifest))
    throw PreconditionError("missing manifest for input " + input.string() + ": " +
                            producer_manifest.string());
  const Manifest m = load_manifest(producer_manifest);
  const std::string rel = run.rel(input);
  const auto it = m.outputs.find(rel);
  if (it == m.outputs.end())
    throw PreconditionError("input " + rel + " is not an output recorded in " +
                            producer_manifest.string());
  if (it->second != found)
    throw PreconditionError("input hash mismatch for " + rel + ": expected " + it->second +
                            ", found " + found);
  return found;
}

inline void refuse_existing(std::span<const fs::path> outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs)
    if (fs::exists(p))
      throw PreconditionError("output already exists: " + p.string() +
                              " (pass --force to overwrite)");
}

inline void write_stage_config(const fs::path& dir, const std::string& name,
                               const RunConfig& cfg) {
  write_file(dir / (name + ".config.txt"), dump_config(cfg));
}

inline std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(dump_config(cfg))); }

inline std::vector<Example> load_examples(const fs::path& p) {
  return examples_from_jsonl(read_file(p));
}

}  // namespace detail

// --- gen-data ------------------------------------------------------------------------

// Disjoint train/test/unsupervised pools per task: ids are consecutive blocks,
// each pool drawn from its own derived stream.
inline void run_gen_data(const RunPaths& run, const RunConfig& cfg, bool force,
                         std::optional<TaskId> only_task = std::nullopt) {
  cfg.validate();
  RunLock lock(run);
  const Vocab& vocab = Vocab::canonical();
  const SynthContext ctx(vocab);

  std::vector<TaskId> tasks = only_task ? std::vector<TaskId>{*only_task} : cfg.tasks;
  for (TaskId task : tasks) {
    const fs::path dir = run.data_dir(task);
    const fs::path train_p = dir / "train.jsonl";
    const fs::path test_p = dir / "test.jsonl";
    const fs::path unsup_p = dir / "unsup.jsonl";
    const fs::path vocab_p = dir / "vocab.txt";
    const fs::path outs[] = {train_p, test_p, unsup_p, vocab_p};
    detail::refuse_existing(outs, force);
    fs::create_directories(dir);

    Manifest m;
    m.stage = "data";
    m.seed = cfg.seed;
    m.config_hash = detail::config_hash(cfg);

    const int64_t counts[] = {cfg.data.n_train, cfg.data.n_test, cfg.data.n_unsup};
    const fs::path* files[] = {&train_p, &test_p, &unsup_p};
    int64_t next_id = 0;
    for (int pool = 0; pool < 3; ++pool) {
      RngStream stream = make_stream(cfg.seed, stream_tag::data_gen,
                                     static_cast<uint64_t>(task), static_cast<uint64_t>(pool));
      std::vector<Example> pool_examples;
      pool_examples.reserve(static_cast<size_t>(counts[pool]));
      for (int64_t i = 0; i < counts[pool]; ++i)
        pool_examples.push_back(gen_example(ctx, task, next_id++, stream));
      write_file(*files[pool], examples_to_jsonl(pool_examples));
      m.outputs[run.rel(*files[pool])] = detail::file_hash_hex(*files[pool]);
    }
    write_file(vocab_p, vocab.to_text());
    m.outputs[run.rel(vocab_p)] = detail::file_hash_hex(vocab_p);
    detail::write_stage_config(dir, "data", cfg);
    save_manifest(m, dir / "data.manifest.json");
  }
}

// --- train-sft -------------------------------------------------------------------------

inline void run_train_sft(const RunPaths& run, const RunConfig& cfg, bool force) {
  cfg.validate();
  RunLock lock(run);
  const Vocab& vocab = Vocab::canonical();
  const SynthContext ctx(vocab);

  for (TaskId task : cfg.tasks) {
    const fs::path data_dir = run.data_dir(task);
    const fs::path train_p = data_dir / "train.jsonl";
    const fs::path dir = run.sft_dir(task);
    const fs::path ckpt_p = dir / "model.ckpt";
    const fs::path dataset_p = dir / "dataset.jsonl";
    const fs::path metrics_p = dir / "metrics.csv";
    const fs::path outs[] = {ckpt_p, dataset_p, metrics_p};
    detail::refuse_existing(outs, force);

    Manifest m;
    m.stage = "sft";
    m.seed = cfg.seed;
    m.config_hash = detail::config_hash(cfg);
    m.inputs[run.rel(train_p)] =
        detail::verify_input(run, train_p, data_dir / "data.manifest.json");

    const std::vector<Example> train = detail::load_examples(train_p);
    RngStream rationale_stream =
        make_stream(cfg.seed, stream_tag::rationale, static_cast<uint64_t>(task));
    const SftDataset ds =
        build_sft_dataset(ctx, train, rationale_stream, cfg.model.context_length,
                          cfg.sft.with_rationale, cfg.sft.n_paraphrase);
    if (ds.records.empty()) throw PreconditionError("train-sft: every record was rejected");

    RngStream init_stream =
        make_stream(cfg.seed, stream_tag::model_init, static_cast<uint64_t>(task));
    const Checkpoint init =
        init_checkpoint(model_config(cfg, vocab.size(), true, false, false), Role::policy,
                        vocab.fingerprint(), init_stream, cfg.model.init_std);
    const SftHyper hyper{.lr = cfg.sft.lr,
                         .batch_size = cfg.sft.batch_size,
                         .epochs = cfg.sft.epochs,
                         .seed = derive_seed(cfg.seed, {static_cast<uint64_t>(task)})};
    const TrainResult res = train_sft(init, ds.records, hyper);

    fs::create_directories(dir);
    save_checkpoint(res.ckpt, ckpt_p);
    write_file(dataset_p, sft_records_to_jsonl(ds.records));
    write_file(metrics_p, train_metrics_to_csv(res.metrics));
    m.outputs[run.rel(ckpt_p)] = detail::file_hash_hex(ckpt_p);
    m.outputs[run.rel(dataset_p)] = detail::file_hash_hex(dataset_p);
    m.outputs[run.rel(metrics_p)] = detail::file_hash_hex(metrics_p);
    m.diagnostics["rejected_overlong"] = ds.n_rejected;
    m.diagnostics["diverged"] = res.diverged ? 1 : 0;
    detail::write_stage_config(dir, "sft", cfg);
    save_manifest(m, dir / "sft.manifest.json");
  }
}

// --- make-pairs (ranked) ----------------------------------------------------------------

inline void run_make_pairs(const RunPaths& run, const RunConfig& cfg, bool force) {
  cfg.validate();
  RunLock lock(run);
  const SynthContext ctx(Vocab::canonical());

  for (TaskId task : cfg.tasks) {
    const fs::path train_p = run.data_dir(task) / "train.jsonl";
    const fs::path sft_p = run.sft_dir(task) / "model.ckpt";
    const fs::path dir = run.pairs_dir(task);
    const fs::path pairs_p = dir / "ranked_pairs.jsonl";
    const fs::path stats_p = dir / "ranked_stats.csv";
    const fs::path outs[] = {pairs_p, stats_p};
    detail::refuse_existing(outs, force);

    Manifest m;
    m.stage = "ranked_pairs";
    m.seed = cfg.seed;
    m.config_hash = detail::config_hash(cfg);
    m.inputs[run.rel(train_p)] =
        detail::verify_input(run, train_p, run.data_dir(task) / "data.manifest.json");
    m.inputs[run.rel(sft_p)] =
        detail::verify_input(run, sft_p, run.sft_dir(task) / "sft.manifest.json");

    const std::vector<Example> train = detail::load_examples(train_p);
    const Checkpoint policy = load_checkpoint(sft_p);
    const size_t n_prompts = cfg.pairs.n_prompts == 0
                                 ? train.size()
                                 : std::min(train.size(),
                                            static_cast<size_t>(cfg.pairs.n_prompts));

    std::vector<ComparisonPair> all;
    int64_t unparseable_questions = 0;
    int64_t dropped = 0;
    for (size_t i = 0; i < n_prompts; ++i) {
      const Example& ex = train[i];
      RngStream stream = make_stream(cfg.seed, stream_tag::pair_sampling,
                                     static_cast<uint64_t>(task), static_cast<uint64_t>(ex.id));
      const auto answers =
          sample_candidates(policy, render_question(ctx, ex), cfg.pairs.k,
                            cfg.pairs.temperature, cfg.pairs.max_new, stream);
      RankedPairsResult res = make_ranked_pairs(ctx, ex, answers, cfg.pairs.cap);
      unparseable_questions += res.all_unparseable ? 1 : 0;
      dropped += res.dropped_nongold_winner;
      for (auto& p : res.pairs) all.push_back(std::move(p));
    }

    fs::create_directories(dir);
    write_file(pairs_p, pairs_to_jsonl(all));
    // Independent validator pass over the bytes just written.
    validate_pairs(ctx, train, pairs_from_jsonl(read_file(pairs_p)));

    const PairStats stats = pair_stats(all);
    CsvWriter csv({"task", "total", "rationale_sensitive", "label_sensitive", "fraction"});
    csv.append_row({task_name(task), format_int(stats.total),
                    format_int(stats.rationale_sensitive), format_int(stats.label_sensitive),
                    stats.fraction ? format_double(*stats.fraction) : std::string()});
    csv.save(stats_p);

    m.outputs[run.rel(pairs_p)] = detail::file_hash_hex(pairs_p);
    m.outputs[run.rel(stats_p)] = detail::file_hash_hex(stats_p);
    m.diagnostics["unparseable_questions"] = unparseable_questions;
    m.diagnostics["dropped_nongold_winner"] = dropped;
    detail::write_stage_config(dir, "ranked", cfg);
    save_manifest(m, dir / "ranked.manifest.json");
  }
}

// --- gen-label-pairs -----------------------------------------------------------------------

// Label-sensitive pairs from the train pool (reward-model training corpus)
// and from the test pool (the held-out corpus rm_eval consumes); disjoint by
// example id since the pools are.
inline void run_gen_label_pairs(const RunPaths& run, const RunConfig& cfg, bool force) {
  cfg.validate();
  RunLock lock(run);
  const SynthContext ctx(Vocab::canonical());

  for (TaskId task : cfg.tasks) {
    const fs::path train_p = run.data_dir(task) / "train.jsonl";
    const fs::path test_p = run.data_dir(task) / "test.jsonl";
    const fs::path dir = run.pairs_dir(task);
    const fs::path pairs_p = dir / "label_pairs.jsonl";
    const fs::path holdout_p = dir / "label_holdout.jsonl";
    const fs::path stats_p = dir / "label_stats.csv";
    const fs::path outs[] = {pairs_p, holdout_p, stats_p};
    detail::refuse_existing(outs, force);

    Manifest m;
    m.stage = "label_pairs";
    m.seed = cfg.seed;
    m.config_hash = detail::config_hash(cfg);
    m.inputs[run.rel(train_p)] =
        detail::verify_input(run, train_p, run.data_dir(task) / "data.manifest.json");
    m.inputs[run.rel(test_p)] =
        detail::verify_input(run, test_p, run.data_dir(task) / "data.manifest.json");

    int64_t shortfall = 0;
    auto build = [&](const std::vector<Example>& pool) {
      std::vector<ComparisonPair> out;
      for (const Example& ex : pool) {
        RngStream stream = make_stream(cfg.seed, stream_tag::label_pairs,
                                       static_cast<uint64_t>(task),
                                       static_cast<uint64_t>(ex.id));
        LabelPairsResult res =
            make_label_pairs(ctx, ex, cfg.pairs.n_label, stream, cfg.sft.n_paraphrase);
        shortfall += res.shortfall;
        for (auto& p : res.pairs) out.push_back(std::move(p));
      }
      return out;
    };
    const std::vector<Example> train = detail::load_examples(train_p);
    const std::vector<Example> test = detail::load_examples(test_p);
    const std::vector<ComparisonPair> train_pairs = build(train);
    const std::vector<ComparisonPair> holdout_pairs = build(test);

    fs::create_directories(dir);
    write_file(pairs_p, pairs_to_jsonl(train_pairs));
    write_file(holdout_p, pairs_to_jsonl(holdout_pairs));
    validate_pairs(ctx, train, pairs_from_jsonl(read_file(pairs_p)));
    validate_pairs(ctx, test, pairs_from_jsonl(read_file(holdout_p)));

    const PairStats stats = pair_stats(train_pairs);
    CsvWriter csv({"task", "total", "rationale_sensitive", "label_sensitive", "fraction"});
    csv.append_row({task_name(task), format_int(stats.total),
                    format_int(stats.rationale_sensitive), format_int(stats.label_sensitive),
                    stats.fraction ? format_double(*stats.fraction) : std::string()});
    csv.save(stats_p);

    m.outputs[run.rel(pairs_p)] = detail::file_hash_hex(pairs_p);
    m.outputs[run.rel(holdout_p)] = detail::file_hash_hex(holdout_p);
    m.outputs[run.rel(stats_p)] = detail::file_hash_hex(stats_p);
    m.diagnostics["label_shortfall"] = shortfall;
    detail::write_stage_config(dir, "label", cfg);
    save_manifest(m, dir / "label.manifest.json");
  }
}

// --- train-rm --------------------------------------------------------------------------------

enum class RmKind { label, rationale, both };

inline void run_train_rm(const RunPaths& run, const RunConfig& cfg, RmKind kind, bool force) {
  cfg.validate();
  RunLock lock(run);

  const bool do_label = kind != RmKind::rationale;
  const bool do_rationale = kind != RmKind::label;
  for (TaskId task : cfg.tasks) {
    const fs::path sft_p = run.sft_dir(task) / "model.ckpt";
    const fs::path dir = run.rm_dir(task);

    auto train_one = [&](Role role) {
      const bool label = role == Role::reward_label;
      const std::string base = role_name(role);
      const fs::path pairs_p =
          run.pairs_dir(task) / (label ? "label_pairs.jsonl" : "ranked_pairs.jsonl");
      const fs::path pairs_manifest =
          run.pairs_dir(task) / (label ? "label.manifest.json" : "ranked.manifest.json");
      const fs::path holdout_p = run.pairs_dir(task) / "label_holdout.jsonl";
      const fs::path ckpt_p = dir / (base + ".ckpt");
      const fs::path metrics_p = dir / (base + "_metrics.csv");
      const fs::path eval_p = dir / (base + "_eval.csv");
      const fs::path outs[] = {ckpt_p, metrics_p, eval_p};
      detail::refuse_existing(outs, force);

      Manifest m;
      m.stage = "rm_" + std::string(label ? "label" : "rationale");
      m.seed = cfg.seed;
      m.config_hash = detail::config_hash(cfg);
      m.inputs[run.rel(sft_p)] =
          detail::verify_input(run, sft_p, run.sft_dir(task) / "sft.manifest.json");
      m.inputs[run.rel(pairs_p)] = detail::verify_input(run, pairs_p, pairs_manifest);
      m.inputs[run.rel(holdout_p)] =
          detail::verify_input(run, holdout_p, run.pairs_dir(task) / "label.manifest.json");

      const Checkpoint sft = load_checkpoint(sft_p);
      const std::vector<ComparisonPair> pairs = pairs_from_jsonl(read_file(pairs_p));
      const std::vector<ComparisonPair> holdout = pairs_from_jsonl(read_file(holdout_p));
      if (pairs.empty())
        throw PreconditionError("train-rm: empty pair corpus in " + pairs_p.string());

      const RmHyper hyper{
          .lr = cfg.reward.lr,
          .batch_size = cfg.reward.batch_size,
          .epochs = label ? cfg.reward.label_epochs : cfg.reward.rationale_epochs,
          .seed = derive_seed(cfg.seed,
                              {static_cast<uint64_t>(task), static_cast<uint64_t>(role)})};
      const TrainResult res = train_rm(sft, pairs, role, hyper);
      const double acc = rm_eval(res.ckpt, holdout);

      fs::create_directories(dir);
      save_checkpoint(res.ckpt, ckpt_p);
      write_file(metrics_p, train_metrics_to_csv(res.metrics));
      CsvWriter csv({"task", "n_pairs", "accuracy"});
      csv.append_row({task_name(task), format_int(static_cast<int64_t>(holdout.size())),
                      format_double(acc)});
      csv.save(eval_p);

      m.outputs[run.rel(ckpt_p)] = detail::file_hash_hex(ckpt_p);
      m.outputs[run.rel(metrics_p)] = detail::file_hash_hex(metrics_p);
      m.outputs[run.rel(eval_p)] = detail::file_hash_hex(eval_p);
      m.diagnostics["diverged"] = res.diverged ? 1 : 0;
      detail::write_stage_config(dir, base, cfg);
      save_manifest(m, dir / (m.stage + ".manifest.json"));
    };

    if (do_label) train_one(Role::reward_label);
    if (do_rationale) train_one(Role::reward_rationale);
  }
}

// --- train-ppo --------------------------------------------------------------------------------

inline void run_train_ppo(const RunPaths& run, const RunConfig& cfg, PpoMode mode, bool force) {
  cfg.validate();
  RunLock lock(run);
  const SynthContext ctx(Vocab::canonical());

  for (TaskId task : cfg.tasks) {
    const fs::path sft_p = run.sft_dir(task) / "model.ckpt";
    const fs::path unsup_p = run.data_dir(task) / "unsup.jsonl";
    const fs::path test_p = run.data_dir(task) / "test.jsonl";
    const fs::path dir = run.ppo_dir(mode, task);
    const fs::path ckpt_p = dir / "policy.ckpt";
    const fs::path metrics_p = dir / "metrics.csv";
    const fs::path lambda_p = dir / "lambda.txt";
    const fs::path outs[] = {ckpt_p, metrics_p, lambda_p};
    detail::refuse_existing(outs, force);

    Manifest m;
    m.stage = std::string("ppo_") + ppo_mode_name(mode);
    m.seed = cfg.seed;
    m.config_hash = detail::config_hash(cfg);
    m.inputs[run.rel(sft_p)] =
        detail::verify_input(run, sft_p, run.sft_dir(task) / "sft.manifest.json");
    m.inputs[run.rel(unsup_p)] =
        detail::verify_input(run, unsup_p, run.data_dir(task) / "data.manifest.json");

    const bool need_r1 = mode != PpoMode::rlhf;
    const bool need_r2 = mode != PpoMode::rllr;
    std::optional<Checkpoint> r1, r2;
    if (need_r1) {
      const fs::path p = run.rm_dir(task) / "reward_label.ckpt";
      m.inputs[run.rel(p)] =
          detail::verify_input(run, p, run.rm_dir(task) / "rm_label.manifest.json");
      r1 = load_checkpoint(p);
    }
    if (need_r2) {
      const fs::path p = run.rm_dir(task) / "reward_rationale.ckpt";
      m.inputs[run.rel(p)] =
          detail::verify_input(run, p, run.rm_dir(task) / "rm_rationale.manifest.json");
      r2 = load_checkpoint(p);
    }

    const Checkpoint sft = load_checkpoint(sft_p);
    const std::vector<Example> unsup = detail::load_examples(unsup_p);
    if (unsup.empty()) throw PreconditionError("train-ppo: empty unsupervised pool");
    std::vector<TokenSeq> prompts;
    prompts.reserve(unsup.size());
    for (const Example& ex : unsup) prompts.push_back(render_question(ctx, ex));

    PpoConfig pcfg = ppo_config_from(cfg, mode);
    pcfg.seed = derive_seed(cfg.seed, {static_cast<uint64_t>(task),
                                       0x70ull + static_cast<uint64_t>(mode)});

    fs::create_directories(dir);
    std::function<void(int64_t, const Checkpoint&)> snapshot_cb;
    if (cfg.ppo.snapshot_every > 0)
      snapshot_cb = [&](int64_t iter, const Checkpoint& ckpt) {
        save_checkpoint(ckpt, dir / ("snapshot_" + format_int(iter) + ".ckpt"));
      };
    std::function<double(const Checkpoint&)> eval_cb;
    std::vector<Example> test;
    if (cfg.ppo.eval_every > 0) {
      test = detail::load_examples(test_p);
      eval_cb = [&](const Checkpoint& ckpt) {
        return label_accuracy(ctx, ckpt, test, cfg.eval.max_new);
      };
    }

    const PpoTrainResult res =
        train_ppo(sft, r1 ? &*r1 : nullptr, r2 ? &*r2 : nullptr, prompts, pcfg, snapshot_cb,
                  eval_cb);

    save_checkpoint(res.policy, ckpt_p);
    write_file(metrics_p, ppo_metrics_to_csv(res.metrics));
    write_file(lambda_p, (std::isnan(res.lambda_used) ? std::string("unused")
                                                      : format_double(res.lambda_used)) +
                             "\n");
    m.outputs[run.rel(ckpt_p)] = detail::file_hash_hex(ckpt_p);
    m.outputs[run.rel(metrics_p)] = detail::file_hash_hex(metrics_p);
    m.outputs[run.rel(lambda_p)] = detail::file_hash_hex(lambda_p);
    m.diagnostics["aborted"] = res.aborted ? 1 : 0;
    detail::write_stage_config(dir, "ppo", cfg);
    save_manifest(m, dir / "ppo.manifest.json");
  }
}

// --- evaluate ----------------------------------------------------------------------------------

// Methods are the SFT policy plus whatever ppo-<mode> directories hold a
// trained policy; names in canonical order for deterministic reports.
inline std::vector<std::pair<std::string, fs::path>> available_policies(const RunPaths& run,
                                                                        TaskId task) {
  std::vector<std::pair<std::string, fs::path>> out;
  const fs::path sft_p = run.sft_dir(task) / "model.ckpt";
  if (fs::exists(sft_p)) out.emplace_back("sft", sft_p);
  for (PpoMode mode : {PpoMode::rlhf, PpoMode::rllr, PpoMode::mixed}) {
    const fs::path p = run.ppo_dir(mode, task) / "policy.ckpt";
    if (fs::exists(p)) out.emplace_back(ppo_mode_name(mode), p);
  }
  return out;
}

inline fs::path policy_manifest_for(const RunPaths& run, TaskId task, const std::string& method) {
  if (method == "sft") return run.sft_dir(task) / "sft.manifest.json";
  return run.ppo_dir(*ppo_mode_from_name(method), task) / "ppo.manifest.json";
}

// Greedy-decodes the test set under every available policy and persists the
// per-example records. Pure given its inputs, so reruns overwrite in place
// with identical bytes instead of refusing.
inline void run_evaluate(const RunPaths& run, const RunConfig& cfg) {
  cfg.validate();
  RunLock lock(run);
  const SynthContext ctx(Vocab::canonical());

  Manifest m;
  m.stage = "evaluate";
  m.seed = cfg.seed;
  m.config_hash = detail::config_hash(cfg);

  for (TaskId task : cfg.tasks) {
    const fs::path test_p = run.data_dir(task) / "test.jsonl";
    m.inputs[run.rel(test_p)] =
        detail::verify_input(run, test_p, run.data_dir(task) / "data.manifest.json");
    const std::vector<Example> test = detail::load_examples(test_p);
    const TaskSpec& spec = task_spec(task);

    const auto methods = available_policies(run, task);
    if (methods.empty())
      throw PreconditionError("evaluate: no policy checkpoints for task " +
                              std::string(task_name(task)));
    fs::create_directories(run.eval_task_dir(task));
    for (const auto& [method, ckpt_p] : methods) {
      m.inputs[run.rel(ckpt_p)] =
          detail::verify_input(run, ckpt_p, policy_manifest_for(run, task, method));
      const Checkpoint policy = load_checkpoint(ckpt_p);
      const auto decs = decode_records(ctx, policy, test, cfg.eval.max_new);
      const fs::path out_p = run.eval_task_dir(task) / ("decodes_" + method + ".jsonl");
      write_file(out_p, decodes_to_jsonl(decs, spec));
      m.outputs[run.rel(out_p)] = detail::file_hash_hex(out_p);
    }
  }
  fs::create_directories(run.eval_dir());
  detail::write_stage_config(run.eval_dir(), "evaluate", cfg);
  save_manifest(m, run.eval_dir() / "evaluate.manifest.json");
}

// --- report ------------------------------------------------------------------------------------

namespace detail {

// Every hash recorded by every present manifest must match the bytes on disk;
// one edited or half-written artifact fails the whole report.
inline void verify_run_chain(const RunPaths& run, const RunConfig& cfg) {
  std::vector<fs::path> manifests;
  for (TaskId task : cfg.tasks) {
    manifests.push_back(run.data_dir(task) / "data.manifest.json");
    manifests.push_back(run.sft_dir(task) / "sft.manifest.json");
    manifests.push_back(run.pairs_dir(task) / "ranked.manifest.json");
    manifests.push_back(run.pairs_dir(task) / "label.manifest.json");
    manifests.push_back(run.rm_dir(task) / "rm_label.manifest.json");
    manifests.push_back(run.rm_dir(task) / "rm_rationale.manifest.json");
    for (PpoMode mode : {PpoMode::rlhf, PpoMode::rllr, PpoMode::mixed})
      manifests.push_back(run.ppo_dir(mode, task) / "ppo.manifest.json");
  }
  manifests.push_back(run.eval_dir() / "evaluate.manifest.json");

  for (const fs::path& mp : manifests) {
    if (!fs::exists(mp)) continue;  // absent stage, not a broken one
    const Manifest m = load_manifest(mp);
    auto check = [&](const std::map<std::string, std::string>& entries, const char* kind) {
      for (const auto& [rel, expected] : entries) {
        const fs::path p = run.root / rel;
        if (!fs::exists(p))
          throw PreconditionError("report: " + m.stage + " " + kind + " vanished: " + rel);
        const std::string found = file_hash_hex(p);
        if (found != expected)
          throw PreconditionError("report: hash chain broken at " + rel + " (stage " +
                                  m.stage + "): expected " + expected + ", found " + found);
      }
    };
    check(m.inputs, "input");
    check(m.outputs, "output");
  }
}

struct MethodEval {
  std::string method;
  double accuracy = 0.0;
  double mean_judge = 0.0;
  std::optional<double> pearson;
};

}  // namespace detail

// Consolidates the run into results.csv, per-task winrate.csv, pairs.csv, and
// a plain-text summary. Reads only persisted artifacts (no decoding), verifies
// the provenance chain first, and is byte-idempotent on an unchanged run.
inline void run_report(const RunPaths& run, const RunConfig& cfg) {
  cfg.validate();
  RunLock lock(run);
  detail::verify_run_chain(run, cfg);
  const SynthContext ctx(Vocab::canonical());
  const std::string seeds = format_int(static_cast<int64_t>(cfg.seed));

  CsvWriter results({"task", "method", "metric", "value", "seeds"});
  CsvWriter pairs_csv({"task", "total", "rationale_sensitive", "label_sensitive", "fraction"});
  // No run name here: two runs of the same config must be byte-identical
  // wherever their directories live.
  std::string summary;
  summary += "seed: " + seeds + "\n";

  for (TaskId task : cfg.tasks) {
    const TaskSpec& spec = task_spec(task);
    const fs::path test_p = run.data_dir(task) / "test.jsonl";
    if (!fs::exists(test_p)) {
      summary += "\n[" + std::string(task_name(task)) + "] absent: no data stage\n";
      continue;
    }
    const std::vector<Example> test = detail::load_examples(test_p);
    summary += "\n[" + std::string(task_name(task)) + "]\n";

    // Policy metrics from the evaluate stage's decode records.
    std::vector<detail::MethodEval> evals;
    for (const auto& [method, ckpt_p] : available_policies(run, task)) {
      const fs::path dec_p = run.eval_task_dir(task) / ("decodes_" + method + ".jsonl");
      if (!fs::exists(dec_p)) continue;
      const auto decs = decodes_from_jsonl(read_file(dec_p), spec);
      if (decs.size() != test.size())
        throw PreconditionError("report: decode records do not cover the test set for " +
                                method);
      detail::MethodEval me;
      me.method = method;
      int64_t hits = 0;
      std::vector<double> scores, preds, golds;
      for (size_t i = 0; i < decs.size(); ++i) {
        if (decs[i].id != test[i].id)
          throw PreconditionError("report: decode/test id mismatch for " + method);
        if (decs[i].parsed && *decs[i].parsed == test[i].gold) ++hits;
        scores.push_back(decs[i].judge);
        if (spec.ordinal()) {
          const double mid = (spec.label_grid.front() + spec.label_grid.back()) / 2.0;
          preds.push_back(decs[i].parsed ? decs[i].parsed->ord : mid);
          golds.push_back(test[i].gold.ord);
        }
      }
      me.accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
      me.mean_judge = mean_judge_from_scores(scores);
      if (spec.ordinal() && preds.size() >= 2) me.pearson = pearson(preds, golds);
      evals.push_back(std::move(me));

      results.append_row({task_name(task), evals.back().method, "label_accuracy",
                          format_double(evals.back().accuracy), seeds});
      results.append_row({task_name(task), evals.back().method, "mean_judge",
                          format_double(evals.back().mean_judge), seeds});
      if (evals.back().pearson)
        results.append_row({task_name(task), evals.back().method, "pearson",
                            format_double(*evals.back().pearson), seeds});
    }
    for (const char* method : {"sft", "rlhf", "rllr", "mixed"}) {
      bool found = false;
      for (const auto& me : evals) found = found || me.method == method;
      if (!found) summary += "  " + std::string(method) + ": absent\n";
    }
    for (const auto& me : evals) {
      summary += "  " + me.method + ": accuracy " + format_double(me.accuracy) +
                 ", mean judge " + format_double(me.mean_judge);
      if (me.pearson) summary += ", pearson " + format_double(*me.pearson);
      summary += "\n";
    }

    // Reward-model holdout rows straight from the rm stage's eval files.
    for (const char* base : {"reward_label", "reward_rationale"}) {
      const fs::path eval_p = run.rm_dir(task) / (std::string(base) + "_eval.csv");
      if (!fs::exists(eval_p)) {
        summary += "  " + std::string(base) + ": absent\n";
        continue;
      }
      const auto lines = split_lines(read_file(eval_p));
      if (lines.size() < 2) throw PreconditionError("report: malformed " + eval_p.string());
      const std::string& row = lines[1];
      const size_t c1 = row.find(',');
      const size_t c2 = row.find(',', c1 + 1);
      results.append_row({task_name(task), base, "holdout_accuracy", row.substr(c2 + 1),
                          seeds});
      summary += "  " + std::string(base) + ": holdout accuracy " + row.substr(c2 + 1) + "\n";
    }

    // Pair distribution recomputed from the pair file, not copied from the
    // stage's own stats.
    const fs::path ranked_p = run.pairs_dir(task) / "ranked_pairs.jsonl";
    if (fs::exists(ranked_p)) {
      const auto pairs = pairs_from_jsonl(read_file(ranked_p));
      const PairStats st = pair_stats(pairs);
      pairs_csv.append_row({task_name(task), format_int(st.total),
                            format_int(st.rationale_sensitive),
                            format_int(st.label_sensitive),
                            st.fraction ? format_double(*st.fraction) : std::string()});
      summary += "  ranked pairs: " + format_int(st.total) + " total, rationale fraction " +
                 (st.fraction ? format_double(*st.fraction) : std::string("n/a")) + "\n";
    } else {
      summary += "  ranked pairs: absent\n";
    }

    // Win rates from the persisted judge scores, every method pair once.
    CsvWriter winrate({"method_a", "method_b", "win", "lose", "tie", "n"});
    std::map<std::string, std::vector<double>> score_by_method;
    for (const auto& [method, ckpt_p] : available_policies(run, task)) {
      const fs::path dec_p = run.eval_task_dir(task) / ("decodes_" + method + ".jsonl");
      if (!fs::exists(dec_p)) continue;
      std::vector<double> s;
      for (const auto& d : decodes_from_jsonl(read_file(dec_p), spec)) s.push_back(d.judge);
      score_by_method[method] = std::move(s);
    }
    const std::vector<std::string> canon = {"sft", "rlhf", "rllr", "mixed"};
    const JudgeConfig judge_cfg;
    for (size_t a = 0; a < canon.size(); ++a)
      for (size_t b = a + 1; b < canon.size(); ++b) {
        const auto ia = score_by_method.find(canon[a]);
        const auto ib = score_by_method.find(canon[b]);
        if (ia == score_by_method.end() || ib == score_by_method.end()) continue;
        const WinRate wr =
            win_rate_from_scores(ia->second, ib->second, judge_cfg.tie_eps);
        winrate.append_row({canon[a], canon[b], format_double(wr.win),
                            format_double(wr.lose), format_double(wr.tie),
                            format_int(wr.n)});
        summary += "  " + canon[a] + " vs " + canon[b] + ": win " + format_double(wr.win) +
                   ", lose " + format_double(wr.lose) + ", tie " + format_double(wr.tie) +
                   "\n";
      }
    if (!score_by_method.empty()) {
      fs::create_directories(run.eval_task_dir(task));
      winrate.save(run.eval_task_dir(task) / "winrate.csv");
    }
  }

  fs::create_directories(run.eval_dir());
  results.save(run.eval_dir() / "results.csv");
  pairs_csv.save(run.eval_dir() / "pairs.csv");
  write_file(run.eval_dir() / "summary.txt", summary);
  detail::write_stage_config(run.eval_dir(), "report", cfg);

  Manifest m;
  m.stage = "report";
  m.seed = cfg.seed;
  m.config_hash = detail::config_hash(cfg);
  for (const char* name : {"results.csv", "pairs.csv", "summary.txt"})
    m.outputs[run.rel(run.eval_dir() / name)] = detail::file_hash_hex(run.eval_dir() / name);
  save_manifest(m, run.eval_dir() / "report.manifest.json");
}

}  // namespace rllr
