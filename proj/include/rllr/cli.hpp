#pragma once

// Subcommand front-end over the pipeline stages. Every subcommand accepts
// --config (flat key = value file, strict) plus repeatable --set overrides;
// the fully resolved config is what the stage persists. Exit codes: 0 on
// success, 2 on a precondition refusal (missing/tampered inputs, existing
// outputs without --force, bad config), 1 on any other runtime error.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rllr/pipeline.hpp"

namespace rllr {
namespace detail {

inline RunConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& sets) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = parse_config(read_file(config_path));
  for (const std::string& line : sets) apply_config_line(cfg, line);
  cfg.validate();
  return cfg;
}

struct CommonOpts {
  std::string run;
  std::string config_path;
  std::vector<std::string> sets;
  bool force = false;
};

inline void add_common(CLI::App* cmd, CommonOpts& opts, bool with_run = true,
                       bool with_force = true) {
  if (with_run) cmd->add_option("--run", opts.run, "Run directory")->required();
  cmd->add_option("--config", opts.config_path, "Config file (key = value per line)");
  cmd->add_option("--set", opts.sets, "Override a config key, e.g. --set ppo.beta=0.1");
  if (with_force) cmd->add_flag("--force", opts.force, "Overwrite existing stage outputs");
}

}  // namespace detail

inline int cli_main(int argc, char** argv) {
  CLI::App app{"Desk-scale rationale-aware RL pipeline over synthetic NLU tasks"};
  app.require_subcommand(1);

  // gen-data takes --out as the run root plus direct count/seed overrides.
  auto* gen = app.add_subcommand("gen-data", "Generate train/test/unsupervised pools");
  detail::CommonOpts gen_opts;
  detail::add_common(gen, gen_opts, false);
  std::string gen_out, gen_task;
  int64_t gen_train = -1, gen_test = -1, gen_unsup = -1, gen_seed = -1;
  gen->add_option("--out", gen_out, "Run directory to create data/ under")->required();
  gen->add_option("--task", gen_task, "Restrict to one task (polarity|topic4|rating)");
  gen->add_option("--n-train", gen_train, "Training pool size");
  gen->add_option("--n-test", gen_test, "Test pool size");
  gen->add_option("--n-unsup", gen_unsup, "Unsupervised prompt pool size");
  gen->add_option("--seed", gen_seed, "Global seed");
  gen->callback([&] {
    RunConfig cfg = detail::resolve_config(gen_opts.config_path, gen_opts.sets);
    if (gen_train >= 0) cfg.data.n_train = gen_train;
    if (gen_test >= 0) cfg.data.n_test = gen_test;
    if (gen_unsup >= 0) cfg.data.n_unsup = gen_unsup;
    if (gen_seed >= 0) cfg.seed = static_cast<uint64_t>(gen_seed);
    std::optional<TaskId> only;
    if (!gen_task.empty()) {
      only = task_from_name(gen_task);
      if (!only) throw ConfigError("unknown task: " + gen_task);
    }
    cfg.validate();
    run_gen_data(RunPaths{gen_out}, cfg, gen_opts.force, only);
  });

  auto* sft = app.add_subcommand("train-sft", "Fine-tune the base model on oracle answers");
  detail::CommonOpts sft_opts;
  detail::add_common(sft, sft_opts);
  sft->callback([&] {
    run_train_sft(RunPaths{sft_opts.run},
                  detail::resolve_config(sft_opts.config_path, sft_opts.sets),
                  sft_opts.force);
  });

  auto* mp = app.add_subcommand("make-pairs", "Sample and rank candidate answers into pairs");
  detail::CommonOpts mp_opts;
  detail::add_common(mp, mp_opts);
  mp->callback([&] {
    run_make_pairs(RunPaths{mp_opts.run},
                   detail::resolve_config(mp_opts.config_path, mp_opts.sets),
                   mp_opts.force);
  });

  auto* lp = app.add_subcommand("gen-label-pairs", "Build label-sensitive pairs from oracles");
  detail::CommonOpts lp_opts;
  detail::add_common(lp, lp_opts);
  lp->callback([&] {
    run_gen_label_pairs(RunPaths{lp_opts.run},
                        detail::resolve_config(lp_opts.config_path, lp_opts.sets),
                        lp_opts.force);
  });

  auto* rm = app.add_subcommand("train-rm", "Train Bradley-Terry reward models");
  detail::CommonOpts rm_opts;
  detail::add_common(rm, rm_opts);
  std::string rm_kind = "both";
  rm->add_option("--kind", rm_kind, "Which reward model: label|rationale|both")
      ->check(CLI::IsMember({"label", "rationale", "both"}));
  rm->callback([&] {
    const RmKind kind = rm_kind == "label"       ? RmKind::label
                        : rm_kind == "rationale" ? RmKind::rationale
                                                 : RmKind::both;
    run_train_rm(RunPaths{rm_opts.run},
                 detail::resolve_config(rm_opts.config_path, rm_opts.sets), kind,
                 rm_opts.force);
  });

  auto* ppo = app.add_subcommand("train-ppo", "KL-penalized PPO from the SFT checkpoint");
  detail::CommonOpts ppo_opts;
  detail::add_common(ppo, ppo_opts);
  std::string ppo_mode;
  ppo->add_option("--mode", ppo_mode, "Reward mode: rlhf|rllr|mixed (default from config)")
      ->check(CLI::IsMember({"rlhf", "rllr", "mixed"}));
  ppo->callback([&] {
    const RunConfig cfg = detail::resolve_config(ppo_opts.config_path, ppo_opts.sets);
    const PpoMode mode = ppo_mode.empty() ? cfg.ppo.mode : *ppo_mode_from_name(ppo_mode);
    run_train_ppo(RunPaths{ppo_opts.run}, cfg, mode, ppo_opts.force);
  });

  auto* ev = app.add_subcommand("evaluate", "Greedy-decode the test set under all policies");
  detail::CommonOpts ev_opts;
  detail::add_common(ev, ev_opts, true, false);
  ev->callback([&] {
    run_evaluate(RunPaths{ev_opts.run},
                 detail::resolve_config(ev_opts.config_path, ev_opts.sets));
  });

  auto* rep = app.add_subcommand("report", "Verify the provenance chain and consolidate results");
  detail::CommonOpts rep_opts;
  detail::add_common(rep, rep_opts, true, false);
  rep->callback([&] {
    run_report(RunPaths{rep_opts.run},
               detail::resolve_config(rep_opts.config_path, rep_opts.sets));
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const PreconditionError& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rllr
