#pragma once

// Supervised fine-tuning: builds (question, rationale-augmented answer)
// records from oracle examples and trains the policy with the masked
// next-token objective. Loss lands on answer positions only; the question is
// context, never target.

#include <cstdint>
#include <string>
#include <vector>

#include "rllr/checkpoint_io.hpp"
#include "rllr/io.hpp"
#include "rllr/losses.hpp"
#include "rllr/model.hpp"
#include "rllr/optim.hpp"
#include "rllr/records.hpp"
#include "rllr/rng.hpp"
#include "rllr/synthlang.hpp"

namespace rllr {

struct SftDataset {
  std::vector<SftRecord> records;
  int64_t n_rejected = 0;  // overlong (question + answer > context) drops
};

// One record per example: the oracle answer at the gold label, or the bare
// "<ans> label <eos>" when with_rationale is off (the plain-SFT baseline).
// Records too long for the context are dropped and counted; the default
// model/config combination must never trigger that.
inline SftDataset build_sft_dataset(const SynthContext& ctx, std::span<const Example> examples,
                                    RngStream& stream, int32_t context_length,
                                    bool with_rationale = true, int n_paraphrase = 4) {
  SftDataset ds;
  ds.records.reserve(examples.size());
  for (const Example& ex : examples) {
    SftRecord rec;
    rec.question = render_question(ctx, ex);
    if (with_rationale) {
      rec.answer = oracle_answer(ctx, ex, ex.gold, stream, n_paraphrase);
    } else {
      rec.answer.push_back(tok::ans);
      const TokenSeq lt = label_tokens(ctx, task_spec(ex.task), ex.gold);
      rec.answer.insert(rec.answer.end(), lt.begin(), lt.end());
      rec.answer.push_back(tok::eos);
    }
    if (static_cast<int64_t>(rec.question.size() + rec.answer.size()) > context_length) {
      ++ds.n_rejected;
      continue;
    }
    rec.mask.assign(rec.question.size(), 0);
    rec.mask.insert(rec.mask.end(), rec.answer.size(), 1);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

struct TrainMetricsRow {
  int32_t epoch = 0;
  int64_t step = 0;  // global step counter across epochs
  double loss = 0.0;
};

inline std::string train_metrics_to_csv(std::span<const TrainMetricsRow> rows) {
  CsvWriter csv({"epoch", "step", "loss"});
  for (const auto& r : rows)
    csv.append_row({format_int(r.epoch), format_int(r.step), format_double(r.loss)});
  return csv.str();
}

struct SftHyper {
  double lr = 3e-4;
  int32_t batch_size = 32;
  int32_t epochs = 10;
  uint64_t seed = 0;
};

struct TrainResult {
  Checkpoint ckpt;
  std::vector<TrainMetricsRow> metrics;
  bool diverged = false;
};

namespace detail {

inline SftItem sft_item_from_record(const SftRecord& rec) {
  SftItem item;
  item.tokens = rec.question;
  item.tokens.insert(item.tokens.end(), rec.answer.begin(), rec.answer.end());
  item.mask = rec.mask;
  return item;
}

inline bool params_finite(const Checkpoint& ckpt) {
  for (double p : ckpt.params)
    if (!std::isfinite(p)) return false;
  return true;
}

}  // namespace detail

// Adam on the masked next-token loss with a fresh per-epoch shuffle. Zero
// epochs returns the init bit-identically. A non-finite loss aborts training
// and hands back the last checkpoint that still evaluated finite.
inline TrainResult train_sft(const Checkpoint& init, std::span<const SftRecord> records,
                             const SftHyper& hyper) {
  if (records.empty()) throw PreconditionError("train_sft: empty dataset");
  if (!init.config.head_lm) throw PreconditionError("train_sft: init lacks the lm head");

  TrainResult res;
  res.ckpt = init;
  if (hyper.epochs == 0) return res;

  std::vector<double> last_good = res.ckpt.params;
  AdamState adam(res.ckpt.params.size());
  const AdamConfig adam_cfg{.lr = hyper.lr};
  std::vector<double> grad;
  std::vector<size_t> order(records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int64_t step = 0;
  for (int32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    RngStream shuffle = make_stream(hyper.seed, stream_tag::sft_shuffle,
                                    static_cast<uint64_t>(epoch));
    shuffle.shuffle(order);
    for (size_t begin = 0; begin < order.size(); begin += hyper.batch_size) {
      const size_t end = std::min(order.size(), begin + hyper.batch_size);
      LossBatch batch;
      batch.sft.reserve(end - begin);
      for (size_t i = begin; i < end; ++i)
        batch.sft.push_back(detail::sft_item_from_record(records[order[i]]));

      double loss = 0.0;
      try {
        loss = loss_and_grads(res.ckpt, batch, LossKind::sft, &grad);
      } catch (const NumericError&) {
        res.ckpt.params = last_good;
        res.diverged = true;
        return res;
      }
      last_good = res.ckpt.params;
      res.metrics.push_back({epoch, step, loss});
      adam_step(res.ckpt.params, grad, adam, adam_cfg);
      ++step;
    }
  }
  if (!detail::params_finite(res.ckpt)) {
    res.ckpt.params = last_good;
    res.diverged = true;
  }
  return res;
}

}  // namespace rllr
