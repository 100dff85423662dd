#pragma once

// Reward models: a scalar head on the policy trunk trained on comparison
// pairs with the pairwise preference objective -log sigmoid(r_chosen -
// r_rejected). Two roles share this code path — one model trained on
// label-sensitive pairs, one on judge-ranked (mostly rationale-sensitive)
// pairs. Evaluation is margin-sign accuracy on held-out label pairs.

#include <cstdint>
#include <vector>

#include "rllr/losses.hpp"
#include "rllr/model.hpp"
#include "rllr/optim.hpp"
#include "rllr/records.hpp"
#include "rllr/rng.hpp"
#include "rllr/sft.hpp"

namespace rllr {

// Preference probability of the chosen item, computed through the stable
// sigmoid of the margin rather than the naive exponential ratio.
inline double bt_prob(double r_chosen, double r_rejected) {
  if (!std::isfinite(r_chosen) || !std::isfinite(r_rejected))
    throw PreconditionError("bt_prob: non-finite reward");
  return detail::sigmoid(r_chosen - r_rejected);
}

struct RmHyper {
  double lr = 1e-4;
  int32_t batch_size = 16;
  int32_t epochs = 1;
  uint64_t seed = 0;
};

namespace detail {

inline BtItem bt_item_from_pair(const ComparisonPair& pair) {
  BtItem item;
  item.chosen = pair.question;
  item.chosen.insert(item.chosen.end(), pair.chosen.begin(), pair.chosen.end());
  item.rejected = pair.question;
  item.rejected.insert(item.rejected.end(), pair.rejected.begin(), pair.rejected.end());
  return item;
}

}  // namespace detail

// Trains a reward model from an SFT trunk: the lm head is dropped, a
// zero-initialized reward head is attached (so the first batch's loss is
// exactly ln 2), and Adam minimizes the pairwise preference loss. Zero epochs
// returns the re-headed init untouched; a non-finite loss aborts with the last
// finite checkpoint.
inline TrainResult train_rm(const Checkpoint& init, std::span<const ComparisonPair> pairs,
                            Role role, const RmHyper& hyper) {
  if (pairs.empty()) throw PreconditionError("train_rm: empty pair set");
  if (role != Role::reward_label && role != Role::reward_rationale)
    throw PreconditionError("train_rm: role must be a reward role");

  TrainResult res;
  res.ckpt = with_heads(init, /*lm=*/false, /*value=*/false, /*reward=*/true, role);
  if (hyper.epochs == 0) return res;

  std::vector<double> last_good = res.ckpt.params;
  AdamState adam(res.ckpt.params.size());
  const AdamConfig adam_cfg{.lr = hyper.lr};
  std::vector<double> grad;
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int64_t step = 0;
  for (int32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    RngStream shuffle =
        make_stream(hyper.seed, stream_tag::rm_train, static_cast<uint64_t>(epoch));
    shuffle.shuffle(order);
    for (size_t begin = 0; begin < order.size(); begin += hyper.batch_size) {
      const size_t end = std::min(order.size(), begin + hyper.batch_size);
      LossBatch batch;
      batch.bt.reserve(end - begin);
      for (size_t i = begin; i < end; ++i)
        batch.bt.push_back(detail::bt_item_from_pair(pairs[order[i]]));

      double loss = 0.0;
      try {
        loss = loss_and_grads(res.ckpt, batch, LossKind::bt, &grad);
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

// Scalar rewards for (question ++ chosen, question ++ rejected) of one pair.
inline std::pair<double, double> rm_pair_scores(const Checkpoint& rm,
                                                const ComparisonPair& pair) {
  const BtItem item = detail::bt_item_from_pair(pair);
  return {forward(rm, item.chosen).reward, forward(rm, item.rejected).reward};
}

// Ordering accuracy of score pairs: a win when chosen outscores rejected, half
// credit on an exact tie (a zero-head model scores 0.5 across the board).
inline double accuracy_from_scores(std::span<const std::pair<double, double>> scores) {
  if (scores.empty()) throw PreconditionError("accuracy_from_scores: no pairs");
  double hits = 0.0;
  for (const auto& [rc, rr] : scores) {
    if (rc > rr) hits += 1.0;
    else if (rc == rr) hits += 0.5;
  }
  return hits / static_cast<double>(scores.size());
}

// Fraction of holdout pairs the model orders correctly. The holdout protocol
// (label-sensitive pairs, example ids disjoint from training) is the caller's
// contract; this function is a pure score-and-count.
inline double rm_eval(const Checkpoint& rm, std::span<const ComparisonPair> pairs) {
  if (!rm.config.head_reward) throw PreconditionError("rm_eval: checkpoint lacks a reward head");
  std::vector<std::pair<double, double>> scores;
  scores.reserve(pairs.size());
  for (const auto& pair : pairs) scores.push_back(rm_pair_scores(rm, pair));
  return accuracy_from_scores(scores);
}

}  // namespace rllr
