#pragma once

// Synthetic micro-NLU task suite: three classification tasks over a closed
// vocabulary whose ground-truth evidence (per-family token counts) is fully
// observable. That makes two things programmatic that normally need a human
// or a large model: writing a rationale that argues for an arbitrary label,
// and judging rationale quality.
//
// Tasks:
//   polarity — scored tokens from the bright/gloom families; label is the
//              majority polarity (ties impossible by construction).
//   topic4   — scored tokens from four topic families; label is the unique
//              argmax family (resampled until unique).
//   rating   — exactly 10 scored tokens from ups/downs; label is ups/2 on
//              the 0.5 grid, rendered with three decimals ("2.500").
//
// An answer is `rationale ++ ANS ++ label ++ EOS`. The rationale is a chain
// of claims, one per evidence family: <verb> <count digits> <family name>,
// joined by connector words and closed with a conclusion word. The judge
// parses those claims back out and scores factuality, internal consistency,
// label correctness, coverage, and length.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/rng.hpp"
#include "rllr/vocab.hpp"

namespace rllr {

// ---------------------------------------------------------------------------
// Tasks and labels
// ---------------------------------------------------------------------------

enum class TaskId : int32_t { polarity = 0, topic4 = 1, rating = 2 };
inline constexpr int kNumTasks = 3;

inline const char* task_name(TaskId t) {
  switch (t) {
    case TaskId::polarity: return "polarity";
    case TaskId::topic4: return "topic4";
    case TaskId::rating: return "rating";
  }
  throw std::invalid_argument("bad task id");
}

inline std::optional<TaskId> task_from_name(std::string_view s) {
  if (s == "polarity") return TaskId::polarity;
  if (s == "topic4") return TaskId::topic4;
  if (s == "rating") return TaskId::rating;
  return std::nullopt;
}

// A label is either a categorical index into the task's label names or an
// ordinal value on the task's grid. Grid values are exact multiples of 0.5,
// so double equality is exact.
struct Label {
  int32_t cat = -1;
  double ord = 0.0;

  static Label categorical(int32_t i) { return Label{i, 0.0}; }
  static Label ordinal(double v) { return Label{-1, v}; }
  bool is_ordinal() const { return cat < 0; }
  friend bool operator==(const Label&, const Label&) = default;
};

struct TaskSpec {
  TaskId id;
  std::string name;
  std::array<std::string_view, 2> preamble;
  std::vector<std::string_view> families;     // evidence families, canonical order
  std::vector<std::string_view> label_names;  // categorical tasks
  std::vector<double> label_grid;             // ordinal tasks

  bool ordinal() const { return !label_grid.empty(); }
  int n_families() const { return static_cast<int>(families.size()); }
  int n_labels() const {
    return ordinal() ? static_cast<int>(label_grid.size())
                     : static_cast<int>(label_names.size());
  }
  Label label_at(int i) const {
    return ordinal() ? Label::ordinal(label_grid[static_cast<size_t>(i)])
                     : Label::categorical(i);
  }
};

inline const TaskSpec& task_spec(TaskId id) {
  static const std::array<TaskSpec, kNumTasks> specs = [] {
    std::array<TaskSpec, kNumTasks> s;
    s[0] = TaskSpec{TaskId::polarity,
                    "polarity",
                    {"classify", "mood"},
                    {"bright", "gloom"},
                    {"positive", "negative"},
                    {}};
    s[1] = TaskSpec{TaskId::topic4,
                    "topic4",
                    {"classify", "topic"},
                    {"arts", "sports", "trade", "science"},
                    {"arts", "sports", "trade", "science"},
                    {}};
    std::vector<double> grid;
    for (int i = 0; i <= 10; ++i) grid.push_back(static_cast<double>(i) * 0.5);
    s[2] = TaskSpec{TaskId::rating, "rating", {"rate", "review"}, {"ups", "downs"}, {}, grid};
    return s;
  }();
  return specs[static_cast<size_t>(id)];
}

inline std::string label_to_string(const TaskSpec& spec, const Label& label) {
  if (spec.ordinal()) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", label.ord);
    return buf;
  }
  return std::string(spec.label_names[static_cast<size_t>(label.cat)]);
}

inline bool label_in_space(const TaskSpec& spec, const Label& label) {
  if (spec.ordinal()) {
    if (!label.is_ordinal()) return false;
    return std::find(spec.label_grid.begin(), spec.label_grid.end(), label.ord) !=
           spec.label_grid.end();
  }
  return !label.is_ordinal() && label.cat >= 0 && label.cat < spec.n_labels();
}

// ---------------------------------------------------------------------------
// Resolved token ids for the templates (built once per vocab)
// ---------------------------------------------------------------------------

struct SynthContext {
  const Vocab* vocab = nullptr;
  std::vector<Token> verbs, connectors, conclusions, filler;

  struct TaskIds {
    std::vector<Token> preamble;
    std::vector<Token> family_name;
    std::vector<std::vector<Token>> family_words;
    std::vector<Token> label_token;  // categorical label symbols
  };
  std::array<TaskIds, kNumTasks> task;

  explicit SynthContext(const Vocab& v) : vocab(&v) {
    auto resolve = [&v](std::span<const std::string_view> words) {
      std::vector<Token> out;
      out.reserve(words.size());
      for (auto w : words) out.push_back(v.id(w));
      return out;
    };
    verbs = resolve(lexicon::kVerbs);
    connectors = resolve(lexicon::kConnectors);
    conclusions = resolve(lexicon::kConclusions);
    filler = resolve(lexicon::kFiller);
    for (int t = 0; t < kNumTasks; ++t) {
      const TaskSpec& spec = task_spec(static_cast<TaskId>(t));
      TaskIds& ids = task[static_cast<size_t>(t)];
      ids.preamble = {v.id(spec.preamble[0]), v.id(spec.preamble[1])};
      for (auto fam : spec.families) {
        ids.family_name.push_back(v.id(fam));
        // Find the inventory for this family in the lexicon table.
        size_t fi = 0;
        while (fi < lexicon::kFamilies.size() && lexicon::kFamilies[fi] != fam) ++fi;
        if (fi == lexicon::kFamilies.size())
          throw std::logic_error("family without word inventory: " + std::string(fam));
        ids.family_words.push_back(resolve(lexicon::kFamilyWords[fi]));
      }
      for (auto name : spec.label_names) ids.label_token.push_back(v.id(name));
    }
  }

  const TaskIds& ids(TaskId t) const { return task[static_cast<size_t>(t)]; }
};

// ---------------------------------------------------------------------------
// Examples
// ---------------------------------------------------------------------------

struct Example {
  TaskId task = TaskId::polarity;
  int64_t id = 0;
  TokenSeq input;
  Label gold;
  std::vector<int32_t> evidence;  // per-family counts, TaskSpec::families order
};

namespace detail {

// Gold label as a pure function of evidence; also used to validate claims.
inline std::optional<Label> rule_label(const TaskSpec& spec, std::span<const int32_t> counts) {
  switch (spec.id) {
    case TaskId::polarity: {
      if (counts[0] > counts[1]) return Label::categorical(0);
      if (counts[1] > counts[0]) return Label::categorical(1);
      return std::nullopt;  // tie: no implied label
    }
    case TaskId::topic4: {
      int best = 0;
      bool unique = true;
      for (int f = 1; f < 4; ++f) {
        if (counts[static_cast<size_t>(f)] > counts[static_cast<size_t>(best)]) {
          best = f;
          unique = true;
        } else if (counts[static_cast<size_t>(f)] == counts[static_cast<size_t>(best)]) {
          unique = false;
        }
      }
      if (!unique) return std::nullopt;
      return Label::categorical(best);
    }
    case TaskId::rating: {
      if (counts[0] < 0 || counts[1] < 0) return std::nullopt;
      if (counts[0] + counts[1] != 10 || counts[0] > 10) return std::nullopt;
      return Label::ordinal(static_cast<double>(counts[0]) / 2.0);
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Label implied by a claimed count vector under the task rule; families not
// mentioned by a rationale are treated as claimed zero by the caller.
inline std::optional<Label> implied_label(const TaskSpec& spec, std::span<const int32_t> claims) {
  return detail::rule_label(spec, claims);
}

inline Example gen_example(const SynthContext& ctx, TaskId task, int64_t id, RngStream& stream) {
  const TaskSpec& spec = task_spec(task);
  const auto& ids = ctx.ids(task);
  Example ex;
  ex.task = task;
  ex.id = id;

  // Draw the evidence counts (resampling degenerate ties), then the filler
  // budget, then the surface words, then shuffle. The draw order is frozen.
  std::vector<int32_t> counts(static_cast<size_t>(spec.n_families()), 0);
  int n_filler = 0;
  switch (task) {
    case TaskId::polarity: {
      const int s = static_cast<int>(stream.uniform_int(4, 10));
      int pos = 0;
      do {
        pos = static_cast<int>(stream.uniform_int(0, s));
      } while (2 * pos == s);
      counts = {pos, s - pos};
      n_filler = static_cast<int>(stream.uniform_int(2, 6));
      ex.gold = Label::categorical(pos > s - pos ? 0 : 1);
      break;
    }
    case TaskId::topic4: {
      const int s = static_cast<int>(stream.uniform_int(6, 12));
      for (;;) {
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < s; ++i) counts[stream.choice(4)]++;
        if (auto lbl = detail::rule_label(spec, counts)) {
          ex.gold = *lbl;
          break;
        }
      }
      n_filler = static_cast<int>(stream.uniform_int(2, 4));
      break;
    }
    case TaskId::rating: {
      const int pos = static_cast<int>(stream.uniform_int(0, 10));
      counts = {pos, 10 - pos};
      n_filler = static_cast<int>(stream.uniform_int(2, 6));
      ex.gold = Label::ordinal(static_cast<double>(pos) / 2.0);
      break;
    }
  }
  ex.evidence = counts;

  for (size_t f = 0; f < counts.size(); ++f)
    for (int i = 0; i < counts[f]; ++i)
      ex.input.push_back(ids.family_words[f][stream.choice(ids.family_words[f].size())]);
  for (int i = 0; i < n_filler; ++i)
    ex.input.push_back(ctx.filler[stream.choice(ctx.filler.size())]);
  stream.shuffle(ex.input);
  return ex;
}

inline TokenSeq render_question(const SynthContext& ctx, const Example& ex) {
  const auto& ids = ctx.ids(ex.task);
  TokenSeq q = ids.preamble;
  q.insert(q.end(), ex.input.begin(), ex.input.end());
  q.push_back(tok::sep);
  return q;
}

inline TokenSeq label_tokens(const SynthContext& ctx, const TaskSpec& spec, const Label& label) {
  TokenSeq out;
  if (spec.ordinal()) {
    const std::string s = label_to_string(spec, label);
    for (char c : s)
      out.push_back(c == '.' ? ctx.vocab->point() : ctx.vocab->digit(c - '0'));
  } else {
    out.push_back(ctx.ids(spec.id).label_token[static_cast<size_t>(label.cat)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rationale oracle
// ---------------------------------------------------------------------------

// Smallest-L1 claimed-count vector implying `target`, holding the total count
// fixed at the true total. Ties prefer the lexicographically greatest vector,
// i.e. low-index families keep (or gain) counts first.
inline std::vector<int32_t> minimal_claim_perturbation(const TaskSpec& spec,
                                                       std::span<const int32_t> evidence,
                                                       const Label& target) {
  const int F = spec.n_families();
  int total = 0;
  for (int32_t c : evidence) total += c;

  std::vector<int32_t> best;
  int best_l1 = std::numeric_limits<int32_t>::max();
  std::vector<int32_t> cur(static_cast<size_t>(F), 0);

  auto consider = [&](const std::vector<int32_t>& cand) {
    auto implied = detail::rule_label(spec, cand);
    if (!implied || !(*implied == target)) return;
    int l1 = 0;
    for (int f = 0; f < F; ++f)
      l1 += std::abs(cand[static_cast<size_t>(f)] - evidence[static_cast<size_t>(f)]);
    if (l1 < best_l1 || (l1 == best_l1 && cand > best)) {
      best_l1 = l1;
      best = cand;
    }
  };

  // Enumerate every count vector with the fixed total (≤ C(total+F-1, F-1)
  // candidates; small for the suite's totals).
  auto rec = [&](auto&& self, int f, int remaining) -> void {
    if (f == F - 1) {
      cur[static_cast<size_t>(f)] = remaining;
      consider(cur);
      return;
    }
    for (int c = 0; c <= remaining; ++c) {
      cur[static_cast<size_t>(f)] = c;
      self(self, f + 1, remaining - c);
    }
  };
  rec(rec, 0, total);

  if (best.empty() && best_l1 == std::numeric_limits<int32_t>::max())
    throw std::domain_error("no claim vector implies the requested label");
  return best;
}

// Template rationale arguing for `label`. For the gold label the claims are
// the true evidence; otherwise the minimal implying perturbation. The stream
// only picks surface paraphrases (verb/connector/conclusion variants).
inline TokenSeq oracle_rationale(const SynthContext& ctx, const Example& ex, const Label& label,
                                 RngStream& stream, int n_paraphrase = 4) {
  const TaskSpec& spec = task_spec(ex.task);
  if (!label_in_space(spec, label))
    throw std::domain_error("oracle_rationale: label outside label space");
  if (n_paraphrase < 1 || n_paraphrase > 4)
    throw std::domain_error("oracle_rationale: paraphrase count must be in [1,4]");

  std::vector<int32_t> claims;
  if (label == ex.gold)
    claims.assign(ex.evidence.begin(), ex.evidence.end());
  else
    claims = minimal_claim_perturbation(spec, ex.evidence, label);

  const auto& ids = ctx.ids(ex.task);
  const auto np = static_cast<size_t>(n_paraphrase);
  TokenSeq out;
  for (int f = 0; f < spec.n_families(); ++f) {
    if (f > 0) out.push_back(ctx.connectors[stream.choice(np)]);
    out.push_back(ctx.verbs[stream.choice(np)]);
    const std::string digits = std::to_string(claims[static_cast<size_t>(f)]);
    for (char c : digits) out.push_back(ctx.vocab->digit(c - '0'));
    out.push_back(ids.family_name[static_cast<size_t>(f)]);
  }
  out.push_back(ctx.conclusions[stream.choice(np)]);
  return out;
}

inline TokenSeq oracle_answer(const SynthContext& ctx, const Example& ex, const Label& label,
                              RngStream& stream, int n_paraphrase = 4) {
  TokenSeq a = oracle_rationale(ctx, ex, label, stream, n_paraphrase);
  a.push_back(tok::ans);
  const TokenSeq lt = label_tokens(ctx, task_spec(ex.task), label);
  a.insert(a.end(), lt.begin(), lt.end());
  a.push_back(tok::eos);
  return a;
}

// ---------------------------------------------------------------------------
// Answer parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::optional<size_t> last_ans_index(std::span<const Token> answer) {
  for (size_t i = answer.size(); i > 0; --i)
    if (answer[i - 1] == tok::ans) return i - 1;
  return std::nullopt;
}

}  // namespace detail

// Locate the last ANS marker; decode the tokens after it (up to EOS, or the
// end for unterminated samples) as a label. Categorical labels are a single
// exact symbol; ordinal labels are digit/point tokens decoded as a decimal
// and snapped to the nearest grid value. Returns nullopt on any malformation
// ("ParseError"); callers treat that as an incorrect label.
inline std::optional<Label> parse_label(const SynthContext& ctx, TaskId task,
                                        std::span<const Token> answer) {
  const TaskSpec& spec = task_spec(task);
  const auto ans_idx = detail::last_ans_index(answer);
  if (!ans_idx) return std::nullopt;

  size_t end = *ans_idx + 1;
  while (end < answer.size() && answer[end] != tok::eos) ++end;
  const std::span<const Token> body = answer.subspan(*ans_idx + 1, end - (*ans_idx + 1));
  if (body.empty()) return std::nullopt;

  if (!spec.ordinal()) {
    if (body.size() != 1) return std::nullopt;
    const auto& names = ctx.ids(task).label_token;
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == body[0]) return Label::categorical(static_cast<int32_t>(i));
    return std::nullopt;
  }

  // Ordinal decimal decode: digits with at most one point, at most 8 tokens.
  if (body.size() > 8) return std::nullopt;
  const Vocab& v = *ctx.vocab;
  double value = 0.0;
  double frac_scale = 0.0;
  bool seen_point = false, seen_digit = false;
  for (Token t : body) {
    if (t == v.point()) {
      if (seen_point) return std::nullopt;
      seen_point = true;
    } else if (v.is_digit(t)) {
      seen_digit = true;
      if (!seen_point) {
        value = value * 10.0 + v.digit_value(t);
      } else {
        frac_scale = frac_scale == 0.0 ? 0.1 : frac_scale * 0.1;
        value += frac_scale * v.digit_value(t);
      }
    } else {
      return std::nullopt;
    }
  }
  if (!seen_digit) return std::nullopt;
  if (value < spec.label_grid.front() || value > spec.label_grid.back()) return std::nullopt;
  const double snapped = std::round(value * 2.0) / 2.0;
  return Label::ordinal(snapped);
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

struct JudgeConfig {
  double count_weight = 2.0;     // claimed counts equal true evidence
  double implied_weight = 1.0;   // stated label follows from claimed counts
  double label_weight = 1.0;     // parsed label equals gold
  double coverage_weight = 0.5;  // fraction of evidence families mentioned
  int length_limit = 40;         // rationale tokens before the penalty starts
  double length_penalty = 0.1;   // per 10 tokens over the limit
  double tie_eps = 1e-6;         // score gap below which answers tie
};

struct ClaimParse {
  std::vector<int32_t> claims;  // per family; unmentioned families claim 0
  std::vector<bool> mentioned;
};

// Recover "<verb> <digits> <family>" claims from a rationale. Later claims
// about the same family overwrite earlier ones. Malformed fragments are
// skipped, not fatal.
inline ClaimParse parse_claims(const SynthContext& ctx, TaskId task,
                               std::span<const Token> rationale) {
  const TaskSpec& spec = task_spec(task);
  const auto& ids = ctx.ids(task);
  const Vocab& v = *ctx.vocab;
  ClaimParse cp;
  cp.claims.assign(static_cast<size_t>(spec.n_families()), 0);
  cp.mentioned.assign(static_cast<size_t>(spec.n_families()), false);

  auto is_verb = [&](Token t) {
    return std::find(ctx.verbs.begin(), ctx.verbs.end(), t) != ctx.verbs.end();
  };
  auto family_of = [&](Token t) -> int {
    for (size_t f = 0; f < ids.family_name.size(); ++f)
      if (ids.family_name[f] == t) return static_cast<int>(f);
    return -1;
  };

  size_t i = 0;
  while (i < rationale.size()) {
    if (!is_verb(rationale[i])) {
      ++i;
      continue;
    }
    size_t j = i + 1;
    int64_t count = 0;
    int n_digits = 0;
    while (j < rationale.size() && v.is_digit(rationale[j]) && n_digits < 4) {
      count = count * 10 + v.digit_value(rationale[j]);
      ++n_digits;
      ++j;
    }
    const int fam = (n_digits > 0 && j < rationale.size()) ? family_of(rationale[j]) : -1;
    if (fam >= 0) {
      cp.claims[static_cast<size_t>(fam)] = static_cast<int32_t>(count);
      cp.mentioned[static_cast<size_t>(fam)] = true;
      i = j + 1;
    } else {
      ++i;  // malformed claim; resume scanning after the verb
    }
  }
  return cp;
}

// Deterministic quality score; unparseable answers get the -inf sentinel and
// rank last everywhere.
inline double judge_score(const SynthContext& ctx, const Example& ex,
                          std::span<const Token> answer, const JudgeConfig& cfg = {}) {
  const TaskSpec& spec = task_spec(ex.task);
  const auto parsed = parse_label(ctx, ex.task, answer);
  if (!parsed) return -std::numeric_limits<double>::infinity();

  const size_t ans_idx = *detail::last_ans_index(answer);  // exists: label parsed
  const std::span<const Token> rationale = answer.subspan(0, ans_idx);
  const ClaimParse cp = parse_claims(ctx, ex.task, rationale);

  bool counts_match = true;
  for (size_t f = 0; f < ex.evidence.size(); ++f)
    counts_match = counts_match && cp.mentioned[f] && cp.claims[f] == ex.evidence[f];

  const auto implied = implied_label(spec, cp.claims);
  const bool label_implied = implied && *implied == *parsed;
  const bool label_gold = *parsed == ex.gold;

  int n_mentioned = 0;
  for (bool m : cp.mentioned) n_mentioned += m ? 1 : 0;
  const double coverage = static_cast<double>(n_mentioned) / spec.n_families();

  const double over = std::max(0.0, static_cast<double>(rationale.size()) - cfg.length_limit);
  return cfg.count_weight * (counts_match ? 1.0 : 0.0) +
         cfg.implied_weight * (label_implied ? 1.0 : 0.0) +
         cfg.label_weight * (label_gold ? 1.0 : 0.0) + cfg.coverage_weight * coverage -
         cfg.length_penalty * over / 10.0;
}

struct JudgeVerdict {
  std::vector<double> score;  // per answer, input order
  std::vector<int32_t> rank;  // 0-based; ties share the smallest position
};

// Rank answers by descending score; scores within tie_eps of each other (as
// consecutive groups of the sorted order) share a rank. Permutation-invariant
// because ranks are a function of the score multiset only.
inline JudgeVerdict judge_rank(const SynthContext& ctx, const Example& ex,
                               std::span<const TokenSeq> answers, const JudgeConfig& cfg = {}) {
  if (answers.size() < 2) throw std::domain_error("judge_rank needs at least 2 answers");
  JudgeVerdict v;
  v.score.reserve(answers.size());
  for (const auto& a : answers) v.score.push_back(judge_score(ctx, ex, a, cfg));

  std::vector<size_t> order(answers.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return v.score[a] > v.score[b]; });

  v.rank.assign(answers.size(), 0);
  int32_t rank = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (k > 0) {
      const double prev = v.score[order[k - 1]];
      const double curr = v.score[order[k]];
      // -inf scores compare equal (gap NaN-free): both parse failures tie.
      const bool tied = (prev == curr) || (prev - curr <= cfg.tie_eps);
      if (!tied) rank = static_cast<int32_t>(k);
    }
    v.rank[order[k]] = rank;
  }
  return v;
}

}  // namespace rllr
