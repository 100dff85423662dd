// Task generators, the rationale oracle, answer parsing, and the judge.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rllr/synthlang.hpp"

namespace rllr {
namespace {

const SynthContext& ctx() {
  static SynthContext c(Vocab::canonical());
  return c;
}

// Which family (by index in the task spec) owns a surface token, if any.
int family_of_word(TaskId task, Token t) {
  const auto& ids = ctx().ids(task);
  for (size_t f = 0; f < ids.family_words.size(); ++f)
    for (Token w : ids.family_words[f])
      if (w == t) return static_cast<int>(f);
  return -1;
}

Example make_example(TaskId task, std::vector<int32_t> evidence, Label gold) {
  Example ex;
  ex.task = task;
  ex.id = 0;
  ex.evidence = std::move(evidence);
  ex.gold = gold;
  const auto& ids = ctx().ids(task);
  for (size_t f = 0; f < ex.evidence.size(); ++f)
    for (int i = 0; i < ex.evidence[f]; ++i) ex.input.push_back(ids.family_words[f][0]);
  return ex;
}

TEST(Gen, DeterministicAndConsistent) {
  for (int t = 0; t < kNumTasks; ++t) {
    const auto task = static_cast<TaskId>(t);
    auto s1 = make_stream(7, stream_tag::data_gen, static_cast<uint64_t>(t));
    auto s2 = make_stream(7, stream_tag::data_gen, static_cast<uint64_t>(t));
    const Example a = gen_example(ctx(), task, 0, s1);
    const Example b = gen_example(ctx(), task, 0, s2);
    EXPECT_EQ(a.input, b.input);
    EXPECT_EQ(a.evidence, b.evidence);
    EXPECT_EQ(a.gold, b.gold);
  }
}

TEST(Gen, EvidenceMatchesSurfaceAndRule) {
  for (int t = 0; t < kNumTasks; ++t) {
    const auto task = static_cast<TaskId>(t);
    const TaskSpec& spec = task_spec(task);
    auto s = make_stream(11, stream_tag::data_gen, static_cast<uint64_t>(t));
    for (int i = 0; i < 200; ++i) {
      const Example ex = gen_example(ctx(), task, i, s);
      // Recount family words in the surface form.
      std::vector<int32_t> counted(static_cast<size_t>(spec.n_families()), 0);
      int n_filler = 0;
      for (Token w : ex.input) {
        const int f = family_of_word(task, w);
        if (f >= 0)
          counted[static_cast<size_t>(f)]++;
        else
          n_filler++;
      }
      EXPECT_EQ(counted, ex.evidence);
      EXPECT_GE(n_filler, 2);
      // Gold is the task rule applied to the evidence.
      const auto implied = implied_label(spec, ex.evidence);
      ASSERT_TRUE(implied.has_value());
      EXPECT_EQ(*implied, ex.gold);
      EXPECT_TRUE(label_in_space(spec, ex.gold));
      int total = 0;
      for (int32_t c : ex.evidence) total += c;
      if (task == TaskId::polarity) {
        EXPECT_GE(total, 4);
        EXPECT_LE(total, 10);
      } else if (task == TaskId::topic4) {
        EXPECT_GE(total, 6);
        EXPECT_LE(total, 12);
      } else {
        EXPECT_EQ(total, 10);
      }
    }
  }
}

TEST(Gen, PolarityLabelMarginalNearBalanced) {
  auto s = make_stream(123, stream_tag::data_gen, 0);
  int pos = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    pos += gen_example(ctx(), TaskId::polarity, i, s).gold.cat == 0 ? 1 : 0;
  const double frac = static_cast<double>(pos) / n;
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
}

TEST(Gen, RatingCoversFullGrid) {
  auto s = make_stream(5, stream_tag::data_gen, 2);
  std::vector<int> hit(11, 0);
  for (int i = 0; i < 2000; ++i) {
    const Example ex = gen_example(ctx(), TaskId::rating, i, s);
    hit[static_cast<size_t>(std::llround(ex.gold.ord * 2.0))]++;
  }
  for (int h : hit) EXPECT_GT(h, 0);
}

TEST(Gen, QuestionHasPreambleAndSeparator) {
  auto s = make_stream(3, stream_tag::data_gen, 1);
  const Example ex = gen_example(ctx(), TaskId::topic4, 0, s);
  const TokenSeq q = render_question(ctx(), ex);
  ASSERT_GE(q.size(), 3u);
  EXPECT_EQ(q[0], ctx().ids(TaskId::topic4).preamble[0]);
  EXPECT_EQ(q[1], ctx().ids(TaskId::topic4).preamble[1]);
  EXPECT_EQ(q.back(), tok::sep);
  EXPECT_EQ(q.size(), ex.input.size() + 3);
}

TEST(Perturbation, PolarityFlipKeepsTotalMinimalL1) {
  const TaskSpec& spec = task_spec(TaskId::polarity);
  const auto claims = minimal_claim_perturbation(spec, std::vector<int32_t>{3, 1},
                                                 Label::categorical(1));
  EXPECT_EQ(claims, (std::vector<int32_t>{1, 3}));
}

TEST(Perturbation, PolarityClosedForm) {
  // Flipping the majority with the total fixed: the cheapest implying vector
  // keeps the losing side one past half. Unique, so no tie-break needed.
  const TaskSpec& spec = task_spec(TaskId::polarity);
  auto s = make_stream(17, stream_tag::data_gen, 0);
  for (int i = 0; i < 100; ++i) {
    const Example ex = gen_example(ctx(), TaskId::polarity, i, s);
    const int total = ex.evidence[0] + ex.evidence[1];
    const int loser_max = (total - 1) / 2;  // strictly less than half
    const Label wrong = Label::categorical(1 - ex.gold.cat);
    const auto claims = minimal_claim_perturbation(spec, ex.evidence, wrong);
    const int wrong_side = wrong.cat == 0 ? 0 : 1;
    EXPECT_EQ(claims[static_cast<size_t>(1 - wrong_side)], loser_max);
    EXPECT_EQ(claims[static_cast<size_t>(wrong_side)], total - loser_max);
  }
}

TEST(Perturbation, RatingTargetsAreForced) {
  // With the total pinned at 10 there is exactly one vector per grid value.
  const TaskSpec& spec = task_spec(TaskId::rating);
  const std::vector<int32_t> evidence{5, 5};
  for (int g = 0; g <= 10; ++g) {
    const auto claims =
        minimal_claim_perturbation(spec, evidence, Label::ordinal(g * 0.5));
    EXPECT_EQ(claims, (std::vector<int32_t>{g, 10 - g}));
  }
}

TEST(Perturbation, Topic4TieBreakPrefersLowIndexFamilies) {
  const TaskSpec& spec = task_spec(TaskId::topic4);
  const auto claims = minimal_claim_perturbation(spec, std::vector<int32_t>{3, 3, 2, 1},
                                                 Label::categorical(2));
  EXPECT_EQ(claims, (std::vector<int32_t>{3, 2, 4, 0}));
}

TEST(Perturbation, AlwaysImpliesTargetAndKeepsTotal) {
  auto s = make_stream(29, stream_tag::data_gen, 0);
  for (int t = 0; t < kNumTasks; ++t) {
    const auto task = static_cast<TaskId>(t);
    const TaskSpec& spec = task_spec(task);
    for (int i = 0; i < 30; ++i) {
      const Example ex = gen_example(ctx(), task, i, s);
      for (int li = 0; li < spec.n_labels(); ++li) {
        const Label target = spec.label_at(li);
        if (target == ex.gold) continue;
        const auto claims = minimal_claim_perturbation(spec, ex.evidence, target);
        const auto implied = implied_label(spec, claims);
        ASSERT_TRUE(implied.has_value());
        EXPECT_EQ(*implied, target);
        int t0 = 0, t1 = 0;
        for (int32_t c : ex.evidence) t0 += c;
        for (int32_t c : claims) t1 += c;
        EXPECT_EQ(t0, t1);
      }
    }
  }
}

TEST(Oracle, AnswerRoundTripsEveryLabel) {
  auto gen = make_stream(31, stream_tag::data_gen, 0);
  for (int t = 0; t < kNumTasks; ++t) {
    const auto task = static_cast<TaskId>(t);
    const TaskSpec& spec = task_spec(task);
    for (int i = 0; i < 10; ++i) {
      const Example ex = gen_example(ctx(), task, i, gen);
      for (int li = 0; li < spec.n_labels(); ++li) {
        const Label label = spec.label_at(li);
        auto rs = make_stream(31, stream_tag::rationale, static_cast<uint64_t>(i),
                              static_cast<uint64_t>(li));
        const TokenSeq ans = oracle_answer(ctx(), ex, label, rs);
        EXPECT_EQ(ans.back(), tok::eos);
        const auto parsed = parse_label(ctx(), task, ans);
        ASSERT_TRUE(parsed.has_value());
        EXPECT_EQ(*parsed, label);
      }
    }
  }
}

TEST(Oracle, ClaimsEqualEvidenceAtGoldAndSurviveParaphrase) {
  auto gen = make_stream(37, stream_tag::data_gen, 1);
  for (int i = 0; i < 20; ++i) {
    const Example ex = gen_example(ctx(), TaskId::topic4, i, gen);
    auto r1 = make_stream(1, stream_tag::rationale, static_cast<uint64_t>(i));
    auto r2 = make_stream(2, stream_tag::rationale, static_cast<uint64_t>(i));
    const TokenSeq a1 = oracle_rationale(ctx(), ex, ex.gold, r1);
    const TokenSeq a2 = oracle_rationale(ctx(), ex, ex.gold, r2);
    const ClaimParse c1 = parse_claims(ctx(), ex.task, a1);
    const ClaimParse c2 = parse_claims(ctx(), ex.task, a2);
    EXPECT_EQ(c1.claims, ex.evidence);
    EXPECT_EQ(c2.claims, ex.evidence);
    for (bool m : c1.mentioned) EXPECT_TRUE(m);
  }
}

TEST(Oracle, SingleParaphraseIsStreamInvariant) {
  auto gen = make_stream(41, stream_tag::data_gen, 0);
  const Example ex = gen_example(ctx(), TaskId::polarity, 0, gen);
  auto r1 = make_stream(100, stream_tag::rationale, 0);
  auto r2 = make_stream(200, stream_tag::rationale, 0);
  EXPECT_EQ(oracle_answer(ctx(), ex, ex.gold, r1, 1),
            oracle_answer(ctx(), ex, ex.gold, r2, 1));
}

TEST(Oracle, RejectsLabelsOutsideSpace) {
  auto gen = make_stream(43, stream_tag::data_gen, 0);
  const Example ex = gen_example(ctx(), TaskId::rating, 0, gen);
  auto rs = make_stream(43, stream_tag::rationale, 0);
  EXPECT_THROW(oracle_rationale(ctx(), ex, Label::ordinal(0.25), rs), std::domain_error);
  EXPECT_THROW(oracle_rationale(ctx(), ex, Label::ordinal(6.0), rs), std::domain_error);
  EXPECT_THROW(oracle_rationale(ctx(), ex, ex.gold, rs, 0), std::domain_error);
  EXPECT_THROW(oracle_rationale(ctx(), ex, ex.gold, rs, 5), std::domain_error);
}

TokenSeq cat_answer(std::string_view label_word) {
  return {tok::ans, ctx().vocab->id(label_word), tok::eos};
}

TEST(Parse, CategoricalRules) {
  const Vocab& v = Vocab::canonical();
  EXPECT_EQ(parse_label(ctx(), TaskId::polarity, cat_answer("positive")),
            Label::categorical(0));
  EXPECT_EQ(parse_label(ctx(), TaskId::polarity, cat_answer("negative")),
            Label::categorical(1));
  EXPECT_EQ(parse_label(ctx(), TaskId::topic4, cat_answer("trade")), Label::categorical(2));
  // Unterminated samples still parse.
  EXPECT_EQ(parse_label(ctx(), TaskId::polarity, TokenSeq{tok::ans, v.id("positive")}),
            Label::categorical(0));
  // Only the last ANS counts.
  EXPECT_EQ(parse_label(ctx(), TaskId::polarity,
                        TokenSeq{tok::ans, v.id("negative"), tok::ans, v.id("positive"),
                                 tok::eos}),
            Label::categorical(0));
  // Malformations.
  EXPECT_FALSE(parse_label(ctx(), TaskId::polarity, TokenSeq{v.id("positive"), tok::eos}));
  EXPECT_FALSE(parse_label(ctx(), TaskId::polarity, TokenSeq{tok::ans, tok::eos}));
  EXPECT_FALSE(parse_label(ctx(), TaskId::polarity,
                           TokenSeq{tok::ans, v.id("positive"), v.id("positive"), tok::eos}));
  EXPECT_FALSE(parse_label(ctx(), TaskId::polarity, TokenSeq{tok::ans, v.id("found"), tok::eos}));
  EXPECT_FALSE(parse_label(ctx(), TaskId::polarity, TokenSeq{}));
}

TEST(Parse, OrdinalDecodingAndSnapping) {
  const Vocab& v = Vocab::canonical();
  auto num = [&](std::string_view s) {
    TokenSeq a{tok::ans};
    for (char c : s) a.push_back(c == '.' ? v.point() : v.digit(c - '0'));
    a.push_back(tok::eos);
    return a;
  };
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("2.500")), Label::ordinal(2.5));
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("2.5")), Label::ordinal(2.5));
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("0")), Label::ordinal(0.0));
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("5.000")), Label::ordinal(5.0));
  // Off-grid values snap to the nearest half point.
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("2.4")), Label::ordinal(2.5));
  EXPECT_EQ(parse_label(ctx(), TaskId::rating, num("3.1")), Label::ordinal(3.0));
  // Out of range is rejected, not clamped.
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating, num("6")));
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating, num("5.1")));
  // Structural malformations.
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating, num("2..5")));
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating, num(".")));
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating, num("2.5000000")));  // 9 tokens
  EXPECT_FALSE(parse_label(ctx(), TaskId::rating,
                           TokenSeq{tok::ans, v.digit(2), v.id("found"), tok::eos}));
}

TEST(Judge, FrozenScores) {
  // Evidence (3,1): gold positive. Oracle at gold scores 2+1+1+0.5 = 4.5; the
  // oracle arguing the wrong label keeps internal consistency and coverage but
  // loses factuality and correctness: 0+1+0+0.5 = 1.5; true counts with a
  // contradicting stated label: 2+0+0+0.5 = 2.5.
  const Example ex = make_example(TaskId::polarity, {3, 1}, Label::categorical(0));
  auto rs = make_stream(51, stream_tag::rationale, 0);
  const TokenSeq good = oracle_answer(ctx(), ex, Label::categorical(0), rs);
  const TokenSeq argued_wrong = oracle_answer(ctx(), ex, Label::categorical(1), rs);
  TokenSeq inconsistent = oracle_rationale(ctx(), ex, Label::categorical(0), rs);
  inconsistent.push_back(tok::ans);
  inconsistent.push_back(ctx().vocab->id("negative"));
  inconsistent.push_back(tok::eos);

  EXPECT_DOUBLE_EQ(judge_score(ctx(), ex, good), 4.5);
  EXPECT_DOUBLE_EQ(judge_score(ctx(), ex, argued_wrong), 1.5);
  EXPECT_DOUBLE_EQ(judge_score(ctx(), ex, inconsistent), 2.5);
  EXPECT_EQ(judge_score(ctx(), ex, TokenSeq{tok::eos}),
            -std::numeric_limits<double>::infinity());
}

TEST(Judge, LengthPenaltyKicksInPastLimit) {
  const Example ex = make_example(TaskId::polarity, {3, 1}, Label::categorical(0));
  auto rs = make_stream(53, stream_tag::rationale, 0);
  TokenSeq rationale = oracle_rationale(ctx(), ex, ex.gold, rs);  // 8 tokens
  ASSERT_EQ(rationale.size(), 8u);
  const Token pad = ctx().filler[0];
  while (rationale.size() < 50) rationale.push_back(pad);  // 10 over the limit
  TokenSeq ans = rationale;
  ans.push_back(tok::ans);
  ans.push_back(ctx().vocab->id("positive"));
  ans.push_back(tok::eos);
  EXPECT_DOUBLE_EQ(judge_score(ctx(), ex, ans), 4.5 - 0.1);
}

TEST(Judge, RankOrderingAndTies) {
  const Example ex = make_example(TaskId::polarity, {3, 1}, Label::categorical(0));
  auto rs = make_stream(59, stream_tag::rationale, 0);
  const TokenSeq good = oracle_answer(ctx(), ex, Label::categorical(0), rs);
  const TokenSeq argued_wrong = oracle_answer(ctx(), ex, Label::categorical(1), rs);
  TokenSeq inconsistent = oracle_rationale(ctx(), ex, Label::categorical(0), rs);
  inconsistent.push_back(tok::ans);
  inconsistent.push_back(ctx().vocab->id("negative"));
  inconsistent.push_back(tok::eos);

  const std::vector<TokenSeq> answers{good, argued_wrong, inconsistent};
  const JudgeVerdict v = judge_rank(ctx(), ex, answers);
  EXPECT_EQ(v.rank, (std::vector<int32_t>{0, 2, 1}));

  // Permutation of the inputs permutes the ranks the same way.
  const std::vector<TokenSeq> perm{argued_wrong, inconsistent, good};
  const JudgeVerdict vp = judge_rank(ctx(), ex, perm);
  EXPECT_EQ(vp.rank, (std::vector<int32_t>{2, 1, 0}));

  // Byte-identical answers tie; parse failures tie with each other at the end.
  const std::vector<TokenSeq> dup{good, good, argued_wrong};
  const JudgeVerdict vd = judge_rank(ctx(), ex, dup);
  EXPECT_EQ(vd.rank, (std::vector<int32_t>{0, 0, 2}));

  const std::vector<TokenSeq> bad{good, TokenSeq{tok::eos}, TokenSeq{tok::sep}};
  const JudgeVerdict vb = judge_rank(ctx(), ex, bad);
  EXPECT_EQ(vb.rank, (std::vector<int32_t>{0, 1, 1}));

  EXPECT_THROW(judge_rank(ctx(), ex, std::vector<TokenSeq>{good}), std::domain_error);
}

}  // namespace
}  // namespace rllr
