#pragma once

// JSON-Lines (de)serialization for the pipeline's data files.
//
//   examples:  {"task","id","input_tokens","gold_label","evidence"}
//   sft:       {"question","answer","mask"}
//   pairs:     {"question","chosen","rejected","kind","example_id"}
//   decodes:   {"id","answer","parsed","judge_score"}
//
// Serialization is byte-deterministic: objects dump with sorted keys and
// shortest-round-trip numbers, which the end-to-end determinism check relies
// on.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rllr/common.hpp"
#include "rllr/io.hpp"
#include "rllr/synthlang.hpp"

namespace rllr {

using json = nlohmann::json;

// --- examples ----------------------------------------------------------------

inline json example_to_json(const Example& ex) {
  const TaskSpec& spec = task_spec(ex.task);
  json evidence = json::object();
  for (size_t f = 0; f < ex.evidence.size(); ++f)
    evidence[std::string(spec.families[f])] = ex.evidence[f];
  return json{{"task", spec.name},
              {"id", ex.id},
              {"input_tokens", ex.input},
              {"gold_label", label_to_string(spec, ex.gold)},
              {"evidence", evidence}};
}

inline Label label_from_string(const TaskSpec& spec, const std::string& s) {
  if (spec.ordinal()) {
    bool ok = false;
    const double v = parse_double(s, &ok);
    if (!ok) throw PreconditionError("bad ordinal label string: " + s);
    const double snapped = std::round(v * 2.0) / 2.0;
    Label l = Label::ordinal(snapped);
    if (!label_in_space(spec, l))
      throw PreconditionError("ordinal label off the grid: " + s);
    return l;
  }
  for (size_t i = 0; i < spec.label_names.size(); ++i)
    if (spec.label_names[i] == s) return Label::categorical(static_cast<int32_t>(i));
  throw PreconditionError("unknown categorical label: " + s);
}

inline Example example_from_json(const json& j) {
  Example ex;
  const auto task = task_from_name(j.at("task").get<std::string>());
  if (!task) throw PreconditionError("unknown task in example record");
  ex.task = *task;
  const TaskSpec& spec = task_spec(ex.task);
  ex.id = j.at("id").get<int64_t>();
  ex.input = j.at("input_tokens").get<TokenSeq>();
  ex.gold = label_from_string(spec, j.at("gold_label").get<std::string>());
  const json& ev = j.at("evidence");
  ex.evidence.assign(static_cast<size_t>(spec.n_families()), 0);
  for (size_t f = 0; f < ex.evidence.size(); ++f)
    ex.evidence[f] = ev.at(std::string(spec.families[f])).get<int32_t>();
  return ex;
}

inline std::string examples_to_jsonl(std::span<const Example> examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Example> examples_from_jsonl(std::string_view text) {
  std::vector<Example> out;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    out.push_back(example_from_json(json::parse(line)));
  }
  return out;
}

// --- sft records ---------------------------------------------------------------

struct SftRecord {
  TokenSeq question;
  TokenSeq answer;
  std::vector<uint8_t> mask;  // over question ++ answer; 1 = loss position
};

inline std::string sft_records_to_jsonl(std::span<const SftRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += json{{"question", r.question}, {"answer", r.answer}, {"mask", r.mask}}.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<SftRecord> sft_records_from_jsonl(std::string_view text) {
  std::vector<SftRecord> out;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    SftRecord r;
    r.question = j.at("question").get<TokenSeq>();
    r.answer = j.at("answer").get<TokenSeq>();
    r.mask = j.at("mask").get<std::vector<uint8_t>>();
    out.push_back(std::move(r));
  }
  return out;
}

// --- comparison pairs ------------------------------------------------------------

enum class PairKind : int32_t { label_sensitive = 0, rationale_sensitive = 1 };

inline const char* pair_kind_name(PairKind k) {
  return k == PairKind::label_sensitive ? "label_sensitive" : "rationale_sensitive";
}

struct ComparisonPair {
  int64_t example_id = 0;
  TokenSeq question;
  TokenSeq chosen;
  TokenSeq rejected;
  PairKind kind = PairKind::label_sensitive;
};

inline std::string pairs_to_jsonl(std::span<const ComparisonPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += json{{"question", p.question},
                {"chosen", p.chosen},
                {"rejected", p.rejected},
                {"kind", pair_kind_name(p.kind)},
                {"example_id", p.example_id}}
               .dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ComparisonPair> pairs_from_jsonl(std::string_view text) {
  std::vector<ComparisonPair> out;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ComparisonPair p;
    p.question = j.at("question").get<TokenSeq>();
    p.chosen = j.at("chosen").get<TokenSeq>();
    p.rejected = j.at("rejected").get<TokenSeq>();
    p.example_id = j.at("example_id").get<int64_t>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "label_sensitive") p.kind = PairKind::label_sensitive;
    else if (kind == "rationale_sensitive") p.kind = PairKind::rationale_sensitive;
    else throw PreconditionError("unknown pair kind: " + kind);
    out.push_back(std::move(p));
  }
  return out;
}

// --- greedy decodes (evaluate stage) ----------------------------------------------

struct DecodeRecord {
  int64_t id = 0;
  TokenSeq answer;
  std::optional<Label> parsed;
  double judge = 0.0;  // -inf when unparseable
};

inline std::string decodes_to_jsonl(std::span<const DecodeRecord> decs, const TaskSpec& spec) {
  std::string out;
  for (const auto& d : decs) {
    json j{{"id", d.id}, {"answer", d.answer}};
    j["parsed"] = d.parsed ? json(label_to_string(spec, *d.parsed)) : json(nullptr);
    j["judge_score"] = std::isfinite(d.judge) ? json(d.judge) : json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<DecodeRecord> decodes_from_jsonl(std::string_view text, const TaskSpec& spec) {
  std::vector<DecodeRecord> out;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    DecodeRecord d;
    d.id = j.at("id").get<int64_t>();
    d.answer = j.at("answer").get<TokenSeq>();
    if (!j.at("parsed").is_null())
      d.parsed = label_from_string(spec, j.at("parsed").get<std::string>());
    d.judge = j.at("judge_score").is_null() ? -std::numeric_limits<double>::infinity()
                                            : j.at("judge_score").get<double>();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace rllr
