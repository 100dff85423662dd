#pragma once

// Closed token vocabulary for the synthetic task suite.
//
// Ids are dense and assigned in a frozen registration order: control tokens,
// digit tokens, template words, then task-specific words. The fingerprint of
// the symbol list travels inside every checkpoint so that models and datasets
// can refuse to mix across vocab revisions.

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rllr/common.hpp"
#include "rllr/io.hpp"

namespace rllr {

namespace tok {
inline constexpr Token bos = 0;  // reserved; not used by current templates
inline constexpr Token eos = 1;
inline constexpr Token sep = 2;
inline constexpr Token ans = 3;  // the answer marker
}  // namespace tok

namespace lexicon {

inline constexpr std::array<std::string_view, 4> kControl = {"<bos>", "<eos>", "<sep>", "<ans>"};
inline constexpr std::array<std::string_view, 11> kDigits = {"0", "1", "2", "3", "4",
                                                             "5", "6", "7", "8", "9", "."};
inline constexpr std::array<std::string_view, 4> kVerbs = {"found", "saw", "counted", "noted"};
inline constexpr std::array<std::string_view, 4> kConnectors = {"and", "also", "plus", "then"};
inline constexpr std::array<std::string_view, 4> kConclusions = {"so", "hence", "thus", "overall"};
inline constexpr std::array<std::string_view, 5> kPreamble = {"classify", "rate", "mood", "topic", "review"};
inline constexpr std::array<std::string_view, 8> kFamilies = {"bright", "gloom", "arts", "sports",
                                                              "trade",  "science", "ups", "downs"};
inline constexpr std::array<std::string_view, 2> kPolarityLabels = {"positive", "negative"};
inline constexpr std::array<std::string_view, 8> kFiller = {"it", "was", "the", "quite",
                                                            "rather", "very", "piece", "thing"};

// One six-word inventory per evidence family, in kFamilies order.
inline constexpr std::array<std::array<std::string_view, 6>, 8> kFamilyWords = {{
    {"joy", "glee", "delight", "charm", "bliss", "warm"},        // bright
    {"dull", "bleak", "gloomy", "sour", "drab", "cold"},         // gloom
    {"ballet", "opera", "mural", "poem", "sonnet", "gallery"},   // arts
    {"goal", "league", "match", "sprint", "coach", "trophy"},    // sports
    {"market", "stock", "profit", "merger", "export", "bank"},   // trade
    {"atom", "orbit", "enzyme", "quasar", "neuron", "fossil"},   // science
    {"good", "great", "fine", "solid", "crisp", "sharp"},        // ups
    {"bad", "weak", "poor", "flat", "rough", "stale"},           // downs
}};

}  // namespace lexicon

class Vocab {
 public:
  Vocab() = default;

  static Vocab build_canonical() {
    Vocab v;
    using namespace lexicon;
    for (auto s : kControl) v.add(s);
    for (auto s : kDigits) v.add(s);
    for (auto s : kVerbs) v.add(s);
    for (auto s : kConnectors) v.add(s);
    for (auto s : kConclusions) v.add(s);
    for (auto s : kPreamble) v.add(s);
    for (auto s : kFamilies) v.add(s);
    for (auto s : kPolarityLabels) v.add(s);
    for (auto s : kFiller) v.add(s);
    for (const auto& words : kFamilyWords)
      for (auto s : words) v.add(s);
    return v;
  }

  static const Vocab& canonical() {
    static const Vocab v = build_canonical();
    return v;
  }

  int32_t size() const { return static_cast<int32_t>(symbols_.size()); }

  bool contains(std::string_view s) const { return ids_.count(std::string(s)) > 0; }

  Token id(std::string_view s) const {
    auto it = ids_.find(std::string(s));
    if (it == ids_.end())
      throw std::invalid_argument("unknown vocab symbol: " + std::string(s));
    return it->second;
  }

  const std::string& symbol(Token t) const {
    if (t < 0 || t >= size())
      throw std::invalid_argument("token id out of range: " + std::to_string(t));
    return symbols_[static_cast<size_t>(t)];
  }

  bool is_digit(Token t) const { return t >= digit0_ && t < digit0_ + 10; }
  int digit_value(Token t) const { return t - digit0_; }
  Token digit(int d) const { return digit0_ + d; }
  Token point() const { return digit0_ + 10; }

  // FNV-1a over the newline-joined symbol list.
  uint64_t fingerprint() const {
    uint64_t h = kFnvOffset;
    for (const auto& s : symbols_) {
      h = fnv1a64(s, h);
      h = fnv1a64("\n", h);
    }
    return h;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& s : symbols_) {
      out += s;
      out += '\n';
    }
    return out;
  }

  static Vocab from_text(std::string_view text) {
    Vocab v;
    for (auto& line : split_lines(text))
      if (!line.empty()) v.add(line);
    return v;
  }

  std::string decode(std::span<const Token> seq) const {
    std::string out;
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += symbol(seq[i]);
    }
    return out;
  }

  TokenSeq encode(std::span<const std::string_view> words) const {
    TokenSeq out;
    out.reserve(words.size());
    for (auto w : words) out.push_back(id(w));
    return out;
  }

 private:
  void add(std::string_view s) {
    std::string key(s);
    if (ids_.count(key)) throw std::logic_error("duplicate vocab symbol: " + key);
    const Token t = static_cast<Token>(symbols_.size());
    if (key == "0") digit0_ = t;
    ids_.emplace(std::move(key), t);
    symbols_.emplace_back(s);
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, Token> ids_;
  Token digit0_ = -1;
};

}  // namespace rllr
