#pragma once

// Small file and formatting utilities: FNV-1a content hashing, whole-file
// read/write, JSON-Lines framing, CSV emission, and locale-independent
// number formatting (std::to_chars shortest round-trip form).

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "rllr/common.hpp"

namespace rllr {

namespace fs = std::filesystem;

// --- hashing ---------------------------------------------------------------

inline constexpr uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a64(std::string_view data, uint64_t h = kFnvOffset) {
  for (unsigned char c : data) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// --- whole-file IO ----------------------------------------------------------

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof())
    throw PreconditionError("read failure: " + path.string());
  return std::move(buf).str();
}

inline void write_file(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PreconditionError("cannot open for writing: " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out.good()) throw PreconditionError("write failure: " + path.string());
}

inline uint64_t hash_file(const fs::path& path) { return fnv1a64(read_file(path)); }

// --- line framing -----------------------------------------------------------

// Splits on '\n', dropping a trailing empty line; keeps interior empties so
// malformed inputs fail loudly downstream instead of silently shifting rows.
inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start <= text.size()) {
    const size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.emplace_back(text.substr(start));
      break;
    }
    lines.emplace_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

// --- number formatting --------------------------------------------------------

// Shortest round-trip decimal form; deterministic and locale-free.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_int(int64_t v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, bool* ok = nullptr) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  const bool good = res.ec == std::errc() && res.ptr == s.data() + s.size();
  if (ok) *ok = good;
  return good ? v : 0.0;
}

inline int64_t parse_int(std::string_view s, bool* ok = nullptr) {
  int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  const bool good = res.ec == std::errc() && res.ptr == s.data() + s.size();
  if (ok) *ok = good;
  return good ? v : 0;
}

// --- CSV --------------------------------------------------------------------

// Minimal CSV writer. Fields in this project never contain commas, quotes or
// newlines, so no quoting layer is needed; the writer asserts that instead of
// silently corrupting the table.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) {
    append_row(header);
  }

  void append_row(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      const std::string& f = fields[i];
      if (f.find_first_of(",\"\n") != std::string::npos)
        throw std::invalid_argument("csv field needs quoting: " + f);
      if (i) out_ += ',';
      out_ += f;
    }
    out_ += '\n';
  }

  const std::string& str() const { return out_; }

  void save(const fs::path& path) const { write_file(path, out_); }

 private:
  std::string out_;
};

}  // namespace rllr
