// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "labelloop/error.hpp"
#include "labelloop/util/fsio.hpp"

namespace labelloop {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Language : std::uint8_t { sh, bat, js, ps, py };
inline constexpr std::array<Language, 5> kLanguages = {Language::sh, Language::bat, Language::js,
                                                       Language::ps, Language::py};

inline std::string_view to_string(Language lang) noexcept {
  switch (lang) {
    case Language::sh: return "sh";
    case Language::bat: return "bat";
    case Language::js: return "js";
    case Language::ps: return "ps";
    case Language::py: return "py";
  }
  return "?";
}

/// Strict parse of the canonical short codes used in dataset files.
inline std::optional<Language> parse_language(std::string_view text) noexcept {
  for (Language lang : kLanguages)
    if (to_string(lang) == text) return lang;
  return std::nullopt;
}

enum class Provenance : std::uint8_t { seed, train, test, pseudo };

inline std::string_view to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::seed: return "seed";
    case Provenance::train: return "train";
    case Provenance::test: return "test";
    case Provenance::pseudo: return "pseudo";
  }
  return "?";
}

inline std::optional<Provenance> parse_provenance(std::string_view text) noexcept {
  for (Provenance p : {Provenance::seed, Provenance::train, Provenance::test, Provenance::pseudo})
    if (to_string(p) == text) return p;
  return std::nullopt;
}

inline bool is_sha256(std::string_view s) noexcept {
  return s.size() == 64 &&
         std::all_of(s.begin(), s.end(), [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); });
}

struct ScriptRecord {
  std::string sha256;
  std::optional<std::string> content;
  Language language = Language::sh;
  bool malicious = false;
  std::optional<std::string> summary;
  Provenance provenance = Provenance::train;
  std::optional<std::uint32_t> iteration;

  /// Throws InvalidField when a record-level invariant does not hold.
  void validate() const {
    if (!is_sha256(sha256)) throw InvalidField("sha256 must be 64 lowercase hex chars, got '" + sha256 + "'");
    if (provenance == Provenance::pseudo && !iteration)
      throw InvalidField(sha256 + ": provenance=pseudo requires iteration");
    if ((provenance == Provenance::seed || provenance == Provenance::test) && !summary)
      throw InvalidField(sha256 + ": provenance=" + std::string(to_string(provenance)) + " requires summary");
  }

  friend bool operator==(const ScriptRecord&, const ScriptRecord&) = default;
};

inline ordered_json to_json(const ScriptRecord& r) {
  ordered_json j;
  j["sha256"] = r.sha256;
  if (r.content) j["content"] = *r.content;
  j["language"] = std::string(to_string(r.language));
  j["malicious"] = r.malicious;
  if (r.summary) j["summary"] = *r.summary;
  j["provenance"] = std::string(to_string(r.provenance));
  if (r.iteration) j["iteration"] = *r.iteration;
  return j;
}

namespace detail {

inline std::optional<std::string> optional_string(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw InvalidField(std::string(key) + " must be a string");
  return it->get<std::string>();
}

inline const json& required(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw InvalidField(std::string("missing field ") + key);
  return *it;
}

}  // namespace detail

inline ScriptRecord record_from_json(const json& j) {
  if (!j.is_object()) throw InvalidField("record must be an object");
  ScriptRecord r;
  const json& sha = detail::required(j, "sha256");
  if (!sha.is_string()) throw InvalidField("sha256 must be a string");
  r.sha256 = sha.get<std::string>();
  r.content = detail::optional_string(j, "content");

  const json& lang = detail::required(j, "language");
  auto parsed_lang = lang.is_string() ? parse_language(lang.get<std::string>()) : std::nullopt;
  if (!parsed_lang) throw InvalidField("language must be one of sh, bat, js, ps, py; got " + lang.dump());
  r.language = *parsed_lang;

  const json& mal = detail::required(j, "malicious");
  if (!mal.is_boolean()) throw InvalidField("malicious must be a boolean");
  r.malicious = mal.get<bool>();

  r.summary = detail::optional_string(j, "summary");

  const json& prov = detail::required(j, "provenance");
  auto parsed_prov = prov.is_string() ? parse_provenance(prov.get<std::string>()) : std::nullopt;
  if (!parsed_prov) throw InvalidField("provenance must be one of seed, train, test, pseudo; got " + prov.dump());
  r.provenance = *parsed_prov;

  if (auto it = j.find("iteration"); it != j.end() && !it->is_null()) {
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<std::int64_t>() >= 0))
      throw InvalidField("iteration must be a non-negative integer");
    r.iteration = it->get<std::uint32_t>();
  }
  r.validate();
  return r;
}

/// Ordered, sha256-unique collection of records. Immutable once built.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(std::vector<ScriptRecord> records, std::string name = {})
      : name_(std::move(name)), records_(std::move(records)) {
    index_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
      records_[i].validate();
      if (!index_.emplace(records_[i].sha256, i).second) throw DuplicateSha(records_[i].sha256);
    }
  }

  const std::string& name() const noexcept { return name_; }
  const std::vector<ScriptRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }

  auto begin() const noexcept { return records_.begin(); }
  auto end() const noexcept { return records_.end(); }

  const ScriptRecord* find(std::string_view sha) const {
    auto it = index_.find(std::string(sha));
    return it == index_.end() ? nullptr : &records_[it->second];
  }
  bool contains(std::string_view sha) const { return find(sha) != nullptr; }

  Dataset renamed(std::string name) const {
    Dataset copy = *this;
    copy.name_ = std::move(name);
    return copy;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.records_ == b.records_; }

 private:
  std::string name_;
  std::vector<ScriptRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parses JSONL text. Empty lines are skipped; line numbers are 1-based.
inline Dataset parse_jsonl(std::string_view text, std::string name = {}) {
  std::vector<ScriptRecord> records;
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw MalformedLine(line_no, e.what());
    }
    ScriptRecord r;
    try {
      r = record_from_json(j);
    } catch (const InvalidField& e) {
      throw InvalidField("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw InvalidField("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.emplace(r.sha256, line_no).second)
      throw DuplicateSha(r.sha256 + " (line " + std::to_string(line_no) + ")");
    records.push_back(std::move(r));
  }
  return Dataset(std::move(records), std::move(name));
}

inline Dataset load_jsonl(const std::filesystem::path& path) {
  return parse_jsonl(util::read_file(path), path.stem().string());
}

inline std::string to_jsonl(const Dataset& d) {
  std::string out;
  for (const ScriptRecord& r : d) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void save_jsonl(const Dataset& d, const std::filesystem::path& path) {
  util::atomic_write(path, to_jsonl(d));
}

/// Union keyed by sha256. Seed records win collisions; seed order first,
/// then the non-colliding pseudo records in input order.
inline Dataset merge(const Dataset& seed, const Dataset& pseudo) {
  std::vector<ScriptRecord> out;
  out.reserve(seed.size() + pseudo.size());
  out.insert(out.end(), seed.begin(), seed.end());
  for (const ScriptRecord& r : pseudo)
    if (!seed.contains(r.sha256)) out.push_back(r);
  std::string name = seed.name();
  if (!pseudo.name().empty()) name += (name.empty() ? "" : "+") + pseudo.name();
  return Dataset(std::move(out), std::move(name));
}

/// Per-language benign/malicious counts, zero-filled for all five languages.
struct SplitTable {
  std::array<std::array<std::size_t, 2>, 5> counts{};  // [language][malicious]

  std::size_t benign(Language l) const noexcept { return counts[static_cast<std::size_t>(l)][0]; }
  std::size_t malicious(Language l) const noexcept { return counts[static_cast<std::size_t>(l)][1]; }
  std::size_t total(Language l) const noexcept { return benign(l) + malicious(l); }

  std::size_t total_benign() const noexcept {
    std::size_t n = 0;
    for (auto& row : counts) n += row[0];
    return n;
  }
  std::size_t total_malicious() const noexcept {
    std::size_t n = 0;
    for (auto& row : counts) n += row[1];
    return n;
  }
  std::size_t total() const noexcept { return total_benign() + total_malicious(); }

  friend bool operator==(const SplitTable&, const SplitTable&) = default;
};

inline SplitTable split_stats(const Dataset& d) {
  SplitTable t;
  for (const ScriptRecord& r : d) ++t.counts[static_cast<std::size_t>(r.language)][r.malicious ? 1 : 0];
  return t;
}

inline ordered_json to_json(const SplitTable& t) {
  ordered_json rows = ordered_json::array();
  for (Language l : kLanguages)
    rows.push_back({{"language", to_string(l)}, {"benign", t.benign(l)}, {"malicious", t.malicious(l)},
                    {"total", t.total(l)}});
  return {{"rows", rows},
          {"all", {{"benign", t.total_benign()}, {"malicious", t.total_malicious()}, {"total", t.total()}}}};
}

inline std::string render_text(const SplitTable& t) {
  std::ostringstream os;
  char line[96];
  std::snprintf(line, sizeof line, "%-6s %10s %10s %10s\n", "Lang", "Benign", "Mal.", "Total");
  os << line;
  for (Language l : kLanguages) {
    std::snprintf(line, sizeof line, "%-6s %10zu %10zu %10zu\n", std::string(to_string(l)).c_str(), t.benign(l),
                  t.malicious(l), t.total(l));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-6s %10zu %10zu %10zu\n", "all", t.total_benign(), t.total_malicious(),
                t.total());
  os << line;
  return os.str();
}

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// ceil(bytes / 4): a model-agnostic approximation.
inline std::size_t approx_token_count(std::string_view text) noexcept { return (text.size() + 3) / 4; }

struct HistogramBucket {
  std::size_t lower = 0;  // inclusive
  std::size_t upper = 0;  // exclusive
  std::size_t count = 0;
};

struct CorpusStats {
  std::size_t records = 0;
  double mean = 0.0;
  std::size_t median = 0;
  std::size_t min = 0;
  std::size_t max = 0;
  std::vector<HistogramBucket> histogram;
};

/// Even-sized sets take floor((lo + hi) / 2) of the two middle counts,
/// which keeps the median an integer token count.
inline std::size_t integer_median(std::vector<std::size_t> values) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return (values[n / 2 - 1] + values[n / 2]) / 2;
}

inline CorpusStats corpus_stats(const Dataset& d, const TokenCounter& counter = approx_token_count,
                                std::size_t bin_width = 512) {
  if (bin_width == 0) throw InvalidConfig("histogram bin width must be positive");
  CorpusStats s;
  if (d.empty()) return s;

  std::vector<std::size_t> counts;
  counts.reserve(d.size());
  for (const ScriptRecord& r : d) {
    if (!r.content) throw MissingContent(r.sha256);
    counts.push_back(counter(*r.content));
  }
  s.records = counts.size();
  long double sum = 0;
  for (std::size_t c : counts) sum += c;
  s.mean = static_cast<double>(sum / static_cast<long double>(counts.size()));
  s.min = *std::min_element(counts.begin(), counts.end());
  s.max = *std::max_element(counts.begin(), counts.end());
  s.median = integer_median(counts);

  s.histogram.resize(s.max / bin_width + 1);
  for (std::size_t i = 0; i < s.histogram.size(); ++i) s.histogram[i] = {i * bin_width, (i + 1) * bin_width, 0};
  for (std::size_t c : counts) ++s.histogram[c / bin_width].count;
  return s;
}

inline ordered_json to_json(const CorpusStats& s) {
  ordered_json hist = ordered_json::array();
  for (const auto& b : s.histogram) hist.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}});
  return {{"records", s.records}, {"mean", s.mean}, {"median", s.median},
          {"min", s.min},         {"max", s.max},   {"histogram", hist}};
}

}  // namespace labelloop
