// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "labelloop/backends.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/util/percent.hpp"
#include "labelloop/util/pool.hpp"

namespace labelloop {

/// Shortest round-trip decimal form ("0.6", "0.85").
inline std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct AnnotationSet {
  double temperature = 0.0;
  std::map<std::string, AnnotationDraft> drafts;
  std::map<std::string, ParseFailure> failures;

  std::size_t size() const noexcept { return drafts.size() + failures.size(); }

  /// Inserts an outcome. A sha may appear once across drafts and failures.
  void add(AnnotationOutcome outcome) {
    const std::string sha = outcome_sha(outcome);
    if (drafts.count(sha) || failures.count(sha)) throw DuplicateSha(sha + " at temperature " + format_number(temperature));
    if (auto* d = std::get_if<AnnotationDraft>(&outcome)) drafts.emplace(sha, std::move(*d));
    else failures.emplace(sha, std::get<ParseFailure>(std::move(outcome)));
  }

  static AnnotationSet from_outcomes(double temperature, std::vector<AnnotationOutcome> outcomes) {
    AnnotationSet s;
    s.temperature = temperature;
    for (auto& o : outcomes) s.add(std::move(o));
    return s;
  }
};

/// Annotation sets keyed by the temperature that produced them.
using AnnotationSets = std::map<double, AnnotationSet>;

inline const AnnotationSet* find_set(const AnnotationSets& sets, double temperature) {
  for (const auto& [t, s] : sets)
    if (std::abs(t - temperature) < 1e-9) return &s;
  return nullptr;
}

struct FilterConfig {
  std::vector<double> temperatures{0.4, 0.6, 0.8};
  double alpha = 0.9;
  double select_temperature = 0.6;
  ModelHandle judge{"coherence-judge", "mock", ModelRole::judge, {}};
  /// Also require unanimous language labels in the consensus check.
  bool language_consensus = false;
  std::string judge_template = "coherence";
  std::uint32_t judge_max_output_tokens = 64;
  std::size_t workers = 1;

  void validate() const {
    if (temperatures.empty()) throw InvalidConfig("at least one temperature is required");
    std::set<double> unique(temperatures.begin(), temperatures.end());
    if (unique.size() != temperatures.size()) throw InvalidConfig("temperatures must be distinct");
    for (double t : temperatures)
      if (!(t >= 0.0 && t <= 2.0)) throw InvalidConfig("temperature out of range [0, 2]: " + format_number(t));
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidConfig("alpha must be within [0, 1]");
    if (std::none_of(temperatures.begin(), temperatures.end(),
                     [&](double t) { return std::abs(t - select_temperature) < 1e-9; }))
      throw InvalidConfig("select_temperature " + format_number(select_temperature) + " is not among temperatures");
    judge.validate();
  }
};

using DropHistogram = std::map<std::string, std::size_t>;

namespace reason {
inline constexpr const char* kMissingAtTemperature = "MissingAtTemperature";
inline constexpr const char* kLabelDisagreement = "LabelDisagreement";
inline constexpr const char* kLanguageDisagreement = "LanguageDisagreement";
inline constexpr const char* kBelowThreshold = "BelowThreshold";
inline constexpr const char* kJudgeMismatch = "JudgeMismatch";
inline constexpr const char* kJudgeUnavailable = "JudgeUnavailable";
}  // namespace reason

struct StageCount {
  std::string stage;
  std::size_t input = 0;
  std::size_t kept = 0;
  DropHistogram drops;

  std::size_t dropped() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, c] : drops) n += c;
    return n;
  }
};

struct DropRecord {
  std::string stage;
  std::string reason;
  friend bool operator==(const DropRecord&, const DropRecord&) = default;
};

/// Audit trail of one pipeline run, tracked on the select-temperature set.
struct FilterReport {
  double select_temperature = 0.6;
  std::vector<StageCount> stages;
  std::size_t final_kept = 0;
  /// sha256 -> the single (stage, reason) that removed it.
  std::map<std::string, DropRecord> dropped;
  /// stage -> temperature -> drafts surviving that stage.
  std::map<std::string, std::map<double, std::size_t>> per_temperature;
};

/// dropped / input as a percentage, round-half-up to two decimals.
inline util::Percent reduction_percent(std::size_t input, std::size_t dropped) {
  if (input == 0) return {};
  return util::percent_of(dropped, input);
}

// ---------------------------------------------------------------------------
// Stages

struct StageResult {
  AnnotationSet kept;
  std::map<std::string, std::string> dropped;  // sha -> reason
};

inline DropHistogram histogram_of(const std::map<std::string, std::string>& dropped) {
  DropHistogram h;
  for (const auto& [_, r] : dropped) ++h[r];
  return h;
}

inline StageResult sanity_stage(const AnnotationSet& set) {
  StageResult r;
  r.kept.temperature = set.temperature;
  r.kept.drafts = set.drafts;
  for (const auto& [sha, f] : set.failures) r.dropped.emplace(sha, std::string(to_string(f.defect)));
  return r;
}

/// Keeps parse-successful drafts; the histogram counts failures by defect.
inline std::pair<AnnotationSet, DropHistogram> sanity_filter(const AnnotationSet& set) {
  StageResult r = sanity_stage(set);
  return {std::move(r.kept), histogram_of(r.dropped)};
}

inline std::map<double, StageResult> consensus_stage(const AnnotationSets& sets, bool language_consensus = false) {
  std::map<double, StageResult> out;
  for (const auto& [t, s] : sets) {
    StageResult& r = out[t];
    r.kept.temperature = t;
    for (const auto& [sha, draft] : s.drafts) {
      const char* why = nullptr;
      for (const auto& [t2, other] : sets) {
        auto it = other.drafts.find(sha);
        if (it == other.drafts.end()) {
          why = reason::kMissingAtTemperature;
          break;
        }
      }
      if (why == nullptr) {
        for (const auto& [t2, other] : sets) {
          const AnnotationDraft& d2 = other.drafts.at(sha);
          if (d2.malicious != draft.malicious) {
            why = reason::kLabelDisagreement;
            break;
          }
          if (language_consensus && d2.language != draft.language) why = reason::kLanguageDisagreement;
        }
      }
      if (why == nullptr) r.kept.drafts.emplace(sha, draft);
      else r.dropped.emplace(sha, why);
    }
  }
  return out;
}

/// Keeps a sha only when it has a draft at every temperature and all drafts
/// agree on `malicious` (and on `language` when requested).
inline AnnotationSets consensus_filter(const AnnotationSets& sets, bool language_consensus = false) {
  AnnotationSets out;
  for (auto& [t, r] : consensus_stage(sets, language_consensus)) out.emplace(t, std::move(r.kept));
  return out;
}

inline StageResult confidence_stage(const AnnotationSet& set, double alpha) {
  StageResult r;
  r.kept.temperature = set.temperature;
  for (const auto& [sha, d] : set.drafts) {
    // A zero threshold admits every draft, with or without a probability.
    if (alpha <= 0.0) {
      r.kept.drafts.emplace(sha, d);
      continue;
    }
    if (!d.label_probability) throw MissingConfidence(sha);
    if (*d.label_probability >= alpha) r.kept.drafts.emplace(sha, d);
    else r.dropped.emplace(sha, reason::kBelowThreshold);
  }
  return r;
}

/// Keeps drafts whose label probability is >= alpha (inclusive).
inline AnnotationSet confidence_filter(const AnnotationSet& set, double alpha) {
  return confidence_stage(set, alpha).kept;
}

/// Reads a maliciousness verdict from judge output: a JSON object with a
/// boolean `malicious` (or a `verdict`/`label` string), or leading text such
/// as "malicious", "benign", "true", "false".
inline std::optional<bool> parse_verdict(std::string_view text) {
  auto word = [](std::string_view w) -> std::optional<bool> {
    std::string s;
    for (char c : w) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    for (const char* yes : {"malicious", "true", "yes"})
      if (s.rfind(yes, 0) == 0) return true;
    for (const char* no : {"benign", "clean", "false", "no"})
      if (s.rfind(no, 0) == 0) return false;
    return std::nullopt;
  };
  const detail::ObjectSpan span = detail::scan_object(text);
  if (span.begin != std::string_view::npos && span.end != std::string_view::npos) {
    json j = json::parse(text.substr(span.begin, span.end - span.begin), nullptr, false);
    if (j.is_object()) {
      if (auto it = j.find("malicious"); it != j.end() && it->is_boolean()) return it->get<bool>();
      for (const char* key : {"verdict", "label"})
        if (auto it = j.find(key); it != j.end() && it->is_string()) return word(it->get<std::string>());
      return std::nullopt;
    }
  }
  const auto first = text.find_first_not_of(" \t\r\n\"'`*");
  if (first == std::string_view::npos) return std::nullopt;
  return word(text.substr(first));
}

struct JudgeContext {
  Backend& backend;
  const PromptLibrary& prompts;
};

inline StageResult coherence_stage(const AnnotationSet& set, const ModelHandle& judge, JudgeContext ctx,
                                   const FilterConfig& config) {
  std::vector<const AnnotationDraft*> drafts;
  drafts.reserve(set.drafts.size());
  for (const auto& [_, d] : set.drafts) drafts.push_back(&d);

  // 0 keep, 1 mismatch, 2 unavailable
  std::vector<int> verdicts(drafts.size(), 2);
  util::parallel_for(drafts.size(), config.workers, [&](std::size_t i) {
    const AnnotationDraft& d = *drafts[i];
    GenerationRequest req;
    req.prompt = ctx.prompts.render(config.judge_template, {{"summary", d.summary}});
    req.temperature = 0.0;
    req.max_output_tokens = config.judge_max_output_tokens;
    req.context = {{"task", "coherence"}, {"sha256", d.sha256}, {"summary", d.summary}};
    std::optional<bool> verdict;
    try {
      verdict = parse_verdict(ctx.backend.generate(judge, req).text);
    } catch (const TransportError&) {
      verdict.reset();
    }
    verdicts[i] = !verdict ? 2 : (*verdict == d.malicious ? 0 : 1);
  });

  StageResult r;
  r.kept.temperature = set.temperature;
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    const std::string& sha = drafts[i]->sha256;
    if (verdicts[i] == 0) r.kept.drafts.emplace(sha, *drafts[i]);
    else r.dropped.emplace(sha, verdicts[i] == 1 ? reason::kJudgeMismatch : reason::kJudgeUnavailable);
  }
  return r;
}

/// Asks the judge to classify each summary on its own; drafts whose verdict
/// disagrees with their label, or whose judge call fails, are dropped.
inline AnnotationSet coherence_filter(const AnnotationSet& set, const ModelHandle& judge, JudgeContext ctx,
                                      const FilterConfig& config = {}) {
  return coherence_stage(set, judge, ctx, config).kept;
}

struct PipelineResult {
  Dataset pseudo;
  FilterReport report;
};

struct PipelineOptions {
  /// Supplies content and emission order; without it records are emitted
  /// in ascending sha256 order with no content.
  const Dataset* corpus = nullptr;
  std::uint32_t iteration = 1;
};

/// Full staged filter. Every stage is applied at every configured
/// temperature; the emitted records and the lineage report follow the
/// select-temperature set.
inline PipelineResult run_pipeline(const AnnotationSets& sets, const FilterConfig& config, JudgeContext judge,
                                   const PipelineOptions& options = {}) {
  config.validate();
  AnnotationSets working;
  for (double t : config.temperatures) {
    const AnnotationSet* s = find_set(sets, t);
    if (s == nullptr) throw InvalidConfig("no annotation set for temperature " + format_number(t));
    working.emplace(t, *s);
  }
  const double select = [&] {
    for (const auto& [t, _] : working)
      if (std::abs(t - config.select_temperature) < 1e-9) return t;
    return config.select_temperature;
  }();

  FilterReport report;
  report.select_temperature = select;
  auto record_stage = [&](const char* name, std::map<double, StageResult>& results) {
    const StageResult& sel = results.at(select);
    StageCount sc;
    sc.stage = name;
    sc.kept = sel.kept.drafts.size();
    sc.drops = histogram_of(sel.dropped);
    sc.input = sc.kept + sc.dropped();
    for (const auto& [sha, why] : sel.dropped) report.dropped.emplace(sha, DropRecord{name, why});
    report.stages.push_back(std::move(sc));
    for (auto& [t, r] : results) {
      report.per_temperature[name][t] = r.kept.drafts.size();
      working[t] = std::move(r.kept);
    }
  };

  {
    std::map<double, StageResult> results;
    for (const auto& [t, s] : working) results.emplace(t, sanity_stage(s));
    record_stage("sanity", results);
  }
  {
    auto results = consensus_stage(working, config.language_consensus);
    record_stage("consensus", results);
  }
  {
    std::map<double, StageResult> results;
    for (const auto& [t, s] : working) results.emplace(t, confidence_stage(s, config.alpha));
    record_stage("confidence", results);
  }
  {
    std::map<double, StageResult> results;
    for (const auto& [t, s] : working) results.emplace(t, coherence_stage(s, config.judge, judge, config));
    record_stage("coherence", results);
  }

  const AnnotationSet& final_set = working.at(select);
  report.final_kept = final_set.drafts.size();

  auto to_record = [&](const AnnotationDraft& d, const ScriptRecord* source) {
    ScriptRecord r;
    r.sha256 = d.sha256;
    if (source) r.content = source->content;
    r.language = d.language;
    r.malicious = d.malicious;
    r.summary = d.summary;
    r.provenance = Provenance::pseudo;
    r.iteration = options.iteration;
    return r;
  };
  std::vector<ScriptRecord> records;
  records.reserve(final_set.drafts.size());
  if (options.corpus) {
    for (const ScriptRecord& src : *options.corpus)
      if (auto it = final_set.drafts.find(src.sha256); it != final_set.drafts.end())
        records.push_back(to_record(it->second, &src));
    for (const auto& [sha, d] : final_set.drafts)
      if (!options.corpus->contains(sha)) records.push_back(to_record(d, nullptr));
  } else {
    for (const auto& [_, d] : final_set.drafts) records.push_back(to_record(d, nullptr));
  }
  return {Dataset(std::move(records), "pseudo"), std::move(report)};
}

inline ordered_json to_json(const FilterConfig& c) {
  return {{"temperatures", c.temperatures},
          {"alpha", c.alpha},
          {"select_temperature", c.select_temperature},
          {"judge", to_json(c.judge)},
          {"language_consensus", c.language_consensus},
          {"judge_template", c.judge_template},
          {"judge_max_output_tokens", c.judge_max_output_tokens}};
}

/// Missing keys keep their defaults (temperatures {0.4, 0.6, 0.8},
/// alpha 0.9, select 0.6).
inline FilterConfig filter_config_from_json(const json& j) {
  FilterConfig c;
  if (!j.is_object()) throw InvalidConfig("filter config must be an object");
  if (auto it = j.find("temperatures"); it != j.end()) c.temperatures = it->get<std::vector<double>>();
  c.alpha = j.value("alpha", c.alpha);
  c.select_temperature = j.value("select_temperature", c.select_temperature);
  if (auto it = j.find("judge"); it != j.end()) {
    c.judge = model_from_json(*it);
    c.judge.role = ModelRole::judge;
  }
  c.language_consensus = j.value("language_consensus", c.language_consensus);
  c.judge_template = j.value("judge_template", c.judge_template);
  c.judge_max_output_tokens = j.value("judge_max_output_tokens", c.judge_max_output_tokens);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Retention sweep

struct RetentionRow {
  double alpha = 0.0;
  double temperature = 0.0;
  util::Percent label_retention;
  std::optional<util::Percent> language_retention;
};

/// Share of parse-valid drafts kept by the confidence check alone, for each
/// (alpha, temperature). Language retention applies the same threshold to
/// the language-token probability and is omitted when any draft lacks one.
inline std::vector<RetentionRow> retention_sweep(const AnnotationSets& sets, std::vector<double> alphas) {
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  std::vector<RetentionRow> rows;
  for (double alpha : alphas) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidConfig("alpha must be within [0, 1]");
    for (const auto& [t, s] : sets) {
      std::size_t label_kept = 0;
      std::size_t lang_kept = 0;
      bool lang_available = true;
      for (const auto& [sha, d] : s.drafts) {
        if (!d.label_probability) throw MissingConfidence(sha);
        if (*d.label_probability >= alpha) ++label_kept;
        if (!d.language_probability) lang_available = false;
        else if (*d.language_probability >= alpha) ++lang_kept;
      }
      const std::size_t n = s.drafts.size();
      RetentionRow row;
      row.alpha = alpha;
      row.temperature = t;
      row.label_retention = n == 0 ? util::Percent{10000} : util::percent_of(label_kept, n);
      if (lang_available) row.language_retention = n == 0 ? util::Percent{10000} : util::percent_of(lang_kept, n);
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string retention_csv(const std::vector<RetentionRow>& rows) {
  std::string out = "alpha,temperature,label_retention,language_retention\n";
  for (const auto& r : rows) {
    out += format_number(r.alpha) + "," + format_number(r.temperature) + "," + r.label_retention.str() + "," +
           (r.language_retention ? r.language_retention->str() : std::string()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report serialization

inline ordered_json to_json(const FilterReport& r) {
  ordered_json stages = ordered_json::array();
  for (const auto& s : r.stages) {
    ordered_json drops = ordered_json::object();
    for (const auto& [k, v] : s.drops) drops[k] = v;
    stages.push_back({{"stage", s.stage},
                      {"input", s.input},
                      {"kept", s.kept},
                      {"dropped", s.dropped()},
                      {"reduction_percent", reduction_percent(s.input, s.dropped()).str()},
                      {"drop_reasons", drops}});
  }
  ordered_json per_t = ordered_json::object();
  for (const auto& [stage, m] : r.per_temperature) {
    ordered_json row = ordered_json::object();
    for (const auto& [t, n] : m) row[format_number(t)] = n;
    per_t[stage] = row;
  }
  ordered_json dropped = ordered_json::array();
  for (const auto& [sha, d] : r.dropped) dropped.push_back({{"sha256", sha}, {"stage", d.stage}, {"reason", d.reason}});
  return {{"select_temperature", r.select_temperature},
          {"stages", stages},
          {"final_kept", r.final_kept},
          {"per_temperature", per_t},
          {"dropped", dropped}};
}

inline FilterReport filter_report_from_json(const json& j) {
  FilterReport r;
  r.select_temperature = j.at("select_temperature").get<double>();
  for (const auto& s : j.at("stages")) {
    StageCount sc;
    sc.stage = s.at("stage").get<std::string>();
    sc.input = s.at("input").get<std::size_t>();
    sc.kept = s.at("kept").get<std::size_t>();
    for (auto& [k, v] : s.at("drop_reasons").items()) sc.drops[k] = v.get<std::size_t>();
    r.stages.push_back(std::move(sc));
  }
  r.final_kept = j.at("final_kept").get<std::size_t>();
  if (auto it = j.find("per_temperature"); it != j.end())
    for (auto& [stage, m] : it->items())
      for (auto& [t, n] : m.items()) r.per_temperature[stage][std::stod(t)] = n.get<std::size_t>();
  if (auto it = j.find("dropped"); it != j.end())
    for (const auto& d : *it)
      r.dropped.emplace(d.at("sha256").get<std::string>(),
                        DropRecord{d.at("stage").get<std::string>(), d.at("reason").get<std::string>()});
  return r;
}

inline std::string render_text(const FilterReport& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-11s %10s %10s %10s %10s  %s\n", "Stage", "Input", "Kept", "Dropped",
                "Reduction", "Reasons");
  os << line;
  for (const auto& s : r.stages) {
    std::string reasons;
    for (const auto& [k, v] : s.drops) reasons += (reasons.empty() ? "" : " ") + k + "=" + std::to_string(v);
    const std::string pct = reduction_percent(s.input, s.dropped()).str() + "%";
    std::snprintf(line, sizeof line, "%-11s %10zu %10zu %10zu %10s  %s\n", s.stage.c_str(), s.input, s.kept,
                  s.dropped(), pct.c_str(), reasons.c_str());
    os << line;
  }
  os << "final kept (t=" << format_number(r.select_temperature) << "): " << r.final_kept << "\n";
  return os.str();
}

}  // namespace labelloop
