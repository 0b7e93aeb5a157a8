// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

#include "labelloop/corpus.hpp"
#include "labelloop/error.hpp"
#include "labelloop/prompts.hpp"

namespace labelloop {

struct GenerationRequest {
  std::string prompt;
  double temperature = 0.0;
  std::uint32_t max_output_tokens = 1024;
  std::optional<std::int64_t> seed;
  /// Ask the backend for per-token log-probabilities.
  bool logprobs = false;
  /// Variables the prompt was rendered from, plus a "task" tag. Remote
  /// backends only transmit `prompt`; the mock backend reads these.
  std::map<std::string, std::string> context;

  void validate() const {
    if (!(temperature >= 0.0 && temperature <= 2.0))
      throw InvalidRequest("temperature must be in [0, 2], got " + std::to_string(temperature));
    if (max_output_tokens < 1) throw InvalidRequest("max_output_tokens must be >= 1");
  }
};

enum class FinishReason : std::uint8_t { stop, length, error };

inline std::string_view to_string(FinishReason f) noexcept {
  switch (f) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
  }
  return "?";
}

inline FinishReason parse_finish_reason(std::string_view s) noexcept {
  if (s == "length" || s == "max_tokens") return FinishReason::length;
  if (s == "error") return FinishReason::error;
  return FinishReason::stop;
}

struct Completion {
  std::string text;
  /// Natural-log probability of the first token of the `malicious` value.
  std::optional<double> label_token_logprob;
  /// Same, for the `language` value.
  std::optional<double> language_token_logprob;
  FinishReason finish_reason = FinishReason::stop;

  friend bool operator==(const Completion&, const Completion&) = default;
};

enum class ModelRole : std::uint8_t { annotator, judge };

inline std::string_view to_string(ModelRole r) noexcept { return r == ModelRole::judge ? "judge" : "annotator"; }

struct ModelHandle {
  std::string identifier;
  /// "mock", or an http(s) base URL.
  std::string endpoint = "mock";
  ModelRole role = ModelRole::annotator;
  /// Backend-specific options (mock fault rates, fine-tuner provenance).
  std::map<std::string, std::string> params;

  void validate() const {
    if (identifier.empty()) throw InvalidConfig("model identifier must be non-empty");
  }

  bool is_mock() const noexcept { return endpoint == "mock" || endpoint.rfind("mock:", 0) == 0; }

  friend bool operator==(const ModelHandle&, const ModelHandle&) = default;
};

inline ordered_json to_json(const ModelHandle& m) {
  ordered_json params = ordered_json::object();
  for (const auto& [k, v] : m.params) params[k] = v;
  return {{"identifier", m.identifier}, {"endpoint", m.endpoint}, {"role", to_string(m.role)}, {"params", params}};
}

inline ModelHandle model_from_json(const json& j) {
  ModelHandle m;
  m.identifier = j.at("identifier").get<std::string>();
  m.endpoint = j.value("endpoint", std::string("mock"));
  const std::string role = j.value("role", std::string("annotator"));
  if (role != "annotator" && role != "judge") throw InvalidConfig("unknown model role '" + role + "'");
  m.role = role == "judge" ? ModelRole::judge : ModelRole::annotator;
  if (auto it = j.find("params"); it != j.end() && it->is_object()) {
    for (auto& [k, v] : it->items()) m.params[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
  m.validate();
  return m;
}

/// Uniform text-generation interface. Implementations must be safe for
/// concurrent calls.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion generate(const ModelHandle& model, const GenerationRequest& request) = 0;
};

struct AnnotationDraft {
  std::string sha256;
  double temperature = 0.0;
  bool malicious = false;
  Language language = Language::sh;
  std::string summary;
  std::optional<double> label_probability;
  std::optional<double> language_probability;
  std::string raw_text;

  friend bool operator==(const AnnotationDraft&, const AnnotationDraft&) = default;
};

enum class ParseDefect : std::uint8_t { Empty, Truncated, IncompleteJson };

inline std::string_view to_string(ParseDefect d) noexcept {
  switch (d) {
    case ParseDefect::Empty: return "Empty";
    case ParseDefect::Truncated: return "Truncated";
    case ParseDefect::IncompleteJson: return "IncompleteJson";
  }
  return "?";
}

inline std::optional<ParseDefect> parse_defect(std::string_view s) noexcept {
  for (ParseDefect d : {ParseDefect::Empty, ParseDefect::Truncated, ParseDefect::IncompleteJson})
    if (to_string(d) == s) return d;
  return std::nullopt;
}

struct ParseFailure {
  std::string sha256;
  double temperature = 0.0;
  ParseDefect defect = ParseDefect::Empty;
  std::string raw_text;

  friend bool operator==(const ParseFailure&, const ParseFailure&) = default;
};

using AnnotationOutcome = std::variant<AnnotationDraft, ParseFailure>;

/// Lenient language-name parse for model output ("bash", "PowerShell", ...).
inline std::optional<Language> parse_language_name(std::string_view text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (auto l = parse_language(s)) return l;
  static const std::map<std::string, Language, std::less<>> kAliases = {
      {"bash", Language::sh},       {"shell", Language::sh},       {"zsh", Language::sh},
      {"batch", Language::bat},     {"cmd", Language::bat},        {"javascript", Language::js},
      {"jscript", Language::js},    {"powershell", Language::ps},  {"ps1", Language::ps},
      {"pwsh", Language::ps},       {"python", Language::py},      {"python3", Language::py}};
  if (auto it = kAliases.find(s); it != kAliases.end()) return it->second;
  return std::nullopt;
}

namespace detail {

/// Byte range of the first balanced top-level JSON object in `text`.
struct ObjectSpan {
  std::size_t begin = std::string_view::npos;
  std::size_t end = std::string_view::npos;  // one past the closing brace; npos when unterminated
};

inline ObjectSpan scan_object(std::string_view text) {
  ObjectSpan span;
  span.begin = text.find('{');
  if (span.begin == std::string_view::npos) return span;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = span.begin; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{' || c == '[') ++depth;
    else if (c == '}' || c == ']') {
      if (--depth == 0) {
        span.end = i + 1;
        return span;
      }
    }
  }
  return span;
}

}  // namespace detail

/// Offset of the first byte of the value bound to `key` at the top level of
/// the first JSON object in `text`, or npos. Works on unterminated objects.
inline std::size_t find_json_value_offset(std::string_view text, std::string_view key) {
  const std::size_t start = text.find('{');
  if (start == std::string_view::npos) return std::string_view::npos;
  int depth = 0;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '"') {
      std::string decoded;
      std::size_t j = i + 1;
      for (; j < text.size() && text[j] != '"'; ++j) {
        if (text[j] == '\\' && j + 1 < text.size()) ++j;
        decoded.push_back(text[j]);
      }
      if (j >= text.size()) return std::string_view::npos;
      std::size_t k = j + 1;
      while (k < text.size() && std::isspace(static_cast<unsigned char>(text[k]))) ++k;
      if (depth == 1 && k < text.size() && text[k] == ':' && decoded == key) {
        ++k;
        while (k < text.size() && std::isspace(static_cast<unsigned char>(text[k]))) ++k;
        return k < text.size() ? k : std::string_view::npos;
      }
      i = j;
    } else if (c == '{' || c == '[') {
      ++depth;
    } else if (c == '}' || c == ']') {
      if (--depth == 0) return std::string_view::npos;
    }
  }
  return std::string_view::npos;
}

struct ParsedAnnotation {
  bool malicious = false;
  Language language = Language::sh;
  std::string summary;
};

/// Classifies a completion into exactly one of {parsed, Empty, Truncated,
/// IncompleteJson}.
inline std::variant<ParsedAnnotation, ParseDefect> parse_annotation_text(std::string_view text,
                                                                         FinishReason finish) {
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) return ParseDefect::Empty;
  if (finish == FinishReason::length) return ParseDefect::Truncated;

  const detail::ObjectSpan span = detail::scan_object(text);
  if (span.begin == std::string_view::npos) return ParseDefect::IncompleteJson;
  if (span.end == std::string_view::npos) return ParseDefect::Truncated;

  json j = json::parse(text.substr(span.begin, span.end - span.begin), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return ParseDefect::IncompleteJson;

  auto mal = j.find("malicious");
  auto lang = j.find("language");
  auto summary = j.find("summary");
  if (mal == j.end() || !mal->is_boolean()) return ParseDefect::IncompleteJson;
  if (lang == j.end() || !lang->is_string()) return ParseDefect::IncompleteJson;
  if (summary == j.end() || !summary->is_string()) return ParseDefect::IncompleteJson;
  auto parsed_lang = parse_language_name(lang->get<std::string>());
  if (!parsed_lang) return ParseDefect::IncompleteJson;
  std::string text_summary = summary->get<std::string>();
  if (text_summary.find_first_not_of(" \t\r\n") == std::string::npos) return ParseDefect::IncompleteJson;
  return ParsedAnnotation{mal->get<bool>(), *parsed_lang, std::move(text_summary)};
}

inline std::optional<double> probability_from_logprob(std::optional<double> logprob) {
  if (!logprob || !std::isfinite(*logprob)) return std::nullopt;
  return std::exp(std::min(*logprob, 0.0));
}

struct AnnotateOptions {
  std::string template_name = "annotator";
  std::uint32_t max_output_tokens = 1024;
  std::optional<std::int64_t> seed;
  bool logprobs = true;
};

/// Prompts `model` with the record's script and parses the structured
/// annotation it returns.
inline AnnotationOutcome annotate(Backend& backend, const PromptLibrary& prompts, const ModelHandle& model,
                                  const ScriptRecord& record, double temperature,
                                  const AnnotateOptions& options = {}) {
  if (!record.content) throw MissingContent(record.sha256);
  GenerationRequest req;
  req.prompt = prompts.render(options.template_name, {{"code", *record.content}});
  req.temperature = temperature;
  req.max_output_tokens = options.max_output_tokens;
  req.seed = options.seed;
  req.logprobs = options.logprobs;
  req.context = {{"task", "annotate"}, {"sha256", record.sha256}, {"code", *record.content}};
  req.validate();

  Completion c = backend.generate(model, req);
  auto parsed = parse_annotation_text(c.text, c.finish_reason);
  if (auto* defect = std::get_if<ParseDefect>(&parsed))
    return ParseFailure{record.sha256, temperature, *defect, std::move(c.text)};
  auto& p = std::get<ParsedAnnotation>(parsed);
  return AnnotationDraft{record.sha256,
                         temperature,
                         p.malicious,
                         p.language,
                         std::move(p.summary),
                         probability_from_logprob(c.label_token_logprob),
                         probability_from_logprob(c.language_token_logprob),
                         std::move(c.text)};
}

inline ordered_json to_json(const AnnotationOutcome& outcome) {
  ordered_json j;
  if (const auto* d = std::get_if<AnnotationDraft>(&outcome)) {
    j["sha256"] = d->sha256;
    j["temperature"] = d->temperature;
    j["status"] = "ok";
    j["malicious"] = d->malicious;
    j["language"] = to_string(d->language);
    j["summary"] = d->summary;
    j["label_probability"] = d->label_probability ? json(*d->label_probability) : json(nullptr);
    j["language_probability"] = d->language_probability ? json(*d->language_probability) : json(nullptr);
    j["raw_text"] = d->raw_text;
  } else {
    const auto& f = std::get<ParseFailure>(outcome);
    j["sha256"] = f.sha256;
    j["temperature"] = f.temperature;
    j["status"] = to_string(f.defect);
    j["raw_text"] = f.raw_text;
  }
  return j;
}

inline AnnotationOutcome outcome_from_json(const json& j) {
  const std::string sha = j.at("sha256").get<std::string>();
  if (!is_sha256(sha)) throw InvalidField("sha256 must be 64 lowercase hex chars");
  const double temperature = j.at("temperature").get<double>();
  const std::string status = j.at("status").get<std::string>();
  const std::string raw = j.value("raw_text", std::string());
  if (status != "ok") {
    auto defect = parse_defect(status);
    if (!defect) throw InvalidField("unknown annotation status '" + status + "'");
    return ParseFailure{sha, temperature, *defect, raw};
  }
  AnnotationDraft d;
  d.sha256 = sha;
  d.temperature = temperature;
  d.malicious = j.at("malicious").get<bool>();
  auto lang = parse_language(j.at("language").get<std::string>());
  if (!lang) throw InvalidField("bad language in annotation for " + sha);
  d.language = *lang;
  d.summary = j.at("summary").get<std::string>();
  if (auto it = j.find("label_probability"); it != j.end() && !it->is_null()) d.label_probability = it->get<double>();
  if (auto it = j.find("language_probability"); it != j.end() && !it->is_null())
    d.language_probability = it->get<double>();
  d.raw_text = raw;
  return d;
}

inline const std::string& outcome_sha(const AnnotationOutcome& o) {
  return std::visit([](const auto& v) -> const std::string& { return v.sha256; }, o);
}

}  // namespace labelloop
