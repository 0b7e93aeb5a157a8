// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>

#include "labelloop/backends.hpp"
#include "labelloop/util/hash.hpp"

namespace labelloop {

enum class PairwisePolicy : std::uint8_t { hashed, always_a, longer };

inline std::optional<PairwisePolicy> parse_pairwise_policy(std::string_view s) noexcept {
  if (s == "hashed") return PairwisePolicy::hashed;
  if (s == "always_a") return PairwisePolicy::always_a;
  if (s == "longer") return PairwisePolicy::longer;
  return std::nullopt;
}

struct MockTruth {
  bool malicious = false;
  Language language = Language::sh;
};

using MockTruthTable = std::unordered_map<std::string, MockTruth>;

/// Fault-injection rates. Each is a per-call probability in [0, 1].
struct MockOptions {
  double empty_rate = 0.0;
  double truncated_rate = 0.0;
  double malformed_rate = 0.0;
  /// Label flip probability is min(1, label_flip_rate * temperature).
  double label_flip_rate = 0.0;
  double low_confidence_rate = 0.0;
  /// Summary wording contradicts the emitted label.
  double incoherent_rate = 0.0;
  double transport_failure_rate = 0.0;
  double unparseable_verdict_rate = 0.0;
  bool omit_logprobs = false;
  PairwisePolicy pairwise = PairwisePolicy::hashed;
  std::shared_ptr<const MockTruthTable> truth;

  /// Returns a copy with any rate overridden by model handle params of the
  /// same name.
  MockOptions overridden_by(const std::map<std::string, std::string>& params) const {
    MockOptions o = *this;
    auto rate = [&](const char* key, double& field) {
      if (auto it = params.find(key); it != params.end()) field = std::stod(it->second);
    };
    rate("empty_rate", o.empty_rate);
    rate("truncated_rate", o.truncated_rate);
    rate("malformed_rate", o.malformed_rate);
    rate("label_flip_rate", o.label_flip_rate);
    rate("low_confidence_rate", o.low_confidence_rate);
    rate("incoherent_rate", o.incoherent_rate);
    rate("transport_failure_rate", o.transport_failure_rate);
    rate("unparseable_verdict_rate", o.unparseable_verdict_rate);
    if (auto it = params.find("omit_logprobs"); it != params.end()) o.omit_logprobs = it->second == "true";
    if (auto it = params.find("pairwise_policy"); it != params.end()) {
      if (auto p = parse_pairwise_policy(it->second)) o.pairwise = *p;
    }
    return o;
  }
};

inline MockOptions mock_options_from_json(const json& j) {
  MockOptions o;
  o.empty_rate = j.value("empty_rate", 0.0);
  o.truncated_rate = j.value("truncated_rate", 0.0);
  o.malformed_rate = j.value("malformed_rate", 0.0);
  o.label_flip_rate = j.value("label_flip_rate", 0.0);
  o.low_confidence_rate = j.value("low_confidence_rate", 0.0);
  o.incoherent_rate = j.value("incoherent_rate", 0.0);
  o.transport_failure_rate = j.value("transport_failure_rate", 0.0);
  o.unparseable_verdict_rate = j.value("unparseable_verdict_rate", 0.0);
  o.omit_logprobs = j.value("omit_logprobs", false);
  const std::string policy = j.value("pairwise_policy", std::string("hashed"));
  auto p = parse_pairwise_policy(policy);
  if (!p) throw InvalidConfig("unknown pairwise_policy '" + policy + "'");
  o.pairwise = *p;
  for (double r : {o.empty_rate, o.truncated_rate, o.malformed_rate, o.label_flip_rate, o.low_confidence_rate,
                   o.incoherent_rate, o.transport_failure_rate, o.unparseable_verdict_rate})
    if (!(r >= 0.0 && r <= 1.0)) throw InvalidConfig("mock rates must be within [0, 1]");
  return o;
}

/// Deterministic stand-in for annotator and judge models. Every output is a
/// pure function of (model identifier, subject, temperature, seed), so it is
/// identical across runs and thread schedules.
///
/// Summaries open with "Malicious" or "Benign"; the mock judge reads that
/// marker back, which lets tests plant coherence defects.
class MockBackend final : public Backend {
 public:
  MockBackend() = default;
  explicit MockBackend(MockOptions options) : options_(std::move(options)) {}

  Completion generate(const ModelHandle& model, const GenerationRequest& req) override {
    req.validate();
    calls_.fetch_add(1, std::memory_order_relaxed);
    const MockOptions opts = options_.overridden_by(model.params);
    const auto task_it = req.context.find("task");
    const std::string task = task_it == req.context.end() ? "annotate" : task_it->second;

    util::HashStream rng(stream_key(model, req, task));
    if (rng.bernoulli(opts.transport_failure_rate)) throw TransportError(503, "mock transport failure");

    if (task == "coherence") return judge_coherence(opts, req, rng);
    if (task == "pairwise") return judge_pairwise(opts, req, rng);
    return annotate(opts, req, rng);
  }

  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  void reset_calls() noexcept { calls_.store(0, std::memory_order_relaxed); }
  const MockOptions& options() const noexcept { return options_; }

  static constexpr std::array<const char*, 12> kBehaviours = {
      "writes data to a remote process",      "writes registry keys",
      "creates new processes",                "modifies proxy settings",
      "deletes registry keys",                "executes a shell command",
      "executes a JavaScript file",           "queries process information",
      "queries sensitive IE security settings", "drops cabinet archive files",
      "invokes the C# compiler",              "searches for file content"};

 private:
  static std::string context_value(const GenerationRequest& req, const char* key) {
    auto it = req.context.find(key);
    return it == req.context.end() ? std::string() : it->second;
  }

  static std::uint64_t stream_key(const ModelHandle& model, const GenerationRequest& req, const std::string& task) {
    util::Fnv1a h;
    h.add(model.identifier).add(task).add(req.temperature).add(req.seed.value_or(0));
    if (task == "annotate") {
      const std::string sha = context_value(req, "sha256");
      h.add(sha.empty() ? req.prompt : sha);
    } else if (task == "coherence") {
      h.add(context_value(req, "summary"));
    } else {
      h.add(context_value(req, "pair_id")).add(context_value(req, "summary_a")).add(context_value(req, "summary_b"));
    }
    return h.digest();
  }

  MockTruth truth_for(const MockOptions& opts, const std::string& sha) const {
    if (opts.truth) {
      if (auto it = opts.truth->find(sha); it != opts.truth->end()) return it->second;
    }
    const std::uint64_t h = util::Fnv1a().add(std::string_view("truth")).add(sha).digest();
    return {static_cast<bool>(h & 1U), kLanguages[(h >> 1) % kLanguages.size()]};
  }

  Completion annotate(const MockOptions& opts, const GenerationRequest& req, util::HashStream& rng) const {
    // Draw every variate up front so rates are independent of each other.
    const bool empty = rng.bernoulli(opts.empty_rate);
    const bool truncated = rng.bernoulli(opts.truncated_rate);
    const bool malformed = rng.bernoulli(opts.malformed_rate);
    const bool flip = rng.bernoulli(std::min(1.0, opts.label_flip_rate * req.temperature));
    const bool low_conf = rng.bernoulli(opts.low_confidence_rate);
    const bool incoherent = rng.bernoulli(opts.incoherent_rate);
    const double u_label = rng.next_unit();
    const double u_lang = rng.next_unit();
    const std::size_t behaviour = rng.below(kBehaviours.size());

    Completion c;
    if (empty) return c;

    std::string sha = context_value(req, "sha256");
    const MockTruth truth = truth_for(opts, sha);
    const bool label = truth.malicious != flip;
    const bool worded_malicious = label != incoherent;

    std::string summary = std::string(worded_malicious ? "Malicious" : "Benign") + " " +
                          std::string(to_string(truth.language)) + " script " + sha.substr(0, 8) + " that " +
                          kBehaviours[behaviour] + ".";
    ordered_json j;
    j["malicious"] = label;
    j["language"] = to_string(truth.language);
    if (!malformed) j["summary"] = summary;
    c.text = j.dump();

    if (truncated) {
      c.text.resize(c.text.size() * 3 / 5);
      c.finish_reason = FinishReason::length;
    }
    if (req.logprobs) {
      if (opts.omit_logprobs) throw ProtocolMissingLogprobs("mock");
      // high confidence lives in (0.9, 1]; low confidence in [0.5, 0.9)
      const double p_label = low_conf ? 0.5 + 0.4 * u_label : 1.0 - 0.1 * u_label * u_label;
      const double p_lang = 1.0 - 0.05 * u_lang * u_lang;
      c.label_token_logprob = std::log(p_label);
      c.language_token_logprob = std::log(p_lang);
    }
    return c;
  }

  Completion judge_coherence(const MockOptions& opts, const GenerationRequest& req, util::HashStream& rng) const {
    Completion c;
    if (rng.bernoulli(opts.unparseable_verdict_rate)) {
      c.text = "The summary is ambiguous.";
      return c;
    }
    const std::string summary = context_value(req, "summary");
    bool verdict;
    if (summary.rfind("Malicious", 0) == 0) verdict = true;
    else if (summary.rfind("Benign", 0) == 0) verdict = false;
    else verdict = rng.bernoulli(0.5);
    c.text = ordered_json{{"malicious", verdict}}.dump();
    return c;
  }

  Completion judge_pairwise(const MockOptions& opts, const GenerationRequest& req, util::HashStream& rng) const {
    Completion c;
    if (rng.bernoulli(opts.unparseable_verdict_rate)) {
      c.text = "Both summaries are equally good.";
      return c;
    }
    char choice = 'A';
    switch (opts.pairwise) {
      case PairwisePolicy::always_a: choice = 'A'; break;
      case PairwisePolicy::longer:
        choice = context_value(req, "summary_b").size() > context_value(req, "summary_a").size() ? 'B' : 'A';
        break;
      case PairwisePolicy::hashed: choice = rng.bernoulli(0.5) ? 'B' : 'A'; break;
    }
    c.text = ordered_json{{"choice", std::string(1, choice)}}.dump();
    return c;
  }

  MockOptions options_;
  std::atomic<std::size_t> calls_{0};
};

}  // namespace labelloop
