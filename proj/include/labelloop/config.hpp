// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "labelloop/backends.hpp"
#include "labelloop/filterpipe.hpp"
#include "labelloop/finetuner.hpp"
#include "labelloop/http_backend.hpp"
#include "labelloop/mock_backend.hpp"
#include "labelloop/selfloop.hpp"
#include "labelloop/util/fsio.hpp"

namespace labelloop {

/// Expands ${NAME} references from the environment. An unset variable is a
/// configuration error.
inline std::string expand_env(const std::string& value) {
  std::string out;
  std::size_t pos = 0;
  while (pos < value.size()) {
    const auto open = value.find("${", pos);
    if (open == std::string::npos) {
      out.append(value, pos);
      break;
    }
    const auto close = value.find('}', open + 2);
    if (close == std::string::npos) throw InvalidConfig("unterminated ${ in '" + value + "'");
    out.append(value, pos, open - pos);
    const std::string name = value.substr(open + 2, close - open - 2);
    const char* v = std::getenv(name.c_str());
    if (v == nullptr) throw InvalidConfig("environment variable " + name + " is not set");
    out += v;
    pos = close + 1;
  }
  return out;
}

/// One model endpoint: the handle to call plus client settings for it.
struct BackendConfig {
  ModelHandle model;
  MockOptions mock;
  HttpBackendOptions http;
};

inline BackendConfig backend_config_from_json(const json& j, ModelRole role, const std::string& default_id) {
  if (!j.is_object()) throw InvalidConfig("backend config must be an object");
  BackendConfig b;
  b.model.identifier = j.value("model", default_id);
  b.model.endpoint = j.value("endpoint", std::string("mock"));
  b.model.role = role;
  if (auto it = j.find("params"); it != j.end())
    for (auto& [k, v] : it->items()) b.model.params[k] = v.is_string() ? v.get<std::string>() : v.dump();
  if (auto it = j.find("mock"); it != j.end()) b.mock = mock_options_from_json(*it);
  if (auto it = j.find("auth_token"); it != j.end()) b.http.auth_token = expand_env(it->get<std::string>());
  b.http.completions_path = j.value("completions_path", b.http.completions_path);
  b.http.timeout = std::chrono::seconds(j.value("timeout_s", static_cast<long>(b.http.timeout.count())));
  b.http.retry.max_attempts = j.value("retries", b.http.retry.max_attempts);
  b.http.retry.backoff_base = std::chrono::milliseconds(j.value("backoff_ms", 500L));
  if (b.http.retry.max_attempts < 1) throw InvalidConfig("retries must be at least 1");
  b.model.validate();
  return b;
}

/// Backend that serves `model`: mock endpoints go to a MockBackend with the
/// configured fault rates, anything else to the HTTP client.
inline std::shared_ptr<Backend> make_backend(const BackendConfig& b) {
  return std::make_shared<RoutingBackend>(std::make_shared<MockBackend>(b.mock),
                                          std::make_shared<HttpBackend>(b.http));
}

struct FinetunerConfig {
  std::string kind = "mock";
  MockFinetunerOptions mock;
  HttpFinetunerOptions http;
};

inline FinetunerConfig finetuner_config_from_json(const json& j) {
  FinetunerConfig f;
  if (!j.is_object()) throw InvalidConfig("finetuner config must be an object");
  f.kind = j.value("kind", f.kind);
  if (f.kind == "mock") {
    f.mock = mock_finetuner_options_from_json(j);
  } else if (f.kind == "http") {
    f.http.endpoint = j.value("endpoint", std::string());
    if (f.http.endpoint.empty()) throw InvalidConfig("http finetuner requires an endpoint");
    f.http.inference_endpoint = j.value("inference_endpoint", std::string());
    if (auto it = j.find("auth_token"); it != j.end()) f.http.auth_token = expand_env(it->get<std::string>());
    f.http.poll_interval = std::chrono::milliseconds(j.value("poll_interval_ms", 30000L));
    f.http.deadline = std::chrono::milliseconds(j.value("deadline_ms", 72L * 3600 * 1000));
    f.http.retry.max_attempts = j.value("retries", 3);
    f.http.retry.backoff_base = std::chrono::milliseconds(j.value("backoff_ms", 500L));
  } else {
    throw InvalidConfig("unknown finetuner kind '" + f.kind + "'");
  }
  return f;
}

inline std::unique_ptr<Finetuner> make_finetuner(const FinetunerConfig& f) {
  if (f.kind == "http") return std::make_unique<HttpFinetuner>(f.http);
  return std::make_unique<MockFinetuner>(f.mock);
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path pairs;
  std::filesystem::path vote_log;
  std::filesystem::path static_dir;
  std::filesystem::path filter_report;
  std::size_t pairs_per_evaluator = 20;
};

/// Run configuration for the command-line tool. Relative paths resolve
/// against the directory holding the config file.
struct RunConfig {
  std::filesystem::path prompts_dir = "prompts";
  std::optional<std::size_t> workers;
  std::uint64_t seed = 0;
  BackendConfig annotator;
  BackendConfig judge;
  BackendConfig pairwise_judge;
  FilterConfig filter;
  AnnotateOptions generation;
  LoopConfig loop;
  FinetunerConfig finetuner;
  std::filesystem::path workspace;
  ServiceConfig service;

  RunConfig() {
    annotator.model = {"annotator", "mock", ModelRole::annotator, {}};
    judge.model = filter.judge;
    pairwise_judge.model = {"pairwise-judge", "mock", ModelRole::judge, {}};
  }

  /// Applies the seed and worker count everywhere they matter.
  void apply_overrides(std::optional<std::uint64_t> seed_override, std::optional<std::size_t> workers_override) {
    if (seed_override) seed = *seed_override;
    if (workers_override) workers = *workers_override;
    const std::size_t w = workers.value_or(util::default_workers());
    if (w < 1) throw InvalidConfig("workers must be at least 1");
    filter.workers = w;
    loop.workers = w;
    loop.filter = filter;
    if (!generation.seed || seed_override) generation.seed = static_cast<std::int64_t>(seed);
    loop.annotate = generation;
    finetuner.mock.seed = seed;
  }

  void validate() const {
    if (!std::filesystem::is_directory(prompts_dir))
      throw InvalidConfig("prompts_dir does not exist: " + prompts_dir.string());
    filter.validate();
    loop.validate();
  }
};

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

inline RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
  RunConfig c;
  try {
    if (auto it = j.find("prompts_dir"); it != j.end()) c.prompts_dir = resolve_path(base_dir, it->get<std::string>());
    else if (!base_dir.empty()) c.prompts_dir = base_dir / c.prompts_dir;
    if (auto it = j.find("workers"); it != j.end()) c.workers = it->get<std::size_t>();
    c.seed = j.value("seed", c.seed);
    if (auto b = j.find("backends"); b != j.end()) {
      if (auto it = b->find("annotator"); it != b->end())
        c.annotator = backend_config_from_json(*it, ModelRole::annotator, "annotator");
      if (auto it = b->find("judge"); it != b->end())
        c.judge = backend_config_from_json(*it, ModelRole::judge, "coherence-judge");
      if (auto it = b->find("pairwise_judge"); it != b->end())
        c.pairwise_judge = backend_config_from_json(*it, ModelRole::judge, "pairwise-judge");
    }
    if (auto it = j.find("filter"); it != j.end()) c.filter = filter_config_from_json(*it);
    c.filter.judge = c.judge.model;
    if (auto g = j.find("generation"); g != j.end()) {
      c.generation.template_name = g->value("template", c.generation.template_name);
      c.generation.max_output_tokens = g->value("max_output_tokens", c.generation.max_output_tokens);
      c.generation.logprobs = g->value("logprobs", c.generation.logprobs);
      if (auto s = g->find("seed"); s != g->end() && !s->is_null()) c.generation.seed = s->get<std::int64_t>();
    }
    if (auto l = j.find("loop"); l != j.end()) {
      c.loop.k = l->value("k", c.loop.k);
      if (auto it = l->find("base_model"); it != l->end()) c.loop.base_model = model_from_json(*it);
      if (auto it = l->find("hyperparameters"); it != l->end())
        for (auto& [k, v] : it->items()) c.loop.hyperparameters[k] = v.is_string() ? v.get<std::string>() : v.dump();
      if (auto it = l->find("finetuner"); it != l->end()) c.finetuner = finetuner_config_from_json(*it);
      if (auto it = l->find("workspace"); it != l->end()) c.workspace = resolve_path(base_dir, it->get<std::string>());
    }
    if (auto s = j.find("service"); s != j.end()) {
      c.service.host = s->value("host", c.service.host);
      c.service.port = s->value("port", c.service.port);
      c.service.pairs_per_evaluator = s->value("pairs_per_evaluator", c.service.pairs_per_evaluator);
      auto path = [&](const char* key, std::filesystem::path& out) {
        if (auto it = s->find(key); it != s->end()) out = resolve_path(base_dir, it->get<std::string>());
      };
      path("pairs", c.service.pairs);
      path("vote_log", c.service.vote_log);
      path("static_dir", c.service.static_dir);
      path("filter_report", c.service.filter_report);
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(e.what());
  }
  c.loop.filter = c.filter;
  c.loop.annotate = c.generation;
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InvalidConfig("config file not found: " + path.string());
  json j = json::parse(util::read_file(path), nullptr, false, true);
  if (j.is_discarded()) throw InvalidConfig("config file is not valid JSON: " + path.string());
  return run_config_from_json(j, path.parent_path());
}

}  // namespace labelloop
