// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdlib>
#include <functional>
#include <httplib.h>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "labelloop/backends.hpp"

namespace labelloop {

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff_base{500};
  /// Injected so tests can observe backoff without sleeping.
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };

  /// Delay before attempt `attempt` (1-based; the first retry is attempt 2).
  std::chrono::milliseconds delay_before(int attempt) const {
    return backoff_base * (1LL << std::max(0, attempt - 2));
  }
};

inline bool is_transient_status(int status) noexcept { return status == 0 || status == 429 || status >= 500; }

/// Runs `fn` up to policy.max_attempts times, sleeping with exponential
/// backoff between attempts, while it throws a transient TransportError.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const TransportError& e) {
      if (!is_transient_status(e.status()) || attempt >= policy.max_attempts) throw;
      policy.sleep(policy.delay_before(attempt + 1));
    }
  }
}

struct UrlParts {
  std::string scheme_host_port;
  std::string path_prefix;
};

inline UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InvalidConfig("endpoint must be an http(s) URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  UrlParts parts;
  parts.scheme_host_port = url.substr(0, path_start);
  parts.path_prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!parts.path_prefix.empty() && parts.path_prefix.back() == '/') parts.path_prefix.pop_back();
  return parts;
}

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
};

/// Log-probability of the token that covers byte `offset` of the
/// concatenated token texts.
inline std::optional<double> logprob_at_offset(const std::vector<TokenLogprob>& tokens, std::size_t offset) {
  if (offset == std::string_view::npos) return std::nullopt;
  std::size_t pos = 0;
  for (const auto& t : tokens) {
    const std::size_t next = pos + t.token.size();
    if (offset < next) return t.logprob;
    pos = next;
  }
  return std::nullopt;
}

/// Extracts token log-probabilities from either the legacy completions
/// shape ({tokens, token_logprobs}) or the chat shape ({content: [...]}).
inline std::optional<std::vector<TokenLogprob>> parse_token_logprobs(const json& logprobs) {
  if (!logprobs.is_object()) return std::nullopt;
  std::vector<TokenLogprob> out;
  if (auto content = logprobs.find("content"); content != logprobs.end() && content->is_array()) {
    for (const auto& t : *content) out.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
    return out;
  }
  auto tokens = logprobs.find("tokens");
  auto values = logprobs.find("token_logprobs");
  if (tokens == logprobs.end() || values == logprobs.end() || !tokens->is_array() || !values->is_array() ||
      tokens->size() != values->size())
    return std::nullopt;
  for (std::size_t i = 0; i < tokens->size(); ++i) {
    const json& v = (*values)[i];
    out.push_back({(*tokens)[i].get<std::string>(), v.is_number() ? v.get<double>() : 0.0});
  }
  return out;
}

struct HttpBackendOptions {
  std::string auth_token;
  std::string completions_path = "/v1/completions";
  std::chrono::seconds timeout{300};
  RetryPolicy retry;
};

/// Token read from `env_var` at call time; empty when unset.
inline std::string token_from_env(const std::string& env_var) {
  if (env_var.empty()) return {};
  const char* v = std::getenv(env_var.c_str());
  return v ? std::string(v) : std::string();
}

/// Client for a completion endpoint with optional per-token logprobs.
///
/// Request:  POST <endpoint>/v1/completions
///           {"model", "prompt", "temperature", "max_tokens", "seed"?, "logprobs"?}
/// Response: {"choices": [{"text", "finish_reason", "logprobs": {...}}]}
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendOptions options = {}) : options_(std::move(options)) {}

  Completion generate(const ModelHandle& model, const GenerationRequest& req) override {
    req.validate();
    return with_retries(options_.retry, [&] { return attempt(model, req); });
  }

  static json request_body(const ModelHandle& model, const GenerationRequest& req) {
    json body = {{"model", model.identifier},
                 {"prompt", req.prompt},
                 {"temperature", req.temperature},
                 {"max_tokens", req.max_output_tokens}};
    if (req.seed) body["seed"] = *req.seed;
    if (req.logprobs) body["logprobs"] = 1;
    return body;
  }

  static Completion parse_response(const std::string& model_id, const json& body, bool want_logprobs) {
    const json* choice = nullptr;
    if (auto it = body.find("choices"); it != body.end() && it->is_array() && !it->empty()) choice = &(*it)[0];
    if (choice == nullptr) throw TransportError(200, "response has no choices");

    Completion c;
    if (auto t = choice->find("text"); t != choice->end() && t->is_string()) {
      c.text = t->get<std::string>();
    } else if (auto m = choice->find("message"); m != choice->end() && m->is_object()) {
      c.text = m->value("content", std::string());
    }
    if (auto f = choice->find("finish_reason"); f != choice->end() && f->is_string())
      c.finish_reason = parse_finish_reason(f->get<std::string>());

    if (want_logprobs) {
      auto lp = choice->find("logprobs");
      std::optional<std::vector<TokenLogprob>> tokens;
      if (lp != choice->end()) tokens = parse_token_logprobs(*lp);
      if (!tokens) throw ProtocolMissingLogprobs(model_id);
      c.label_token_logprob = logprob_at_offset(*tokens, find_json_value_offset(c.text, "malicious"));
      c.language_token_logprob = logprob_at_offset(*tokens, find_json_value_offset(c.text, "language"));
    }
    return c;
  }

 private:
  Completion attempt(const ModelHandle& model, const GenerationRequest& req) const {
    const UrlParts url = split_url(model.endpoint);
    httplib::Client client(url.scheme_host_port);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(options_.timeout).count());
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(options_.timeout).count());
    httplib::Headers headers;
    if (!options_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + options_.auth_token);

    auto res = client.Post(url.path_prefix + options_.completions_path, headers,
                           request_body(model, req).dump(), "application/json");
    if (!res) throw TransportError(0, httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) throw TransportError(res->status, res->body.substr(0, 256));
    json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded()) throw TransportError(res->status, "response body is not JSON");
    return parse_response(model.identifier, body, req.logprobs);
  }

  HttpBackendOptions options_;
};

/// Dispatches on ModelHandle::endpoint: "mock" goes to the mock, anything
/// else to the HTTP client.
class RoutingBackend final : public Backend {
 public:
  RoutingBackend(std::shared_ptr<Backend> mock, std::shared_ptr<Backend> remote)
      : mock_(std::move(mock)), remote_(std::move(remote)) {}

  Completion generate(const ModelHandle& model, const GenerationRequest& req) override {
    Backend* target = model.is_mock() ? mock_.get() : remote_.get();
    if (target == nullptr) throw InvalidConfig("no backend configured for endpoint '" + model.endpoint + "'");
    return target->generate(model, req);
  }

 private:
  std::shared_ptr<Backend> mock_;
  std::shared_ptr<Backend> remote_;
};

}  // namespace labelloop
