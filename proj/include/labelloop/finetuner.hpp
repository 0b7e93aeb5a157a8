// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>

#include "labelloop/backends.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/filterpipe.hpp"
#include "labelloop/http_backend.hpp"
#include "labelloop/util/hash.hpp"

namespace labelloop {

/// One fine-tuning submission. Hyperparameters are opaque to this library:
/// they are recorded and forwarded, never interpreted.
struct FinetuneJob {
  Dataset training_set;
  std::map<std::string, std::string> hyperparameters;
  ModelHandle base_model;
  std::uint32_t iteration = 1;
  std::optional<ModelHandle> result;
};

class Finetuner {
 public:
  virtual ~Finetuner() = default;
  virtual ModelHandle finetune(const FinetuneJob& job) = 0;
};

struct MockFinetunerOptions {
  std::uint64_t seed = 0;
  /// Annotation fault rates handed to the produced mock model (same keys as
  /// MockOptions, e.g. "label_flip_rate").
  std::map<std::string, double> base_rates;
  /// When > 0 every rate becomes rate * ramp_scale / (ramp_scale + n) for a
  /// training set of n records, so larger training sets yield cleaner models.
  double ramp_scale = 0.0;
  bool fail = false;
};

inline MockFinetunerOptions mock_finetuner_options_from_json(const json& j) {
  MockFinetunerOptions o;
  o.seed = j.value("seed", std::uint64_t{0});
  if (auto it = j.find("base_rates"); it != j.end())
    for (auto& [k, v] : it->items()) o.base_rates[k] = v.get<double>();
  o.ramp_scale = j.value("ramp_scale", 0.0);
  o.fail = j.value("fail", false);
  return o;
}

class MockFinetuner final : public Finetuner {
 public:
  explicit MockFinetuner(MockFinetunerOptions options = {}) : options_(std::move(options)) {}

  ModelHandle finetune(const FinetuneJob& job) override {
    if (job.training_set.empty()) throw PreconditionViolation("training set must be non-empty");
    calls_.fetch_add(1, std::memory_order_relaxed);
    if (options_.fail) throw FinetuneFailed(static_cast<int>(job.iteration), "mock fine-tuner configured to fail");
    const auto n = static_cast<std::uint64_t>(job.training_set.size());
    ModelHandle h;
    h.identifier = handle_for(n, options_.seed);
    h.endpoint = "mock";
    h.role = ModelRole::annotator;
    h.params["training_size"] = std::to_string(n);
    for (const auto& [key, rate] : options_.base_rates) {
      const double scaled =
          options_.ramp_scale > 0.0 ? rate * options_.ramp_scale / (options_.ramp_scale + static_cast<double>(n)) : rate;
      h.params[key] = format_number(scaled);
    }
    return h;
  }

  static std::string handle_for(std::uint64_t n, std::uint64_t seed) {
    return "mock-ft-" + util::to_hex(util::Fnv1a().add(n).add(seed).digest());
  }

  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }

 private:
  MockFinetunerOptions options_;
  std::atomic<std::size_t> calls_{0};
};

struct HttpFinetunerOptions {
  /// Base URL of the job API.
  std::string endpoint;
  /// Endpoint recorded on the returned handle for inference.
  std::string inference_endpoint;
  std::string auth_token;
  std::chrono::milliseconds poll_interval{std::chrono::seconds(30)};
  std::chrono::milliseconds deadline{std::chrono::hours(72)};
  RetryPolicy retry;
};

/// Remote fine-tuning job client.
///
///   POST <endpoint>/v1/fine_tuning/jobs
///        {"model", "iteration", "hyperparameters", "training_data": [records]}
///     -> {"id"}
///   GET  <endpoint>/v1/fine_tuning/jobs/<id>
///     -> {"status": queued|running|succeeded|failed|cancelled,
///         "fine_tuned_model"?, "error"?: {"message"}}
class HttpFinetuner final : public Finetuner {
 public:
  explicit HttpFinetuner(HttpFinetunerOptions options) : options_(std::move(options)) {}

  ModelHandle finetune(const FinetuneJob& job) override {
    if (job.training_set.empty()) throw PreconditionViolation("training set must be non-empty");
    const UrlParts url = split_url(options_.endpoint);
    const int iteration = static_cast<int>(job.iteration);

    ordered_json body = {{"model", job.base_model.identifier}, {"iteration", job.iteration}};
    body["hyperparameters"] = json::object();
    for (const auto& [k, v] : job.hyperparameters) body["hyperparameters"][k] = v;
    body["training_data"] = json::array();
    for (const ScriptRecord& r : job.training_set) body["training_data"].push_back(to_json(r));

    const json created = request(url, "POST", url.path_prefix + "/v1/fine_tuning/jobs", body.dump());
    const std::string id = created.value("id", std::string());
    if (id.empty()) throw FinetuneFailed(iteration, "job API returned no id");

    const auto start = std::chrono::steady_clock::now();
    for (;;) {
      const json status = request(url, "GET", url.path_prefix + "/v1/fine_tuning/jobs/" + id, {});
      const std::string s = status.value("status", std::string());
      if (s == "succeeded") {
        ModelHandle h;
        h.identifier = status.value("fine_tuned_model", std::string());
        if (h.identifier.empty()) throw FinetuneFailed(iteration, "job " + id + " succeeded without a model");
        h.endpoint = options_.inference_endpoint.empty() ? options_.endpoint : options_.inference_endpoint;
        h.role = ModelRole::annotator;
        h.params["job_id"] = id;
        return h;
      }
      if (s == "failed" || s == "cancelled") {
        std::string msg = s;
        if (auto e = status.find("error"); e != status.end() && e->is_object()) msg = e->value("message", s);
        throw FinetuneFailed(iteration, msg);
      }
      if (std::chrono::steady_clock::now() - start >= options_.deadline)
        throw Timeout("fine-tuning job " + id + " still '" + s + "' after deadline");
      options_.retry.sleep(options_.poll_interval);
    }
  }

 private:
  json request(const UrlParts& url, const char* method, const std::string& path, const std::string& body) const {
    return with_retries(options_.retry, [&] {
      httplib::Client client(url.scheme_host_port);
      httplib::Headers headers;
      if (!options_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + options_.auth_token);
      auto res = std::string(method) == "POST" ? client.Post(path, headers, body, "application/json")
                                               : client.Get(path, headers);
      if (!res) throw TransportError(0, httplib::to_string(res.error()));
      if (res->status < 200 || res->status >= 300) throw TransportError(res->status, res->body.substr(0, 256));
      json j = json::parse(res->body, nullptr, false);
      if (j.is_discarded()) throw TransportError(res->status, "job API response is not JSON");
      return j;
    });
  }

  HttpFinetunerOptions options_;
};

}  // namespace labelloop
