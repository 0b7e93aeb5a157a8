// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include "labelloop/backends.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/filterpipe.hpp"
#include "labelloop/finetuner.hpp"
#include "labelloop/prompts.hpp"
#include "labelloop/util/fsio.hpp"
#include "labelloop/util/pool.hpp"

namespace labelloop {

inline constexpr const char* kCheckpointFormat = "labelloop.checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Per-iteration status. While an iteration is in progress the persisted
/// status names the phase that runs next.
enum class IterationStatus : std::uint8_t { pending, finetuning, inferring, filtering, done, failed };

inline std::string_view to_string(IterationStatus s) noexcept {
  switch (s) {
    case IterationStatus::pending: return "pending";
    case IterationStatus::finetuning: return "finetuning";
    case IterationStatus::inferring: return "inferring";
    case IterationStatus::filtering: return "filtering";
    case IterationStatus::done: return "done";
    case IterationStatus::failed: return "failed";
  }
  return "pending";
}

inline std::optional<IterationStatus> parse_iteration_status(std::string_view s) noexcept {
  for (auto v : {IterationStatus::pending, IterationStatus::finetuning, IterationStatus::inferring,
                 IterationStatus::filtering, IterationStatus::done, IterationStatus::failed})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

struct LoopConfig {
  std::uint32_t k = 2;
  FilterConfig filter;
  ModelHandle base_model{"base-annotator", "mock", ModelRole::annotator, {}};
  std::map<std::string, std::string> hyperparameters;
  AnnotateOptions annotate;
  std::size_t workers = 1;

  void validate() const {
    if (k < 1) throw InvalidConfig("k must be at least 1");
    if (workers < 1) throw InvalidConfig("workers must be at least 1");
    filter.validate();
    base_model.validate();
  }
};

inline ordered_json to_json(const AnnotateOptions& o) {
  ordered_json j = {{"template_name", o.template_name}, {"max_output_tokens", o.max_output_tokens}};
  j["seed"] = o.seed ? ordered_json(*o.seed) : ordered_json(nullptr);
  j["logprobs"] = o.logprobs;
  return j;
}

inline AnnotateOptions annotate_options_from_json(const json& j) {
  AnnotateOptions o;
  o.template_name = j.value("template_name", o.template_name);
  o.max_output_tokens = j.value("max_output_tokens", o.max_output_tokens);
  if (auto it = j.find("seed"); it != j.end() && !it->is_null()) o.seed = it->get<std::int64_t>();
  o.logprobs = j.value("logprobs", o.logprobs);
  return o;
}

inline ordered_json to_json(const LoopConfig& c) {
  ordered_json hp = ordered_json::object();
  for (const auto& [k, v] : c.hyperparameters) hp[k] = v;
  return {{"k", c.k},
          {"filter", to_json(c.filter)},
          {"base_model", to_json(c.base_model)},
          {"hyperparameters", hp},
          {"annotate", to_json(c.annotate)},
          {"workers", c.workers}};
}

inline LoopConfig loop_config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidConfig("loop config must be an object");
  LoopConfig c;
  c.k = j.value("k", c.k);
  if (auto it = j.find("filter"); it != j.end()) c.filter = filter_config_from_json(*it);
  if (auto it = j.find("base_model"); it != j.end()) c.base_model = model_from_json(*it);
  if (auto it = j.find("hyperparameters"); it != j.end())
    for (auto& [k, v] : it->items()) c.hyperparameters[k] = v.is_string() ? v.get<std::string>() : v.dump();
  if (auto it = j.find("annotate"); it != j.end()) c.annotate = annotate_options_from_json(*it);
  c.workers = j.value("workers", c.workers);
  c.filter.workers = c.workers;
  c.validate();
  return c;
}

/// Checkpointed view of one iteration.
struct IterationState {
  std::uint32_t iteration = 0;
  IterationStatus status = IterationStatus::pending;
  /// Phase that raised when status is failed; resume re-runs it.
  std::optional<IterationStatus> failed_phase;
  std::optional<std::string> error;
  std::optional<ModelHandle> model;
  std::size_t training_size = 0;
  Dataset pseudo_labels;
  std::optional<FilterReport> report;

  friend bool operator==(const IterationState& a, const IterationState& b) {
    auto report_json = [](const std::optional<FilterReport>& r) {
      return r ? to_json(*r).dump() : std::string();
    };
    auto model_json = [](const std::optional<ModelHandle>& m) { return m ? to_json(*m).dump() : std::string(); };
    return a.iteration == b.iteration && a.status == b.status && a.failed_phase == b.failed_phase &&
           a.error == b.error && model_json(a.model) == model_json(b.model) &&
           a.training_size == b.training_size && a.pseudo_labels == b.pseudo_labels &&
           report_json(a.report) == report_json(b.report);
  }
};

/// Manifest entry for an iteration. Pseudo-labels and the report live in
/// their own files and are only referenced by count here.
inline ordered_json to_json(const IterationState& s) {
  ordered_json j = {{"iteration", s.iteration}, {"status", to_string(s.status)}};
  if (s.failed_phase) j["failed_phase"] = to_string(*s.failed_phase);
  if (s.error) j["error"] = *s.error;
  if (s.model) j["model"] = to_json(*s.model);
  j["training_size"] = s.training_size;
  j["pseudo_count"] = s.pseudo_labels.size();
  return j;
}

struct LoopResult {
  ModelHandle final_model;
  std::vector<IterationState> states;
};

/// Collaborators for a loop run. Backends and prompts are not persisted;
/// resume must be given equivalent ones.
struct LoopEnvironment {
  Backend& annotator;
  Backend& judge;
  Finetuner& finetuner;
  const PromptLibrary& prompts;
  /// Called after the checkpoint for phase `phase` of iteration `i` has been
  /// written. Throwing from here simulates a crash at that point.
  std::function<void(std::uint32_t i, IterationStatus phase)> after_phase;
  /// Called after each annotation is durably appended, with the number of
  /// annotations written so far in this (iteration, temperature) pass.
  std::function<void(std::uint32_t i, double temperature, std::size_t count)> after_annotation;
  std::function<void(const ordered_json&)> log;
  /// Overrides the persisted worker count on resume.
  std::optional<std::size_t> workers;
  /// fsync every appended annotation.
  bool durable = true;
};

namespace loop_detail {

namespace fs = std::filesystem;

inline fs::path iteration_dir(const fs::path& ws, std::uint32_t i) { return ws / ("iteration_" + std::to_string(i)); }

inline fs::path annotations_path(const fs::path& ws, std::uint32_t i, double t) {
  return iteration_dir(ws, i) / ("annotations_t" + format_number(t) + ".jsonl");
}

inline bool pid_alive(long pid) { return pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM); }

/// Exclusive workspace lock; a lock left by a dead process is taken over.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const fs::path& ws) : path_(ws / "loop.lock") {
    fs::create_directories(ws);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
        ::close(fd);
        if (!ok) throw std::system_error(errno, std::generic_category(), "write " + path_.string());
        return;
      }
      if (errno != EEXIST) throw std::system_error(errno, std::generic_category(), "open " + path_.string());
      long holder = 0;
      try {
        holder = std::stol(util::read_file(path_));
      } catch (const std::exception&) {
        holder = 0;
      }
      if (pid_alive(holder)) throw WorkspaceLocked(path_.string() + " held by pid " + std::to_string(holder));
      std::error_code ec;
      fs::remove(path_, ec);
    }
    throw WorkspaceLocked(path_.string());
  }
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;
  ~WorkspaceLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

/// Reads an annotation log. A final line that does not parse is treated as
/// a torn write and discarded; any earlier bad line is corruption.
inline std::vector<AnnotationOutcome> read_annotations(const fs::path& path, bool& had_torn_tail) {
  had_torn_tail = false;
  std::vector<AnnotationOutcome> out;
  if (!fs::exists(path)) return out;
  const std::string text = util::read_file(path);
  std::vector<std::string_view> lines;
  std::string_view rest(text);
  while (!rest.empty()) {
    const auto nl = rest.find('\n');
    lines.push_back(rest.substr(0, nl));
    rest = nl == std::string_view::npos ? std::string_view() : rest.substr(nl + 1);
  }
  const bool terminated = !text.empty() && text.back() == '\n';
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    const bool last = n + 1 == lines.size();
    try {
      if (last && !terminated) throw std::runtime_error("unterminated line");
      out.push_back(outcome_from_json(json::parse(lines[n])));
    } catch (const std::exception& e) {
      if (!last) throw CorruptCheckpoint(path.string() + " line " + std::to_string(n + 1) + ": " + e.what());
      had_torn_tail = true;
    }
  }
  return out;
}

inline std::string annotations_text(const std::vector<const AnnotationOutcome*>& outcomes) {
  std::string out;
  for (const AnnotationOutcome* o : outcomes) {
    out += to_json(*o).dump();
    out.push_back('\n');
  }
  return out;
}

class Runner {
 public:
  Runner(fs::path ws, LoopConfig config, Dataset seed, Dataset unlabeled, LoopEnvironment& env)
      : ws_(std::move(ws)), config_(std::move(config)), seed_(std::move(seed)), unlabeled_(std::move(unlabeled)),
        env_(env) {
    if (env_.workers) config_.workers = *env_.workers;
    config_.filter.workers = config_.workers;
  }

  void initialise() {
    states_.clear();
    for (std::uint32_t i = 1; i <= config_.k; ++i) {
      IterationState s;
      s.iteration = i;
      s.status = i == 1 ? IterationStatus::finetuning : IterationStatus::pending;
      states_.push_back(std::move(s));
    }
    save_jsonl(seed_, ws_ / "seed.jsonl");
    save_jsonl(unlabeled_, ws_ / "unlabeled.jsonl");
    write_manifest();
  }

  void adopt(std::vector<IterationState> states, std::optional<ModelHandle> final_model) {
    states_ = std::move(states);
    final_model_ = std::move(final_model);
  }

  LoopResult run() {
    for (IterationState& s : states_) {
      if (s.status == IterationStatus::done) continue;
      if (s.status == IterationStatus::pending) {
        s.status = IterationStatus::finetuning;
        write_manifest();
      }
      if (s.status == IterationStatus::failed) {
        s.status = s.failed_phase.value_or(IterationStatus::finetuning);
        s.failed_phase.reset();
        s.error.reset();
        write_manifest();
      }
      while (s.status != IterationStatus::done) step(s);
    }
    final_model_ = states_.back().model;
    write_manifest();
    log({{"event", "loop_done"}, {"final_model", final_model_->identifier}});
    return {*final_model_, states_};
  }

 private:
  void step(IterationState& s) {
    const IterationStatus phase = s.status;
    log({{"event", "phase_start"}, {"iteration", s.iteration}, {"phase", to_string(phase)}});
    try {
      switch (phase) {
        case IterationStatus::finetuning: finetune(s); break;
        case IterationStatus::inferring: infer(s); break;
        case IterationStatus::filtering: filter(s); break;
        default: throw CorruptCheckpoint("unexpected iteration status " + std::string(to_string(phase)));
      }
    } catch (const std::exception& e) {
      s.status = IterationStatus::failed;
      s.failed_phase = phase;
      s.error = e.what();
      write_manifest();
      log({{"event", "phase_failed"}, {"iteration", s.iteration}, {"phase", to_string(phase)}, {"error", e.what()}});
      throw;
    }
    write_manifest();
    log({{"event", "phase_done"}, {"iteration", s.iteration}, {"phase", to_string(phase)}});
    if (env_.after_phase) env_.after_phase(s.iteration, phase);
  }

  void finetune(IterationState& s) {
    Dataset previous;
    if (s.iteration > 1) previous = states_.at(s.iteration - 2).pseudo_labels;
    FinetuneJob job;
    job.training_set = merge(seed_, previous);
    job.hyperparameters = config_.hyperparameters;
    job.base_model = config_.base_model;
    job.iteration = s.iteration;
    ModelHandle model = env_.finetuner.finetune(job);
    model.role = ModelRole::annotator;
    s.training_size = job.training_set.size();
    s.model = std::move(model);
    s.status = IterationStatus::inferring;
  }

  void infer(IterationState& s) {
    if (!s.model) throw CorruptCheckpoint("iteration " + std::to_string(s.iteration) + " has no model");
    for (double t : config_.filter.temperatures) infer_at(s, t);
    s.status = IterationStatus::filtering;
  }

  void infer_at(const IterationState& s, double t) {
    const fs::path path = annotations_path(ws_, s.iteration, t);
    bool torn = false;
    std::vector<AnnotationOutcome> existing = read_annotations(path, torn);
    std::map<std::string, AnnotationOutcome> by_sha;
    for (auto& o : existing) {
      const std::string sha = outcome_sha(o);
      by_sha.insert_or_assign(sha, std::move(o));
    }
    if (torn) util::atomic_write(path, ordered_text(by_sha, false));

    std::vector<const ScriptRecord*> missing;
    for (const ScriptRecord& r : unlabeled_)
      if (!by_sha.count(r.sha256)) missing.push_back(&r);
    log({{"event", "annotate"},
         {"iteration", s.iteration},
         {"temperature", t},
         {"cached", by_sha.size()},
         {"pending", missing.size()}});

    if (!missing.empty()) {
      util::AppendLog out(path, env_.durable);
      std::mutex mu;
      std::size_t written = 0;
      util::parallel_for(missing.size(), config_.workers, [&](std::size_t n) {
        AnnotationOutcome o = annotate(env_.annotator, env_.prompts, *s.model, *missing[n], t, config_.annotate);
        const std::string line = to_json(o).dump();
        std::lock_guard lock(mu);
        out.append_line(line);
        by_sha.insert_or_assign(missing[n]->sha256, std::move(o));
        ++written;
        if (env_.after_annotation) env_.after_annotation(s.iteration, t, written);
      });
    }
    // Rewrite in corpus order so the finished file does not depend on
    // worker scheduling.
    util::atomic_write(path, ordered_text(by_sha, true));
  }

  std::string ordered_text(const std::map<std::string, AnnotationOutcome>& by_sha, bool corpus_only) const {
    std::vector<const AnnotationOutcome*> ordered;
    for (const ScriptRecord& r : unlabeled_)
      if (auto it = by_sha.find(r.sha256); it != by_sha.end()) ordered.push_back(&it->second);
    if (!corpus_only)
      for (const auto& [sha, o] : by_sha)
        if (!unlabeled_.contains(sha)) ordered.push_back(&o);
    return annotations_text(ordered);
  }

  void filter(IterationState& s) {
    AnnotationSets sets;
    for (double t : config_.filter.temperatures) {
      bool torn = false;
      auto outcomes = read_annotations(annotations_path(ws_, s.iteration, t), torn);
      if (torn) throw CorruptCheckpoint("torn annotation log at filtering for temperature " + format_number(t));
      sets.emplace(t, AnnotationSet::from_outcomes(t, std::move(outcomes)));
    }
    JudgeContext judge{env_.judge, env_.prompts};
    PipelineOptions options;
    options.corpus = &unlabeled_;
    options.iteration = s.iteration;
    PipelineResult result = run_pipeline(sets, config_.filter, judge, options);
    const fs::path dir = iteration_dir(ws_, s.iteration);
    save_jsonl(result.pseudo, dir / "pseudo.jsonl");
    util::atomic_write(dir / "filter_report.json", to_json(result.report).dump(2) + "\n");
    s.pseudo_labels = std::move(result.pseudo);
    s.report = std::move(result.report);
    s.status = IterationStatus::done;
  }

  void write_manifest() const {
    const bool all_done = !states_.empty() && states_.back().status == IterationStatus::done;
    const bool any_failed = std::any_of(states_.begin(), states_.end(),
                                        [](const IterationState& s) { return s.status == IterationStatus::failed; });
    ordered_json j = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"config", to_json(config_)}};
    j["status"] = all_done ? "done" : any_failed ? "failed" : "running";
    j["iterations"] = ordered_json::array();
    for (const IterationState& s : states_) j["iterations"].push_back(to_json(s));
    j["final_model"] = all_done && states_.back().model ? to_json(*states_.back().model) : ordered_json(nullptr);
    util::atomic_write(ws_ / "manifest.json", j.dump(2) + "\n");
  }

  void log(ordered_json event) const {
    if (env_.log) env_.log(event);
  }

  fs::path ws_;
  LoopConfig config_;
  Dataset seed_;
  Dataset unlabeled_;
  LoopEnvironment& env_;
  std::vector<IterationState> states_;
  std::optional<ModelHandle> final_model_;
};

struct Checkpoint {
  LoopConfig config;
  std::vector<IterationState> states;
  std::optional<ModelHandle> final_model;
  Dataset seed;
  Dataset unlabeled;
};

inline Checkpoint load_checkpoint(const fs::path& ws) {
  const fs::path manifest_path = ws / "manifest.json";
  if (!fs::exists(manifest_path)) throw CorruptCheckpoint("no manifest.json in " + ws.string());
  json m = json::parse(util::read_file(manifest_path), nullptr, false);
  if (m.is_discarded() || !m.is_object()) throw CorruptCheckpoint("manifest.json is not a JSON object");
  if (m.value("format", std::string()) != kCheckpointFormat)
    throw CorruptCheckpoint("manifest.json has an unknown format");
  if (!m.contains("version") || !m["version"].is_number_integer())
    throw CorruptCheckpoint("manifest.json has no version");
  if (m["version"].get<int>() != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + m["version"].dump() + ", expected " +
                          std::to_string(kCheckpointVersion));
  Checkpoint cp;
  try {
    cp.config = loop_config_from_json(m.at("config"));
    for (const json& e : m.at("iterations")) {
      IterationState s;
      s.iteration = e.at("iteration").get<std::uint32_t>();
      auto status = parse_iteration_status(e.at("status").get<std::string>());
      if (!status) throw CorruptCheckpoint("unknown status " + e.at("status").dump());
      s.status = *status;
      if (auto it = e.find("failed_phase"); it != e.end()) {
        s.failed_phase = parse_iteration_status(it->get<std::string>());
        if (!s.failed_phase) throw CorruptCheckpoint("unknown failed_phase " + it->dump());
      }
      if (auto it = e.find("error"); it != e.end()) s.error = it->get<std::string>();
      if (auto it = e.find("model"); it != e.end()) s.model = model_from_json(*it);
      s.training_size = e.value("training_size", std::size_t{0});
      if (s.status == IterationStatus::done) {
        const fs::path dir = iteration_dir(ws, s.iteration);
        s.pseudo_labels = load_jsonl(dir / "pseudo.jsonl").renamed("pseudo");
        s.report = filter_report_from_json(json::parse(util::read_file(dir / "filter_report.json")));
        if (s.pseudo_labels.size() != e.value("pseudo_count", std::size_t{0}))
          throw CorruptCheckpoint("iteration " + std::to_string(s.iteration) + " pseudo count mismatch");
      }
      cp.states.push_back(std::move(s));
    }
    if (auto it = m.find("final_model"); it != m.end() && !it->is_null()) cp.final_model = model_from_json(*it);
    cp.seed = load_jsonl(ws / "seed.jsonl");
    cp.unlabeled = load_jsonl(ws / "unlabeled.jsonl");
  } catch (const CorruptCheckpoint&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptCheckpoint(std::string("manifest.json: ") + e.what());
  }
  if (cp.states.size() != cp.config.k) throw CorruptCheckpoint("iteration count does not match k");
  for (std::size_t n = 0; n < cp.states.size(); ++n)
    if (cp.states[n].iteration != n + 1) throw CorruptCheckpoint("iterations are not numbered 1..k");
  return cp;
}

}  // namespace loop_detail

/// Runs k fine-tune / annotate / filter iterations from scratch in
/// `workspace`, checkpointing after every phase and every annotation.
inline LoopResult run_loop(const LoopConfig& config, const Dataset& seed, const Dataset& unlabeled,
                           const std::filesystem::path& workspace, LoopEnvironment& env) {
  config.validate();
  if (seed.empty()) throw PreconditionViolation("seed dataset must be non-empty");
  for (const ScriptRecord& r : unlabeled)
    if (!r.content) throw MissingContent(r.sha256);
  loop_detail::WorkspaceLock lock(workspace);
  if (std::filesystem::exists(workspace / "manifest.json"))
    throw PreconditionViolation("workspace " + workspace.string() + " already holds a checkpoint; resume it instead");
  loop_detail::Runner runner(workspace, config, seed.renamed("seed"), unlabeled.renamed("unlabeled"), env);
  runner.initialise();
  return runner.run();
}

/// Continues a checkpointed loop. Completed phases are not re-executed and
/// only unannotated SHAs are sent to the annotator.
inline LoopResult resume(const std::filesystem::path& workspace, LoopEnvironment& env) {
  loop_detail::WorkspaceLock lock(workspace);
  loop_detail::Checkpoint cp = loop_detail::load_checkpoint(workspace);
  const bool done = !cp.states.empty() && cp.states.back().status == IterationStatus::done && cp.final_model;
  if (done) return {*cp.final_model, std::move(cp.states)};
  loop_detail::Runner runner(workspace, std::move(cp.config), std::move(cp.seed), std::move(cp.unlabeled), env);
  runner.adopt(std::move(cp.states), std::move(cp.final_model));
  return runner.run();
}

/// Reads the persisted iteration states without running anything.
inline std::vector<IterationState> load_states(const std::filesystem::path& workspace) {
  return loop_detail::load_checkpoint(workspace).states;
}

}  // namespace labelloop
