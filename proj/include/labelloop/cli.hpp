// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "labelloop/config.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/evalstats.hpp"
#include "labelloop/filterpipe.hpp"
#include "labelloop/selfloop.hpp"
#include "labelloop/service.hpp"

namespace labelloop::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

/// Structured progress lines on stderr. Results never go through here.
class Logger {
 public:
  Logger(std::ostream& err, bool quiet) : err_(err), quiet_(quiet) {}

  void info(ordered_json event) const { write("info", std::move(event)); }
  void warn(ordered_json event) const { write("warn", std::move(event)); }

 private:
  void write(const char* level, ordered_json event) const {
    if (quiet_ && std::string_view(level) == "info") return;
    ordered_json line = {{"level", level}};
    for (auto& [k, v] : event.items()) line[k] = v;
    std::lock_guard lock(mu_);
    err_ << line.dump() << "\n";
  }

  std::ostream& err_;
  bool quiet_;
  mutable std::mutex mu_;
};

/// Reads one annotation log strictly: every non-blank line must parse.
inline std::vector<AnnotationOutcome> read_annotation_file(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidConfig("annotation file not found: " + path.string());
  const std::string text = util::read_file(path);
  std::vector<AnnotationOutcome> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw MalformedLine(line_no, path.filename().string() + ": not a JSON object");
    try {
      out.push_back(outcome_from_json(j));
    } catch (const json::exception& e) {
      throw InvalidField(path.filename().string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline fs::path annotation_file(const fs::path& dir, double t) {
  return dir / ("annotations_t" + format_number(t) + ".jsonl");
}

inline AnnotationSets load_annotation_sets(const fs::path& dir, const std::vector<double>& temperatures) {
  AnnotationSets sets;
  for (double t : temperatures) sets.emplace(t, AnnotationSet::from_outcomes(t, read_annotation_file(annotation_file(dir, t))));
  return sets;
}

inline std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidConfig(std::string("invalid ") + what + " value '" + item + "'");
    }
  }
  if (out.empty()) throw InvalidConfig(std::string("empty ") + what + " list");
  return out;
}

inline void write_output(const std::string& path, const std::string& data) {
  if (!path.empty()) util::atomic_write(path, data);
}

/// Command-line front end. Returns the process exit status.
class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(std::vector<std::string> args) {
    CLI::App app{"Pseudo-label generation, filtering and evaluation for script triage models", "labelloop"};
    build(app);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp& e) {
      out_ << (e.get_name() == "CallForAllHelp" ? app.help("", CLI::AppFormatMode::All) : help_for(app));
      return kExitOk;
    } catch (const CLI::CallForVersion&) {
      out_ << "labelloop 0.3.0\n";
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err_ << "usage error: " << e.what() << "\n\n" << help_for(app);
      return kExitUsage;
    }

    try {
      Logger log(err_, quiet_);
      logger_ = &log;
      action_();
      logger_ = nullptr;
      return kExitOk;
    } catch (const Error& e) {
      err_ << "error: " << e.kind() << ": " << e.what() << "\n";
    } catch (const fs::filesystem_error& e) {
      err_ << "error: IoError: " << e.what() << "\n";
    } catch (const std::system_error& e) {
      err_ << "error: IoError: " << e.what() << "\n";
    } catch (const json::exception& e) {
      err_ << "error: InvalidField: " << e.what() << "\n";
    } catch (const std::exception& e) {
      err_ << "error: Internal: " << e.what() << "\n";
    }
    logger_ = nullptr;
    return kExitDomain;
  }

 private:
  // Help for the deepest subcommand that was selected.
  static std::string help_for(CLI::App& app) {
    CLI::App* node = &app;
    for (;;) {
      auto subs = node->get_subcommands();
      if (subs.empty()) break;
      node = subs.front();
    }
    return node->help();
  }

  CLI::App* sub(CLI::App& parent, const char* name, const char* desc) {
    CLI::App* s = parent.add_subcommand(name, desc);
    s->fallthrough();
    return s;
  }

  void build(CLI::App& app) {
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", "labelloop 0.3.0");
    app.add_option("--config", config_path_, "Run configuration file (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", seed_, "Seed for every stochastic choice");
    app.add_option("--workers", workers_, "Maximum concurrent backend calls (default: CPU count, max 16)")
        ->check(CLI::PositiveNumber);
    app.add_option("--prompts", prompts_dir_, "Prompt template directory (overrides the config)");
    app.add_flag("--quiet", quiet_, "Suppress progress logs; results are still printed");

    build_ingest(app);
    build_annotate(app);
    build_filter(app);
    build_sweep(app);
    build_loop(app);
    build_resume(app);
    build_eval(app);
    build_serve(app);
  }

  RunConfig config() const {
    RunConfig c = config_path_.empty() ? RunConfig() : load_run_config(config_path_);
    if (!prompts_dir_.empty()) c.prompts_dir = prompts_dir_;
    c.apply_overrides(seed_, workers_);
    return c;
  }

  const Logger& log() const { return *logger_; }

  // -- ingest ---------------------------------------------------------------

  struct IngestArgs {
    std::string in, out, stats;
    std::size_t bin_width = 512;
  } ingest_;

  void build_ingest(CLI::App& app) {
    CLI::App* s = sub(app, "ingest", "Validate a JSONL corpus and report split and length statistics");
    s->add_option("--in", ingest_.in, "Input JSONL dataset")->required()->check(CLI::ExistingFile);
    s->add_option("--out", ingest_.out, "Write the normalized dataset here");
    s->add_option("--stats", ingest_.stats, "Write statistics as JSON here");
    s->add_option("--bin-width", ingest_.bin_width, "Token histogram bin width")->check(CLI::PositiveNumber);
    s->callback([this] { action_ = [this] { ingest(); }; });
  }

  void ingest() {
    const Dataset d = load_jsonl(ingest_.in);
    const SplitTable table = split_stats(d);
    const bool has_content =
        std::all_of(d.begin(), d.end(), [](const ScriptRecord& r) { return r.content.has_value(); });
    ordered_json report = {{"dataset", d.name()}, {"records", d.size()}, {"splits", to_json(table)}};
    std::optional<CorpusStats> stats;
    if (has_content) {
      stats = corpus_stats(d, approx_token_count, ingest_.bin_width);
      report["stats"] = to_json(*stats);
    } else {
      report["stats"] = nullptr;
      log().warn({{"event", "ingest"}, {"message", "records without content; length statistics skipped"}});
    }
    out_ << render_text(table);
    if (stats)
      out_ << "tokens: mean " << fixed2(stats->mean) << ", median " << stats->median << ", min " << stats->min
           << ", max " << stats->max << "\n";
    if (!ingest_.out.empty()) save_jsonl(d, ingest_.out);
    write_output(ingest_.stats, report.dump(2) + "\n");
    log().info({{"event", "ingest_done"}, {"records", d.size()}});
  }

  static std::string fixed2(double v) { return util::fixed2(v); }

  // -- annotate -------------------------------------------------------------

  struct AnnotateArgs {
    std::string in, out_dir, temperatures, model;
  } annotate_;

  void build_annotate(CLI::App& app) {
    CLI::App* s = sub(app, "annotate", "Annotate a corpus at each configured temperature");
    s->add_option("--in", annotate_.in, "Corpus JSONL (records need content)")->required()->check(CLI::ExistingFile);
    s->add_option("--out-dir", annotate_.out_dir, "Directory for annotations_t<temp>.jsonl files")->required();
    s->add_option("--temperatures", annotate_.temperatures, "Comma-separated temperatures (default: filter config)");
    s->add_option("--model", annotate_.model, "Annotator model identifier (overrides the config)");
    s->callback([this] { action_ = [this] { annotate_cmd(); }; });
  }

  void annotate_cmd() {
    RunConfig c = config();
    c.validate();
    const Dataset corpus = load_jsonl(annotate_.in);
    const std::vector<double> temps =
        annotate_.temperatures.empty() ? c.filter.temperatures : parse_number_list(annotate_.temperatures, "temperature");
    ModelHandle model = c.annotator.model;
    if (!annotate_.model.empty()) model.identifier = annotate_.model;
    auto backend = make_backend(c.annotator);
    const PromptLibrary prompts(c.prompts_dir);
    for (const ScriptRecord& r : corpus)
      if (!r.content) throw MissingContent(r.sha256);

    for (double t : temps) {
      std::vector<std::optional<AnnotationOutcome>> outcomes(corpus.size());
      util::parallel_for(corpus.size(), c.filter.workers, [&](std::size_t i) {
        outcomes[i] = annotate(*backend, prompts, model, corpus.records()[i], t, c.generation);
      });
      std::string text;
      std::map<std::string, std::size_t> tally;
      for (const auto& o : outcomes) {
        text += to_json(*o).dump() + "\n";
        if (const auto* f = std::get_if<ParseFailure>(&*o)) ++tally[std::string(to_string(f->defect))];
        else ++tally["ok"];
      }
      util::atomic_write(annotation_file(annotate_.out_dir, t), text);
      out_ << "t=" << format_number(t);
      for (const auto& [k, v] : tally) out_ << " " << k << "=" << v;
      out_ << "\n";
      log().info({{"event", "annotate_done"}, {"temperature", t}, {"records", corpus.size()}});
    }
  }

  // -- filter ---------------------------------------------------------------

  struct FilterArgs {
    std::string in, out, report, corpus;
    std::optional<double> alpha;
    std::uint32_t iteration = 1;
  } filter_;

  void build_filter(CLI::App& app) {
    CLI::App* s = sub(app, "filter", "Run the staged quality filter over annotation files");
    s->add_option("--in", filter_.in, "Directory holding annotations_t<temp>.jsonl")->required()->check(CLI::ExistingDirectory);
    s->add_option("--out", filter_.out, "Write surviving pseudo-labels (JSONL) here")->required();
    s->add_option("--report", filter_.report, "Write the filter report (JSON) here");
    s->add_option("--corpus", filter_.corpus, "Corpus supplying content and output order")->check(CLI::ExistingFile);
    s->add_option("--alpha", filter_.alpha, "Confidence threshold (overrides the config)")->check(CLI::Range(0.0, 1.0));
    s->add_option("--iteration", filter_.iteration, "Iteration number stamped on pseudo-labels");
    s->callback([this] { action_ = [this] { filter_cmd(); }; });
  }

  void filter_cmd() {
    RunConfig c = config();
    if (filter_.alpha) c.filter.alpha = *filter_.alpha;
    c.validate();
    const AnnotationSets sets = load_annotation_sets(filter_.in, c.filter.temperatures);
    std::optional<Dataset> corpus;
    if (!filter_.corpus.empty()) corpus = load_jsonl(filter_.corpus);
    auto judge = make_backend(c.judge);
    const PromptLibrary prompts(c.prompts_dir);
    PipelineOptions options;
    options.corpus = corpus ? &*corpus : nullptr;
    options.iteration = filter_.iteration;
    PipelineResult result = run_pipeline(sets, c.filter, JudgeContext{*judge, prompts}, options);
    save_jsonl(result.pseudo, filter_.out);
    write_output(filter_.report, to_json(result.report).dump(2) + "\n");
    out_ << render_text(result.report);
    log().info({{"event", "filter_done"}, {"kept", result.report.final_kept}});
  }

  // -- sweep ----------------------------------------------------------------

  struct SweepArgs {
    std::string in, out, alphas = "0,0.5,0.6,0.7,0.8,0.9,0.95,0.99";
  } sweep_;

  void build_sweep(CLI::App& app) {
    CLI::App* s = sub(app, "sweep", "Tabulate confidence-filter retention across thresholds and temperatures");
    s->add_option("--in", sweep_.in, "Directory holding annotations_t<temp>.jsonl")->required()->check(CLI::ExistingDirectory);
    s->add_option("--alphas", sweep_.alphas, "Comma-separated thresholds")->capture_default_str();
    s->add_option("--out", sweep_.out, "Write the table as CSV here");
    s->callback([this] { action_ = [this] { sweep_cmd(); }; });
  }

  void sweep_cmd() {
    RunConfig c = config();
    const AnnotationSets sets = load_annotation_sets(sweep_.in, c.filter.temperatures);
    // The confidence check only sees drafts that survive the sanity stage,
    // which is exactly the draft map of each set.
    const auto rows = retention_sweep(sets, parse_number_list(sweep_.alphas, "alpha"));
    const std::string csv = retention_csv(rows);
    write_output(sweep_.out, csv);
    out_ << csv;
  }

  // -- loop / resume --------------------------------------------------------

  struct LoopArgs {
    std::string seed_dataset, unlabeled, workspace;
    std::optional<std::uint32_t> k;
  } loop_;
  std::string resume_workspace_;

  void build_loop(CLI::App& app) {
    CLI::App* s = sub(app, "loop", "Run the iterative fine-tune, annotate and filter loop");
    s->add_option("--seed-dataset", loop_.seed_dataset, "Expert-labelled seed dataset (JSONL)")
        ->required()
        ->check(CLI::ExistingFile);
    s->add_option("--unlabeled", loop_.unlabeled, "Unlabelled corpus (JSONL with content)")
        ->required()
        ->check(CLI::ExistingFile);
    s->add_option("--workspace", loop_.workspace, "Checkpoint directory (overrides the config)");
    s->add_option("--k", loop_.k, "Number of iterations (overrides the config)")->check(CLI::PositiveNumber);
    s->callback([this] { action_ = [this] { loop_cmd(); }; });
  }

  void build_resume(CLI::App& app) {
    CLI::App* s = sub(app, "resume", "Continue a checkpointed loop from its last completed phase");
    s->add_option("--workspace", resume_workspace_, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    s->callback([this] { action_ = [this] { resume_cmd(); }; });
  }

  struct LoopParts {
    std::shared_ptr<Backend> annotator, judge;
    std::unique_ptr<Finetuner> finetuner;
    std::unique_ptr<PromptLibrary> prompts;
  };

  LoopParts loop_parts(const RunConfig& c) const {
    c.validate();
    return {make_backend(c.annotator), make_backend(c.judge), make_finetuner(c.finetuner),
            std::make_unique<PromptLibrary>(c.prompts_dir)};
  }

  LoopEnvironment environment(LoopParts& parts, std::optional<std::size_t> workers) const {
    LoopEnvironment env{*parts.annotator, *parts.judge, *parts.finetuner, *parts.prompts, {}, {}, {}, workers, true};
    env.log = [this](const ordered_json& e) { log().info(e); };
    return env;
  }

  void print_loop(const LoopResult& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%-9s %-10s %-28s %12s %12s\n", "Iteration", "Status", "Model", "Training",
                  "Pseudo");
    out_ << line;
    for (const auto& s : r.states) {
      std::snprintf(line, sizeof line, "%-9u %-10s %-28s %12zu %12zu\n", s.iteration,
                    std::string(to_string(s.status)).c_str(), s.model ? s.model->identifier.c_str() : "-",
                    s.training_size, s.pseudo_labels.size());
      out_ << line;
    }
    out_ << "final model: " << r.final_model.identifier << "\n";
  }

  void loop_cmd() {
    RunConfig c = config();
    if (loop_.k) c.loop.k = *loop_.k;
    const fs::path ws = loop_.workspace.empty() ? c.workspace : fs::path(loop_.workspace);
    if (ws.empty()) throw InvalidConfig("no workspace given (--workspace or loop.workspace)");
    LoopParts parts = loop_parts(c);
    LoopEnvironment env = environment(parts, std::nullopt);
    print_loop(run_loop(c.loop, load_jsonl(loop_.seed_dataset), load_jsonl(loop_.unlabeled), ws, env));
  }

  void resume_cmd() {
    RunConfig c = config();
    LoopParts parts = loop_parts(c);
    LoopEnvironment env = environment(parts, workers_);
    print_loop(resume(resume_workspace_, env));
  }

  // -- eval -----------------------------------------------------------------

  struct EvalArgs {
    std::string pred, truth, facet = "malicious", model = "model", out;
    std::string a, b;
    std::string votes, counts;
    std::string phrases;
    std::vector<std::string> datasets;
    std::string pairs, report;
  } eval_;

  void build_eval(CLI::App& app) {
    CLI::App* e = sub(app, "eval", "Evaluation statistics");
    e->require_subcommand(1);

    CLI::App* acc = sub(*e, "accuracy", "Micro and per-language accuracy of predictions against truth");
    acc->add_option("--pred", eval_.pred, "Predictions JSONL")->required()->check(CLI::ExistingFile);
    acc->add_option("--truth", eval_.truth, "Ground-truth JSONL")->required()->check(CLI::ExistingFile);
    acc->add_option("--facet", eval_.facet, "malicious or language")
        ->check(CLI::IsMember({"malicious", "language"}))
        ->capture_default_str();
    acc->add_option("--model", eval_.model, "Row label in the printed table")->capture_default_str();
    acc->add_option("--out", eval_.out, "Write the report as JSON here");
    acc->callback([this] { action_ = [this] { eval_accuracy(); }; });

    CLI::App* mc = sub(*e, "mcnemar", "McNemar test on the maliciousness predictions of two models");
    mc->add_option("--a", eval_.a, "Predictions of the first model")->required()->check(CLI::ExistingFile);
    mc->add_option("--b", eval_.b, "Predictions of the second model")->required()->check(CLI::ExistingFile);
    mc->add_option("--truth", eval_.truth, "Ground-truth JSONL")->required()->check(CLI::ExistingFile);
    mc->add_option("--out", eval_.out, "Write the result as JSON here");
    mc->callback([this] { action_ = [this] { eval_mcnemar(); }; });

    CLI::App* wr = sub(*e, "winrate", "Pairwise win rate with equal votes excluded from the denominator");
    auto* votes = wr->add_option("--votes", eval_.votes, "Vote log JSONL")->check(CLI::ExistingFile);
    auto* counts = wr->add_option("--counts", eval_.counts, "wins_first,wins_second,equals");
    votes->excludes(counts);
    wr->add_option("--out", eval_.out, "Write the result as JSON here");
    wr->callback([this] { action_ = [this] { eval_winrate(); }; });

    CLI::App* ph = sub(*e, "phrases", "Count summaries containing each behaviour phrase");
    ph->add_option("--dataset", eval_.datasets, "name=path of a summary dataset (repeatable)")->required();
    ph->add_option("--phrases", eval_.phrases, "Phrase list, one per line (default: built-in behaviours)")
        ->check(CLI::ExistingFile);
    ph->add_option("--out", eval_.out, "Write the table as JSON here");
    ph->callback([this] { action_ = [this] { eval_phrases(); }; });

    CLI::App* pw = sub(*e, "pairwise", "Forced-choice LLM judging of summary pairs");
    pw->add_option("--pairs", eval_.pairs, "Pair pool JSONL {pair_id, script, summary_1, summary_2}")
        ->required()
        ->check(CLI::ExistingFile);
    pw->add_option("--out", eval_.out, "Write de-blinded votes (JSONL) here");
    pw->add_option("--report", eval_.report, "Write the win-rate summary (JSON) here");
    pw->callback([this] { action_ = [this] { eval_pairwise(); }; });
  }

  void eval_accuracy() {
    const Facet facet = *parse_facet(eval_.facet);
    const AccuracyReport r = accuracy(load_jsonl(eval_.pred), load_jsonl(eval_.truth), facet);
    out_ << render_text(r, eval_.model);
    write_output(eval_.out, to_json(r).dump(2) + "\n");
  }

  void eval_mcnemar() {
    const McNemarResult r = mcnemar(load_jsonl(eval_.a), load_jsonl(eval_.b), load_jsonl(eval_.truth));
    char chi[64];
    std::snprintf(chi, sizeof chi, "%.3f", r.chi_square);
    out_ << "b=" << r.b << " c=" << r.c << " chi2=" << chi << " p=" << format_p_value(r.p_value) << "\n";
    out_ << "discordant correctness: first only " << r.only_a_correct << ", second only " << r.only_b_correct << "\n";
    if (r.no_discordant_pairs) out_ << "no discordant pairs\n";
    write_output(eval_.out, to_json(r).dump(2) + "\n");
  }

  void print_win_rate(const WinRateResult& r) {
    out_ << "first " << r.rate_a.str() << "% (" << r.wins_a << ")  second " << r.rate_b.str() << "% (" << r.wins_b
         << ")  equal " << r.equals << " (excluded)\n";
  }

  void eval_winrate() {
    WinRateResult r;
    if (!eval_.counts.empty()) {
      const auto v = parse_number_list(eval_.counts, "count");
      if (v.size() != 3 || std::any_of(v.begin(), v.end(), [](double x) { return x < 0 || x != std::floor(x); }))
        throw InvalidConfig("--counts takes three non-negative integers");
      r = win_rate_from_counts(static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]),
                               static_cast<std::size_t>(v[2]));
    } else if (!eval_.votes.empty()) {
      r = win_rate(parse_votes_jsonl(util::read_file(eval_.votes)));
    } else {
      throw InvalidConfig("eval winrate needs --votes or --counts");
    }
    print_win_rate(r);
    write_output(eval_.out, to_json(r).dump(2) + "\n");
  }

  void eval_phrases() {
    std::vector<std::string> phrases;
    if (eval_.phrases.empty()) {
      for (const char* p : MockBackend::kBehaviours) phrases.emplace_back(p);
    } else {
      std::stringstream ss(util::read_file(eval_.phrases));
      for (std::string line; std::getline(ss, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) phrases.push_back(line);
      }
    }
    std::vector<Dataset> data;
    std::vector<std::string> names;
    for (const std::string& spec : eval_.datasets) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos || eq == 0) throw InvalidConfig("--dataset expects name=path, got '" + spec + "'");
      names.push_back(spec.substr(0, eq));
      data.push_back(load_jsonl(spec.substr(eq + 1)));
    }
    std::vector<std::pair<std::string, const Dataset*>> corpora;
    for (std::size_t i = 0; i < data.size(); ++i) corpora.emplace_back(names[i], &data[i]);
    const PhraseTable t = phrase_overlap(phrases, corpora);
    out_ << render_text(t);
    write_output(eval_.out, to_json(t).dump(2) + "\n");
  }

  void eval_pairwise() {
    RunConfig c = config();
    c.validate();
    auto backend = make_backend(c.pairwise_judge);
    const PromptLibrary prompts(c.prompts_dir);
    PairwiseEvalOptions options;
    options.seed = c.seed;
    options.workers = c.filter.workers;
    const PairwiseEvalResult r =
        pairwise_llm_eval(load_pairs(eval_.pairs), *backend, prompts, c.pairwise_judge.model, options);
    std::string log_text;
    for (const auto& v : r.votes) log_text += to_json(v).dump() + "\n";
    write_output(eval_.out, log_text);
    const WinRateResult tally = tally_votes(r.votes);
    ordered_json report = {{"judge", c.pairwise_judge.model.identifier},
                           {"votes", r.votes.size()},
                           {"skipped", r.skipped},
                           {"win_rate", to_json(tally)}};
    write_output(eval_.report, report.dump(2) + "\n");
    out_ << "judge " << c.pairwise_judge.model.identifier << ": " << r.votes.size() << " votes, " << r.skipped.size()
         << " skipped\n";
    if (tally.decisive() == 0) throw NoDecisiveVotes();
    print_win_rate(tally);
  }

  // -- serve ----------------------------------------------------------------

  struct ServeArgs {
    std::string pairs, votes, static_dir, host, filter_report;
    std::optional<int> port;
    std::optional<std::size_t> per_evaluator;
  } serve_;

  void build_serve(CLI::App& app) {
    CLI::App* s = sub(app, "serve", "Serve the blind pairwise evaluation API and UI");
    s->add_option("--pairs", serve_.pairs, "Pair pool JSONL (overrides the config)");
    s->add_option("--votes", serve_.votes, "Vote log JSONL (overrides the config)");
    s->add_option("--static", serve_.static_dir, "UI asset directory served at /");
    s->add_option("--host", serve_.host, "Bind address");
    s->add_option("--port", serve_.port, "Bind port")->check(CLI::Range(0, 65535));
    s->add_option("--filter-report", serve_.filter_report, "Filter report exposed at /api/reports/filter");
    s->add_option("--pairs-per-evaluator", serve_.per_evaluator, "Pairs assigned to each evaluator")
        ->check(CLI::PositiveNumber);
    s->callback([this] { action_ = [this] { serve_cmd(); }; });
  }

  void serve_cmd() {
    RunConfig c = config();
    ServiceConfig sc = c.service;
    if (!serve_.pairs.empty()) sc.pairs = serve_.pairs;
    if (!serve_.votes.empty()) sc.vote_log = serve_.votes;
    if (!serve_.static_dir.empty()) sc.static_dir = serve_.static_dir;
    if (!serve_.host.empty()) sc.host = serve_.host;
    if (serve_.port) sc.port = *serve_.port;
    if (!serve_.filter_report.empty()) sc.filter_report = serve_.filter_report;
    if (serve_.per_evaluator) sc.pairs_per_evaluator = *serve_.per_evaluator;
    if (sc.pairs.empty()) throw InvalidConfig("no pair pool given (--pairs or service.pairs)");
    if (sc.vote_log.empty()) throw InvalidConfig("no vote log given (--votes or service.vote_log)");

    EvalService service(load_pairs(sc.pairs), {c.seed, sc.pairs_per_evaluator, sc.vote_log, true});
    EvalServer server(service, {sc.host, sc.port, sc.static_dir, sc.filter_report});
    active_server() = &server;
    std::signal(SIGINT, [](int) {
      if (active_server()) active_server()->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (active_server()) active_server()->stop();
    });
    int port = sc.port;
    if (port == 0) port = server.bind_any();
    log().info({{"event", "serve"}, {"host", sc.host}, {"port", port}, {"pairs", service.pool_size()}});
    const bool ok = sc.port == 0 ? server.listen_after_bind() : server.listen();
    active_server() = nullptr;
    if (!ok) throw InvalidConfig("could not bind " + sc.host + ":" + std::to_string(sc.port));
  }

  static EvalServer*& active_server() {
    static EvalServer* server = nullptr;
    return server;
  }

  std::ostream& out_;
  std::ostream& err_;
  const Logger* logger_ = nullptr;
  std::function<void()> action_;

  std::string config_path_;
  std::optional<std::uint64_t> seed_;
  std::optional<std::size_t> workers_;
  std::string prompts_dir_;
  bool quiet_ = false;
};

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return Cli(out, err).run(std::move(args));
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
  return run_cli(std::move(args), out, err);
}

}  // namespace labelloop::cli
