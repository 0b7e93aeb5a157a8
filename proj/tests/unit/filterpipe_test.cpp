// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "reference_filter.hpp"

using namespace labelloop;
using labelloop::testing::make_draft;
using labelloop::testing::make_failure;
using labelloop::testing::sha_of;

namespace {

const std::vector<double> kTemps{0.4, 0.6, 0.8};

AnnotationSets empty_sets(const std::vector<double>& temps = kTemps) {
  AnnotationSets sets;
  for (double t : temps) sets[t].temperature = t;
  return sets;
}

/// Adds a clean, confident, coherent draft for `sha` at every temperature.
void add_clean(AnnotationSets& sets, const std::string& sha, bool malicious) {
  for (auto& [t, s] : sets) s.add(make_draft(sha, t, malicious));
}

struct Harness {
  MockBackend judge_backend;
  PromptLibrary prompts = labelloop::testing::test_prompts();
  FilterConfig config;

  explicit Harness(MockOptions judge_options = {}) : judge_backend(std::move(judge_options)) {}

  PipelineResult run(const AnnotationSets& sets, const PipelineOptions& options = {}) {
    return run_pipeline(sets, config, {judge_backend, prompts}, options);
  }
};

const StageCount& stage(const FilterReport& r, const std::string& name) {
  for (const auto& s : r.stages)
    if (s.stage == name) return s;
  throw std::runtime_error("no stage " + name);
}

std::set<std::string> shas_of(const Dataset& d) {
  std::set<std::string> out;
  for (const auto& r : d) out.insert(r.sha256);
  return out;
}

}  // namespace

TEST_CASE("sanity drops parse failures and keeps drafts", "[filterpipe]") {
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true));
  s.add(make_failure(sha_of(2), 0.6, ParseDefect::Truncated));
  s.add(make_failure(sha_of(3), 0.6, ParseDefect::Empty));
  const auto [kept, hist] = sanity_filter(s);
  CHECK(kept.drafts.size() == 1);
  CHECK(kept.drafts.count(sha_of(1)) == 1);
  CHECK(hist == DropHistogram{{"Empty", 1}, {"Truncated", 1}});
}

TEST_CASE("consensus requires one label at every temperature", "[filterpipe]") {
  AnnotationSets sets = empty_sets();
  add_clean(sets, sha_of(1), true);
  add_clean(sets, sha_of(2), false);
  sets[0.8].drafts[sha_of(2)].malicious = true;  // disagreement
  sets[0.4].add(make_draft(sha_of(3), 0.4, true));
  sets[0.6].add(make_draft(sha_of(3), 0.6, true));  // absent at 0.8
  const auto stages = consensus_stage(sets);
  for (const auto& [t, r] : stages) {
    CHECK(r.kept.drafts.size() == 1);
    CHECK(r.kept.drafts.count(sha_of(1)) == 1);
  }
  CHECK(stages.at(0.6).dropped.at(sha_of(2)) == reason::kLabelDisagreement);
  CHECK(stages.at(0.6).dropped.at(sha_of(3)) == reason::kMissingAtTemperature);
}

TEST_CASE("consensus on language is opt-in", "[filterpipe]") {
  AnnotationSets sets = empty_sets();
  add_clean(sets, sha_of(1), true);
  sets[0.4].drafts[sha_of(1)].language = Language::py;
  CHECK(consensus_filter(sets).at(0.6).drafts.size() == 1);
  const auto strict = consensus_stage(sets, true);
  CHECK(strict.at(0.6).kept.drafts.empty());
  CHECK(strict.at(0.6).dropped.at(sha_of(1)) == reason::kLanguageDisagreement);
}

TEST_CASE("confidence threshold is inclusive", "[filterpipe]") {
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true, 0.9));
  s.add(make_draft(sha_of(2), 0.6, true, std::nextafter(0.9, 0.0)));
  s.add(make_draft(sha_of(3), 0.6, false, 1.0));
  const StageResult r = confidence_stage(s, 0.9);
  CHECK(r.kept.drafts.count(sha_of(1)) == 1);
  CHECK(r.kept.drafts.count(sha_of(3)) == 1);
  CHECK(r.dropped.at(sha_of(2)) == reason::kBelowThreshold);
}

TEST_CASE("confidence needs probabilities unless alpha is zero", "[filterpipe]") {
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true, std::nullopt));
  CHECK_THROWS_AS(confidence_filter(s, 0.5), MissingConfidence);
  CHECK(confidence_filter(s, 0.0).drafts.size() == 1);
}

TEST_CASE("verdict parsing accepts objects and leading words", "[filterpipe]") {
  CHECK(parse_verdict(R"({"malicious": true})") == std::optional<bool>(true));
  CHECK(parse_verdict(R"(Sure. {"malicious": false})") == std::optional<bool>(false));
  CHECK(parse_verdict(R"({"verdict": "Benign"})") == std::optional<bool>(false));
  CHECK(parse_verdict("**Malicious**, because it downloads") == std::optional<bool>(true));
  CHECK(parse_verdict("benign") == std::optional<bool>(false));
  CHECK_FALSE(parse_verdict("The summary is ambiguous.").has_value());
  CHECK_FALSE(parse_verdict(R"({"malicious": "maybe"})").has_value());
  CHECK_FALSE(parse_verdict("").has_value());
}

TEST_CASE("coherence drops summaries worded against their label", "[filterpipe]") {
  Harness h;
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true, 0.99, std::string("Malicious dropper.")));
  s.add(make_draft(sha_of(2), 0.6, true, 0.99, std::string("Benign installer.")));
  const StageResult r = coherence_stage(s, h.config.judge, {h.judge_backend, h.prompts}, h.config);
  CHECK(r.kept.drafts.size() == 1);
  CHECK(r.dropped.at(sha_of(2)) == reason::kJudgeMismatch);
}

TEST_CASE("unparseable and failed judge calls count as unavailable", "[filterpipe]") {
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true));
  for (auto set_rate : {+[](MockOptions& o) { o.unparseable_verdict_rate = 1; },
                        +[](MockOptions& o) { o.transport_failure_rate = 1; }}) {
    MockOptions o;
    set_rate(o);
    Harness h(o);
    const StageResult r = coherence_stage(s, h.config.judge, {h.judge_backend, h.prompts}, h.config);
    CHECK(r.kept.drafts.empty());
    CHECK(r.dropped.at(sha_of(1)) == reason::kJudgeUnavailable);
  }
}

TEST_CASE("each defect class is removed by exactly its stage", "[filterpipe]") {
  AnnotationSets sets = empty_sets();
  for (std::size_t i = 0; i < 10; ++i) add_clean(sets, sha_of(i), i % 2 == 0);
  sets[0.6].drafts.erase(sha_of(0));
  sets[0.6].add(make_failure(sha_of(0), 0.6, ParseDefect::IncompleteJson));
  sets[0.8].drafts[sha_of(1)].malicious = true;
  for (auto& [t, s] : sets) s.drafts[sha_of(2)].label_probability = 0.5;
  for (auto& [t, s] : sets) s.drafts[sha_of(3)].summary = "Malicious helper.";  // labelled benign

  Harness h;
  const PipelineResult out = h.run(sets);
  const FilterReport& r = out.report;
  CHECK(r.final_kept == 6);
  CHECK(out.pseudo.size() == 6);
  CHECK(stage(r, "sanity").input == 10);
  CHECK(stage(r, "sanity").dropped() == 1);
  CHECK(stage(r, "consensus").dropped() == 1);
  CHECK(stage(r, "confidence").dropped() == 1);
  CHECK(stage(r, "coherence").dropped() == 1);
  CHECK(r.dropped.at(sha_of(0)) == DropRecord{"sanity", "IncompleteJson"});
  CHECK(r.dropped.at(sha_of(1)) == DropRecord{"consensus", reason::kLabelDisagreement});
  CHECK(r.dropped.at(sha_of(2)) == DropRecord{"confidence", reason::kBelowThreshold});
  CHECK(r.dropped.at(sha_of(3)) == DropRecord{"coherence", reason::kJudgeMismatch});
  for (const auto& rec : out.pseudo) {
    CHECK(rec.provenance == Provenance::pseudo);
    CHECK(rec.iteration == 1u);
  }
}

TEST_CASE("coherence removes exactly the planted incoherent summaries", "[filterpipe]") {
  AnnotationSets sets = empty_sets();
  for (std::size_t i = 0; i < 100; ++i) add_clean(sets, sha_of(i), i % 3 == 0);
  for (std::size_t i : {7u, 42u, 91u})
    for (auto& [t, s] : sets)
      s.drafts[sha_of(i)].summary = std::string(i % 3 == 0 ? "Benign" : "Malicious") + " looking text.";
  Harness h;
  const PipelineResult out = h.run(sets);
  CHECK(stage(out.report, "coherence").input == 100);
  CHECK(stage(out.report, "coherence").dropped() == 3);
  CHECK(out.report.final_kept == 97);
  for (std::size_t i : {7u, 42u, 91u}) CHECK(out.report.dropped.at(sha_of(i)).stage == "coherence");
}

TEST_CASE("pipeline orders output by the corpus and carries content", "[filterpipe]") {
  const Dataset corpus = labelloop::testing::synthetic_corpus(20);
  AnnotationSets sets = empty_sets();
  for (const auto& r : corpus) add_clean(sets, r.sha256, r.malicious);
  Harness h;
  PipelineOptions opts;
  opts.corpus = &corpus;
  opts.iteration = 2;
  const PipelineResult out = h.run(sets, opts);
  REQUIRE(out.pseudo.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(out.pseudo.records()[i].sha256 == corpus.records()[i].sha256);
    CHECK(out.pseudo.records()[i].content == corpus.records()[i].content);
    CHECK(out.pseudo.records()[i].iteration == 2u);
  }
}

TEST_CASE("pipeline rejects missing temperatures and bad configs", "[filterpipe]") {
  Harness h;
  CHECK_THROWS_AS(h.run(empty_sets({0.4, 0.6})), InvalidConfig);
  h.config.select_temperature = 0.5;
  CHECK_THROWS_AS(h.run(empty_sets()), InvalidConfig);
  h.config.select_temperature = 0.6;
  h.config.alpha = 1.5;
  CHECK_THROWS_AS(h.run(empty_sets()), InvalidConfig);
  h.config.alpha = 0.9;
  h.config.temperatures = {0.6, 0.6};
  CHECK_THROWS_AS(h.run(empty_sets()), InvalidConfig);
}

TEST_CASE("reduction percentages round half up", "[filterpipe]") {
  CHECK(reduction_percent(157126, 16937).str() == "10.78");
  CHECK(reduction_percent(3, 1).str() == "33.33");
  CHECK(reduction_percent(3, 2).str() == "66.67");
  CHECK(reduction_percent(8, 1).str() == "12.50");
  CHECK(reduction_percent(0, 0).str() == "0.00");
}

TEST_CASE("retention sweep reports the confident share", "[filterpipe]") {
  AnnotationSets sets = empty_sets({0.6});
  sets[0.6].add(make_draft(sha_of(1), 0.6, true, 0.85));
  sets[0.6].add(make_draft(sha_of(2), 0.6, true, 0.92));
  sets[0.6].add(make_draft(sha_of(3), 0.6, true, 0.99));
  const auto rows = retention_sweep(sets, {0.9, 0.0});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].alpha == 0.0);
  CHECK(rows[0].label_retention.str() == "100.00");
  CHECK(rows[1].label_retention.str() == "66.67");
  REQUIRE(rows[1].language_retention);
  CHECK(rows[1].language_retention->str() == "100.00");

  const std::string csv = retention_csv(rows);
  CHECK(csv == "alpha,temperature,label_retention,language_retention\n0,0.6,100.00,100.00\n0.9,0.6,66.67,100.00\n");
  CHECK(retention_sweep(empty_sets({0.6}), {0.5})[0].label_retention.str() == "100.00");
  CHECK_THROWS_AS(retention_sweep(sets, {1.2}), InvalidConfig);
}

TEST_CASE("retention is non-increasing in alpha", "[filterpipe][property]") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const AnnotationSets sets = labelloop::testing::fuzz_sets(seed, 80, kTemps, 0.9);
    std::vector<double> alphas;
    for (int i = 0; i <= 20; ++i) alphas.push_back(i / 20.0);
    const auto rows = retention_sweep(sets, alphas);
    std::map<double, std::int64_t> last;
    for (const auto& row : rows) {
      if (row.alpha == 0.0) CHECK(row.label_retention.str() == "100.00");
      auto it = last.find(row.temperature);
      if (it != last.end()) CHECK(row.label_retention.hundredths <= it->second);
      last[row.temperature] = row.label_retention.hundredths;
    }
  }
}

TEST_CASE("pipeline agrees with the reference filter", "[filterpipe][property]") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const double alpha = (seed % 4 == 0) ? 0.0 : 0.9;
    const AnnotationSets sets = labelloop::testing::fuzz_sets(seed, 60, kTemps, alpha);
    Harness h;
    h.config.alpha = alpha;
    const PipelineResult out = h.run(sets);
    const auto expected = labelloop::testing::reference_filter(
        sets, kTemps, alpha, 0.6, labelloop::testing::backend_judge(h.judge_backend, h.prompts, h.config.judge));
    CHECK(shas_of(out.pseudo) == expected);
  }
}

TEST_CASE("stage counts conserve records", "[filterpipe][property]") {
  for (std::uint64_t seed = 100; seed < 160; ++seed) {
    const AnnotationSets sets = labelloop::testing::fuzz_sets(seed, 60, kTemps, 0.9);
    Harness h;
    const FilterReport r = h.run(sets).report;
    REQUIRE(r.stages.size() == 4);
    const AnnotationSet& sel = sets.at(0.6);
    CHECK(r.stages[0].input == sel.drafts.size() + sel.failures.size());
    std::size_t total_drops = 0;
    for (std::size_t i = 0; i < r.stages.size(); ++i) {
      CHECK(r.stages[i].input == r.stages[i].kept + r.stages[i].dropped());
      if (i > 0) CHECK(r.stages[i].input == r.stages[i - 1].kept);
      total_drops += r.stages[i].dropped();
    }
    CHECK(r.final_kept == r.stages.back().kept);
    CHECK(r.dropped.size() == total_drops);
    CHECK(r.stages[0].input == r.final_kept + total_drops);
  }
}

TEST_CASE("pipeline output does not depend on worker count", "[filterpipe][property]") {
  const AnnotationSets sets = labelloop::testing::fuzz_sets(7, 150, kTemps, 0.9);
  Harness one, many;
  many.config.workers = 8;
  const PipelineResult a = one.run(sets), b = many.run(sets);
  CHECK(to_json(a.report).dump() == to_json(b.report).dump());
  CHECK(to_jsonl(a.pseudo) == to_jsonl(b.pseudo));
}

TEST_CASE("filter reports round-trip through JSON", "[filterpipe]") {
  Harness h;
  const FilterReport r = h.run(labelloop::testing::fuzz_sets(3, 80, kTemps, 0.9)).report;
  const std::string once = to_json(r).dump();
  CHECK(to_json(filter_report_from_json(json::parse(once))).dump() == once);
  const std::string text = render_text(r);
  CHECK(text.find("coherence") != std::string::npos);
  CHECK(text.find("final kept (t=0.6)") != std::string::npos);
}

TEST_CASE("filter configs round-trip through JSON", "[filterpipe]") {
  FilterConfig c;
  c.temperatures = {0.2, 1.0};
  c.select_temperature = 1.0;
  c.alpha = 0.75;
  c.language_consensus = true;
  const std::string once = to_json(c).dump();
  CHECK(to_json(filter_config_from_json(json::parse(once))).dump() == once);
  CHECK_THROWS_AS(filter_config_from_json(json::parse(R"({"alpha": 2})")), InvalidConfig);
}
