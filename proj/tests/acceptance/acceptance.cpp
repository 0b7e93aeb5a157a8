// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: prints one PASS/FAIL line per headline criterion with its
// measured value and wall time, and exits non-zero if any line fails. Every
// check runs against mock backends only.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "eval_fixtures.hpp"
#include "reference_filter.hpp"

using namespace labelloop;
using namespace labelloop::testing;
namespace fs = std::filesystem;

namespace {

const std::vector<double> kTemps{0.4, 0.6, 0.8};

struct Outcome {
  bool pass;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_seconds;  // 0 means no time limit
  std::function<Outcome()> run;
};

std::set<std::string> shas_of(const Dataset& d) {
  std::set<std::string> out;
  for (const auto& r : d) out.insert(r.sha256);
  return out;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome mcnemar_reproduction() {
  const McNemarResult r = mcnemar_from_counts(110, 49);
  const bool ok = std::abs(r.chi_square - 23.402) <= 0.001 && r.p_value < 1e-5;
  return {ok, "chi2=" + fmt("%.4f", r.chi_square) + " p=" + fmt("%.3e", r.p_value)};
}

Outcome chi_square_numerics() {
  const double p = stats::chi_square_sf(3.841);
  const double oracle = chi_square_tail_by_integration(3.841);
  bool ok = std::abs(p - 0.05) <= 0.0005 && std::abs(p - oracle) <= 0.0005;
  double prev = 2.0;
  std::size_t violations = 0;
  for (int i = 1; i <= 100; ++i) {
    const double v = stats::chi_square_sf(i * 0.25);
    if (!(v < prev)) ++violations;
    prev = v;
  }
  ok = ok && violations == 0;
  return {ok, "p(3.841)=" + fmt("%.6f", p) + " oracle=" + fmt("%.6f", oracle) +
                  " monotonicity violations=" + std::to_string(violations)};
}

Outcome win_rate_reproduction() {
  const WinRateResult r = win_rate(votes_with(54, 53, 9));
  const bool ok = r.rate_a.str() == "50.47" && r.rate_b.str() == "49.53" && std::abs(r.rate_a.value() - 50.46) <= 0.02;
  return {ok, "first=" + r.rate_a.str() + " second=" + r.rate_b.str() + " (published 50.46)"};
}

Outcome oracle_equivalence() {
  std::size_t mismatches = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const double alpha = seed % 5 == 0 ? 0.0 : 0.9;
    const AnnotationSets sets = fuzz_sets(seed, 200, kTemps, alpha);
    MockBackend judge_backend;
    const PromptLibrary prompts = test_prompts();
    FilterConfig config;
    config.alpha = alpha;
    const PipelineResult out = run_pipeline(sets, config, {judge_backend, prompts}, {});
    const auto expected = reference_filter(sets, kTemps, alpha, 0.6, backend_judge(judge_backend, prompts, config.judge));
    if (shas_of(out.pseudo) != expected) ++mismatches;
  }
  return {mismatches == 0, "500 corpora, mismatches=" + std::to_string(mismatches)};
}

Outcome stage_conservation() {
  std::size_t violations = 0;
  const PromptLibrary prompts = test_prompts();
  for (std::uint64_t seed = 1000; seed < 2000; ++seed) {
    const AnnotationSets sets = fuzz_sets(seed, 120, kTemps, 0.9);
    MockBackend judge_backend;
    const FilterReport r = run_pipeline(sets, FilterConfig{}, {judge_backend, prompts}, {}).report;
    const AnnotationSet& sel = sets.at(0.6);
    std::set<std::string> input;
    for (const auto& [sha, _] : sel.drafts) input.insert(sha);
    for (const auto& [sha, _] : sel.failures) input.insert(sha);
    bool ok = r.stages.size() == 4 && r.stages[0].input == input.size();
    std::size_t drops = 0;
    for (std::size_t i = 0; i < r.stages.size(); ++i) {
      ok = ok && r.stages[i].input == r.stages[i].kept + r.stages[i].dropped();
      if (i > 0) ok = ok && r.stages[i].input == r.stages[i - 1].kept;
      drops += r.stages[i].dropped();
    }
    ok = ok && r.dropped.size() == drops && r.final_kept + drops == input.size();
    for (const auto& [sha, d] : r.dropped) ok = ok && input.count(sha) == 1 && !d.stage.empty() && !d.reason.empty();
    if (!ok) ++violations;
  }
  return {violations == 0, "1000 cases, violations=" + std::to_string(violations)};
}

Outcome sweep_monotonicity() {
  std::size_t violations = 0, bad_zero_rows = 0;
  std::vector<double> alphas;
  for (int i = 0; i <= 20; ++i) alphas.push_back(i / 20.0);
  for (std::uint64_t seed = 3000; seed < 3050; ++seed) {
    const auto rows = retention_sweep(fuzz_sets(seed, 200, kTemps, 0.9), alphas);
    std::map<double, std::int64_t> last;
    for (const auto& row : rows) {
      if (row.alpha == 0.0 && row.label_retention.str() != "100.00") ++bad_zero_rows;
      auto it = last.find(row.temperature);
      if (it != last.end() && row.label_retention.hundredths > it->second) ++violations;
      last[row.temperature] = row.label_retention.hundredths;
    }
  }
  return {violations == 0 && bad_zero_rows == 0, "50 corpora, increases=" + std::to_string(violations) +
                                                     " alpha0 rows not 100.00=" + std::to_string(bad_zero_rows)};
}

Outcome confidence_boundary() {
  const double alpha = 0.9;
  AnnotationSet s;
  s.temperature = 0.6;
  s.add(make_draft(sha_of(1), 0.6, true, alpha));
  s.add(make_draft(sha_of(2), 0.6, true, alpha - 1e-9));
  const StageResult r = confidence_stage(s, alpha);
  const bool kept_equal = r.kept.drafts.count(sha_of(1)) == 1;
  const bool dropped_below = r.dropped.count(sha_of(2)) == 1 && r.kept.drafts.count(sha_of(2)) == 0;
  return {kept_equal && dropped_below, std::string("p=alpha ") + (kept_equal ? "kept" : "dropped") +
                                           ", p=alpha-1e-9 " + (dropped_below ? "dropped" : "kept")};
}

struct SimulatedCrash : std::runtime_error {
  SimulatedCrash() : std::runtime_error("simulated crash") {}
};

struct LoopRig {
  MockBackend annotator{annotator_options()};
  MockBackend judge;
  MockFinetuner finetuner{finetuner_options()};
  PromptLibrary prompts = test_prompts();
  LoopEnvironment env{annotator, judge, finetuner, prompts, {}, {}, {}, std::nullopt, false};

  static MockOptions annotator_options() {
    MockOptions o;
    o.label_flip_rate = 0.1;
    o.low_confidence_rate = 0.1;
    o.truncated_rate = 0.05;
    o.incoherent_rate = 0.05;
    return o;
  }
  static MockFinetunerOptions finetuner_options() {
    MockFinetunerOptions o;
    o.seed = 5;
    return o;
  }
};

std::map<std::string, std::string> snapshot(const fs::path& ws) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(ws)) {
    if (!e.is_regular_file() || e.path().filename() == "loop.lock") continue;
    out[fs::relative(e.path(), ws).string()] = util::read_file(e.path());
  }
  return out;
}

Outcome loop_resume() {
  LoopConfig config;
  config.k = 2;
  const Dataset seed = seed_fixture(40);
  const Dataset unlabeled = synthetic_corpus(200);
  TempDir reference;
  {
    LoopRig rig;
    run_loop(config, seed, unlabeled, reference.path(), rig.env);
  }
  const auto expected = snapshot(reference.path());
  const std::string final_pseudo = "iteration_2/pseudo.jsonl";
  if (!expected.count(final_pseudo)) return {false, "reference run wrote no " + final_pseudo};

  std::size_t runs = 0, identical = 0;
  for (std::uint32_t iteration : {1u, 2u}) {
    for (IterationStatus phase : {IterationStatus::finetuning, IterationStatus::inferring, IterationStatus::filtering}) {
      ++runs;
      TempDir tmp;
      try {
        LoopRig rig;
        rig.env.after_phase = [&](std::uint32_t i, IterationStatus p) {
          if (i == iteration && p == phase) throw SimulatedCrash();
        };
        run_loop(config, seed, unlabeled, tmp.path(), rig.env);
        continue;  // the crash hook never fired
      } catch (const SimulatedCrash&) {
      }
      LoopRig rig;
      resume(tmp.path(), rig.env);
      const auto got = snapshot(tmp.path());
      if (got.count(final_pseudo) && got.at(final_pseudo) == expected.at(final_pseudo) && got == expected) ++identical;
    }
  }
  return {identical == runs, std::to_string(identical) + "/" + std::to_string(runs) +
                                 " interrupted runs byte-identical; final kept " +
                                 std::to_string(load_jsonl(reference.path() / final_pseudo).size()) + " of 200"};
}

Outcome report_arithmetic() {
  const std::size_t total = 157126;
  const std::size_t dropped = 9095 + 17 + 7825;
  const util::Percent p = reduction_percent(total, dropped);
  // Exact rational check: 16937/157126 lies in [10.775%, 10.785%).
  const bool bracket = 16937ull * 100000ull >= 10775ull * total && 16937ull * 100000ull < 10785ull * total;
  return {p.str() == "10.78" && dropped == 16937 && bracket,
          "dropped=" + std::to_string(dropped) + " reduction=" + p.str() + "% (published 10.76%)"};
}

Outcome macro_average() {
  const auto [preds, truth] = accuracy_fixture(macro_fixture_counts());
  const AccuracyReport r = accuracy(preds, truth, Facet::malicious);
  return {std::abs(r.macro.value() - 91.76) <= 0.01, "macro=" + r.macro.str()};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"mcnemar reproduction", 1.0, mcnemar_reproduction},
      {"chi-square numerics", 0.0, chi_square_numerics},
      {"win-rate reproduction", 1.0, win_rate_reproduction},
      {"filter oracle equivalence", 60.0, oracle_equivalence},
      {"stage conservation", 30.0, stage_conservation},
      {"retention sweep monotonicity", 30.0, sweep_monotonicity},
      {"confidence boundary", 0.0, confidence_boundary},
      {"loop determinism and resume", 120.0, loop_resume},
      {"report arithmetic", 0.0, report_arithmetic},
      {"macro average formatting", 0.0, macro_average},
  };
  std::size_t failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_seconds <= 0.0 || seconds < c.budget_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " [" << fmt("%.3f", seconds) << "s";
    if (c.budget_seconds > 0.0) line << " < " << c.budget_seconds << "s" << (in_time ? "" : " EXCEEDED");
    line << "]";
    std::cout << line.str() << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
