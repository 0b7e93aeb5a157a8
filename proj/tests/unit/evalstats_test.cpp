// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "eval_fixtures.hpp"

using namespace labelloop;
using namespace labelloop::testing;

TEST_CASE("accuracy counts matching labels", "[evalstats]") {
  const auto [preds, truth] = accuracy_fixture({{Language::sh, 4, 3}});
  const AccuracyReport r = accuracy(preds, truth, Facet::malicious);
  CHECK(r.correct == 3);
  CHECK(r.total == 4);
  CHECK(r.micro.str() == "75.00");
  CHECK(r.macro.str() == "75.00");
  CHECK(r.rows[0].accuracy->str() == "75.00");
  CHECK_FALSE(r.rows[1].accuracy);
  CHECK(r.confusion.tp + r.confusion.tn == 3);
  CHECK(r.confusion.fp + r.confusion.fn == 1);
}

TEST_CASE("macro accuracy averages the per-language rates", "[evalstats]") {
  const auto [preds, truth] = accuracy_fixture(macro_fixture_counts());
  const AccuracyReport r = accuracy(preds, truth, Facet::malicious);
  CHECK(r.macro.str() == "91.76");
  CHECK(r.micro.str() == "92.83");  // 3713 / 4000
  const std::vector<std::string> per_language{"96.30", "82.40", "92.20", "95.30", "92.60"};
  for (std::size_t i = 0; i < 5; ++i) CHECK(r.rows[i].accuracy->str() == per_language[i]);

  double oracle = 0;
  for (const auto& c : macro_fixture_counts()) oracle += 100.0 * c.correct / c.total / 5.0;
  CHECK(std::abs(r.macro.value() - oracle) <= 0.005);

  const json j = to_json(r);
  CHECK(j["macro_average"] == "91.76");
  CHECK(j["languages"][1]["accuracy"] == "82.40");
  const std::string table = render_text(r, "finetuned");
  CHECK(table.find("91.76") != std::string::npos);
  CHECK(table.find("finetuned") != std::string::npos);
}

TEST_CASE("language accuracy compares the language field", "[evalstats]") {
  const Dataset truth({make_record(sha_of(1), Language::py, true, Provenance::test),
                       make_record(sha_of(2), Language::js, true, Provenance::test)});
  const Dataset preds({make_record(sha_of(1), Language::py, false, Provenance::test),
                       make_record(sha_of(2), Language::sh, true, Provenance::test)});
  const AccuracyReport r = accuracy(preds, truth, Facet::language);
  CHECK(r.correct == 1);
  CHECK(r.micro.str() == "50.00");
  CHECK(r.rows[static_cast<std::size_t>(Language::js)].correct == 0);
}

TEST_CASE("accuracy requires truth for every prediction", "[evalstats]") {
  const Dataset truth({make_record(sha_of(1), Language::py, true, Provenance::test)});
  const Dataset preds({make_record(sha_of(2), Language::py, true, Provenance::test)});
  CHECK_THROWS_AS(accuracy(preds, truth, Facet::malicious), MissingTruth);
  CHECK_THROWS_AS(accuracy(Dataset{}, truth, Facet::malicious), EmptyIntersection);
}

TEST_CASE("macro accuracy matches a direct average on random tables", "[evalstats][property]") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<LanguageCounts> rows;
    double oracle = 0;
    int present = 0;
    for (Language l : kLanguages) {
      const std::size_t total = rng() % 40;
      if (total == 0) continue;
      const std::size_t correct = rng() % (total + 1);
      rows.push_back({l, total, correct});
      oracle += 100.0 * static_cast<double>(correct) / static_cast<double>(total);
      ++present;
    }
    if (present == 0) continue;
    oracle /= present;
    const auto [preds, truth] = accuracy_fixture(rows);
    const AccuracyReport r = accuracy(preds, truth, Facet::malicious);
    CHECK(std::abs(r.macro.value() - oracle) <= 0.005 + 1e-9);
  }
}

TEST_CASE("McNemar statistic from discordant counts", "[evalstats]") {
  const McNemarResult r = mcnemar_from_counts(110, 49);
  CHECK(std::abs(r.chi_square - 23.402) <= 0.001);
  CHECK(r.chi_square == Catch::Approx(3721.0 / 159.0).epsilon(1e-12));
  CHECK(r.p_value < 1e-5);
  CHECK(std::abs(r.p_value - chi_square_tail_by_integration(r.chi_square)) <= 1e-9);
  CHECK(format_p_value(r.p_value).find("p<1e-5") != std::string::npos);

  const McNemarResult even = mcnemar_from_counts(5, 5);
  CHECK(even.chi_square == 0.0);
  CHECK(even.p_value == 1.0);

  const McNemarResult none = mcnemar_from_counts(0, 0);
  CHECK(none.no_discordant_pairs);
  CHECK(none.chi_square == 0.0);
  CHECK(none.p_value == 1.0);
}

TEST_CASE("McNemar over prediction sets", "[evalstats]") {
  const McNemarFixture f = mcnemar_fixture(110, 49, 300);
  const McNemarResult r = mcnemar(f.a, f.b, f.truth);
  CHECK(r.b == 110);
  CHECK(r.c == 49);
  CHECK(std::abs(r.chi_square - 23.402) <= 0.001);
  CHECK(r.only_a_correct + r.only_b_correct == 159);

  const McNemarResult swapped = mcnemar(f.b, f.a, f.truth);
  CHECK(swapped.b == 49);
  CHECK(swapped.c == 110);
  CHECK(swapped.chi_square == r.chi_square);
  CHECK(swapped.only_a_correct == r.only_b_correct);

  const McNemarFixture g = mcnemar_fixture(1, 1, 2);
  const Dataset shorter(std::vector<ScriptRecord>(g.a.records().begin(), g.a.records().begin() + 3));
  CHECK_THROWS_AS(mcnemar(shorter, g.b, g.truth), CoverageMismatch);
}

TEST_CASE("McNemar is symmetric in its arguments", "[evalstats][property]") {
  for (std::size_t b = 0; b < 40; b += 3)
    for (std::size_t c = 0; c < 40; c += 5) {
      const McNemarResult x = mcnemar_from_counts(b, c), y = mcnemar_from_counts(c, b);
      CHECK(x.chi_square == y.chi_square);
      CHECK(x.p_value == y.p_value);
      CHECK(x.chi_square >= 0.0);
      CHECK(x.p_value >= 0.0);
      CHECK(x.p_value <= 1.0);
    }
}

TEST_CASE("chi-square tail matches numeric integration", "[evalstats]") {
  CHECK(std::abs(stats::chi_square_sf(3.841) - 0.05) <= 0.0005);
  CHECK(std::abs(stats::chi_square_sf(3.841458820694124) - 0.05) <= 1e-9);
  CHECK(stats::chi_square_sf(0.0) == 1.0);
  CHECK(stats::chi_square_sf(-1.0) == 1.0);
  for (double x : {0.01, 0.5, 1.0, 2.7, 3.841, 6.63, 10.83, 23.402, 40.0})
    CHECK(std::abs(stats::chi_square_sf(x) - chi_square_tail_by_integration(x)) <= 1e-9);
  CHECK(stats::chi_square_sf(4.0, 2.0) == Catch::Approx(std::exp(-2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(stats::regularized_gamma_q(0.0, 1.0), std::domain_error);
}

TEST_CASE("chi-square tail is strictly decreasing", "[evalstats][property]") {
  double previous = 1.0;
  for (int i = 1; i <= 100; ++i) {
    const double p = stats::chi_square_sf(i * 0.3);
    CHECK(p < previous);
    previous = p;
  }
}

TEST_CASE("win rate excludes equal votes", "[evalstats]") {
  const WinRateResult r = win_rate(votes_with(54, 53, 9));
  CHECK(r.wins_a == 54);
  CHECK(r.wins_b == 53);
  CHECK(r.equals == 9);
  CHECK(r.rate_a.str() == "50.47");
  CHECK(r.rate_b.str() == "49.53");
  CHECK(std::abs(r.rate_a.value() - 100.0 * 54 / 107) <= 0.005);

  const WinRateResult c = win_rate_from_counts(54, 53, 9);
  CHECK(c.rate_a == r.rate_a);
  CHECK(c.rate_b == r.rate_b);
  CHECK(to_json(c)["decisive"] == 107);

  CHECK_THROWS_AS(win_rate(votes_with(0, 0, 3)), NoDecisiveVotes);
  CHECK_THROWS_AS(win_rate_from_counts(0, 0, 3), NoDecisiveVotes);
  CHECK(tally_votes(votes_with(0, 0, 3)).equals == 3);
}

TEST_CASE("win rates are complementary", "[evalstats][property]") {
  for (std::size_t a = 0; a < 30; ++a)
    for (std::size_t b = 0; b < 30; ++b) {
      if (a + b == 0) continue;
      const WinRateResult r = win_rate_from_counts(a, b, a % 4);
      CHECK(r.rate_a.hundredths + r.rate_b.hundredths >= 9999);
      CHECK(r.rate_a.hundredths + r.rate_b.hundredths <= 10001);
    }
}

TEST_CASE("votes de-blind through the displayed position", "[evalstats]") {
  PairwiseVote v;
  v.pair_id = "p";
  v.evaluator = "e";
  v.shown_as_a = ModelSide::second;
  v.choice = Choice::A;
  CHECK(v.winner() == ModelSide::second);
  v.choice = Choice::B;
  CHECK(v.winner() == ModelSide::first);
  v.choice = Choice::equal;
  CHECK_FALSE(v.winner());

  v.choice = Choice::B;
  v.rationale = "more specific";
  const PairwiseVote back = vote_from_json(json::parse(to_json(v).dump()));
  CHECK(back == v);

  v.kind = EvaluatorKind::llm;
  v.choice = Choice::equal;
  CHECK_THROWS_AS(v.validate(), InvalidChoice);
  CHECK_THROWS_AS(vote_from_json(json{{"pair_id", "p"}, {"evaluator", "e"}, {"choice", "C"}}), InvalidChoice);
}

TEST_CASE("pairwise verdicts parse from several shapes", "[evalstats]") {
  CHECK(parse_pairwise_verdict(R"({"choice": "A"})") == Choice::A);
  CHECK(parse_pairwise_verdict(R"({"winner": "Summary B"})") == Choice::B);
  CHECK(parse_pairwise_verdict(" B. ") == Choice::B);
  CHECK(parse_pairwise_verdict("After reading both, my answer: Summary A") == Choice::A);
  CHECK(parse_pairwise_verdict("I prefer B because it is precise.") == Choice::B);
  CHECK_FALSE(parse_pairwise_verdict("Both summaries are equally good."));
  CHECK_FALSE(parse_pairwise_verdict(R"({"choice": "C"})"));
}

namespace {

std::vector<SummaryPair> pairs_fixture(std::size_t n) {
  std::vector<SummaryPair> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({"pair-" + std::to_string(i), "echo " + std::to_string(i), "Short summary.",
                   "A considerably longer and more detailed summary " + std::to_string(i) + "."});
  return out;
}

PairwiseEvalResult judge_with(PairwisePolicy policy, const std::vector<SummaryPair>& pairs, std::size_t workers = 1,
                              double unparseable = 0.0) {
  MockOptions o;
  o.pairwise = policy;
  o.unparseable_verdict_rate = unparseable;
  MockBackend backend(o);
  const PromptLibrary prompts = test_prompts();
  PairwiseEvalOptions opts;
  opts.seed = 17;
  opts.workers = workers;
  return pairwise_llm_eval(pairs, backend, prompts, {"pairwise-judge", "mock", ModelRole::judge, {}}, opts);
}

}  // namespace

TEST_CASE("a position-biased judge lands near an even split", "[evalstats][pairwise]") {
  const PairwiseEvalResult r = judge_with(PairwisePolicy::always_a, pairs_fixture(400));
  REQUIRE(r.votes.size() == 400);
  for (const auto& v : r.votes) CHECK(v.choice == Choice::A);
  const WinRateResult w = win_rate(r.votes);
  CHECK(std::abs(w.rate_a.value() - 50.0) <= 5.0);
}

TEST_CASE("a length-preferring judge is de-blinded to the longer model", "[evalstats][pairwise]") {
  const PairwiseEvalResult r = judge_with(PairwisePolicy::longer, pairs_fixture(60));
  const WinRateResult w = win_rate(r.votes);
  CHECK(w.wins_b == 60);
  CHECK(w.rate_b.str() == "100.00");
  std::size_t second_shown_first = 0;
  for (const auto& [id, side] : r.assignments) second_shown_first += side == ModelSide::second ? 1 : 0;
  CHECK(second_shown_first > 0);
  CHECK(second_shown_first < 60);
}

TEST_CASE("pairwise judging is deterministic and schedule independent", "[evalstats][pairwise][property]") {
  const auto pairs = pairs_fixture(80);
  const PairwiseEvalResult a = judge_with(PairwisePolicy::hashed, pairs, 1);
  const PairwiseEvalResult b = judge_with(PairwisePolicy::hashed, pairs, 6);
  CHECK(a.votes == b.votes);
  CHECK(a.assignments == b.assignments);
}

TEST_CASE("unparseable pairwise verdicts are skipped", "[evalstats][pairwise]") {
  const PairwiseEvalResult r = judge_with(PairwisePolicy::always_a, pairs_fixture(10), 1, 1.0);
  CHECK(r.votes.empty());
  CHECK(r.skipped.size() == 10);
  CHECK(r.assignments.size() == 10);
  std::vector<SummaryPair> bad = pairs_fixture(1);
  bad[0].summary_2.clear();
  CHECK_THROWS_AS(judge_with(PairwisePolicy::always_a, bad), PreconditionViolation);
}

TEST_CASE("blinding is seeded and roughly balanced", "[evalstats][pairwise][property]") {
  std::size_t second = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string id = "p" + std::to_string(i);
    CHECK(blinding_for(3, id) == blinding_for(3, id));
    second += blinding_for(3, id) == ModelSide::second ? 1 : 0;
  }
  CHECK(second > 430);
  CHECK(second < 570);
}

TEST_CASE("phrase overlap counts records once per phrase", "[evalstats]") {
  const Dataset a({make_record(sha_of(1), Language::sh, true, Provenance::test, "x",
                               std::string("This script downloads a file. It downloads again.")),
                   make_record(sha_of(2), Language::sh, false, Provenance::test, "x", std::string("Benign helper."))});
  const Dataset b({make_record(sha_of(3), Language::sh, true, Provenance::pseudo, "x", std::string("downloads"))});
  const PhraseTable t = phrase_overlap({"downloads", "Benign", "absent"}, {{"test", &a}, {"pseudo", &b}});
  CHECK(t.counts == std::vector<std::vector<std::size_t>>{{1, 1}, {1, 0}, {0, 0}});
  const json j = to_json(t);
  CHECK(j["rows"][0]["counts"]["test"] == 1);
  CHECK(render_text(t).find("downloads") != std::string::npos);
}
