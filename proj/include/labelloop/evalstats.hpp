// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "labelloop/backends.hpp"
#include "labelloop/chisq.hpp"
#include "labelloop/corpus.hpp"
#include "labelloop/util/hash.hpp"
#include "labelloop/util/percent.hpp"
#include "labelloop/util/pool.hpp"

namespace labelloop {

// ---------------------------------------------------------------------------
// Accuracy

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  double accuracy() const {
    if (total() == 0) throw EmptyIntersection();
    return static_cast<double>(tp + tn) / static_cast<double>(total());
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

enum class Facet : std::uint8_t { malicious, language };

inline std::optional<Facet> parse_facet(std::string_view s) noexcept {
  if (s == "malicious") return Facet::malicious;
  if (s == "language") return Facet::language;
  return std::nullopt;
}

struct LanguageAccuracy {
  Language language = Language::sh;
  std::size_t correct = 0;
  std::size_t total = 0;
  /// Absent when the language has no scored records.
  std::optional<util::Percent> accuracy;
};

struct AccuracyReport {
  Facet facet = Facet::malicious;
  std::size_t correct = 0;
  std::size_t total = 0;
  /// Pooled over all records.
  util::Percent micro;
  /// Unweighted mean of the per-language accuracies present.
  util::Percent macro;
  std::array<LanguageAccuracy, 5> rows{};
  /// Malicious facet only; positive = malicious.
  ConfusionCounts confusion;
};

/// Scores predictions against truth. Rows are grouped by the true language.
inline AccuracyReport accuracy(const Dataset& predictions, const Dataset& truth, Facet facet) {
  if (predictions.empty()) throw EmptyIntersection();
  AccuracyReport rep;
  rep.facet = facet;
  for (std::size_t i = 0; i < kLanguages.size(); ++i) rep.rows[i].language = kLanguages[i];

  for (const ScriptRecord& p : predictions) {
    const ScriptRecord* t = truth.find(p.sha256);
    if (t == nullptr) throw MissingTruth(p.sha256);
    const bool ok = facet == Facet::malicious ? p.malicious == t->malicious : p.language == t->language;
    auto& row = rep.rows[static_cast<std::size_t>(t->language)];
    ++row.total;
    ++rep.total;
    if (ok) {
      ++row.correct;
      ++rep.correct;
    }
    if (facet == Facet::malicious) {
      if (p.malicious && t->malicious) ++rep.confusion.tp;
      else if (!p.malicious && !t->malicious) ++rep.confusion.tn;
      else if (p.malicious) ++rep.confusion.fp;
      else ++rep.confusion.fn;
    }
  }

  rep.micro = util::percent_of(rep.correct, rep.total);
  double sum = 0.0;
  int present = 0;
  for (auto& row : rep.rows) {
    if (row.total == 0) continue;
    row.accuracy = util::percent_of(row.correct, row.total);
    sum += 100.0 * static_cast<double>(row.correct) / static_cast<double>(row.total);
    ++present;
  }
  rep.macro = util::round_percent(sum / present);
  return rep;
}

inline ordered_json to_json(const AccuracyReport& r) {
  ordered_json rows = ordered_json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"language", to_string(row.language)},
                    {"correct", row.correct},
                    {"total", row.total},
                    {"accuracy", row.accuracy ? json(row.accuracy->str()) : json(nullptr)}});
  ordered_json j = {{"facet", r.facet == Facet::malicious ? "malicious" : "language"},
                    {"correct", r.correct},
                    {"total", r.total},
                    {"micro_average", r.micro.str()},
                    {"macro_average", r.macro.str()},
                    {"languages", rows}};
  if (r.facet == Facet::malicious)
    j["confusion"] = {{"tp", r.confusion.tp}, {"tn", r.confusion.tn}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}};
  return j;
}

/// One row in the layout of a per-language accuracy table.
inline std::string render_text(const AccuracyReport& r, const std::string& model = "model") {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %7s %7s %7s %7s %7s %9s %9s\n", "Model", "sh", "bat", "js", "ps", "py",
                "Macro", "Micro");
  os << buf;
  std::string cells[5];
  for (std::size_t i = 0; i < 5; ++i) cells[i] = r.rows[i].accuracy ? r.rows[i].accuracy->str() : "-";
  std::snprintf(buf, sizeof buf, "%-12s %7s %7s %7s %7s %7s %9s %9s\n", model.c_str(), cells[0].c_str(),
                cells[1].c_str(), cells[2].c_str(), cells[3].c_str(), cells[4].c_str(), r.macro.str().c_str(),
                r.micro.str().c_str());
  os << buf;
  return os.str();
}

// ---------------------------------------------------------------------------
// McNemar

struct McNemarResult {
  /// Records labelled malicious by model A and benign by model B.
  std::size_t b = 0;
  /// Records labelled benign by model A and malicious by model B.
  std::size_t c = 0;
  double chi_square = 0.0;
  double p_value = 1.0;
  /// Set when b + c == 0; chi_square is then reported as 0 and p as 1.
  bool no_discordant_pairs = false;
  /// Correctness split of the same discordant records, when truth is known.
  std::size_t only_a_correct = 0;
  std::size_t only_b_correct = 0;
};

/// chi^2 = (b - c)^2 / (b + c), no continuity correction, 1 d.o.f.
inline McNemarResult mcnemar_from_counts(std::size_t b, std::size_t c) {
  McNemarResult r;
  r.b = b;
  r.c = c;
  if (b + c == 0) {
    r.no_discordant_pairs = true;
    return r;
  }
  const double diff = static_cast<double>(b) - static_cast<double>(c);
  r.chi_square = diff * diff / static_cast<double>(b + c);
  r.p_value = stats::chi_square_sf(r.chi_square, 1.0);
  return r;
}

inline McNemarResult mcnemar(const Dataset& preds_a, const Dataset& preds_b, const Dataset& truth) {
  if (preds_a.size() != truth.size() || preds_b.size() != truth.size())
    throw CoverageMismatch("prediction and truth datasets must cover the same sha256 set");
  std::size_t b = 0, c = 0, only_a = 0, only_b = 0;
  for (const ScriptRecord& t : truth) {
    const ScriptRecord* a = preds_a.find(t.sha256);
    const ScriptRecord* m = preds_b.find(t.sha256);
    if (a == nullptr || m == nullptr) throw CoverageMismatch("missing prediction for " + t.sha256);
    if (a->malicious == m->malicious) continue;
    if (a->malicious) ++b;
    else ++c;
    if (a->malicious == t.malicious) ++only_a;
    else ++only_b;
  }
  McNemarResult r = mcnemar_from_counts(b, c);
  r.only_a_correct = only_a;
  r.only_b_correct = only_b;
  return r;
}

inline std::string format_p_value(double p) {
  char buf[64];
  if (p < 1e-5) {
    std::snprintf(buf, sizeof buf, "%.3e (p<1e-5)", p);
  } else {
    std::snprintf(buf, sizeof buf, "%.6f", p);
  }
  return buf;
}

inline ordered_json to_json(const McNemarResult& r) {
  return {{"b", r.b},
          {"c", r.c},
          {"chi_square", r.chi_square},
          {"p_value", r.p_value},
          {"no_discordant_pairs", r.no_discordant_pairs},
          {"only_a_correct", r.only_a_correct},
          {"only_b_correct", r.only_b_correct}};
}

// ---------------------------------------------------------------------------
// Pairwise votes and win rates

enum class Choice : std::uint8_t { A, B, equal };
enum class ModelSide : std::uint8_t { first, second };
enum class EvaluatorKind : std::uint8_t { human, llm };

inline std::string_view to_string(Choice c) noexcept {
  switch (c) {
    case Choice::A: return "A";
    case Choice::B: return "B";
    case Choice::equal: return "equal";
  }
  return "?";
}
inline std::optional<Choice> parse_choice(std::string_view s) noexcept {
  if (s == "A") return Choice::A;
  if (s == "B") return Choice::B;
  if (s == "equal") return Choice::equal;
  return std::nullopt;
}
inline std::string_view to_string(ModelSide s) noexcept { return s == ModelSide::first ? "first" : "second"; }
inline ModelSide other(ModelSide s) noexcept { return s == ModelSide::first ? ModelSide::second : ModelSide::first; }
inline std::string_view to_string(EvaluatorKind k) noexcept { return k == EvaluatorKind::human ? "human" : "llm"; }

/// One blinded judgment. `shown_as_a` records which model's summary sat in
/// position A; it is kept server-side and never shown to the evaluator.
struct PairwiseVote {
  std::string pair_id;
  std::string evaluator;
  EvaluatorKind kind = EvaluatorKind::human;
  Choice choice = Choice::A;
  std::optional<std::string> rationale;
  ModelSide shown_as_a = ModelSide::first;

  void validate() const {
    if (choice == Choice::equal && kind == EvaluatorKind::llm)
      throw InvalidChoice("LLM judges are forced-choice; 'equal' is reserved for human evaluators");
  }

  /// The de-blinded preferred model, or nullopt for an equal vote.
  std::optional<ModelSide> winner() const noexcept {
    if (choice == Choice::equal) return std::nullopt;
    return choice == Choice::A ? shown_as_a : other(shown_as_a);
  }

  friend bool operator==(const PairwiseVote&, const PairwiseVote&) = default;
};

inline ordered_json to_json(const PairwiseVote& v) {
  ordered_json j = {{"pair_id", v.pair_id},
                    {"evaluator", v.evaluator},
                    {"kind", to_string(v.kind)},
                    {"choice", to_string(v.choice)},
                    {"shown_as_a", to_string(v.shown_as_a)}};
  j["rationale"] = v.rationale ? json(*v.rationale) : json(nullptr);
  const auto w = v.winner();
  j["winner"] = w ? json(std::string(to_string(*w))) : json(nullptr);
  return j;
}

inline PairwiseVote vote_from_json(const json& j) {
  PairwiseVote v;
  v.pair_id = j.at("pair_id").get<std::string>();
  v.evaluator = j.at("evaluator").get<std::string>();
  const std::string kind = j.value("kind", std::string("human"));
  if (kind != "human" && kind != "llm") throw InvalidField("vote kind must be human or llm");
  v.kind = kind == "human" ? EvaluatorKind::human : EvaluatorKind::llm;
  auto choice = parse_choice(j.at("choice").get<std::string>());
  if (!choice) throw InvalidChoice(j.at("choice").dump());
  v.choice = *choice;
  if (auto it = j.find("rationale"); it != j.end() && it->is_string()) v.rationale = it->get<std::string>();
  const std::string shown = j.value("shown_as_a", std::string("first"));
  if (shown != "first" && shown != "second") throw InvalidField("shown_as_a must be first or second");
  v.shown_as_a = shown == "first" ? ModelSide::first : ModelSide::second;
  v.validate();
  return v;
}

struct WinRateResult {
  std::size_t wins_a = 0;  // first model
  std::size_t wins_b = 0;  // second model
  std::size_t equals = 0;
  util::Percent rate_a;
  util::Percent rate_b;

  std::size_t decisive() const noexcept { return wins_a + wins_b; }
};

/// Tallies de-blinded votes without raising on an all-equal set.
inline WinRateResult tally_votes(const std::vector<PairwiseVote>& votes) {
  WinRateResult r;
  for (const auto& v : votes) {
    const auto w = v.winner();
    if (!w) ++r.equals;
    else if (*w == ModelSide::first) ++r.wins_a;
    else ++r.wins_b;
  }
  if (r.decisive() > 0) {
    r.rate_a = util::percent_of(r.wins_a, r.decisive());
    r.rate_b = util::percent_of(r.wins_b, r.decisive());
  }
  return r;
}

inline WinRateResult win_rate_from_counts(std::size_t wins_a, std::size_t wins_b, std::size_t equals) {
  if (wins_a + wins_b == 0) throw NoDecisiveVotes();
  WinRateResult r{wins_a, wins_b, equals, util::percent_of(wins_a, wins_a + wins_b),
                  util::percent_of(wins_b, wins_a + wins_b)};
  return r;
}

/// Win rate over decisive votes; equal votes are counted but excluded from
/// the denominator.
inline WinRateResult win_rate(const std::vector<PairwiseVote>& votes) {
  WinRateResult r = tally_votes(votes);
  if (r.decisive() == 0) throw NoDecisiveVotes();
  return r;
}

inline ordered_json to_json(const WinRateResult& r) {
  return {{"wins_a", r.wins_a},           {"wins_b", r.wins_b},           {"equals", r.equals},
          {"rate_a", r.rate_a.str()},     {"rate_b", r.rate_b.str()},     {"decisive", r.decisive()}};
}

// ---------------------------------------------------------------------------
// LLM pairwise judging

struct SummaryPair {
  std::string pair_id;
  std::string script;
  std::string summary_1;  // first model
  std::string summary_2;  // second model
};

inline SummaryPair pair_from_json(const json& j) {
  SummaryPair p;
  p.pair_id = j.at("pair_id").get<std::string>();
  p.script = j.value("script", std::string());
  p.summary_1 = j.at("summary_1").get<std::string>();
  p.summary_2 = j.at("summary_2").get<std::string>();
  return p;
}

/// Seeded coin deciding which model is shown in position A.
inline ModelSide blinding_for(std::uint64_t seed, std::string_view pair_id, std::string_view salt = {}) {
  const std::uint64_t h = util::splitmix64(util::Fnv1a().add(seed).add(salt).add(pair_id).digest());
  return (h & 1U) ? ModelSide::second : ModelSide::first;
}

/// Forced-choice verdict from judge output: JSON {"choice"|"winner"|
/// "preferred": "A"|"B"}, a bare "A"/"B", or a phrase such as
/// "Answer: Summary B".
inline std::optional<Choice> parse_pairwise_verdict(std::string_view text) {
  auto letter = [](std::string s) -> std::optional<Choice> {
    s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) || c == '"' || c == '.'; }),
            s.end());
    for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (s.rfind("SUMMARY", 0) == 0) s = s.substr(7);
    if (s == "A" || s == "1") return Choice::A;
    if (s == "B" || s == "2") return Choice::B;
    return std::nullopt;
  };
  const detail::ObjectSpan span = detail::scan_object(text);
  if (span.begin != std::string_view::npos && span.end != std::string_view::npos) {
    json j = json::parse(text.substr(span.begin, span.end - span.begin), nullptr, false);
    if (j.is_object()) {
      for (const char* key : {"choice", "winner", "preferred", "answer"})
        if (auto it = j.find(key); it != j.end() && (it->is_string() || it->is_number_integer()))
          return letter(it->is_string() ? it->get<std::string>() : it->dump());
      return std::nullopt;
    }
  }
  if (auto bare = letter(std::string(text))) return bare;
  static const std::regex kPhrase(R"((?:answer|choice|winner|prefer(?:red|ence)?)\W+(?:is\s+)?(?:summary\s+)?([AB])\b)",
                                  std::regex::icase);
  std::match_results<std::string_view::const_iterator> m;
  if (std::regex_search(text.begin(), text.end(), m, kPhrase)) return m[1].str() == "A" || m[1].str() == "a" ? Choice::A : Choice::B;
  return std::nullopt;
}

struct PairwiseEvalOptions {
  std::uint64_t seed = 0;
  std::string template_name = "pairwise_judge";
  std::size_t workers = 1;
  std::uint32_t max_output_tokens = 512;
};

struct PairwiseEvalResult {
  /// Ordered by pair_id.
  std::vector<PairwiseVote> votes;
  /// pair_ids whose verdict could not be parsed or whose call failed.
  std::vector<std::string> skipped;
  /// pair_id -> model shown as A, for every pair including skipped ones.
  std::map<std::string, ModelSide> assignments;
};

inline PairwiseEvalResult pairwise_llm_eval(const std::vector<SummaryPair>& pairs, Backend& backend,
                                            const PromptLibrary& prompts, const ModelHandle& judge,
                                            const PairwiseEvalOptions& options = {}) {
  std::vector<const SummaryPair*> order;
  for (const auto& p : pairs) {
    if (p.summary_1.empty() || p.summary_2.empty())
      throw PreconditionViolation("pair " + p.pair_id + " has an empty summary");
    order.push_back(&p);
  }
  std::sort(order.begin(), order.end(), [](auto* x, auto* y) { return x->pair_id < y->pair_id; });

  std::vector<std::optional<PairwiseVote>> votes(order.size());
  std::vector<ModelSide> shown(order.size());
  util::parallel_for(order.size(), options.workers, [&](std::size_t i) {
    const SummaryPair& p = *order[i];
    shown[i] = blinding_for(options.seed, p.pair_id);
    const std::string& a = shown[i] == ModelSide::first ? p.summary_1 : p.summary_2;
    const std::string& b = shown[i] == ModelSide::first ? p.summary_2 : p.summary_1;
    GenerationRequest req;
    req.prompt = prompts.render(options.template_name, {{"script", p.script}, {"summary_a", a}, {"summary_b", b}});
    req.temperature = 0.0;
    req.max_output_tokens = options.max_output_tokens;
    req.seed = static_cast<std::int64_t>(options.seed);
    req.context = {{"task", "pairwise"}, {"pair_id", p.pair_id}, {"summary_a", a}, {"summary_b", b}};
    std::optional<Choice> choice;
    try {
      choice = parse_pairwise_verdict(backend.generate(judge, req).text);
    } catch (const TransportError&) {
      choice.reset();
    }
    if (choice) votes[i] = PairwiseVote{p.pair_id, judge.identifier, EvaluatorKind::llm, *choice, std::nullopt, shown[i]};
  });

  PairwiseEvalResult out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.assignments[order[i]->pair_id] = shown[i];
    if (votes[i]) out.votes.push_back(std::move(*votes[i]));
    else out.skipped.push_back(order[i]->pair_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phrase overlap

struct PhraseTable {
  std::vector<std::string> phrases;
  std::vector<std::string> corpora;
  /// counts[phrase][corpus]: records whose summary contains the phrase.
  std::vector<std::vector<std::size_t>> counts;
};

/// Case-sensitive substring containment, counted once per record.
inline PhraseTable phrase_overlap(const std::vector<std::string>& phrases,
                                  const std::vector<std::pair<std::string, const Dataset*>>& corpora) {
  PhraseTable t;
  t.phrases = phrases;
  for (const auto& [name, _] : corpora) t.corpora.push_back(name);
  t.counts.assign(phrases.size(), std::vector<std::size_t>(corpora.size(), 0));
  for (std::size_t p = 0; p < phrases.size(); ++p) {
    for (std::size_t c = 0; c < corpora.size(); ++c) {
      std::size_t n = 0;
      for (const ScriptRecord& r : *corpora[c].second)
        if (r.summary && r.summary->find(phrases[p]) != std::string::npos) ++n;
      t.counts[p][c] = n;
    }
  }
  return t;
}

inline ordered_json to_json(const PhraseTable& t) {
  ordered_json rows = ordered_json::array();
  for (std::size_t p = 0; p < t.phrases.size(); ++p) {
    ordered_json counts = ordered_json::object();
    for (std::size_t c = 0; c < t.corpora.size(); ++c) counts[t.corpora[c]] = t.counts[p][c];
    rows.push_back({{"phrase", t.phrases[p]}, {"counts", counts}});
  }
  return {{"corpora", t.corpora}, {"rows", rows}};
}

inline std::string render_text(const PhraseTable& t) {
  std::size_t width = 6;
  for (const auto& p : t.phrases) width = std::max(width, p.size());
  std::ostringstream os;
  os << "Phrase" << std::string(width - 6, ' ');
  for (const auto& c : t.corpora) os << "  " << c;
  os << "\n";
  for (std::size_t p = 0; p < t.phrases.size(); ++p) {
    os << t.phrases[p] << std::string(width - t.phrases[p].size(), ' ');
    for (std::size_t c = 0; c < t.corpora.size(); ++c) {
      const std::string n = std::to_string(t.counts[p][c]);
      os << "  " << std::string(t.corpora[c].size() > n.size() ? t.corpora[c].size() - n.size() : 0, ' ') << n;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace labelloop
