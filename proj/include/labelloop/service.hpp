// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <httplib.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "labelloop/corpus.hpp"
#include "labelloop/evalstats.hpp"
#include "labelloop/util/fsio.hpp"
#include "labelloop/util/hash.hpp"

namespace labelloop {

/// Reads a pair pool: JSONL of {pair_id, script, summary_1, summary_2}.
inline std::vector<SummaryPair> parse_pairs_jsonl(std::string_view text) {
  std::vector<SummaryPair> pairs;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw MalformedLine(line_no, "not a JSON object");
    SummaryPair p;
    try {
      p = pair_from_json(j);
    } catch (const json::exception& e) {
      throw InvalidField("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert(p.pair_id).second) throw InvalidField("line " + std::to_string(line_no) + ": duplicate pair_id " + p.pair_id);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::vector<SummaryPair> load_pairs(const std::filesystem::path& path) {
  return parse_pairs_jsonl(util::read_file(path));
}

inline std::vector<PairwiseVote> parse_votes_jsonl(std::string_view text) {
  std::vector<PairwiseVote> votes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw MalformedLine(line_no, "not a JSON object");
    try {
      votes.push_back(vote_from_json(j));
    } catch (const json::exception& e) {
      throw InvalidField("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return votes;
}

struct EvalServiceOptions {
  std::uint64_t seed = 0;
  std::size_t pairs_per_evaluator = 20;
  std::filesystem::path vote_log;
  bool durable = true;
};

/// Public view of a session. Carries no model identity.
struct SessionInfo {
  std::string session_id;
  std::string evaluator;
  std::size_t assigned = 0;
  std::size_t completed = 0;
};

/// A pair as the evaluator sees it: summaries in blinded A/B positions.
struct BlindedPair {
  std::string pair_id;
  std::string script;
  std::string summary_a;
  std::string summary_b;
  /// 1-based position of this pair in the evaluator's queue.
  std::size_t position = 0;
};

struct VoteAck {
  std::string pair_id;
  std::size_t completed = 0;
  std::size_t assigned = 0;
};

struct EvaluatorRow {
  std::string evaluator;
  std::size_t votes = 0;
  WinRateResult tally;
};

struct ServiceResults {
  std::size_t total_votes = 0;
  WinRateResult overall;
  bool no_decisive_votes = true;
  std::vector<EvaluatorRow> evaluators;
};

inline ordered_json side_tally_json(const WinRateResult& r, bool decisive) {
  ordered_json j = {{"wins_first", r.wins_a}, {"wins_second", r.wins_b}, {"equals", r.equals}};
  j["rate_first"] = decisive ? ordered_json(r.rate_a.str()) : ordered_json(nullptr);
  j["rate_second"] = decisive ? ordered_json(r.rate_b.str()) : ordered_json(nullptr);
  return j;
}

inline ordered_json to_json(const ServiceResults& r) {
  ordered_json j = {{"total_votes", r.total_votes}};
  j["overall"] = side_tally_json(r.overall, !r.no_decisive_votes);
  j["no_decisive_votes"] = r.no_decisive_votes;
  j["evaluators"] = ordered_json::array();
  for (const auto& row : r.evaluators) {
    ordered_json e = {{"evaluator", row.evaluator}, {"votes", row.votes}};
    e.update(side_tally_json(row.tally, row.tally.decisive() > 0));
    j["evaluators"].push_back(std::move(e));
  }
  return j;
}

/// Blind pairwise human evaluation: per-evaluator queues, seeded A/B
/// blinding and a durable append-only vote log.
///
/// Sessions are a pure function of (seed, evaluator), so they survive
/// restarts; progress is rebuilt by replaying the vote log. Mutations go
/// through one writer lock; readers copy an immutable snapshot pointer and
/// compute without holding any lock.
class EvalService {
 public:
  EvalService(std::vector<SummaryPair> pairs, EvalServiceOptions options) : options_(std::move(options)) {
    for (auto& p : pairs) {
      if (!pool_index_.emplace(p.pair_id, pool_.size()).second) throw InvalidField("duplicate pair_id " + p.pair_id);
      pool_.push_back(std::move(p));
    }
    if (options_.pairs_per_evaluator == 0) throw InvalidConfig("pairs_per_evaluator must be positive");
    auto state = std::make_shared<State>();
    if (!options_.vote_log.empty() && std::filesystem::exists(options_.vote_log)) {
      for (PairwiseVote& v : parse_votes_jsonl(util::read_file(options_.vote_log))) {
        Session& s = ensure_session(*state, v.evaluator);
        if (!s.assigned_set.count(v.pair_id)) throw CorruptCheckpoint("vote log references unassigned pair " + v.pair_id);
        if (!s.completed.insert(v.pair_id).second) throw CorruptCheckpoint("vote log repeats pair " + v.pair_id);
        state->votes.push_back(std::move(v));
      }
    }
    if (!options_.vote_log.empty()) log_ = std::make_unique<util::AppendLog>(options_.vote_log, options_.durable);
    publish(std::move(state));
  }

  static std::string session_id_for(std::uint64_t seed, std::string_view evaluator) {
    return "s-" + util::to_hex(util::Fnv1a().add(seed).add(std::string_view("session")).add(evaluator).digest());
  }

  /// Creates the evaluator's session on first use; later calls return it.
  SessionInfo open_session(const std::string& evaluator) {
    if (evaluator.empty()) throw InvalidRequest("evaluator name is required");
    {
      auto snap = snapshot();
      if (auto it = snap->by_evaluator.find(evaluator); it != snap->by_evaluator.end())
        return info(snap->sessions.at(it->second));
    }
    std::lock_guard writer(write_mu_);
    auto next = std::make_shared<State>(*snapshot());
    const Session& s = ensure_session(*next, evaluator);
    SessionInfo out = info(s);
    publish(std::move(next));
    return out;
  }

  /// First uncompleted pair in the session's queue, or nullopt when the
  /// queue is exhausted. Repeated calls without a vote return the same pair
  /// with the same blinding.
  std::optional<BlindedPair> next_pair(const std::string& session_id) const {
    auto snap = snapshot();
    const Session& s = session(*snap, session_id);
    for (std::size_t i = 0; i < s.assigned.size(); ++i) {
      const std::string& id = s.assigned[i];
      if (s.completed.count(id)) continue;
      const SummaryPair& p = pool_[pool_index_.at(id)];
      const ModelSide a = blinding(s.evaluator, id);
      return BlindedPair{id, p.script, a == ModelSide::first ? p.summary_1 : p.summary_2,
                         a == ModelSide::first ? p.summary_2 : p.summary_1, i + 1};
    }
    return std::nullopt;
  }

  SessionInfo session_info(const std::string& session_id) const {
    auto snap = snapshot();
    return info(session(*snap, session_id));
  }

  /// De-blinds and appends the vote. The log append and the completion
  /// mark happen under the writer lock, so a vote is visible iff logged.
  VoteAck submit_vote(const std::string& session_id, const std::string& pair_id, const std::string& choice,
                      std::optional<std::string> rationale) {
    std::lock_guard writer(write_mu_);
    auto current = snapshot();
    const Session& s = session(*current, session_id);
    if (!s.assigned_set.count(pair_id)) throw UnknownPair(pair_id);
    auto parsed = parse_choice(choice);
    if (!parsed) throw InvalidChoice("choice must be A, B or equal, got '" + choice + "'");
    if (s.completed.count(pair_id)) throw DuplicateVote(pair_id);
    if (rationale && rationale->empty()) rationale.reset();

    PairwiseVote vote{pair_id, s.evaluator, EvaluatorKind::human, *parsed, std::move(rationale),
                      blinding(s.evaluator, pair_id)};
    vote.validate();
    if (log_) log_->append_line(to_json(vote).dump());

    auto next = std::make_shared<State>(*current);
    Session& ns = next->sessions.at(session_id);
    ns.completed.insert(pair_id);
    next->votes.push_back(std::move(vote));
    VoteAck ack{pair_id, ns.completed.size(), ns.assigned.size()};
    publish(std::move(next));
    return ack;
  }

  ServiceResults results() const {
    auto snap = snapshot();
    ServiceResults r;
    r.total_votes = snap->votes.size();
    r.overall = tally_votes(snap->votes);
    r.no_decisive_votes = r.overall.decisive() == 0;
    std::map<std::string, std::vector<PairwiseVote>> per;
    for (const auto& v : snap->votes) per[v.evaluator].push_back(v);
    for (auto& [name, votes] : per) r.evaluators.push_back({name, votes.size(), tally_votes(votes)});
    return r;
  }

  std::vector<PairwiseVote> votes() const { return snapshot()->votes; }
  std::size_t pool_size() const noexcept { return pool_.size(); }

 private:
  struct Session {
    std::string session_id;
    std::string evaluator;
    std::vector<std::string> assigned;
    std::set<std::string> assigned_set;
    std::set<std::string> completed;
  };
  struct State {
    std::map<std::string, Session> sessions;
    std::map<std::string, std::string> by_evaluator;
    std::vector<PairwiseVote> votes;
  };

  ModelSide blinding(const std::string& evaluator, const std::string& pair_id) const {
    return blinding_for(options_.seed, pair_id, evaluator);
  }

  Session& ensure_session(State& state, const std::string& evaluator) const {
    if (auto it = state.by_evaluator.find(evaluator); it != state.by_evaluator.end())
      return state.sessions.at(it->second);
    Session s;
    s.evaluator = evaluator;
    s.session_id = session_id_for(options_.seed, evaluator);
    std::vector<std::size_t> order(pool_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(util::Fnv1a().add(options_.seed).add(std::string_view("assign")).add(evaluator).digest());
    // Explicit Fisher-Yates: std::shuffle's sequence is implementation-defined.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    const std::size_t n = std::min(options_.pairs_per_evaluator, order.size());
    for (std::size_t i = 0; i < n; ++i) {
      s.assigned.push_back(pool_[order[i]].pair_id);
      s.assigned_set.insert(pool_[order[i]].pair_id);
    }
    state.by_evaluator.emplace(evaluator, s.session_id);
    return state.sessions.emplace(s.session_id, std::move(s)).first->second;
  }

  static const Session& session(const State& state, const std::string& id) {
    auto it = state.sessions.find(id);
    if (it == state.sessions.end()) throw UnknownSession(id);
    return it->second;
  }

  static SessionInfo info(const Session& s) { return {s.session_id, s.evaluator, s.assigned.size(), s.completed.size()}; }

  std::shared_ptr<const State> snapshot() const {
    std::lock_guard lock(snap_mu_);
    return state_;
  }
  void publish(std::shared_ptr<const State> next) {
    std::lock_guard lock(snap_mu_);
    state_ = std::move(next);
  }

  EvalServiceOptions options_;
  std::vector<SummaryPair> pool_;
  std::unordered_map<std::string, std::size_t> pool_index_;
  std::unique_ptr<util::AppendLog> log_;
  std::mutex write_mu_;
  mutable std::mutex snap_mu_;
  std::shared_ptr<const State> state_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path static_dir;
  std::filesystem::path filter_report;
};

inline int http_status_for(const Error& e) {
  const std::string& k = e.kind();
  if (k == "UnknownSession" || k == "UnknownPair") return 404;
  if (k == "DuplicateVote") return 409;
  return 400;
}

/// HTTP front end for EvalService.
///
///   GET  /api/session?evaluator=<name>  -> {session_id, evaluator, assigned, completed}
///   GET  /api/pairs/next?session=<id>   -> {exhausted, pair_id?, script?, summary_a?, summary_b?, position?, ...}
///   POST /api/votes {session, pair_id, choice, rationale?} -> {ok, pair_id, completed, assigned}
///   GET  /api/results                   -> aggregate and per-evaluator tallies
///   GET  /api/reports/filter            -> the configured filter report
///   GET  /*                             -> static UI assets
/// Errors are {"error": <kind>, "detail": <text>}.
class EvalServer {
 public:
  EvalServer(EvalService& service, ServerOptions options) : service_(service), options_(std::move(options)) {
    routes();
  }

  /// Binds and serves until stop(); returns false if binding failed.
  bool listen() { return server_.listen(options_.host, options_.port); }

  /// Binds to an ephemeral port and returns it, without serving.
  int bind_any() {
    bound_ = server_.bind_to_any_port(options_.host);
    return bound_;
  }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  httplib::Server& raw() noexcept { return server_; }

 private:
  static void reply(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename Fn>
  static void guarded(httplib::Response& res, Fn&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      reply(res, http_status_for(e), {{"error", e.kind()}, {"detail", e.what()}});
    } catch (const json::exception& e) {
      reply(res, 400, {{"error", "InvalidRequest"}, {"detail", e.what()}});
    } catch (const std::exception& e) {
      reply(res, 500, {{"error", "Internal"}, {"detail", e.what()}});
    }
  }

  static ordered_json session_json(const SessionInfo& s) {
    return {{"session_id", s.session_id}, {"evaluator", s.evaluator}, {"assigned", s.assigned},
            {"completed", s.completed}};
  }

  void routes() {
    server_.Get("/api/session", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.has_param("evaluator")) throw InvalidRequest("missing evaluator parameter");
        reply(res, 200, session_json(service_.open_session(req.get_param_value("evaluator"))));
      });
    });
    server_.Get("/api/pairs/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.has_param("session")) throw InvalidRequest("missing session parameter");
        const std::string id = req.get_param_value("session");
        const SessionInfo info = service_.session_info(id);
        ordered_json body;
        if (auto pair = service_.next_pair(id)) {
          body = {{"exhausted", false},         {"pair_id", pair->pair_id},     {"script", pair->script},
                  {"summary_a", pair->summary_a}, {"summary_b", pair->summary_b}, {"position", pair->position}};
        } else {
          body = {{"exhausted", true}};
        }
        body["assigned"] = info.assigned;
        body["completed"] = info.completed;
        reply(res, 200, body);
      });
    });
    server_.Post("/api/votes", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object()) throw InvalidRequest("body must be a JSON object");
        std::optional<std::string> rationale;
        if (auto it = body.find("rationale"); it != body.end() && it->is_string()) rationale = it->get<std::string>();
        if (!body.contains("choice") || !body["choice"].is_string()) throw InvalidChoice("choice must be a string");
        const VoteAck ack = service_.submit_vote(body.at("session").get<std::string>(),
                                                 body.at("pair_id").get<std::string>(),
                                                 body["choice"].get<std::string>(), std::move(rationale));
        reply(res, 200, {{"ok", true}, {"pair_id", ack.pair_id}, {"completed", ack.completed}, {"assigned", ack.assigned}});
      });
    });
    server_.Get("/api/results", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { reply(res, 200, to_json(service_.results())); });
    });
    server_.Get("/api/reports/filter", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        if (options_.filter_report.empty() || !std::filesystem::exists(options_.filter_report)) {
          reply(res, 404, {{"error", "NotFound"}, {"detail", "no filter report configured"}});
          return;
        }
        json report = json::parse(util::read_file(options_.filter_report), nullptr, false);
        if (report.is_discarded()) throw CorruptCheckpoint("filter report is not JSON");
        res.status = 200;
        res.set_content(report.dump(), "application/json");
      });
    });
    if (!options_.static_dir.empty() && std::filesystem::is_directory(options_.static_dir))
      server_.set_mount_point("/", options_.static_dir.string());
  }

  EvalService& service_;
  ServerOptions options_;
  httplib::Server server_;
  int bound_ = -1;
};

}  // namespace labelloop
