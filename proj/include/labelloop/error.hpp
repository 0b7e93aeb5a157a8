// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace labelloop {

/// Base class for every domain error raised by the library.
///
/// `kind()` is the stable error name (e.g. "DuplicateSha") that the CLI
/// prints verbatim; `what()` carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& detail)
      : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// corpus
class MalformedLine : public Error {
 public:
  MalformedLine(std::size_t line, const std::string& detail)
      : Error("MalformedLine", "line " + std::to_string(line) + ": " + detail), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DuplicateSha : public Error {
 public:
  explicit DuplicateSha(const std::string& sha) : Error("DuplicateSha", sha) {}
};

class InvalidField : public Error {
 public:
  explicit InvalidField(const std::string& detail) : Error("InvalidField", detail) {}
};

class MissingContent : public Error {
 public:
  explicit MissingContent(const std::string& sha) : Error("MissingContent", sha) {}
};

// backends
class UnknownTemplate : public Error {
 public:
  explicit UnknownTemplate(const std::string& name) : Error("UnknownTemplate", name) {}
};

class UnboundPlaceholder : public Error {
 public:
  explicit UnboundPlaceholder(const std::string& name)
      : Error("UnboundPlaceholder", name), name_(name) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class TransportError : public Error {
 public:
  TransportError(int status, const std::string& detail)
      : Error("Transport", "status " + std::to_string(status) + ": " + detail), status_(status) {}
  /// HTTP status, or 0 when the connection itself failed.
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class ProtocolMissingLogprobs : public Error {
 public:
  explicit ProtocolMissingLogprobs(const std::string& model)
      : Error("ProtocolMissingLogprobs", model) {}
};

class InvalidRequest : public Error {
 public:
  explicit InvalidRequest(const std::string& detail) : Error("InvalidRequest", detail) {}
};

// filterpipe
class MissingConfidence : public Error {
 public:
  explicit MissingConfidence(const std::string& sha) : Error("MissingConfidence", sha) {}
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& detail) : Error("InvalidConfig", detail) {}
};

// selfloop
class FinetuneFailed : public Error {
 public:
  FinetuneFailed(int iteration, const std::string& detail)
      : Error("FinetuneFailed", "iteration " + std::to_string(iteration) + ": " + detail) {}
};

class Timeout : public Error {
 public:
  explicit Timeout(const std::string& detail) : Error("Timeout", detail) {}
};

class CorruptCheckpoint : public Error {
 public:
  explicit CorruptCheckpoint(const std::string& detail) : Error("CorruptCheckpoint", detail) {}
};

class VersionMismatch : public Error {
 public:
  explicit VersionMismatch(const std::string& detail) : Error("VersionMismatch", detail) {}
};

class PreconditionViolation : public Error {
 public:
  explicit PreconditionViolation(const std::string& detail)
      : Error("PreconditionViolation", detail) {}
};

class WorkspaceLocked : public Error {
 public:
  explicit WorkspaceLocked(const std::string& path) : Error("WorkspaceLocked", path) {}
};

// evalstats
class MissingTruth : public Error {
 public:
  explicit MissingTruth(const std::string& sha) : Error("MissingTruth", sha) {}
};

class EmptyIntersection : public Error {
 public:
  EmptyIntersection() : Error("EmptyIntersection", "no predictions to score") {}
};

class CoverageMismatch : public Error {
 public:
  explicit CoverageMismatch(const std::string& detail) : Error("CoverageMismatch", detail) {}
};

class NoDecisiveVotes : public Error {
 public:
  NoDecisiveVotes() : Error("NoDecisiveVotes", "every vote is 'equal'") {}
};

class InvalidChoice : public Error {
 public:
  explicit InvalidChoice(const std::string& detail) : Error("InvalidChoice", detail) {}
};

// service
class UnknownSession : public Error {
 public:
  explicit UnknownSession(const std::string& id) : Error("UnknownSession", id) {}
};

class UnknownPair : public Error {
 public:
  explicit UnknownPair(const std::string& id) : Error("UnknownPair", id) {}
};

class DuplicateVote : public Error {
 public:
  explicit DuplicateVote(const std::string& id) : Error("DuplicateVote", id) {}
};

}  // namespace labelloop
