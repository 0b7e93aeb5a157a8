// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <string_view>

#include "labelloop/error.hpp"
#include "labelloop/util/fsio.hpp"

namespace labelloop {

/// Substitutes `{{name}}` placeholders (inner whitespace allowed). Bound
/// values are inserted verbatim and never re-scanned.
inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tpl.size());
  std::size_t pos = 0;
  while (pos < tpl.size()) {
    const std::size_t open = tpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tpl.substr(pos));
      break;
    }
    const std::size_t close = tpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      out.append(tpl.substr(pos));
      break;
    }
    out.append(tpl.substr(pos, open - pos));
    std::string_view name = tpl.substr(open + 2, close - open - 2);
    while (!name.empty() && name.front() == ' ') name.remove_prefix(1);
    while (!name.empty() && name.back() == ' ') name.remove_suffix(1);
    auto it = vars.find(std::string(name));
    if (it == vars.end()) throw UnboundPlaceholder(std::string(name));
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

/// Prompt templates stored as `<dir>/<name>.txt`. Files are read once.
class PromptLibrary {
 public:
  PromptLibrary() = default;
  explicit PromptLibrary(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// Registers an in-memory template, shadowing any file of the same name.
  void add(std::string name, std::string body) {
    std::lock_guard lock(mu_);
    cache_[std::move(name)] = std::move(body);
  }

  std::string load(const std::string& name) const {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    if (dir_.empty()) throw UnknownTemplate(name);
    const auto path = dir_ / (name + ".txt");
    std::error_code ec;
    if (name.empty() || name.find('/') != std::string::npos || !std::filesystem::is_regular_file(path, ec))
      throw UnknownTemplate(name);
    return cache_[name] = util::read_file(path);
  }

  std::string render(const std::string& name, const std::map<std::string, std::string>& vars) const {
    return render_template(load(name), vars);
  }

  const std::filesystem::path& directory() const noexcept { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::string> cache_;
};

}  // namespace labelloop
