// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>

namespace labelloop::util {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::system_error(errno, std::generic_category(), "open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

namespace detail {

inline void write_all(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::system_error(errno, std::generic_category(), "write " + path.string());
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

}  // namespace detail

/// Write-temp-then-rename. Readers see either the old or the new content.
inline void atomic_write(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "open " + tmp.string());
  try {
    detail::write_all(fd, data, tmp);
    if (::fsync(fd) != 0)
      throw std::system_error(errno, std::generic_category(), "fsync " + tmp.string());
  } catch (...) {
    ::close(fd);
    ::unlink(tmp.c_str());
    throw;
  }
  ::close(fd);
  fs::rename(tmp, path);
}

/// Append-only line log. Each append is one write(2) on an O_APPEND
/// descriptor followed by fsync when `durable` is set.
class AppendLog {
 public:
  explicit AppendLog(fs::path path, bool durable = true) : path_(std::move(path)), durable_(durable) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw std::system_error(errno, std::generic_category(), "open " + path_.string());
  }
  AppendLog(const AppendLog&) = delete;
  AppendLog& operator=(const AppendLog&) = delete;
  ~AppendLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  void append_line(std::string line) {
    line.push_back('\n');
    std::lock_guard lock(mu_);
    detail::write_all(fd_, line, path_);
    if (durable_ && ::fsync(fd_) != 0)
      throw std::system_error(errno, std::generic_category(), "fsync " + path_.string());
  }

  const fs::path& path() const noexcept { return path_; }

 private:
  fs::path path_;
  bool durable_;
  int fd_ = -1;
  std::mutex mu_;
};

}  // namespace labelloop::util
