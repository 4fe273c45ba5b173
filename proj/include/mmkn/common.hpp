#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmkn {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Log levels, selected through the NP_LOG environment variable
// (error|warn|info|debug). Default is warn.
enum class LogLevel : int { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("NP_LOG");
    if (!env) return LogLevel::Warn;
    std::string_view v(env);
    if (v == "error") return LogLevel::Error;
    if (v == "warn") return LogLevel::Warn;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

inline void log_line(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(level)], msg.c_str());
}

inline void log_error(const std::string& msg) { log_line(LogLevel::Error, msg); }
inline void log_warn(const std::string& msg) { log_line(LogLevel::Warn, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::Debug, msg); }

// FNV-1a 64-bit, used for config hashes and the manifest artifact index.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

}  // namespace mmkn
