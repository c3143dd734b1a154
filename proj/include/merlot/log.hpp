#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace merlot::log {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

// MERLOT_LOG in {error, info, debug}; defaults to error.
inline Level level() {
  static const Level lvl = [] {
    const char* env = std::getenv("MERLOT_LOG");
    if (!env) return Level::kError;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    if (std::strcmp(env, "info") == 0) return Level::kInfo;
    return Level::kError;
  }();
  return lvl;
}

inline void error(const std::string& msg) { std::fprintf(stderr, "[error] %s\n", msg.c_str()); }

inline void info(const std::string& msg) {
  if (level() >= Level::kInfo) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void debug(const std::string& msg) {
  if (level() >= Level::kDebug) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace merlot::log
