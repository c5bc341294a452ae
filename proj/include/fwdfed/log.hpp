#pragma once

#include <cstdlib>
#include <iostream>
#include <string_view>

namespace fwdfed::log {

enum class Level { kOff = 0, kInfo = 1, kDebug = 2 };

// Verbosity comes from FWDFED_LOG (off|info|debug); unset means off.
inline Level level() {
  static const Level cached = [] {
    const char* env = std::getenv("FWDFED_LOG");
    if (env == nullptr) return Level::kOff;
    std::string_view v(env);
    if (v == "debug") return Level::kDebug;
    if (v == "info") return Level::kInfo;
    return Level::kOff;
  }();
  return cached;
}

template <typename... Args>
void write(Level at, Args&&... args) {
  if (static_cast<int>(level()) < static_cast<int>(at)) return;
  std::cerr << (at == Level::kDebug ? "[debug] " : "[info] ");
  (std::cerr << ... << args);
  std::cerr << '\n';
}

template <typename... Args>
void info(Args&&... args) {
  write(Level::kInfo, std::forward<Args>(args)...);
}

template <typename... Args>
void debug(Args&&... args) {
  write(Level::kDebug, std::forward<Args>(args)...);
}

}  // namespace fwdfed::log
