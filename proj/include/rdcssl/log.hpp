#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

namespace rdcssl::log {

enum class Level { error = 0, info = 1, debug = 2 };

// RD_LOG=error|info|debug, default info.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("RD_LOG");
    const std::string v = env ? env : "info";
    if (v == "error") return Level::error;
    if (v == "debug") return Level::debug;
    return Level::info;
  }();
  return level;
}

template <typename... Args>
void write(Level level, const char* tag, const Args&... args) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::ostringstream os;
  os << '[' << tag << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <typename... Args>
void error(const Args&... args) { write(Level::error, "error", args...); }
template <typename... Args>
void info(const Args&... args) { write(Level::info, "info", args...); }
template <typename... Args>
void debug(const Args&... args) { write(Level::debug, "debug", args...); }

}  // namespace rdcssl::log
