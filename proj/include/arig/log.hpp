#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace arig {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

inline std::atomic<LogLevel>& log_level() {
  static std::atomic<LogLevel> level{LogLevel::Warn};
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level < log_level().load()) return;
  static std::mutex mu;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[arig " << names[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_debug(const std::string& msg) { log(LogLevel::Debug, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }

}  // namespace arig
