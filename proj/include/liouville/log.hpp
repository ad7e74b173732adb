#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace liouville {

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

inline std::atomic<LogLevel>& log_level() {
    static std::atomic<LogLevel> level{LogLevel::warn};
    return level;
}

inline void log_message(LogLevel level, std::string_view msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level().load())) return;
    static std::mutex m;
    std::lock_guard lock(m);
    std::clog << (level == LogLevel::warn ? "[warn] " : "[info] ") << msg << '\n';
}

inline void log_warn(std::string_view msg) { log_message(LogLevel::warn, msg); }
inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }

} // namespace liouville
