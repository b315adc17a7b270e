#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace taskattr::log {

enum class Level { debug = 0, info = 1, warn = 2, quiet = 3 };

inline std::atomic<Level>& threshold() {
    static std::atomic<Level> level{Level::info};
    return level;
}

inline void set_level(Level level) { threshold().store(level); }

inline void write(Level level, std::string_view tag, std::string_view message) {
    if (level < threshold().load()) return;
    std::clog << "[taskattr " << tag << "] " << message << '\n';
}

inline void debug(std::string_view m) { write(Level::debug, "debug", m); }
inline void info(std::string_view m) { write(Level::info, "info", m); }
inline void warn(std::string_view m) { write(Level::warn, "warn", m); }

}  // namespace taskattr::log
