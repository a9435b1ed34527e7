#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>

namespace clmm::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

// Verbosity comes from CLMM_LOG (error|warn|info|debug); default warn.
inline Level threshold() {
    static const Level level = [] {
        const char* env = std::getenv("CLMM_LOG");
        if (env == nullptr) return Level::warn;
        std::string_view v(env);
        if (v == "error") return Level::error;
        if (v == "info") return Level::info;
        if (v == "debug") return Level::debug;
        return Level::warn;
    }();
    return level;
}

template <typename... Args>
void write(Level level, std::string_view tag, const Args&... args) {
    if (static_cast<int>(level) > static_cast<int>(threshold())) return;
    std::ostringstream oss;
    oss << "[clmm " << tag << "] ";
    (oss << ... << args);
    oss << '\n';
    std::cerr << oss.str();
}

template <typename... Args> void warn(const Args&... a) { write(Level::warn, "warn", a...); }
template <typename... Args> void info(const Args&... a) { write(Level::info, "info", a...); }
template <typename... Args> void debug(const Args&... a) { write(Level::debug, "debug", a...); }

} // namespace clmm::log
