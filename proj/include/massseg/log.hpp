#pragma once

#include <string_view>

namespace massseg::log {

enum class Level { kQuiet = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

void set_level(Level level);
Level level();

/// Diagnostics go to stderr.
void warn(std::string_view message);
void info(std::string_view message);
void debug(std::string_view message);

}  // namespace massseg::log
