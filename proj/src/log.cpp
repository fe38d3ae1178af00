#include "massseg/log.hpp"

#include <atomic>
#include <iostream>

namespace massseg::log {

namespace {
std::atomic<Level> g_level{Level::kWarn};

void emit(Level at, std::string_view tag, std::string_view message) {
  if (static_cast<int>(g_level.load()) < static_cast<int>(at)) return;
  std::cerr << "[" << tag << "] " << message << '\n';
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void warn(std::string_view message) { emit(Level::kWarn, "warn", message); }
void info(std::string_view message) { emit(Level::kInfo, "info", message); }
void debug(std::string_view message) { emit(Level::kDebug, "debug", message); }

}  // namespace massseg::log
