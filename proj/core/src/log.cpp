#include "ldnet/log.hpp"

#include <iostream>
#include <mutex>
#include <set>

namespace ldnet {

namespace {

std::mutex g_mutex;

LogSink& sink() {
  static LogSink s = [](std::string_view m) { std::cerr << "warning: " << m << '\n'; };
  return s;
}

std::set<std::string, std::less<>>& seen_once() {
  static std::set<std::string, std::less<>> seen;
  return seen;
}

}  // namespace

LogSink set_log_sink(LogSink s) {
  std::lock_guard lock(g_mutex);
  LogSink previous = std::move(sink());
  sink() = std::move(s);
  return previous;
}

void log_warning(std::string_view message) {
  std::lock_guard lock(g_mutex);
  if (sink()) sink()(message);
}

void log_warning_once(std::string_view message) {
  {
    std::lock_guard lock(g_mutex);
    if (!seen_once().emplace(message).second) return;
  }
  log_warning(message);
}

void forget_warnings() {
  std::lock_guard lock(g_mutex);
  seen_once().clear();
}

}  // namespace ldnet
