#include "vertseg/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace vertseg::log {

namespace {

std::mutex g_mutex;
Sink g_sink;
std::atomic<bool> g_verbose{false};

}  // namespace

Sink set_warning_sink(Sink sink) {
  std::lock_guard lock(g_mutex);
  std::swap(g_sink, sink);
  return sink;
}

void warn(std::string_view message) {
  std::lock_guard lock(g_mutex);
  if (g_sink) {
    g_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

void set_verbose(bool verbose) { g_verbose = verbose; }
bool verbose() { return g_verbose; }

void info(std::string_view message) {
  if (!g_verbose) return;
  std::lock_guard lock(g_mutex);
  std::cerr << message << '\n';
}

}  // namespace vertseg::log
