#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace vertseg::log {

using Sink = std::function<void(std::string_view)>;

// Installs a sink for warnings and returns the previous one. The default sink
// writes to stderr.
Sink set_warning_sink(Sink sink);

void warn(std::string_view message);

// Progress messages; silent unless verbose output was requested.
void set_verbose(bool verbose);
bool verbose();
void info(std::string_view message);

}  // namespace vertseg::log
