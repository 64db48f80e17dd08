#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace ldnet {

using LogSink = std::function<void(std::string_view)>;

/// Replaces the warning sink (stderr by default). Returns the previous sink.
LogSink set_log_sink(LogSink sink);

void log_warning(std::string_view message);

/// Emits `message` the first time it is seen in this process.
void log_warning_once(std::string_view message);

/// Lets every one-time warning fire again.
void forget_warnings();

}  // namespace ldnet
