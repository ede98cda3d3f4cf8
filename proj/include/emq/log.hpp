#pragma once

#include <functional>
#include <string>

namespace emq::log {

using Sink = std::function<void(const std::string&)>;

// Routes warnings to `sink`; returns the previous sink. An empty sink restores
// the default (stderr).
Sink set_warning_sink(Sink sink);

void warn(const std::string& message);

// Installs a sink for the lifetime of the object.
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(set_warning_sink(std::move(sink))) {}
  ~ScopedSink() { set_warning_sink(std::move(previous_)); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace emq::log
