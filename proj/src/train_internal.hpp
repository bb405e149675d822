#pragma once

// Helpers shared by the training and benchmarking translation units.

#include <chrono>
#include <functional>
#include <ostream>

#include "tnkit/train.hpp"

namespace tnkit::train::detail {

class Stopwatch {
 public:
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_)
        .count();
  }
  void restart() { t0_ = std::chrono::steady_clock::now(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// Maps exceptions to the documented process exit codes.
inline int guard(std::ostream& log, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    log << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    log << "config error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tnkit::train::detail
