#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace tnkit::detail {

inline void msg_cat(std::ostringstream&) {}

template <typename T, typename... Rest>
void msg_cat(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  msg_cat(os, rest...);
}

template <typename... Parts>
std::string msg(const Parts&... parts) {
  std::ostringstream os;
  msg_cat(os, parts...);
  return os.str();
}

// Precondition violation: the caller handed us arguments that can never work.
template <typename... Parts>
[[noreturn]] void fail_arg(const Parts&... parts) {
  throw std::invalid_argument(msg(parts...));
}

// State violation: the arguments are plausible but the object cannot honor
// the request right now (missing tensor, consumed tape, frozen edge, ...).
template <typename... Parts>
[[noreturn]] void fail_state(const Parts&... parts) {
  throw std::runtime_error(msg(parts...));
}

}  // namespace tnkit::detail
