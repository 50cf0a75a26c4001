#pragma once

#include <cstdint>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace asymdsd {

// Runtime contract violation. Thrown by every module; the CLI maps it to
// exit code 1 (runtime) or 2 (usage/config), tests assert on it.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw Error(os.str());
}

template <typename... Args>
inline void check(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

template <typename... Args>
inline void warn(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  std::cerr << "[asymdsd] warning: " << os.str() << "\n";
}

}  // namespace asymdsd
