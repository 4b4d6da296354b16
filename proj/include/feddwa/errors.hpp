#ifndef FEDDWA_ERRORS_HPP
#define FEDDWA_ERRORS_HPP

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace feddwa {

// Shape or layout mismatch, empty inputs, or another violated precondition.
class StructuralError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid user-facing configuration. Messages always name the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Failure while a run is in progress (diverged training, I/O).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

inline bool& quiet_flag() {
  static bool quiet = [] {
    const char* env = std::getenv("FEDDWA_QUIET");
    return env != nullptr && std::string_view(env) != "0";
  }();
  return quiet;
}

}  // namespace detail

inline void set_quiet(bool quiet) { detail::quiet_flag() = quiet; }

// Informational message on stderr; silenced by set_quiet(true) or FEDDWA_QUIET=1.
inline void notice(std::string_view msg) {
  if (!detail::quiet_flag()) {
    std::clog << "[feddwa] " << msg << '\n';
  }
}

}  // namespace feddwa

#endif  // FEDDWA_ERRORS_HPP
