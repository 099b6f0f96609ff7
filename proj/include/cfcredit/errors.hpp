#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace cfcredit {

/// Invalid specification, table, or parameter value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operation called in a state where it is not defined.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File read/write failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class... Parts>
std::string cat(Parts&&... parts) {
  std::ostringstream oss;
  (oss << ... << parts);
  return oss.str();
}

}  // namespace detail

template <class... Parts>
void require_config(bool cond, Parts&&... parts) {
  if (!cond) throw ConfigError(detail::cat(std::forward<Parts>(parts)...));
}

template <class... Parts>
void require_usage(bool cond, Parts&&... parts) {
  if (!cond) throw UsageError(detail::cat(std::forward<Parts>(parts)...));
}

}  // namespace cfcredit
