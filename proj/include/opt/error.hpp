#ifndef OPT_ERROR_HPP
#define OPT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace opt {

/// Raised when an argument violates an operation's precondition
/// (shape mismatch, non-finite input, empty effective domain).
class invalid_input : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed or inconsistent configuration.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an object is used in a state that does not allow the call,
/// e.g. stepping a finished episode.
class invalid_state : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for unreadable, truncated or incompatible files (checkpoints).
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace opt

#endif  // OPT_ERROR_HPP
