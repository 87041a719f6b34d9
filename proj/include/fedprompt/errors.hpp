#ifndef FEDPROMPT_ERRORS_HPP
#define FEDPROMPT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fedprompt {

// Error taxonomy, one class per CLI exit code. ConfigError covers bad
// dimensions, out-of-range values and malformed config or checkpoint
// content; NumericalError covers underflow and singular normalizations;
// IoError covers filesystem failures; ProtocolError covers violations of
// the federation message contract.

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what_arg)
      : std::runtime_error(what_arg) {}
};

class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what_arg)
      : std::runtime_error(what_arg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what_arg)
      : std::runtime_error(what_arg) {}
};

class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what_arg)
      : std::runtime_error(what_arg) {}
};

}  // namespace fedprompt

#endif  // FEDPROMPT_ERRORS_HPP
