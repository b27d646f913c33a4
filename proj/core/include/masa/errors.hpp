#pragma once

#include <stdexcept>
#include <string>

namespace masa {

// Invalid configuration values (schedule ranges, model config, CLI config files).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated an operation's precondition (shape mismatch, bad index, NaN input).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The attention controller could not serve a request (missing record entry, layer mismatch).
class ControlError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated binary / text file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] inline void contract_failure(const std::string& what) { throw ContractError(what); }
}  // namespace detail

#define MASA_EXPECTS(cond, msg)                     \
  do {                                              \
    if (!(cond)) ::masa::detail::contract_failure(msg); \
  } while (0)

}  // namespace masa
