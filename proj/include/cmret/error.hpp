#pragma once

#include <stdexcept>
#include <string>

namespace cmret {

// Error taxonomy shared across the library. The CLI maps kinds to exit
// codes: Config -> 2, Data -> 3, Numeric -> 4, everything else -> 1.
enum class ErrorKind {
  Config,       // invalid configuration or hyperparameters
  Data,         // bad dataset contents, ids, files
  Contract,     // caller violated an operation precondition
  Conformance,  // shape/dimension mismatch between tensors
  Budget,       // token budget exceeds available tokens
  Protocol,     // evaluation protocol violation (e.g. query without match)
  Version,      // checkpoint/manifest schema or hash mismatch
  Numeric,      // non-finite values where finite ones are required
  Io,           // filesystem failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace cmret
