#pragma once

#include <stdexcept>
#include <string>

namespace forkscope {

// Root of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed files, out-of-range configuration, violated
// preconditions. The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// The model backend failed. The CLI maps these to exit code 2.
class BackendError : public Error {
 public:
  using Error::Error;
};

// Connection refused, timeouts, 429 and 5xx. The only retryable kind.
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

// Backend cannot do what was asked (no logprobs, no teacher forcing).
class CapabilityError : public BackendError {
 public:
  using BackendError::BackendError;
};

class ContextOverflowError : public BackendError {
 public:
  using BackendError::BackendError;
};

}  // namespace forkscope
