#pragma once

#include <stdexcept>
#include <string>

namespace corl {

// Stable machine-readable error codes. The CLI maps these 1:1 onto the
// "code" field of its structured stderr errors, so the strings in
// errc_name() are part of the external interface and must not change.
enum class Errc {
  bad_argument,
  unknown_token,
  dim_mismatch,
  shape_mismatch,
  task_mismatch,
  missing_advantages,
  missing_reference,
  nonfinite_gradient,
  bad_magic,
  version_mismatch,
  checksum_mismatch,
  world_hash_mismatch,
  config_invalid,
  io_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::bad_argument:        return "bad-argument";
    case Errc::unknown_token:       return "unknown-token";
    case Errc::dim_mismatch:        return "dim-mismatch";
    case Errc::shape_mismatch:      return "shape-mismatch";
    case Errc::task_mismatch:       return "task-mismatch";
    case Errc::missing_advantages:  return "missing-advantages";
    case Errc::missing_reference:   return "missing-reference";
    case Errc::nonfinite_gradient:  return "nonfinite-gradient";
    case Errc::bad_magic:           return "bad-magic";
    case Errc::version_mismatch:    return "version-mismatch";
    case Errc::checksum_mismatch:   return "checksum-mismatch";
    case Errc::world_hash_mismatch: return "world-hash-mismatch";
    case Errc::config_invalid:      return "config-invalid";
    case Errc::io_error:            return "io-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string message)
      : std::runtime_error(std::move(message)), code_(code) {}

  Errc code() const { return code_; }
  const char* code_name() const { return errc_name(code_); }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

} // namespace corl
