#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdense {

enum class Errc {
  invalid_argument,
  shape_mismatch,
  empty_input,
  not_scalar,
  uninitialized_state,
  nan_detected,
  malformed_header,
  unsupported_format,
  truncated_payload,
  version_mismatch,
  fingerprint_mismatch,
  io_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::empty_input: return "empty input";
    case Errc::not_scalar: return "not a scalar";
    case Errc::uninitialized_state: return "uninitialized state";
    case Errc::nan_detected: return "NaN detected";
    case Errc::malformed_header: return "malformed header";
    case Errc::unsupported_format: return "unsupported format";
    case Errc::truncated_payload: return "truncated payload";
    case Errc::version_mismatch: return "version mismatch";
    case Errc::fingerprint_mismatch: return "fingerprint mismatch";
    case Errc::io_error: return "I/O error";
  }
  return "unknown";
}

// Every failure raised by the library carries a category so callers (and
// tests) can tell a truncated file from a malformed one without parsing text.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

// Message is only built when the check fails.
#define MMDENSE_REQUIRE(cond, code, what) \
  do {                                    \
    if (!(cond)) ::mmdense::fail((code), (what)); \
  } while (0)

}  // namespace mmdense
