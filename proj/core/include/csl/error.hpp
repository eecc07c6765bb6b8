#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace csl {

// Stable error codes. The string forms appear verbatim on the wire
// (`error{code:...}`) and in HTTP error bodies.
enum class Errc {
  invalid_action,
  duplicate_action,
  protocol_violation,
  unknown_player,
  internal_inconsistency,
  session_closed,
  session_full,
  not_found,
  conflict,
  unauthorized,
  storage_error,
  degenerate_variance,
  precondition,
  empty_table,
  bad_frame,
  unknown_participant,
  version_mismatch,
  corrupt_record,
  invalid_definition,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace csl
