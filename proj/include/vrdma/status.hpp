#pragma once

namespace vrdma {

// Error codes returned by control-plane and data-plane entry points.
enum class Status {
  ok = 0,
  invalid_arg,
  invalid_op,
  invalid_mr,
  overflow,
  bad_state,
  not_found,
  duplicate,
  exhausted,
  timeout,
  not_connected,
};

inline const char* to_string(Status s) {
  switch (s) {
    case Status::ok: return "ok";
    case Status::invalid_arg: return "invalid_arg";
    case Status::invalid_op: return "invalid_op";
    case Status::invalid_mr: return "invalid_mr";
    case Status::overflow: return "overflow";
    case Status::bad_state: return "bad_state";
    case Status::not_found: return "not_found";
    case Status::duplicate: return "duplicate";
    case Status::exhausted: return "exhausted";
    case Status::timeout: return "timeout";
    case Status::not_connected: return "not_connected";
  }
  return "unknown";
}

}  // namespace vrdma
