#pragma once

#include <cstdint>
#include <cstring>
#include <optional>

#include "vrdma/sim/fabric.hpp"

namespace vrdma::nic {

enum class Opcode : std::uint8_t { read, write, send };

enum class WcStatus : std::uint8_t { ok, loc_err, rem_access_err, flush_err, overflow_err };

inline const char* to_string(WcStatus s) {
  switch (s) {
    case WcStatus::ok: return "OK";
    case WcStatus::loc_err: return "LOC_ERR";
    case WcStatus::rem_access_err: return "REM_ACCESS_ERR";
    case WcStatus::flush_err: return "FLUSH_ERR";
    case WcStatus::overflow_err: return "OVERFLOW_ERR";
  }
  return "?";
}

enum class QpKind : std::uint8_t { rc, dc };
enum class QpState : std::uint8_t { reset, init, rtr, rts, err };

inline const char* to_string(QpState s) {
  switch (s) {
    case QpState::reset: return "RESET";
    case QpState::init: return "INIT";
    case QpState::rtr: return "RTR";
    case QpState::rts: return "RTS";
    case QpState::err: return "ERR";
  }
  return "?";
}

// Hardware routing handle for the dynamically connected transport. The pair
// is unique per owner node; its serialized form is 12 bytes.
struct DctTarget {
  std::uint32_t dct_num = 0;
  std::uint64_t dct_key = 0;

  bool operator==(const DctTarget&) const = default;
};

inline constexpr std::size_t kDctTargetBytes = 12;

inline void encode_dct_target(const DctTarget& t, std::uint8_t out[kDctTargetBytes]) {
  for (int i = 0; i < 4; i++) out[i] = static_cast<std::uint8_t>(t.dct_num >> (8 * i));
  for (int i = 0; i < 8; i++) out[4 + i] = static_cast<std::uint8_t>(t.dct_key >> (8 * i));
}

inline DctTarget decode_dct_target(const std::uint8_t in[kDctTargetBytes]) {
  DctTarget t;
  for (int i = 0; i < 4; i++) t.dct_num |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  for (int i = 0; i < 8; i++) t.dct_key |= static_cast<std::uint64_t>(in[4 + i]) << (8 * i);
  return t;
}

// Route for a DC work request: which node and which of its targets.
struct DctRoute {
  sim::NodeId owner;
  DctTarget target;

  bool operator==(const DctRoute&) const = default;
};

struct MemoryRegion {
  std::uint32_t mr_id = 0;
  std::uint64_t base = 0;
  std::int64_t length = 0;
  std::uint32_t lkey = 0;
  std::uint32_t rkey = 0;
  bool remote_read = false;
  bool remote_write = false;
  sim::Ns registered_at = 0;
  bool valid = false;

  bool contains(std::uint64_t addr, std::int64_t len) const {
    return len >= 0 && addr >= base && addr + static_cast<std::uint64_t>(len) <= base + static_cast<std::uint64_t>(length);
  }
};

struct WorkRequest {
  Opcode op = Opcode::read;
  std::uint64_t wr_id = 0;
  bool signaled = false;
  std::uint64_t laddr = 0;
  std::int64_t len = 0;
  std::uint32_t lkey = 0;
  std::optional<std::uint64_t> raddr;
  std::optional<std::uint32_t> rkey;
  std::optional<DctRoute> route;
};

struct Completion {
  std::uint64_t wr_id = 0;
  WcStatus status = WcStatus::ok;
  std::int64_t byte_len = 0;
  bool is_recv = false;
  // Valid for recv completions: where the payload landed.
  std::uint64_t recv_addr = 0;
  // Valid for routed recv completions: which local DCT context was addressed.
  std::uint32_t dct_num = 0;
};

struct RecvBuffer {
  std::uint64_t wr_id = 0;
  std::uint64_t addr = 0;
  std::int64_t len = 0;
  std::uint32_t lkey = 0;
};

}  // namespace vrdma::nic
