#pragma once

#include <cstdint>
#include <optional>

#include "vrdma/nic/types.hpp"
#include "vrdma/sim/fabric.hpp"

namespace vrdma::vplane {

// Two-sided message envelope, fixed layout:
//   [2B magic][16B sender gid][2B sender port][4B dct_num][8B dct_key]
//   [1B flags: bit0 = zero-copy descriptor][4B payload length][body]
// The sender identifies itself (bound address plus reply route); the
// destination travels out of band as receive-side demux metadata.
inline constexpr std::uint16_t kMsgMagic = 0x4b51;
inline constexpr std::int64_t kHeaderBytes = 37;
inline constexpr std::uint8_t kFlagZeroCopy = 0x01;

// Body carried instead of the payload when the zero-copy flag is set:
//   [8B source address][4B size][4B dest VQP id]
// dest VQP id holds the addressed DCT number, the receiver kernel's handle
// for the bound VQP; the receiver cross-checks it against the demux result.
inline constexpr std::int64_t kDescriptorBytes = 16;

struct MsgHeader {
  sim::NodeId src;          // sender's bound (gid, service port)
  nic::DctTarget src_dct;   // sender's reply route
  bool zero_copy = false;
  std::uint32_t payload_len = 0;

  bool operator==(const MsgHeader&) const = default;
};

struct ZcDescriptor {
  std::uint64_t src_addr = 0;
  std::uint32_t size = 0;
  std::uint32_t dst_vqp = 0;

  bool operator==(const ZcDescriptor&) const = default;
};

inline void put_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}
inline void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void encode_msg_header(const MsgHeader& h, std::uint8_t out[kHeaderBytes]) {
  put_u16(out, kMsgMagic);
  for (int i = 0; i < 16; i++) out[2 + i] = h.src.gid[static_cast<std::size_t>(i)];
  put_u16(out + 18, h.src.port);
  put_u32(out + 20, h.src_dct.dct_num);
  put_u64(out + 24, h.src_dct.dct_key);
  out[32] = h.zero_copy ? kFlagZeroCopy : 0;
  put_u32(out + 33, h.payload_len);
}

inline std::optional<MsgHeader> decode_msg_header(const std::uint8_t* p, std::int64_t n) {
  if (n < kHeaderBytes || get_u16(p) != kMsgMagic) return std::nullopt;
  MsgHeader h;
  for (int i = 0; i < 16; i++) h.src.gid[static_cast<std::size_t>(i)] = p[2 + i];
  h.src.port = get_u16(p + 18);
  h.src_dct.dct_num = get_u32(p + 20);
  h.src_dct.dct_key = get_u64(p + 24);
  h.zero_copy = (p[32] & kFlagZeroCopy) != 0;
  h.payload_len = get_u32(p + 33);
  return h;
}

inline void encode_zc_descriptor(const ZcDescriptor& d, std::uint8_t out[kDescriptorBytes]) {
  put_u64(out, d.src_addr);
  put_u32(out + 8, d.size);
  put_u32(out + 12, d.dst_vqp);
}

inline std::optional<ZcDescriptor> decode_zc_descriptor(const std::uint8_t* p, std::int64_t n) {
  if (n < kDescriptorBytes) return std::nullopt;
  ZcDescriptor d;
  d.src_addr = get_u64(p);
  d.size = get_u32(p + 8);
  d.dst_vqp = get_u32(p + 12);
  return d;
}

}  // namespace vrdma::vplane
