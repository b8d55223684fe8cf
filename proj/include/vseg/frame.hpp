#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "vseg/errors.hpp"

namespace vseg::net {

// Frame layout: "VSG1" | version u8 (=1) | msg_type u8 | payload_len u64 BE
// | payload. Payloads above the hard cap are rejected before allocation.
inline constexpr std::uint8_t kMagic[4] = {0x56, 0x53, 0x47, 0x31};  // "VSG1"
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderBytes = 14;
inline constexpr std::uint64_t kMaxPayload = 256ull * 1024 * 1024;

enum class MsgType : std::uint8_t {
  hello = 0x01,
  job_header = 0x02,
  chunk = 0x03,
  job_end = 0x04,
  result_header = 0x05,
  result_chunk = 0x06,
  result_end = 0x07,
  error = 0x7f,
};

inline bool is_known_type(std::uint8_t t) {
  switch (static_cast<MsgType>(t)) {
    case MsgType::hello:
    case MsgType::job_header:
    case MsgType::chunk:
    case MsgType::job_end:
    case MsgType::result_header:
    case MsgType::result_chunk:
    case MsgType::result_end:
    case MsgType::error:
      return true;
  }
  return false;
}

struct Frame {
  MsgType type = MsgType::hello;
  std::vector<std::uint8_t> payload;

  bool operator==(const Frame&) const = default;
};

inline std::vector<std::uint8_t> frame_encode(const Frame& frame) {
  if (frame.payload.size() > kMaxPayload)
    throw ProtocolError(ProtocolError::Kind::oversize, "payload exceeds 256 MiB cap");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + frame.payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kProtocolVersion);
  out.push_back(static_cast<std::uint8_t>(frame.type));
  const std::uint64_t len = frame.payload.size();
  for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  return out;
}

// Header validation only; the caller reads `payload_len` more bytes.
struct FrameHeader {
  MsgType type;
  std::uint64_t payload_len;
};

inline FrameHeader frame_decode_header(const std::uint8_t* data, std::size_t n) {
  if (n < kHeaderBytes)
    throw ProtocolError(ProtocolError::Kind::truncated, "frame header truncated");
  if (std::memcmp(data, kMagic, 4) != 0)
    throw ProtocolError(ProtocolError::Kind::bad_magic, "bad frame magic");
  if (data[4] != kProtocolVersion)
    throw ProtocolError(ProtocolError::Kind::bad_version,
                        "unsupported protocol version " + std::to_string(data[4]));
  if (!is_known_type(data[5]))
    throw ProtocolError(ProtocolError::Kind::bad_type,
                        "unknown message type " + std::to_string(data[5]));
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len = (len << 8) | data[6 + i];
  if (len > kMaxPayload)
    throw ProtocolError(ProtocolError::Kind::oversize, "declared payload exceeds 256 MiB cap");
  return {static_cast<MsgType>(data[5]), len};
}

inline Frame frame_decode(const std::uint8_t* data, std::size_t n) {
  const FrameHeader h = frame_decode_header(data, n);
  if (n != kHeaderBytes + h.payload_len)
    throw ProtocolError(ProtocolError::Kind::truncated, "frame payload truncated");
  Frame f;
  f.type = h.type;
  f.payload.assign(data + kHeaderBytes, data + n);
  return f;
}

inline Frame frame_decode(const std::vector<std::uint8_t>& bytes) {
  return frame_decode(bytes.data(), bytes.size());
}

}  // namespace vseg::net
