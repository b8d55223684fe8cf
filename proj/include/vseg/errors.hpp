#pragma once

#include <stdexcept>
#include <string>

namespace vseg {

// Error categories, used by the CLI to pick a stable exit code:
//   usage/argument -> 1, I/O and file formats -> 2,
//   protocol/auth/transport -> 3, numeric -> 4.
enum class Errc {
  argument,
  geometry,
  resolution,
  format,
  io,
  decode,
  numeric,
  degenerate_input,
  assembly,
  auth,
  protocol,
  connection,
  config,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

struct ArgumentError : Error {
  explicit ArgumentError(const std::string& w) : Error(Errc::argument, w) {}
};
struct GeometryError : Error {
  explicit GeometryError(const std::string& w) : Error(Errc::geometry, w) {}
};
struct ResolutionError : Error {
  explicit ResolutionError(const std::string& w) : Error(Errc::resolution, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(Errc::format, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(Errc::io, w) {}
};
struct DecodeError : Error {
  explicit DecodeError(const std::string& w) : Error(Errc::decode, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(Errc::numeric, w) {}
};
struct DegenerateInputError : Error {
  explicit DegenerateInputError(const std::string& w) : Error(Errc::degenerate_input, w) {}
};
struct AssemblyError : Error {
  explicit AssemblyError(const std::string& w) : Error(Errc::assembly, w) {}
};
struct AuthError : Error {
  explicit AuthError(const std::string& w) : Error(Errc::auth, w) {}
};
struct ConnectionError : Error {
  explicit ConnectionError(const std::string& w) : Error(Errc::connection, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(Errc::config, w) {}
};

// Wire-level failures carry the exact malformation kind so tests and peers
// can distinguish a bad magic from a truncated stream.
class ProtocolError : public Error {
 public:
  enum class Kind { bad_magic, bad_version, bad_type, oversize, truncated, malformed };

  ProtocolError(Kind kind, const std::string& w) : Error(Errc::protocol, w), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vseg
