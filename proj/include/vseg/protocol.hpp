#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vseg/errors.hpp"
#include "vseg/frame.hpp"
#include "vseg/hmm.hpp"
#include "vseg/volume.hpp"

namespace vseg::net {

// JSON payload helpers for the control frames. Chunk frames carry the
// EncryptedChunk wire bytes directly and never pass through JSON.

struct Hello {
  unsigned proto = kProtocolVersion;
  std::string role;  // "coordinator" | "worker"
  std::vector<std::string> caps{"aes-256-gcm", "hmm-v1"};
};

struct JobHeader {
  std::uint32_t job_id = 0;
  std::uint32_t attempt = 0;
  std::size_t z0 = 0, z1 = 0;  // [z0, z1) global slice range
  Dims dims{0, 0, 0};
  VoxelSpacing spacing;
  hmm::QuantizationParams quant;
  hmm::SegConfig seg;
  std::size_t k = 4;
  std::size_t chunk_count = 0;

  std::size_t n_slices() const { return z1 - z0; }
};

struct ResultHeader {
  std::uint32_t job_id = 0;
  std::uint32_t attempt = 0;
  std::size_t z0 = 0, z1 = 0;
  std::size_t n_states = 0;
  std::size_t k = 4;
  std::size_t chunk_count = 0;
};

struct ErrorMsg {
  std::string code;  // "auth" | "version" | "protocol" | "internal" | "busy"
  std::string message;
};

namespace detail {

inline std::vector<std::uint8_t> to_bytes(const nlohmann::json& j) {
  const std::string s = j.dump();
  return {s.begin(), s.end()};
}

inline nlohmann::json parse_payload(const std::vector<std::uint8_t>& payload) {
  try {
    return nlohmann::json::parse(payload.begin(), payload.end());
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(ProtocolError::Kind::malformed,
                        std::string("malformed JSON payload: ") + e.what());
  }
}

}  // namespace detail

inline Frame encode_hello(const Hello& h) {
  nlohmann::json j = {{"proto", h.proto}, {"role", h.role}, {"caps", h.caps}};
  return Frame{MsgType::hello, detail::to_bytes(j)};
}

inline Hello decode_hello(const Frame& f) {
  auto j = detail::parse_payload(f.payload);
  Hello h;
  try {
    h.proto = j.at("proto").get<unsigned>();
    h.role = j.at("role").get<std::string>();
    h.caps = j.value("caps", h.caps);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(ProtocolError::Kind::malformed, std::string("bad HELLO: ") + e.what());
  }
  return h;
}

inline Frame encode_job_header(const JobHeader& h) {
  nlohmann::json j = {
      {"job_id", h.job_id},
      {"attempt", h.attempt},
      {"z_range", {h.z0, h.z1}},
      {"dims", {h.dims[0], h.dims[1], h.dims[2]}},
      {"spacing_mm", {h.spacing.dx, h.spacing.dy, h.spacing.dz}},
      {"quant", {{"lo", h.quant.lo}, {"hi", h.quant.hi}, {"symbols", h.quant.n_symbols}}},
      {"seg",
       {{"states", h.seg.n_states},
        {"symbols", h.seg.n_symbols},
        {"max_iters", h.seg.max_train_iters},
        {"tol", h.seg.loglik_tolerance},
        {"init_policy", h.seg.init_policy}}},
      {"k", h.k},
      {"chunk_count", h.chunk_count},
  };
  return Frame{MsgType::job_header, detail::to_bytes(j)};
}

inline JobHeader decode_job_header(const Frame& f) {
  auto j = detail::parse_payload(f.payload);
  JobHeader h;
  try {
    h.job_id = j.at("job_id").get<std::uint32_t>();
    h.attempt = j.value("attempt", 0u);
    h.z0 = j.at("z_range").at(0).get<std::size_t>();
    h.z1 = j.at("z_range").at(1).get<std::size_t>();
    auto d = j.at("dims");
    h.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    auto s = j.at("spacing_mm");
    h.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    auto q = j.at("quant");
    h.quant.lo = q.at("lo").get<double>();
    h.quant.hi = q.at("hi").get<double>();
    h.quant.n_symbols = q.at("symbols").get<std::size_t>();
    auto g = j.at("seg");
    h.seg.n_states = g.at("states").get<std::size_t>();
    h.seg.n_symbols = g.at("symbols").get<std::size_t>();
    h.seg.max_train_iters = g.at("max_iters").get<std::size_t>();
    h.seg.loglik_tolerance = g.at("tol").get<double>();
    h.seg.init_policy = g.value("init_policy", std::string("quantile-blocks"));
    h.k = j.at("k").get<std::size_t>();
    h.chunk_count = j.at("chunk_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(ProtocolError::Kind::malformed,
                        std::string("bad JOB_HEADER: ") + e.what());
  }
  if (h.z1 <= h.z0)
    throw ProtocolError(ProtocolError::Kind::malformed, "JOB_HEADER has empty z range");
  if (h.z1 > h.dims[2])
    throw ProtocolError(ProtocolError::Kind::malformed, "JOB_HEADER z range outside volume");
  if (h.chunk_count != h.n_slices() * h.k * h.k)
    throw ProtocolError(ProtocolError::Kind::malformed,
                        "JOB_HEADER chunk_count does not match slices x k^2");
  try {
    h.quant.validate();
    h.seg.validate();
  } catch (const Error& e) {
    throw ProtocolError(ProtocolError::Kind::malformed,
                        std::string("bad JOB_HEADER config: ") + e.what());
  }
  return h;
}

inline Frame encode_result_header(const ResultHeader& h) {
  nlohmann::json j = {{"job_id", h.job_id},   {"attempt", h.attempt},
                      {"z_range", {h.z0, h.z1}}, {"states", h.n_states},
                      {"k", h.k},             {"chunk_count", h.chunk_count}};
  return Frame{MsgType::result_header, detail::to_bytes(j)};
}

inline ResultHeader decode_result_header(const Frame& f) {
  auto j = detail::parse_payload(f.payload);
  ResultHeader h;
  try {
    h.job_id = j.at("job_id").get<std::uint32_t>();
    h.attempt = j.value("attempt", 0u);
    h.z0 = j.at("z_range").at(0).get<std::size_t>();
    h.z1 = j.at("z_range").at(1).get<std::size_t>();
    h.n_states = j.at("states").get<std::size_t>();
    h.k = j.at("k").get<std::size_t>();
    h.chunk_count = j.at("chunk_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(ProtocolError::Kind::malformed,
                        std::string("bad RESULT_HEADER: ") + e.what());
  }
  return h;
}

inline Frame encode_end(MsgType type, std::uint32_t job_id, std::uint32_t attempt) {
  nlohmann::json j = {{"job_id", job_id}, {"attempt", attempt}};
  return Frame{type, detail::to_bytes(j)};
}

inline Frame encode_error(const ErrorMsg& e) {
  nlohmann::json j = {{"code", e.code}, {"message", e.message}};
  return Frame{MsgType::error, detail::to_bytes(j)};
}

inline ErrorMsg decode_error(const Frame& f) {
  auto j = detail::parse_payload(f.payload);
  ErrorMsg e;
  e.code = j.value("code", "internal");
  e.message = j.value("message", "");
  return e;
}

}  // namespace vseg::net
