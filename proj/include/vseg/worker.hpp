#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vseg/chunk.hpp"
#include "vseg/crypto.hpp"
#include "vseg/errors.hpp"
#include "vseg/frame.hpp"
#include "vseg/hmm.hpp"
#include "vseg/protocol.hpp"
#include "vseg/transport.hpp"
#include "vseg/volume.hpp"

namespace vseg::net {

inline constexpr int kJobReadTimeoutMs = 120000;
inline constexpr int kIdleTimeoutMs = 600000;

// Shared worker state: the provisioned password plus a cache of keys derived
// per session salt (derivation is deliberately slow).
class WorkerContext {
 public:
  explicit WorkerContext(std::string password, unsigned kdf_iterations = crypto::kDefaultKdfIterations)
      : password_(std::move(password)), kdf_iterations_(kdf_iterations) {
    if (password_.empty()) throw ArgumentError("worker password must not be empty");
  }

  crypto::SessionSecret secret_for(const crypto::Salt& salt) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = secrets_.find(salt);
    if (it != secrets_.end()) return it->second;
    auto secret = crypto::derive_key(password_, salt, kdf_iterations_);
    secrets_.emplace(salt, secret);
    return secret;
  }

 private:
  std::string password_;
  unsigned kdf_iterations_;
  std::mutex mu_;
  std::map<crypto::Salt, crypto::SessionSecret> secrets_;
};

namespace detail {

inline void send_error(Channel& ch, const std::string& code, const std::string& message) {
  try {
    send_frame(ch, encode_error({code, message}));
  } catch (...) {
    // peer already gone; the close below is all that is left to do
  }
}

// Slab volume from decrypted chunks. Chunk payloads are little-endian u16
// slice bytes; chunk ids carry global slice indices.
inline Volume assemble_slab(const JobHeader& job,
                            const std::vector<crypto::PlainChunk>& chunks) {
  const std::size_t nx = job.dims[0], ny = job.dims[1], nz = job.n_slices();
  Volume slab({nx, ny, nz}, job.spacing);
  const auto grid = crypto::make_grid(nx, ny, job.k);
  std::vector<std::vector<crypto::PlainChunk>> per_slice(nz);
  for (const auto& c : chunks) {
    if (c.id.slice_index < job.z0 || c.id.slice_index >= job.z1)
      throw ProtocolError(ProtocolError::Kind::malformed, "chunk slice outside the job range");
    per_slice[c.id.slice_index - job.z0].push_back(c);
  }
  for (std::size_t zi = 0; zi < nz; ++zi) {
    const auto bytes = crypto::reassemble(per_slice[zi], grid, 2);
    auto dst = slab.slice(zi);
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  }
  return slab;
}

inline void run_job(Channel& ch, WorkerContext& ctx, const JobHeader& job) {
  // collect the encrypted chunk stream
  std::vector<crypto::EncryptedChunk> encrypted;
  encrypted.reserve(job.chunk_count);
  for (std::size_t i = 0; i < job.chunk_count; ++i) {
    const Frame f = recv_frame(ch, kJobReadTimeoutMs);
    if (f.type != MsgType::chunk)
      throw ProtocolError(ProtocolError::Kind::malformed, "expected CHUNK frame");
    encrypted.push_back(crypto::decode_chunk(f.payload.data(), f.payload.size()));
  }
  const Frame end = recv_frame(ch, kJobReadTimeoutMs);
  if (end.type != MsgType::job_end)
    throw ProtocolError(ProtocolError::Kind::malformed, "expected JOB_END frame");

  if (encrypted.empty())
    throw ProtocolError(ProtocolError::Kind::malformed, "job without chunks");
  const auto secret = ctx.secret_for(encrypted.front().salt);
  std::vector<crypto::PlainChunk> chunks;
  chunks.reserve(encrypted.size());
  for (const auto& ec : encrypted) {
    if (ec.salt != secret.salt) throw AuthError("chunks disagree on the session salt");
    chunks.push_back(crypto::decrypt_chunk(ec, secret));
  }

  const Volume slab = assemble_slab(job, chunks);
  const LabelVolume labels = hmm::segment_slab(slab, job.quant, job.seg);

  // encrypt and stream back the label chunks, permuted
  const auto grid = crypto::make_grid(job.dims[0], job.dims[1], job.k);
  crypto::NonceSequence nonces(crypto::NonceSequence::Direction::worker);
  std::vector<crypto::EncryptedChunk> out;
  out.reserve(job.chunk_count);
  for (std::size_t zi = 0; zi < job.n_slices(); ++zi) {
    const std::uint8_t* slice_bytes = labels.data.data() + zi * labels.slice_voxels();
    auto slice_chunks =
        crypto::split_slice(slice_bytes, grid, 1, static_cast<std::uint32_t>(job.z0 + zi));
    for (auto& pc : slice_chunks) out.push_back(crypto::encrypt_chunk(pc, secret, nonces.next()));
  }

  ResultHeader rh;
  rh.job_id = job.job_id;
  rh.attempt = job.attempt;
  rh.z0 = job.z0;
  rh.z1 = job.z1;
  rh.n_states = job.seg.n_states;
  rh.k = job.k;
  rh.chunk_count = out.size();
  send_frame(ch, encode_result_header(rh));
  const auto perm = crypto::permute_order(out.size(), secret);
  for (const auto idx : perm) {
    Frame f;
    f.type = MsgType::result_chunk;
    f.payload = crypto::encode_chunk(out[idx]);
    send_frame(ch, f);
  }
  send_frame(ch, encode_end(MsgType::result_end, job.job_id, job.attempt));
}

}  // namespace detail

// Services one connection: HELLO handshake, then jobs one at a time.
// Malformed input produces an ERROR frame and closes the connection.
inline void handle_connection(Channel& ch, WorkerContext& ctx) {
  bool greeted = false;
  try {
    for (;;) {
      Frame f;
      try {
        f = recv_frame(ch, kIdleTimeoutMs);
      } catch (const ConnectionError&) {
        break;  // peer closed or went quiet; nothing to report
      }
      if (f.type == MsgType::hello) {
        const Hello hello = decode_hello(f);
        if (hello.proto != kProtocolVersion) {
          detail::send_error(ch, "version",
                             "unsupported protocol " + std::to_string(hello.proto));
          break;
        }
        greeted = true;
        send_frame(ch, encode_hello(Hello{kProtocolVersion, "worker", {}}));
        continue;
      }
      if (f.type == MsgType::job_header) {
        if (!greeted)
          throw ProtocolError(ProtocolError::Kind::malformed, "JOB_HEADER before HELLO");
        const JobHeader job = decode_job_header(f);
        detail::run_job(ch, ctx, job);
        continue;
      }
      throw ProtocolError(ProtocolError::Kind::malformed,
                          "unexpected frame type in session");
    }
  } catch (const AuthError& e) {
    detail::send_error(ch, "auth", e.what());
  } catch (const ProtocolError& e) {
    detail::send_error(ch, "protocol", e.what());
  } catch (const ConnectionError&) {
    // peer vanished mid-job; drop the connection
  } catch (const Error& e) {
    detail::send_error(ch, "internal", e.what());
  }
  ch.close();
}

// Accept loop with one thread per connection.
class WorkerServer {
 public:
  WorkerServer(const std::string& host, std::uint16_t port, std::string password,
               std::optional<TlsServerConfig> tls = std::nullopt,
               unsigned kdf_iterations = crypto::kDefaultKdfIterations)
      : ctx_(std::move(password), kdf_iterations), listener_(host, port, std::move(tls)) {}

  ~WorkerServer() { stop(); }

  std::uint16_t port() const { return listener_.port(); }

  void start() {
    accept_thread_ = std::thread([this] {
      for (;;) {
        std::shared_ptr<Channel> ch;
        try {
          ch = listener_.accept();
        } catch (const ConnectionError&) {
          break;  // listener stopped
        }
        std::lock_guard<std::mutex> lock(mu_);
        conns_.emplace_back([this, ch] { handle_connection(*ch, ctx_); });
      }
    });
  }

  // Serve until stop() is called from another thread (or a signal closes the
  // listener).
  void run() {
    start();
    accept_thread_.join();
    join_connections();
  }

  void stop() {
    listener_.stop();
    if (accept_thread_.joinable() &&
        accept_thread_.get_id() != std::this_thread::get_id())
      accept_thread_.join();
    join_connections();
  }

 private:
  void join_connections() {
    std::lock_guard<std::mutex> lock(mu_);
    for (auto& t : conns_)
      if (t.joinable()) t.join();
    conns_.clear();
  }

  WorkerContext ctx_;
  TcpListener listener_;
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<std::thread> conns_;
};

// Test transport: each connect() hands the coordinator one end of an
// in-process pipe with a fresh worker thread on the other end.
class LoopbackTransport : public Transport {
 public:
  explicit LoopbackTransport(std::string password,
                             unsigned kdf_iterations = crypto::kDefaultKdfIterations)
      : ctx_(std::move(password), kdf_iterations) {}

  ~LoopbackTransport() override {
    std::lock_guard<std::mutex> lock(mu_);
    for (auto& t : threads_)
      if (t.joinable()) t.join();
  }

  std::unique_ptr<Channel> connect(const std::string& /*endpoint*/) override {
    auto [coordinator_end, worker_end] = make_loopback_pair();
    std::shared_ptr<Channel> worker_ch = std::move(worker_end);
    std::lock_guard<std::mutex> lock(mu_);
    threads_.emplace_back([this, worker_ch] { handle_connection(*worker_ch, ctx_); });
    return std::move(coordinator_end);
  }

  WorkerContext& context() { return ctx_; }

 private:
  WorkerContext ctx_;
  std::mutex mu_;
  std::vector<std::thread> threads_;
};

}  // namespace vseg::net
