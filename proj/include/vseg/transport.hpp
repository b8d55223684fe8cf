#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/frame.hpp"

namespace vseg::net {

inline void ignore_sigpipe() {
  static const int once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return 0;
  }();
  (void)once;
}

// Byte stream with per-read deadlines. read_exact either fills the buffer or
// throws ConnectionError ("timeout" / "closed").
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void read_exact(std::uint8_t* buf, std::size_t n, int timeout_ms) = 0;
  virtual void write_all(const std::uint8_t* buf, std::size_t n) = 0;
  virtual void close() = 0;
};

inline void send_frame(Channel& ch, const Frame& frame) {
  const auto bytes = frame_encode(frame);
  ch.write_all(bytes.data(), bytes.size());
}

// Reads one frame. Header malformations surface as ProtocolError; transport
// failures as ConnectionError.
inline Frame recv_frame(Channel& ch, int timeout_ms) {
  std::uint8_t header[kHeaderBytes];
  ch.read_exact(header, kHeaderBytes, timeout_ms);
  const FrameHeader h = frame_decode_header(header, kHeaderBytes);
  Frame f;
  f.type = h.type;
  f.payload.resize(h.payload_len);
  if (h.payload_len > 0) ch.read_exact(f.payload.data(), f.payload.size(), timeout_ms);
  return f;
}

namespace detail {

inline std::string ssl_error_text(const char* what) {
  char buf[256];
  ERR_error_string_n(ERR_get_error(), buf, sizeof(buf));
  return std::string(what) + ": " + buf;
}

struct SslCtxFree {
  void operator()(SSL_CTX* p) const { SSL_CTX_free(p); }
};
struct SslFree {
  void operator()(SSL* p) const { SSL_free(p); }
};
using SslCtxPtr = std::unique_ptr<SSL_CTX, SslCtxFree>;
using SslPtr = std::unique_ptr<SSL, SslFree>;

inline void set_recv_timeout(int fd, int timeout_ms) {
  timeval tv{};
  tv.tv_sec = timeout_ms / 1000;
  tv.tv_usec = (timeout_ms % 1000) * 1000;
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

inline bool is_ip_literal(const std::string& host) {
  in_addr a4{};
  in6_addr a6{};
  return inet_pton(AF_INET, host.c_str(), &a4) == 1 ||
         inet_pton(AF_INET6, host.c_str(), &a6) == 1;
}

}  // namespace detail

class TcpChannel : public Channel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) { ignore_sigpipe(); }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;
  ~TcpChannel() override { close(); }

  void read_exact(std::uint8_t* buf, std::size_t n, int timeout_ms) override {
    std::size_t got = 0;
    while (got < n) {
      detail::set_recv_timeout(fd_, timeout_ms);
      const ssize_t r = ::recv(fd_, buf + got, n - got, 0);
      if (r == 0) throw ConnectionError("connection closed by peer");
      if (r < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw ConnectionError("read timeout");
        if (errno == EINTR) continue;
        throw ConnectionError(std::string("recv failed: ") + std::strerror(errno));
      }
      got += static_cast<std::size_t>(r);
    }
  }

  void write_all(const std::uint8_t* buf, std::size_t n) override {
    std::size_t sent = 0;
    while (sent < n) {
      const ssize_t r = ::send(fd_, buf + sent, n - sent, MSG_NOSIGNAL);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw ConnectionError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(r);
    }
  }

  void close() override {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  int fd() const { return fd_; }

 private:
  int fd_;
};

struct TlsServerConfig {
  std::string cert_file;
  std::string key_file;
  std::string client_ca_file;  // when set, clients must present a valid cert
};

struct TlsClientConfig {
  std::string ca_file;    // trust root for the server certificate
  std::string cert_file;  // optional client identity
  std::string key_file;
};

// TLS 1.3 stream over an owned socket. The constructor performs the
// handshake; certificate verification failures surface as ConnectionError.
class TlsChannel : public Channel {
 public:
  TlsChannel(int fd, const TlsClientConfig& cfg, const std::string& host) : fd_(fd) {
    ignore_sigpipe();
    try {
      client_handshake(cfg, host);
    } catch (...) {
      ::close(fd_);
      throw;
    }
  }

  // Server side: handshake on an accepted socket with a shared server context.
  TlsChannel(int fd, SSL_CTX* server_ctx) : fd_(fd) {
    ignore_sigpipe();
    try {
      ssl_.reset(SSL_new(server_ctx));
      if (!ssl_) throw ConnectionError(detail::ssl_error_text("SSL_new"));
      SSL_set_fd(ssl_.get(), fd_);
      detail::set_recv_timeout(fd_, 30000);
      if (SSL_accept(ssl_.get()) != 1)
        throw ConnectionError(detail::ssl_error_text("TLS accept failed"));
    } catch (...) {
      ::close(fd_);
      throw;
    }
  }

 private:
  void client_handshake(const TlsClientConfig& cfg, const std::string& host) {
    ctx_.reset(SSL_CTX_new(TLS_client_method()));
    if (!ctx_) throw ConnectionError(detail::ssl_error_text("SSL_CTX_new"));
    SSL_CTX_set_min_proto_version(ctx_.get(), TLS1_3_VERSION);
    SSL_CTX_set_max_proto_version(ctx_.get(), TLS1_3_VERSION);
    if (SSL_CTX_load_verify_locations(ctx_.get(), cfg.ca_file.c_str(), nullptr) != 1)
      throw ConnectionError(detail::ssl_error_text("cannot load trust root"));
    SSL_CTX_set_verify(ctx_.get(), SSL_VERIFY_PEER, nullptr);
    if (!cfg.cert_file.empty()) {
      if (SSL_CTX_use_certificate_chain_file(ctx_.get(), cfg.cert_file.c_str()) != 1 ||
          SSL_CTX_use_PrivateKey_file(ctx_.get(), cfg.key_file.c_str(), SSL_FILETYPE_PEM) != 1)
        throw ConnectionError(detail::ssl_error_text("cannot load client certificate"));
    }
    ssl_.reset(SSL_new(ctx_.get()));
    if (!ssl_) throw ConnectionError(detail::ssl_error_text("SSL_new"));
    X509_VERIFY_PARAM* param = SSL_get0_param(ssl_.get());
    if (detail::is_ip_literal(host)) {
      if (X509_VERIFY_PARAM_set1_ip_asc(param, host.c_str()) != 1)
        throw ConnectionError("bad IP literal for TLS verification");
    } else {
      if (X509_VERIFY_PARAM_set1_host(param, host.c_str(), host.size()) != 1)
        throw ConnectionError("bad hostname for TLS verification");
    }
    SSL_set_fd(ssl_.get(), fd_);
    detail::set_recv_timeout(fd_, 30000);
    if (SSL_connect(ssl_.get()) != 1)
      throw ConnectionError(detail::ssl_error_text("TLS handshake failed"));
  }

 public:
  TlsChannel(const TlsChannel&) = delete;
  TlsChannel& operator=(const TlsChannel&) = delete;
  ~TlsChannel() override { close(); }

  void read_exact(std::uint8_t* buf, std::size_t n, int timeout_ms) override {
    std::size_t got = 0;
    while (got < n) {
      detail::set_recv_timeout(fd_, timeout_ms);
      const int r = SSL_read(ssl_.get(), buf + got, static_cast<int>(n - got));
      if (r <= 0) {
        const int err = SSL_get_error(ssl_.get(), r);
        if (err == SSL_ERROR_ZERO_RETURN) throw ConnectionError("connection closed by peer");
        if (err == SSL_ERROR_SYSCALL && (errno == EAGAIN || errno == EWOULDBLOCK))
          throw ConnectionError("read timeout");
        throw ConnectionError(detail::ssl_error_text("SSL_read failed"));
      }
      got += static_cast<std::size_t>(r);
    }
  }

  void write_all(const std::uint8_t* buf, std::size_t n) override {
    std::size_t sent = 0;
    while (sent < n) {
      const int r = SSL_write(ssl_.get(), buf + sent, static_cast<int>(n - sent));
      if (r <= 0) throw ConnectionError(detail::ssl_error_text("SSL_write failed"));
      sent += static_cast<std::size_t>(r);
    }
  }

  void close() override {
    if (fd_ >= 0) {
      if (ssl_) SSL_shutdown(ssl_.get());
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_;
  detail::SslCtxPtr ctx_;  // empty on the server side (listener owns it)
  detail::SslPtr ssl_;
};

// In-process bidirectional pipe used by the deterministic test transport.
class LoopbackQueue {
 public:
  void write(const std::uint8_t* buf, std::size_t n) {
    std::lock_guard<std::mutex> lock(m_);
    if (closed_) throw ConnectionError("loopback closed");
    blocks_.emplace_back(buf, buf + n);
    cv_.notify_all();
  }

  void read_exact(std::uint8_t* buf, std::size_t n, int timeout_ms) {
    std::unique_lock<std::mutex> lock(m_);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    std::size_t got = 0;
    while (got < n) {
      if (blocks_.empty()) {
        if (closed_) throw ConnectionError("connection closed by peer");
        if (!cv_.wait_until(lock, deadline, [&] { return !blocks_.empty() || closed_; }))
          throw ConnectionError("read timeout");
        continue;
      }
      auto& front = blocks_.front();
      const std::size_t take = std::min(n - got, front.size() - offset_);
      std::memcpy(buf + got, front.data() + offset_, take);
      got += take;
      offset_ += take;
      if (offset_ == front.size()) {
        blocks_.pop_front();
        offset_ = 0;
      }
    }
  }

  void close() {
    std::lock_guard<std::mutex> lock(m_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<std::vector<std::uint8_t>> blocks_;
  std::size_t offset_ = 0;
  bool closed_ = false;
};

class LoopbackChannel : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<LoopbackQueue> in, std::shared_ptr<LoopbackQueue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackChannel() override { close(); }

  void read_exact(std::uint8_t* buf, std::size_t n, int timeout_ms) override {
    in_->read_exact(buf, n, timeout_ms);
  }
  void write_all(const std::uint8_t* buf, std::size_t n) override { out_->write(buf, n); }
  void close() override {
    in_->close();
    out_->close();
  }

 private:
  std::shared_ptr<LoopbackQueue> in_;
  std::shared_ptr<LoopbackQueue> out_;
};

inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_loopback_pair() {
  auto a = std::make_shared<LoopbackQueue>();
  auto b = std::make_shared<LoopbackQueue>();
  return {std::make_unique<LoopbackChannel>(a, b), std::make_unique<LoopbackChannel>(b, a)};
}

inline std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& endpoint) {
  const auto pos = endpoint.rfind(':');
  if (pos == std::string::npos || pos == 0 || pos + 1 == endpoint.size())
    throw ArgumentError("endpoint must be host:port, got '" + endpoint + "'");
  const std::string host = endpoint.substr(0, pos);
  const int port = std::stoi(endpoint.substr(pos + 1));
  if (port < 1 || port > 65535) throw ArgumentError("port out of range in '" + endpoint + "'");
  return {host, static_cast<std::uint16_t>(port)};
}

// Listen endpoints additionally allow port 0 (bind an ephemeral port).
inline std::pair<std::string, std::uint16_t> parse_listen_endpoint(const std::string& endpoint) {
  const auto pos = endpoint.rfind(':');
  if (pos == std::string::npos || pos == 0 || pos + 1 == endpoint.size())
    throw ArgumentError("endpoint must be host:port, got '" + endpoint + "'");
  const std::string host = endpoint.substr(0, pos);
  const int port = std::stoi(endpoint.substr(pos + 1));
  if (port < 0 || port > 65535) throw ArgumentError("port out of range in '" + endpoint + "'");
  return {host, static_cast<std::uint16_t>(port)};
}

// Plain or TLS client connection. tls unset means a plaintext test-mode
// stream; production runs should always pass a TlsClientConfig.
inline std::unique_ptr<Channel> transport_connect(const std::string& endpoint,
                                                  const std::optional<TlsClientConfig>& tls,
                                                  int timeout_ms = 10000) {
  ignore_sigpipe();
  auto [host, port] = parse_endpoint(endpoint);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw ConnectionError("cannot resolve " + endpoint);
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd < 0) throw ConnectionError("cannot connect to " + endpoint);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  detail::set_recv_timeout(fd, timeout_ms);
  if (tls) return std::make_unique<TlsChannel>(fd, *tls, host);
  return std::make_unique<TcpChannel>(fd);
}

// Listening socket; accept() yields plain or TLS channels per config.
class TcpListener {
 public:
  TcpListener(const std::string& host, std::uint16_t port,
              std::optional<TlsServerConfig> tls = std::nullopt)
      : tls_(std::move(tls)) {
    ignore_sigpipe();
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ConnectionError("cannot create listen socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (host.empty() || host == "0.0.0.0")
      addr.sin_addr.s_addr = INADDR_ANY;
    else if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw ArgumentError("listen host must be an IPv4 address, got '" + host + "'");
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      throw ConnectionError("cannot bind " + host + ":" + std::to_string(port) + ": " +
                            std::strerror(errno));
    }
    if (::listen(fd_, 16) != 0) {
      ::close(fd_);
      throw ConnectionError("listen failed");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);

    if (tls_) {
      ctx_.reset(SSL_CTX_new(TLS_server_method()));
      if (!ctx_) throw ConnectionError(detail::ssl_error_text("SSL_CTX_new"));
      SSL_CTX_set_min_proto_version(ctx_.get(), TLS1_3_VERSION);
      SSL_CTX_set_max_proto_version(ctx_.get(), TLS1_3_VERSION);
      if (SSL_CTX_use_certificate_chain_file(ctx_.get(), tls_->cert_file.c_str()) != 1 ||
          SSL_CTX_use_PrivateKey_file(ctx_.get(), tls_->key_file.c_str(), SSL_FILETYPE_PEM) != 1)
        throw ConnectionError(detail::ssl_error_text("cannot load server certificate"));
      if (!tls_->client_ca_file.empty()) {
        if (SSL_CTX_load_verify_locations(ctx_.get(), tls_->client_ca_file.c_str(), nullptr) != 1)
          throw ConnectionError(detail::ssl_error_text("cannot load client CA"));
        SSL_CTX_set_verify(ctx_.get(), SSL_VERIFY_PEER | SSL_VERIFY_FAIL_IF_NO_PEER_CERT,
                           nullptr);
      }
    }
  }

  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() { stop(); }

  std::unique_ptr<Channel> accept() {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw ConnectionError("accept failed (listener stopped)");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    if (tls_) return std::make_unique<TlsChannel>(fd, ctx_.get());
    return std::make_unique<TcpChannel>(fd);
  }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
  std::optional<TlsServerConfig> tls_;
  detail::SslCtxPtr ctx_;
};

// Factory used by the coordinator so tests can swap TCP for in-process
// loopback workers without touching job logic.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::unique_ptr<Channel> connect(const std::string& endpoint) = 0;
};

class TcpTransport : public Transport {
 public:
  explicit TcpTransport(std::optional<TlsClientConfig> tls = std::nullopt, int timeout_ms = 10000)
      : tls_(std::move(tls)), timeout_ms_(timeout_ms) {}
  std::unique_ptr<Channel> connect(const std::string& endpoint) override {
    return transport_connect(endpoint, tls_, timeout_ms_);
  }

 private:
  std::optional<TlsClientConfig> tls_;
  int timeout_ms_;
};

}  // namespace vseg::net
