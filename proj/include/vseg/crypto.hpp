#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <openssl/evp.h>
#include <openssl/rand.h>
#include <openssl/sha.h>

#include "vseg/chunk.hpp"
#include "vseg/errors.hpp"

namespace vseg::crypto {

inline constexpr std::size_t kSaltBytes = 16;
inline constexpr std::size_t kKeyBytes = 32;
inline constexpr std::size_t kNonceBytes = 12;
inline constexpr std::size_t kTagBytes = 16;
inline constexpr unsigned kDefaultKdfIterations = 100000;

using Salt = std::array<std::uint8_t, kSaltBytes>;
using Key = std::array<std::uint8_t, kKeyBytes>;
using Nonce = std::array<std::uint8_t, kNonceBytes>;

inline std::vector<std::uint8_t> sha256(const std::uint8_t* data, std::size_t n) {
  std::vector<std::uint8_t> digest(SHA256_DIGEST_LENGTH);
  unsigned len = 0;
  if (EVP_Digest(data, n, digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw NumericError("SHA-256 failed");
  digest.resize(len);
  return digest;
}

inline std::string hex(const std::uint8_t* data, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) {
  auto d = sha256(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  return hex(d.data(), d.size());
}

// Raw PBKDF2-HMAC-SHA256. Policy (salt length, iteration floor) lives in
// derive_key; this layer exists so known-answer vectors can be checked.
inline std::vector<std::uint8_t> pbkdf2_hmac_sha256(const std::string& password,
                                                    const std::uint8_t* salt, std::size_t salt_len,
                                                    unsigned iterations, std::size_t dk_len) {
  std::vector<std::uint8_t> out(dk_len);
  if (PKCS5_PBKDF2_HMAC(password.data(), static_cast<int>(password.size()), salt,
                        static_cast<int>(salt_len), static_cast<int>(iterations), EVP_sha256(),
                        static_cast<int>(dk_len), out.data()) != 1)
    throw NumericError("PBKDF2 failed");
  return out;
}

// Shared session state: the password-derived AEAD key plus the seed for the
// transmission-order permutation (labeled hash of the key).
struct SessionSecret {
  Salt salt{};
  Key key{};
  std::uint64_t perm_seed = 0;

  bool operator==(const SessionSecret&) const = default;
};

inline std::uint64_t permutation_seed(const Key& key) {
  std::vector<std::uint8_t> buf(key.begin(), key.end());
  const char label[] = "perm";
  buf.insert(buf.end(), label, label + 4);
  auto digest = sha256(buf.data(), buf.size());
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[i];
  return seed;
}

inline SessionSecret derive_key(const std::string& password, const Salt& salt,
                                unsigned iterations = kDefaultKdfIterations) {
  if (password.empty()) throw ArgumentError("password must not be empty");
  if (iterations < 10000) throw ArgumentError("key derivation iterations must be >= 10000");
  SessionSecret secret;
  secret.salt = salt;
  auto dk = pbkdf2_hmac_sha256(password, salt.data(), salt.size(), iterations, kKeyBytes);
  std::copy(dk.begin(), dk.end(), secret.key.begin());
  secret.perm_seed = permutation_seed(secret.key);
  return secret;
}

inline Salt random_salt() {
  Salt salt;
  if (RAND_bytes(salt.data(), static_cast<int>(salt.size())) != 1)
    throw NumericError("RAND_bytes failed");
  return salt;
}

// Session nonce source: 4-byte random prefix (top bit reserved per direction
// so coordinator and worker can never collide under the shared key) plus a
// 64-bit counter.
class NonceSequence {
 public:
  enum class Direction { coordinator, worker };

  explicit NonceSequence(Direction dir) {
    std::uint8_t prefix[4];
    if (RAND_bytes(prefix, 4) != 1) throw NumericError("RAND_bytes failed");
    if (dir == Direction::coordinator)
      prefix[0] &= 0x7f;
    else
      prefix[0] |= 0x80;
    std::memcpy(prefix_, prefix, 4);
  }

  Nonce next() {
    const std::uint64_t n = counter_.fetch_add(1, std::memory_order_relaxed);
    if (n == UINT64_MAX) throw ProtocolError(ProtocolError::Kind::malformed, "nonce counter exhausted");
    Nonce nonce;
    std::memcpy(nonce.data(), prefix_, 4);
    for (int i = 0; i < 8; ++i) nonce[4 + i] = static_cast<std::uint8_t>(n >> (8 * (7 - i)));
    return nonce;
  }

 private:
  std::uint8_t prefix_[4];
  std::atomic<std::uint64_t> counter_{0};
};

struct EncryptedChunk {
  ChunkId id;
  Rect rect;
  Salt salt{};
  Nonce nonce{};
  std::vector<std::uint8_t> ciphertext;  // ciphertext || 16-byte tag
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct CipherCtxFree {
  void operator()(EVP_CIPHER_CTX* p) const { EVP_CIPHER_CTX_free(p); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxFree>;

}  // namespace detail

// Authenticated metadata bytes: everything in the wire header up to and
// including the nonce. Any bit flip here fails the GCM tag check.
inline std::vector<std::uint8_t> chunk_aad(const EncryptedChunk& ec) {
  std::vector<std::uint8_t> aad;
  aad.reserve(44);
  detail::put_u32(aad, ec.id.slice_index);
  detail::put_u16(aad, ec.id.row);
  detail::put_u16(aad, ec.id.col);
  detail::put_u16(aad, ec.rect.x);
  detail::put_u16(aad, ec.rect.y);
  detail::put_u16(aad, ec.rect.w);
  detail::put_u16(aad, ec.rect.h);
  aad.insert(aad.end(), ec.salt.begin(), ec.salt.end());
  aad.insert(aad.end(), ec.nonce.begin(), ec.nonce.end());
  return aad;
}

// AES-256-GCM with the chunk metadata bound as associated data.
inline EncryptedChunk encrypt_chunk(const PlainChunk& chunk, const SessionSecret& secret,
                                    const Nonce& nonce) {
  EncryptedChunk ec;
  ec.id = chunk.id;
  ec.rect = chunk.rect;
  ec.salt = secret.salt;
  ec.nonce = nonce;
  const auto aad = chunk_aad(ec);

  detail::CipherCtx ctx(EVP_CIPHER_CTX_new());
  if (!ctx) throw NumericError("EVP_CIPHER_CTX_new failed");
  if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, secret.key.data(),
                         nonce.data()) != 1)
    throw NumericError("AES-GCM init failed");
  int aad_len = 0;
  if (EVP_EncryptUpdate(ctx.get(), nullptr, &aad_len, aad.data(), static_cast<int>(aad.size())) != 1)
    throw NumericError("AES-GCM AAD failed");
  ec.ciphertext.resize(chunk.payload.size() + kTagBytes);
  int ct_len = 0;
  if (!chunk.payload.empty() &&
      EVP_EncryptUpdate(ctx.get(), ec.ciphertext.data(), &ct_len, chunk.payload.data(),
                        static_cast<int>(chunk.payload.size())) != 1)
    throw NumericError("AES-GCM encrypt failed");
  int fin = 0;
  if (EVP_EncryptFinal_ex(ctx.get(), ec.ciphertext.data() + ct_len, &fin) != 1)
    throw NumericError("AES-GCM finalize failed");
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagBytes,
                          ec.ciphertext.data() + chunk.payload.size()) != 1)
    throw NumericError("AES-GCM tag failed");
  return ec;
}

inline PlainChunk decrypt_chunk(const EncryptedChunk& ec, const SessionSecret& secret) {
  if (ec.ciphertext.size() < kTagBytes)
    throw ProtocolError(ProtocolError::Kind::truncated, "ciphertext shorter than the tag");
  const std::size_t pt_len = ec.ciphertext.size() - kTagBytes;
  const auto aad = chunk_aad(ec);

  detail::CipherCtx ctx(EVP_CIPHER_CTX_new());
  if (!ctx) throw NumericError("EVP_CIPHER_CTX_new failed");
  if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, secret.key.data(),
                         ec.nonce.data()) != 1)
    throw NumericError("AES-GCM init failed");
  int aad_len = 0;
  if (EVP_DecryptUpdate(ctx.get(), nullptr, &aad_len, aad.data(), static_cast<int>(aad.size())) != 1)
    throw NumericError("AES-GCM AAD failed");
  PlainChunk chunk;
  chunk.id = ec.id;
  chunk.rect = ec.rect;
  chunk.payload.resize(pt_len);
  int pt_written = 0;
  if (pt_len > 0 && EVP_DecryptUpdate(ctx.get(), chunk.payload.data(), &pt_written,
                                      ec.ciphertext.data(), static_cast<int>(pt_len)) != 1)
    throw AuthError("chunk decryption failed");
  std::uint8_t tag[kTagBytes];
  std::memcpy(tag, ec.ciphertext.data() + pt_len, kTagBytes);
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagBytes, tag) != 1)
    throw NumericError("AES-GCM tag set failed");
  int fin = 0;
  if (EVP_DecryptFinal_ex(ctx.get(), chunk.payload.data() + pt_written, &fin) != 1)
    throw AuthError("chunk authentication failed (tampered data or wrong key)");
  return chunk;
}

// Wire layout, all big-endian:
//   slice_index u32 | row u16 | col u16 | rect x,y,w,h u16 each |
//   salt[16] | nonce[12] | ct_len u32 | ciphertext||tag
inline std::vector<std::uint8_t> encode_chunk(const EncryptedChunk& ec) {
  std::vector<std::uint8_t> out = chunk_aad(ec);
  detail::put_u32(out, static_cast<std::uint32_t>(ec.ciphertext.size()));
  out.insert(out.end(), ec.ciphertext.begin(), ec.ciphertext.end());
  return out;
}

inline EncryptedChunk decode_chunk(const std::uint8_t* data, std::size_t n) {
  constexpr std::size_t kHeader = 4 + 2 + 2 + 8 + kSaltBytes + kNonceBytes + 4;
  if (n < kHeader)
    throw ProtocolError(ProtocolError::Kind::truncated, "encrypted chunk header truncated");
  std::size_t off = 0;
  auto u16 = [&] {
    std::uint16_t v = static_cast<std::uint16_t>((data[off] << 8) | data[off + 1]);
    off += 2;
    return v;
  };
  auto u32 = [&] {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | data[off + i];
    off += 4;
    return v;
  };
  EncryptedChunk ec;
  ec.id.slice_index = u32();
  ec.id.row = u16();
  ec.id.col = u16();
  ec.rect = Rect{u16(), u16(), u16(), u16()};
  std::memcpy(ec.salt.data(), data + off, kSaltBytes);
  off += kSaltBytes;
  std::memcpy(ec.nonce.data(), data + off, kNonceBytes);
  off += kNonceBytes;
  const std::uint32_t ct_len = u32();
  if (ct_len < kTagBytes)
    throw ProtocolError(ProtocolError::Kind::malformed, "ciphertext length below tag size");
  if (n - off != ct_len)
    throw ProtocolError(ProtocolError::Kind::truncated, "encrypted chunk payload truncated");
  ec.ciphertext.assign(data + off, data + n);
  return ec;
}

// Keyed Fisher-Yates order for chunk transmission, seeded from the session
// key. The permutation maps send-position -> chunk index.
inline std::vector<std::uint32_t> permute_order(std::size_t n_chunks, const SessionSecret& secret) {
  if (n_chunks < 1) throw ArgumentError("permutation needs >= 1 element");
  std::vector<std::uint32_t> perm(n_chunks);
  for (std::size_t i = 0; i < n_chunks; ++i) perm[i] = static_cast<std::uint32_t>(i);
  std::mt19937_64 rng(secret.perm_seed);
  for (std::size_t i = 0; i + 1 < n_chunks; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n_chunks - i));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

inline std::vector<std::uint32_t> invert_order(const std::vector<std::uint32_t>& perm) {
  std::vector<std::uint32_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<std::uint32_t>(i);
  return inv;
}

}  // namespace vseg::crypto
