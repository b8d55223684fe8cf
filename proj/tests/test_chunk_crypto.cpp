#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "vseg/chunk.hpp"
#include "vseg/crypto.hpp"

using namespace vseg;
using namespace vseg::crypto;

namespace {

Salt test_salt(std::uint8_t fill = 0xA5) {
  Salt s;
  s.fill(fill);
  return s;
}

std::vector<std::uint8_t> random_slice(std::size_t w, std::size_t h, std::size_t bpv,
                                       std::mt19937_64& rng) {
  std::vector<std::uint8_t> bytes(w * h * bpv);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
  return bytes;
}

std::vector<std::uint8_t> hex_to_bytes(const std::string& hex) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2)
    out.push_back(static_cast<std::uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  return out;
}

}  // namespace

// --- grids -----------------------------------------------------------------

TEST_CASE("512x512 at k=4 gives sixteen 128x128 chunks") {
  const auto grid = make_grid(512, 512, 4);
  REQUIRE(grid.chunk_count() == 16);
  for (const auto& r : grid.rects) {
    REQUIRE(r.w == 128);
    REQUIRE(r.h == 128);
  }
}

TEST_CASE("remainders go to the last row and column") {
  const auto grid = make_grid(100, 100, 9);
  REQUIRE(grid.chunk_count() == 81);
  for (std::size_t c = 0; c < 8; ++c) REQUIRE(grid.rect(0, c).w == 11);
  REQUIRE(grid.rect(0, 8).w == 12);  // 100 = 8*11 + 12
  for (std::size_t r = 0; r < 8; ++r) REQUIRE(grid.rect(r, 0).h == 11);
  REQUIRE(grid.rect(8, 0).h == 12);
}

TEST_CASE("rect areas always tile the slice") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t w = 9 + rng() % 120, h = 9 + rng() % 120, k = 1 + rng() % 9;
    const auto grid = make_grid(w, h, k);
    std::size_t area = 0;
    for (const auto& r : grid.rects) area += r.area();
    REQUIRE(area == w * h);
  }
}

TEST_CASE("oversized grid orders are rejected") {
  REQUIRE_THROWS_AS(make_grid(8, 64, 9), ArgumentError);
}

// --- split / reassemble -------------------------------------------------------

TEST_CASE("split then reassemble is the identity") {
  std::mt19937_64 rng(9);
  const auto grid = make_grid(64, 64, 4);
  const auto slice = random_slice(64, 64, 2, rng);
  auto chunks = split_slice(slice.data(), grid, 2, 7);
  std::shuffle(chunks.begin(), chunks.end(), rng);  // order independence
  REQUIRE(reassemble(chunks, grid, 2) == slice);
}

TEST_CASE("missing and duplicate chunks are assembly errors") {
  std::mt19937_64 rng(10);
  const auto grid = make_grid(32, 32, 3);
  const auto slice = random_slice(32, 32, 2, rng);
  auto chunks = split_slice(slice.data(), grid, 2, 0);

  SECTION("missing") {
    chunks.pop_back();
    REQUIRE_THROWS_AS(reassemble(chunks, grid, 2), AssemblyError);
  }
  SECTION("duplicate") {
    chunks[1] = chunks[0];
    REQUIRE_THROWS_AS(reassemble(chunks, grid, 2), AssemblyError);
  }
}

// --- key derivation --------------------------------------------------------------

TEST_CASE("key derivation is deterministic and salt-sensitive") {
  const auto a = derive_key("swordfish-is-a-bad-password", test_salt(), 10000);
  const auto b = derive_key("swordfish-is-a-bad-password", test_salt(), 10000);
  REQUIRE(a.key == b.key);
  REQUIRE(a.perm_seed == b.perm_seed);
  const auto c = derive_key("swordfish-is-a-bad-password", test_salt(0x3C), 10000);
  REQUIRE(a.key != c.key);
}

TEST_CASE("derivation matches published PBKDF2-HMAC-SHA256 vectors") {
  // cross-implementation known-answer vectors
  struct Vector {
    const char* password;
    const char* salt;
    unsigned iterations;
    std::size_t dk_len;
    const char* expected_hex;
  };
  const Vector vectors[] = {
      {"password", "salt", 1, 32,
       "120fb6cffcf8b32c43e7225256c4f837a86548c92ccc35480805987cb70be17b"},
      {"password", "salt", 2, 32,
       "ae4d0c95af6b46d32d0adff928f06dd02a303f8ef3c251dfd6e2d85a95474c43"},
      {"password", "salt", 4096, 32,
       "c5e478d59288c841aa530db6845c4c8d962893a001ce4e11a4963873aa98134a"},
      {"passwordPASSWORDpassword", "saltSALTsaltSALTsaltSALTsaltSALTsalt", 4096, 40,
       "348c89dbcbd32b2f32d814b8116e84cf2b17347ebc1800181c4e2a1fb8dd53e1c635518c7dac47e9"},
  };
  for (const auto& v : vectors) {
    const auto dk = pbkdf2_hmac_sha256(
        v.password, reinterpret_cast<const std::uint8_t*>(v.salt), std::strlen(v.salt),
        v.iterations, v.dk_len);
    REQUIRE(hex(dk.data(), dk.size()) == v.expected_hex);
  }
}

TEST_CASE("weak derivation parameters are rejected") {
  REQUIRE_THROWS_AS(derive_key("", test_salt(), 10000), ArgumentError);
  REQUIRE_THROWS_AS(derive_key("pw", test_salt(), 9999), ArgumentError);
}

// --- AEAD ---------------------------------------------------------------------

TEST_CASE("chunk encryption round-trips") {
  std::mt19937_64 rng(11);
  const auto secret = derive_key("round-trip", test_salt(), 10000);
  const auto grid = make_grid(24, 24, 2);
  const auto slice = random_slice(24, 24, 2, rng);
  NonceSequence nonces(NonceSequence::Direction::coordinator);
  for (const auto& pc : split_slice(slice.data(), grid, 2, 3)) {
    const auto ec = encrypt_chunk(pc, secret, nonces.next());
    const auto back = decrypt_chunk(ec, secret);
    REQUIRE(back.id == pc.id);
    REQUIRE(back.rect == pc.rect);
    REQUIRE(back.payload == pc.payload);
  }
}

TEST_CASE("any single-bit tamper fails authentication") {
  std::mt19937_64 rng(12);
  const auto secret = derive_key("tamper-evident", test_salt(), 10000);
  PlainChunk pc;
  pc.id = {5, 1, 2};
  pc.rect = {16, 8, 8, 8};
  pc.payload = random_slice(8, 8, 2, rng);
  NonceSequence nonces(NonceSequence::Direction::coordinator);
  const auto ec = encrypt_chunk(pc, secret, nonces.next());

  SECTION("ciphertext bit") {
    auto bad = ec;
    bad.ciphertext[rng() % bad.ciphertext.size()] ^= 1 << (rng() % 8);
    REQUIRE_THROWS_AS(decrypt_chunk(bad, secret), AuthError);
  }
  SECTION("nonce bit") {
    auto bad = ec;
    bad.nonce[rng() % bad.nonce.size()] ^= 1 << (rng() % 8);
    REQUIRE_THROWS_AS(decrypt_chunk(bad, secret), AuthError);
  }
  SECTION("rect metadata") {
    auto bad = ec;
    bad.rect.w ^= 1;
    REQUIRE_THROWS_AS(decrypt_chunk(bad, secret), AuthError);
  }
  SECTION("chunk id") {
    auto bad = ec;
    bad.id.slice_index ^= 1;
    REQUIRE_THROWS_AS(decrypt_chunk(bad, secret), AuthError);
  }
  SECTION("wrong key") {
    const auto other = derive_key("other-password", test_salt(), 10000);
    REQUIRE_THROWS_AS(decrypt_chunk(ec, other), AuthError);
  }
}

TEST_CASE("encrypted chunk wire layout round-trips") {
  std::mt19937_64 rng(13);
  const auto secret = derive_key("wire-layout", test_salt(), 10000);
  PlainChunk pc;
  pc.id = {0xDEADBEEF, 3, 4};
  pc.rect = {1, 2, 5, 6};
  pc.payload = random_slice(5, 6, 1, rng);
  NonceSequence nonces(NonceSequence::Direction::worker);
  const auto ec = encrypt_chunk(pc, secret, nonces.next());
  const auto bytes = encode_chunk(ec);

  // spot-check the big-endian prefix
  REQUIRE(bytes[0] == 0xDE);
  REQUIRE(bytes[1] == 0xAD);
  REQUIRE(bytes[2] == 0xBE);
  REQUIRE(bytes[3] == 0xEF);
  REQUIRE(bytes[4] == 0x00);
  REQUIRE(bytes[5] == 0x03);

  const auto back = decode_chunk(bytes.data(), bytes.size());
  REQUIRE(back.id == ec.id);
  REQUIRE(back.rect == ec.rect);
  REQUIRE(back.salt == ec.salt);
  REQUIRE(back.nonce == ec.nonce);
  REQUIRE(back.ciphertext == ec.ciphertext);

  REQUIRE_THROWS_AS(decode_chunk(bytes.data(), bytes.size() - 1), ProtocolError);
  REQUIRE_THROWS_AS(decode_chunk(bytes.data(), 10), ProtocolError);
}

TEST_CASE("nonces are unique and direction-separated") {
  NonceSequence coord(NonceSequence::Direction::coordinator);
  NonceSequence work(NonceSequence::Direction::worker);
  std::set<Nonce> seen;
  for (int i = 0; i < 10000; ++i) {
    REQUIRE(seen.insert(coord.next()).second);
    REQUIRE(seen.insert(work.next()).second);
  }
  REQUIRE((coord.next()[0] & 0x80) == 0);
  REQUIRE((work.next()[0] & 0x80) == 0x80);
}

// --- permutation --------------------------------------------------------------

TEST_CASE("permutations are keyed, invertible bijections") {
  const auto secret = derive_key("permute-me", test_salt(), 10000);

  SECTION("n=1 is the identity") {
    REQUIRE(permute_order(1, secret) == std::vector<std::uint32_t>{0});
  }
  SECTION("invert is a group inverse") {
    std::mt19937_64 rng(14);
    for (std::size_t n : {2ul, 5ul, 16ul, 81ul, 256ul}) {
      const auto perm = permute_order(n, secret);
      const auto inv = invert_order(perm);
      std::vector<std::uint32_t> data(n);
      for (auto& d : data) d = static_cast<std::uint32_t>(rng());
      std::vector<std::uint32_t> shuffled(n), restored(n);
      for (std::size_t i = 0; i < n; ++i) shuffled[i] = data[perm[i]];
      for (std::size_t i = 0; i < n; ++i) restored[i] = shuffled[inv[perm[i]]];
      for (std::size_t i = 0; i < n; ++i) restored[perm[i]] = shuffled[i];
      REQUIRE(restored == data);
      // bijection on [0, n)
      std::set<std::uint32_t> values(perm.begin(), perm.end());
      REQUIRE(values.size() == n);
      REQUIRE(*values.begin() == 0);
      REQUIRE(*values.rbegin() == n - 1);
    }
  }
  SECTION("matches the reference seeded shuffle") {
    for (std::size_t n : {2ul, 16ul, 81ul}) {
      const auto perm = permute_order(n, secret);
      const auto ref = oracle::fisher_yates(n, secret.perm_seed);
      REQUIRE(perm == ref);
    }
  }
  SECTION("deterministic per secret, different across secrets") {
    const auto again = permute_order(16, secret);
    REQUIRE(again == permute_order(16, secret));
    const auto other = derive_key("a-different-password", test_salt(), 10000);
    REQUIRE(permute_order(16, other) != again);
  }
}

// --- end-to-end transport property ---------------------------------------------

TEST_CASE("split-encrypt-permute-invert-decrypt-reassemble is lossless") {
  std::mt19937_64 rng(15);
  const auto secret = derive_key("lossless-transport", test_salt(), 10000);
  for (const std::size_t k : {1ul, 3ul, 4ul, 9ul}) {
    const std::size_t w = 9 + rng() % 50, h = 9 + rng() % 50;
    const auto grid = make_grid(w, h, k);
    const auto slice = random_slice(w, h, 2, rng);
    const auto chunks = split_slice(slice.data(), grid, 2, 42);

    NonceSequence nonces(NonceSequence::Direction::coordinator);
    std::vector<EncryptedChunk> encrypted;
    for (const auto& pc : chunks) encrypted.push_back(encrypt_chunk(pc, secret, nonces.next()));

    const auto perm = permute_order(encrypted.size(), secret);
    std::vector<EncryptedChunk> wire_order(encrypted.size());
    for (std::size_t i = 0; i < perm.size(); ++i) wire_order[i] = encrypted[perm[i]];

    // undo the permutation, then decrypt each chunk back into place
    const auto inv = invert_order(perm);
    std::vector<PlainChunk> restored(encrypted.size());
    for (std::size_t orig = 0; orig < encrypted.size(); ++orig)
      restored[orig] = decrypt_chunk(wire_order[inv[orig]], secret);

    REQUIRE(reassemble(restored, grid, 2) == slice);
  }
}

TEST_CASE("ciphertext leaks no plaintext runs") {
  // constant slice: any 64-byte plaintext window is the same repeating
  // pattern, which must never appear in the ciphertext stream
  const auto secret = derive_key("no-leaks", test_salt(), 10000);
  const std::size_t w = 64, h = 64;
  std::vector<std::uint8_t> slice(w * h * 2);
  for (std::size_t i = 0; i < slice.size(); i += 2) {
    slice[i] = 0xCD;
    slice[i + 1] = 0xAB;
  }
  const auto grid = make_grid(w, h, 4);
  NonceSequence nonces(NonceSequence::Direction::coordinator);
  std::vector<std::uint8_t> wire;
  for (const auto& pc : split_slice(slice.data(), grid, 2, 0)) {
    const auto bytes = encode_chunk(encrypt_chunk(pc, secret, nonces.next()));
    wire.insert(wire.end(), bytes.begin(), bytes.end());
  }
  const std::vector<std::uint8_t> needle(slice.begin(), slice.begin() + 64);
  const auto it = std::search(wire.begin(), wire.end(), needle.begin(), needle.end());
  REQUIRE(it == wire.end());
}
