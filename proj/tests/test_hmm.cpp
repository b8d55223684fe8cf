#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>

#include "oracles.hpp"
#include "vseg/hmm.hpp"
#include "vseg/phantom.hpp"

using namespace vseg;
using namespace vseg::hmm;

namespace {

ObservationSequence make_seq(std::vector<std::uint16_t> symbols, std::size_t M) {
  ObservationSequence seq;
  seq.symbols = std::move(symbols);
  seq.n_symbols = M;
  return seq;
}

std::vector<std::uint16_t> random_symbols(std::size_t len, std::size_t M, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::uint16_t> d(0, static_cast<std::uint16_t>(M - 1));
  std::vector<std::uint16_t> out(len);
  for (auto& s : out) s = d(rng);
  return out;
}

}  // namespace

// --- quantize_slice ---------------------------------------------------------

TEST_CASE("constant slices quantize to one symbol") {
  std::vector<std::uint16_t> pixels(12, 777);
  SliceView view{pixels.data(), 4, 3};
  const auto seq = quantize_slice(view, {0, 65535, 32});
  for (auto s : seq.symbols) REQUIRE(s == seq.symbols[0]);
}

TEST_CASE("bin arithmetic matches the floor rule") {
  std::vector<std::uint16_t> pixels{0, 49, 50, 100};
  SliceView view{pixels.data(), 4, 1};
  const auto seq = quantize_slice(view, {0, 100, 2});
  REQUIRE(seq.symbols == std::vector<std::uint16_t>{0, 0, 1, 1});
}

TEST_CASE("quantization matches an independent binning oracle") {
  std::mt19937_64 rng(100);
  std::vector<std::uint16_t> pixels(48 * 32);
  for (auto& p : pixels) p = static_cast<std::uint16_t>(rng() % 50000 + 4000);
  const QuantizationParams params{4000, 54000, 32};
  SliceView view{pixels.data(), 48, 32};
  const auto seq = quantize_slice(view, params);

  // oracle: re-bin every pixel independently and compare histograms exactly
  std::vector<std::size_t> expected(32, 0), got(32, 0);
  for (auto p : pixels) {
    double v = std::min(std::max(static_cast<double>(p), params.lo), params.hi);
    auto b = static_cast<std::size_t>(std::floor(32.0 * (v - params.lo) / (params.hi - params.lo)));
    if (b >= 32) b = 31;
    ++expected[b];
  }
  for (auto s : seq.symbols) ++got[s];
  REQUIRE(got == expected);

  // per-pixel order is the raster scan
  REQUIRE(seq.symbols.size() == pixels.size());
}

TEST_CASE("empty slices are rejected") {
  SliceView view{nullptr, 0, 0};
  REQUIRE_THROWS_AS(quantize_slice(view, {0, 100, 4}), ArgumentError);
}

// --- viterbi -----------------------------------------------------------------

TEST_CASE("single-state models decode to the all-zeros path") {
  HmmModel m;
  m.n_states = 1;
  m.n_symbols = 3;
  m.trans = {1.0};
  m.emis = {0.2, 0.3, 0.5};
  m.init = {1.0};
  const auto path = viterbi(make_seq({0, 2, 1, 1, 2}, 3), m);
  REQUIRE(path.states == std::vector<std::uint8_t>{0, 0, 0, 0, 0});
}

TEST_CASE("identity emissions decode to the symbols themselves") {
  HmmModel m;
  m.n_states = 2;
  m.n_symbols = 2;
  m.trans = {0.5, 0.5, 0.5, 0.5};
  m.emis = {1.0, 0.0, 0.0, 1.0};
  m.init = {0.5, 0.5};
  const auto path = viterbi(make_seq({0, 1, 1, 0}, 2), m);
  REQUIRE(path.states == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("viterbi attains the exhaustive-search maximum exactly") {
  std::mt19937_64 rng(2024);
  for (std::size_t K = 1; K <= 3; ++K) {
    for (std::size_t M = 2; M <= 4; ++M) {
      for (int rep = 0; rep < 2; ++rep) {
        const auto model = oracle::random_model(K, M, rng);
        // all sequences of length <= 4, plus random longer ones up to 8
        std::vector<std::vector<std::uint16_t>> corpus;
        for (std::size_t len = 1; len <= 4; ++len) {
          std::vector<std::uint16_t> seq(len, 0);
          for (;;) {
            corpus.push_back(seq);
            std::size_t pos = 0;
            while (pos < len && ++seq[pos] == M) {
              seq[pos] = 0;
              ++pos;
            }
            if (pos == len) break;
          }
        }
        for (int r = 0; r < 40; ++r)
          corpus.push_back(random_symbols(5 + rng() % 4, M, rng));

        for (const auto& symbols : corpus) {
          const auto path = viterbi(make_seq(symbols, M), model);
          std::vector<std::size_t> as_idx(path.states.begin(), path.states.end());
          const double got = oracle::path_log_prob(model, symbols, as_idx);
          const double best = oracle::best_path_log_prob(model, symbols);
          REQUIRE(got == best);
        }
      }
    }
  }
}

TEST_CASE("ties break toward the lower state index") {
  // two interchangeable states: every path has equal probability
  HmmModel m;
  m.n_states = 2;
  m.n_symbols = 2;
  m.trans = {0.5, 0.5, 0.5, 0.5};
  m.emis = {0.5, 0.5, 0.5, 0.5};
  m.init = {0.5, 0.5};
  const auto path = viterbi(make_seq({0, 1, 0, 1, 1}, 2), m);
  REQUIRE(path.states == std::vector<std::uint8_t>{0, 0, 0, 0, 0});
}

TEST_CASE("impossible sequences raise a decode error") {
  HmmModel m;
  m.n_states = 2;
  m.n_symbols = 2;
  m.trans = {1.0, 0.0, 0.0, 1.0};
  m.emis = {1.0, 0.0, 0.0, 1.0};
  m.init = {1.0, 0.0};  // must start in state 0, which can only emit 0
  REQUIRE_THROWS_AS(viterbi(make_seq({1, 1}, 2), m), DecodeError);
}

// --- estimate ----------------------------------------------------------------

TEST_CASE("estimate counts transitions and emissions directly") {
  const auto m = estimate(make_seq({0, 1, 0, 1}, 2), StatePath{{0, 0, 1, 1}}, 2);
  REQUIRE(m.trans_at(0, 0) == Catch::Approx(0.5));
  REQUIRE(m.trans_at(0, 1) == Catch::Approx(0.5));
  REQUIRE(m.trans_at(1, 0) == Catch::Approx(0.0));
  REQUIRE(m.trans_at(1, 1) == Catch::Approx(1.0));
  REQUIRE(m.emis_at(0, 0) == Catch::Approx(0.5));
  REQUIRE(m.emis_at(0, 1) == Catch::Approx(0.5));
  REQUIRE(m.emis_at(1, 0) == Catch::Approx(0.5));
  REQUIRE(m.emis_at(1, 1) == Catch::Approx(0.5));
  m.validate();
}

TEST_CASE("states without observations fall back to uniform rows") {
  const auto m = estimate(make_seq({0, 1, 1, 0}, 2), StatePath{{0, 0, 0, 0}}, 2);
  REQUIRE(m.trans_at(0, 0) == Catch::Approx(1.0));
  REQUIRE(m.trans_at(0, 1) == Catch::Approx(0.0));
  REQUIRE(m.trans_at(1, 0) == Catch::Approx(0.5));  // zero-count fallback
  REQUIRE(m.trans_at(1, 1) == Catch::Approx(0.5));
  REQUIRE(m.emis_at(0, 0) == Catch::Approx(0.5));  // empirical frequencies
  REQUIRE(m.emis_at(1, 0) == Catch::Approx(0.5));  // fallback
  // init is the smoothed indicator of the first state
  REQUIRE(m.init[0] == Catch::Approx((1.0 + 1e-3) / (1.0 + 2e-3)));
  REQUIRE(m.init[1] == Catch::Approx(1e-3 / (1.0 + 2e-3)));
}

TEST_CASE("estimate matches the counting oracle on random pairs") {
  std::mt19937_64 rng(55);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t K = 1 + rng() % 4, M = 2 + rng() % 5, T = 1 + rng() % 100;
    const auto symbols = random_symbols(T, M, rng);
    std::vector<std::uint8_t> states(T);
    for (auto& s : states) s = static_cast<std::uint8_t>(rng() % K);
    const auto m = estimate(make_seq(symbols, M), StatePath{states}, K);
    const auto ref = oracle::counting_estimate(symbols, states, K, M);
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j)
        REQUIRE(m.trans_at(i, j) == Catch::Approx(ref.trans[i][j]).margin(1e-12));
      for (std::size_t s = 0; s < M; ++s)
        REQUIRE(m.emis_at(i, s) == Catch::Approx(ref.emis[i][s]).margin(1e-12));
      REQUIRE(m.init[i] == Catch::Approx(ref.init[i]).margin(1e-12));
    }
    m.validate();
  }
}

TEST_CASE("length mismatches are rejected") {
  REQUIRE_THROWS_AS(estimate(make_seq({0, 1}, 2), StatePath{{0}}, 2), ArgumentError);
}

// --- train ---------------------------------------------------------------------

TEST_CASE("single-state training converges to empirical frequencies in one step") {
  HmmModel m0;
  m0.n_states = 1;
  m0.n_symbols = 3;
  m0.trans = {1.0};
  m0.emis = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  m0.init = {1.0};
  const auto symbols = std::vector<std::uint16_t>{0, 0, 1, 2, 2, 2};
  auto [m, history] = train(make_seq(symbols, 3), m0, 1, 1e-6);
  REQUIRE(m.emis_at(0, 0) == Catch::Approx(2.0 / 6).epsilon(1e-9));
  REQUIRE(m.emis_at(0, 1) == Catch::Approx(1.0 / 6).epsilon(1e-9));
  REQUIRE(m.emis_at(0, 2) == Catch::Approx(3.0 / 6).epsilon(1e-9));
}

TEST_CASE("training log-likelihood never decreases") {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t K = 1 + rng() % 3, M = 2 + rng() % 3, T = 20 + rng() % 60;
    const auto model0 = oracle::random_model(K, M, rng);
    const auto symbols = random_symbols(T, M, rng);
    auto [m, history] = train(make_seq(symbols, M), model0, 12, 1e-12);
    for (std::size_t i = 1; i < history.size(); ++i)
      REQUIRE(history[i] >= history[i - 1] - 1e-9);
    m.validate();
  }
}

TEST_CASE("scaled training matches the log-space reference") {
  std::mt19937_64 rng(7);
  const std::size_t K = 2, M = 3, T = 50, iters = 10;
  const auto model0 = oracle::random_model(K, M, rng);
  const auto symbols = random_symbols(T, M, rng);

  // zero tolerance: both run exactly `iters` E+M steps
  auto [m, history] = train(make_seq(symbols, M), model0, iters, 0.0);
  const auto ref = oracle::reference_baum_welch(symbols, model0, iters, kEmissionFloor);

  REQUIRE(history.size() == ref.history.size());
  for (std::size_t i = 0; i < history.size(); ++i)
    REQUIRE(history[i] == Catch::Approx(ref.history[i]).margin(1e-6));
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j)
      REQUIRE(m.trans_at(i, j) == Catch::Approx(ref.model.trans_at(i, j)).margin(1e-6));
    for (std::size_t s = 0; s < M; ++s)
      REQUIRE(m.emis_at(i, s) == Catch::Approx(ref.model.emis_at(i, s)).margin(1e-6));
    REQUIRE(m.init[i] == Catch::Approx(ref.model.init[i]).margin(1e-6));
  }
}

TEST_CASE("training stops once the tolerance is met") {
  HmmModel m0;
  m0.n_states = 1;
  m0.n_symbols = 2;
  m0.trans = {1.0};
  m0.emis = {0.5, 0.5};
  m0.init = {1.0};
  auto [m, history] = train(make_seq({0, 1, 0, 1}, 2), m0, 50, 1e-4);
  REQUIRE(history.size() < 50);  // K=1 converges immediately
}

TEST_CASE("out-of-range symbols are rejected by train") {
  HmmModel m0;
  m0.n_states = 1;
  m0.n_symbols = 2;
  m0.trans = {1.0};
  m0.emis = {0.5, 0.5};
  m0.init = {1.0};
  REQUIRE_THROWS_AS(train(make_seq({0, 2}, 3), m0, 5, 1e-4), ArgumentError);
}

// --- initial_model --------------------------------------------------------------

TEST_CASE("quantile blocks split a uniform histogram in half") {
  SegConfig cfg;
  cfg.n_states = 2;
  cfg.n_symbols = 8;
  const std::vector<std::size_t> hist(8, 10);
  const auto m = initial_model(hist, cfg);
  m.validate();
  // row 0 supported on symbols 0..3 (plus smoothing), row 1 on 4..7
  for (std::size_t s = 0; s < 4; ++s) {
    REQUIRE(m.emis_at(0, s) > 0.1);
    REQUIRE(m.emis_at(1, s) < 1e-3);
  }
  for (std::size_t s = 4; s < 8; ++s) {
    REQUIRE(m.emis_at(0, s) < 1e-3);
    REQUIRE(m.emis_at(1, s) > 0.1);
  }
  REQUIRE(m.trans_at(0, 0) == Catch::Approx(0.9));
  REQUIRE(m.init[0] == Catch::Approx(0.5));
}

TEST_CASE("fewer distinct symbols than states is degenerate") {
  SegConfig cfg;
  cfg.n_states = 3;
  cfg.n_symbols = 8;
  std::vector<std::size_t> hist(8, 0);
  hist[2] = 5;
  hist[6] = 9;
  REQUIRE_THROWS_AS(initial_model(hist, cfg), DegenerateInputError);
}

TEST_CASE("initial models always satisfy the stochasticity invariants") {
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t M = 4 + rng() % 29;
    std::vector<std::size_t> hist(M, 0);
    std::size_t distinct = 0;
    for (auto& h : hist) {
      h = rng() % 5 == 0 ? 0 : rng() % 1000;
      distinct += h > 0 ? 1 : 0;
    }
    if (distinct == 0) {
      hist[0] = 1;
      distinct = 1;
    }
    SegConfig cfg;
    cfg.n_states = 1 + rng() % distinct;
    cfg.n_symbols = M;
    const auto m = initial_model(hist, cfg);
    REQUIRE_NOTHROW(m.validate());
  }
}

// --- segment_slice / segment_slab -------------------------------------------------

TEST_CASE("uniform slices take a single label") {
  std::vector<std::uint16_t> pixels(64, 12345);
  SliceView view{pixels.data(), 8, 8};
  SegConfig cfg;  // K=3 requested, clamped to the single distinct symbol
  const auto labels = segment_slice(view, {0, 65535, 32}, cfg);
  for (auto l : labels) REQUIRE(l == 0);
}

TEST_CASE("bimodal slices match midpoint thresholding") {
  // two flat regions far apart
  const std::size_t nx = 16, ny = 12;
  std::vector<std::uint16_t> pixels(nx * ny);
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x)
      pixels[y * nx + x] = (x < nx / 2) ? 12000 : 48000;
  SliceView view{pixels.data(), nx, ny};
  const QuantizationParams params{12000, 48000, 8};
  SegConfig cfg;
  cfg.n_states = 2;
  cfg.n_symbols = 8;
  const auto labels = segment_slice(view, params, cfg);

  const double midpoint = (12000 + 48000) / 2.0;
  for (std::size_t i = 0; i < pixels.size(); ++i)
    REQUIRE(static_cast<int>(labels[i]) == (pixels[i] > midpoint ? 1 : 0));
}

TEST_CASE("segmentation is deterministic") {
  std::mt19937_64 rng(3);
  std::vector<std::uint16_t> pixels(32 * 32);
  for (auto& p : pixels) p = static_cast<std::uint16_t>(rng() % 60000);
  SliceView view{pixels.data(), 32, 32};
  SegConfig cfg;
  const QuantizationParams params{0, 60000, 32};
  const auto a = segment_slice(view, params, cfg);
  const auto b = segment_slice(view, params, cfg);
  REQUIRE(a == b);
}

TEST_CASE("one-slice slabs reduce to segment_slice") {
  std::mt19937_64 rng(8);
  Volume vol({24, 16, 1}, {1, 1, 1});
  for (auto& v : vol.data) v = static_cast<std::uint16_t>(rng() % 50000);
  const auto params = global_quant_params(vol, 16);
  SegConfig cfg;
  cfg.n_symbols = 16;
  const auto slab = segment_slab(vol, params, cfg);
  SliceView view{vol.data.data(), 24, 16};
  const auto slice = segment_slice(view, params, cfg);
  REQUIRE(std::equal(slab.data.begin(), slab.data.end(), slice.begin()));
}

TEST_CASE("slab segmentation is invariant to slice grouping") {
  std::mt19937_64 rng(17);
  Volume vol({20, 20, 4}, {1, 1, 1});
  for (auto& v : vol.data) v = static_cast<std::uint16_t>(rng() % 60000);
  const auto params = global_quant_params(vol, 16);
  SegConfig cfg;
  cfg.n_symbols = 16;

  const auto whole = segment_slab(vol, params, cfg);

  Volume first({20, 20, 2}, {1, 1, 1});
  Volume second({20, 20, 2}, {1, 1, 1});
  std::copy(vol.data.begin(), vol.data.begin() + 800, first.data.begin());
  std::copy(vol.data.begin() + 800, vol.data.end(), second.data.begin());
  const auto a = segment_slab(first, params, cfg);
  const auto b = segment_slab(second, params, cfg);

  std::vector<std::uint8_t> stitched;
  stitched.insert(stitched.end(), a.data.begin(), a.data.end());
  stitched.insert(stitched.end(), b.data.begin(), b.data.end());
  REQUIRE(whole.data == stitched);
}

TEST_CASE("every intersected sphere produces lesion-label voxels near its center") {
  auto spec = phantom::nema_spec(2.5, 0.0, 1);
  auto [vol, truth] = phantom::generate_phantom(spec);
  const auto params = global_quant_params(vol, 32);
  SegConfig cfg;
  const auto labels = segment_slab(vol, params, cfg);
  const std::uint8_t lesion = 2;

  for (const auto& s : truth) {
    bool found = false;
    const double r = s.diameter_mm / 2.0;
    for (std::size_t z = 0; z < vol.dims[2] && !found; ++z)
      for (std::size_t y = 0; y < vol.dims[1] && !found; ++y)
        for (std::size_t x = 0; x < vol.dims[0] && !found; ++x) {
          if (labels.at(x, y, z) != lesion) continue;
          const double dx = (x + 0.5) * 2.5 - s.center_mm[0];
          const double dy = (y + 0.5) * 2.5 - s.center_mm[1];
          const double dz = (z + 0.5) * 2.5 - s.center_mm[2];
          if (dx * dx + dy * dy + dz * dz <= r * r) found = true;
        }
    REQUIRE(found);
  }
}

TEST_CASE("label canonicalization produces a pure relabeling") {
  // histogram of labels must match the histogram of decoded states as a
  // multiset, for any slice
  std::mt19937_64 rng(23);
  std::vector<std::uint16_t> pixels(40 * 40);
  for (auto& p : pixels) p = static_cast<std::uint16_t>(5000 + rng() % 50000);
  SliceView view{pixels.data(), 40, 40};
  const QuantizationParams params{5000, 55000, 16};
  SegConfig cfg;
  cfg.n_symbols = 16;
  const auto labels = segment_slice(view, params, cfg);

  std::map<std::uint8_t, std::size_t> counts;
  for (auto l : labels) counts[l]++;
  // labels are 0..K_eff-1, contiguous after canonicalization
  std::size_t total = 0;
  for (const auto& [label, count] : counts) {
    REQUIRE(label < cfg.n_states);
    total += count;
  }
  REQUIRE(total == labels.size());
}
