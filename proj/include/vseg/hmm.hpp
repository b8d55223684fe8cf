#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/volume.hpp"

namespace vseg::hmm {

inline constexpr double kRowSumTolerance = 1e-9;
// Floor applied to emission rows before training so symbols unseen in the
// initial blocks keep nonzero probability.
inline constexpr double kEmissionFloor = 1e-4;

// Discrete-observation model: K x K transition matrix, K x M emission
// matrix, length-K initial distribution. All rows stochastic.
struct HmmModel {
  std::size_t n_states = 0;
  std::size_t n_symbols = 0;
  std::vector<double> trans;  // row-major K x K
  std::vector<double> emis;   // row-major K x M
  std::vector<double> init;   // length K

  double& trans_at(std::size_t i, std::size_t j) { return trans[i * n_states + j]; }
  double trans_at(std::size_t i, std::size_t j) const { return trans[i * n_states + j]; }
  double& emis_at(std::size_t i, std::size_t m) { return emis[i * n_symbols + m]; }
  double emis_at(std::size_t i, std::size_t m) const { return emis[i * n_symbols + m]; }

  void validate() const {
    if (n_states < 1 || n_symbols < 1) throw ArgumentError("model needs >= 1 state and symbol");
    if (trans.size() != n_states * n_states || emis.size() != n_states * n_symbols ||
        init.size() != n_states)
      throw ArgumentError("model matrix sizes do not match K, M");
    auto check_rows = [](const std::vector<double>& m, std::size_t rows, std::size_t cols,
                         const char* name) {
      for (std::size_t i = 0; i < rows; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          const double v = m[i * cols + j];
          if (!(v >= 0.0)) throw ArgumentError(std::string(name) + " has a negative entry");
          sum += v;
        }
        if (std::abs(sum - 1.0) > kRowSumTolerance)
          throw ArgumentError(std::string(name) + " row " + std::to_string(i) +
                              " does not sum to 1");
      }
    };
    check_rows(trans, n_states, n_states, "trans");
    check_rows(emis, n_states, n_symbols, "emis");
    check_rows(init, 1, n_states, "init");
  }
};

// Quantized observations in raster order, tagged with their source slice.
struct ObservationSequence {
  std::vector<std::uint16_t> symbols;
  std::size_t n_symbols = 0;  // M
  std::size_t slice_index = 0;
};

struct StatePath {
  std::vector<std::uint8_t> states;
};

struct QuantizationParams {
  double lo = 0.0;
  double hi = 65535.0;
  std::size_t n_symbols = 32;

  void validate() const {
    if (!(lo < hi)) throw ArgumentError("quantization requires lo < hi");
    if (n_symbols < 2) throw ArgumentError("quantization requires M >= 2");
    if (n_symbols > 65536) throw ArgumentError("quantization supports at most 65536 symbols");
  }
};

struct SegConfig {
  std::size_t n_states = 3;
  std::size_t n_symbols = 32;
  std::size_t max_train_iters = 20;
  double loglik_tolerance = 1e-4;
  std::string init_policy = "quantile-blocks";

  void validate() const {
    if (n_states < 1 || n_states > 255) throw ArgumentError("state count must be in [1, 255]");
    if (n_symbols < 2) throw ArgumentError("symbol count must be >= 2");
    if (!(loglik_tolerance > 0.0)) throw ArgumentError("loglik tolerance must be > 0");
    if (init_policy != "quantile-blocks")
      throw ArgumentError("unknown init policy: " + init_policy);
  }
};

// Non-owning view of one axial slice in raster (row-major) order.
struct SliceView {
  const std::uint16_t* data = nullptr;
  std::size_t nx = 0;
  std::size_t ny = 0;

  std::size_t size() const { return nx * ny; }
};

// Uniform binning of clamped intensities into M symbols; v == hi maps to the
// top bin. Raster scan order.
inline ObservationSequence quantize_slice(SliceView slice, const QuantizationParams& params) {
  params.validate();
  if (slice.data == nullptr || slice.size() == 0) throw ArgumentError("empty slice");
  ObservationSequence seq;
  seq.n_symbols = params.n_symbols;
  seq.symbols.resize(slice.size());
  const double range = params.hi - params.lo;
  const double m = static_cast<double>(params.n_symbols);
  for (std::size_t i = 0; i < slice.size(); ++i) {
    const double v = std::clamp(static_cast<double>(slice.data[i]), params.lo, params.hi);
    auto sym = static_cast<std::size_t>(std::floor(m * (v - params.lo) / range));
    if (sym >= params.n_symbols) sym = params.n_symbols - 1;
    seq.symbols[i] = static_cast<std::uint16_t>(sym);
  }
  return seq;
}

inline std::vector<std::size_t> symbol_histogram(const ObservationSequence& seq) {
  std::vector<std::size_t> hist(seq.n_symbols, 0);
  for (auto s : seq.symbols) ++hist[s];
  return hist;
}

// Max-probability state path in log space. Ties at every backtrack step go to
// the lower state index.
inline StatePath viterbi(const ObservationSequence& seq, const HmmModel& model) {
  model.validate();
  if (seq.symbols.empty()) throw ArgumentError("empty observation sequence");
  const std::size_t K = model.n_states, T = seq.symbols.size();
  for (auto s : seq.symbols)
    if (s >= model.n_symbols) throw ArgumentError("symbol out of range for model");

  const double neg_inf = -std::numeric_limits<double>::infinity();
  auto safe_log = [&](double p) { return p > 0.0 ? std::log(p) : neg_inf; };

  std::vector<double> log_trans(K * K), log_emis(K * model.n_symbols), log_init(K);
  for (std::size_t i = 0; i < K; ++i) {
    log_init[i] = safe_log(model.init[i]);
    for (std::size_t j = 0; j < K; ++j) log_trans[i * K + j] = safe_log(model.trans_at(i, j));
    for (std::size_t m = 0; m < model.n_symbols; ++m)
      log_emis[i * model.n_symbols + m] = safe_log(model.emis_at(i, m));
  }

  std::vector<double> dp(K), dp_next(K);
  std::vector<std::uint8_t> back((T > 1 ? T - 1 : 0) * K);
  for (std::size_t j = 0; j < K; ++j)
    dp[j] = log_init[j] + log_emis[j * model.n_symbols + seq.symbols[0]];

  for (std::size_t t = 1; t < T; ++t) {
    const std::uint16_t obs = seq.symbols[t];
    for (std::size_t j = 0; j < K; ++j) {
      double best = neg_inf;
      std::uint8_t best_k = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const double cand = dp[k] + log_trans[k * K + j];
        if (cand > best) {
          best = cand;
          best_k = static_cast<std::uint8_t>(k);
        }
      }
      dp_next[j] = best + log_emis[j * model.n_symbols + obs];
      back[(t - 1) * K + j] = best_k;
    }
    dp.swap(dp_next);
  }

  double best = neg_inf;
  std::size_t best_j = 0;
  for (std::size_t j = 0; j < K; ++j)
    if (dp[j] > best) {
      best = dp[j];
      best_j = j;
    }
  if (best == neg_inf) throw DecodeError("all state paths have zero probability");

  StatePath path;
  path.states.resize(T);
  path.states[T - 1] = static_cast<std::uint8_t>(best_j);
  for (std::size_t t = T - 1; t > 0; --t)
    path.states[t - 1] = back[(t - 1) * K + path.states[t]];
  return path;
}

// Transition/emission estimation by direct counting along a decoded path.
// Rows without any observations fall back to uniform.
inline HmmModel estimate(const ObservationSequence& seq, const StatePath& path, std::size_t K) {
  if (seq.symbols.size() != path.states.size())
    throw ArgumentError("sequence and path lengths differ");
  if (seq.symbols.empty()) throw ArgumentError("empty sequence");
  const std::size_t M = seq.n_symbols, T = seq.symbols.size();
  for (auto s : path.states)
    if (s >= K) throw ArgumentError("state out of range");

  HmmModel m;
  m.n_states = K;
  m.n_symbols = M;
  m.trans.assign(K * K, 0.0);
  m.emis.assign(K * M, 0.0);
  m.init.assign(K, 0.0);

  std::vector<double> departures(K, 0.0), occupancy(K, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    m.trans[path.states[t] * K + path.states[t + 1]] += 1.0;
    departures[path.states[t]] += 1.0;
  }
  for (std::size_t t = 0; t < T; ++t) {
    m.emis[path.states[t] * M + seq.symbols[t]] += 1.0;
    occupancy[path.states[t]] += 1.0;
  }
  for (std::size_t i = 0; i < K; ++i) {
    if (departures[i] > 0.0)
      for (std::size_t j = 0; j < K; ++j) m.trans[i * K + j] /= departures[i];
    else
      for (std::size_t j = 0; j < K; ++j) m.trans[i * K + j] = 1.0 / K;
    if (occupancy[i] > 0.0)
      for (std::size_t s = 0; s < M; ++s) m.emis[i * M + s] /= occupancy[i];
    else
      for (std::size_t s = 0; s < M; ++s) m.emis[i * M + s] = 1.0 / M;
  }
  const double smooth = 1e-3;
  for (std::size_t i = 0; i < K; ++i)
    m.init[i] = ((i == path.states[0] ? 1.0 : 0.0) + smooth) / (1.0 + K * smooth);
  m.validate();
  return m;
}

namespace detail {

inline void renormalize_row(double* row, std::size_t n) {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += row[i];
  if (sum > 0.0)
    for (std::size_t i = 0; i < n; ++i) row[i] /= sum;
  else
    for (std::size_t i = 0; i < n; ++i) row[i] = 1.0 / n;
}

inline HmmModel floor_emissions(HmmModel m, double floor) {
  for (std::size_t i = 0; i < m.n_states; ++i) {
    for (std::size_t s = 0; s < m.n_symbols; ++s)
      m.emis_at(i, s) = std::max(m.emis_at(i, s), floor);
    renormalize_row(&m.emis[i * m.n_symbols], m.n_symbols);
  }
  return m;
}

}  // namespace detail

// Baum-Welch with per-step scaling. One M-step per E-step; stops early once
// successive log-likelihoods differ by less than tol. The history is the
// log-likelihood of the model entering each iteration.
inline std::pair<HmmModel, std::vector<double>> train(const ObservationSequence& seq,
                                                      const HmmModel& model0,
                                                      std::size_t max_iters, double tol) {
  model0.validate();
  if (seq.symbols.empty()) throw ArgumentError("empty sequence");
  for (auto s : seq.symbols)
    if (s >= model0.n_symbols) throw ArgumentError("symbol out of range for model");

  const std::size_t K = model0.n_states, M = model0.n_symbols, T = seq.symbols.size();
  HmmModel model = detail::floor_emissions(model0, kEmissionFloor);
  std::vector<double> history;
  if (max_iters == 0) return {std::move(model), std::move(history)};

  std::vector<double> alpha(T * K), beta(T * K), scale(T);

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    // forward, scaled
    double ll = 0.0;
    for (std::size_t i = 0; i < K; ++i)
      alpha[i] = model.init[i] * model.emis_at(i, seq.symbols[0]);
    scale[0] = std::accumulate(alpha.begin(), alpha.begin() + K, 0.0);
    if (!(scale[0] > 0.0) || !std::isfinite(scale[0]))
      throw NumericError("zero-probability observation during training");
    for (std::size_t i = 0; i < K; ++i) alpha[i] /= scale[0];
    ll += std::log(scale[0]);

    for (std::size_t t = 1; t < T; ++t) {
      double* cur = &alpha[t * K];
      const double* prev = &alpha[(t - 1) * K];
      for (std::size_t j = 0; j < K; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < K; ++i) acc += prev[i] * model.trans_at(i, j);
        cur[j] = acc * model.emis_at(j, seq.symbols[t]);
      }
      scale[t] = std::accumulate(cur, cur + K, 0.0);
      if (!(scale[t] > 0.0) || !std::isfinite(scale[t]))
        throw NumericError("zero-probability observation during training");
      for (std::size_t j = 0; j < K; ++j) cur[j] /= scale[t];
      ll += std::log(scale[t]);
    }

    // backward, sharing the forward scales
    for (std::size_t i = 0; i < K; ++i) beta[(T - 1) * K + i] = 1.0;
    for (std::size_t t = T - 1; t > 0; --t) {
      double* cur = &beta[(t - 1) * K];
      const double* next = &beta[t * K];
      for (std::size_t i = 0; i < K; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < K; ++j)
          acc += model.trans_at(i, j) * model.emis_at(j, seq.symbols[t]) * next[j];
        cur[i] = acc / scale[t];
      }
    }

    history.push_back(ll);

    // M-step
    std::vector<double> trans_num(K * K, 0.0), gamma_trans(K, 0.0);
    std::vector<double> emis_num(K * M, 0.0), gamma_total(K, 0.0);
    std::vector<double> gamma0(K, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < K; ++i) {
        const double g = alpha[t * K + i] * beta[t * K + i];
        emis_num[i * M + seq.symbols[t]] += g;
        gamma_total[i] += g;
        if (t == 0) gamma0[i] = g;
        if (t + 1 < T) gamma_trans[i] += g;
      }
      if (t + 1 < T) {
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j)
            trans_num[i * K + j] += alpha[t * K + i] * model.trans_at(i, j) *
                                    model.emis_at(j, seq.symbols[t + 1]) *
                                    beta[(t + 1) * K + j] / scale[t + 1];
      }
    }
    for (std::size_t i = 0; i < K; ++i) {
      if (gamma_trans[i] > 0.0)
        for (std::size_t j = 0; j < K; ++j) model.trans_at(i, j) = trans_num[i * K + j] / gamma_trans[i];
      detail::renormalize_row(&model.trans[i * K], K);
      if (gamma_total[i] > 0.0)
        for (std::size_t s = 0; s < M; ++s) model.emis_at(i, s) = emis_num[i * M + s] / gamma_total[i];
      detail::renormalize_row(&model.emis[i * M], M);
    }
    for (std::size_t i = 0; i < K; ++i) model.init[i] = gamma0[i];
    detail::renormalize_row(model.init.data(), K);

    if (history.size() >= 2 &&
        std::abs(history[history.size() - 1] - history[history.size() - 2]) < tol)
      break;
  }
  return {std::move(model), std::move(history)};
}

// Initial model from the slice histogram: the symbol range is cut into K
// contiguous blocks of roughly equal mass, each holding at least one occupied
// symbol. Emission rows are the histogram restricted to each block.
inline HmmModel initial_model(const std::vector<std::size_t>& hist, const SegConfig& cfg) {
  cfg.validate();
  const std::size_t K = cfg.n_states, M = hist.size();
  if (M < 2) throw ArgumentError("histogram needs >= 2 symbols");
  std::size_t distinct = 0;
  std::uint64_t total = 0;
  for (auto h : hist) {
    distinct += h > 0 ? 1 : 0;
    total += h;
  }
  if (total == 0) throw ArgumentError("empty histogram");
  if (distinct < K)
    throw DegenerateInputError("histogram has " + std::to_string(distinct) +
                               " distinct symbols, fewer than K=" + std::to_string(K));

  std::vector<std::size_t> occupied_after(M + 1, 0);
  for (std::size_t s = M; s > 0; --s)
    occupied_after[s - 1] = occupied_after[s] + (hist[s - 1] > 0 ? 1 : 0);

  std::vector<std::pair<std::size_t, std::size_t>> blocks;  // [lo, hi] inclusive
  std::size_t block_start = 0, occupied_in_block = 0;
  std::uint64_t cum = 0;
  for (std::size_t s = 0; s < M; ++s) {
    cum += hist[s];
    if (hist[s] > 0) ++occupied_in_block;
    if (blocks.size() + 1 == K) continue;  // last block runs to M-1
    const std::size_t remaining_blocks = K - blocks.size() - 1;
    const bool has_symbol = occupied_in_block >= 1;
    const bool must_cut = has_symbol && occupied_after[s + 1] == remaining_blocks;
    const bool want_cut = has_symbol && cum * K >= (blocks.size() + 1) * total &&
                          occupied_after[s + 1] >= remaining_blocks;
    if (must_cut || want_cut) {
      blocks.emplace_back(block_start, s);
      block_start = s + 1;
      occupied_in_block = 0;
    }
  }
  blocks.emplace_back(block_start, M - 1);

  HmmModel m;
  m.n_states = K;
  m.n_symbols = M;
  m.trans.assign(K * K, K == 1 ? 1.0 : 0.1 / (K - 1));
  for (std::size_t i = 0; i < K; ++i) m.trans[i * K + i] = K == 1 ? 1.0 : 0.9;
  m.emis.assign(K * M, 0.0);
  for (std::size_t i = 0; i < K; ++i) {
    double block_mass = 0.0;
    for (std::size_t s = blocks[i].first; s <= blocks[i].second; ++s) block_mass += hist[s];
    for (std::size_t s = blocks[i].first; s <= blocks[i].second; ++s)
      m.emis_at(i, s) = hist[s] / block_mass;
    for (std::size_t s = 0; s < M; ++s) m.emis_at(i, s) = std::max(m.emis_at(i, s), kEmissionFloor);
    detail::renormalize_row(&m.emis[i * M], M);
  }
  m.init.assign(K, 1.0 / K);
  m.validate();
  return m;
}

// Full per-slice pipeline: quantize, build the initial model, decode, re-
// estimate, train, decode again, then canonicalize labels so that label 0 is
// the darkest class (states ordered by emission-weighted mean symbol).
// The state count is clamped to the number of distinct symbols actually
// present so flat slices segment to a single class instead of failing.
inline std::vector<std::uint8_t> segment_slice(SliceView slice, const QuantizationParams& params,
                                               const SegConfig& cfg) {
  cfg.validate();
  ObservationSequence seq = quantize_slice(slice, params);
  const auto hist = symbol_histogram(seq);
  std::size_t distinct = 0;
  for (auto h : hist) distinct += h > 0 ? 1 : 0;

  SegConfig eff = cfg;
  eff.n_states = std::min(cfg.n_states, std::max<std::size_t>(1, distinct));

  const HmmModel m0 = initial_model(hist, eff);
  const StatePath path0 = viterbi(seq, m0);
  const HmmModel m1 = estimate(seq, path0, eff.n_states);
  auto [m2, ll_history] = train(seq, m1, eff.max_train_iters, eff.loglik_tolerance);
  (void)ll_history;
  const StatePath path = viterbi(seq, m2);

  // state -> canonical label, ordered by emission-weighted mean symbol
  const std::size_t K = eff.n_states;
  std::vector<double> mean_symbol(K, 0.0);
  for (std::size_t i = 0; i < K; ++i) {
    double mu = 0.0;
    for (std::size_t s = 0; s < m2.n_symbols; ++s) mu += m2.emis_at(i, s) * s;
    mean_symbol[i] = mu;
  }
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mean_symbol[a] < mean_symbol[b]; });
  std::vector<std::uint8_t> relabel(K);
  for (std::size_t rank = 0; rank < K; ++rank)
    relabel[order[rank]] = static_cast<std::uint8_t>(rank);

  std::vector<std::uint8_t> labels(path.states.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = relabel[path.states[i]];
  return labels;
}

// Per-slice segmentation over a whole slab. Each slice is independent and
// uses the same global quantization parameters, so the result does not
// depend on how slices were grouped into slabs.
inline LabelVolume segment_slab(const Volume& slab, const QuantizationParams& params,
                                const SegConfig& cfg) {
  slab.validate();
  LabelVolume out(slab.dims, slab.spacing);
  for (std::size_t z = 0; z < slab.dims[2]; ++z) {
    SliceView view{slab.slice(z).data(), slab.dims[0], slab.dims[1]};
    const auto labels = segment_slice(view, params, cfg);
    std::copy(labels.begin(), labels.end(), out.data.begin() + z * slab.slice_voxels());
  }
  return out;
}

// Global quantization bounds from the volume intensity range.
inline QuantizationParams global_quant_params(const Volume& v, std::size_t n_symbols) {
  auto [lo, hi] = v.min_max();
  QuantizationParams q;
  q.lo = lo;
  q.hi = hi > lo ? hi : lo + 1;
  q.n_symbols = n_symbols;
  return q;
}

}  // namespace vseg::hmm
