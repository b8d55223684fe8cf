#pragma once

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vseg/chunk.hpp"
#include "vseg/coordinator.hpp"
#include "vseg/crypto.hpp"
#include "vseg/errors.hpp"
#include "vseg/transport.hpp"
#include "vseg/volume.hpp"

extern char** environ;

namespace vseg::bench {

struct EncryptionRow {
  std::size_t k = 0;
  std::size_t chunks = 0;
  double total_ms = 0.0;      // median over repetitions, whole slice
  double per_chunk_us = 0.0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace detail

// Wall-clock AEAD cost of encrypting one slice at each grid order. Splitting
// and permutation are excluded; this times the cipher work alone.
inline std::vector<EncryptionRow> bench_encryption(const std::uint8_t* slice_bytes,
                                                   std::size_t width, std::size_t height,
                                                   std::size_t bytes_per_voxel,
                                                   const std::vector<std::size_t>& k_values,
                                                   std::size_t repetitions,
                                                   const crypto::SessionSecret& secret) {
  if (k_values.empty()) throw ArgumentError("no grid orders requested");
  if (repetitions < 1) throw ArgumentError("repetitions must be >= 1");
  std::vector<EncryptionRow> rows;
  for (const auto k : k_values) {
    const auto grid = crypto::make_grid(width, height, k);
    const auto chunks = crypto::split_slice(slice_bytes, grid, bytes_per_voxel, 0);
    crypto::NonceSequence nonces(crypto::NonceSequence::Direction::coordinator);
    std::vector<double> samples;
    samples.reserve(repetitions);
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& pc : chunks) {
        auto ec = crypto::encrypt_chunk(pc, secret, nonces.next());
        // keep the ciphertext alive so the optimizer cannot drop the work
        if (ec.ciphertext.empty()) throw NumericError("empty ciphertext");
      }
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    EncryptionRow row;
    row.k = k;
    row.chunks = grid.chunk_count();
    row.total_ms = detail::median(samples);
    row.per_chunk_us = row.total_ms * 1000.0 / row.chunks;
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json encryption_rows_to_json(const std::vector<EncryptionRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"k", r.k},
                   {"chunks", r.chunks},
                   {"total_ms", r.total_ms},
                   {"per_chunk_us", r.per_chunk_us}});
  return arr;
}

// Child worker process bound to an ephemeral port; the bound port is read
// back through --port-file.
class WorkerProcess {
 public:
  WorkerProcess(const std::string& binary, const std::string& password_file,
                const std::string& scratch_dir) {
    port_file_ = scratch_dir + "/worker_port_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter()++);
    std::vector<std::string> args = {binary,          "worker",       "serve",
                                     "--listen",      "127.0.0.1:0",  "--password-file",
                                     password_file,   "--port-file",  port_file_};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    if (posix_spawn(&pid_, binary.c_str(), nullptr, nullptr, argv.data(), environ) != 0)
      throw IoError("cannot spawn worker process " + binary);

    // wait for the child to publish its port
    for (int i = 0; i < 200; ++i) {
      std::ifstream in(port_file_);
      int port = 0;
      if (in >> port && port > 0) {
        port_ = static_cast<std::uint16_t>(port);
        return;
      }
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        throw IoError("worker process exited before binding");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    terminate();
    throw IoError("worker process never published its port");
  }

  WorkerProcess(const WorkerProcess&) = delete;
  WorkerProcess& operator=(const WorkerProcess&) = delete;
  ~WorkerProcess() { terminate(); }

  std::string endpoint() const { return "127.0.0.1:" + std::to_string(port_); }

  void terminate() {
    if (pid_ > 0) {
      ::kill(pid_, SIGTERM);
      int status = 0;
      for (int i = 0; i < 100; ++i) {
        if (waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
      if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
        pid_ = -1;
      }
    }
    std::error_code ec;
    std::filesystem::remove(port_file_, ec);
  }

 private:
  static std::atomic<unsigned>& counter() {
    static std::atomic<unsigned> c{0};
    return c;
  }

  pid_t pid_ = -1;
  std::uint16_t port_ = 0;
  std::string port_file_;
};

struct SpeedupRow {
  std::size_t workers = 0;
  double median_seconds = 0.0;
  double speedup = 1.0;
};

struct SpeedupReport {
  std::vector<SpeedupRow> rows;
  bool outputs_identical = true;
};

// End-to-end distributed wall time per worker count, run against freshly
// spawned local worker processes. speedup = T(1) / T(n).
inline SpeedupReport measure_speedup(const Volume& volume,
                                     const std::vector<std::size_t>& worker_counts,
                                     std::size_t repetitions, const std::string& worker_binary,
                                     const std::string& password,
                                     const hmm::SegConfig& seg, std::size_t grid_k,
                                     const std::string& scratch_dir,
                                     unsigned kdf_iterations = crypto::kDefaultKdfIterations) {
  if (worker_counts.empty()) throw ArgumentError("no worker counts requested");
  if (repetitions < 1) throw ArgumentError("repetitions must be >= 1");

  const std::string password_file = scratch_dir + "/speedup_password";
  {
    std::ofstream out(password_file, std::ios::trunc);
    out << password;
  }
  const auto quant = hmm::global_quant_params(volume, seg.n_symbols);
  const auto secret = crypto::derive_key(password, crypto::random_salt(), kdf_iterations);

  SpeedupReport report;
  std::vector<std::uint8_t> reference_labels;
  double t1 = 0.0;
  for (const auto n : worker_counts) {
    std::vector<std::unique_ptr<WorkerProcess>> procs;
    std::vector<std::string> endpoints;
    for (std::size_t i = 0; i < n; ++i) {
      procs.push_back(std::make_unique<WorkerProcess>(worker_binary, password_file, scratch_dir));
      endpoints.push_back(procs.back()->endpoint());
    }

    std::vector<double> samples;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      auto plan = net::plan_partition(volume.dims, n);
      plan.volume_digest = net::volume_digest(volume);
      for (auto& job : plan.jobs) {
        job.endpoint = endpoints[job.job_id % endpoints.size()];
        job.quant = quant;
        job.seg = seg;
        job.k = grid_k;
      }
      net::TcpTransport transport;
      const auto t0 = std::chrono::steady_clock::now();
      const LabelVolume labels = net::coordinator_run(volume, plan, secret, transport);
      const auto t_end = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double>(t_end - t0).count());
      if (reference_labels.empty())
        reference_labels = labels.data;
      else if (labels.data != reference_labels)
        report.outputs_identical = false;
    }

    SpeedupRow row;
    row.workers = n;
    row.median_seconds = detail::median(samples);
    if (t1 == 0.0) t1 = row.median_seconds;
    row.speedup = t1 / row.median_seconds;
    report.rows.push_back(row);
  }
  std::error_code ec;
  std::filesystem::remove(password_file, ec);
  return report;
}

inline nlohmann::json speedup_report_to_json(const SpeedupReport& report) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows)
    j["rows"].push_back({{"workers", r.workers},
                         {"median_seconds", r.median_seconds},
                         {"speedup", r.speedup}});
  j["outputs_identical"] = report.outputs_identical;
  return j;
}

}  // namespace vseg::bench
