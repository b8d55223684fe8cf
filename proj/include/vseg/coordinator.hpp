#pragma once

#include <algorithm>
#include <chrono>
#include <climits>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vseg/chunk.hpp"
#include "vseg/crypto.hpp"
#include "vseg/errors.hpp"
#include "vseg/hmm.hpp"
#include "vseg/protocol.hpp"
#include "vseg/transport.hpp"
#include "vseg/volume.hpp"

namespace vseg::net {

enum class JobStatus { pending, sent, running, done, failed, reassigned };

struct SlabJob {
  std::uint32_t job_id = 0;
  std::string endpoint;
  std::size_t z0 = 0, z1 = 0;
  hmm::QuantizationParams quant;
  hmm::SegConfig seg;
  std::size_t k = 4;

  std::size_t n_slices() const { return z1 - z0; }
};

struct WorkPlan {
  std::string volume_digest;
  std::vector<SlabJob> jobs;

  void validate(std::size_t nz) const {
    if (jobs.empty()) throw ArgumentError("work plan has no jobs");
    std::size_t expect = 0;
    std::size_t min_sz = SIZE_MAX, max_sz = 0;
    for (const auto& j : jobs) {
      if (j.z0 != expect) throw ArgumentError("work plan slabs are not contiguous");
      if (j.z1 <= j.z0) throw ArgumentError("work plan has an empty slab");
      min_sz = std::min(min_sz, j.n_slices());
      max_sz = std::max(max_sz, j.n_slices());
      expect = j.z1;
    }
    if (expect != nz) throw ArgumentError("work plan does not cover the volume");
    if (max_sz - min_sz > 1) throw ArgumentError("work plan slabs are not balanced");
  }
};

// Balanced contiguous axial slabs, one per worker. With fewer slices than
// workers, the surplus workers receive nothing.
inline WorkPlan plan_partition(const Dims& dims, std::size_t n_workers) {
  if (n_workers < 1) throw ArgumentError("need at least one worker");
  const std::size_t nz = dims[2];
  if (nz < 1) throw ArgumentError("volume has no slices");
  const std::size_t n_jobs = std::min(nz, n_workers);
  const std::size_t base = nz / n_jobs, rem = nz % n_jobs;

  WorkPlan plan;
  std::size_t z = 0;
  for (std::size_t i = 0; i < n_jobs; ++i) {
    SlabJob job;
    job.job_id = static_cast<std::uint32_t>(i);
    job.z0 = z;
    job.z1 = z + base + (i < rem ? 1 : 0);
    z = job.z1;
    plan.jobs.push_back(job);
  }
  return plan;
}

inline std::string volume_digest(const Volume& v) {
  auto bytes = volume_le_bytes(v);
  nlohmann::json hdr = {{"dims", {v.dims[0], v.dims[1], v.dims[2]}},
                        {"spacing_mm", {v.spacing.dx, v.spacing.dy, v.spacing.dz}}};
  const std::string prefix = hdr.dump();
  bytes.insert(bytes.begin(), prefix.begin(), prefix.end());
  auto d = crypto::sha256(bytes.data(), bytes.size());
  return crypto::hex(d.data(), d.size());
}

struct CoordinatorOptions {
  unsigned max_retries = 2;          // extra attempts after the first
  int base_timeout_s = 60;           // job deadline = base + per_slice * slices
  int per_slice_timeout_s = 2;
  int connect_timeout_ms = 10000;
};

// Raised when jobs exhaust their retry budget; carries the partial-result
// report for the CLI manifest.
class RunFailed : public Error {
 public:
  RunFailed(const std::string& what, nlohmann::json report)
      : Error(Errc::connection, what), report_(std::move(report)) {}
  const nlohmann::json& report() const { return report_; }

 private:
  nlohmann::json report_;
};

namespace detail {

struct JobRecord {
  JobStatus status = JobStatus::pending;
  std::uint32_t current_attempt = 0;
  std::string last_error;
};

struct RunState {
  std::mutex mu;
  std::vector<JobRecord> records;
  std::map<std::string, int> load;  // endpoint -> active attempts
  std::vector<std::string> endpoints;

  std::string pick_least_loaded() {
    std::lock_guard<std::mutex> lock(mu);
    std::string best;
    int best_load = INT_MAX;
    for (const auto& ep : endpoints) {
      const int l = load[ep];
      if (l < best_load) {
        best_load = l;
        best = ep;
      }
    }
    return best;
  }
};

// One attempt of one job over a fresh connection. Throws on any failure.
inline void attempt_job(const Volume& volume, const SlabJob& job, std::uint32_t attempt,
                        const crypto::SessionSecret& secret, Channel& ch, int timeout_ms,
                        LabelVolume& out, RunState& state) {
  send_frame(ch, encode_hello(Hello{kProtocolVersion, "coordinator", {}}));
  Frame reply = recv_frame(ch, timeout_ms);
  if (reply.type == MsgType::error) {
    const auto err = decode_error(reply);
    if (err.code == "auth") throw AuthError("worker rejected session: " + err.message);
    throw ProtocolError(ProtocolError::Kind::malformed, "worker error: " + err.message);
  }
  if (reply.type != MsgType::hello)
    throw ProtocolError(ProtocolError::Kind::malformed, "expected HELLO reply");
  const Hello hello = decode_hello(reply);
  if (hello.proto != kProtocolVersion || hello.role != "worker")
    throw ProtocolError(ProtocolError::Kind::malformed, "peer is not a compatible worker");

  JobHeader header;
  header.job_id = job.job_id;
  header.attempt = attempt;
  header.z0 = job.z0;
  header.z1 = job.z1;
  header.dims = volume.dims;
  header.spacing = volume.spacing;
  header.quant = job.quant;
  header.seg = job.seg;
  header.k = job.k;
  header.chunk_count = job.n_slices() * job.k * job.k;
  send_frame(ch, encode_job_header(header));

  // split + encrypt every slice of the slab, then ship in permuted order
  const auto grid = crypto::make_grid(volume.dims[0], volume.dims[1], job.k);
  crypto::NonceSequence nonces(crypto::NonceSequence::Direction::coordinator);
  std::vector<crypto::EncryptedChunk> encrypted;
  encrypted.reserve(header.chunk_count);
  std::vector<std::uint8_t> slice_bytes(volume.slice_voxels() * 2);
  for (std::size_t z = job.z0; z < job.z1; ++z) {
    const auto slice = volume.slice(z);
    for (std::size_t i = 0; i < slice.size(); ++i) {
      slice_bytes[2 * i] = static_cast<std::uint8_t>(slice[i] & 0xff);
      slice_bytes[2 * i + 1] = static_cast<std::uint8_t>(slice[i] >> 8);
    }
    auto chunks = crypto::split_slice(slice_bytes.data(), grid, 2, static_cast<std::uint32_t>(z));
    for (auto& pc : chunks) encrypted.push_back(crypto::encrypt_chunk(pc, secret, nonces.next()));
  }
  const auto perm = crypto::permute_order(encrypted.size(), secret);
  for (const auto idx : perm) {
    Frame f;
    f.type = MsgType::chunk;
    f.payload = crypto::encode_chunk(encrypted[idx]);
    send_frame(ch, f);
  }
  send_frame(ch, encode_end(MsgType::job_end, job.job_id, attempt));

  // await the encrypted label chunks
  Frame rf = recv_frame(ch, timeout_ms);
  if (rf.type == MsgType::error) {
    const auto err = decode_error(rf);
    if (err.code == "auth") throw AuthError("worker reported auth failure: " + err.message);
    throw ProtocolError(ProtocolError::Kind::malformed, "worker error: " + err.message);
  }
  if (rf.type != MsgType::result_header)
    throw ProtocolError(ProtocolError::Kind::malformed, "expected RESULT_HEADER");
  const ResultHeader rh = decode_result_header(rf);
  if (rh.job_id != job.job_id || rh.attempt != attempt)
    throw ProtocolError(ProtocolError::Kind::malformed, "result for a different job/attempt");
  if (rh.z0 != job.z0 || rh.z1 != job.z1 || rh.k != job.k ||
      rh.chunk_count != header.chunk_count)
    throw ProtocolError(ProtocolError::Kind::malformed, "result geometry mismatch");

  std::vector<crypto::PlainChunk> label_chunks;
  label_chunks.reserve(rh.chunk_count);
  for (std::size_t i = 0; i < rh.chunk_count; ++i) {
    Frame cf = recv_frame(ch, timeout_ms);
    if (cf.type == MsgType::error) {
      const auto err = decode_error(cf);
      if (err.code == "auth") throw AuthError(err.message);
      throw ProtocolError(ProtocolError::Kind::malformed, "worker error: " + err.message);
    }
    if (cf.type != MsgType::result_chunk)
      throw ProtocolError(ProtocolError::Kind::malformed, "expected RESULT_CHUNK");
    const auto ec = crypto::decode_chunk(cf.payload.data(), cf.payload.size());
    label_chunks.push_back(crypto::decrypt_chunk(ec, secret));
  }
  const Frame endf = recv_frame(ch, timeout_ms);
  if (endf.type != MsgType::result_end)
    throw ProtocolError(ProtocolError::Kind::malformed, "expected RESULT_END");

  // place label slices; superseded attempts must never write
  const auto label_grid = crypto::make_grid(volume.dims[0], volume.dims[1], job.k);
  std::vector<std::vector<crypto::PlainChunk>> per_slice(job.n_slices());
  for (auto& pc : label_chunks) {
    if (pc.id.slice_index < job.z0 || pc.id.slice_index >= job.z1)
      throw ProtocolError(ProtocolError::Kind::malformed, "result slice outside the job range");
    per_slice[pc.id.slice_index - job.z0].push_back(std::move(pc));
  }
  std::lock_guard<std::mutex> lock(state.mu);
  auto& record = state.records[job.job_id];
  if (record.status == JobStatus::done || record.current_attempt != attempt)
    return;  // a newer attempt owns this job now
  for (std::size_t zi = 0; zi < job.n_slices(); ++zi) {
    const auto bytes = crypto::reassemble(per_slice[zi], label_grid, 1);
    std::copy(bytes.begin(), bytes.end(),
              out.data.begin() + (job.z0 + zi) * out.slice_voxels());
  }
  record.status = JobStatus::done;
}

}  // namespace detail

// Runs the whole plan: encrypt, distribute, collect, decrypt, reassemble.
// The output is bit-identical to running segment_slab locally per slab.
inline LabelVolume coordinator_run(const Volume& volume, const WorkPlan& plan,
                                   const crypto::SessionSecret& secret, Transport& transport,
                                   const CoordinatorOptions& opts = {}) {
  volume.validate();
  plan.validate(volume.dims[2]);
  LabelVolume out(volume.dims, volume.spacing);

  detail::RunState state;
  state.records.resize(plan.jobs.size());
  for (const auto& j : plan.jobs) {
    if (j.endpoint.empty()) throw ArgumentError("job without a worker endpoint");
    if (std::find(state.endpoints.begin(), state.endpoints.end(), j.endpoint) ==
        state.endpoints.end())
      state.endpoints.push_back(j.endpoint);
  }

  auto run_job = [&](const SlabJob& job) {
    const int timeout_ms =
        (opts.base_timeout_s + opts.per_slice_timeout_s * static_cast<int>(job.n_slices())) * 1000;
    std::string endpoint = job.endpoint;
    for (std::uint32_t attempt = 0;; ++attempt) {
      {
        std::lock_guard<std::mutex> lock(state.mu);
        state.records[job.job_id].current_attempt = attempt;
        state.records[job.job_id].status = attempt == 0 ? JobStatus::sent : JobStatus::reassigned;
        state.load[endpoint] += 1;
      }
      std::string error_text;
      bool auth_failed = false;
      try {
        auto ch = transport.connect(endpoint);
        {
          std::lock_guard<std::mutex> lock(state.mu);
          state.records[job.job_id].status = JobStatus::running;
        }
        detail::attempt_job(volume, job, attempt, secret, *ch, timeout_ms, out, state);
        ch->close();
      } catch (const AuthError& e) {
        auth_failed = true;
        error_text = e.what();
      } catch (const Error& e) {
        error_text = e.what();
      }
      {
        std::lock_guard<std::mutex> lock(state.mu);
        state.load[endpoint] -= 1;
        auto& record = state.records[job.job_id];
        if (record.status == JobStatus::done) return;
        record.last_error = error_text;
        // authentication failures are terminal: never silently accepted,
        // never retried with the same secret
        if (auth_failed || attempt >= opts.max_retries) {
          record.status = JobStatus::failed;
          return;
        }
      }
      endpoint = state.pick_least_loaded();
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(plan.jobs.size());
  for (const auto& job : plan.jobs) threads.emplace_back([&run_job, &job] { run_job(job); });
  for (auto& t : threads) t.join();

  nlohmann::json report;
  report["jobs"] = nlohmann::json::array();
  bool all_done = true;
  for (std::size_t i = 0; i < plan.jobs.size(); ++i) {
    const auto& r = state.records[i];
    all_done = all_done && r.status == JobStatus::done;
    report["jobs"].push_back({{"job_id", plan.jobs[i].job_id},
                              {"z_range", {plan.jobs[i].z0, plan.jobs[i].z1}},
                              {"status", r.status == JobStatus::done ? "done" : "failed"},
                              {"attempts", r.current_attempt + 1},
                              {"error", r.last_error}});
  }
  if (!all_done) throw RunFailed("distributed run failed on one or more jobs", report);
  return out;
}

}  // namespace vseg::net
