// vseg: phantom generation, HMM volume segmentation (local or distributed
// over encrypted worker connections), evaluation, and crypto benchmarks.

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vseg/bench.hpp"
#include "vseg/coordinator.hpp"
#include "vseg/crypto.hpp"
#include "vseg/errors.hpp"
#include "vseg/evaluation.hpp"
#include "vseg/hmm.hpp"
#include "vseg/phantom.hpp"
#include "vseg/volume.hpp"
#include "vseg/worker.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(const vseg::Error& e) {
  switch (e.code()) {
    case vseg::Errc::argument:
    case vseg::Errc::geometry:
    case vseg::Errc::resolution:
    case vseg::Errc::config:
      return kExitUsage;
    case vseg::Errc::format:
    case vseg::Errc::io:
      return kExitIo;
    case vseg::Errc::assembly:
    case vseg::Errc::auth:
    case vseg::Errc::protocol:
    case vseg::Errc::connection:
      return kExitProtocol;
    case vseg::Errc::decode:
    case vseg::Errc::numeric:
    case vseg::Errc::degenerate_input:
      return kExitNumeric;
  }
  return kExitNumeric;
}

std::string read_password(const std::string& flag_path) {
  std::string path = flag_path;
  if (path.empty()) {
    const char* env = std::getenv("VSG_PASSWORD_FILE");
    if (env != nullptr) path = env;
  }
  if (path.empty())
    throw vseg::ConfigError("no password file (use --password-file or VSG_PASSWORD_FILE)");
  std::ifstream in(path);
  if (!in) throw vseg::IoError("cannot open password file " + path);
  std::string password((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  while (!password.empty() && (password.back() == '\n' || password.back() == '\r'))
    password.pop_back();
  if (password.empty()) throw vseg::ConfigError("password file " + path + " is empty");
  return password;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw vseg::IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

std::string seg_config_digest(const vseg::hmm::SegConfig& seg,
                              const vseg::hmm::QuantizationParams& quant, std::size_t k) {
  nlohmann::json j = {{"states", seg.n_states},
                      {"symbols", seg.n_symbols},
                      {"max_iters", seg.max_train_iters},
                      {"tol", seg.loglik_tolerance},
                      {"init_policy", seg.init_policy},
                      {"quant_lo", quant.lo},
                      {"quant_hi", quant.hi},
                      {"k", k}};
  return vseg::crypto::sha256_hex(j.dump());
}

// --- phantom -------------------------------------------------------------

struct PhantomArgs {
  std::string model;
  double spacing_mm = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string lesion_config;
};

int cmd_phantom(const PhantomArgs& args) {
  vseg::phantom::PhantomSpec spec;
  if (args.model == "nema") {
    spec = vseg::phantom::nema_spec(args.spacing_mm, args.noise_sigma, args.seed);
  } else {
    vseg::phantom::CirsLesionTable table;
    if (!args.lesion_config.empty()) {
      try {
        auto j = nlohmann::json::parse(vseg::detail::read_file(args.lesion_config));
        table = vseg::phantom::cirs_table_from_json(j);
      } catch (const nlohmann::json::exception& e) {
        throw vseg::ConfigError("bad lesion config: " + std::string(e.what()));
      }
    }
    spec = vseg::phantom::cirs_spec(args.spacing_mm, args.noise_sigma, args.seed, table);
  }
  auto [volume, truth] = vseg::phantom::generate_phantom(spec);
  std::filesystem::create_directories(args.out_dir);
  const std::string base = args.out_dir + "/" + args.model;
  vseg::write_volume(volume, base);
  vseg::phantom::write_truth(truth, base + ".truth.json");
  std::cout << "wrote " << base << ".raw (" << volume.dims[0] << "x" << volume.dims[1] << "x"
            << volume.dims[2] << "), " << base << ".json, " << base << ".truth.json\n";
  return kExitOk;
}

// --- segment ---------------------------------------------------------------

struct SegmentArgs {
  std::string mode;
  std::string in_path;
  std::string out_dir;
  std::string method = "hmm";
  std::size_t states = 3;
  std::size_t symbols = 32;
  std::size_t max_iters = 20;
  double tol = 1e-4;
  std::size_t split = 4;
  std::vector<std::string> workers;
  std::string password_file;
  bool tls = false;
  std::string tls_ca;
  std::string tls_cert;
  std::string tls_key;
  unsigned kdf_iterations = vseg::crypto::kDefaultKdfIterations;
};

int cmd_segment(const SegmentArgs& args) {
  const vseg::Volume volume = vseg::read_volume(args.in_path);
  vseg::hmm::SegConfig seg;
  seg.n_states = args.states;
  seg.n_symbols = args.symbols;
  seg.max_train_iters = args.max_iters;
  seg.loglik_tolerance = args.tol;
  seg.validate();
  const auto quant = vseg::hmm::global_quant_params(volume, seg.n_symbols);
  const std::string digest = seg_config_digest(seg, quant, args.split);

  std::filesystem::create_directories(args.out_dir);
  const std::string label_base = args.out_dir + "/labels";
  nlohmann::json manifest = {
      {"mode", args.mode},
      {"method", args.method},
      {"input", args.in_path},
      {"input_digest", vseg::net::volume_digest(volume)},
      {"config_digest", digest},
      {"states", seg.n_states},
      {"symbols", seg.n_symbols},
      {"split", args.split},
      {"chunks_per_slice", args.split * args.split},
      {"quant", {{"lo", quant.lo}, {"hi", quant.hi}}},
  };

  const auto t0 = std::chrono::steady_clock::now();
  vseg::LabelVolume labels;
  if (args.mode == "local") {
    if (args.method == "threshold") {
      labels = vseg::eval::iterative_threshold_baseline(volume);
      manifest["states"] = 2;
    } else {
      labels = vseg::hmm::segment_slab(volume, quant, seg);
    }
  } else {
    if (args.workers.empty())
      throw vseg::ArgumentError("distributed mode needs --workers host:port[,host:port...]");
    const std::string password = read_password(args.password_file);
    const auto secret =
        vseg::crypto::derive_key(password, vseg::crypto::random_salt(), args.kdf_iterations);
    auto plan = vseg::net::plan_partition(volume.dims, args.workers.size());
    plan.volume_digest = manifest["input_digest"];
    for (auto& job : plan.jobs) {
      job.endpoint = args.workers[job.job_id % args.workers.size()];
      job.quant = quant;
      job.seg = seg;
      job.k = args.split;
    }
    std::optional<vseg::net::TlsClientConfig> tls;
    if (args.tls) {
      if (args.tls_ca.empty()) throw vseg::ArgumentError("--tls requires --tls-ca");
      tls = vseg::net::TlsClientConfig{args.tls_ca, args.tls_cert, args.tls_key};
    } else {
      std::cerr << "warning: distributed transport without TLS (test mode); chunk payloads"
                   " remain AEAD-protected\n";
    }
    vseg::net::TcpTransport transport(tls);
    nlohmann::json partition = nlohmann::json::array();
    for (const auto& job : plan.jobs)
      partition.push_back(
          {{"job_id", job.job_id}, {"endpoint", job.endpoint}, {"z_range", {job.z0, job.z1}}});
    manifest["partition"] = partition;
    try {
      labels = vseg::net::coordinator_run(volume, plan, secret, transport);
    } catch (const vseg::net::RunFailed& e) {
      manifest["status"] = "failed";
      manifest["jobs"] = e.report()["jobs"];
      write_json(manifest, args.out_dir + "/manifest.json");
      std::cerr << "error: " << e.what() << " (partial report in " << args.out_dir
                << "/manifest.json)\n";
      return kExitProtocol;
    }
  }
  const auto t1 = std::chrono::steady_clock::now();

  const auto n_states =
      args.method == "threshold" ? 2u : static_cast<unsigned>(seg.n_states);
  vseg::write_labels(labels, label_base, 0, n_states, digest);
  manifest["status"] = "ok";
  manifest["seconds"] = std::chrono::duration<double>(t1 - t0).count();
  manifest["labels"] = label_base + ".raw";
  write_json(manifest, args.out_dir + "/manifest.json");
  std::cout << "wrote " << label_base << ".raw and manifest.json ("
            << manifest["seconds"].get<double>() << " s)\n";
  return kExitOk;
}

// --- worker ----------------------------------------------------------------

vseg::net::WorkerServer* g_server = nullptr;

struct WorkerArgs {
  std::string listen = "0.0.0.0:7200";
  std::string password_file;
  std::string tls_cert;
  std::string tls_key;
  std::string tls_client_ca;
  std::string port_file;
  unsigned kdf_iterations = vseg::crypto::kDefaultKdfIterations;
};

int cmd_worker(const WorkerArgs& args) {
  const std::string password = read_password(args.password_file);
  auto [host, port] = vseg::net::parse_listen_endpoint(args.listen);
  std::optional<vseg::net::TlsServerConfig> tls;
  if (!args.tls_cert.empty() || !args.tls_key.empty()) {
    if (args.tls_cert.empty() || args.tls_key.empty())
      throw vseg::ArgumentError("TLS needs both --tls-cert and --tls-key");
    tls = vseg::net::TlsServerConfig{args.tls_cert, args.tls_key, args.tls_client_ca};
  }
  vseg::net::WorkerServer server(host, port, password, tls, args.kdf_iterations);
  if (!args.port_file.empty()) {
    std::ofstream out(args.port_file, std::ios::trunc);
    out << server.port() << "\n";
  }
  std::cerr << "worker listening on " << host << ":" << server.port()
            << (tls ? " (TLS 1.3)" : " (plaintext transport; chunks AEAD-protected)") << "\n";
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server != nullptr) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server != nullptr) g_server->stop();
  });
  server.run();
  g_server = nullptr;
  return kExitOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string labels_path;
  std::string truth_path;
  std::string report_path;
  int lesion_label = -1;  // default: brightest class from the sidecar
};

int cmd_eval(const EvalArgs& args) {
  const auto lf = vseg::read_labels(args.labels_path);
  const auto truths = vseg::phantom::read_truth(args.truth_path);
  std::uint8_t lesion_label;
  if (args.lesion_label >= 0) {
    lesion_label = static_cast<std::uint8_t>(args.lesion_label);
  } else {
    if (lf.n_states < 1) throw vseg::FormatError("label sidecar lacks a state count");
    lesion_label = static_cast<std::uint8_t>(lf.n_states - 1);
  }
  const auto report = vseg::eval::evaluate_run(lf.labels, truths, lesion_label);
  const auto j = vseg::eval::report_to_json(report, lf.cfg_digest);
  if (!args.report_path.empty()) write_json(j, args.report_path);
  std::cout << vseg::eval::report_to_table(report);
  return kExitOk;
}

// --- bench -------------------------------------------------------------------

struct BenchCryptoArgs {
  std::vector<std::size_t> splits{1, 3, 5, 7, 9};
  std::size_t reps = 30;
  std::size_t width = 512;
  std::size_t height = 512;
  std::string report_path;
  std::uint64_t seed = 1;
};

int cmd_bench_crypto(const BenchCryptoArgs& args) {
  std::mt19937_64 rng(args.seed);
  std::vector<std::uint8_t> slice(args.width * args.height * 2);
  for (auto& b : slice) b = static_cast<std::uint8_t>(rng());
  const auto secret = vseg::crypto::derive_key("bench-password", vseg::crypto::random_salt());
  const auto rows = vseg::bench::bench_encryption(slice.data(), args.width, args.height, 2,
                                                  args.splits, args.reps, secret);
  const auto j = vseg::bench::encryption_rows_to_json(rows);
  if (!args.report_path.empty()) write_json(j, args.report_path);
  std::cout << "k  chunks  total_ms  per_chunk_us\n";
  for (const auto& r : rows)
    std::cout << r.k << "  " << r.chunks << "  " << r.total_ms << "  " << r.per_chunk_us << "\n";
  return kExitOk;
}

struct BenchSpeedupArgs {
  std::string in_path;
  std::vector<std::size_t> workers{1, 2, 4, 8};
  std::size_t reps = 3;
  std::size_t states = 3;
  std::size_t symbols = 32;
  std::size_t split = 4;
  std::string password_file;
  std::string report_path;
  std::string worker_binary;
};

int cmd_bench_speedup(const BenchSpeedupArgs& args, const char* argv0) {
  const vseg::Volume volume = vseg::read_volume(args.in_path);
  const std::string password = read_password(args.password_file);
  vseg::hmm::SegConfig seg;
  seg.n_states = args.states;
  seg.n_symbols = args.symbols;
  const std::string binary =
      args.worker_binary.empty()
          ? std::filesystem::absolute(std::filesystem::path(argv0)).string()
          : args.worker_binary;
  const std::string scratch = std::filesystem::temp_directory_path().string();
  const auto report = vseg::bench::measure_speedup(volume, args.workers, args.reps, binary,
                                                   password, seg, args.split, scratch);
  const auto j = vseg::bench::speedup_report_to_json(report);
  if (!args.report_path.empty()) write_json(j, args.report_path);
  std::cout << "workers  median_s  speedup\n";
  for (const auto& r : report.rows)
    std::cout << r.workers << "  " << r.median_seconds << "  " << r.speedup << "\n";
  std::cout << "outputs identical: " << (report.outputs_identical ? "yes" : "NO") << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"secure distributed 3D HMM segmentation"};
  app.require_subcommand(1);

  PhantomArgs phantom_args;
  auto* phantom_cmd = app.add_subcommand("phantom", "generate a synthetic phantom volume");
  phantom_cmd->add_option("model", phantom_args.model, "phantom model")
      ->check(CLI::IsMember({"nema", "cirs"}))
      ->required();
  phantom_cmd->add_option("--spacing-mm", phantom_args.spacing_mm, "voxel pitch in mm");
  phantom_cmd->add_option("--noise-sigma", phantom_args.noise_sigma, "Gaussian noise sigma");
  phantom_cmd->add_option("--seed", phantom_args.seed, "noise RNG seed");
  phantom_cmd->add_option("--out", phantom_args.out_dir, "output directory")->required();
  phantom_cmd->add_option("--lesion-config", phantom_args.lesion_config,
                          "JSON overriding the lesion diameter table (cirs)");

  SegmentArgs seg_args;
  auto* seg_cmd = app.add_subcommand("segment", "segment a volume");
  seg_cmd->add_option("mode", seg_args.mode, "execution mode")
      ->check(CLI::IsMember({"local", "distributed"}))
      ->required();
  seg_cmd->add_option("--in", seg_args.in_path, "input volume (.raw or basename)")->required();
  seg_cmd->add_option("--out", seg_args.out_dir, "output directory")->required();
  seg_cmd->add_option("--method", seg_args.method, "local method: hmm or threshold")
      ->check(CLI::IsMember({"hmm", "threshold"}));
  seg_cmd->add_option("--states", seg_args.states, "HMM state count K");
  seg_cmd->add_option("--symbols", seg_args.symbols, "quantization symbol count M");
  seg_cmd->add_option("--max-iters", seg_args.max_iters, "training iteration cap");
  seg_cmd->add_option("--tol", seg_args.tol, "training log-likelihood tolerance");
  seg_cmd->add_option("--split", seg_args.split, "chunk grid order k (k*k chunks per slice)");
  seg_cmd->add_option("--workers", seg_args.workers, "worker endpoints host:port")
      ->delimiter(',');
  seg_cmd->add_option("--password-file", seg_args.password_file, "shared secret file");
  seg_cmd->add_flag("--tls", seg_args.tls, "require TLS 1.3 to workers");
  seg_cmd->add_option("--tls-ca", seg_args.tls_ca, "trust root for worker certificates");
  seg_cmd->add_option("--tls-cert", seg_args.tls_cert, "client certificate (mutual TLS)");
  seg_cmd->add_option("--tls-key", seg_args.tls_key, "client key (mutual TLS)");
  seg_cmd->add_option("--kdf-iterations", seg_args.kdf_iterations, "PBKDF2 iteration count")
      ->check(CLI::Range(10000u, 10000000u));

  WorkerArgs worker_args;
  auto* worker_cmd = app.add_subcommand("worker", "worker node");
  auto* serve_cmd = worker_cmd->add_subcommand("serve", "serve segmentation jobs");
  serve_cmd->add_option("--listen", worker_args.listen, "listen endpoint host:port");
  serve_cmd->add_option("--password-file", worker_args.password_file, "shared secret file");
  serve_cmd->add_option("--tls-cert", worker_args.tls_cert, "server certificate PEM");
  serve_cmd->add_option("--tls-key", worker_args.tls_key, "server key PEM");
  serve_cmd->add_option("--tls-client-ca", worker_args.tls_client_ca,
                        "require client certificates signed by this CA");
  serve_cmd->add_option("--port-file", worker_args.port_file,
                        "write the bound port to this file after listen");
  serve_cmd->add_option("--kdf-iterations", worker_args.kdf_iterations,
                        "PBKDF2 iteration count")
      ->check(CLI::Range(10000u, 10000000u));
  worker_cmd->require_subcommand(1);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "measure lesion diameters against ground truth");
  eval_cmd->add_option("--labels", eval_args.labels_path, "label volume (.raw or basename)")
      ->required();
  eval_cmd->add_option("--truth", eval_args.truth_path, "ground truth JSON")->required();
  eval_cmd->add_option("--report", eval_args.report_path, "report JSON path");
  eval_cmd->add_option("--lesion-label", eval_args.lesion_label,
                       "label id of the lesion class (default: brightest)");

  BenchCryptoArgs bc_args;
  BenchSpeedupArgs bs_args;
  auto* bench_cmd = app.add_subcommand("bench", "benchmarks");
  auto* bc_cmd = bench_cmd->add_subcommand("crypto", "per-slice encryption time vs grid order");
  bc_cmd->add_option("--splits", bc_args.splits, "grid orders")->delimiter(',');
  bc_cmd->add_option("--reps", bc_args.reps, "repetitions (median reported)");
  bc_cmd->add_option("--width", bc_args.width, "slice width");
  bc_cmd->add_option("--height", bc_args.height, "slice height");
  bc_cmd->add_option("--report", bc_args.report_path, "report JSON path");
  bc_cmd->add_option("--seed", bc_args.seed, "slice content seed");
  auto* bs_cmd = bench_cmd->add_subcommand("speedup", "distributed wall time vs worker count");
  bs_cmd->add_option("--in", bs_args.in_path, "input volume")->required();
  bs_cmd->add_option("--workers", bs_args.workers, "worker counts")->delimiter(',');
  bs_cmd->add_option("--reps", bs_args.reps, "repetitions per count");
  bs_cmd->add_option("--states", bs_args.states, "HMM state count");
  bs_cmd->add_option("--symbols", bs_args.symbols, "symbol count");
  bs_cmd->add_option("--split", bs_args.split, "chunk grid order");
  bs_cmd->add_option("--password-file", bs_args.password_file, "shared secret file");
  bs_cmd->add_option("--report", bs_args.report_path, "report JSON path");
  bs_cmd->add_option("--worker-bin", bs_args.worker_binary,
                     "worker binary (default: this binary)");
  bench_cmd->require_subcommand(1);

  try {
    app.parse(argc, argv);
    if (*phantom_cmd) return cmd_phantom(phantom_args);
    if (*seg_cmd) return cmd_segment(seg_args);
    if (*worker_cmd) return cmd_worker(worker_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*bc_cmd) return cmd_bench_crypto(bc_args);
    if (*bs_cmd) return cmd_bench_speedup(bs_args, argv[0]);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const vseg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
