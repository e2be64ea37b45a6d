// qprompt: quantize weight tensors into codebook blobs, inspect them, and run
// the synthetic prompt-tuning experiment.
//
// Failures print one line on stderr,
//   error code=<Name> exit=<n> message="<text>"
// with exit 2 for command-line misuse and exit 1 for everything else.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "io.hpp"
#include "qprompt/analyzer.hpp"
#include "qprompt/half.hpp"
#include "qprompt/harness.hpp"
#include "qprompt/packing.hpp"
#include "qprompt/quantizer.hpp"

using namespace qprompt;
using namespace qprompt::cli;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::uint64_t seed = 1000;
  bool verbose = false;
};

void log(const Globals& g, const std::string& msg) {
  if (g.verbose) std::cerr << "qprompt: " << msg << "\n";
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

void print_error(std::string_view code, int exit_code, const std::string& message) {
  std::cerr << "error code=" << code << " exit=" << exit_code << " message=" << quoted(message) << "\n";
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i]);
  return s;
}

const std::map<std::string, FloatFormat> kFormats{
    {"auto", FloatFormat::Auto}, {"f32", FloatFormat::F32}, {"text", FloatFormat::Text}};

/// The codebook exactly as a blob stores it: half-precision centers and
/// single-precision statistics. Rounding may merge neighbouring centers; they
/// are then pushed apart by one half-precision step to stay ascending.
Codebook storage_exact(const Codebook& cb) {
  Codebook out = cb;
  out.stats = {static_cast<float>(cb.stats.mu), static_cast<float>(cb.stats.sigma)};
  for (std::size_t i = 0; i < out.centers.size(); ++i) {
    out.centers[i] = round_to_half(cb.centers[i]);
    if (i > 0 && !(out.centers[i] > out.centers[i - 1])) {
      const std::uint16_t h = double_to_half(out.centers[i - 1]);
      // Next representable half above the previous center.
      const std::uint16_t up = (h & 0x8000u) ? (h == 0x8000u ? 0x0001u : static_cast<std::uint16_t>(h - 1))
                                             : static_cast<std::uint16_t>(h + 1);
      out.centers[i] = half_to_float(up);
    }
  }
  validate(out);
  return out;
}

/// Codebook for a tensor without spread: every value reconstructs to mu.
Codebook trivial_codebook(int bits, double mu) {
  Codebook cb;
  cb.bits = bits;
  cb.stats = {static_cast<float>(mu), 0.0};
  cb.centers.resize(codebook_size(bits));
  for (std::size_t i = 0; i < cb.centers.size(); ++i) cb.centers[i] = static_cast<double>(i);
  return cb;
}

// --- quantize -------------------------------------------------------------

struct QuantizeArgs {
  std::string in, out;
  std::string format = "auto";
  int bits = 1;
  int max_iter = 100;
  double tol = 1e-6;
};

int run_quantize(const Globals& g, const QuantizeArgs& a) {
  require_supported_bits(a.bits);
  const WeightTensor w = read_weights(a.in, kFormats.at(a.format));
  log(g, "read " + std::to_string(w.size()) + " values from " + a.in);
  const NormStats stats = compute_stats(w);

  Codebook cb;
  std::vector<Index> indices;
  if (stats.sigma == 0.0 || static_cast<float>(stats.sigma) == 0.0f) {
    std::cerr << "qprompt: warning: tensor has zero spread; writing a trivial codebook\n";
    cb = trivial_codebook(a.bits, stats.mu);
    indices.assign(w.size(), 0);
  } else {
    KMeansOptions opts;
    opts.max_iter = a.max_iter;
    opts.tol = a.tol;
    opts.seed = g.seed;
    cb = storage_exact(fit_codebook(w, a.bits, opts));
    indices = quantize(w, cb).indices;
  }
  write_bytes(a.out, serialize(cb, indices));

  const auto recon = dequantize(indices, cb);
  const double err = quant_error(w.view(), recon);
  Record r{{"bits", std::to_string(a.bits)},
           {"count", std::to_string(w.size())},
           {"shape", shape_string(w.shape)},
           {"mu", num(cb.stats.mu)},
           {"sigma", num(cb.stats.sigma)},
           {"centers", join(cb.centers)},
           {"quant_error", num(err)}};
  if (cb.stats.sigma > 0.0) r.emplace_back("quant_error_normalized", num(err / (cb.stats.sigma * cb.stats.sigma)));
  r.emplace_back("storage_bits", std::to_string(storage_bits(w.size(), a.bits)));
  r.emplace_back("blob_bytes", std::to_string(kBlobHeaderBytes + payload_bytes(w.size(), a.bits) +
                                              2 * codebook_size(a.bits)));
  std::cout << format_record(r);
  return 0;
}

// --- dequantize / inspect --------------------------------------------------

struct BlobArgs {
  std::string in, out;
  std::string format = "auto";
};

int run_dequantize(const Globals& g, const BlobArgs& a) {
  const auto blob = deserialize(read_bytes(a.in));
  log(g, "decoded " + std::to_string(blob.header.count) + " indices");
  write_weights(a.out, WeightTensor(dequantize(blob.indices, blob.codebook)), kFormats.at(a.format));
  return 0;
}

int run_inspect(const Globals&, const BlobArgs& a) {
  const auto bytes = read_bytes(a.in);
  const auto blob = deserialize(bytes);
  std::vector<std::uint64_t> hist(blob.codebook.size(), 0);
  for (Index i : blob.indices) ++hist[i];
  std::string usage;
  for (std::size_t i = 0; i < hist.size(); ++i) usage += (i ? "," : "") + std::to_string(hist[i]);
  std::cout << format_record({{"magic", "QPRM"},
                              {"version", std::to_string(blob.header.version)},
                              {"bits", std::to_string(blob.header.bits)},
                              {"count", std::to_string(blob.header.count)},
                              {"mu", num(blob.header.mu)},
                              {"sigma", num(blob.header.sigma)},
                              {"centers", join(blob.codebook.centers)},
                              {"index_counts", usage},
                              {"file_bytes", std::to_string(bytes.size())},
                              {"storage_bits", std::to_string(storage_bits(blob.header.count, blob.header.bits))}});
  return 0;
}

// --- pack / unpack ----------------------------------------------------------

struct PackArgs {
  std::string in, out;
  int bits = 1;
  std::uint64_t count = 0;
};

int run_pack(const Globals&, const PackArgs& a) {
  const auto idx = read_indices(a.in);
  write_bytes(a.out, pack(idx, a.bits));
  std::cout << format_record({{"count", std::to_string(idx.size())},
                              {"bits", std::to_string(a.bits)},
                              {"bytes", std::to_string(payload_bytes(idx.size(), a.bits))}});
  return 0;
}

int run_unpack(const Globals&, const PackArgs& a) {
  const auto idx = unpack(read_bytes(a.in), a.count, a.bits);
  if (a.out.empty()) {
    std::cout << indices_text(idx);
  } else {
    write_text(a.out, indices_text(idx));
  }
  return 0;
}

// --- storage ---------------------------------------------------------------

int run_storage(const Globals&, std::uint64_t n, int bits) {
  require_supported_bits(bits);
  const auto total = storage_bits(n, bits);
  std::cout << total << " bits (" << (total + 7) / 8 << " bytes)\n";
  return 0;
}

// --- train-toy -------------------------------------------------------------

struct TrainArgs {
  std::string mode = "baseline";
  int bits = 1;
  double noise_std = 0.0;
  bool noise_once = false;
  std::size_t seeds = 1;
  std::size_t epochs = 50;
  std::size_t jobs = 1;
  double lr = 0.003;
  double tau = 0.05;
  std::size_t batch = 32;
  std::size_t cac_interval = 50;
  double cac_threshold = 0.01;
  bool cac_error_gate = false;
  std::string out;
  std::string snapshot_dir;
};

int run_train(const Globals& g, const TrainArgs& a) {
  harness::MethodConfig base;
  base.mode = harness::parse_mode(a.mode);
  base.bits = a.bits;
  base.noise_std = a.noise_std;
  base.noise_per_step = !a.noise_once;
  base.epochs = a.epochs;
  base.lr = a.lr;
  base.tau = a.tau;
  base.batch = a.batch;
  base.scheduler.t_min = a.cac_interval;
  base.scheduler.kl_threshold = a.cac_threshold;
  base.scheduler.error_gate = a.cac_error_gate;
  harness::validate(base);
  if (a.cac_interval == 0) fail(ErrorCode::BadConfig, "CAC interval must be positive");
  if (!(a.cac_threshold > 0.0)) fail(ErrorCode::BadConfig, "CAC threshold must be positive");
  if (a.seeds == 0) fail(ErrorCode::BadConfig, "need at least one seed");

  std::vector<std::optional<harness::TrainReport>> reports(a.seeds);
  std::optional<Error> first_error;
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t s;
      {
        std::lock_guard lock(mu);
        if (next >= a.seeds || first_error) return;
        s = next++;
      }
      try {
        harness::TaskConfig tc;
        tc.seed = g.seed + s;
        harness::MethodConfig m = base;
        m.seed = s;
        auto r = harness::train(harness::build_task(tc), m);
        std::lock_guard lock(mu);
        reports[s] = std::move(r);
        log(g, "seed " + std::to_string(s) + " done");
      } catch (const Error& e) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = e;
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(a.jobs, a.seeds));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) throw *first_error;

  std::string csv = "seed,mode,bits,noise_std,epoch,base_acc,new_acc,h_mean,train_loss,quant_error,kld,variance\n";
  for (std::size_t s = 0; s < a.seeds; ++s) {
    for (const auto& e : reports[s]->epochs) {
      csv += std::to_string(s) + "," + a.mode + "," + std::to_string(a.bits) + "," + num(a.noise_std) + "," +
             std::to_string(e.epoch) + "," + num(e.base_acc) + "," + num(e.new_acc) + "," + num(e.h_mean) + "," +
             num(e.train_loss) + "," + num(e.quant_error) + "," + num(e.kld) + "," + num(e.variance) + "\n";
    }
    if (!a.snapshot_dir.empty()) {
      const auto& snaps = reports[s]->snapshots;
      for (std::size_t e = 0; e < snaps.size(); ++e) {
        char name[64];
        std::snprintf(name, sizeof name, "/seed%zu_epoch%03zu.f32", s, e);
        write_weights(a.snapshot_dir + name, WeightTensor(snaps[e]), FloatFormat::F32);
      }
    }
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out, csv);
  }

  // Mean of the last epoch across seeds.
  double base_acc = 0, new_acc = 0, h = 0;
  for (const auto& r : reports) {
    base_acc += r->final_epoch().base_acc;
    new_acc += r->final_epoch().new_acc;
    h += r->final_epoch().h_mean;
  }
  const double n = static_cast<double>(a.seeds);
  std::cerr << "final mean over " << a.seeds << " seed(s): base_acc=" << num(base_acc / n)
            << " new_acc=" << num(new_acc / n) << " h_mean=" << num(h / n) << "\n";
  return 0;
}

// --- analyze ---------------------------------------------------------------

struct AnalyzeArgs {
  std::vector<std::string> in;
  std::string format = "auto";
  std::string out;
  std::string hist_out;
  std::string codebook;
  std::size_t bins = 64;
  double outlier_k = 3.0;
};

int run_analyze(const Globals& g, const AnalyzeArgs& a) {
  SnapshotSeries s;
  for (std::size_t i = 0; i < a.in.size(); ++i) {
    s.snapshots.push_back(read_weights(a.in[i], kFormats.at(a.format)));
    s.labels.push_back(static_cast<std::int64_t>(i));
  }
  s.validate();
  log(g, "analyzing " + std::to_string(s.snapshots.size()) + " snapshot(s)");
  const auto var = variance_trend(s);
  std::vector<double> kld(s.snapshots.size(), 0.0);
  if (s.snapshots.size() > 1) {
    const auto k = a.codebook.empty() ? epoch_kld_trend(s, HistogramEvents{a.bins})
                                      : epoch_kld_trend(s, CodebookEvents{deserialize(read_bytes(a.codebook)).codebook});
    std::copy(k.begin(), k.end(), kld.begin() + 1);
  }
  std::string csv = "step,variance,kld,outlier_fraction\n";
  for (std::size_t i = 0; i < s.snapshots.size(); ++i) {
    const double frac = var[i] > 0.0 ? outlier_stats(s.snapshots[i], a.outlier_k).fraction : 0.0;
    csv += std::to_string(i) + "," + num(var[i]) + "," + num(kld[i]) + "," + num(frac) + "\n";
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out, csv);
  }
  if (!a.hist_out.empty()) {
    // Shared range so rows are comparable.
    double lo = s.snapshots[0].values[0], hi = lo;
    for (const auto& w : s.snapshots) {
      const auto [mn, mx] = std::minmax_element(w.values.begin(), w.values.end());
      lo = std::min(lo, *mn);
      hi = std::max(hi, *mx);
    }
    std::optional<std::pair<double, double>> range;
    if (hi > lo) range = std::pair{lo, hi};
    std::string hcsv = "step,bin,lo,hi,count\n";
    for (std::size_t i = 0; i < s.snapshots.size(); ++i) {
      const auto h = histogram(s.snapshots[i].view(), a.bins, range);
      for (std::size_t b = 0; b < a.bins; ++b) {
        hcsv += std::to_string(i) + "," + std::to_string(b) + "," + num(h.edge(b)) + "," + num(h.edge(b + 1)) +
                "," + std::to_string(h.counts[b]) + "\n";
      }
    }
    write_text(a.hist_out, hcsv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Codebook quantization for prompt weights"};
  app.name("qprompt");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Base seed; run s uses task seed SEED+s and method seed s")->capture_default_str();
  app.add_flag("-v,--verbose", g.verbose, "Progress messages on stderr");
  app.fallthrough();

  const auto formats = CLI::IsMember({"auto", "f32", "text"});
  const auto bit_widths = CLI::IsMember({1, 2, 4, 8});

  QuantizeArgs qa;
  auto* quantize_cmd = app.add_subcommand("quantize", "Fit a codebook and write a blob");
  quantize_cmd->add_option("--in", qa.in, "Weight file")->required();
  quantize_cmd->add_option("--out", qa.out, "Blob to write")->required();
  quantize_cmd->add_option("--format", qa.format, "Input format")->check(formats)->capture_default_str();
  quantize_cmd->add_option("--bits", qa.bits, "Bit width")->required()->check(bit_widths);
  quantize_cmd->add_option("--max-iter", qa.max_iter, "K-Means iteration cap")->check(CLI::PositiveNumber)->capture_default_str();
  quantize_cmd->add_option("--tol", qa.tol, "K-Means center-shift tolerance")->check(CLI::NonNegativeNumber)->capture_default_str();

  BlobArgs da;
  auto* dequantize_cmd = app.add_subcommand("dequantize", "Reconstruct weights from a blob");
  dequantize_cmd->add_option("--in", da.in, "Blob")->required();
  dequantize_cmd->add_option("--out", da.out, "Weight file to write")->required();
  dequantize_cmd->add_option("--format", da.format, "Output format")->check(formats)->capture_default_str();

  BlobArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Validate a blob and print its header");
  inspect_cmd->add_option("--in", ia.in, "Blob")->required();

  PackArgs pa;
  auto* pack_cmd = app.add_subcommand("pack", "Pack text indices into a bit stream");
  pack_cmd->add_option("--in", pa.in, "Index file, one per line")->required();
  pack_cmd->add_option("--out", pa.out, "Payload to write")->required();
  pack_cmd->add_option("--bits", pa.bits, "Bit width")->required()->check(bit_widths);

  PackArgs ua;
  auto* unpack_cmd = app.add_subcommand("unpack", "Unpack a bit stream into text indices");
  unpack_cmd->add_option("--in", ua.in, "Payload")->required();
  unpack_cmd->add_option("--out", ua.out, "Index file (stdout if omitted)");
  unpack_cmd->add_option("--bits", ua.bits, "Bit width")->required()->check(bit_widths);
  unpack_cmd->add_option("--count", ua.count, "Number of indices")->required();

  std::uint64_t storage_n = 0;
  int storage_b = 1;
  auto* storage_cmd = app.add_subcommand("storage", "Print the bit cost of N indices plus a codebook");
  storage_cmd->add_option("--n", storage_n, "Element count")->required();
  storage_cmd->add_option("--bits", storage_b, "Bit width")->required()->check(bit_widths);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train-toy", "Run the synthetic prompt-tuning experiment");
  train_cmd->add_option("--mode", ta.mode, "Method")
      ->check(CLI::IsMember({"baseline", "noise", "qat", "ptq"}))
      ->capture_default_str();
  train_cmd->add_option("--bits", ta.bits, "Bit width for qat/ptq")->check(bit_widths)->capture_default_str();
  train_cmd->add_option("--noise-std", ta.noise_std, "Gaussian noise std")->check(CLI::NonNegativeNumber)->capture_default_str();
  train_cmd->add_flag("--noise-once", ta.noise_once, "Perturb the initial prompt once instead of every forward pass");
  train_cmd->add_option("--seeds", ta.seeds, "Number of seeds")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--epochs", ta.epochs, "Epochs per run")->capture_default_str();
  train_cmd->add_option("--jobs", ta.jobs, "Seeds run in parallel")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr", ta.lr, "Learning rate")->capture_default_str();
  train_cmd->add_option("--tau", ta.tau, "Softmax temperature")->capture_default_str();
  train_cmd->add_option("--batch", ta.batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--cac-interval", ta.cac_interval, "Minimum steps between reclusterings")->capture_default_str();
  train_cmd->add_option("--cac-threshold", ta.cac_threshold, "KL trigger threshold")->capture_default_str();
  train_cmd->add_flag("--cac-error-gate", ta.cac_error_gate, "Also require the quantization error to have grown");
  train_cmd->add_option("--out", ta.out, "Per-epoch CSV (stdout if omitted)");
  train_cmd->add_option("--snapshot-dir", ta.snapshot_dir, "Write the prompt after every epoch here")
      ->check(CLI::ExistingDirectory);

  AnalyzeArgs aa;
  auto* analyze_cmd = app.add_subcommand("analyze", "Variance, KLD and outlier trend over snapshots");
  analyze_cmd->add_option("--in", aa.in, "Snapshot files in step order")->required()->take_all();
  analyze_cmd->add_option("--format", aa.format, "Input format")->check(formats)->capture_default_str();
  analyze_cmd->add_option("--out", aa.out, "Trend CSV (stdout if omitted)");
  analyze_cmd->add_option("--hist-out", aa.hist_out, "Per-step histogram CSV");
  analyze_cmd->add_option("--bins", aa.bins, "Histogram bins")->check(CLI::PositiveNumber)->capture_default_str();
  analyze_cmd->add_option("--outlier-k", aa.outlier_k, "Outlier threshold in std units")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  analyze_cmd->add_option("--codebook", aa.codebook, "Blob whose codebook defines the KLD events");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("Usage", kExitUsage, e.what());
    return kExitUsage;
  }

  try {
    if (*quantize_cmd) return run_quantize(g, qa);
    if (*dequantize_cmd) return run_dequantize(g, da);
    if (*inspect_cmd) return run_inspect(g, ia);
    if (*pack_cmd) return run_pack(g, pa);
    if (*unpack_cmd) return run_unpack(g, ua);
    if (*storage_cmd) return run_storage(g, storage_n, storage_b);
    if (*train_cmd) return run_train(g, ta);
    if (*analyze_cmd) return run_analyze(g, aa);
  } catch (const Error& e) {
    print_error(e.name(), kExitFailure, e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    print_error("Io", kExitFailure, e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
