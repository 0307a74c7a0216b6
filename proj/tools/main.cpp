#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fmc/json_util.hpp"
#include "fmc/network.hpp"
#include "fmc/parallel.hpp"
#include "fmc/phantom.hpp"
#include "fmc/ssm.hpp"
#include "fmc/verify.hpp"
#include "fmc/wavelet.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace fmc;

namespace {

constexpr int kFailure = 1;

/// Fills a staging directory and moves it into place only when `fill` succeeds.
void write_directory(const fs::path& dir, const std::function<void(const fs::path&)>& fill) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    throw std::runtime_error("output " + dir.string() + " already exists and is not an empty directory");
  }
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  try {
    fs::create_directories(tmp);
    fill(tmp);
    if (fs::exists(dir)) fs::remove(dir);
    if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
    fs::rename(tmp, dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

// ---------------------------------------------------------------------------

int run_selfcheck(bool inject_fault) {
  inject_filter_fault(inject_fault);
  std::vector<verify::CheckResult> results;
  results.push_back(verify::perfect_reconstruction(100, 1));
  results.push_back(verify::energy_conservation(100, 1));
  results.push_back(verify::scan_oracle({1, 7, 64, 256}));
  results.push_back(verify::blocked_scan(1 << 14, 256));
  results.push_back(verify::combine("gradient-checks", verify::gradient_checks(16)));
  results.push_back(verify::hfr_properties(12));
  results.push_back(verify::metric_oracles(60, 12, 3));
  results.push_back(verify::volume_roundtrip());
  results.push_back(verify::checkpoint_roundtrip());
  inject_filter_fault(false);

  std::size_t passed = 0;
  for (const auto& r : results) {
    std::printf("%-4s  %-24s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    passed += r.passed;
  }
  std::printf("selfcheck: %zu/%zu properties passed\n", passed, results.size());
  if (passed != results.size()) {
    for (const auto& r : results)
      if (!r.passed) std::fprintf(stderr, "failed property: %s\n", r.name.c_str());
    return kFailure;
  }
  return 0;
}

struct GenOptions {
  std::string out;
  std::string config;
  std::size_t count = 8;
  std::vector<std::size_t> size;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> stages;
  std::optional<std::uint64_t> seed;
  std::optional<double> blur;
  std::optional<double> noise;
};

int run_gen_phantom(const GenOptions& o) {
  PhantomConfig cfg;
  if (!o.config.empty()) cfg = cli::load_run_config(o.config).phantom;
  if (o.size.size() == 1) cfg.extents = {o.size[0], o.size[0], o.size[0]};
  if (o.size.size() == 3) cfg.extents = {o.size[0], o.size[1], o.size[2]};
  if (o.classes) cfg.classes = *o.classes;
  if (o.stages) cfg.stages = *o.stages;
  if (o.seed) cfg.seed = *o.seed;
  if (o.blur) cfg.blur_sigma = *o.blur;
  if (o.noise) cfg.noise_sigma = *o.noise;
  write_dataset(o.out, cfg, o.count);
  std::printf("wrote %zu samples (%zux%zux%zu, %zu bodies) to %s\n", o.count, cfg.extents[0], cfg.extents[1],
              cfg.extents[2], cfg.classes, o.out.c_str());
  return 0;
}

struct TrainOptions {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainOptions& o) {
  cli::RunConfig rc;
  if (!o.config.empty()) rc = cli::load_run_config(o.config);
  if (!o.data.empty()) rc.data_path = o.data;
  if (!o.out.empty()) rc.out_path = o.out;
  if (o.epochs) rc.train.epochs = *o.epochs;
  if (o.seed) rc.train.seed = *o.seed;
  rc.train.validate();
  if (!rc.data_path) throw ConfigError("train: no dataset given (--data or paths.data)");
  if (!rc.out_path) throw ConfigError("train: no output directory given (--out or paths.out)");
  const fs::path out = *rc.out_path;
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
    throw std::runtime_error("output " + out.string() + " already exists and is not an empty directory");
  }

  const Dataset ds = read_dataset(*rc.data_path);
  const std::size_t classes = ds.config.classes + 1;
  if (!rc.num_classes_given) {
    rc.network.num_classes = classes;
  } else if (rc.network.num_classes != classes) {
    throw ConfigError("network.num_classes is " + std::to_string(rc.network.num_classes) + " but the dataset has " +
                      std::to_string(classes) + " classes including background");
  }
  rc.network.validate();

  std::string jsonl;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train(rc.network, rc.train, ds.samples, [&](const EpochLog& log) {
    jsonl += to_json(log).dump() + "\n";
    const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("epoch %3zu  step %5zu  loss %.5f  train_dsc %.4f  lr %.5f  (%.1fs)\n", log.epoch, log.step, log.loss,
                log.train_dsc, log.learning_rate, el);
    std::fflush(stdout);
  });
  const nlohmann::json summary{{"initial_dsc", result.initial_dsc}, {"final_dsc", result.final_dsc},
                               {"steps", result.steps}, {"class_weights", result.class_weights}};
  jsonl += nlohmann::json{{"summary", summary}}.dump() + "\n";

  Checkpoint ck;
  ck.config = rc.network;
  ck.params = result.params;
  ck.step = result.steps;
  ck.seed = rc.train.seed;
  ck.metrics = summary;
  write_directory(out, [&](const fs::path& dir) {
    save_checkpoint(dir / "checkpoint.fmck", ck);
    write_file_atomic(dir / "metrics.jsonl", jsonl);
    write_file_atomic(dir / "config.json", cli::to_json(rc).dump(2) + "\n");
  });
  std::printf("initial dsc %.4f  final dsc %.4f  steps %zu  -> %s\n", result.initial_dsc, result.final_dsc,
              result.steps, out.string().c_str());
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data, const std::string& report_path) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset ds = read_dataset(data);
  if (ds.config.classes + 1 != ck.config.num_classes) {
    throw ConfigError("checkpoint predicts " + std::to_string(ck.config.num_classes) + " classes but the dataset has " +
                      std::to_string(ds.config.classes + 1));
  }
  const auto scores = evaluate(ck.params, ck.config, ds.samples);
  nlohmann::json report = evaluation_report(scores, ds.samples.front().labels.spacing);
  report["checkpoint"] = {{"path", ckpt_path}, {"step", ck.step}, {"seed", ck.seed}};
  write_file_atomic(report_path, report.dump(2) + "\n");
  std::printf("mean dsc %.4f over %zu samples -> %s\n", report["mean_dsc"].get<double>(), scores.size(),
              report_path.c_str());
  return 0;
}

int run_dwt(const std::string& in, const std::string& out) {
  const Volume v = read_volume(in);
  const Tensor x = to_tensor(v);
  const WaveletSubbands bands = dwt3(x);
  const double err = max_abs_diff(idwt3(bands), x);
  const double e_in = squared_norm(x);
  nlohmann::json list = nlohmann::json::array();
  const std::array<double, 3> spacing{2 * v.spacing[0], 2 * v.spacing[1], 2 * v.spacing[2]};
  write_directory(out, [&](const fs::path& dir) {
    for (std::size_t k = 0; k < 8; ++k) {
      const std::string name(kBandNames[k]);
      write_volume(dir / (name + ".vvol"), intensity_volume(bands.bands[k], spacing));
      const Shape& s = bands.bands[k].shape();
      list.push_back({{"band", name}, {"file", name + ".vvol"}, {"dims", {s[1], s[2], s[3]}},
                      {"energy", squared_norm(bands.bands[k])}});
    }
    nlohmann::json report{{"input", in},
                          {"bands", list},
                          {"roundtrip_max_abs_error", err},
                          {"energy_relative_error", e_in > 0 ? std::abs(bands.energy() - e_in) / e_in : 0.0}};
    write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  });
  std::printf("8 bands written to %s, roundtrip max abs error %.3g\n", out.c_str(), err);
  return 0;
}

struct BenchOptions {
  std::vector<std::size_t> lengths{4096, 8192, 16384, 32768, 65536};
  std::size_t channels = 16;
  std::size_t state = 8;
  std::size_t repeats = 3;
  std::size_t block = 1024;
  std::string json;
};

int run_bench_scan(const BenchOptions& o) {
  if (o.repeats < 1) throw ConfigError("--repeats must be >= 1");
  if (o.block < 2) throw ConfigError("--block must be >= 2");
  const SsmParams p = SsmParams::random(o.channels, o.state, 17);
  nlohmann::json rows = nlohmann::json::array();
  std::printf("%10s %12s %12s %8s %12s %9s\n", "L", "seq_ms", "blocked_ms", "ratio", "max_diff", "verified");
  double prev = 0.0;
  std::size_t prev_len = 0;
  bool all_ok = true;
  for (std::size_t L : o.lengths) {
    const Tensor u = verify::random_tensor({L, o.channels}, L, -2, 2);
    double best_seq = 1e300, best_blk = 1e300;
    Tensor ys, yb;
    for (std::size_t r = 0; r < o.repeats; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      ys = selective_scan(u, p);
      best_seq = std::min(best_seq, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      t0 = std::chrono::steady_clock::now();
      yb = selective_scan_blocked(u, p, o.block);
      best_blk = std::min(best_blk, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    const double diff = max_abs_diff(ys, yb);
    const bool ok = diff <= 1e-10;
    all_ok = all_ok && ok;
    const bool doubled = prev_len && L == 2 * prev_len;
    const double ratio = doubled ? best_seq / prev : 0.0;
    nlohmann::json row{{"length", L}, {"sequential_ms", best_seq}, {"blocked_ms", best_blk}, {"max_abs_diff", diff},
                       {"verified", ok}};
    row["ratio_to_half"] = doubled ? nlohmann::json(ratio) : nlohmann::json(nullptr);
    rows.push_back(row);
    if (doubled) {
      std::printf("%10zu %12.3f %12.3f %8.3f %12.3g %9s\n", L, best_seq, best_blk, ratio, diff, ok ? "yes" : "NO");
    } else {
      std::printf("%10zu %12.3f %12.3f %8s %12.3g %9s\n", L, best_seq, best_blk, "-", diff, ok ? "yes" : "NO");
    }
    prev = best_seq;
    prev_len = L;
  }
  if (!o.json.empty()) {
    const nlohmann::json doc{{"channels", o.channels}, {"state_dim", o.state}, {"block", o.block},
                             {"repeats", o.repeats}, {"threads", thread_count()}, {"rows", rows}};
    write_file_atomic(o.json, doc.dump(2) + "\n");
  }
  return all_ok ? 0 : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FMC-Net volumetric segmentation engine"};
  app.require_subcommand(1);

  bool inject = false;
  auto* selfcheck = app.add_subcommand("selfcheck", "Run the invariant suite and print a pass/fail table");
  selfcheck->add_flag("--inject-fault", inject, "Corrupt one wavelet filter tap before checking");

  GenOptions gen;
  auto* gp = app.add_subcommand("gen-phantom", "Generate a synthetic stacked-body dataset");
  gp->add_option("--out", gen.out, "Output dataset directory")->required();
  gp->add_option("--count", gen.count, "Number of samples")->check(CLI::PositiveNumber);
  gp->add_option("--size", gen.size, "Extent (one value for a cube, or D H W)")->expected(1, 3);
  gp->add_option("--classes", gen.classes, "Number of bodies (labels 1..K)");
  gp->add_option("--stages", gen.stages, "Extents must divide by 2^stages");
  gp->add_option("--seed", gen.seed, "Dataset seed");
  gp->add_option("--blur", gen.blur, "Gaussian blur sigma in voxels");
  gp->add_option("--noise", gen.noise, "Additive noise sigma");
  gp->add_option("--config", gen.config, "Run config JSON (phantom section)");

  TrainOptions tr;
  auto* tp = app.add_subcommand("train", "Train on a phantom dataset");
  tp->add_option("--config", tr.config, "Run config JSON");
  tp->add_option("--data", tr.data, "Dataset directory");
  tp->add_option("--out", tr.out, "Output directory (checkpoint.fmck, metrics.jsonl)");
  tp->add_option("--epochs", tr.epochs, "Epochs");
  tp->add_option("--seed", tr.seed, "Training seed");

  std::string ckpt, data, report;
  auto* ep = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ep->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ep->add_option("--data", data, "Dataset directory")->required();
  ep->add_option("--report", report, "Report JSON path")->required();

  std::string dwt_in, dwt_out;
  auto* dp = app.add_subcommand("dwt", "Split an intensity volume into eight wavelet bands");
  dp->add_option("--in", dwt_in, "Input .vvol")->required();
  dp->add_option("--out", dwt_out, "Output directory")->required();

  BenchOptions bench;
  auto* bp = app.add_subcommand("bench-scan", "Time the selective scan over sequence lengths");
  bp->add_option("--length", bench.lengths, "Sequence lengths");
  bp->add_option("--channels", bench.channels, "Channels")->check(CLI::PositiveNumber);
  bp->add_option("--state", bench.state, "State dimension")->check(CLI::PositiveNumber);
  bp->add_option("--repeats", bench.repeats, "Repeats (minimum time is reported)");
  bp->add_option("--block", bench.block, "Block length of the prefix scan");
  bp->add_option("--json", bench.json, "Also write the table as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*selfcheck) return run_selfcheck(inject);
    if (*gp) return run_gen_phantom(gen);
    if (*tp) return run_train(tr);
    if (*ep) return run_eval(ckpt, data, report);
    if (*dp) return run_dwt(dwt_in, dwt_out);
    if (*bp) return run_bench_scan(bench);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return 2;
}
