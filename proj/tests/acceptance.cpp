// Acceptance run: one PASS/FAIL line per criterion at its stated tolerance.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "fmc/network.hpp"
#include "fmc/parallel.hpp"
#include "fmc/phantom.hpp"
#include "fmc/ssm.hpp"
#include "fmc/verify.hpp"

using namespace fmc;
using verify::CheckResult;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

int failures = 0;

void report(const CheckResult& r) {
  std::printf("%s  %-26s value=%-12.4g bound=%-10.4g %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
              r.value, r.threshold, r.seconds, r.detail.c_str());
  std::fflush(stdout);
  failures += !r.passed;
}

CheckResult timed(const std::function<CheckResult()>& run) {
  const auto t0 = Clock::now();
  CheckResult r = run();
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult perfect_reconstruction() {
  CheckResult r = timed([] { return verify::perfect_reconstruction(100, 2024); });
  const bool fast = r.seconds <= 5.0;
  r.detail += fmt(", runtime %.2fs (bound 5s)", r.seconds);
  r.passed = r.passed && fast;
  return r;
}

// Sequential scan time roughly doubles when L doubles.
CheckResult scan_scaling() {
  const std::size_t channels = 16, state = 8, repeats = 5;
  const SsmParams p = SsmParams::random(channels, state, 17);
  std::vector<double> ratios;
  double prev = 0.0, worst = 2.1;
  bool ok = true;
  std::string detail = "ratios";
  const auto t0 = Clock::now();
  for (std::size_t L = 4096; L <= 65536; L *= 2) {
    const Tensor u = verify::random_tensor({L, channels}, L, -2, 2);
    double best = 1e300;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto s = Clock::now();
      const Tensor y = selective_scan(u, p);
      best = std::min(best, seconds_since(s));
    }
    if (prev > 0.0) {
      const double ratio = best / prev;
      detail += fmt(" %.2f", ratio);
      ok = ok && ratio >= 1.6 && ratio <= 2.6;
      if (std::abs(ratio - 2.1) > std::abs(worst - 2.1)) worst = ratio;
    }
    prev = best;
  }
  CheckResult r{"scan-linear-scaling", ok, worst, 2.6, detail + " on L doubling 4096..65536 (each in [1.6, 2.6])",
                seconds_since(t0)};
  return r;
}

CheckResult gradient_suite() {
  const auto t0 = Clock::now();
  const auto parts = verify::gradient_checks(64);
  CheckResult r = verify::combine("gradient-checks", parts);
  r.seconds = seconds_since(t0);
  std::size_t passed = 0;
  std::string failed;
  for (const auto& p : parts) {
    passed += p.passed;
    if (!p.passed) failed += " " + p.name;
  }
  r.detail = fmt("%.0f/%.0f checks, suite %.1fs (bound 60s)", double(passed), double(parts.size()), r.seconds) +
             (failed.empty() ? "" : ", failed:" + failed);
  r.passed = r.passed && r.seconds <= 60.0;
  return r;
}

struct ToyRun {
  TrainResult result;
  double seconds;
  std::string checkpoint;
};

ToyRun toy_training(Variant variant, const std::vector<PhantomSample>& data, const PhantomConfig& pc) {
  NetworkConfig net;
  net.num_classes = pc.classes + 1;
  net.variant = variant;
  TrainConfig tc;
  tc.seed = 7;
  const auto t0 = Clock::now();
  ToyRun run{train(net, tc, data), 0.0, {}};
  run.seconds = seconds_since(t0);
  Checkpoint ck{net, run.result.params, run.result.steps, tc.seed,
                {{"initial_dsc", run.result.initial_dsc}, {"final_dsc", run.result.final_dsc}}};
  run.checkpoint = encode_checkpoint(ck);
  return run;
}

}  // namespace

int main() {
  std::printf("acceptance: %zu thread(s)\n", thread_count());
  report(perfect_reconstruction());
  report(timed([] { return verify::energy_conservation(100, 2024); }));
  report(timed([] { return verify::scan_oracle({1, 2, 7, 64, 100, 256}); }));
  report(timed([] { return verify::blocked_scan(65536, 1024); }));
  report(scan_scaling());
  report(gradient_suite());
  report(timed([] { return verify::hfr_properties(24); }));
  report(timed([] { return verify::metric_oracles(200, 16, 11); }));

  PhantomConfig pc;
  pc.seed = 7;
  const auto data = generate_dataset(pc, 8);
  const ToyRun full = toy_training(Variant::fmc, data, pc);
  {
    const auto& r = full.result;
    const double gain = r.final_dsc - r.initial_dsc;
    const bool ok = r.steps == 200 && r.final_dsc >= 0.80 && gain >= 0.3 && full.seconds <= 600.0;
    report({"toy-training", ok, r.final_dsc, 0.80,
            fmt("steps %.0f, initial %.4f, gain %.4f (bound 0.3)", double(r.steps), r.initial_dsc, gain) +
                fmt(", %.1fs (bound 600s)", full.seconds),
            full.seconds});
  }
  const ToyRun base = toy_training(Variant::baseline, data, pc);
  {
    NetworkConfig fc;
    fc.num_classes = pc.classes + 1;
    const std::size_t pf = parameter_count(init_params(fc, 7));
    NetworkConfig bc;
    bc.num_classes = pc.classes + 1;
    bc.variant = Variant::baseline;
    const std::size_t pb = parameter_count(init_params(bc, 7));
    const double rel = std::abs(double(pb) - double(pf)) / double(pf);
    const double margin = full.result.final_dsc - (base.result.final_dsc - 0.02);
    const bool ok = margin >= 0.0 && rel <= 0.10;
    report({"ablation-direction", ok, margin, 0.0,
            fmt("full %.4f, baseline %.4f", full.result.final_dsc, base.result.final_dsc) +
                fmt(", params %.0f vs %.0f (%.2f%%)", double(pf), double(pb), 100.0 * rel),
            base.seconds});
  }
  {
    const auto t0 = Clock::now();
    const ToyRun again = toy_training(Variant::fmc, data, pc);
    std::size_t same = 0;
    for (std::size_t i = 0; i < 10; ++i) same += full.result.step_losses.at(i) == again.result.step_losses.at(i);
    const bool bytes = full.checkpoint == again.checkpoint;
    report({"determinism", same == 10 && bytes, double(same), 10.0,
            fmt("%.0f/10 leading losses bit-identical, ", double(same)) +
                (bytes ? "checkpoints identical" : "checkpoints differ"),
            seconds_since(t0)});
  }
  report(verify::checkpoint_roundtrip());
  report(verify::volume_roundtrip());

  std::printf("acceptance: %d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
