#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fmc/network.hpp"
#include "fmc/phantom.hpp"
#include "fmc/rng.hpp"
#include "json.hpp"

using namespace fmc;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(FMC_CLI) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("fmc_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& name) const { return (root / name).string(); }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

nlohmann::json read_json(const std::string& path) { return nlohmann::json::parse(read_file(path)); }

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

const std::string kTinyConfig =
    R"({"network": {"stages": 2, "base_channels": 2, "state_dim": 4}, "train": {"epochs": 2, "seed": 3}})";

}  // namespace

TEST_CASE("selfcheck passes and names an injected fault") {
  const Run ok = run("selfcheck");
  CHECK(ok.code == 0);
  for (const char* name : {"perfect-reconstruction", "energy-conservation", "scan-oracle", "blocked-scan",
                           "gradient-checks", "hfr-properties", "metric-oracles"}) {
    CHECK(ok.output.find(name) != std::string::npos);
  }
  const Run bad = run("selfcheck --inject-fault");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("FAIL  perfect-reconstruction") != std::string::npos);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run("").code == 2);
  CHECK(run("gen-phantom --count 2").code == 2);  // missing --out
  CHECK(run("train --nope").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("gen-phantom") {
  const std::string a = ws() / "gen_a", b = ws() / "gen_b";
  REQUIRE(run("gen-phantom --out " + a + " --count 4 --seed 9").code == 0);
  REQUIRE(run("gen-phantom --out " + b + " --count 4 --seed 9").code == 0);
  CHECK(count_files(a, ".vvol") == 8);
  CHECK(fs::exists(fs::path(a) / "dataset.json"));
  for (const auto& e : fs::directory_iterator(a)) {
    CHECK(read_file(e.path()) == read_file(fs::path(b) / e.path().filename()));
  }
  const Run bad = run("gen-phantom --out " + (ws() / "gen_bad") + " --size 20");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("divisible by 8") != std::string::npos);
  CHECK_FALSE(fs::exists(ws() / "gen_bad"));
  CHECK_FALSE(fs::exists(ws() / "gen_bad.partial"));
  CHECK(run("gen-phantom --out " + a + " --count 1").code == 1);  // refuses to overwrite
}

TEST_CASE("train and eval") {
  const std::string data = ws() / "tiny";
  REQUIRE(run("gen-phantom --out " + data + " --count 2 --size 8 --classes 2 --stages 2 --seed 4").code == 0);
  const std::string cfg = ws() / "tiny.json";
  write_text(cfg, kTinyConfig);
  const std::string out = ws() / "run1", out2 = ws() / "run2";
  const Run r = run("train --config " + cfg + " --data " + data + " --out " + out);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  REQUIRE(run("train --config " + cfg + " --data " + data + " --out " + out2).code == 0);
  CHECK(read_file(fs::path(out) / "checkpoint.fmck") == read_file(fs::path(out2) / "checkpoint.fmck"));
  CHECK(read_file(fs::path(out) / "metrics.jsonl") == read_file(fs::path(out2) / "metrics.jsonl"));

  std::ifstream lines(fs::path(out) / "metrics.jsonl");
  std::vector<nlohmann::json> records;
  for (std::string line; std::getline(lines, line);) records.push_back(nlohmann::json::parse(line));
  REQUIRE(records.size() == 3);
  CHECK(records[0]["epoch"] == 0);
  CHECK(records[1].contains("train_dsc"));
  const double final_dsc = records[2]["summary"]["final_dsc"].get<double>();

  const std::string report = ws() / "report.json";
  REQUIRE(run("eval --ckpt " + out + "/checkpoint.fmck --data " + data + " --report " + report).code == 0);
  const auto rep = read_json(report);
  REQUIRE(rep["per_class"].size() == 2);
  double mean = 0.0;
  for (const auto& c : rep["per_class"]) {
    CHECK(c.contains("class"));
    CHECK(c.contains("dsc"));
    CHECK(c.contains("hd95"));
    mean += c["dsc"].get<double>();
  }
  CHECK(rep["mean_dsc"].get<double>() == doctest::Approx(mean / 2).epsilon(1e-12));
  CHECK(rep["mean_dsc"].get<double>() == doctest::Approx(final_dsc).epsilon(1e-12));
  CHECK(rep.contains("undefined_hd95"));
  CHECK(rep["spacing"].size() == 3);

  SUBCASE("rejected configs leave no output") {
    const std::string bad = ws() / "bad.json";
    write_text(bad, R"({"network": {"stages": 2, "widht": 3}})");
    const Run b = run("train --config " + bad + " --data " + data + " --out " + (ws() / "run_bad"));
    CHECK(b.code == 1);
    CHECK(b.output.find("unknown key \"widht\"") != std::string::npos);
    CHECK_FALSE(fs::exists(ws() / "run_bad"));
    write_text(bad, R"({"network": {"stages": 4}})");  // 8 is not divisible by 2^4
    CHECK(run("train --config " + bad + " --data " + data + " --out " + (ws() / "run_bad")).code == 1);
    CHECK_FALSE(fs::exists(ws() / "run_bad"));
  }
}

TEST_CASE("eval of a perfect-prediction checkpoint") {
  // Intensity equals the label; the stem copies it into channel 0, both wtu
  // fusions pass the encoder low band through, residual branches are zero and
  // the head scores class k with 2 k x - k^2, whose argmax is x itself.
  const fs::path data = ws() / "perfect_data";
  fs::create_directories(data);
  PhantomConfig pc;
  pc.extents = {8, 8, 8};
  pc.classes = 2;
  pc.stages = 2;
  nlohmann::json list = nlohmann::json::array();
  SplitMix64 rng(5);
  for (int i = 0; i < 2; ++i) {
    LabelMask m(8, 8, 8);
    for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.next() % 3);
    Tensor x({1, 8, 8, 8});
    for (std::size_t v = 0; v < m.size(); ++v) x[v] = m.labels[v];
    const std::string img = "00" + std::to_string(i) + "_img.vvol", lbl = "00" + std::to_string(i) + "_lbl.vvol";
    write_volume(data / img, intensity_volume(x));
    write_volume(data / lbl, label_volume(m));
    list.push_back({{"image", img}, {"label", lbl}});
  }
  write_file_atomic(data / "dataset.json",
                    nlohmann::json{{"config", to_json(pc)}, {"count", 2}, {"samples", list}}.dump());

  NetworkConfig cfg;
  cfg.stages = 2;
  cfg.base_channels = 2;
  cfg.num_classes = 3;
  cfg.state_dim = 2;
  Checkpoint ck;
  ck.config = cfg;
  ck.params = init_params(cfg, 1);
  fill_all(ck.params, 0.0);
  ck.params.at("stem.weight")[13] = 1.0;  // centre tap, output channel 0
  for (std::size_t s = 0; s < 2; ++s) {
    Tensor& w = ck.params.at("dec" + std::to_string(s) + ".wtu.fuse.weight");
    const std::size_t ce = w.dim(0), cin = w.dim(1);
    for (std::size_t c = 0; c < ce; ++c) w[c * cin + c] = 1.0;
  }
  Tensor& hw = ck.params.at("head0.weight");
  Tensor& hb = ck.params.at("head0.bias");
  for (std::size_t k = 0; k < 3; ++k) {
    hw[k * hw.dim(1)] = 2.0 * double(k);
    hb[k] = -double(k * k);
  }
  save_checkpoint(ws() / "perfect.fmck", ck);
  const std::string report = ws() / "perfect_report.json";
  const Run r = run("eval --ckpt " + (ws() / "perfect.fmck") + " --data " + data.string() + " --report " + report);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const auto rep = read_json(report);
  for (const auto& c : rep["per_class"]) {
    CHECK(c["dsc"].get<double>() == 1.0);
    CHECK(c["hd95"].get<double>() == 0.0);
  }
  CHECK(rep["mean_dsc"].get<double>() == 1.0);
}

TEST_CASE("dwt subcommand") {
  const std::string vol = ws() / "const.vvol";
  write_volume(vol, intensity_volume(Tensor({1, 4, 6, 8}, 2.5)));
  const std::string out = ws() / "bands";
  REQUIRE(run("dwt --in " + vol + " --out " + out).code == 0);
  const auto rep = read_json(out + "/report.json");
  CHECK(rep["roundtrip_max_abs_error"].get<double>() < 1e-10);
  REQUIRE(rep["bands"].size() == 8);
  for (const auto& b : rep["bands"]) {
    CHECK(b["dims"] == nlohmann::json({2, 3, 4}));
    const Volume v = read_volume(fs::path(out) / b["file"].get<std::string>());
    CHECK(v.dims == std::array<std::size_t, 3>{2, 3, 4});
    if (b["band"] != "lll") {
      for (float f : v.intensity) REQUIRE(f == 0.0f);
    }
  }
  write_volume(ws() / "odd.vvol", intensity_volume(Tensor({1, 4, 5, 4}, 1.0)));
  CHECK(run("dwt --in " + (ws() / "odd.vvol") + " --out " + (ws() / "odd_bands")).code == 1);
  CHECK_FALSE(fs::exists(ws() / "odd_bands"));
}

TEST_CASE("bench-scan") {
  const std::string json = ws() / "bench.json";
  const Run r = run("bench-scan --length 256 512 1024 --channels 4 --repeats 2 --block 64 --json " + json);
  REQUIRE(r.code == 0);
  const auto doc = read_json(json);
  REQUIRE(doc["rows"].size() == 3);
  for (const auto& row : doc["rows"]) CHECK(row["verified"] == true);
  CHECK(doc["rows"][0]["ratio_to_half"].is_null());
  CHECK(doc["rows"][1]["ratio_to_half"].is_number());
}
