#include "fmc/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <system_error>

#include "fmc/json_util.hpp"
#include "fmc/rng.hpp"

namespace fmc {

namespace fs = std::filesystem;

void PhantomConfig::validate() const {
  if (classes < 1) throw ConfigError("phantom: classes must be >= 1");
  if (classes > 254) throw ConfigError("phantom: classes must be <= 254");
  if (stages > 10) throw ConfigError("phantom: stages must be <= 10");
  const std::size_t divisor = std::size_t{1} << stages;
  static const char* axis[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (extents[a] == 0 || extents[a] % divisor != 0) {
      throw ConfigError("phantom: " + std::string(axis[a]) + " " + std::to_string(extents[a]) +
                        " is not divisible by " + std::to_string(divisor) + " (2^" + std::to_string(stages) + ")");
    }
  }
  if (extents[0] < min_depth()) {
    throw ConfigError("phantom: " + std::to_string(classes) + " bodies do not fit in depth " +
                      std::to_string(extents[0]) + "; required minimum depth is " + std::to_string(min_depth()));
  }
  if (extents[1] < 8 || extents[2] < 8) {
    throw ConfigError("phantom: height and width must be at least 8");
  }
  if (!(blur_sigma >= 0.0) || !(noise_sigma >= 0.0)) throw ConfigError("phantom: sigmas must be >= 0");
  if (!(spacing_jitter >= 0.0 && spacing_jitter <= 0.5)) {
    throw ConfigError("phantom: spacing_jitter must be in [0, 0.5]");
  }
  if (!(size_jitter >= 0.0 && size_jitter <= 0.05)) throw ConfigError("phantom: size_jitter must be in [0, 0.05]");
}

nlohmann::json to_json(const PhantomConfig& c) {
  return {{"extents", c.extents},           {"classes", c.classes},
          {"stages", c.stages},             {"spacing_jitter", c.spacing_jitter},
          {"size_jitter", c.size_jitter},   {"blur_sigma", c.blur_sigma},
          {"noise_sigma", c.noise_sigma},   {"seed", c.seed}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"extents", "classes", "stages", "spacing_jitter", "size_jitter", "blur_sigma",
                          "noise_sigma", "seed"},
                      "phantom");
  PhantomConfig c;
  read_optional(j, "extents", c.extents, "phantom");
  read_optional(j, "classes", c.classes, "phantom");
  read_optional(j, "stages", c.stages, "phantom");
  read_optional(j, "spacing_jitter", c.spacing_jitter, "phantom");
  read_optional(j, "size_jitter", c.size_jitter, "phantom");
  read_optional(j, "blur_sigma", c.blur_sigma, "phantom");
  read_optional(j, "noise_sigma", c.noise_sigma, "phantom");
  read_optional(j, "seed", c.seed, "phantom");
  c.validate();
  return c;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  SplitMix64 r(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1)));
  return r.next();
}

namespace {

// Separable gaussian blur with zero padding, in place on a [D,H,W] field.
void gaussian_blur(std::vector<double>& f, const std::array<std::size_t, 3>& dims, double sigma) {
  if (sigma <= 0.0) return;
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double norm = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    taps[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
    norm += taps[i + radius];
  }
  for (double& t : taps) t /= norm;
  const std::size_t strides[3] = {dims[1] * dims[2], dims[2], 1};
  std::vector<double> line, out;
  for (int axis = 0; axis < 3; ++axis) {
    const long n = static_cast<long>(dims[axis]);
    line.resize(n);
    out.resize(n);
    const std::size_t total = f.size();
    for (std::size_t base = 0; base < total; ++base) {
      // visit each line once, from its first element
      if ((base / strides[axis]) % dims[axis] != 0) continue;
      for (long q = 0; q < n; ++q) line[q] = f[base + q * strides[axis]];
      for (long q = 0; q < n; ++q) {
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t) {
          const long p = q + t;
          if (p >= 0 && p < n) acc += taps[t + radius] * line[p];
        }
        out[q] = acc;
      }
      for (long q = 0; q < n; ++q) f[base + q * strides[axis]] = out[q];
    }
  }
}

}  // namespace

PhantomSample generate(const PhantomConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.extents[0], H = cfg.extents[1], W = cfg.extents[2];
  const std::size_t K = cfg.classes;
  SplitMix64 rng(cfg.seed);

  LabelMask mask(D, H, W);
  const std::size_t slot = D / K;
  const std::size_t base = (D - K * slot) / 2;
  const std::size_t gap = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.3 * double(slot))));
  const std::size_t nz = slot - gap;
  const long max_shift = (static_cast<long>(gap) - 1) / 2;

  for (std::size_t k = 0; k < K; ++k) {
    const double shift_draw = rng.uniform(-1.0, 1.0);
    const double ay = 0.3 * double(H) * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
    const double ax = 0.3 * double(W) * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
    const double cy = 0.5 * double(H) + 0.1 * cfg.spacing_jitter * double(H) * rng.uniform(-1.0, 1.0);
    const double cx = 0.5 * double(W) + 0.1 * cfg.spacing_jitter * double(W) * rng.uniform(-1.0, 1.0);
    const long shift =
        std::clamp<long>(std::lround(shift_draw * cfg.spacing_jitter * double(slot)), -max_shift, max_shift);
    const std::size_t z0 = static_cast<std::size_t>(static_cast<long>(base + k * slot + gap / 2) + shift);
    const double cz = double(z0) + 0.5 * double(nz);
    const double az = 0.5 * double(nz);
    for (std::size_t z = z0; z < z0 + nz; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dz = (double(z) + 0.5 - cz) / az;
          const double dy = (double(y) + 0.5 - cy) / ay;
          const double dx = (double(x) + 0.5 - cx) / ax;
          if (dz * dz + dy * dy + dx * dx <= 1.0) mask.at(z, y, x) = static_cast<std::uint8_t>(k + 1);
        }
  }

  std::vector<double> field(D * H * W);
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = mask.labels[i] ? 1.0 : 0.0;
  gaussian_blur(field, cfg.extents, cfg.blur_sigma);
  if (cfg.noise_sigma > 0.0) {
    for (double& v : field) v += cfg.noise_sigma * rng.normal();
  }
  for (double& v : field) v = static_cast<double>(static_cast<float>(v));

  PhantomSample s;
  s.intensity = Tensor({1, D, H, W}, std::move(field));
  s.labels = std::move(mask);
  return s;
}

// ---------------------------------------------------------------------------

Volume intensity_volume(const Tensor& t, const std::array<double, 3>& spacing) {
  Volume v;
  v.kind = VolumeKind::intensity;
  v.spacing = spacing;
  if (t.rank() == 4 && t.dim(0) == 1) {
    v.dims = {t.dim(1), t.dim(2), t.dim(3)};
  } else if (t.rank() == 3) {
    v.dims = {t.dim(0), t.dim(1), t.dim(2)};
  } else {
    throw ShapeError("intensity volume: expected [D,H,W] or [1,D,H,W], got " + to_string(t.shape()));
  }
  v.intensity.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v.intensity[i] = static_cast<float>(t[i]);
  return v;
}

Volume label_volume(const LabelMask& mask) {
  Volume v;
  v.kind = VolumeKind::labels;
  v.dims = {mask.depth, mask.height, mask.width};
  v.spacing = mask.spacing;
  v.labels = mask.labels;
  return v;
}

Tensor to_tensor(const Volume& v) {
  if (v.kind != VolumeKind::intensity) throw FormatError("volume holds labels, not intensities");
  std::vector<double> data(v.intensity.begin(), v.intensity.end());
  return Tensor({1, v.dims[0], v.dims[1], v.dims[2]}, std::move(data));
}

LabelMask to_mask(const Volume& v) {
  if (v.kind != VolumeKind::labels) throw FormatError("volume holds intensities, not labels");
  LabelMask m(v.dims[0], v.dims[1], v.dims[2]);
  m.labels = v.labels;
  m.spacing = v.spacing;
  return m;
}

std::string encode_volume(const Volume& v) {
  const bool labels = v.kind == VolumeKind::labels;
  const std::size_t n = v.voxel_count();
  if ((labels ? v.labels.size() : v.intensity.size()) != n) {
    throw FormatError("volume payload does not match dims");
  }
  nlohmann::json header{{"dims", v.dims},
                        {"dtype", labels ? "uint8" : "float32"},
                        {"spacing", v.spacing},
                        {"semantic", labels ? "labels" : "intensity"}};
  std::string out = header.dump();
  out.push_back('\n');
  if (labels) {
    out.append(reinterpret_cast<const char*>(v.labels.data()), n);
  } else {
    out.reserve(out.size() + 4 * n);
    for (float f : v.intensity) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  return out;
}

Volume decode_volume(const std::string& bytes, std::optional<std::size_t> declared_classes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw FormatError("volume header: missing newline terminator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("volume header: ") + e.what());
  }
  try {
    reject_unknown_keys(header, {"dims", "dtype", "spacing", "semantic"}, "volume header");
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  Volume v;
  try {
    v.dims = header.at("dims").get<std::array<std::size_t, 3>>();
    v.spacing = header.at("spacing").get<std::array<double, 3>>();
    const auto dtype = header.at("dtype").get<std::string>();
    const auto semantic = header.at("semantic").get<std::string>();
    if (semantic == "labels" && dtype == "uint8") {
      v.kind = VolumeKind::labels;
    } else if (semantic == "intensity" && dtype == "float32") {
      v.kind = VolumeKind::intensity;
    } else {
      throw FormatError("volume header: unsupported dtype/semantic pair " + dtype + "/" + semantic);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("volume header: ") + e.what());
  }
  for (std::size_t d : v.dims) {
    if (d == 0) throw FormatError("volume header: dims must be positive");
  }
  for (double s : v.spacing) {
    if (!(s > 0.0)) throw FormatError("volume header: spacing must be positive");
  }
  const std::size_t n = v.voxel_count();
  const std::size_t elem = v.kind == VolumeKind::labels ? 1 : 4;
  const std::size_t expected = n * elem;
  const std::size_t actual = bytes.size() - nl - 1;
  if (actual < expected) {
    throw FormatError("payload short by " + std::to_string(expected - actual) + " bytes (expected " +
                      std::to_string(expected) + ", found " + std::to_string(actual) + ")");
  }
  if (actual > expected) {
    throw FormatError("payload has " + std::to_string(actual - expected) + " trailing bytes (expected " +
                      std::to_string(expected) + ")");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  if (v.kind == VolumeKind::labels) {
    v.labels.assign(p, p + n);
    if (declared_classes) {
      for (std::size_t i = 0; i < n; ++i) {
        if (v.labels[i] >= *declared_classes) {
          throw FormatError("label value " + std::to_string(v.labels[i]) + " at voxel " + std::to_string(i) +
                            " is outside the declared " + std::to_string(*declared_classes) + " classes");
        }
      }
    }
  } else {
    v.intensity.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(p[4 * i + b]) << (8 * b);
      std::memcpy(&v.intensity[i], &bits, 4);
    }
  }
  return v;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw std::runtime_error("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

void write_volume(const fs::path& path, const Volume& v) { write_file_atomic(path, encode_volume(v)); }

Volume read_volume(const fs::path& path, std::optional<std::size_t> declared_classes) {
  try {
    return decode_volume(read_file(path), declared_classes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<PhantomSample> generate_dataset(const PhantomConfig& cfg, std::size_t count) {
  std::vector<PhantomSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomConfig c = cfg;
    c.seed = sample_seed(cfg.seed, i);
    out.push_back(generate(c));
  }
  return out;
}

namespace {

std::string sample_stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

}  // namespace

void write_dataset(const fs::path& dir, const PhantomConfig& cfg, std::size_t count) {
  cfg.validate();
  if (count == 0) throw ConfigError("dataset: count must be >= 1");
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    throw std::runtime_error("output " + dir.string() + " already exists and is not an empty directory");
  }
  const auto samples = generate_dataset(cfg, count);
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  try {
    fs::create_directories(tmp);
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < count; ++i) {
      const std::string img = sample_stem(i) + "_img.vvol", lbl = sample_stem(i) + "_lbl.vvol";
      write_volume(tmp / img, intensity_volume(samples[i].intensity, samples[i].labels.spacing));
      write_volume(tmp / lbl, label_volume(samples[i].labels));
      list.push_back({{"image", img}, {"label", lbl}});
    }
    nlohmann::json manifest{{"config", to_json(cfg)}, {"count", count}, {"samples", list}};
    write_file_atomic(tmp / "dataset.json", manifest.dump(2) + "\n");
    if (fs::exists(dir)) fs::remove(dir);
    fs::rename(tmp, dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "dataset.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  reject_unknown_keys(manifest, {"config", "count", "samples"}, "dataset.json");
  Dataset ds;
  ds.config = phantom_config_from_json(manifest.at("config"));
  const auto& list = manifest.at("samples");
  if (!list.is_array() || list.empty()) throw FormatError("dataset.json: sample list is empty");
  for (const auto& entry : list) {
    reject_unknown_keys(entry, {"image", "label"}, "dataset.json sample");
    const Volume img = read_volume(dir / entry.at("image").get<std::string>());
    const Volume lbl = read_volume(dir / entry.at("label").get<std::string>(), ds.config.classes + 1);
    if (img.dims != lbl.dims) throw FormatError("image and label dims differ for " + entry.dump());
    PhantomSample s;
    s.intensity = to_tensor(img);
    s.labels = to_mask(lbl);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace fmc
