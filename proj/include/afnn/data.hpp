#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afnn/image_io.hpp"
#include "afnn/metrics.hpp"
#include "afnn/rng.hpp"
#include "afnn/tensor.hpp"

namespace afnn {

using metrics::BinaryMask;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One fundus-like image ([3,H,W], values in [0,1]) with its two masks.
struct Sample {
  Tensor<float> image;
  BinaryMask od;
  BinaryMask oc;
  int domain_id = 0;
  std::string id;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Photometric signature of one synthetic "scanner" plus its geometry ranges.
struct DomainSpec {
  int domain_id = 0;
  double brightness_shift = 0.0;
  double contrast_gain = 1.0;
  double noise_sigma = 0.0;
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  double vignette_strength = 0.0;
  Interval disc_radius_range{0.2, 0.35};  ///< fraction of image width
  Interval cup_ratio_range{0.4, 0.7};     ///< fraction of disc radius
  std::uint64_t seed = 0;

  void validate() const {
    auto check = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("DomainSpec: ") + msg);
    };
    check(brightness_shift >= -0.4 && brightness_shift <= 0.4, "brightness_shift outside [-0.4, 0.4]");
    check(contrast_gain >= 0.5 && contrast_gain <= 1.8, "contrast_gain outside [0.5, 1.8]");
    check(noise_sigma >= 0, "noise_sigma must be >= 0");
    check(vignette_strength >= 0 && vignette_strength <= 1, "vignette_strength outside [0, 1]");
    for (double t : tint) check(t > 0 && std::isfinite(t), "tint gains must be positive");
    check(disc_radius_range.lo > 0 && disc_radius_range.lo <= disc_radius_range.hi && disc_radius_range.hi < 0.5,
          "disc_radius_range must satisfy 0 < lo <= hi < 0.5");
    check(cup_ratio_range.lo > 0 && cup_ratio_range.lo <= cup_ratio_range.hi && cup_ratio_range.hi < 1,
          "cup_ratio_range must satisfy 0 < lo <= hi < 1");
  }
};

/// The four stand-in scanners: bright/low-contrast, dark/high-contrast,
/// green-tinted/noisy, vignetted/neutral.
inline DomainSpec preset_domain(int index, std::uint64_t seed) {
  DomainSpec s;
  s.domain_id = index;
  s.seed = mix_seed(seed, static_cast<std::uint64_t>(index));
  switch (index % 4) {
    case 0:
      s.brightness_shift = 0.15;
      s.contrast_gain = 0.7;
      s.noise_sigma = 0.01;
      break;
    case 1:
      s.brightness_shift = -0.15;
      s.contrast_gain = 1.4;
      s.noise_sigma = 0.01;
      break;
    case 2:
      s.tint = {0.8, 1.2, 0.85};
      s.noise_sigma = 0.05;
      break;
    default:
      s.vignette_strength = 0.5;
      s.noise_sigma = 0.01;
      break;
  }
  return s;
}

namespace detail {

struct DiscGeometry {
  double cx, cy, disc_r, cup_x, cup_y, cup_r;
};

struct Vessel {
  double x0, y0, x1, y1, x2, y2;  // quadratic Bezier control points
  double width;
};

inline DiscGeometry draw_geometry(Rng& rng, const DomainSpec& spec, double size) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    DiscGeometry g{};
    g.disc_r = size * rng.uniform(spec.disc_radius_range.lo, spec.disc_radius_range.hi);
    const double slack = std::max(0.0, std::min(0.1 * size, size / 2 - g.disc_r - 1.0));
    g.cx = size / 2 + rng.uniform(-slack, slack);
    g.cy = size / 2 + rng.uniform(-slack, slack);
    g.cup_r = g.disc_r * rng.uniform(spec.cup_ratio_range.lo, spec.cup_ratio_range.hi);
    const double off_r = rng.uniform(0.0, 0.15) * g.disc_r;
    const double off_a = rng.uniform(0.0, 2 * std::numbers::pi);
    g.cup_x = g.cx + off_r * std::cos(off_a);
    g.cup_y = g.cy + off_r * std::sin(off_a);
    // Strict containment with a one-pixel margin so the rasterized cup stays inside.
    if (off_r + g.cup_r < g.disc_r - 1.0 && g.cup_r >= 1.0) return g;
  }
  throw DataError("generate_domain: could not place an optic cup inside the disc after 100 attempts");
}

inline double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

inline double bezier_distance(const Vessel& v, double x, double y) {
  double best = 1e30;
  for (int i = 0; i <= 96; ++i) {
    const double t = i / 96.0, u = 1 - t;
    const double bx = u * u * v.x0 + 2 * u * t * v.x1 + t * t * v.x2;
    const double by = u * u * v.y0 + 2 * u * t * v.y1 + t * t * v.y2;
    best = std::min(best, std::hypot(bx - x, by - y));
  }
  return best;
}

}  // namespace detail

/// Renders `count` samples of one domain. Geometry and texture come from one
/// random stream and photometric noise from another, so two specs that share
/// a seed and an identity photometric transform render identical images.
inline std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t count, std::size_t size) {
  spec.validate();
  if (count < 1) throw std::invalid_argument("generate_domain: count must be >= 1");
  if (size < 32) throw std::invalid_argument("generate_domain: size must be >= 32");
  const double s = static_cast<double>(size);
  // Base fundus colour per channel: reddish background, yellow-white disc.
  constexpr std::array<double, 3> kBackground{0.55, 0.30, 0.18};
  constexpr std::array<double, 3> kDisc{0.25, 0.28, 0.22};
  constexpr std::array<double, 3> kCup{0.15, 0.18, 0.20};
  constexpr std::array<double, 3> kVessel{0.22, 0.14, 0.08};

  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng geo(mix_seed(spec.seed, 2 * i));
    Rng photo(mix_seed(spec.seed, 2 * i + 1));
    const auto g = detail::draw_geometry(geo, spec, s);

    std::vector<detail::Vessel> vessels(static_cast<std::size_t>(2 + geo.index(3)));
    for (auto& v : vessels) {
      const double a = geo.uniform(0, 2 * std::numbers::pi);
      const double reach = s * 0.7;
      v = {g.cx + reach * std::cos(a), g.cy + reach * std::sin(a),
           g.cx + geo.uniform(-0.4, 0.4) * g.disc_r, g.cy + geo.uniform(-0.4, 0.4) * g.disc_r,
           g.cx - reach * std::cos(a + geo.uniform(-0.8, 0.8)), g.cy - reach * std::sin(a + geo.uniform(-0.8, 0.8)),
           geo.uniform(0.6, 1.3)};
    }
    // Low-frequency background texture: a few random plane waves.
    std::array<std::array<double, 4>, 3> waves{};
    for (auto& w : waves) w = {geo.uniform(0.02, 0.04), geo.uniform(0, 2 * std::numbers::pi),
                               geo.uniform(0.5, 2.5) * 2 * std::numbers::pi / s, geo.uniform(0, 2 * std::numbers::pi)};
    const double disc_soft = 1.0, cup_soft = 1.5 + geo.uniform(0.0, 1.0);

    Sample smp;
    smp.image = Tensor<float>({3, size, size});
    smp.od = BinaryMask(size, size);
    smp.oc = BinaryMask(size, size);
    smp.domain_id = spec.domain_id;
    smp.id = "d" + std::to_string(spec.domain_id) + "_" + std::to_string(i);
    const double half_diag = std::hypot(s / 2, s / 2);
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
        const double dd = std::hypot(x - g.cx, y - g.cy);
        const double dc = std::hypot(x - g.cup_x, y - g.cup_y);
        smp.od.set(r, c, dd < g.disc_r);
        smp.oc.set(r, c, dc < g.cup_r);
        const double disc_w = 1.0 - detail::smoothstep(g.disc_r - disc_soft, g.disc_r + disc_soft, dd);
        const double cup_w = 1.0 - detail::smoothstep(g.cup_r - cup_soft, g.cup_r + cup_soft, dc);
        double vessel_w = 0.0;
        for (const auto& v : vessels) {
          vessel_w = std::max(vessel_w, 1.0 - detail::smoothstep(v.width * 0.5, v.width * 1.5,
                                                                detail::bezier_distance(v, x, y)));
        }
        double texture = 0.0;
        for (const auto& w : waves) texture += w[0] * std::sin(w[2] * (x * std::cos(w[1]) + y * std::sin(w[1])) + w[3]);
        const double rad = std::hypot(x - s / 2, y - s / 2) / half_diag;
        const double vignette = 1.0 - spec.vignette_strength * rad * rad;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double v = kBackground[ch] + texture + kDisc[ch] * disc_w + kCup[ch] * cup_w - kVessel[ch] * vessel_w;
          v = ((v - 0.5) * spec.contrast_gain + 0.5 + spec.brightness_shift) * spec.tint[ch] * vignette;
          if (spec.noise_sigma > 0) v += spec.noise_sigma * photo.normal();
          smp.image[(ch * size + r) * size + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O

struct ManifestEntry {
  std::string image;
  std::string od;
  std::string oc;
  int domain = 0;
  std::string split;  ///< empty: inherits the manifest-level split
};

struct DatasetManifest {
  std::string name;
  std::string split = "train";  ///< "train", "test" or "both" (per-entry splits)
  std::vector<ManifestEntry> entries;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["name"] = m.name;
  j["split"] = m.split;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je{{"image", e.image}, {"od", e.od}, {"oc", e.oc}, {"domain", e.domain}};
    if (!e.split.empty()) je["split"] = e.split;
    j["entries"].push_back(std::move(je));
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.split = j.at("split").get<std::string>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image = je.at("image").get<std::string>();
      e.od = je.at("od").get<std::string>();
      e.oc = je.at("oc").get<std::string>();
      e.domain = je.at("domain").get<int>();
      if (je.contains("split")) e.split = je.at("split").get<std::string>();
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("manifest: ") + ex.what());
  }
  return m;
}

inline std::string entry_split(const DatasetManifest& m, const ManifestEntry& e) {
  return e.split.empty() ? m.split : e.split;
}

inline RawImage to_raw_rgb(const Tensor<float>& image) {
  RawImage raw{image.dim(2), image.dim(1), 3, {}};
  raw.pixels.resize(raw.width * raw.height * 3);
  const std::size_t plane = raw.width * raw.height;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(static_cast<double>(image[ch * plane + p]), 0.0, 1.0);
      raw.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return raw;
}

inline RawImage to_raw_mask(const BinaryMask& m) {
  RawImage raw{m.cols(), m.rows(), 1, {}};
  raw.pixels.reserve(m.bits().size());
  for (auto b : m.bits()) raw.pixels.push_back(b ? 255 : 0);
  return raw;
}

/// Writes images and masks under `dir` and returns the manifest describing
/// them (paths relative to `dir`). `splits`, when given, tags each sample.
inline DatasetManifest save_samples(const std::vector<Sample>& samples, const std::filesystem::path& dir,
                                    const std::string& name, const std::vector<std::string>& splits = {}) {
  if (!splits.empty() && splits.size() != samples.size()) {
    throw std::invalid_argument("save_samples: one split tag per sample required");
  }
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = name;
  m.split = splits.empty() ? "train" : "both";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestEntry e{s.id + ".ppm", s.id + "_od.pgm", s.id + "_oc.pgm", s.domain_id,
                    splits.empty() ? "" : splits[i]};
    save_netpbm(dir / e.image, to_raw_rgb(s.image));
    save_netpbm(dir / e.od, to_raw_mask(s.od));
    save_netpbm(dir / e.oc, to_raw_mask(s.oc));
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("manifest " + path.string() + ": " + ex.what());
  }
  return manifest_from_json(j);
}

/// Loads every entry (or only those in `split`) of a manifest. Relative paths
/// resolve against the manifest's directory.
inline std::vector<Sample> load_dataset(const std::filesystem::path& manifest_path,
                                        const std::optional<std::string>& split = std::nullopt) {
  const auto m = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<Sample> out;
  for (std::size_t k = 0; k < m.entries.size(); ++k) {
    const auto& e = m.entries[k];
    if (split && entry_split(m, e) != *split) continue;
    const std::string where = "manifest entry " + std::to_string(k) + " (" + e.image + ")";
    RawImage img, od, oc;
    try {
      img = load_netpbm(base / e.image);
      od = load_netpbm(base / e.od);
      oc = load_netpbm(base / e.oc);
    } catch (const ImageIoError& ex) {
      throw DataError(where + ": " + ex.what());
    }
    if (img.channels != 3) throw DataError(where + ": image must be PPM (P6)");
    if (od.channels != 1 || oc.channels != 1) throw DataError(where + ": masks must be PGM (P5)");
    if (od.width != img.width || od.height != img.height || oc.width != img.width || oc.height != img.height) {
      throw DataError(where + ": image and mask dimensions differ");
    }
    Sample s;
    const std::size_t h = img.height, w = img.width, plane = h * w;
    s.image = Tensor<float>({3, h, w});
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t ch = 0; ch < 3; ++ch) s.image[ch * plane + p] = static_cast<float>(img.pixels[p * 3 + ch] / 255.0);
    }
    std::vector<std::uint8_t> odb(plane), ocb(plane);
    for (std::size_t p = 0; p < plane; ++p) {
      odb[p] = od.pixels[p] > 127;
      ocb[p] = oc.pixels[p] > 127;
    }
    s.od = BinaryMask(h, w, std::move(odb));
    s.oc = BinaryMask(h, w, std::move(ocb));
    s.domain_id = e.domain;
    s.id = std::filesystem::path(e.image).stem().string();
    out.push_back(std::move(s));
  }
  return out;
}

/// Deterministic "train"/"test" tags: floor(train_fraction * count) samples,
/// picked by a seeded shuffle, are tagged train.
inline std::vector<std::string> split_tags(std::size_t count, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0 && train_fraction <= 1)) throw std::invalid_argument("split_tags: fraction outside [0, 1]");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5b117));
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(count)));
  std::vector<std::string> tags(count, "test");
  for (std::size_t k = 0; k < n_train; ++k) tags[order[k]] = "train";
  return tags;
}

/// Manifests of a data root: `root/manifest.json` itself, or every
/// `root/<sub>/manifest.json`, in path order.
inline std::vector<std::filesystem::path> find_manifests(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(root)) return {root};
  if (!fs::is_directory(root)) throw DataError("data path " + root.string() + " does not exist");
  if (fs::is_regular_file(root / "manifest.json")) return {root / "manifest.json"};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::is_regular_file(e.path() / "manifest.json")) out.push_back(e.path() / "manifest.json");
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no manifest.json found under " + root.string());
  return out;
}

/// All samples of a data root, optionally restricted to one split.
inline std::vector<Sample> load_data_root(const std::filesystem::path& root,
                                          const std::optional<std::string>& split = std::nullopt) {
  std::vector<Sample> out;
  for (const auto& m : find_manifests(root)) {
    auto s = load_dataset(m, split);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry

/// Crops roi x roi around the disc centroid (image centre when the disc mask
/// is empty), then resizes the image bilinearly and the masks by nearest
/// neighbour to out x out.
inline Sample crop_resize(const Sample& s, std::size_t roi, std::size_t out) {
  if (out == 0) throw std::invalid_argument("crop_resize: out must be > 0");
  const std::size_t h = s.height(), w = s.width();
  if (roi == 0 || roi > std::min(h, w)) {
    throw std::invalid_argument("crop_resize: roi " + std::to_string(roi) + " exceeds image " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  double cy = h / 2.0, cx = w / 2.0;
  if (const std::size_t n = s.od.popcount(); n > 0) {
    double sy = 0, sx = 0;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (s.od.get(r, c)) {
          sy += r + 0.5;
          sx += c + 0.5;
        }
    cy = sy / n;
    cx = sx / n;
  }
  auto origin = [roi](double centre, std::size_t extent) {
    const double o = std::round(centre - roi / 2.0);
    return static_cast<std::size_t>(std::clamp(o, 0.0, static_cast<double>(extent - roi)));
  };
  const std::size_t r0 = origin(cy, h), c0 = origin(cx, w);

  Sample o;
  o.domain_id = s.domain_id;
  o.id = s.id;
  o.image = Tensor<float>({3, out, out});
  o.od = BinaryMask(out, out);
  o.oc = BinaryMask(out, out);
  const double scale = static_cast<double>(roi) / static_cast<double>(out);
  for (std::size_t r = 0; r < out; ++r) {
    const double fy = std::clamp((r + 0.5) * scale - 0.5, 0.0, static_cast<double>(roi - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, roi - 1);
    const double ty = fy - y0;
    const std::size_t ny = r * roi / out;
    for (std::size_t c = 0; c < out; ++c) {
      const double fx = std::clamp((c + 0.5) * scale - 0.5, 0.0, static_cast<double>(roi - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, roi - 1);
      const double tx = fx - x0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        auto at = [&](std::size_t y, std::size_t x) {
          return static_cast<double>(s.image[(ch * h + r0 + y) * w + c0 + x]);
        };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
                         ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
        o.image[(ch * out + r) * out + c] = static_cast<float>(v);
      }
      const std::size_t nx = c * roi / out;
      o.od.set(r, c, s.od.get(r0 + ny, c0 + nx));
      o.oc.set(r, c, s.oc.get(r0 + ny, c0 + nx));
    }
  }
  return o;
}

inline Sample hflip(const Sample& s) {
  Sample o = s;
  const std::size_t h = s.height(), w = s.width();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t ch = 0; ch < 3; ++ch) o.image[(ch * h + r) * w + c] = s.image[(ch * h + r) * w + (w - 1 - c)];
      o.od.set(r, c, s.od.get(r, w - 1 - c));
      o.oc.set(r, c, s.oc.get(r, w - 1 - c));
    }
  }
  return o;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
  double p_flip = 0.5;
  double p_noise = 0.5;
  double p_lightness = 0.5;
  double p_erase = 0.5;
  double max_noise_sigma = 0.05;
  double max_lightness = 0.2;
  double max_erase_area = 0.2;
  std::array<float, 3> fill{0.5f, 0.5f, 0.5f};  ///< per-channel dataset mean
};

/// Random flip, Gaussian noise, lightness shift and one erased rectangle,
/// each with its own probability. Every call consumes the same number of
/// draws before the per-pixel noise, whichever transforms fire.
inline Sample augment(const Sample& s, Rng& rng, const AugmentOptions& opt = {}) {
  const bool flip = rng.bernoulli(opt.p_flip);
  const bool noise = rng.bernoulli(opt.p_noise);
  const bool light = rng.bernoulli(opt.p_lightness);
  const bool erase = rng.bernoulli(opt.p_erase);
  const double sigma = rng.uniform(0.0, opt.max_noise_sigma);
  const double shift = rng.uniform(-opt.max_lightness, opt.max_lightness);
  const double area = rng.uniform(0.02, opt.max_erase_area);
  const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
  const double pos_y = rng.uniform(), pos_x = rng.uniform();

  Sample o = flip ? hflip(s) : s;
  const std::size_t h = o.height(), w = o.width();
  auto& img = o.image;
  if (light) {
    for (auto& v : img.data()) v = static_cast<float>(std::clamp(v + shift, 0.0, 1.0));
  }
  if (noise) {
    for (auto& v : img.data()) v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
  }
  if (erase) {
    const double px = area * static_cast<double>(h * w);
    const std::size_t eh = std::clamp<std::size_t>(static_cast<std::size_t>(std::sqrt(px * aspect)), 1, h);
    const std::size_t ew = std::clamp<std::size_t>(static_cast<std::size_t>(px / static_cast<double>(eh)), 1, w);
    const std::size_t r0 = static_cast<std::size_t>(pos_y * static_cast<double>(h - eh + 1));
    const std::size_t c0 = static_cast<std::size_t>(pos_x * static_cast<double>(w - ew + 1));
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = r0; r < r0 + eh; ++r)
        for (std::size_t c = c0; c < c0 + ew; ++c) img[(ch * h + r) * w + c] = opt.fill[ch];
  }
  return o;
}

inline std::array<float, 3> channel_means(const std::vector<Sample>& samples) {
  std::array<double, 3> acc{};
  std::size_t n = 0;
  for (const auto& s : samples) {
    const std::size_t plane = s.height() * s.width();
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < plane; ++p) acc[ch] += s.image[ch * plane + p];
    n += plane;
  }
  std::array<float, 3> out{0.5f, 0.5f, 0.5f};
  if (n > 0)
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch] = static_cast<float>(acc[ch] / static_cast<double>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Deterministic per-epoch batch plans over a fixed sample list.
class BatchIterator {
 public:
  BatchIterator(std::vector<int> domains, std::size_t batch_size, std::uint64_t seed, bool balanced)
      : domains_(std::move(domains)), batch_size_(batch_size), seed_(seed), balanced_(balanced) {
    if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    if (batch_size > domains_.size()) {
      throw std::invalid_argument("batch_iter: batch_size " + std::to_string(batch_size) + " exceeds sample count " +
                                  std::to_string(domains_.size()));
    }
  }

  explicit BatchIterator(const std::vector<Sample>& samples, std::size_t batch_size, std::uint64_t seed,
                         bool balanced)
      : BatchIterator(domain_list(samples), batch_size, seed, balanced) {}

  std::size_t sample_count() const { return domains_.size(); }
  std::size_t batches_per_epoch() const { return (domains_.size() + batch_size_ - 1) / batch_size_; }

  /// Index lists for one epoch; every sample appears exactly once. Balanced
  /// mode deals round-robin from per-domain shuffled queues.
  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const {
    Rng rng(mix_seed(seed_, e));
    std::vector<std::size_t> order;
    if (!balanced_) {
      order.resize(domains_.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
    } else {
      std::map<int, std::vector<std::size_t>> queues;
      for (std::size_t i = 0; i < domains_.size(); ++i) queues[domains_[i]].push_back(i);
      std::vector<std::vector<std::size_t>> qs;
      for (auto& [d, q] : queues) {
        rng.shuffle(q);
        qs.push_back(std::move(q));
      }
      std::vector<std::size_t> pos(qs.size(), 0);
      std::size_t start = 0;
      while (order.size() < domains_.size()) {
        // One pass deals at most one sample per domain, beginning at a domain
        // that rotates per pass so leftover slots are shared fairly.
        for (std::size_t k = 0; k < qs.size(); ++k) {
          const std::size_t d = (start + k) % qs.size();
          if (pos[d] < qs[d].size()) order.push_back(qs[d][pos[d]++]);
        }
        start = (start + 1) % qs.size();
      }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size_) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
    }
    return batches;
  }

 private:
  static std::vector<int> domain_list(const std::vector<Sample>& samples) {
    std::vector<int> d;
    d.reserve(samples.size());
    for (const auto& s : samples) d.push_back(s.domain_id);
    return d;
  }

  std::vector<int> domains_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool balanced_;
};

template <class T>
struct Batch {
  Tensor<T> images;  ///< [B,3,H,W]
  Tensor<T> masks;   ///< [B,2,H,W], channel 0 disc, channel 1 cup
  std::vector<int> domains;
};

template <class T>
Batch<T> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t h = samples[indices[0]].height(), w = samples[indices[0]].width(), plane = h * w;
  Batch<T> b{Tensor<T>({indices.size(), 3, h, w}), Tensor<T>({indices.size(), 2, h, w}), {}};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = samples[indices[k]];
    if (s.height() != h || s.width() != w) throw ShapeError("make_batch: samples differ in size");
    for (std::size_t i = 0; i < 3 * plane; ++i) b.images[k * 3 * plane + i] = static_cast<T>(s.image[i]);
    for (std::size_t i = 0; i < plane; ++i) {
      b.masks[(2 * k) * plane + i] = static_cast<T>(s.od.bits()[i]);
      b.masks[(2 * k + 1) * plane + i] = static_cast<T>(s.oc.bits()[i]);
    }
    b.domains.push_back(s.domain_id);
  }
  return b;
}

}  // namespace afnn
