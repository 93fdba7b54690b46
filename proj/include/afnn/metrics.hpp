#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "afnn/tensor.hpp"

// Segmentation quality metrics: overlap (DSC), surface distances (HD, ASD)
// and the cross-domain intensity gap statistic.

namespace afnn::metrics {

/// Row-major binary mask, one byte per pixel holding 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {
    if (rows == 0 || cols == 0) throw ShapeError("BinaryMask: dims must be >= 1");
  }
  BinaryMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits)
      : rows_(rows), cols_(cols), bits_(std::move(bits)) {
    if (rows == 0 || cols == 0) throw ShapeError("BinaryMask: dims must be >= 1");
    if (bits_.size() != rows * cols) throw ShapeError("BinaryMask: bit count does not match dims");
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  /// Thresholds a probability map: v > threshold is foreground.
  template <class T>
  static BinaryMask threshold(std::span<const T> values, std::size_t rows, std::size_t cols, double t) {
    if (values.size() != rows * cols) throw ShapeError("BinaryMask::threshold: size mismatch");
    BinaryMask m(rows, cols);
    for (std::size_t i = 0; i < values.size(); ++i) m.bits_[i] = static_cast<double>(values[i]) > t ? 1 : 0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool get(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool empty_foreground() const { return popcount() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

using SurfaceSet = std::vector<Pixel>;

enum class Connectivity { kFour, kEight };

inline void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": mask dims differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  }
}

/// 2|D ∩ Y| / (|D| + |Y|); 1 when both masks are empty.
inline double dsc(const BinaryMask& d, const BinaryMask& y) {
  require_same_dims(d, y, "dsc");
  std::size_t inter = 0, nd = 0, ny = 0;
  const auto& a = d.bits();
  const auto& b = y.bits();
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    nd += a[i];
    ny += b[i];
  }
  if (nd + ny == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(nd + ny);
}

/// Foreground pixels with at least one background neighbour; pixels outside
/// the image count as background.
inline SurfaceSet surface(const BinaryMask& m, Connectivity conn = Connectivity::kFour) {
  SurfaceSet out;
  const int rows = static_cast<int>(m.rows()), cols = static_cast<int>(m.cols());
  auto bg = [&](int r, int c) {
    return r < 0 || c < 0 || r >= rows || c >= cols || !m.get(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (bg(r, c)) continue;
      bool edge = bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1);
      if (!edge && conn == Connectivity::kEight) {
        edge = bg(r - 1, c - 1) || bg(r - 1, c + 1) || bg(r + 1, c - 1) || bg(r + 1, c + 1);
      }
      if (edge) out.push_back({r, c});
    }
  }
  return out;
}

namespace detail {

/// 1-D squared distance transform of sampled function f (lower envelope of
/// parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                   std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    if (f[static_cast<std::size_t>(v[static_cast<std::size_t>(k)])] == kInf) {
      v[static_cast<std::size_t>(k)] = q;
      continue;
    }
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + double(q) * q) - (f[static_cast<std::size_t>(p)] + double(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<std::size_t>(k)];
    const double fp = f[static_cast<std::size_t>(p)];
    d[static_cast<std::size_t>(q)] = fp == kInf ? kInf : double(q - p) * (q - p) + fp;
  }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
inline std::vector<double> squared_distance_map(const SurfaceSet& seeds, std::size_t rows, std::size_t cols) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(rows * cols, kInf);
  for (const auto& p : seeds) grid[static_cast<std::size_t>(p.row) * cols + static_cast<std::size_t>(p.col)] = 0.0;
  const std::size_t n = std::max(rows, cols);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(rows);
  d.resize(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) f[r] = grid[r * cols + c];
    edt_1d(f, d, v, z);
    for (std::size_t r = 0; r < rows; ++r) grid[r * cols + c] = d[r];
  }
  f.resize(cols);
  d.resize(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) f[c] = grid[r * cols + c];
    edt_1d(f, d, v, z);
    for (std::size_t c = 0; c < cols; ++c) grid[r * cols + c] = d[c];
  }
  return grid;
}

/// Distance from each pixel of `from` to the nearest pixel of `to`.
inline std::vector<double> nearest_distances(const SurfaceSet& from, const SurfaceSet& to, std::size_t rows,
                                             std::size_t cols) {
  const auto map = squared_distance_map(to, rows, cols);
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    out.push_back(std::sqrt(map[static_cast<std::size_t>(p.row) * cols + static_cast<std::size_t>(p.col)]));
  }
  return out;
}

}  // namespace detail

/// Symmetric Hausdorff distance between the surfaces of d and y, in pixels.
/// Both surfaces empty gives 0; exactly one empty is undefined (nullopt).
inline std::optional<double> hausdorff(const BinaryMask& d, const BinaryMask& y,
                                       Connectivity conn = Connectivity::kFour) {
  require_same_dims(d, y, "hausdorff");
  const auto sd = surface(d, conn);
  const auto sy = surface(y, conn);
  if (sd.empty() && sy.empty()) return 0.0;
  if (sd.empty() || sy.empty()) return std::nullopt;
  double h = 0.0;
  for (double v : detail::nearest_distances(sd, sy, d.rows(), d.cols())) h = std::max(h, v);
  for (double v : detail::nearest_distances(sy, sd, d.rows(), d.cols())) h = std::max(h, v);
  return h;
}

/// Average symmetric surface distance: the summed nearest distances in both
/// directions over |S(d)| + |S(y)|. Empty handling as in hausdorff().
inline std::optional<double> asd(const BinaryMask& d, const BinaryMask& y, Connectivity conn = Connectivity::kFour) {
  require_same_dims(d, y, "asd");
  const auto sd = surface(d, conn);
  const auto sy = surface(y, conn);
  if (sd.empty() && sy.empty()) return 0.0;
  if (sd.empty() || sy.empty()) return std::nullopt;
  double total = 0.0;
  for (double v : detail::nearest_distances(sd, sy, d.rows(), d.cols())) total += v;
  for (double v : detail::nearest_distances(sy, sd, d.rows(), d.cols())) total += v;
  return total / static_cast<double>(sd.size() + sy.size());
}

// ---------------------------------------------------------------------------
// Records and CSV

enum class Structure { kOpticDisc, kOpticCup };

inline const char* structure_name(Structure s) { return s == Structure::kOpticDisc ? "OD" : "OC"; }

inline Structure parse_structure(const std::string& s) {
  if (s == "OD") return Structure::kOpticDisc;
  if (s == "OC") return Structure::kOpticCup;
  throw std::invalid_argument("unknown structure '" + s + "'");
}

struct MetricRecord {
  int domain_id = 0;
  Structure structure = Structure::kOpticDisc;
  double dsc = 0.0;
  std::optional<double> hd;
  std::optional<double> asd;
  std::string sample_id;
};

struct StructureSummary {
  double mean_dsc = 0.0;
  double mean_hd = 0.0;
  double mean_asd = 0.0;
  std::size_t count = 0;
  /// Records whose HD/ASD were undefined (one surface empty); excluded from
  /// the distance means.
  std::size_t undefined = 0;
};

/// Per-structure arithmetic means over records, in record order.
inline std::map<Structure, StructureSummary> summarize(const std::vector<MetricRecord>& records) {
  std::map<Structure, StructureSummary> out;
  std::map<Structure, std::size_t> defined;
  for (const auto& r : records) {
    auto& s = out[r.structure];
    s.mean_dsc += r.dsc;
    ++s.count;
    if (r.hd && r.asd) {
      s.mean_hd += *r.hd;
      s.mean_asd += *r.asd;
      ++defined[r.structure];
    } else {
      ++s.undefined;
    }
  }
  for (auto& [k, s] : out) {
    s.mean_dsc /= static_cast<double>(s.count);
    const std::size_t n = defined[k];
    s.mean_hd = n ? s.mean_hd / static_cast<double>(n) : 0.0;
    s.mean_asd = n ? s.mean_asd / static_cast<double>(n) : 0.0;
  }
  return out;
}

inline const char* kMetricCsvHeader = "run_id,unseen_domain,sample_id,structure,dsc,hd,asd,hd_defined";

inline void write_metric_csv(std::ostream& os, const std::vector<MetricRecord>& records, const std::string& run_id,
                             int unseen_domain) {
  os << kMetricCsvHeader << '\n';
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("nan");
    std::ostringstream s;
    s << std::setprecision(17) << *v;
    return s.str();
  };
  for (const auto& r : records) {
    os << run_id << ',' << unseen_domain << ',' << r.sample_id << ',' << structure_name(r.structure) << ','
       << num(r.dsc) << ',' << num(r.hd) << ',' << num(r.asd) << ',' << (r.hd ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Domain gap

struct ChannelStats {
  double mean = 0.0;
  double std = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> histogram;
};

struct DomainStats {
  int domain_id = 0;
  double mean_intensity = 0.0;
  std::vector<ChannelStats> channels;
};

struct GapSide {
  std::vector<DomainStats> domains;
  /// Population variance across domains of per-domain mean intensity.
  double gap = 0.0;
};

struct GapReport {
  GapSide raw;
  std::optional<GapSide> adapted;
};

inline constexpr std::size_t kHistogramBins = 64;

/// Images are [C,H,W] (or [1,C,H,W]) tensors. Histogram bins span the range
/// observed per channel across all domains so domains are comparable.
template <class T>
GapSide gap_statistics(const std::map<int, std::vector<Tensor<T>>>& groups) {
  if (groups.size() < 2) throw std::invalid_argument("domain_gap_stats: need at least two domains");
  std::size_t channels = 0;
  for (const auto& [id, imgs] : groups) {
    if (imgs.empty()) throw std::invalid_argument("domain_gap_stats: domain " + std::to_string(id) + " is empty");
    const auto& s = imgs.front().shape();
    channels = s.size() == 4 ? s[1] : s[0];
  }
  std::vector<double> lo(channels, std::numeric_limits<double>::infinity());
  std::vector<double> hi(channels, -std::numeric_limits<double>::infinity());
  auto plane_of = [&](const Tensor<T>& t) { return t.size() / channels; };
  for (const auto& [id, imgs] : groups) {
    for (const auto& img : imgs) {
      const std::size_t plane = plane_of(img);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = static_cast<double>(img[c * plane + i]);
          lo[c] = std::min(lo[c], v);
          hi[c] = std::max(hi[c], v);
        }
      }
    }
  }

  GapSide side;
  for (const auto& [id, imgs] : groups) {
    DomainStats ds;
    ds.domain_id = id;
    double total = 0.0;
    std::size_t total_count = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      ChannelStats cs;
      cs.lo = lo[c];
      cs.hi = hi[c];
      cs.histogram.assign(kHistogramBins, 0);
      double s = 0.0, s2 = 0.0;
      std::size_t count = 0;
      const double width = hi[c] > lo[c] ? (hi[c] - lo[c]) / kHistogramBins : 1.0;
      for (const auto& img : imgs) {
        const std::size_t plane = plane_of(img);
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = static_cast<double>(img[c * plane + i]);
          s += v;
          s2 += v * v;
          auto bin = static_cast<std::size_t>((v - lo[c]) / width);
          ++cs.histogram[std::min(bin, kHistogramBins - 1)];
        }
        count += plane;
      }
      cs.mean = s / static_cast<double>(count);
      cs.std = std::sqrt(std::max(0.0, s2 / static_cast<double>(count) - cs.mean * cs.mean));
      total += s;
      total_count += count;
      ds.channels.push_back(std::move(cs));
    }
    ds.mean_intensity = total / static_cast<double>(total_count);
    side.domains.push_back(std::move(ds));
  }
  double m = 0.0;
  for (const auto& d : side.domains) m += d.mean_intensity;
  m /= static_cast<double>(side.domains.size());
  for (const auto& d : side.domains) side.gap += (d.mean_intensity - m) * (d.mean_intensity - m);
  side.gap /= static_cast<double>(side.domains.size());
  return side;
}

/// Raw statistics plus, when a transform is given, statistics of the
/// transformed images. The transform receives every image of every domain at
/// once (domain order, then image order) and returns them in the same order.
template <class T>
GapReport domain_gap_stats(
    const std::map<int, std::vector<Tensor<T>>>& groups,
    const std::function<std::vector<Tensor<T>>(const std::vector<Tensor<T>>&)>& transform = nullptr) {
  GapReport report;
  report.raw = gap_statistics(groups);
  if (transform) {
    std::vector<Tensor<T>> all;
    for (const auto& [id, imgs] : groups) all.insert(all.end(), imgs.begin(), imgs.end());
    auto mapped = transform(all);
    if (mapped.size() != all.size()) throw std::runtime_error("domain_gap_stats: transform changed image count");
    std::map<int, std::vector<Tensor<T>>> adapted;
    std::size_t k = 0;
    for (const auto& [id, imgs] : groups) {
      for (std::size_t i = 0; i < imgs.size(); ++i) adapted[id].push_back(std::move(mapped[k++]));
    }
    report.adapted = gap_statistics(adapted);
  }
  return report;
}

}  // namespace afnn::metrics
