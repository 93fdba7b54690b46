#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "afnn/ops.hpp"
#include "afnn/rng.hpp"
#include "afnn/tape.hpp"
#include "afnn/tensor.hpp"

namespace afnn {

enum class Group { kAdaptor, kBackbone, kHeadSeg, kHeadRec, kHeadCls };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::kAdaptor: return "adaptor";
    case Group::kBackbone: return "backbone";
    case Group::kHeadSeg: return "head_seg";
    case Group::kHeadRec: return "head_rec";
    case Group::kHeadCls: return "head_cls";
  }
  return "?";
}

inline Group parse_group(const std::string& s) {
  for (Group g : {Group::kAdaptor, Group::kBackbone, Group::kHeadSeg, Group::kHeadRec, Group::kHeadCls}) {
    if (s == group_name(g)) return g;
  }
  throw std::invalid_argument("unknown parameter group '" + s + "'");
}

/// The group is the first dotted component of a parameter name.
inline Group group_of(const std::string& name) { return parse_group(name.substr(0, name.find('.'))); }

struct AdaptorConfig {
  std::size_t channels = 16;
};

struct FusionConfig {
  std::size_t levels = 4;
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t fusion_dim = 128;
  std::vector<std::size_t> kernels{1, 3, 5};
};

struct ModelConfig {
  AdaptorConfig adaptor;
  FusionConfig fusion;
  std::size_t n_domains = 4;
  // Ablation switches.
  bool use_adaptor = true;
  bool use_fusion = true;
  bool use_multitask = true;

  void validate() const {
    if (fusion.levels < 1) throw std::invalid_argument("model: levels must be >= 1");
    if (fusion.channels.size() != fusion.levels) {
      throw std::invalid_argument("model: need one channel count per level (" + std::to_string(fusion.levels) + ")");
    }
    for (auto c : fusion.channels)
      if (c == 0) throw std::invalid_argument("model: channel counts must be positive");
    if (fusion.fusion_dim != fusion.channels.back()) {
      throw std::invalid_argument("model: fusion_dim must equal the deepest level's channel count");
    }
    if (fusion.kernels.empty()) throw std::invalid_argument("model: need at least one multi-scale kernel");
    for (auto k : fusion.kernels)
      if (k % 2 == 0) throw std::invalid_argument("model: multi-scale kernels must be odd for same padding");
    if (use_adaptor && adaptor.channels == 0) throw std::invalid_argument("model: adaptor channels must be > 0");
    if (use_multitask && n_domains < 2) throw std::invalid_argument("model: n_domains must be >= 2");
  }

  /// Input sides must be divisible by this.
  std::size_t spatial_divisor() const { return std::size_t{1} << (fusion.levels - 1); }
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Group group = Group::kBackbone;
  bool frozen = false;
};

/// Named parameters plus batch-norm running statistics (buffers).
template <class T>
class ModelParams {
 public:
  ModelConfig config;

  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
    const Group g = group_of(name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(value), g, false});
    return params_.back();
  }

  BatchNormStats<T>& add_stats(const std::string& layer, std::size_t channels) {
    return stats_.emplace(layer, BatchNormStats<T>(channels)).first->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const { return const_cast<ModelParams*>(this)->get(name); }

  BatchNormStats<T>& stats(const std::string& layer) {
    auto it = stats_.find(layer);
    if (it == stats_.end()) throw std::out_of_range("no batch-norm layer named " + layer);
    return it->second;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::map<std::string, BatchNormStats<T>>& all_stats() { return stats_; }
  const std::map<std::string, BatchNormStats<T>>& all_stats() const { return stats_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, BatchNormStats<T>> stats_;
};

/// Toggles every parameter of a group; returns how many were touched.
template <class T>
std::size_t set_frozen(ModelParams<T>& params, Group group, bool frozen) {
  std::size_t n = 0;
  for (auto& p : params.params())
    if (p.group == group) {
      p.frozen = frozen;
      ++n;
    }
  return n;
}

template <class T>
std::size_t set_frozen(ModelParams<T>& params, const std::string& group, bool frozen) {
  return set_frozen(params, parse_group(group), frozen);
}

namespace detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng(mix_seed(seed, name_hash(name)));
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <class T>
struct Builder {
  ModelParams<T>& p;
  std::uint64_t seed;

  void conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias) {
    p.add(name + ".weight", he_normal<T>({out, in, k, k}, in * k * k, seed, name + ".weight"));
    if (bias) p.add(name + ".bias", Tensor<T>({out}, T{0}));
  }
  void bn(const std::string& name, std::size_t c) {
    p.add(name + ".gamma", Tensor<T>({c}, T{1}));
    p.add(name + ".beta", Tensor<T>({c}, T{0}));
    p.add_stats(name, c);
  }
};

}  // namespace detail

/// He-normal conv/linear weights (sd = sqrt(2 / fan_in)), zero biases, unit
/// batch-norm scale. Each tensor draws from a stream keyed by its name, so
/// values do not depend on registration order.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.config = cfg;
  detail::Builder<T> b{p, seed};
  const auto& f = cfg.fusion;
  const std::size_t L = f.levels, F = f.fusion_dim;
  if (cfg.use_adaptor) {
    const std::size_t c = cfg.adaptor.channels;
    b.conv("adaptor.blob1.conv", c, 3, 3, false);
    b.conv("adaptor.blob2.conv", c, c, 3, false);
    b.bn("adaptor.blob2.bn", c);
    b.conv("adaptor.out", 3, c, 1, true);
  }
  for (std::size_t i = 0; i < L; ++i) {
    const std::string s = "backbone.enc" + std::to_string(i);
    b.conv(s + ".conv", f.channels[i], i == 0 ? 3 : f.channels[i - 1], 3, false);
    b.bn(s + ".bn", f.channels[i]);
  }
  if (cfg.use_fusion) {
    for (std::size_t i = 0; i < L; ++i) b.conv("backbone.fuse.level" + std::to_string(i), F, f.channels[i], 1, true);
    for (auto k : f.kernels) b.conv("backbone.fuse.k" + std::to_string(k), F, F, k, true);
    b.conv("backbone.fuse.reduce", F, F * f.kernels.size(), 1, true);
  }
  for (std::size_t j = L - 1; j-- > 0;) {
    const std::string s = "backbone.dec" + std::to_string(j);
    b.conv(s + ".conv", f.channels[j], f.channels[j + 1] + f.channels[j], 3, false);
    b.bn(s + ".bn", f.channels[j]);
  }
  b.conv("head_seg.out", 2, f.channels[0], 1, true);
  if (cfg.use_multitask) {
    for (std::size_t j = L - 1; j-- > 0;) {
      const std::string s = "head_rec.up" + std::to_string(j);
      b.conv(s + ".conv", f.channels[j], f.channels[j + 1], 3, false);
      b.bn(s + ".bn", f.channels[j]);
    }
    b.conv("head_rec.out", 3, f.channels[0], 1, true);
    p.add("head_cls.weight", detail::he_normal<T>({F, cfg.n_domains}, F, seed, "head_cls.weight"));
    p.add("head_cls.bias", Tensor<T>({cfg.n_domains}, T{0}));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward

/// Binds a parameter set to one tape: each parameter becomes a leaf the first
/// time it is used, requiring grad unless frozen.
template <class T>
class Net {
 public:
  Net(ModelParams<T>& params, Tape<T>& tape, Mode mode) : params_(params), tape_(tape), mode_(mode) {}

  Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto& p = params_.get(name);
    Var<T> v = tape_.leaf(p.value, !p.frozen);
    bound_.emplace(name, v);
    return v;
  }

  Var<T> conv(const std::string& name, Var<T> x, std::size_t pad, PadMode mode = PadMode::kZero) {
    std::optional<Var<T>> bias;
    if (params_.contains(name + ".bias")) bias = param(name + ".bias");
    return conv2d(x, param(name + ".weight"), bias, {1, pad, mode});
  }

  Var<T> bn(const std::string& name, Var<T> x) {
    return batch_norm(x, param(name + ".gamma"), param(name + ".beta"), params_.stats(name), {mode_});
  }

  Tape<T>& tape() { return tape_; }
  Mode mode() const { return mode_; }
  const ModelConfig& config() const { return params_.config; }
  ModelParams<T>& params() { return params_; }
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

 private:
  ModelParams<T>& params_;
  Tape<T>& tape_;
  Mode mode_;
  std::map<std::string, Var<T>> bound_;
};

template <class T>
Var<T> adaptor_blob1(Net<T>& net, Var<T> x) {
  // Replicate padding keeps a constant shift of the input constant at the
  // borders too, so instance norm removes it exactly.
  return relu(instance_norm(net.conv("adaptor.blob1.conv", x, 1, PadMode::kReplicate)));
}

/// conv3x3 -> instance norm -> relu, conv3x3 -> batch norm -> relu, 1x1 -> 3
/// channels. Identity when the adaptor is disabled.
template <class T>
Var<T> adaptor_forward(Net<T>& net, Var<T> x) {
  if (x.value().rank() != 4 || x.dim(1) != 3) throw ShapeError("adaptor: expected [N,3,H,W], got " + shape_str(x.shape()));
  if (!net.config().use_adaptor) return x;
  auto h = adaptor_blob1(net, x);
  h = relu(net.bn("adaptor.blob2.bn", net.conv("adaptor.blob2.conv", h, 1)));
  return net.conv("adaptor.out", h, 0);
}

template <class T>
struct EncoderOutput {
  Var<T> fused;               ///< [N, fusion_dim, H/2^(L-1), W/2^(L-1)]
  std::vector<Var<T>> skips;  ///< per-level features, level i at H/2^i
};

/// Projection of level i to the fusion width at the deepest resolution.
template <class T>
Var<T> fusion_projection(Net<T>& net, std::size_t level, Var<T> feature) {
  const std::size_t factor = std::size_t{1} << (net.config().fusion.levels - 1 - level);
  return net.conv("backbone.fuse.level" + std::to_string(level), avgpool2d(feature, factor), 0);
}

/// Sum of all level projections.
template <class T>
Var<T> multi_level_fusion(Net<T>& net, const std::vector<Var<T>>& features) {
  Var<T> z = fusion_projection(net, 0, features[0]);
  for (std::size_t i = 1; i < features.size(); ++i) z = add(z, fusion_projection(net, i, features[i]));
  return z;
}

/// Parallel same-padding convs, each followed by relu, concatenated and
/// reduced by a 1x1 conv (then relu).
template <class T>
Var<T> multi_scale_fusion(Net<T>& net, Var<T> z) {
  std::vector<Var<T>> branches;
  for (auto k : net.config().fusion.kernels) {
    branches.push_back(relu(net.conv("backbone.fuse.k" + std::to_string(k), z, k / 2)));
  }
  return relu(net.conv("backbone.fuse.reduce", concat(branches, 1), 0));
}

template <class T>
EncoderOutput<T> encoder_forward(Net<T>& net, Var<T> x) {
  const auto& f = net.config().fusion;
  const std::size_t div = net.config().spatial_divisor();
  if (x.value().rank() != 4 || x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ShapeError("encoder: input " + shape_str(x.shape()) + " must have H, W divisible by " + std::to_string(div));
  }
  EncoderOutput<T> out;
  Var<T> h = x;
  for (std::size_t i = 0; i < f.levels; ++i) {
    if (i > 0) h = avgpool2d(h, 2);
    const std::string s = "backbone.enc" + std::to_string(i);
    h = relu(net.bn(s + ".bn", net.conv(s + ".conv", h, 1)));
    out.skips.push_back(h);
  }
  out.fused = net.config().use_fusion ? multi_scale_fusion(net, multi_level_fusion(net, out.skips)) : h;
  return out;
}

/// Up-blocks with skip concatenation, then a 1x1 conv and sigmoid:
/// channel 0 optic disc, channel 1 optic cup.
template <class T>
Var<T> seg_logits(Net<T>& net, const EncoderOutput<T>& enc) {
  Var<T> d = enc.fused;
  for (std::size_t j = net.config().fusion.levels - 1; j-- > 0;) {
    const std::string s = "backbone.dec" + std::to_string(j);
    d = concat(std::vector<Var<T>>{upsample_nearest(d, 2), enc.skips[j]}, 1);
    d = relu(net.bn(s + ".bn", net.conv(s + ".conv", d, 1)));
  }
  return net.conv("head_seg.out", d, 0);
}

template <class T>
Var<T> seg_decoder_forward(Net<T>& net, const EncoderOutput<T>& enc) {
  return sigmoid(seg_logits(net, enc));
}

/// Skip-free mirror of the segmentation decoder ending in 3-channel tanh.
template <class T>
Var<T> rec_decoder_forward(Net<T>& net, Var<T> fused) {
  Var<T> d = fused;
  for (std::size_t j = net.config().fusion.levels - 1; j-- > 0;) {
    const std::string s = "head_rec.up" + std::to_string(j);
    d = relu(net.bn(s + ".bn", net.conv(s + ".conv", upsample_nearest(d, 2), 1)));
  }
  return tanh_op(net.conv("head_rec.out", d, 0));
}

template <class T>
Var<T> cls_head_logits(Net<T>& net, Var<T> fused) {
  return linear(global_avg_pool(fused), net.param("head_cls.weight"), net.param("head_cls.bias"));
}

template <class T>
Var<T> cls_head_forward(Net<T>& net, Var<T> fused) {
  return softmax(cls_head_logits(net, fused), 1);
}

template <class T>
struct ModelOutput {
  Var<T> adapted;
  Var<T> seg;                          ///< probabilities [N,2,H,W]
  std::optional<Var<T>> rec;           ///< [N,3,H,W] in (-1,1)
  std::optional<Var<T>> cls_logits;    ///< [N,n_domains]
};

/// Whole network. Auxiliary heads run only when the model has them and
/// `with_aux` is set.
template <class T>
ModelOutput<T> model_forward(Net<T>& net, Var<T> image, bool with_aux = true) {
  ModelOutput<T> out;
  out.adapted = adaptor_forward(net, image);
  auto enc = encoder_forward(net, out.adapted);
  out.seg = seg_decoder_forward(net, enc);
  if (with_aux && net.config().use_multitask) {
    out.rec = rec_decoder_forward(net, enc.fused);
    out.cls_logits = cls_head_logits(net, enc.fused);
  }
  return out;
}

/// Inference helper: probabilities for a batch of images, eval mode.
template <class T>
Tensor<T> predict(ModelParams<T>& params, const Tensor<T>& images) {
  Tape<T> tape;
  Net<T> net(params, tape, Mode::kEval);
  return model_forward(net, tape.constant(images), false).seg.value();
}

template <class U, class T>
ModelParams<U> cast_params(const ModelParams<T>& src) {
  ModelParams<U> dst;
  dst.config = src.config;
  for (const auto& p : src.params()) {
    auto& q = dst.add(p.name, p.value.template cast<U>());
    q.frozen = p.frozen;
  }
  for (const auto& [name, s] : src.all_stats()) {
    auto& d = dst.add_stats(name, s.mean.size());
    d.mean = s.mean.template cast<U>();
    d.var = s.var.template cast<U>();
    d.initialized = s.initialized;
  }
  return dst;
}

// ---------------------------------------------------------------------------
// Checkpoint: "AFNN", u32 version, u32 record count, then per record
// u16 name length, name, u32 rank, u32 dims..., f32 payload (all little
// endian). Parameters come first in registration order, followed by the
// initialized batch-norm statistics as "<layer>.running_mean/.running_var".

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void write_checkpoint(std::ostream& os, const ModelParams<T>& params) {
  std::vector<std::pair<std::string, const Tensor<T>*>> records;
  for (const auto& p : params.params()) records.emplace_back(p.name, &p.value);
  for (const auto& [layer, s] : params.all_stats()) {
    if (!s.initialized) continue;
    records.emplace_back(layer + ".running_mean", &s.mean);
    records.emplace_back(layer + ".running_var", &s.var);
  }
  os.write("AFNN", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (auto v : t->data()) detail::put_le<float>(os, static_cast<float>(v));
  }
}

template <class T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  write_checkpoint(os, params);
  if (!os) throw CheckpointError("write failed: " + path.string());
}

template <class T>
std::string checkpoint_bytes(const ModelParams<T>& params) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, params);
  return os.str();
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::size_t level_count(const std::map<std::string, Shape>& shapes, const std::string& prefix) {
  std::size_t n = 0;
  while (shapes.count(prefix + std::to_string(n) + ".conv.weight")) ++n;
  return n;
}

}  // namespace detail

/// The part of a config that parameter shapes pin down: settings of disabled
/// modules are reset so two configs compare equal iff their checkpoints are
/// interchangeable.
inline ModelConfig architecture_of(ModelConfig c) {
  if (!c.use_adaptor) c.adaptor.channels = 0;
  if (!c.use_fusion) c.fusion.kernels.clear();
  if (!c.use_multitask) c.n_domains = 0;
  return c;
}

/// Reconstructs the architecture from parameter names and shapes.
inline ModelConfig infer_config(const std::map<std::string, Shape>& shapes) {
  auto need = [&](const std::string& name) -> const Shape& {
    auto it = shapes.find(name);
    if (it == shapes.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    return it->second;
  };
  ModelConfig c;
  c.use_adaptor = shapes.count("adaptor.blob1.conv.weight") > 0;
  if (c.use_adaptor) c.adaptor.channels = need("adaptor.blob1.conv.weight")[0];
  c.fusion.levels = detail::level_count(shapes, "backbone.enc");
  if (c.fusion.levels == 0) throw CheckpointError("checkpoint has no encoder stages");
  c.fusion.channels.clear();
  for (std::size_t i = 0; i < c.fusion.levels; ++i) {
    c.fusion.channels.push_back(need("backbone.enc" + std::to_string(i) + ".conv.weight")[0]);
  }
  c.fusion.fusion_dim = c.fusion.channels.back();
  c.use_fusion = shapes.count("backbone.fuse.reduce.weight") > 0;
  c.fusion.kernels.clear();
  for (const auto& [name, s] : shapes) {
    if (name.rfind("backbone.fuse.k", 0) == 0 && detail::ends_with(name, ".weight")) c.fusion.kernels.push_back(s[2]);
  }
  std::sort(c.fusion.kernels.begin(), c.fusion.kernels.end());
  if (c.fusion.kernels.empty()) c.fusion.kernels = {1, 3, 5};
  c.use_multitask = shapes.count("head_cls.weight") > 0;
  if (c.use_multitask) c.n_domains = need("head_cls.weight")[1];
  return c;
}

template <class T>
ModelParams<T> read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "AFNN") throw CheckpointError(what + ": bad magic");
  auto rd = [&]<class U>(U) {
    try {
      return detail::get_le<U>(is, what.c_str());
    } catch (const std::runtime_error&) {
      throw CheckpointError(what + ": truncated file");
    }
  };
  const auto version = rd(std::uint32_t{});
  if (version != kCheckpointVersion) throw CheckpointError(what + ": unsupported version " + std::to_string(version));
  const auto count = rd(std::uint32_t{});

  std::vector<std::pair<std::string, Tensor<T>>> records;
  std::map<std::string, Shape> shapes;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = rd(std::uint16_t{});
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError(what + ": truncated file");
    const auto rank = rd(std::uint32_t{});
    if (rank == 0 || rank > 8) throw CheckpointError(what + ": bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = rd(std::uint32_t{});
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rd(float{}));
    if (!detail::ends_with(name, ".running_mean") && !detail::ends_with(name, ".running_var")) shapes[name] = shape;
    records.emplace_back(std::move(name), std::move(t));
  }

  ModelParams<T> params = init_params<T>(infer_config(shapes), 0);
  auto assign_stats = [&](const std::string& name, Tensor<T>& t) {
    for (std::string suffix : {".running_mean", ".running_var"}) {
      if (!detail::ends_with(name, suffix)) continue;
      const std::string layer = name.substr(0, name.size() - suffix.size());
      if (!params.all_stats().count(layer)) throw CheckpointError(what + ": statistics for unknown layer " + layer);
      auto& s = params.stats(layer);
      if (t.shape() != s.mean.shape()) throw CheckpointError(what + ": shape mismatch for " + name);
      (suffix == ".running_mean" ? s.mean : s.var) = std::move(t);
      s.initialized = true;
      return true;
    }
    return false;
  };
  std::size_t assigned = 0;
  for (auto& [name, t] : records) {
    if (assign_stats(name, t)) continue;
    if (!params.contains(name)) throw CheckpointError(what + ": unexpected parameter " + name);
    auto& p = params.get(name);
    if (p.value.shape() != t.shape()) {
      throw CheckpointError(what + ": shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " +
                            shape_str(p.value.shape()));
    }
    p.value = std::move(t);
    ++assigned;
  }
  if (assigned != params.params().size()) throw CheckpointError(what + ": missing parameters");
  return params;
}

template <class T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint<T>(is, path.string());
}

}  // namespace afnn
