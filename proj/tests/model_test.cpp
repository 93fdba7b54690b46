#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "afnn/gradcheck.hpp"
#include "afnn/losses.hpp"
#include "afnn/model.hpp"

using namespace afnn;

namespace {

ModelConfig small_config(std::size_t levels = 3) {
  ModelConfig c;
  c.adaptor.channels = 4;
  c.fusion.levels = levels;
  c.fusion.channels.clear();
  for (std::size_t i = 0; i < levels; ++i) c.fusion.channels.push_back(std::size_t{4} << std::min<std::size_t>(i, 1));
  c.fusion.fusion_dim = c.fusion.channels.back();
  c.n_domains = 3;
  return c;
}

Tensor<double> random_image(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Gives biases and batch-norm shifts nonzero values so that tests exercise them.
template <class T>
void perturb_biases(ModelParams<T>& p, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& prm : p.params()) {
    if (prm.name.ends_with(".bias") || prm.name.ends_with(".beta")) {
      for (auto& v : prm.value.data()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
    }
  }
}

}  // namespace

TEST(Model, ShapeLawForDefaultConfig) {
  auto params = init_params<double>(ModelConfig{}, 1);
  for (std::size_t side : {16u, 32u}) {
    Tape<double> tape;
    Net<double> net(params, tape, Mode::kTrain);
    auto x = tape.constant(random_image({2, 3, side, side}, 2));
    auto adapted = adaptor_forward(net, x);
    EXPECT_EQ(adapted.shape(), x.shape());
    auto enc = encoder_forward(net, adapted);
    EXPECT_EQ(enc.fused.shape(), (Shape{2, 128, side / 8, side / 8}));
    ASSERT_EQ(enc.skips.size(), 4u);
    EXPECT_EQ(enc.skips[3].shape(), (Shape{2, 128, side / 8, side / 8}));
    EXPECT_EQ(seg_decoder_forward(net, enc).shape(), (Shape{2, 2, side, side}));
    EXPECT_EQ(rec_decoder_forward(net, enc.fused).shape(), (Shape{2, 3, side, side}));
    EXPECT_EQ(cls_head_forward(net, enc.fused).shape(), (Shape{2, 4}));
  }
}

TEST(Model, ShapeLawAcrossDepthsAndAblations) {
  for (std::size_t levels : {1u, 2u, 3u}) {
    for (int ablate = 0; ablate < 4; ++ablate) {
      auto cfg = small_config(levels);
      cfg.use_adaptor = ablate != 1;
      cfg.use_fusion = ablate != 2;
      cfg.use_multitask = ablate != 3;
      auto params = init_params<double>(cfg, 3);
      Tape<double> tape;
      Net<double> net(params, tape, Mode::kTrain);
      auto out = model_forward(net, tape.constant(random_image({2, 3, 8, 12}, 4)));
      EXPECT_EQ(out.seg.shape(), (Shape{2, 2, 8, 12}));
      EXPECT_EQ(out.rec.has_value(), cfg.use_multitask);
      if (out.rec) {
        EXPECT_EQ(out.rec->shape(), (Shape{2, 3, 8, 12}));
      }
      if (out.cls_logits) {
        EXPECT_EQ(out.cls_logits->shape(), (Shape{2, 3}));
      }
      // Every registered parameter takes part in the forward pass.
      EXPECT_EQ(net.bound().size(), params.params().size()) << levels << "/" << ablate;
    }
  }
}

TEST(Model, EncoderRejectsIndivisibleInput) {
  auto params = init_params<double>(small_config(3), 1);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  EXPECT_THROW(encoder_forward(net, tape.constant(Tensor<double>({1, 3, 10, 8}))), ShapeError);
}

TEST(Model, SingleLevelFusionHasOneTerm) {
  auto cfg = small_config(1);
  auto params = init_params<double>(cfg, 5);
  perturb_biases(params, 6);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  auto x = tape.constant(random_image({1, 3, 8, 8}, 7));
  auto enc = encoder_forward(net, x);
  ASSERT_EQ(enc.skips.size(), 1u);
  auto z = multi_level_fusion(net, enc.skips);
  auto direct = net.conv("backbone.fuse.level0", enc.skips[0], 0);
  EXPECT_EQ(z.value(), direct.value());
}

TEST(Model, ZeroInputFusedOutputIsBiasPropagation) {
  auto cfg = small_config(3);
  cfg.use_adaptor = false;
  auto params = init_params<double>(cfg, 8);
  perturb_biases(params, 9);
  for (auto& prm : params.params())
    if (prm.name.ends_with(".beta")) prm.value.fill(0.0);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  auto enc = encoder_forward(net, tape.constant(Tensor<double>({2, 3, 8, 8})));

  // Zero input with zero batch-norm shifts: every encoder feature is zero, so
  // the level sum reduces to the sum of projection biases.
  Tape<double> ref;
  const std::size_t F = cfg.fusion.fusion_dim;
  Tensor<double> z({2, F, 2, 2});
  for (std::size_t i = 0; i < cfg.fusion.levels; ++i) {
    const auto& b = params.get("backbone.fuse.level" + std::to_string(i) + ".bias").value;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < F; ++o)
        for (std::size_t p = 0; p < 4; ++p) z[(n * F + o) * 4 + p] += b[o];
  }
  std::vector<Var<double>> branches;
  for (auto k : cfg.fusion.kernels) {
    const std::string s = "backbone.fuse.k" + std::to_string(k);
    branches.push_back(relu(conv2d(ref.constant(z), ref.constant(params.get(s + ".weight").value),
                                   ref.constant(params.get(s + ".bias").value), {1, k / 2})));
  }
  auto expected = relu(conv2d(concat(branches, 1), ref.constant(params.get("backbone.fuse.reduce.weight").value),
                              ref.constant(params.get("backbone.fuse.reduce.bias").value)));
  ASSERT_EQ(enc.fused.shape(), expected.shape());
  for (std::size_t i = 0; i < expected.value().size(); ++i) {
    EXPECT_NEAR(enc.fused.value()[i], expected.value()[i], 1e-12);
  }
}

TEST(Model, MultiLevelFusionIsAdditive) {
  auto cfg = small_config(3);
  auto params = init_params<double>(cfg, 10);
  perturb_biases(params, 11);
  auto x = random_image({2, 3, 8, 8}, 12);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  auto enc = encoder_forward(net, adaptor_forward(net, tape.constant(x)));
  auto z = multi_level_fusion(net, enc.skips);

  for (std::size_t level = 0; level < cfg.fusion.levels; ++level) {
    auto zeroed = params;
    const std::string name = "backbone.fuse.level" + std::to_string(level);
    zeroed.get(name + ".weight").value.fill(0.0);
    zeroed.get(name + ".bias").value.fill(0.0);
    Tape<double> t2;
    Net<double> n2(zeroed, t2, Mode::kTrain);
    auto partial = multi_level_fusion(n2, std::vector<Var<double>>{t2.constant(enc.skips[0].value()),
                                                                   t2.constant(enc.skips[1].value()),
                                                                   t2.constant(enc.skips[2].value())});
    auto contribution = fusion_projection(net, level, enc.skips[level]);
    for (std::size_t i = 0; i < z.value().size(); ++i) {
      EXPECT_NEAR(partial.value()[i] + contribution.value()[i], z.value()[i], 1e-6);
    }
  }
}

TEST(Model, AdaptorBlobOneIgnoresConstantShift) {
  auto params = init_params<double>(small_config(2), 13);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  // Two flat images of different brightness.
  auto a = adaptor_blob1(net, tape.constant(Tensor<double>({1, 3, 8, 8}, 0.2)));
  auto b = adaptor_blob1(net, tape.constant(Tensor<double>({1, 3, 8, 8}, 0.7)));
  for (std::size_t i = 0; i < a.value().size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = random_image({2, 3, 12, 12}, 100 + seed);
    auto shifted = x;
    const double delta = Rng(seed).uniform(-0.5, 0.5);
    for (std::size_t i = 0; i < 3 * 144; ++i) shifted[i] += delta;  // image 0 only
    auto ya = adaptor_blob1(net, tape.constant(x));
    auto yb = adaptor_blob1(net, tape.constant(shifted));
    for (std::size_t i = 0; i < ya.value().size(); ++i) ASSERT_NEAR(ya.value()[i], yb.value()[i], 1e-5);
  }
}

TEST(Model, AdaptorPreservesShapeAndIsDifferentiable) {
  auto params = init_params<double>(small_config(2), 14);
  perturb_biases(params, 15);
  for (std::size_t side : {8u, 11u}) {
    Tape<double> tape;
    Net<double> net(params, tape, Mode::kTrain);
    EXPECT_EQ(adaptor_forward(net, tape.constant(random_image({2, 3, side, side}, 16))).shape(),
              (Shape{2, 3, side, side}));
  }
  auto report = grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        Net<double> net(params, tape, Mode::kTrain);
        return sum(adaptor_forward(net, in[0]));
      },
      {random_image({2, 3, 8, 8}, 17)});
  EXPECT_LE(report.max_rel_error, 1e-4);
}

TEST(Model, AdaptorEvalNeedsStatistics) {
  auto params = init_params<double>(small_config(2), 18);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kEval);
  EXPECT_THROW(adaptor_forward(net, tape.constant(random_image({1, 3, 8, 8}, 19))), std::runtime_error);
}

TEST(Model, HeadsHaveContractedRanges) {
  auto params = init_params<double>(small_config(3), 20);
  perturb_biases(params, 21);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  auto out = model_forward(net, tape.constant(random_image({3, 3, 16, 16}, 22)));
  for (double v : out.seg.value().data()) {
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
  for (double v : out.rec->value().data()) {
    ASSERT_GT(v, -1.0);
    ASSERT_LT(v, 1.0);
  }
  auto probs = softmax(*out.cls_logits, 1).value();
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += probs[n * 3 + k];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Model, ClsHeadUniformOnZeroInputIffBiasZero) {
  auto params = init_params<double>(small_config(2), 23);
  Tape<double> tape;
  Net<double> net(params, tape, Mode::kTrain);
  auto zero = tape.constant(Tensor<double>({2, 8, 4, 4}));
  for (double p : cls_head_forward(net, zero).value().data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  params.get("head_cls.bias").value[1] = 0.5;
  Tape<double> t2;
  Net<double> n2(params, t2, Mode::kTrain);
  auto probs = cls_head_forward(n2, t2.constant(Tensor<double>({2, 8, 4, 4}))).value();
  EXPECT_GT(probs[1], probs[0]);
}

TEST(Model, HeadGradientsMatchFiniteDifferences) {
  auto cfg = small_config(3);
  auto params = init_params<double>(cfg, 24);
  perturb_biases(params, 25);
  auto x = random_image({1, 3, 16, 16}, 26);
  auto w_seg = random_image({1, 2, 16, 16}, 27, -1, 1);
  auto w_rec = random_image({1, 3, 16, 16}, 28, -1, 1);
  GradCheckOptions opt;
  opt.max_coords_per_input = 96;
  auto seg = grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        Net<double> net(params, tape, Mode::kTrain);
        auto enc = encoder_forward(net, in[0]);
        return sum(mul(seg_decoder_forward(net, enc), tape.constant(w_seg)));
      },
      {x}, opt);
  EXPECT_LE(seg.max_rel_error, 1e-4);
  auto rec = grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        Net<double> net(params, tape, Mode::kTrain);
        auto enc = encoder_forward(net, in[0]);
        return sum(mul(rec_decoder_forward(net, enc.fused), tape.constant(w_rec)));
      },
      {x}, opt);
  EXPECT_LE(rec.max_rel_error, 1e-4);
  auto cls = grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        Net<double> net(params, tape, Mode::kTrain);
        return cls_loss(cls_head_logits(net, in[0]), {0, 2});
      },
      {random_image({2, 8, 4, 4}, 29, -1, 1)}, {1e-5, 1e-6});
  EXPECT_TRUE(cls.passed) << cls.max_rel_error;
}

TEST(Model, TotalLossGradientAtProbePixels) {
  auto cfg = small_config(3);
  auto params = init_params<double>(cfg, 30);
  perturb_biases(params, 31);
  auto x = random_image({2, 3, 8, 8}, 32);
  Tensor<double> truth({2, 2, 8, 8});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t r = 2; r < 6; ++r)
      for (std::size_t c = 2; c < 6; ++c) {
        truth.at(n, 0, r, c) = 1.0;
        if (r > 2 && r < 5 && c > 2 && c < 5) truth.at(n, 1, r, c) = 1.0;
      }
  GradCheckOptions opt;
  opt.max_coords_per_input = 24;
  opt.tol = 1e-3;
  auto report = grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
        Net<double> net(params, tape, Mode::kTrain);
        auto out = model_forward(net, in[0]);
        LossWeights w;
        auto target = add_scalar(scale(in[0], 2.0), -1.0);
        return total_loss(weighted_dice_loss(out.seg, truth, w), rec_loss(target, *out.rec),
                          cls_loss(*out.cls_logits, {0, 1}), w)
            .total;
      },
      {x}, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(InitParams, DeterministicAndHeScaled) {
  auto a = init_params<float>(ModelConfig{}, 77);
  auto b = init_params<float>(ModelConfig{}, 77);
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  auto c = init_params<float>(ModelConfig{}, 78);
  EXPECT_NE(checkpoint_bytes(a), checkpoint_bytes(c));

  for (const auto& p : a.params()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (float v : p.value.data()) ASSERT_EQ(v, 0.0f) << p.name;
    } else if (p.name.ends_with(".gamma")) {
      for (float v : p.value.data()) ASSERT_EQ(v, 1.0f) << p.name;
    } else if (p.value.size() >= 4096) {
      const std::size_t fan_in = p.value.rank() == 4 ? p.value.size() / p.value.dim(0) : p.value.dim(0);
      double s2 = 0;
      for (float v : p.value.data()) s2 += double(v) * v;
      const double var = s2 / static_cast<double>(p.value.size());
      EXPECT_NEAR(var / (2.0 / static_cast<double>(fan_in)), 1.0, 0.2) << p.name;
    }
  }
}

TEST(InitParams, GroupsAndFreezing) {
  auto p = init_params<float>(ModelConfig{}, 1);
  std::map<Group, std::size_t> count;
  for (const auto& prm : p.params()) ++count[prm.group];
  EXPECT_EQ(count.size(), 5u);
  EXPECT_EQ(set_frozen(p, "backbone", true), count[Group::kBackbone]);
  for (const auto& prm : p.params()) EXPECT_EQ(prm.frozen, prm.group == Group::kBackbone);
  EXPECT_THROW(set_frozen(p, "decoder", true), std::invalid_argument);
  EXPECT_THROW(init_params<float>([] {
                 ModelConfig c;
                 c.fusion.fusion_dim = 64;
                 return c;
               }(), 1),
               std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsByteExactAndForwardEquivalent) {
  auto cfg = small_config(3);
  auto params = init_params<float>(cfg, 40);
  perturb_biases(params, 41);
  auto x = random_image({2, 3, 8, 8}, 42).cast<float>();
  {
    Tape<float> tape;  // a train-mode pass initializes running statistics
    Net<float> net(params, tape, Mode::kTrain);
    model_forward(net, tape.constant(x));
  }
  const auto bytes = checkpoint_bytes(params);
  std::istringstream in(bytes);
  auto loaded = read_checkpoint<float>(in);
  EXPECT_EQ(checkpoint_bytes(loaded), bytes);
  EXPECT_EQ(predict(loaded, x), predict(params, x));
  auto inferred = loaded.config;
  EXPECT_EQ(inferred.fusion.channels, cfg.fusion.channels);
  EXPECT_EQ(inferred.n_domains, cfg.n_domains);
  EXPECT_EQ(inferred.adaptor.channels, cfg.adaptor.channels);
}

TEST(Checkpoint, DisabledModulesCompareByArchitecture) {
  for (int off = 0; off < 3; ++off) {
    auto cfg = small_config(3);
    cfg.adaptor.channels = 5;
    cfg.fusion.kernels = {1, 3};
    cfg.n_domains = 3;
    (off == 0 ? cfg.use_adaptor : off == 1 ? cfg.use_fusion : cfg.use_multitask) = false;
    const auto params = init_params<float>(cfg, 7);
    std::istringstream in(checkpoint_bytes(params));
    const auto got = architecture_of(read_checkpoint<float>(in).config);
    const auto want = architecture_of(cfg);
    EXPECT_EQ(got.use_adaptor, want.use_adaptor);
    EXPECT_EQ(got.use_fusion, want.use_fusion);
    EXPECT_EQ(got.use_multitask, want.use_multitask);
    EXPECT_EQ(got.adaptor.channels, want.adaptor.channels) << off;
    EXPECT_EQ(got.fusion.kernels, want.fusion.kernels) << off;
    EXPECT_EQ(got.fusion.channels, want.fusion.channels);
    EXPECT_EQ(got.n_domains, want.n_domains) << off;
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto bytes = checkpoint_bytes(init_params<float>(small_config(2), 1));
  auto load = [](std::string b) {
    std::istringstream in(b);
    return read_checkpoint<float>(in);
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(load(bad_version), CheckpointError);
  EXPECT_THROW(load(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(load(bytes.substr(0, 6)), CheckpointError);
  EXPECT_NO_THROW(load(bytes));
}
