#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "afnn/trainer.hpp"

using namespace afnn;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.adaptor.channels = 4;
  m.fusion.levels = 2;
  m.fusion.channels = {4, 8};
  m.fusion.fusion_dim = 8;
  m.fusion.kernels = {1, 3};
  m.n_domains = 3;
  return m;
}

RunConfig tiny_run() {
  RunConfig r;
  r.seed = 7;
  r.batch_size = 4;
  r.image_size = 16;
  r.unseen_domain = 2;
  r.model = tiny_model();
  r.val_fraction = 0.25;
  r.stages = {{1, 1e-3, true, 1.0, 1.0, 1.0}, {1, 1e-3, false, 1.0, 0.5, 0.5}};
  return r;
}

std::vector<Sample> small_samples(int domain, std::size_t n) {
  std::vector<Sample> out;
  for (const auto& s : generate_domain(preset_domain(domain, 5), n, 32)) out.push_back(crop_resize(s, 32, 16));
  return out;
}

std::vector<Sample> tiny_data(std::size_t per_domain = 8) {
  std::vector<Sample> out;
  for (int d = 0; d < 3; ++d) {
    auto s = generate_domain(preset_domain(d, 99), per_domain, 32);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

bool same_values(const ModelParams<float>& a, const ModelParams<float>& b, Group only) {
  for (const auto& p : a.params()) {
    if (p.group != only) continue;
    if (!(p.value == b.get(p.name).value)) return false;
  }
  return true;
}

}  // namespace

TEST(CosineLr, WorkedValues) {
  EXPECT_DOUBLE_EQ(cosine_lr(4e-5, 0, 100), 4e-5);
  EXPECT_NEAR(cosine_lr(4e-5, 50, 100), 2e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(4e-5, 100, 100), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(1.0, 25, 100), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  EXPECT_THROW(cosine_lr(1.0, 0, 0), std::invalid_argument);
  EXPECT_THROW(cosine_lr(1.0, 5, 4), std::invalid_argument);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  for (std::size_t s = 1; s <= 37; ++s) EXPECT_LE(cosine_lr(1.0, s, 37), cosine_lr(1.0, s - 1, 37));
}

TEST(Adam, MatchesScalarRecurrence) {
  ModelParams<double> p;
  p.add("head_seg.out.bias", Tensor<double>({2}, {0.5, -1.0}));
  Adam<double> adam;
  const std::vector<std::vector<double>> gs{{0.1, -2.0}, {-0.3, 1.0}, {0.2, 0.0}};
  double w[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double lr = 0.01;
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    adam.step(p, {{"head_seg.out.bias", Tensor<double>({2}, gs[t - 1])}}, lr);
    for (int i = 0; i < 2; ++i) {
      const double g = gs[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.get("head_seg.out.bias").value[i], w[i], 1e-12) << "step " << t << " idx " << i;
    }
  }
  // First step moves each coordinate by ~lr regardless of gradient scale.
  EXPECT_EQ(adam.slots().at("head_seg.out.bias").t, 3u);
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  ModelParams<float> p;
  p.add("backbone.x.weight", Tensor<float>({3}, {1, 2, 3}));
  Adam<float> adam;
  for (int i = 0; i < 4; ++i) adam.step(p, {{"backbone.x.weight", Tensor<float>({3})}}, 0.1);
  EXPECT_EQ(p.get("backbone.x.weight").value, Tensor<float>({3}, {1, 2, 3}));
}

TEST(Adam, FrozenParametersAndMomentsUntouched) {
  ModelParams<float> p;
  p.add("backbone.a.weight", Tensor<float>({2}, {1, 1}));
  p.add("head_seg.b.weight", Tensor<float>({2}, {1, 1}));
  p.get("backbone.a.weight").frozen = true;
  Adam<float> adam;
  adam.step(p, {{"head_seg.b.weight", Tensor<float>({2}, {1, -1})}}, 0.1);
  EXPECT_EQ(p.get("backbone.a.weight").value, Tensor<float>({2}, {1, 1}));
  EXPECT_FALSE(p.get("head_seg.b.weight").value == Tensor<float>({2}, {1, 1}));
  EXPECT_EQ(adam.slots().count("backbone.a.weight"), 0u);
}

TEST(Adam, NonFiniteGradientNamesParameterAndUpdatesNothing) {
  ModelParams<float> p;
  p.add("head_seg.a.weight", Tensor<float>({1}, {1}));
  p.add("head_seg.b.weight", Tensor<float>({1}, {1}));
  Adam<float> adam;
  try {
    adam.step(p,
              {{"head_seg.a.weight", Tensor<float>({1}, {1})},
               {"head_seg.b.weight", Tensor<float>({1}, {std::numeric_limits<float>::quiet_NaN()})}},
              0.1);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("head_seg.b.weight"), std::string::npos);
  }
  EXPECT_EQ(p.get("head_seg.a.weight").value[0], 1.0f);
  EXPECT_THROW(adam.step(p, {{"head_seg.a.weight", Tensor<float>({1})}}, 0.1), std::invalid_argument);
  EXPECT_THROW(adam.step(p, {{"head_seg.a.weight", Tensor<float>({2})}, {"head_seg.b.weight", Tensor<float>({1})}}, 0.1),
               ShapeError);
}

TEST(RunConfigJson, RoundTripAndStrictKeys) {
  const auto r = tiny_run();
  const auto j = to_json(r);
  const auto back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);

  auto bad = j;
  bad["learning_rate"] = 1.0;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["stages"][0]["warmup"] = 3;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["model"]["depth"] = 3;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["batch_size"] = -1;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["alpha"] = "x";
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["unseen_domain"] = 3;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["image_size"] = 15;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = j;
  bad["alpha"] = -0.1;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  EXPECT_NO_THROW(run_config_from_json(nlohmann::json::object()));
}

TEST(Trainer, ValidationSplitIsPerDomainAndDisjoint) {
  const auto data = tiny_data(8);
  const auto [tr, va] = split_validation(data, 0.25, 3);
  EXPECT_EQ(tr.size() + va.size(), data.size());
  std::map<int, int> per;
  for (const auto& s : va) ++per[s.domain_id];
  for (int d = 0; d < 3; ++d) EXPECT_EQ(per[d], 2);
  std::set<std::string> ids;
  for (const auto& s : tr) ids.insert(s.id);
  for (const auto& s : va) EXPECT_EQ(ids.count(s.id), 0u);
}

TEST(Trainer, ZeroEpochsReturnsInitialParameters) {
  auto run = tiny_run();
  for (auto& s : run.stages) s.epochs = 0;
  const auto res = train(run, tiny_data());
  const auto init = init_params<float>(run.model, run.seed);
  for (const auto& p : init.params()) EXPECT_EQ(res.params.get(p.name).value, p.value) << p.name;
  EXPECT_TRUE(res.history.empty());
  EXPECT_FALSE(res.initial.has_value());
}

TEST(Trainer, UnseenDomainNeverReachesABatch) {
  const auto run = tiny_run();
  TrainHooks hooks;
  std::size_t batches = 0;
  hooks.on_batch = [&](const std::vector<int>& d) {
    ++batches;
    for (int x : d) EXPECT_NE(x, run.unseen_domain);
  };
  train(run, tiny_data(), hooks);
  EXPECT_GT(batches, 0u);
}

TEST(Trainer, StageOneFreezesBackboneOnly) {
  const auto run = tiny_run();
  const auto init = init_params<float>(run.model, run.seed);
  std::optional<ModelParams<float>> after1;
  TrainHooks hooks;
  hooks.on_stage_end = [&](std::size_t stage, const ModelParams<float>& p) {
    if (stage == 1) after1 = p;
  };
  const auto res = train(run, tiny_data(), hooks);
  ASSERT_TRUE(after1);
  EXPECT_TRUE(same_values(init, *after1, Group::kBackbone));
  EXPECT_FALSE(same_values(init, *after1, Group::kAdaptor));
  EXPECT_FALSE(same_values(init, *after1, Group::kHeadSeg));
  EXPECT_FALSE(same_values(*after1, res.params, Group::kBackbone));
  ASSERT_EQ(res.history.size(), 2u);
  EXPECT_EQ(res.history[0].stage, 1u);
  EXPECT_EQ(res.history[1].stage, 2u);
  for (const auto& p : res.params.params()) EXPECT_FALSE(p.frozen);
}

TEST(Trainer, DeterministicForFixedSeed) {
  const auto run = tiny_run();
  const auto data = tiny_data();
  const auto a = train(run, data);
  const auto b = train(run, data);
  EXPECT_EQ(checkpoint_bytes(a.params), checkpoint_bytes(b.params));
  std::ostringstream ha, hb;
  write_history_csv(ha, a.history);
  write_history_csv(hb, b.history);
  EXPECT_EQ(ha.str(), hb.str());
  EXPECT_EQ(ha.str().substr(0, ha.str().find('\n')), kHistoryCsvHeader);
}

TEST(Trainer, LossDecreasesOnTinyProblem) {
  auto run = tiny_run();
  run.augment = false;
  run.stages = {{0, 1e-3, true, 1, 1, 1}, {12, 3e-3, false, 1, 0.5, 0.5}};
  const auto res = train(run, tiny_data());
  ASSERT_EQ(res.history.size(), 12u);
  EXPECT_LT(res.history.back().loss.seg, res.history.front().loss.seg);
  for (const auto& r : res.history) EXPECT_TRUE(std::isfinite(r.loss.total));
}

TEST(Trainer, RejectsSingleSourceDomain) {
  auto run = tiny_run();
  std::vector<Sample> data;
  for (const auto& s : tiny_data())
    if (s.domain_id != 1) data.push_back(s);
  EXPECT_THROW(train(run, data), ConfigError);
}

TEST(Evaluate, PerfectPredictionScoresOne) {
  // A model whose seg head always saturates at 1 on both channels scores
  // perfectly on samples whose masks cover the whole image.
  auto cfg = tiny_model();
  auto params = init_params<float>(cfg, 1);
  for (auto& p : params.params()) {
    if (p.name.rfind("head_seg.out", 0) == 0) p.value.fill(p.name.ends_with("bias") ? 50.0f : 0.0f);
  }
  for (auto& [name, st] : params.all_stats()) {
    st.mean.fill(0.0f);
    st.var.fill(1.0f);
    st.initialized = true;
  }
  auto samples = small_samples(0, 3);
  for (auto& s : samples) {
    s.od = metrics::BinaryMask(16, 16);
    s.oc = metrics::BinaryMask(16, 16);
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c) {
        s.od.set(r, c, true);
        s.oc.set(r, c, true);
      }
  }
  const auto recs = evaluate(params, samples, 0.5);
  ASSERT_EQ(recs.size(), 6u);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].sample_id, samples[i / 2].id);
    EXPECT_EQ(recs[i].structure, i % 2 ? metrics::Structure::kOpticCup : metrics::Structure::kOpticDisc);
    EXPECT_DOUBLE_EQ(recs[i].dsc, 1.0);
    EXPECT_EQ(recs[i].hd, 0.0);
    EXPECT_EQ(recs[i].asd, 0.0);
  }
}

TEST(Evaluate, IndependentOfThreadCountAndBatch) {
  auto params = init_params<float>(tiny_model(), 3);
  for (auto& [name, st] : params.all_stats()) {
    st.mean.fill(0.0f);
    st.var.fill(1.0f);
    st.initialized = true;
  }
  const auto samples = small_samples(1, 5);
  const auto a = evaluate(params, samples, 0.5, 16);
  const auto b = evaluate(params, samples, 0.5, 2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].dsc, b[i].dsc);
    EXPECT_EQ(a[i].hd, b[i].hd);
  }
}

TEST(ParallelFor, CoversRangeAndRethrows) {
  std::vector<int> hits(101, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; }, 4);
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }, 3),
               std::runtime_error);
}
