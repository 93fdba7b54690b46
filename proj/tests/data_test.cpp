#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "afnn/data.hpp"

using namespace afnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("afnn_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool subset(const BinaryMask& inner, const BinaryMask& outer) {
  for (std::size_t i = 0; i < inner.bits().size(); ++i)
    if (inner.bits()[i] && !outer.bits()[i]) return false;
  return true;
}

DomainSpec identity_spec(int domain, std::uint64_t seed) {
  DomainSpec s;
  s.domain_id = domain;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(GenerateDomain, DeterministicPerSeed) {
  auto spec = preset_domain(2, 7);
  auto a = generate_domain(spec, 4, 48);
  auto b = generate_domain(spec, 4, 48);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].od, b[i].od);
    EXPECT_EQ(a[i].oc, b[i].oc);
  }
  auto c = generate_domain(preset_domain(2, 8), 1, 48);
  EXPECT_FALSE(a[0].image == c[0].image);
}

TEST(GenerateDomain, CupInsideDiscAndValuesInRange) {
  for (int d = 0; d < 4; ++d) {
    for (const auto& s : generate_domain(preset_domain(d, 11), 20, 64)) {
      EXPECT_TRUE(subset(s.oc, s.od)) << s.id;
      EXPECT_LT(s.oc.popcount(), s.od.popcount());
      EXPECT_GT(s.oc.popcount(), 0u);
      for (float v : s.image.data()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
      }
      EXPECT_EQ(s.domain_id, d);
    }
  }
}

TEST(GenerateDomain, IdentityPhotometricsGiveIdenticalPixelsAcrossDomains) {
  auto a = generate_domain(identity_spec(0, 99), 3, 40);
  auto b = generate_domain(identity_spec(3, 99), 3, 40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].od, b[i].od);
    EXPECT_NE(a[i].domain_id, b[i].domain_id);
  }
}

TEST(GenerateDomain, PresetsDifferInMeanIntensity) {
  std::map<int, std::vector<Tensor<float>>> groups;
  for (int d = 0; d < 4; ++d)
    for (auto& s : generate_domain(preset_domain(d, 5), 16, 64)) groups[d].push_back(s.image);
  const auto gap = metrics::gap_statistics(groups);
  EXPECT_GE(gap.gap, 0.005);
}

TEST(GenerateDomain, RejectsBadArguments) {
  auto spec = preset_domain(0, 1);
  EXPECT_THROW(generate_domain(spec, 0, 64), std::invalid_argument);
  EXPECT_THROW(generate_domain(spec, 1, 31), std::invalid_argument);
  spec.contrast_gain = 2.0;
  EXPECT_THROW(generate_domain(spec, 1, 64), std::invalid_argument);
  // A cup nearly as large as the disc cannot keep a one-pixel margin.
  auto tight = preset_domain(0, 1);
  tight.cup_ratio_range = {0.99, 0.99};
  EXPECT_THROW(generate_domain(tight, 1, 64), DataError);
}

TEST(Dataset, EmptyManifestLoadsNothing) {
  auto dir = scratch_dir("empty");
  save_manifest(DatasetManifest{"none", "train", {}}, dir / "manifest.json");
  EXPECT_TRUE(load_dataset(dir / "manifest.json").empty());
}

TEST(Dataset, RoundTripWithinQuantization) {
  auto dir = scratch_dir("roundtrip");
  auto samples = generate_domain(preset_domain(1, 3), 5, 32);
  auto m = save_samples(samples, dir, "d1", {"train", "train", "train", "test", "test"});
  save_manifest(m, dir / "manifest.json");
  auto loaded = load_dataset(dir / "manifest.json");
  ASSERT_EQ(loaded.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(loaded[i].od, samples[i].od);
    EXPECT_EQ(loaded[i].oc, samples[i].oc);
    EXPECT_EQ(loaded[i].domain_id, 1);
    for (std::size_t k = 0; k < samples[i].image.size(); ++k)
      ASSERT_LE(std::abs(loaded[i].image[k] - samples[i].image[k]), 0.5f / 255.0f + 1e-6f);
  }
  EXPECT_EQ(load_dataset(dir / "manifest.json", "test").size(), 2u);
  EXPECT_EQ(load_dataset(dir / "manifest.json", "train").size(), 3u);
}

TEST(Dataset, MaskThresholdAndErrors) {
  auto dir = scratch_dir("threshold");
  save_netpbm(dir / "img.ppm", RawImage{2, 1, 3, {0, 0, 0, 255, 255, 255}});
  save_netpbm(dir / "od.pgm", RawImage{2, 1, 1, {200, 127}});
  save_netpbm(dir / "oc.pgm", RawImage{2, 1, 1, {128, 0}});
  save_netpbm(dir / "small.pgm", RawImage{1, 1, 1, {255}});
  DatasetManifest m{"t", "train", {{"img.ppm", "od.pgm", "oc.pgm", 2, ""}}};
  save_manifest(m, dir / "ok.json");
  auto s = load_dataset(dir / "ok.json");
  ASSERT_EQ(s.size(), 1u);
  EXPECT_TRUE(s[0].od.get(0, 0));
  EXPECT_FALSE(s[0].od.get(0, 1));
  EXPECT_TRUE(s[0].oc.get(0, 0));
  EXPECT_FLOAT_EQ(s[0].image[1], 1.0f);

  m.entries.push_back({"missing.ppm", "od.pgm", "oc.pgm", 2, ""});
  save_manifest(m, dir / "missing.json");
  try {
    load_dataset(dir / "missing.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos) << e.what();
  }
  m.entries.back() = {"img.ppm", "small.pgm", "oc.pgm", 2, ""};
  save_manifest(m, dir / "mismatch.json");
  EXPECT_THROW(load_dataset(dir / "mismatch.json"), DataError);
}

TEST(CropResize, IdentityWhenRoiAndOutputMatchImage) {
  auto s = generate_domain(preset_domain(0, 4), 1, 40)[0];
  auto o = crop_resize(s, 40, 40);
  EXPECT_EQ(o.image, s.image);
  EXPECT_EQ(o.od, s.od);
  EXPECT_EQ(o.oc, s.oc);
  EXPECT_THROW(crop_resize(s, 40, 0), std::invalid_argument);
  EXPECT_THROW(crop_resize(s, 41, 10), std::invalid_argument);
}

TEST(CropResize, EmptyDiscFallsBackToCentre) {
  Sample s;
  s.image = Tensor<float>({3, 8, 8});
  for (std::size_t i = 0; i < s.image.size(); ++i) s.image[i] = static_cast<float>(i % 64);
  s.od = BinaryMask(8, 8);
  s.oc = BinaryMask(8, 8);
  auto o = crop_resize(s, 4, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(o.image[r * 4 + c], s.image[(r + 2) * 8 + c + 2]);
}

TEST(CropResize, NearestMaskMatchesIndexSubsampling) {
  Sample s;
  s.image = Tensor<float>({3, 8, 8}, 0.5f);
  s.od = BinaryMask(8, 8);
  s.oc = BinaryMask(8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) s.od.set(r, c, (r + c) % 2 == 0);
  auto o = crop_resize(s, 8, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(o.od.get(r, c), s.od.get(2 * r, 2 * c));
}

TEST(Augment, NothingFiresLeavesSampleUnchanged) {
  auto s = generate_domain(preset_domain(3, 2), 1, 32)[0];
  Rng rng(5);
  AugmentOptions none{0, 0, 0, 0};
  auto o = augment(s, rng, none);
  EXPECT_EQ(o.image, s.image);
  EXPECT_EQ(o.od, s.od);
}

TEST(Augment, FlipIsAnInvolution) {
  auto s = generate_domain(preset_domain(3, 2), 1, 32)[0];
  Rng rng(6);
  AugmentOptions flip{1, 0, 0, 0};
  auto once = augment(s, rng, flip);
  EXPECT_FALSE(once.od == s.od);
  auto twice = augment(once, rng, flip);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.od, s.od);
  EXPECT_EQ(twice.oc, s.oc);
}

TEST(Augment, EraseAndNoiseNeverTouchMasks) {
  auto s = generate_domain(preset_domain(1, 2), 1, 32)[0];
  Rng rng(7);
  AugmentOptions wreck{0, 1, 1, 1};
  auto o = augment(s, rng, wreck);
  EXPECT_EQ(o.od, s.od);
  EXPECT_EQ(o.oc, s.oc);
  EXPECT_FALSE(o.image == s.image);
}

TEST(Augment, PipelineKeepsMasksBinaryAndNested) {
  Rng rng(8);
  for (const auto& s : generate_domain(preset_domain(0, 9), 30, 48)) {
    auto o = augment(crop_resize(s, 40, 32), rng);
    EXPECT_TRUE(subset(o.oc, o.od));
    for (auto b : o.od.bits()) ASSERT_LE(b, 1);
    for (float v : o.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(BatchIterator, SeededOrderIsReproducible) {
  std::vector<int> domains(20, 0);
  BatchIterator a(domains, 6, 42, false), b(domains, 6, 42, false);
  EXPECT_EQ(a.epoch(3), b.epoch(3));
  EXPECT_NE(a.epoch(0), a.epoch(1));
  EXPECT_EQ(a.epoch(0).size(), 4u);
}

TEST(BatchIterator, BalancedBatchesDrawEquallyPerDomain) {
  std::vector<int> domains;
  for (int d = 0; d < 3; ++d) domains.insert(domains.end(), 12, d);
  BatchIterator it(domains, 9, 1, true);
  for (const auto& batch : it.epoch(0)) {
    if (batch.size() < 9) continue;
    std::map<int, int> count;
    for (auto i : batch) ++count[domains[i]];
    for (int d = 0; d < 3; ++d) EXPECT_EQ(count[d], 3);
  }
}

TEST(BatchIterator, EpochCoversDatasetComposition) {
  std::vector<int> domains;
  for (int d = 0; d < 3; ++d) domains.insert(domains.end(), static_cast<std::size_t>(5 + 3 * d), d);
  for (bool balanced : {false, true}) {
    BatchIterator it(domains, 4, 2, balanced);
    std::vector<int> seen(domains.size(), 0);
    for (const auto& b : it.epoch(1))
      for (auto i : b) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 1);
  }
  EXPECT_THROW(BatchIterator(domains, domains.size() + 1, 0, true), std::invalid_argument);
  EXPECT_THROW(BatchIterator(domains, 0, 0, true), std::invalid_argument);
}

TEST(BatchIterator, MakeBatchStacksImagesAndMasks) {
  auto samples = generate_domain(preset_domain(0, 1), 3, 32);
  auto b = make_batch<double>(samples, {2, 0});
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.masks.shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(b.images[0], static_cast<double>(samples[2].image[0]));
  EXPECT_EQ(b.masks.at(1, 1, 16, 16), samples[0].oc.get(16, 16) ? 1.0 : 0.0);
}
