#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "rdcssl/classifier.hpp"
#include "rdcssl/data.hpp"
#include "rdcssl/gradcheck.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/pipeline.hpp"

using namespace rdcssl;

namespace {

Image random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Image img{h, w, c, {}};
  img.pixels.resize(img.size());
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

MaeConfig tiny_config() {
  MaeConfig c;
  c.height = c.width = 8;
  c.patch = 2;
  c.embed = 8;
  c.depth = 1;
  c.decoder_depth = 1;
  c.mlp_ratio = 1;
  return c;
}

template <typename S>
Tensor<S> random_patches(const MaeConfig& c, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<S> d(batch * c.tokens() * c.patch_dim());
  for (auto& v : d) v = static_cast<S>(rng.uniform());
  return Tensor<S>::from({batch, c.tokens(), c.patch_dim()}, std::move(d));
}

}  // namespace

TEST(Patchify, FourByFourIntoFourPatches) {
  Image img{4, 4, 1, {}};
  img.pixels.resize(16);
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0f);
  auto g = patchify(img, 2);
  ASSERT_EQ(g.count(), 4u);
  ASSERT_EQ(g.patch_dim(), 4u);
  // patch k holds the 2x2 block at grid cell (k / 2, k % 2), rows flattened
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t gy = k / 2, gx = k % 2;
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) {
        EXPECT_EQ(g.patches[k * 4 + dy * 2 + dx], img.at(gy * 2 + dy, gx * 2 + dx));
      }
  }
}

TEST(Patchify, ConstantImageGivesConstantPatches) {
  Image img{6, 6, 2, std::vector<float>(72, 0.25f)};
  auto g = patchify(img, 3);
  for (float v : g.patches) EXPECT_EQ(v, 0.25f);
}

TEST(Patchify, EightByEightPatchTwoHasSixteenPatches) {
  EXPECT_EQ(patchify(random_image(8, 8, 1, 1), 2).count(), 16u);
}

TEST(Patchify, NonDivisibleSuggestsValidSides) {
  try {
    patchify(random_image(6, 9, 1, 2), 4);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("valid patch sides: 1, 3"), std::string::npos) << e.what();
  }
}

TEST(Patchify, RoundTripIsExact) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto img = random_image(12, 8, 3, seed);
    auto back = unpatchify(patchify(img, 4));
    EXPECT_EQ(back.pixels, img.pixels);
    EXPECT_EQ(back.height, 12u);
    EXPECT_EQ(back.width, 8u);
  }
}

TEST(SampleMask, SixteenAtThreeQuartersMasksTwelve) {
  Rng rng(0);
  auto m = sample_mask(16, 0.75, rng);
  EXPECT_EQ(m.masked.size(), 12u);
  EXPECT_EQ(m.visible.size(), 4u);
}

TEST(SampleMask, ZeroRateMasksNothing) {
  Rng rng(0);
  auto m = sample_mask(16, 0.0, rng);
  EXPECT_TRUE(m.masked.empty());
  EXPECT_EQ(m.visible.size(), 16u);
}

TEST(SampleMask, SameSeedSameMask) {
  Rng a(7), b(7);
  EXPECT_EQ(sample_mask(10, 0.5, a).masked, sample_mask(10, 0.5, b).masked);
}

TEST(SampleMask, PartitionsIndices) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    auto m = sample_mask(37, 0.6, rng);
    EXPECT_EQ(m.masked.size(), 22u);  // floor(37 * 0.6) = floor(22.2)
    std::vector<std::size_t> all = m.masked;
    all.insert(all.end(), m.visible.begin(), m.visible.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) ASSERT_EQ(all[i], i);
    EXPECT_TRUE(std::is_sorted(m.masked.begin(), m.masked.end()));
    EXPECT_TRUE(std::is_sorted(m.visible.begin(), m.visible.end()));
  }
}

TEST(SampleMask, FullRateRejected) {
  Rng rng(0);
  EXPECT_THROW(sample_mask(16, 1.0, rng), ContractError);
  EXPECT_THROW(sample_mask(16, 1.5, rng), ConfigError);
}

TEST(MaeForward, UntrainedShapesAndFinite) {
  auto c = tiny_config();
  MaeModel<float> model(c, 1);
  auto x = random_patches<float>(c, 3, 2);
  Rng rng(5);
  auto masks = draw_masks(3, c.tokens(), 0.75, rng);
  auto out = model.forward(x, masks);
  EXPECT_EQ(out.reconstruction.shape(), (Shape{3, 12, 4}));
  EXPECT_EQ(out.features.shape(), (Shape{3, 4, 8}));
  for (float v : out.reconstruction.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MaeForward, NoMaskGivesAllFeaturesAndNoReconstruction) {
  auto c = tiny_config();
  MaeModel<float> model(c, 1);
  std::vector<MaskSpec> masks(2, no_mask(c.tokens()));
  auto out = model.forward(random_patches<float>(c, 2, 3), masks);
  EXPECT_FALSE(out.reconstruction.defined());
  EXPECT_EQ(out.features.shape(), (Shape{2, 16, 8}));
  // identical to the full-sequence encoder
  auto full = model.encode(random_patches<float>(c, 2, 3));
  EXPECT_TRUE(std::equal(full.data().begin(), full.data().end(), out.features.data().begin()));
}

TEST(MaeForward, DeterministicGivenSeed) {
  auto c = tiny_config();
  MaeModel<float> a(c, 9), b(c, 9);
  auto x = random_patches<float>(c, 2, 4);
  Rng r1(1), r2(1);
  auto m1 = draw_masks(2, c.tokens(), 0.5, r1);
  auto m2 = draw_masks(2, c.tokens(), 0.5, r2);
  auto ya = a.forward(x, m1).reconstruction;
  auto yb = b.forward(x, m2).reconstruction;
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST(MaeForward, ReconstructionAlignedWithMaskedIndices) {
  // Changing a visible patch alters the encoding; the output row count and
  // the target gather must follow masked_idx order.
  auto c = tiny_config();
  MaeModel<double> model(c, 2);
  auto x = random_patches<double>(c, 1, 6);
  Rng rng(2);
  auto masks = draw_masks(1, c.tokens(), 0.5, rng);
  auto target = masked_targets(x, masks);
  for (std::size_t i = 0; i < masks[0].masked.size(); ++i) {
    const std::size_t src = masks[0].masked[i];
    for (std::size_t k = 0; k < c.patch_dim(); ++k) {
      EXPECT_EQ(target.data()[i * c.patch_dim() + k], x.data()[src * c.patch_dim() + k]);
    }
  }
}

TEST(MaeForward, WrongPatchShapeRejected) {
  auto c = tiny_config();
  MaeModel<float> model(c, 1);
  auto bad = Tensor<float>::zeros({1, 15, 4});
  std::vector<MaskSpec> masks(1, no_mask(15));
  EXPECT_THROW(model.forward(bad, masks), DimensionError);
}

TEST(LossSsl, IdenticalIsZero) {
  auto y = Tensor<double>::full({2, 3, 4}, 0.3);
  EXPECT_EQ(loss_ssl(y, y, 2, 1).item(), 0.0);
}

TEST(LossSsl, UnitErrorOnOnePatch) {
  auto y = Tensor<double>::full({1, 4}, 1.0);
  auto x = Tensor<double>::zeros({1, 4});
  EXPECT_DOUBLE_EQ(loss_ssl(y, x, 2, 1).item(), 1.0);
}

TEST(LossSsl, DoublingMaskedCountKeepsLoss) {
  Rng rng(4);
  std::vector<double> err(8);
  for (auto& v : err) v = rng.normal();
  std::vector<double> twice(err);
  twice.insert(twice.end(), err.begin(), err.end());
  auto one = loss_ssl(Tensor<double>::from({2, 4}, err), Tensor<double>::zeros({2, 4}), 2, 1).item();
  auto two = loss_ssl(Tensor<double>::from({4, 4}, twice), Tensor<double>::zeros({4, 4}), 2, 1).item();
  EXPECT_NEAR(one, two, 1e-15);
}

TEST(LossSsl, RowPermutationInvariant) {
  Rng rng(8);
  const std::size_t m = 7, p = 4;
  std::vector<double> y(m * p), x(m * p);
  for (auto& v : y) v = rng.normal();
  for (auto& v : x) v = rng.normal();
  const double base = loss_ssl(Tensor<double>::from({m, p}, y), Tensor<double>::from({m, p}, x), 2, 1).item();
  for (int t = 0; t < 10; ++t) {
    auto perm = rng.permutation(m);
    std::vector<double> yp(m * p), xp(m * p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        yp[i * p + k] = y[perm[i] * p + k];
        xp[i * p + k] = x[perm[i] * p + k];
      }
    EXPECT_NEAR(loss_ssl(Tensor<double>::from({m, p}, yp), Tensor<double>::from({m, p}, xp), 2, 1).item(), base, 1e-14);
  }
}

TEST(LossSsl, NoMaskedPatchesRejected) {
  EXPECT_THROW(loss_ssl(Tensor<double>{}, Tensor<double>{}, 2, 1), ContractError);
}

TEST(LossSsl, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> y(3 * 5 * 4), x(3 * 5 * 4);
    for (auto& v : y) v = rng.normal();
    for (auto& v : x) v = rng.normal();
    auto target = Tensor<double>::from({3, 5, 4}, x);
    auto yt = Tensor<double>::from({3, 5, 4}, y, true);
    auto err = finite_diff_check<double>([&](const Tensor<double>& t) { return loss_ssl(t, target, 2, 1); }, yt, 1e-5);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(LossSsl, EndToEndModelGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MaeModel<double> model(c, seed);
    auto x = random_patches<double>(c, 2, seed + 100);
    Rng rng(seed);
    auto masks = draw_masks(2, c.tokens(), 0.75, rng);
    auto loss = [&]() {
      auto out = model.forward(x, masks);
      return loss_ssl(out.reconstruction, masked_targets(x, masks), c.patch, c.channels);
    };
    // every parameter of one encoder block, the mask token and the head
    for (auto& [name, t] : model.named_parameters()) {
      if (name.find("fc2") == std::string::npos && name != "decoder.mask_token" && name != "tokenizer.bias" &&
          name.find("query.weight") == std::string::npos) {
        continue;
      }
      EXPECT_LT(finite_diff_check_leaf<double>(loss, t, 1e-5), 1e-4) << name << " seed " << seed;
    }
  }
}

TEST(Checkpoint, RoundTripRestoresParameters) {
  auto dir = std::filesystem::temp_directory_path() / "rdcssl_test_ckpt";
  std::filesystem::remove_all(dir);
  auto c = tiny_config();
  MaeModel<float> model(c, 3);
  save_checkpoint(dir, model);
  auto back = load_checkpoint<float>(dir);
  EXPECT_EQ(back.config(), c);
  auto a = model.named_parameters(), b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  std::filesystem::remove_all(dir);
}

TEST(MaeTraining, ThreeHundredEpochsHalveTheLoss) {
  SynthDatasetSpec spec;
  spec.n_images = 48;
  spec.height = spec.width = 16;
  spec.seed = 5;
  Dataset data;
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    auto lat = synth_latent(spec, i);
    data.images.push_back(Image{16, 16, 1, window_transform(lat.field, spec.windows[0])});
    data.labels.push_back(lat.label);
    data.domains.push_back(1);
    data.names.push_back(std::to_string(i));
  }
  MaeConfig c;
  c.height = c.width = 16;
  c.patch = 4;
  c.embed = 32;
  c.depth = 2;
  MaeModel<float> model(c, 0);
  StagePlan plan;
  plan.name = "s1";
  plan.epochs = 300;
  plan.batch_size = 16;
  TrainConfig train;  // default schedule: warmup 40, peak 0.00015
  auto logs = run_stage(plan, 0, train, model, data, nullptr, 0);
  ASSERT_EQ(logs.size(), 300u);
  EXPECT_LE(logs.back().l_ssl, 0.5 * logs.front().l_ssl)
      << "epoch 1: " << logs.front().l_ssl << ", epoch 300: " << logs.back().l_ssl;
}
