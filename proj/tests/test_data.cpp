#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "rdcssl/data.hpp"

using namespace rdcssl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("rdcssl_data_" + name);
  fs::remove_all(dir);
  return dir;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

// 4x4 average pooling -> standardized features -> logistic regression by
// full-batch gradient descent. Returns test accuracy.
double pooled_pixel_probe(const Dataset& ds, const Split& split) {
  const std::size_t cells = 4;
  auto features = [&](const Image& img) {
    std::vector<double> f(cells * cells, 0.0);
    const std::size_t ch = img.height / cells, cw = img.width / cells;
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) f[(y / ch) * cells + x / cw] += img.at(y, x) / static_cast<double>(ch * cw);
    return f;
  };
  const std::size_t d = cells * cells;
  std::vector<std::vector<double>> x(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) x[i] = features(ds.images[i]);
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (auto i : split.train)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x[i][j] / static_cast<double>(split.train.size());
  for (auto i : split.train)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x[i][j] - mu[j]) * (x[i][j] - mu[j]) / static_cast<double>(split.train.size());
  for (auto& xi : x)
    for (std::size_t j = 0; j < d; ++j) xi[j] = (xi[j] - mu[j]) / std::sqrt(sd[j] + 1e-12);
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (auto i : split.train) {
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[i][j];
      const double err = 1.0 / (1.0 + std::exp(-z)) - ds.labels[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * x[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.5 * gw[j] / static_cast<double>(split.train.size());
    b -= 0.5 * gb / static_cast<double>(split.train.size());
  }
  std::size_t correct = 0;
  for (auto i : split.test) {
    double z = b;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x[i][j];
    correct += (z > 0.0) == (ds.labels[i] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(split.test.size());
}

}  // namespace

TEST(Window, CenterMapsToHalf) { EXPECT_EQ(window_value(40, {40, 400}), 0.5); }

TEST(Window, ClampsOutsideRange) {
  EXPECT_EQ(window_value(-160, {40, 400}), 0.0);
  EXPECT_EQ(window_value(-900, {40, 400}), 0.0);
  EXPECT_EQ(window_value(240, {40, 400}), 1.0);
  EXPECT_EQ(window_value(1000, {40, 400}), 1.0);
}

TEST(Window, HandExample) { EXPECT_EQ(window_value(140, {40, 400}), 0.75); }

TEST(Window, NonPositiveWidthRejected) {
  std::vector<double> x{0.0};
  EXPECT_THROW(window_transform(x, {40, 0}), ConfigError);
  EXPECT_THROW(window_transform(x, {40, -5}), ConfigError);
}

TEST(Pgm, BinaryGrayscaleDecodes) {
  std::string s = "P5\n# made by hand\n16 16\n255\n";
  for (int i = 0; i < 256; ++i) s.push_back(static_cast<char>(i));
  auto img = decode_pgm(bytes_of(s));
  EXPECT_EQ(img.height, 16u);
  EXPECT_EQ(img.width, 16u);
  EXPECT_EQ(img.channels, 1u);
  for (float p : img.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
  EXPECT_EQ(img.pixels[0], 0.0f);
  EXPECT_EQ(img.pixels[255], 1.0f);
}

TEST(Pgm, AsciiVariantRejectedWithExpectedMagic) {
  try {
    decode_pgm(bytes_of("P2\n2 2\n255\n0 1 2 3\n"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("P5"), std::string::npos) << e.what();
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Pgm, TruncatedRaster) {
  EXPECT_THROW(decode_pgm(bytes_of("P5\n4 4\n255\nabc")), ParseError);
}

TEST(Pgm, RoundTrip) {
  Image img{3, 5, 1, {}};
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<float>(i * 17) / 255.0f);
  auto back = decode_pgm(encode_pgm(img));
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Synth, ManifestCounts) {
  auto dir = scratch("counts");
  SynthDatasetSpec spec;
  spec.n_images = 100;
  spec.height = spec.width = 16;
  auto rows = generate_synth(spec, dir, false);
  auto read = read_manifest(dir / kManifestName);
  EXPECT_EQ(rows.size(), 200u);
  EXPECT_EQ(read.size(), 200u);
  std::set<int> labels, domains;
  for (const auto& r : read) labels.insert(r.label), domains.insert(r.domain);
  EXPECT_EQ(labels, (std::set<int>{0, 1}));
  EXPECT_EQ(domains, (std::set<int>{1, 2}));
  // labels agree across domains
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(read[i].label, read[100 + i].label);
}

TEST(Synth, SameSeedBitwiseIdentical) {
  auto a = scratch("det_a"), b = scratch("det_b");
  SynthDatasetSpec spec;
  spec.n_images = 20;
  spec.height = spec.width = 16;
  generate_synth(spec, a, false);
  generate_synth(spec, b, false);
  auto da = ingest(a, 16, 16, 1), db = ingest(b, 16, 16, 1);
  EXPECT_EQ(da.fingerprint, db.fingerprint);
  for (const auto& r : read_manifest(a / kManifestName)) EXPECT_EQ(read_file(a / r.path), read_file(b / r.path));
}

TEST(Synth, NonEmptyDirectoryNeedsForce) {
  auto dir = scratch("force");
  SynthDatasetSpec spec;
  spec.n_images = 4;
  spec.height = spec.width = 8;
  generate_synth(spec, dir, false);
  EXPECT_THROW(generate_synth(spec, dir, false), StateError);
  EXPECT_NO_THROW(generate_synth(spec, dir, true));
}

TEST(Synth, DomainHistogramsDiffer) {
  auto dir = scratch("shift");
  SynthDatasetSpec spec;
  spec.n_images = 100;
  generate_synth(spec, dir, false);
  auto d1 = ingest(dir, 32, 32, 1, 1), d2 = ingest(dir, 32, 32, 1, 2);
  std::vector<float> a, b;
  for (const auto& img : d1.images) a.insert(a.end(), img.pixels.begin(), img.pixels.end());
  for (const auto& img : d2.images) b.insert(b.end(), img.pixels.begin(), img.pixels.end());
  ASSERT_EQ(a.size(), b.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // W1 between equal-size empirical distributions: mean gap of sorted samples
  double w1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w1 += std::abs(static_cast<double>(a[i]) - b[i]);
  w1 /= static_cast<double>(a.size());
  EXPECT_GT(w1, 0.05);
  EXPECT_EQ(d1.labels, d2.labels);
}

TEST(Synth, ClassesLearnableFromPooledPixels) {
  auto dir = scratch("probe");
  SynthDatasetSpec spec;
  spec.n_images = 500;
  generate_synth(spec, dir, false);
  auto d1 = ingest(dir, 32, 32, 1, 1);
  auto split = stratified_split(d1.labels, 0.0, 0.3, 1);
  const double acc = pooled_pixel_probe(d1, split);
  EXPECT_GT(acc, 0.8) << "probe accuracy " << acc;
}

TEST(Ingest, SizeMismatch) {
  auto dir = scratch("size");
  SynthDatasetSpec spec;
  spec.n_images = 2;
  spec.height = spec.width = 16;
  generate_synth(spec, dir, false);
  EXPECT_THROW(ingest(dir, 32, 32, 1), DimensionError);
}

TEST(Ingest, PixelsInUnitRange) {
  auto dir = scratch("range");
  SynthDatasetSpec spec;
  spec.n_images = 6;
  spec.height = spec.width = 16;
  generate_synth(spec, dir, false);
  auto ds = ingest(dir, 16, 16, 1);
  EXPECT_EQ(ds.size(), 12u);
  for (const auto& img : ds.images)
    for (float p : img.pixels) EXPECT_TRUE(p >= 0.0f && p <= 1.0f);
}

TEST(Split, GroupSplitKeepsRenderingsTogether) {
  auto dir = scratch("group");
  SynthDatasetSpec spec;
  spec.n_images = 60;
  spec.height = spec.width = 8;
  generate_synth(spec, dir, false);
  auto ds = ingest(dir, 8, 8, 1);
  auto s = group_split(ds, 0.2, 0.3, 4);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), ds.size());
  std::set<std::string> train_names, test_names;
  for (auto i : s.train) train_names.insert(ds.names[i]);
  for (auto i : s.test) test_names.insert(ds.names[i]);
  for (const auto& n : test_names) EXPECT_EQ(train_names.count(n), 0u) << n;
}

TEST(Split, StratifiedIsDeterministicAndBalanced) {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 2);
  auto a = stratified_split(labels, 0.2, 0.3, 9), b = stratified_split(labels, 0.2, 0.3, 9);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.test.size(), 30u);
  EXPECT_EQ(a.val.size(), 20u);
  int ones = 0;
  for (auto i : a.test) ones += labels[i];
  EXPECT_EQ(ones, 15);
}

TEST(Flip, Mirrors) {
  Image img{1, 3, 1, {1, 2, 3}};
  EXPECT_EQ(hflip(img).pixels, (std::vector<float>{3, 2, 1}));
}
