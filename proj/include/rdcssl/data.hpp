#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdcssl/error.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/rng.hpp"
#include "rdcssl/serialize.hpp"

namespace rdcssl {

// Intensity window on the latent (HU-like) field.
struct WindowSpec {
  double center = 40.0;
  double width = 400.0;

  void validate(const std::string& pointer = {}) const {
    if (!(width > 0.0) || !std::isfinite(width) || !std::isfinite(center)) {
      throw ConfigError("window: width must be a finite value > 0, got " + std::to_string(width), pointer);
    }
  }
};

inline double window_value(double x, const WindowSpec& w) {
  return std::clamp((x - (w.center - w.width / 2.0)) / w.width, 0.0, 1.0);
}

inline std::vector<float> window_transform(std::span<const double> latent, const WindowSpec& w) {
  w.validate();
  std::vector<float> out(latent.size());
  for (std::size_t i = 0; i < latent.size(); ++i) out[i] = static_cast<float>(window_value(latent[i], w));
  return out;
}

inline void to_json(nlohmann::json& j, const WindowSpec& w) { j = {{"center", w.center}, {"width", w.width}}; }
inline void from_json(const nlohmann::json& j, WindowSpec& w) {
  w.center = j.value("center", w.center);
  w.width = j.value("width", w.width);
}

struct SynthDatasetSpec {
  std::size_t n_images = 500;
  std::size_t height = 32, width = 32;
  std::size_t n_classes = 2;
  std::uint64_t seed = 7;
  // mediastinal-like and lung-like
  std::vector<WindowSpec> windows{{40.0, 400.0}, {-600.0, 1500.0}};

  void validate(const std::string& base = "/data") const {
    if (n_images == 0) throw ConfigError("synth: n_images must be >= 1", base + "/n_images");
    if (height < 8 || width < 8) throw ConfigError("synth: images must be at least 8x8", base + "/height");
    if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2", base + "/n_classes");
    if (windows.empty()) throw ConfigError("synth: at least one window is required", base + "/windows");
    for (std::size_t i = 0; i < windows.size(); ++i) windows[i].validate(base + "/windows/" + std::to_string(i));
  }
};

inline void to_json(nlohmann::json& j, const SynthDatasetSpec& s) {
  j = {{"n_images", s.n_images}, {"height", s.height}, {"width", s.width},
       {"n_classes", s.n_classes}, {"seed", s.seed}, {"windows", s.windows}};
}
inline void from_json(const nlohmann::json& j, SynthDatasetSpec& s) {
  s.n_images = j.value("n_images", s.n_images);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.n_classes = j.value("n_classes", s.n_classes);
  s.seed = j.value("seed", s.seed);
  if (j.contains("windows")) s.windows = j.at("windows").get<std::vector<WindowSpec>>();
}

struct LatentImage {
  std::vector<double> field;  // H*W, latent units in [-1000, 1000]
  int label = 0;
};

// Air-filled background with faint vessel texture (only visible under a wide
// window) plus soft-tissue blobs. Blob count and size grow with the class.
inline LatentImage synth_latent(const SynthDatasetSpec& spec, std::size_t index) {
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + index * 0xD1B54A32D192ED03ULL + 1);
  LatentImage out;
  out.label = static_cast<int>(index % spec.n_classes);
  const std::size_t h = spec.height, w = spec.width;
  const double scale = static_cast<double>(std::min(h, w)) / 32.0;
  out.field.assign(h * w, 0.0);

  const double base = rng.uniform(-850.0, -750.0);
  double fx[3], fy[3], ph[3], amp[3];
  for (int k = 0; k < 3; ++k) {
    fx[k] = rng.uniform(0.1, 0.6) / scale;
    fy[k] = rng.uniform(0.1, 0.6) / scale;
    ph[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    amp[k] = rng.uniform(40.0, 110.0);
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = base;
      for (int k = 0; k < 3; ++k) v += amp[k] * std::sin(fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y) + ph[k]);
      out.field[y * w + x] = v + rng.normal(0.0, 25.0);
    }

  const double c = static_cast<double>(out.label);
  const std::size_t blobs = 1 + 2 * static_cast<std::size_t>(out.label) + rng.below(2);
  for (std::size_t b = 0; b < blobs; ++b) {
    const double radius = scale * (rng.uniform(1.8, 2.8) + 1.2 * c);
    const double cy = rng.uniform(radius, static_cast<double>(h) - radius);
    const double cx = rng.uniform(radius, static_cast<double>(w) - radius);
    const double level = rng.uniform(60.0, 160.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double t = std::sqrt(dx * dx + dy * dy) / radius;
        if (t >= 1.3) continue;
        // smooth edge: full weight inside the radius, fading to 0 at 1.3 r
        const double a = t <= 1.0 ? 1.0 : 0.5 * (1.0 + std::cos(std::numbers::pi * (t - 1.0) / 0.3));
        auto& px = out.field[y * w + x];
        px = (1.0 - a) * px + a * (level + rng.normal(0.0, 15.0));
      }
  }
  for (auto& v : out.field) v = std::clamp(v, -1000.0, 1000.0);
  return out;
}

// ---- PGM (binary P5, 8-bit) ----

inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  if (img.channels != 1) throw DimensionError("pgm: only single-channel images can be written");
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : img.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

inline Image decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    std::string got = bytes.size() >= 2 ? std::string{static_cast<char>(bytes[0]), static_cast<char>(bytes[1])} : "<eof>";
    throw ParseError("pgm: expected magic \"P5\" (binary 8-bit PGM), found \"" + got + "\"", 0);
  }
  pos = 2;
  auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  auto read_int = [&](const char* what) {
    for (;;) {
      while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
      throw ParseError(std::string("pgm: expected ") + what, pos);
    }
    std::size_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1'000'000) throw ParseError(std::string("pgm: ") + what + " out of range", pos);
    }
    return v;
  };
  const std::size_t w = read_int("width"), h = read_int("height");
  const std::size_t start_maxval = pos;
  const std::size_t maxval = read_int("maxval");
  if (w == 0 || h == 0) throw ParseError("pgm: zero image dimension", start_maxval);
  if (maxval == 0 || maxval > 255) throw ParseError("pgm: maxval must be in [1, 255] for 8-bit P5", start_maxval);
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw ParseError("pgm: expected whitespace after maxval", pos);
  ++pos;
  if (bytes.size() - pos < w * h) {
    throw ParseError("pgm: truncated raster, need " + std::to_string(w * h) + " bytes, have " +
                         std::to_string(bytes.size() - pos),
                     bytes.size());
  }
  Image img{h, w, 1, {}};
  img.pixels.resize(w * h);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return img;
}

inline void save_pgm(const std::filesystem::path& path, const Image& img) { write_file(path, encode_pgm(img)); }
inline Image load_pgm(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  try {
    return decode_pgm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---- manifest ----

struct ManifestRow {
  std::string path;  // relative to the dataset directory
  int label = 0;
  int domain = 1;
};

inline constexpr const char* kManifestName = "manifest.csv";

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  os << "path,label,domain\n";
  for (const auto& r : rows) os << r.path << ',' << r.label << ',' << r.domain << '\n';
  auto s = os.str();
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path.string());
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != "path,label,domain") {
    throw ParseError("manifest: expected header \"path,label,domain\" in " + path.string(), 0);
  }
  offset += line.size() + 1;
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw ParseError("manifest: expected 3 columns in " + path.string(), offset);
    ManifestRow r;
    r.path = line.substr(0, a);
    try {
      r.label = std::stoi(line.substr(a + 1, b - a - 1));
      r.domain = std::stoi(line.substr(b + 1));
    } catch (const std::exception&) {
      throw ParseError("manifest: non-integer label or domain in " + path.string(), offset);
    }
    rows.push_back(std::move(r));
    offset += line.size() + 1;
  }
  return rows;
}

// Renders every latent under each window. Rows are ordered by domain, then index.
inline std::vector<ManifestRow> generate_synth(const SynthDatasetSpec& spec, const std::filesystem::path& dir, bool force) {
  spec.validate();
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw StateError("gen-data: output directory " + dir.string() + " is not empty (pass --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  std::vector<LatentImage> latents;
  latents.reserve(spec.n_images);
  for (std::size_t i = 0; i < spec.n_images; ++i) latents.push_back(synth_latent(spec, i));
  std::vector<ManifestRow> rows;
  for (std::size_t d = 0; d < spec.windows.size(); ++d) {
    const std::string sub = "d" + std::to_string(d + 1);
    for (std::size_t i = 0; i < spec.n_images; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "img_%05zu.pgm", i);
      const std::string rel = sub + "/" + name;
      Image img{spec.height, spec.width, 1, window_transform(latents[i].field, spec.windows[d])};
      save_pgm(dir / rel, img);
      rows.push_back({rel, latents[i].label, static_cast<int>(d + 1)});
    }
  }
  write_manifest(dir / kManifestName, rows);
  std::ofstream(dir / "dataset.json") << nlohmann::json(spec).dump(2) << '\n';
  return rows;
}

// ---- in-memory dataset ----

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<std::string> names;  // file name; shared by the renderings of one latent
  std::string fingerprint;  // hex CRC32 over the manifest and raster bytes

  std::size_t size() const { return images.size(); }
  std::size_t class_count() const {
    int mx = -1;
    for (int l : labels) mx = std::max(mx, l);
    return static_cast<std::size_t>(mx + 1);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    for (auto i : idx) {
      out.images.push_back(images[i]);
      out.labels.push_back(labels[i]);
      out.domains.push_back(domains[i]);
      out.names.push_back(names[i]);
    }
    out.fingerprint = fingerprint;
    return out;
  }
};

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

// Loads a manifest-described directory. domain == 0 keeps every domain.
inline Dataset ingest(const std::filesystem::path& dir, std::size_t height, std::size_t width, std::size_t channels,
                      int domain = 0) {
  if (channels != 1) throw DimensionError("ingest: PGM data is single-channel, model expects " + std::to_string(channels));
  auto rows = read_manifest(dir / kManifestName);
  Dataset ds;
  std::uint32_t crc = 0;
  for (const auto& r : rows) {
    if (domain != 0 && r.domain != domain) continue;
    auto bytes = read_file(dir / r.path);
    Image img;
    try {
      img = decode_pgm(bytes);
    } catch (const ParseError& e) {
      throw ParseError((dir / r.path).string() + ": " + e.what(), e.offset());
    }
    if (img.height != height || img.width != width) {
      throw DimensionError("ingest: " + r.path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           ", model expects " + std::to_string(height) + "x" + std::to_string(width));
    }
    if (r.label < 0) throw FormatError("ingest: negative label in manifest row " + r.path);
    crc = static_cast<std::uint32_t>(::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
    ds.images.push_back(std::move(img));
    ds.labels.push_back(r.label);
    ds.domains.push_back(r.domain);
    ds.names.push_back(std::filesystem::path(r.path).filename().string());
  }
  if (ds.images.empty()) {
    throw ConfigError("ingest: no images for domain " + std::to_string(domain) + " in " + dir.string());
  }
  ds.fingerprint = hex32(crc);
  return ds;
}

inline Image hflip(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.pixels[(y * img.width + x) * img.channels + c] = img.at(y, img.width - 1 - x, c);
  return out;
}

// Stratified split into train / val / test index lists.
struct Split {
  std::vector<std::size_t> train, val, test;
};

inline Split stratified_split(std::span<const int> labels, double val_fraction, double test_fraction, std::uint64_t seed) {
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    throw ConfigError("split: fractions must be >= 0 and sum below 1", "/finetune/val_fraction");
  }
  int classes = 0;
  for (int l : labels) classes = std::max(classes, l + 1);
  Rng rng(seed);
  Split s;
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    rng.shuffle(idx);
    const auto n = idx.size();
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
    for (std::size_t i = 0; i < n; ++i) {
      auto& dst = i < n_test ? s.test : (i < n_test + n_val ? s.val : s.train);
      dst.push_back(idx[i]);
    }
  }
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

// Stratified split that keeps every rendering of a latent image in the same
// part, so a test image never has a differently-windowed twin in training.
inline Split group_split(const Dataset& ds, double val_fraction, double test_fraction, std::uint64_t seed) {
  std::vector<std::string> keys = ds.names;
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::vector<int> key_labels(keys.size(), -1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), ds.names[i]) - keys.begin());
    if (key_labels[k] >= 0 && key_labels[k] != ds.labels[i]) {
      throw FormatError("split: renderings of " + keys[k] + " carry different labels");
    }
    key_labels[k] = ds.labels[i];
  }
  const auto parts = stratified_split(key_labels, val_fraction, test_fraction, seed);
  std::vector<int> part_of(keys.size());
  for (auto k : parts.train) part_of[k] = 0;
  for (auto k : parts.val) part_of[k] = 1;
  for (auto k : parts.test) part_of[k] = 2;
  Split s;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), ds.names[i]) - keys.begin());
    (part_of[k] == 0 ? s.train : part_of[k] == 1 ? s.val : s.test).push_back(i);
  }
  return s;
}

}  // namespace rdcssl
