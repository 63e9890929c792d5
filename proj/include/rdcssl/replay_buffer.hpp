#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rdcssl/rng.hpp"
#include "rdcssl/serialize.hpp"
#include "rdcssl/tensor.hpp"

// Latent replay: cluster image-level features, keep the stored token features
// of the images nearest each center, and serve them back as teacher batches.
// Only encoder features and their metadata are ever stored.
namespace rdcssl {

struct ClusterModel {
  std::size_t k = 0, dim = 0;
  std::vector<double> centers;            // k x dim
  std::vector<std::size_t> assignments;   // one per point
  double inertia = 0.0;                   // sum of squared distances to assigned centers
  std::vector<double> inertia_history;    // after every assignment step of the kept run
};

namespace detail {

inline double squared_distance(const float* x, const double* c, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = static_cast<double>(x[j]) - c[j];
    s += d * d;
  }
  return s;
}

// One k-means++ seeded Lloyd run.
inline ClusterModel lloyd(std::span<const float> points, std::size_t n, std::size_t dim, std::size_t k,
                          std::size_t max_iters, Rng& rng) {
  ClusterModel cm;
  cm.k = k;
  cm.dim = dim;
  cm.centers.assign(k * dim, 0.0);
  auto set_center = [&](std::size_t c, std::size_t point) {
    for (std::size_t j = 0; j < dim; ++j) cm.centers[c * dim + j] = points[point * dim + j];
  };

  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> chosen(n, 0);
  std::size_t first = rng.below(n);
  set_center(0, first);
  chosen[first] = 1;
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(&points[i * dim], &cm.centers[(c - 1) * dim], dim));
      total += nearest[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double u = rng.uniform() * total, run = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        run += nearest[i];
        if (nearest[i] > 0.0 && u < run) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (nearest[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // All remaining points coincide with chosen centers.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) free.push_back(i);
      pick = free[rng.below(free.size())];
    }
    set_center(c, pick);
    chosen[pick] = 1;
  }

  cm.assignments.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  std::vector<std::size_t> previous;
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double d = squared_distance(&points[i * dim], &cm.centers[c * dim], dim);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      cm.assignments[i] = arg;
      dist[i] = best;
      inertia += best;
    }
    cm.inertia = inertia;
    cm.inertia_history.push_back(inertia);
    if (cm.assignments == previous) break;
    previous = cm.assignments;

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[cm.assignments[i]];
      for (std::size_t j = 0; j < dim; ++j) sums[cm.assignments[i] * dim + j] += points[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: move its center onto the point farthest from its own center.
        std::size_t far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        set_center(c, far);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < dim; ++j) cm.centers[c * dim + j] = sums[c * dim + j] / static_cast<double>(counts[c]);
    }
  }
  return cm;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding over n points of `dim` floats.
// The best of `restarts` independently seeded runs (lowest inertia) is kept.
inline ClusterModel kmeans(std::span<const float> points, std::size_t dim, std::size_t k, std::size_t max_iters,
                           std::uint64_t seed, std::size_t restarts = 10) {
  if (dim == 0 || points.size() % dim != 0) throw DimensionError("kmeans: point buffer is not a multiple of dim");
  const std::size_t n = points.size() / dim;
  if (k == 0 || k > n) {
    throw ConfigError("kmeans: need 1 <= k <= N, got k=" + std::to_string(k) + " N=" + std::to_string(n));
  }
  Rng rng(seed);
  ClusterModel best;
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    Rng run_rng(rng.fork());
    auto cm = detail::lloyd(points, n, dim, k, max_iters, run_rng);
    if (r == 0 || cm.inertia < best.inertia) best = std::move(cm);
  }
  return best;
}

struct BufferEntry {
  std::uint32_t cluster_id = 0;
  std::uint16_t source_stage = 0;
  std::vector<float> feature;  // tokens x embed, row-major

  friend bool operator==(const BufferEntry&, const BufferEntry&) = default;
};

struct MemoryBuffer {
  std::size_t tokens = 0, embed = 0;
  std::vector<BufferEntry> entries;
  // Provenance; kept in memory and in the pipeline's JSON sidecar, not in the RDLB file.
  double alpha = 0.0, beta = 0.0;
  std::string fingerprint;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  void add(BufferEntry e) {
    if (e.feature.size() != tokens * embed) {
      throw DimensionError("memory buffer: entry holds " + std::to_string(e.feature.size()) + " values, expected " +
                           std::to_string(tokens) + "x" + std::to_string(embed) + " token features");
    }
    entries.push_back(std::move(e));
  }
};

struct BufferSelection {
  MemoryBuffer buffer;
  std::vector<std::size_t> source_indices;  // image index behind each entry
  ClusterModel clusters;
};

inline std::size_t round_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratio));
}

// Features: N images of (tokens x embed) each, row-major in one span.
// Clusters the per-image token means into round(N*alpha) groups and keeps
// round(beta/alpha) members nearest each center, then trims or fills
// globally (by distance to own center) to exactly round(N*beta) entries.
// Every non-empty cluster keeps at least one entry.
inline BufferSelection sample_buffer(std::span<const float> features, std::size_t tokens, std::size_t embed,
                                     double alpha, double beta, std::uint64_t seed, std::uint16_t source_stage = 1,
                                     std::string fingerprint = {}, std::size_t max_iters = 100) {
  const std::size_t per_image = tokens * embed;
  if (per_image == 0 || features.size() % per_image != 0) {
    throw DimensionError("sample_buffer: feature buffer is not a whole number of " + std::to_string(tokens) + "x" +
                         std::to_string(embed) + " images");
  }
  const std::size_t n = features.size() / per_image;
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("sample_buffer: alpha and beta must be > 0", "/train/alpha");
  if (beta > 1.0) throw ConfigError("sample_buffer: N*beta exceeds N (beta > 1)", "/train/beta");
  const std::size_t k = round_count(n, alpha);
  const std::size_t keep = round_count(n, beta);
  if (k < 1) throw ConfigError("sample_buffer: round(N*alpha) must be >= 1 (N=" + std::to_string(n) + ")", "/train/alpha");
  if (keep < k) throw ConfigError("sample_buffer: round(N*beta) must be >= round(N*alpha)", "/train/beta");
  const std::size_t quota = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(beta / alpha)));

  std::vector<float> pooled(n * embed, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < embed; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) s += features[i * per_image + t * embed + j];
      pooled[i * embed + j] = static_cast<float>(s / static_cast<double>(tokens));
    }
  }
  BufferSelection sel;
  sel.clusters = kmeans(pooled, embed, k, max_iters, seed);
  const auto& cm = sel.clusters;

  std::vector<double> dist(n);
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) {
    dist[i] = detail::squared_distance(&pooled[i * embed], &cm.centers[cm.assignments[i] * embed], embed);
    members[cm.assignments[i]].push_back(i);
  }
  auto closer = [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); };

  std::vector<std::uint8_t> selected(n, 0);
  std::vector<std::size_t> per_cluster(k, 0);
  for (std::size_t c = 0; c < k; ++c) {
    auto& mem = members[c];
    std::sort(mem.begin(), mem.end(), closer);
    for (std::size_t r = 0; r < std::min(quota, mem.size()); ++r) {
      selected[mem[r]] = 1;
      ++per_cluster[c];
    }
  }
  std::size_t total = static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1));
  if (total < keep) {
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i)
      if (!selected[i]) rest.push_back(i);
    std::sort(rest.begin(), rest.end(), closer);
    for (std::size_t r = 0; r < rest.size() && total < keep; ++r, ++total) {
      selected[rest[r]] = 1;
      ++per_cluster[cm.assignments[rest[r]]];
    }
  } else if (total > keep) {
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < n; ++i)
      if (selected[i]) chosen.push_back(i);
    std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) { return closer(b, a); });
    for (std::size_t i : chosen) {
      if (total == keep) break;
      if (per_cluster[cm.assignments[i]] <= 1) continue;
      selected[i] = 0;
      --per_cluster[cm.assignments[i]];
      --total;
    }
  }

  sel.buffer.tokens = tokens;
  sel.buffer.embed = embed;
  sel.buffer.alpha = alpha;
  sel.buffer.beta = beta;
  sel.buffer.fingerprint = std::move(fingerprint);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i : members[c]) {
      if (!selected[i]) continue;
      BufferEntry e;
      e.cluster_id = static_cast<std::uint32_t>(c);
      e.source_stage = source_stage;
      e.feature.assign(features.begin() + static_cast<std::ptrdiff_t>(i * per_image),
                       features.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_image));
      sel.buffer.add(std::move(e));
      sel.source_indices.push_back(i);
    }
  }
  return sel;
}

// RDLB: "RDLB", u8 version, u32 count, u32 T, u32 E; per entry u32 cluster_id,
// u16 source_stage, T*E f32, u32 CRC32 of the entry bytes; trailing CRC32 of
// everything before it.
inline constexpr std::string_view kBufferMagic = "RDLB";
inline constexpr std::uint8_t kBufferVersion = 1;

inline std::vector<std::uint8_t> encode_buffer(const MemoryBuffer& buffer) {
  if (buffer.empty()) throw StateError("memory buffer: refusing to save a buffer with zero entries");
  ByteWriter w;
  w.put_bytes(kBufferMagic);
  w.put<std::uint8_t>(kBufferVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(buffer.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(buffer.tokens));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(buffer.embed));
  for (const auto& e : buffer.entries) {
    if (e.feature.size() != buffer.tokens * buffer.embed) throw DimensionError("memory buffer: malformed entry");
    const std::size_t start = w.size();
    w.put<std::uint32_t>(e.cluster_id);
    w.put<std::uint16_t>(e.source_stage);
    w.put_floats(e.feature);
    w.put<std::uint32_t>(crc32(std::span(w.bytes()).subspan(start)));
  }
  w.put<std::uint32_t>(crc32(w.bytes()));
  return w.bytes();
}

inline MemoryBuffer decode_buffer(std::span<const std::uint8_t> bytes, const std::string& context = "buffer") {
  ByteReader r(bytes, context);
  if (r.get_bytes(4) != kBufferMagic) throw FormatError(context + ": bad magic, expected \"RDLB\"");
  const auto version = r.get<std::uint8_t>();
  if (version != kBufferVersion) throw FormatError(context + ": unsupported version " + std::to_string(version));
  MemoryBuffer buffer;
  const auto count = r.get<std::uint32_t>();
  buffer.tokens = r.get<std::uint32_t>();
  buffer.embed = r.get<std::uint32_t>();
  const std::size_t expected = 17 + static_cast<std::size_t>(count) * (10 + 4 * buffer.tokens * buffer.embed) + 4;
  if (bytes.size() != expected) {
    throw IntegrityError(context + ": length " + std::to_string(bytes.size()) + " does not match header (expected " +
                         std::to_string(expected) + ")");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    BufferEntry e;
    e.cluster_id = r.get<std::uint32_t>();
    e.source_stage = r.get<std::uint16_t>();
    e.feature = r.get_floats(buffer.tokens * buffer.embed);
    const std::uint32_t actual = crc32(r.span(start, r.pos()));
    if (r.get<std::uint32_t>() != actual) throw IntegrityError(context + ": checksum mismatch in entry " + std::to_string(i));
    buffer.entries.push_back(std::move(e));
  }
  const std::uint32_t actual = crc32(r.span(0, r.pos()));
  if (r.get<std::uint32_t>() != actual) throw IntegrityError(context + ": whole-file checksum mismatch");
  return buffer;
}

inline void save_buffer(const std::filesystem::path& path, const MemoryBuffer& buffer) {
  write_file(path, encode_buffer(buffer));
}

inline MemoryBuffer load_buffer(const std::filesystem::path& path) {
  return decode_buffer(read_file(path), path.string());
}

struct ReplayBatch {
  Tensor<float> tokens;  // (B, T, E), teacher role
  std::vector<std::size_t> indices;
};

// Uniform draw of batch_size entries: without replacement when the buffer is
// large enough, with replacement otherwise.
inline ReplayBatch replay_batch(const MemoryBuffer& buffer, std::size_t batch_size, Rng& rng) {
  if (buffer.empty()) throw StateError("replay_batch: memory buffer is empty");
  if (batch_size == 0) throw ContractError("replay_batch: batch_size must be >= 1");
  ReplayBatch out;
  if (batch_size <= buffer.size()) {
    auto perm = rng.permutation(buffer.size());
    out.indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(batch_size));
  } else {
    for (std::size_t i = 0; i < batch_size; ++i) out.indices.push_back(rng.below(buffer.size()));
  }
  const std::size_t per = buffer.tokens * buffer.embed;
  std::vector<float> data;
  data.reserve(batch_size * per);
  for (auto i : out.indices) data.insert(data.end(), buffer.entries[i].feature.begin(), buffer.entries[i].feature.end());
  out.tokens = Tensor<float>::from({batch_size, buffer.tokens, buffer.embed}, std::move(data));
  return out;
}

// Concatenates buffers from several earlier stages; token layout must agree.
inline MemoryBuffer merge_buffers(const std::vector<MemoryBuffer>& parts) {
  if (parts.empty()) throw StateError("merge_buffers: nothing to merge");
  MemoryBuffer out;
  out.tokens = parts[0].tokens;
  out.embed = parts[0].embed;
  out.alpha = parts[0].alpha;
  out.beta = parts[0].beta;
  for (const auto& p : parts) {
    if (p.tokens != out.tokens || p.embed != out.embed) {
      throw DimensionError("merge_buffers: token layouts differ (" + std::to_string(p.tokens) + "x" +
                           std::to_string(p.embed) + " vs " + std::to_string(out.tokens) + "x" + std::to_string(out.embed) + ")");
    }
    for (const auto& e : p.entries) out.add(e);
    out.fingerprint += (out.fingerprint.empty() ? "" : "+") + p.fingerprint;
  }
  return out;
}

}  // namespace rdcssl
