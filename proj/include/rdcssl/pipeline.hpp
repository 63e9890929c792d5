#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdcssl/bke.hpp"
#include "rdcssl/classifier.hpp"
#include "rdcssl/config.hpp"
#include "rdcssl/data.hpp"
#include "rdcssl/log.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/metrics.hpp"
#include "rdcssl/optim.hpp"
#include "rdcssl/replay_buffer.hpp"

namespace rdcssl {

namespace fs = std::filesystem;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct StepLosses {
  Tensor<float> total;
  double l_ssl = 0.0;
  double l_fd = 0.0;
};

// One training objective evaluation. `teacher` holds replayed (B, n, E)
// features, or is null when feature distillation is off.
inline StepLosses step_losses(const MaeModel<float>& model, const Tensor<float>& patches, std::span<const MaskSpec> masks,
                              const Tensor<float>* teacher, const TrainConfig& train) {
  const auto& mc = model.config();
  auto out = model.forward(patches, masks);
  auto l_ssl = loss_ssl(out.reconstruction, masked_targets(patches, masks), mc.patch, mc.channels);
  StepLosses res{l_ssl, l_ssl.item(), 0.0};
  if (teacher == nullptr) return res;

  // Teacher tokens are taken at the positions the student sees, so Q^T and
  // the student features share one token index.
  const std::size_t visible = masks[0].visible.size();
  std::vector<std::size_t> idx;
  idx.reserve(masks.size() * visible);
  for (const auto& m : masks) idx.insert(idx.end(), m.visible.begin(), m.visible.end());
  auto p = gather_tokens<float>(teacher->detach(), idx, visible);
  auto q = ensemble_teacher(p, out.features, train.omega);
  auto l_fd = loss_fd(q, out.features, static_cast<float>(train.gamma), TokenLayout{1, visible});
  res.l_fd = l_fd.item();
  res.total = add(l_ssl, scale(l_fd, static_cast<float>(train.fd_weight)));
  return res;
}

struct EpochLog {
  std::string stage;
  std::size_t epoch = 0;
  double l_ssl = 0.0, l_fd = 0.0, lr = 0.0;
};

inline std::vector<MaskSpec> draw_masks(std::size_t batch, std::size_t tokens, double rate, Rng& rng) {
  std::vector<MaskSpec> masks;
  masks.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) masks.push_back(sample_mask(tokens, rate, rng));
  return masks;
}

// Trains `model` in place for one stage. The buffer is required iff plan.fd.
inline std::vector<EpochLog> run_stage(const StagePlan& plan, std::size_t stage_index, const TrainConfig& train,
                                       MaeModel<float>& model, const Dataset& data, const MemoryBuffer* buffer,
                                       std::uint64_t run_seed) {
  const auto& mc = model.config();
  const std::string base = "/stages/" + std::to_string(stage_index);
  if (plan.fd) {
    if (buffer == nullptr || buffer->empty()) throw ConfigError("run_stage: fd enabled without a buffer", base + "/buffer_in");
    if (buffer->embed != mc.embed || buffer->tokens != mc.tokens()) {
      throw ConfigError("run_stage: buffer holds " + std::to_string(buffer->tokens) + "x" + std::to_string(buffer->embed) +
                            " token features, model produces " + std::to_string(mc.tokens()) + "x" +
                            std::to_string(mc.embed),
                        base + "/buffer_in");
    }
  }
  if (data.size() == 0) throw ConfigError("run_stage: empty data set", base + "/dataset");
  if (train.warmup_epochs >= plan.epochs) throw ConfigError("run_stage: warmup must be shorter than the stage", "/train/warmup_epochs");

  Rng rng(mix_seed(run_seed, 1000 + plan.seed));
  std::vector<Tensor<float>> params;
  for (auto& [_, t] : model.named_parameters()) params.push_back(t);
  AdamW<float> optim(params, train.optimizer);
  const LrSchedule schedule{train.lr_peak, train.warmup_epochs, plan.epochs};
  const std::size_t steps_per_epoch = (data.size() + plan.batch_size - 1) / plan.batch_size;

  std::vector<EpochLog> logs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    auto order = rng.permutation(data.size());
    EpochLog log{plan.name, epoch, 0.0, 0.0, lr_schedule(static_cast<double>(epoch), schedule)};
    double weight = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t start = b * plan.batch_size, stop = std::min(data.size(), start + plan.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      auto patches = patch_batch<float>(data, idx, mc.patch, train.augment ? &rng : nullptr);
      auto masks = draw_masks(idx.size(), mc.tokens(), train.mask_rate, rng);
      std::optional<Tensor<float>> teacher;
      if (plan.fd) teacher = replay_batch(*buffer, idx.size(), rng).tokens;
      auto losses = step_losses(model, patches, masks, teacher ? &*teacher : nullptr, train);
      if (!std::isfinite(losses.total.item())) {
        std::ostringstream os;
        os << "run_stage: non-finite loss in stage " << plan.name << " at step " << step << " (epoch " << epoch
           << "): l_ssl=" << losses.l_ssl << ", l_fd=" << losses.l_fd;
        throw NumericError(os.str());
      }
      const double lr = lr_schedule(static_cast<double>(epoch) + static_cast<double>(b) / static_cast<double>(steps_per_epoch),
                                    schedule);
      optim.zero_grad();
      backward(losses.total);
      optim.step(lr);
      const double w = static_cast<double>(idx.size());
      log.l_ssl += w * losses.l_ssl;
      log.l_fd += w * losses.l_fd;
      weight += w;
    }
    log.l_ssl /= weight;
    log.l_fd /= weight;
    log::debug("stage ", plan.name, " epoch ", epoch, " l_ssl=", log.l_ssl, " l_fd=", log.l_fd, " lr=", log.lr);
    logs.push_back(log);
  }
  return logs;
}

// Encoder outputs over the full token sequence, (N, n, E) row-major.
inline std::vector<float> extract_features(const MaeModel<float>& model, const Dataset& data, std::size_t batch = 64) {
  std::vector<float> out;
  out.reserve(data.size() * model.config().tokens() * model.config().embed);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    auto f = model.encode(patch_batch<float>(data, idx, model.config().patch));
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return out;
}

// Mean masked-reconstruction loss over the first max_images images under a
// fixed mask draw, so two models are scored on identical inputs.
inline double reconstruction_loss(const MaeModel<float>& model, const Dataset& data, double mask_rate,
                                  std::size_t max_images, std::uint64_t mask_seed, std::size_t batch = 64) {
  const auto& mc = model.config();
  const std::size_t n = std::min(max_images, data.size());
  Rng rng(mask_seed);
  auto masks = draw_masks(n, mc.tokens(), mask_rate, rng);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    auto patches = patch_batch<float>(data, idx, mc.patch);
    std::span<const MaskSpec> m(masks.data() + start, idx.size());
    auto out = model.forward(patches, m);
    total += static_cast<double>(idx.size()) * loss_ssl(out.reconstruction, masked_targets(patches, m), mc.patch, mc.channels).item();
  }
  return total / static_cast<double>(n);
}

// ---- persisted artifacts ----

inline fs::path buffer_sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }

inline void save_buffer_with_sidecar(const fs::path& path, const BufferSelection& sel) {
  save_buffer(path, sel.buffer);
  nlohmann::json meta = {{"alpha", sel.buffer.alpha},
                         {"beta", sel.buffer.beta},
                         {"fingerprint", sel.buffer.fingerprint},
                         {"entries", sel.buffer.size()},
                         {"clusters", sel.clusters.k},
                         {"inertia", sel.clusters.inertia},
                         {"source_indices", sel.source_indices}};
  std::ofstream(buffer_sidecar(path)) << meta.dump(2) << '\n';
}

inline MemoryBuffer load_buffer_with_sidecar(const fs::path& path) {
  auto buf = load_buffer(path);
  std::ifstream in(buffer_sidecar(path));
  if (in) {
    auto meta = nlohmann::json::parse(in);
    buf.alpha = meta.value("alpha", 0.0);
    buf.beta = meta.value("beta", 0.0);
    buf.fingerprint = meta.value("fingerprint", std::string{});
  }
  return buf;
}

inline void write_loss_log(const fs::path& path, const std::string& stage, const std::vector<EpochLog>& rows) {
  // Replace this stage's rows, keep the others.
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.rfind(stage + ",", 0) != 0) kept.push_back(line);
    }
  }
  std::ostringstream os;
  os << "stage,epoch,l_ssl,l_fd,lr\n";
  for (const auto& l : kept) os << l << '\n';
  os.precision(9);
  for (const auto& r : rows) os << r.stage << ',' << r.epoch << ',' << r.l_ssl << ',' << r.l_fd << ',' << r.lr << '\n';
  auto s = os.str();
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  auto s = j.dump(2) + "\n";
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StateError("missing " + path.string());
  return nlohmann::json::parse(in);
}

struct SeedReport {
  std::uint64_t seed = 0;
  EvalReport eval;
  double recon_stage1 = 0.0;  // stage-1 domain loss of the stage-1 model
  double recon_final = 0.0;   // same data, final model
  double forgetting() const { return recon_final - recon_stage1; }
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
};

// Drives a config over its seeds; artifacts go to <out>/seed_<s>/.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {}

  const ExperimentConfig& config() const { return cfg_; }
  fs::path seed_dir(std::uint64_t seed) const { return out_ / ("seed_" + std::to_string(seed)); }
  fs::path data_root() const {
    fs::path r(cfg_.data_root);
    return r.is_absolute() ? r : out_ / r;
  }
  fs::path checkpoint_dir(std::uint64_t seed, std::size_t stage) const { return seed_dir(seed) / cfg_.stages[stage].name; }

  // Generates any data set that is missing. An existing set is reused when its
  // recorded spec matches; otherwise --force is needed.
  nlohmann::json prepare_data(bool force, bool regenerate = false) {
    nlohmann::json report = nlohmann::json::object();
    for (const auto& [name, spec] : cfg_.data_sets) {
      const auto dir = data_root() / name;
      bool fresh = !fs::exists(dir / kManifestName);
      if (!fresh && !regenerate) {
        std::ifstream in(dir / "dataset.json");
        nlohmann::json recorded;
        if (in) recorded = nlohmann::json::parse(in, nullptr, false);
        if (recorded != nlohmann::json(spec)) {
          if (!force) {
            throw StateError("data set " + dir.string() + " was generated from a different spec (pass --force to regenerate)");
          }
          fresh = true;
        }
      }
      if (fresh || regenerate) {
        log::info("generating data set ", name, " in ", dir.string());
        auto rows = generate_synth(spec, dir, force || fresh);
        report[name] = {{"dir", dir.string()}, {"rows", rows.size()}, {"generated", true}};
      } else {
        report[name] = {{"dir", dir.string()}, {"generated", false}};
      }
    }
    return report;
  }

  const Dataset& dataset(const DatasetRef& ref) {
    const auto key = ref.set + "#" + std::to_string(ref.domain);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto& mc = cfg_.model;
    return cache_.emplace(key, ingest(data_root() / ref.set, mc.height, mc.width, mc.channels, ref.domain)).first->second;
  }

  MaeModel<float> initial_model(std::uint64_t seed, std::size_t stage) const {
    const auto& plan = cfg_.stages[stage];
    if (plan.init_from.empty()) return MaeModel<float>(cfg_.model, mix_seed(seed, 7));
    std::size_t src = 0;
    while (cfg_.stages[src].name != plan.init_from) ++src;
    const auto dir = checkpoint_dir(seed, src);
    if (!fs::exists(dir / kModelSidecar)) {
      throw ConfigError("stage " + plan.name + " starts from " + plan.init_from + ", but no checkpoint exists at " +
                            (dir / kModelSidecar).string() + " (train that stage first)",
                        "/stages/" + std::to_string(stage) + "/init_from");
    }
    auto model = load_checkpoint<float>(dir);
    if (!(model.config() == cfg_.model)) {
      throw ConfigError("checkpoint " + dir.string() + " does not match the configured model", "/model");
    }
    return model;
  }

  MemoryBuffer stage_buffer(std::uint64_t seed, std::size_t stage) const {
    const auto& plan = cfg_.stages[stage];
    std::vector<MemoryBuffer> parts;
    for (std::size_t k = 0; k < plan.buffer_in.size(); ++k) {
      fs::path p(plan.buffer_in[k]);
      if (!p.is_absolute()) p = seed_dir(seed) / p;
      if (!fs::exists(p)) {
        throw ConfigError("stage " + plan.name + " replays " + p.string() + ", which does not exist (run sample-buffer first)",
                          "/stages/" + std::to_string(stage) + "/buffer_in");
      }
      parts.push_back(load_buffer_with_sidecar(p));
    }
    return merge_buffers(parts);
  }

  // Trains one stage from its declared initialization and writes the checkpoint.
  nlohmann::json train_stage(std::uint64_t seed, std::size_t stage) {
    const auto& plan = cfg_.stages[stage];
    auto model = initial_model(seed, stage);
    std::optional<MemoryBuffer> buffer;
    if (plan.fd) buffer = stage_buffer(seed, stage);
    const auto& data = dataset(plan.dataset);
    log::info("seed ", seed, ": training stage ", plan.name, " on ", data.size(), " images for ", plan.epochs,
              " epochs", plan.fd ? " with feature distillation" : "");
    auto logs = run_stage(plan, stage, cfg_.train, model, data, buffer ? &*buffer : nullptr, seed);
    const auto dir = checkpoint_dir(seed, stage);
    save_checkpoint(dir, model, {{"stage", plan.name}, {"seed", seed}, {"dataset", data.fingerprint}});
    write_loss_log(seed_dir(seed) / "loss_log.csv", plan.name, logs);
    return {{"stage", plan.name},
            {"checkpoint", dir.string()},
            {"epochs", logs.size()},
            {"final_l_ssl", logs.back().l_ssl},
            {"final_l_fd", logs.back().l_fd}};
  }

  // Extracts unmasked features with the stage's trained encoder and stores the
  // selected token features.
  nlohmann::json sample_buffer_for(std::uint64_t seed, std::size_t stage) {
    const auto& plan = cfg_.stages[stage];
    const std::string base = "/stages/" + std::to_string(stage);
    if (plan.buffer_out.empty()) throw ConfigError("stage " + plan.name + " declares no buffer_out", base + "/buffer_out");
    const auto dir = checkpoint_dir(seed, stage);
    if (!fs::exists(dir / kModelSidecar)) {
      throw ConfigError("missing checkpoint for stage " + plan.name + " at " + (dir / kModelSidecar).string() +
                            " (run pretrain first)",
                        base + "/name");
    }
    auto model = load_checkpoint<float>(dir);
    const auto& data = dataset(plan.dataset);
    auto features = extract_features(model, data);
    const auto& mc = model.config();
    auto sel = sample_buffer(features, mc.tokens(), mc.embed, cfg_.train.alpha, cfg_.train.beta,
                             mix_seed(seed, 2000 + stage), static_cast<std::uint16_t>(stage + 1), data.fingerprint,
                             cfg_.train.kmeans_iters);
    sel.buffer.alpha = cfg_.train.alpha;
    sel.buffer.beta = cfg_.train.beta;
    fs::path path(plan.buffer_out);
    if (!path.is_absolute()) path = seed_dir(seed) / path;
    save_buffer_with_sidecar(path, sel);
    log::info("seed ", seed, ": stored ", sel.buffer.size(), " buffer entries from ", sel.clusters.k, " clusters in ",
              path.string());
    return {{"buffer", path.string()}, {"entries", sel.buffer.size()}, {"clusters", sel.clusters.k},
            {"bytes", fs::file_size(path)}};
  }

  nlohmann::json run_stage_and_sample(std::uint64_t seed, std::size_t stage) {
    auto r = train_stage(seed, stage);
    if (!cfg_.stages[stage].buffer_out.empty()) r["buffer"] = sample_buffer_for(seed, stage);
    return r;
  }

  struct Splits {
    Dataset train, val, test;
  };

  Splits labeled_splits() {
    const auto& fsp = cfg_.finetune;
    const auto& all = dataset(fsp.dataset);
    auto s = group_split(all, fsp.val_fraction, fsp.test_fraction, fsp.split_seed);
    return {all.subset(s.train), all.subset(s.val), all.subset(s.test)};
  }

  nlohmann::json finetune(std::uint64_t seed) {
    const std::size_t last = cfg_.stages.size() - 1;
    const auto dir = checkpoint_dir(seed, last);
    if (!fs::exists(dir / kModelSidecar)) {
      throw ConfigError("missing final-stage checkpoint " + (dir / kModelSidecar).string() + " (run the stages first)",
                        "/stages/" + std::to_string(last) + "/name");
    }
    auto encoder = load_checkpoint<float>(dir);
    auto splits = labeled_splits();
    auto opt = cfg_.finetune.options;
    opt.seed = mix_seed(seed, 3000);
    log::info("seed ", seed, ": fine-tuning on ", splits.train.size(), " images (val ", splits.val.size(), ")");
    auto res = finetune_probe(encoder, splits.train, splits.val, opt);
    save_classifier(seed_dir(seed) / "classifier", res.classifier,
                    {{"best_epoch", res.best_epoch}, {"best_val_acc", res.best_val_acc}});
    return {{"best_epoch", res.best_epoch}, {"best_val_acc", res.best_val_acc}, {"train", splits.train.size()},
            {"val", splits.val.size()}};
  }

  SeedReport evaluate(std::uint64_t seed) {
    const auto cdir = seed_dir(seed) / "classifier";
    if (!fs::exists(cdir / "classifier.json")) {
      throw ConfigError("missing classifier at " + cdir.string() + " (run finetune first)", "/finetune");
    }
    auto clf = load_classifier<float>(cdir);
    auto meta = read_json(cdir / "classifier.json");
    auto splits = labeled_splits();
    SeedReport r;
    r.seed = seed;
    r.eval = rdcssl::evaluate(clf, splits.test);
    r.eval.seeds = {seed};
    r.best_epoch = meta.at("extra").at("best_epoch").get<std::size_t>();
    r.best_val_acc = meta.at("extra").at("best_val_acc").get<double>();
    const auto& d1 = dataset(cfg_.eval.forgetting);
    auto first = load_checkpoint<float>(checkpoint_dir(seed, 0));
    auto final_model = load_checkpoint<float>(checkpoint_dir(seed, cfg_.stages.size() - 1));
    r.recon_stage1 = reconstruction_loss(first, d1, cfg_.train.mask_rate, cfg_.eval.max_images, cfg_.eval.mask_seed);
    r.recon_final = reconstruction_loss(final_model, d1, cfg_.train.mask_rate, cfg_.eval.max_images, cfg_.eval.mask_seed);
    write_json(seed_dir(seed) / "metrics.json", to_json(r));
    return r;
  }

  static nlohmann::json to_json(const SeedReport& r) {
    auto j = rdcssl::to_json(r.eval);
    j["seed"] = r.seed;
    j["forgetting"] = {{"stage1_loss", r.recon_stage1}, {"final_loss", r.recon_final}, {"delta", r.forgetting()}};
    j["best_epoch"] = r.best_epoch;
    j["best_val_acc"] = r.best_val_acc;
    return j;
  }

  static nlohmann::json aggregate(const std::vector<SeedReport>& reports) {
    std::vector<double> acc, auc, f1, forget;
    nlohmann::json per = nlohmann::json::array();
    std::vector<std::uint64_t> seeds;
    for (const auto& r : reports) {
      acc.push_back(r.eval.acc);
      auc.push_back(r.eval.auc);
      f1.push_back(r.eval.f1);
      forget.push_back(r.forgetting());
      seeds.push_back(r.seed);
      per.push_back(to_json(r));
    }
    return {{"seeds", seeds},
            {"acc", rdcssl::to_json(mean_std(acc))},
            {"auc", rdcssl::to_json(mean_std(auc))},
            {"f1", rdcssl::to_json(mean_std(f1))},
            {"forgetting", rdcssl::to_json(mean_std(forget))},
            {"n_test", reports.empty() ? 0 : reports.front().eval.n_test},
            {"per_seed", per}};
  }

  SeedReport run_seed(std::uint64_t seed) {
    for (std::size_t s = 0; s < cfg_.stages.size(); ++s) run_stage_and_sample(seed, s);
    finetune(seed);
    return evaluate(seed);
  }

  nlohmann::json run_all(bool force) {
    prepare_data(force);
    std::vector<SeedReport> reports;
    for (auto seed : cfg_.seeds) reports.push_back(run_seed(seed));
    auto agg = aggregate(reports);
    write_json(out_ / "metrics.json", agg);
    return agg;
  }

 private:
  ExperimentConfig cfg_;
  fs::path out_;
  std::map<std::string, Dataset> cache_;
};

}  // namespace rdcssl
