#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdcssl/classifier.hpp"
#include "rdcssl/data.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/optim.hpp"

namespace rdcssl {

using nlohmann::json;

// Strict view over one JSON object: typed getters, and finish() rejects keys
// that were never read so typos surface as config errors.
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
    if (!j_.is_object()) throw ConfigError("config: expected an object", pointer_.empty() ? "/" : pointer_);
  }

  std::string at(const std::string& key) const { return pointer_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), at(key));
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError("config: missing required field", at(key));
    return convert<T>(j_.at(key), at(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ConfigReader(j_.contains(key) ? j_.at(key) : empty, at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown field", at(it.key()));
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& pointer) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config: expected a boolean", pointer);
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("config: expected a non-negative integer", pointer);
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("config: expected an integer", pointer);
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config: expected a number", pointer);
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("config: expected a string", pointer);
      return v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const json& j_;
  std::string pointer_;
  std::set<std::string> seen_;
};

struct TrainConfig {
  double lr_peak = 0.00015;
  double lr_final = 0.0;
  std::size_t warmup_epochs = 40;
  AdamWOptions optimizer{};
  double gamma = 2.0;
  double omega = 0.5;
  double mask_rate = 0.75;
  double alpha = 0.01;
  double beta = 0.05;
  double fd_weight = 1.0;
  bool augment = true;
  std::size_t kmeans_iters = 100;
};

struct DatasetRef {
  std::string set;
  int domain = 0;  // 0: all domains
};

struct StagePlan {
  std::string name;
  DatasetRef dataset;
  std::size_t epochs = 0;
  std::size_t batch_size = 64;
  bool fd = false;
  std::vector<std::string> buffer_in;
  std::string buffer_out;
  std::string init_from;
  std::uint64_t seed = 0;  // mixed with the run seed
};

struct FinetuneSpec {
  DatasetRef dataset;
  FinetuneOptions options;
  double val_fraction = 0.2;
  double test_fraction = 0.3;
  std::uint64_t split_seed = 2024;
};

struct EvalSpec {
  DatasetRef forgetting;
  std::size_t max_images = 128;
  std::uint64_t mask_seed = 12345;
};

struct ExperimentConfig {
  std::string data_root = "data";
  std::map<std::string, SynthDatasetSpec> data_sets;
  MaeConfig model;
  TrainConfig train;
  std::vector<StagePlan> stages;
  FinetuneSpec finetune;
  EvalSpec eval;
  std::vector<std::uint64_t> seeds;
  json source;  // the document as given
};

namespace detail {

inline DatasetRef read_dataset_ref(ConfigReader r, const ExperimentConfig& cfg) {
  DatasetRef d;
  d.set = r.require<std::string>("set");
  if (!cfg.data_sets.count(d.set)) throw ConfigError("config: unknown data set \"" + d.set + "\"", r.at("set"));
  d.domain = r.get<int>("domain", 0);
  const auto domains = static_cast<int>(cfg.data_sets.at(d.set).windows.size());
  if (d.domain < 0 || d.domain > domains) {
    throw ConfigError("config: domain must be 0 (all) or 1.." + std::to_string(domains), r.at("domain"));
  }
  r.finish();
  return d;
}

inline SynthDatasetSpec read_synth(ConfigReader r) {
  SynthDatasetSpec s;
  s.n_images = r.get<std::size_t>("n_images", s.n_images);
  s.height = r.get<std::size_t>("height", s.height);
  s.width = r.get<std::size_t>("width", s.width);
  s.n_classes = r.get<std::size_t>("n_classes", s.n_classes);
  s.seed = r.get<std::uint64_t>("seed", s.seed);
  if (r.has("windows")) {
    const auto& w = r.raw("windows");
    if (!w.is_array()) throw ConfigError("config: expected an array", r.at("windows"));
    s.windows.clear();
    for (std::size_t i = 0; i < w.size(); ++i) {
      ConfigReader wr(w[i], r.at("windows") + "/" + std::to_string(i));
      WindowSpec ws;
      ws.center = wr.require<double>("center");
      ws.width = wr.require<double>("width");
      wr.finish();
      ws.validate(wr.at("width"));
      s.windows.push_back(ws);
    }
  }
  r.finish();
  return s;
}

inline void check_range(bool ok, const std::string& what, const std::string& pointer) {
  if (!ok) throw ConfigError("config: " + what, pointer);
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  cfg.source = doc;
  ConfigReader root(doc, "");

  {
    auto data = root.child("data");
    cfg.data_root = data.get<std::string>("root", cfg.data_root);
    auto sets = data.child("sets");
    const json listed = doc.value("data", json::object()).value("sets", json::object());
    for (auto it = listed.begin(); it != listed.end(); ++it) {
      auto spec = detail::read_synth(sets.child(it.key()));
      spec.validate(sets.at(it.key()));
      cfg.data_sets[it.key()] = spec;
    }
    sets.finish();
    data.finish();
    if (cfg.data_sets.empty()) throw ConfigError("config: at least one data set is required", "/data/sets");
  }

  {
    auto m = root.child("model");
    auto& c = cfg.model;
    c.height = m.get<std::size_t>("height", c.height);
    c.width = m.get<std::size_t>("width", c.width);
    c.channels = m.get<std::size_t>("channels", c.channels);
    c.patch = m.get<std::size_t>("patch", c.patch);
    c.embed = m.get<std::size_t>("embed", c.embed);
    c.depth = m.get<std::size_t>("depth", c.depth);
    c.decoder_depth = m.get<std::size_t>("decoder_depth", c.decoder_depth);
    c.mlp_ratio = m.get<std::size_t>("mlp_ratio", c.mlp_ratio);
    m.finish();
    c.validate();
    if (c.channels != 1) throw ConfigError("config: PGM data is single-channel", "/model/channels");
    for (const auto& [name, s] : cfg.data_sets) {
      if (s.height != c.height || s.width != c.width) {
        throw ConfigError("config: data set \"" + name + "\" is " + std::to_string(s.height) + "x" +
                              std::to_string(s.width) + " but the model expects " + std::to_string(c.height) + "x" +
                              std::to_string(c.width),
                          "/data/sets/" + name + "/height");
      }
    }
  }

  {
    auto t = root.child("train");
    auto& c = cfg.train;
    c.lr_peak = t.get<double>("lr_peak", c.lr_peak);
    c.lr_final = t.get<double>("lr_final", c.lr_final);
    c.warmup_epochs = t.get<std::size_t>("warmup_epochs", c.warmup_epochs);
    c.gamma = t.get<double>("gamma", c.gamma);
    c.omega = t.get<double>("omega", c.omega);
    c.mask_rate = t.get<double>("mask_rate", c.mask_rate);
    c.alpha = t.get<double>("alpha", c.alpha);
    c.beta = t.get<double>("beta", c.beta);
    c.fd_weight = t.get<double>("fd_weight", c.fd_weight);
    c.augment = t.get<bool>("augment", c.augment);
    c.kmeans_iters = t.get<std::size_t>("kmeans_iters", c.kmeans_iters);
    auto o = t.child("optimizer");
    c.optimizer.beta1 = o.get<double>("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.get<double>("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.get<double>("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.get<double>("weight_decay", c.optimizer.weight_decay);
    o.finish();
    t.finish();
    using detail::check_range;
    check_range(c.lr_peak > 0.0, "lr_peak must be > 0", "/train/lr_peak");
    check_range(c.lr_final == 0.0, "lr_final is fixed at 0 by the cosine schedule", "/train/lr_final");
    check_range(c.gamma >= 0.0, "gamma must be >= 0", "/train/gamma");
    check_range(c.omega > 0.0 && c.omega < 1.0, "omega must lie in (0, 1)", "/train/omega");
    check_range(c.mask_rate > 0.0 && c.mask_rate < 1.0, "mask_rate must lie in (0, 1)", "/train/mask_rate");
    check_range(c.alpha > 0.0 && c.alpha <= 1.0, "alpha must lie in (0, 1]", "/train/alpha");
    check_range(c.beta > 0.0 && c.beta <= 1.0, "beta must lie in (0, 1]", "/train/beta");
    check_range(c.beta >= c.alpha, "beta must be >= alpha", "/train/beta");
    check_range(c.fd_weight >= 0.0, "fd_weight must be >= 0", "/train/fd_weight");
    check_range(c.kmeans_iters >= 1, "kmeans_iters must be >= 1", "/train/kmeans_iters");
    check_range(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0, "beta1 must lie in [0, 1)", "/train/optimizer/beta1");
    check_range(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0, "beta2 must lie in [0, 1)", "/train/optimizer/beta2");
    check_range(c.optimizer.eps > 0.0, "eps must be > 0", "/train/optimizer/eps");
    check_range(c.optimizer.weight_decay >= 0.0, "weight_decay must be >= 0", "/train/optimizer/weight_decay");
    const auto masked = masked_count(cfg.model.tokens(), c.mask_rate);
    check_range(masked >= 1 && masked < cfg.model.tokens(), "mask_rate leaves no masked or no visible token",
                "/train/mask_rate");
    check_range(cfg.model.tokens() - masked >= 2, "BKE needs at least 2 visible tokens per image", "/train/mask_rate");
  }

  {
    if (!doc.contains("stages") || !doc.at("stages").is_array() || doc.at("stages").empty()) {
      throw ConfigError("config: stages must be a non-empty array", "/stages");
    }
    const auto& arr = root.raw("stages");
    std::set<std::string> names, buffers;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string base = "/stages/" + std::to_string(i);
      ConfigReader s(arr[i], base);
      StagePlan p;
      p.name = s.require<std::string>("name");
      if (p.name.empty() || p.name.find_first_of("/\\. ") != std::string::npos) {
        throw ConfigError("config: stage name must be non-empty without '/', '\\\\', '.' or spaces", s.at("name"));
      }
      if (!names.insert(p.name).second) throw ConfigError("config: duplicate stage name", s.at("name"));
      p.dataset = detail::read_dataset_ref(s.child("dataset"), cfg);
      p.epochs = s.require<std::size_t>("epochs");
      p.batch_size = s.get<std::size_t>("batch_size", i == 0 ? 64 : 32);
      p.seed = s.get<std::uint64_t>("seed", i);
      detail::check_range(p.epochs >= 1, "epochs must be >= 1", s.at("epochs"));
      detail::check_range(p.batch_size >= 1, "batch_size must be >= 1", s.at("batch_size"));
      detail::check_range(cfg.train.warmup_epochs < p.epochs,
                          "warmup_epochs (" + std::to_string(cfg.train.warmup_epochs) + ") must be below stage epochs (" +
                              std::to_string(p.epochs) + ")",
                          "/train/warmup_epochs");
      bool ssl = false;
      if (s.has("losses")) {
        const auto& losses = s.raw("losses");
        if (!losses.is_array()) throw ConfigError("config: expected an array", s.at("losses"));
        for (std::size_t k = 0; k < losses.size(); ++k) {
          const auto name = ConfigReader::convert<std::string>(losses[k], s.at("losses") + "/" + std::to_string(k));
          if (name == "ssl") {
            ssl = true;
          } else if (name == "fd") {
            p.fd = true;
          } else {
            throw ConfigError("config: unknown loss \"" + name + "\" (expected ssl or fd)", s.at("losses") + "/" + std::to_string(k));
          }
        }
      } else {
        ssl = true;
      }
      if (!ssl) throw ConfigError("config: every stage trains the reconstruction loss (ssl)", s.at("losses"));
      if (s.has("buffer_in")) {
        const auto& b = s.raw("buffer_in");
        if (b.is_string()) {
          p.buffer_in.push_back(b.get<std::string>());
        } else if (b.is_array()) {
          for (std::size_t k = 0; k < b.size(); ++k)
            p.buffer_in.push_back(ConfigReader::convert<std::string>(b[k], s.at("buffer_in") + "/" + std::to_string(k)));
        } else {
          throw ConfigError("config: expected a file name or a list of file names", s.at("buffer_in"));
        }
      }
      if (p.fd && p.buffer_in.empty()) throw ConfigError("config: fd loss requires buffer_in", s.at("buffer_in"));
      for (std::size_t k = 0; k < p.buffer_in.size(); ++k) {
        if (!buffers.count(p.buffer_in[k]) && !std::filesystem::path(p.buffer_in[k]).is_absolute()) {
          throw ConfigError("config: buffer_in \"" + p.buffer_in[k] + "\" is not written by an earlier stage",
                            s.at("buffer_in"));
        }
      }
      p.buffer_out = s.get<std::string>("buffer_out", "");
      if (!p.buffer_out.empty()) {
        if (!buffers.insert(p.buffer_out).second) throw ConfigError("config: buffer_out written twice", s.at("buffer_out"));
      }
      p.init_from = s.get<std::string>("init_from", "");
      if (i > 0 && p.init_from != cfg.stages.back().name) {
        throw ConfigError("config: stage must initialize from the previous stage \"" + cfg.stages.back().name + "\"",
                          s.at("init_from"));
      }
      if (i == 0 && !p.init_from.empty()) {
        throw ConfigError("config: the first stage starts from random weights", s.at("init_from"));
      }
      s.finish();
      cfg.stages.push_back(std::move(p));
    }
  }

  {
    auto f = root.child("finetune");
    if (!root.has("finetune")) throw ConfigError("config: missing required field", "/finetune");
    auto& spec = cfg.finetune;
    spec.dataset = detail::read_dataset_ref(f.child("dataset"), cfg);
    auto& o = spec.options;
    o.epochs = f.get<std::size_t>("epochs", o.epochs);
    o.batch_size = f.get<std::size_t>("batch_size", o.batch_size);
    o.lr = f.get<double>("lr", o.lr);
    o.hidden = f.get<std::size_t>("hidden", o.hidden);
    o.freeze_encoder = f.get<bool>("freeze_encoder", o.freeze_encoder);
    o.augment = f.get<bool>("augment", o.augment);
    o.weight_decay = f.get<double>("weight_decay", o.weight_decay);
    o.classes = f.get<std::size_t>("classes", o.classes);
    spec.val_fraction = f.get<double>("val_fraction", spec.val_fraction);
    spec.test_fraction = f.get<double>("test_fraction", spec.test_fraction);
    spec.split_seed = f.get<std::uint64_t>("split_seed", spec.split_seed);
    f.finish();
    detail::check_range(o.epochs >= 1, "epochs must be >= 1", "/finetune/epochs");
    detail::check_range(o.batch_size >= 1, "batch_size must be >= 1", "/finetune/batch_size");
    detail::check_range(o.lr > 0.0, "lr must be > 0", "/finetune/lr");
    detail::check_range(spec.val_fraction > 0.0 && spec.test_fraction > 0.0 && spec.val_fraction + spec.test_fraction < 1.0,
                        "val_fraction and test_fraction must be > 0 and sum below 1", "/finetune/val_fraction");
    const auto classes = cfg.data_sets.at(spec.dataset.set).n_classes;
    if (o.classes != 0 && o.classes != classes) {
      throw ConfigError("config: finetune declares " + std::to_string(o.classes) + " classes, data set has " +
                            std::to_string(classes),
                        "/finetune/classes");
    }
  }

  {
    auto e = root.child("eval");
    auto& spec = cfg.eval;
    if (e.has("forgetting_dataset")) {
      spec.forgetting = detail::read_dataset_ref(e.child("forgetting_dataset"), cfg);
    } else {
      spec.forgetting = cfg.stages.front().dataset;
    }
    spec.max_images = e.get<std::size_t>("max_images", spec.max_images);
    spec.mask_seed = e.get<std::uint64_t>("mask_seed", spec.mask_seed);
    e.finish();
    detail::check_range(spec.max_images >= 1, "max_images must be >= 1", "/eval/max_images");
  }

  {
    if (!doc.contains("seeds")) throw ConfigError("config: missing required field", "/seeds");
    const auto& s = root.raw("seeds");
    if (!s.is_array() || s.empty()) throw ConfigError("config: seeds must be a non-empty array", "/seeds");
    for (std::size_t i = 0; i < s.size(); ++i) {
      cfg.seeds.push_back(ConfigReader::convert<std::uint64_t>(s[i], "/seeds/" + std::to_string(i)));
    }
  }
  root.finish();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string(), "");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what(), "");
  }
  return parse_config(doc);
}

}  // namespace rdcssl
