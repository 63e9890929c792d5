#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdcssl/data.hpp"
#include "rdcssl/mae.hpp"
#include "rdcssl/metrics.hpp"
#include "rdcssl/optim.hpp"

namespace rdcssl {

struct FinetuneOptions {
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  double lr = 0.00005;
  std::size_t hidden = 64;  // 0: linear head
  bool freeze_encoder = false;
  bool augment = true;
  double weight_decay = 0.05;
  std::size_t classes = 0;  // 0: infer from the training labels
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const FinetuneOptions& o) {
  j = {{"epochs", o.epochs},           {"batch_size", o.batch_size}, {"lr", o.lr},
       {"hidden", o.hidden},           {"freeze_encoder", o.freeze_encoder}, {"augment", o.augment},
       {"weight_decay", o.weight_decay}, {"classes", o.classes}};
}

// Head on mean-pooled encoder tokens: Linear -> GELU -> Linear, or a single
// Linear when hidden == 0.
template <std::floating_point S>
struct ClassifierHead {
  Linear<S> first, second;
  std::size_t hidden = 0;

  static ClassifierHead init(std::size_t embed, std::size_t hidden, std::size_t classes, Rng& rng) {
    ClassifierHead h;
    h.hidden = hidden;
    if (hidden == 0) {
      h.first = Linear<S>::init(embed, classes, rng);
    } else {
      h.first = Linear<S>::init(embed, hidden, rng);
      h.second = Linear<S>::init(hidden, classes, rng);
    }
    return h;
  }

  Tensor<S> operator()(const Tensor<S>& pooled) const {
    return hidden == 0 ? first(pooled) : second(gelu(first(pooled)));
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out{{"head.0.weight", first.weight}, {"head.0.bias", first.bias}};
    if (hidden != 0) {
      out.emplace_back("head.1.weight", second.weight);
      out.emplace_back("head.1.bias", second.bias);
    }
    return out;
  }
};

template <std::floating_point S>
struct Classifier {
  MaeModel<S> model;
  ClassifierHead<S> head;
  std::size_t classes = 0;

  Tensor<S> pooled(const Tensor<S>& patches) const { return mean(model.encode(patches), 1); }
  Tensor<S> logits(const Tensor<S>& patches) const { return head(pooled(patches)); }
};

template <std::floating_point S>
Tensor<S> patch_batch(const Dataset& ds, std::span<const std::size_t> idx, std::size_t patch, Rng* flip_rng = nullptr) {
  std::vector<PatchGrid> grids;
  grids.reserve(idx.size());
  for (auto i : idx) {
    if (flip_rng != nullptr && flip_rng->uniform() < 0.5) {
      grids.push_back(patchify(hflip(ds.images[i]), patch));
    } else {
      grids.push_back(patchify(ds.images[i], patch));
    }
  }
  return stack_patches<S>(grids);
}

namespace detail {

template <std::floating_point S>
std::vector<std::vector<S>> snapshot(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  std::vector<std::vector<S>> out;
  for (const auto& [_, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

template <std::floating_point S>
void restore(const std::vector<std::pair<std::string, Tensor<S>>>& params, const std::vector<std::vector<S>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].second;
    std::copy(saved[i].begin(), saved[i].end(), t.mutable_data().begin());
  }
}

template <std::floating_point S>
std::vector<std::pair<std::string, Tensor<S>>> classifier_parameters(const Classifier<S>& c, bool with_encoder) {
  auto out = c.head.named_parameters();
  if (with_encoder) {
    for (auto& p : c.model.encoder_parameters()) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

// Class-probability matrix (N x K, row-major).
template <std::floating_point S>
std::vector<double> predict_proba(const Classifier<S>& c, const Dataset& ds, std::size_t batch_size = 64) {
  std::vector<double> probs;
  probs.reserve(ds.size() * c.classes);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    auto p = softmax(c.logits(patch_batch<S>(ds, idx, c.model.config().patch)).detach());
    for (S v : p.data()) probs.push_back(static_cast<double>(v));
  }
  return probs;
}

template <std::floating_point S>
EvalReport evaluate(const Classifier<S>& c, const Dataset& test) {
  if (test.size() == 0) throw ContractError("evaluate: empty test set");
  for (int l : test.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c.classes) {
      throw ConfigError("evaluate: test label " + std::to_string(l) + " outside the classifier's " +
                        std::to_string(c.classes) + " classes");
    }
  }
  return evaluate_predictions(predict_proba(c, test), test.labels, c.classes);
}

template <std::floating_point S>
struct FinetuneResult {
  Classifier<S> classifier;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  std::vector<double> val_acc;  // per epoch
  std::vector<double> train_loss;
};

// Attaches a fresh head to a copy of `encoder` and trains it on `train`,
// keeping the weights from the epoch with the best validation accuracy
// (earliest on ties).
template <std::floating_point S>
FinetuneResult<S> finetune_probe(const MaeModel<S>& encoder, const Dataset& train, const Dataset& val,
                                 const FinetuneOptions& opt) {
  std::set<int> seen(train.labels.begin(), train.labels.end());
  if (seen.size() < 2) {
    throw ConfigError("finetune: training labels contain a single class; AUC and the probe are undefined",
                      "/finetune/dataset");
  }
  const std::size_t classes = static_cast<std::size_t>(*seen.rbegin() + 1);
  if (opt.classes != 0 && opt.classes != classes) {
    throw ConfigError("finetune: config declares " + std::to_string(opt.classes) + " classes, data has " +
                          std::to_string(classes),
                      "/finetune/classes");
  }
  for (int l : val.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw ConfigError("finetune: validation label " + std::to_string(l) + " outside the " + std::to_string(classes) +
                            " training classes",
                        "/finetune/classes");
    }
  }
  if (opt.batch_size == 0 || opt.epochs == 0) throw ConfigError("finetune: epochs and batch_size must be >= 1", "/finetune");
  if (val.size() == 0) throw ConfigError("finetune: empty validation split", "/finetune/val_fraction");

  Rng rng(opt.seed);
  const std::size_t embed = encoder.config().embed, patch = encoder.config().patch;
  FinetuneResult<S> res{Classifier<S>{encoder.clone(), ClassifierHead<S>::init(embed, opt.hidden, classes, rng), classes}, 0,
                        0.0, {}, {}};
  auto& clf = res.classifier;
  auto params = detail::classifier_parameters(clf, !opt.freeze_encoder);
  std::vector<Tensor<S>> tensors;
  for (auto& [_, t] : params) tensors.push_back(t);
  AdamW<S> optim(tensors, {0.9, 0.999, 1e-8, opt.weight_decay});

  // A frozen encoder without augmentation sees fixed inputs: pool once.
  std::optional<Tensor<S>> cached;
  if (opt.freeze_encoder && !opt.augment) {
    std::vector<std::size_t> all(train.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    cached = clf.pooled(patch_batch<S>(train, all, patch)).detach();
  }

  auto best = detail::snapshot(params);
  res.best_val_acc = -1.0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    auto order = rng.permutation(train.size());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + opt.batch_size)));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train.labels[i]);
      Tensor<S> pooled;
      if (cached) {
        pooled = gather(*cached, idx);
      } else {
        pooled = clf.pooled(patch_batch<S>(train, idx, patch, opt.augment ? &rng : nullptr));
        if (opt.freeze_encoder) pooled = pooled.detach();
      }
      auto loss = cross_entropy(clf.head(pooled), labels);
      optim.zero_grad();
      backward(loss);
      optim.step(opt.lr);
      loss_sum += loss.item();
      ++batches;
    }
    res.train_loss.push_back(loss_sum / static_cast<double>(batches));
    auto probs = predict_proba(clf, val);
    std::vector<int> preds(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) {
      auto row = std::span<const double>(probs).subspan(i * classes, classes);
      preds[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    const double acc = accuracy(val.labels, preds);
    res.val_acc.push_back(acc);
    if (acc > res.best_val_acc) {
      res.best_val_acc = acc;
      res.best_epoch = epoch;
      best = detail::snapshot(params);
    }
  }
  detail::restore(params, best);
  return res;
}

template <std::floating_point S>
void save_classifier(const std::filesystem::path& dir, const Classifier<S>& c, const nlohmann::json& extra = {}) {
  save_checkpoint(dir / "encoder", c.model);
  for (const auto& [name, t] : c.head.named_parameters()) save_tensor(dir / (name + ".rdtn"), t.template cast<float>());
  nlohmann::json meta = {{"classes", c.classes}, {"hidden", c.head.hidden}};
  if (!extra.is_null()) meta["extra"] = extra;
  std::ofstream(dir / "classifier.json") << meta.dump(2) << '\n';
}

template <std::floating_point S>
Classifier<S> load_classifier(const std::filesystem::path& dir) {
  std::ifstream in(dir / "classifier.json");
  if (!in) throw FormatError("classifier: missing " + (dir / "classifier.json").string());
  auto meta = nlohmann::json::parse(in);
  auto model = load_checkpoint<S>(dir / "encoder");
  Rng rng(0);
  const auto classes = meta.at("classes").get<std::size_t>();
  auto head = ClassifierHead<S>::init(model.config().embed, meta.at("hidden").get<std::size_t>(), classes, rng);
  for (auto& [name, t] : head.named_parameters()) {
    auto stored = load_tensor(dir / (name + ".rdtn"));
    if (stored.shape() != t.shape()) throw DimensionError("classifier: parameter " + name + " has the wrong shape");
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(stored.data()[i]);
  }
  return Classifier<S>{std::move(model), std::move(head), classes};
}

}  // namespace rdcssl
