#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdcssl/error.hpp"

namespace rdcssl {

inline double accuracy(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.empty() || labels.size() != predictions.size()) throw ContractError("accuracy: empty or mismatched inputs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == predictions[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Mann-Whitney AUC of `scores` for the positive class, ties by midrank.
inline double auc_binary(std::span<const double> scores, std::span<const int> is_positive, int class_id = 1) {
  if (scores.size() != is_positive.size()) throw ContractError("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int p : is_positive) pos += p != 0;
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) {
    throw ContractError("auc: class " + std::to_string(class_id) + (pos == 0 ? " has no positive" : " has no negative") +
                        " samples in the evaluation set");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t)
      if (is_positive[order[t]]) rank_sum += midrank;
    i = j + 1;
  }
  const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct ClassStats {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
};

inline std::vector<ClassStats> per_class_stats(std::span<const int> labels, std::span<const int> predictions,
                                               std::size_t classes) {
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto p = static_cast<std::size_t>(predictions[i]);
    if (y >= classes || p >= classes) throw ContractError("metrics: class id outside [0, classes)");
    if (y == p) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  std::vector<ClassStats> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& s = out[c];
    s.support = tp[c] + fn[c];
    s.precision = tp[c] + fp[c] ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]) : 0.0;
    s.recall = s.support ? static_cast<double>(tp[c]) / static_cast<double>(s.support) : 0.0;
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    s.f1 = denom ? 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom) : 0.0;
  }
  return out;
}

// Positive-class F1 for two classes, macro F1 otherwise.
inline double f1_score(std::span<const int> labels, std::span<const int> predictions, std::size_t classes) {
  auto stats = per_class_stats(labels, predictions, classes);
  if (classes == 2) return stats[1].f1;
  double s = 0.0;
  for (const auto& c : stats) s += c.f1;
  return s / static_cast<double>(classes);
}

// probs: N x K row-major. Binary AUC on the class-1 column for K = 2,
// one-vs-rest macro average otherwise.
inline double auc_score(std::span<const double> probs, std::span<const int> labels, std::size_t classes) {
  const std::size_t n = labels.size();
  if (probs.size() != n * classes) throw ContractError("auc: probability matrix does not match labels");
  auto one_vs_rest = [&](std::size_t c) {
    std::vector<double> scores(n);
    std::vector<int> positive(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probs[i * classes + c];
      positive[i] = labels[i] == static_cast<int>(c);
    }
    return auc_binary(scores, positive, static_cast<int>(c));
  };
  if (classes == 2) return one_vs_rest(1);
  double s = 0.0;
  for (std::size_t c = 0; c < classes; ++c) s += one_vs_rest(c);
  return s / static_cast<double>(classes);
}

struct EvalReport {
  double acc = 0.0, auc = 0.0, f1 = 0.0;
  std::vector<ClassStats> per_class;
  std::size_t n_test = 0;
  std::vector<std::uint64_t> seeds;
};

inline EvalReport evaluate_predictions(std::span<const double> probs, std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw ContractError("evaluate: empty test set");
  std::vector<int> preds(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = probs.subspan(i * classes, classes);
    preds[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  EvalReport r;
  r.acc = accuracy(labels, preds);
  r.auc = auc_score(probs, labels, classes);
  r.f1 = f1_score(labels, preds, classes);
  r.per_class = per_class_stats(labels, preds, classes);
  r.n_test = labels.size();
  return r;
}

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

// Sample standard deviation (n - 1); 0 for a single value.
inline MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    per.push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
  }
  return {{"acc", r.acc}, {"auc", r.auc}, {"f1", r.f1}, {"per_class", per}, {"n_test", r.n_test}, {"seeds", r.seeds}};
}

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

}  // namespace rdcssl
