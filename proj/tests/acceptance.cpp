// Acceptance gate: one PASS/FAIL line per criterion. Tolerances are fixed
// here; `acceptance 3 7` runs a subset.

#include <sys/wait.h>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "gradient_cases.hpp"
#include "rdcssl/gradcheck.hpp"
#include "rdcssl/rdcssl.hpp"

using namespace rdcssl;
using namespace rdcssl::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kClosedFormTol = 1e-8;
constexpr double kTransportTol = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr double kPeakLr = 0.00015;
constexpr double kTailLr = 1.5e-7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

T64 random_affinity(std::size_t b, std::size_t t, Rng& rng) {
  return normalize_affinity(random_tensor({b, t, t}, rng, -1, 1));
}

// ---- 1 ----
Outcome closed_form_matches_iteration() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1);
  double worst = 0.0;
  const std::size_t ts[] = {2, 4, 8}, es[] = {3, 16};
  for (int i = 0; i < 50; ++i) {
    const std::size_t b = 1 + rng.below(4), t = ts[rng.below(3)], e = es[rng.below(2)];
    auto a = random_affinity(b, t, rng);
    auto p = random_tensor({b, t, e}, rng);
    auto q = ensemble_closed_form(a, p, 0.5), it = propagate_iterative(a, p, 0.5, 200);
    for (std::size_t k = 0; k < q.numel(); ++k) worst = std::max(worst, std::abs(q.data()[k] - it.data()[k]));
  }
  const double secs = seconds_since(t0);
  return {worst < kClosedFormTol && secs < 5.0,
          "50 instances, max |closed - iter200| = " + fmt(worst) + " (< 1e-8), " + fmt(secs) + " s (< 5 s)"};
}

// ---- 2 ----
double quantile_coupling_w2(double m1, double s1, double m2, double s2) {
  boost::math::normal_distribution<double> a(m1, s1), b(m2, s2);
  boost::math::quadrature::tanh_sinh<double> integrator;
  return integrator.integrate(
      [&](double u) {
        if (u <= 0.0 || u >= 1.0) return 0.0;
        const double d = boost::math::quantile(a, u) - boost::math::quantile(b, u);
        return d * d;
      },
      0.0, 1.0);
}

Outcome wkd_is_squared_w2() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t l = 1 + rng.below(8);
    GaussianMoments<double> t{random_tensor({l}, rng, -3, 3), random_tensor({l}, rng, 0.05, 3)};
    GaussianMoments<double> s{random_tensor({l}, rng, -3, 3), random_tensor({l}, rng, 0.05, 3)};
    double oracle = 0.0;
    for (std::size_t c = 0; c < l; ++c)
      oracle += quantile_coupling_w2(t.mean.data()[c], t.stddev.data()[c], s.mean.data()[c], s.stddev.data()[c]);
    worst = std::max(worst, std::abs(wkd_loss(t, s, 1.0).item() - oracle));
  }
  const double secs = seconds_since(t0);
  return {worst < kTransportTol && secs < 10.0,
          "100 moment pairs, max |wkd - W2^2| = " + fmt(worst) + " (< 1e-5), " + fmt(secs) + " s (< 10 s)"};
}

// ---- 3 ----
Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, double err) {
    ++checks;
    if (err > worst || !std::isfinite(err)) {
      worst = std::isfinite(err) ? err : 1e300;
      worst_name = name;
    }
  };
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 7919 + 1);
      auto x = random_tensor(c.shape, rng);
      record(c.name, finite_diff_check<double>(
                         [&](const T64& t) {
                           Rng inner(seed + 100);
                           return c.f(t, inner, seed);
                         },
                         x, kGradEps));
    }
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 500);
    auto target = random_tensor({3, 4}, rng);  // m=3 masked patches of V=2, C=1
    auto y = random_tensor({1, 3, 4}, rng);
    auto tgt = reshape(target, {1, 3, 4});
    record("loss_ssl", finite_diff_check<double>([&](const T64& t) { return loss_ssl(t, tgt, 2, 1); }, y, kGradEps));

    auto teacher = random_tensor({2, 4, 3}, rng);
    auto student = random_tensor({2, 4, 3}, rng);
    auto q = ensemble_teacher(teacher, student, 0.5);
    record("loss_fd", finite_diff_check<double>([&](const T64& s) { return loss_fd(q, s, 2.0, {2, 2}); }, student, kGradEps));
  }
  // end to end through the model
  MaeConfig mc;
  mc.height = mc.width = 8;
  mc.patch = 2;
  mc.embed = 8;
  mc.depth = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MaeModel<double> model(mc, seed);
    Rng rng(seed + 900);
    auto patches = random_tensor({2, mc.tokens(), mc.patch_dim()}, rng, 0, 1);
    std::vector<MaskSpec> masks{sample_mask(mc.tokens(), 0.75, rng), sample_mask(mc.tokens(), 0.75, rng)};
    auto teacher = random_tensor({2, masks[0].visible.size(), mc.embed}, rng);
    auto params = model.named_parameters();
    auto& leaf = params[seed % params.size()].second;
    // hold the ensembled target fixed at the unperturbed student
    auto q_fixed = ensemble_teacher(teacher, model.forward(patches, masks).features.detach(), 0.5);
    auto fixed_total = [&]() {
      auto out = model.forward(patches, masks);
      return add(loss_ssl(out.reconstruction, masked_targets(patches, masks), mc.patch, 1),
                 loss_fd(q_fixed, out.features, 2.0, {1, masks[0].visible.size()}));
    };
    record("model:" + params[seed % params.size()].first, finite_diff_check_leaf<double>(fixed_total, leaf, kGradEps));
  }
  const double secs = seconds_since(t0);
  return {worst < kGradTol && secs < 60.0, std::to_string(checks) + " checks (" + std::to_string(op_cases().size()) +
                                               " ops + L_SSL + L_FD + model, 20 seeds), worst " + fmt(worst) + " [" +
                                               worst_name + "] (< 1e-4), " + fmt(secs) + " s (< 60 s)"};
}

// ---- 4 ----
Outcome stop_gradient() {
  MaeConfig mc;
  mc.height = mc.width = 16;
  mc.embed = 16;
  mc.depth = 1;
  TrainConfig train;
  bool same = true, leaf_clean = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MaeModel<float> model(mc, seed);
    Rng rng(seed + 40);
    auto patches = random_tensor<float>({4, mc.tokens(), mc.patch_dim()}, rng, 0, 1);
    auto masks = draw_masks(4, mc.tokens(), 0.75, rng);
    std::vector<float> tv(4 * mc.tokens() * mc.embed);
    for (auto& v : tv) v = static_cast<float>(rng.normal());
    auto grads = [&](const Tensor<float>& teacher) {
      for (auto& [_, t] : model.named_parameters()) t.zero_grad();
      backward(step_losses(model, patches, masks, &teacher, train).total);
      std::vector<float> g;
      for (const auto& [_, t] : model.named_parameters())
        if (t.has_grad()) g.insert(g.end(), t.grad().begin(), t.grad().end());
      return g;
    };
    auto constant = Tensor<float>::from({4, mc.tokens(), mc.embed}, tv);
    auto leaf = Tensor<float>::from({4, mc.tokens(), mc.embed}, tv, true);
    same = same && grads(constant) == grads(leaf);
    leaf_clean = leaf_clean && !leaf.has_grad();
  }
  return {same && leaf_clean, std::string("dL/dtheta bitwise equal for constant vs grad-carrying teacher: ") +
                                  (same ? "yes" : "no") + "; teacher receives gradient: " + (leaf_clean ? "no" : "yes") +
                                  " (5 seeds)"};
}

// ---- 5 ----
Outcome buffer_arithmetic() {
  Rng rng(5);
  const std::size_t tokens = 4, embed = 12;
  std::vector<float> features;
  for (std::size_t b = 0; b < 10; ++b)
    for (std::size_t i = 0; i < 100; ++i) {
      std::vector<double> jitter(embed);
      for (auto& j : jitter) j = rng.normal();
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t e = 0; e < embed; ++e) features.push_back(static_cast<float>((e == b ? 100.0 : 0.0) + jitter[e]));
    }
  auto sel = sample_buffer(features, tokens, embed, 0.01, 0.05, 3);
  std::vector<int> per(sel.clusters.k, 0);
  for (const auto& e : sel.buffer.entries) ++per[e.cluster_id];
  const bool balanced = std::all_of(per.begin(), per.end(), [](int c) { return c == 5; });
  const bool counts = sel.clusters.k == 10 && sel.buffer.size() == 50 && balanced;

  auto dir = fs::temp_directory_path() / "rdcssl_acceptance_buffer";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_buffer(dir / "b.rdlb", sel.buffer);
  auto back = load_buffer(dir / "b.rdlb");
  const bool round_trip = back.entries == sel.buffer.entries && read_file(dir / "b.rdlb") == encode_buffer(back);

  std::vector<std::uintmax_t> sizes;
  for (std::size_t side : {16u, 64u}) {
    MaeConfig mc;
    mc.height = mc.width = side;
    mc.patch = side / 4;
    mc.embed = 8;
    mc.depth = 1;
    MaeModel<float> model(mc, 3);
    Dataset ds;
    Rng pr(side);
    for (std::size_t i = 0; i < 100; ++i) {
      Image img{side, side, 1, std::vector<float>(side * side)};
      for (auto& p : img.pixels) p = static_cast<float>(pr.uniform());
      ds.images.push_back(std::move(img));
      ds.labels.push_back(0);
      ds.domains.push_back(1);
      ds.names.push_back(std::to_string(i));
    }
    auto s = sample_buffer(extract_features(model, ds), mc.tokens(), mc.embed, 0.01, 0.05, 1);
    const auto path = dir / ("side" + std::to_string(side) + ".rdlb");
    save_buffer(path, s.buffer);
    sizes.push_back(fs::file_size(path));
  }
  const bool privacy = sizes[0] == sizes[1];
  return {counts && round_trip && privacy,
          "k=" + std::to_string(sel.clusters.k) + " entries=" + std::to_string(sel.buffer.size()) + " per-cluster " +
              (balanced ? "5" : "unbalanced") + "; round trip " + (round_trip ? "bitwise" : "differs") + "; file bytes " +
              std::to_string(sizes[0]) + " (16x16) vs " + std::to_string(sizes[1]) + " (64x64)"};
}

// ---- 6 ----
double pair_count_auc(const std::vector<double>& s, const std::vector<int>& pos) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return good / pairs;
}

Outcome metric_oracles() {
  Rng rng(6);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 4 + rng.below(60);
    std::vector<int> y(n), p(n);
    std::vector<double> probs(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(i < 2 ? i : rng.below(2));
      const double s = static_cast<double>(rng.below(6)) / 5.0;  // ties on purpose
      probs[2 * i] = 1.0 - s;
      probs[2 * i + 1] = s;
      p[i] = static_cast<int>(rng.below(2));
    }
    std::size_t cm[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < n; ++i) ++cm[y[i]][p[i]];
    const double acc = static_cast<double>(cm[0][0] + cm[1][1]) / static_cast<double>(n);
    const std::size_t tp = cm[1][1], fp = cm[0][1], fn = cm[1][0];
    const double f1 = 2 * tp + fp + fn ? 2.0 * tp / static_cast<double>(2 * tp + fp + fn) : 0.0;
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = probs[2 * i + 1];
    mismatches += accuracy(y, p) != acc;
    mismatches += f1_score(y, p, 2) != f1;
    mismatches += auc_score(probs, y, 2) != pair_count_auc(s, y);
  }
  std::vector<double> flat(10, 0.42);
  std::vector<int> labels{0, 1, 0, 1, 1, 0, 0, 1, 1, 1};
  const double tie_auc = auc_binary(flat, labels);
  return {mismatches == 0 && tie_auc == 0.5,
          "200 instances with ties, " + std::to_string(mismatches) + " mismatches vs pair-count/confusion oracles; "
          "identical scores AUC = " + fmt(tie_auc)};
}

// ---- 7 ----
fs::path source_path(const std::string& rel) { return fs::path(RDCSSL_SOURCE_DIR) / rel; }

Outcome forgetting_experiment() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = fs::path(RDCSSL_WORK_DIR) / "acceptance_desk";
  fs::remove_all(root);
  auto full_doc = json::parse(std::ifstream(source_path("configs/two_stage.json")));
  auto seq_doc = json::parse(std::ifstream(source_path("configs/two_stage_sequential.json")));
  for (auto* d : {&full_doc, &seq_doc}) (*d)["data"]["root"] = (root / "data").string();
  auto full_cfg = parse_config(full_doc), seq_cfg = parse_config(seq_doc);
  const auto n_images = full_cfg.data_sets.at(full_cfg.stages[0].dataset.set).n_images;

  Experiment full(full_cfg, root / "full"), seq(seq_cfg, root / "sequential");
  full.prepare_data(true, true);
  std::vector<SeedReport> fr, sr;
  for (auto seed : full_cfg.seeds) {
    fr.push_back(full.run_seed(seed));
    // both arms share the stage-1 model
    fs::create_directories(seq.seed_dir(seed));
    fs::copy(full.checkpoint_dir(seed, 0), seq.checkpoint_dir(seed, 0), fs::copy_options::recursive);
    seq.train_stage(seed, 1);
    seq.finetune(seed);
    sr.push_back(seq.evaluate(seed));
  }
  std::size_t wins = 0;
  double full_acc = 0.0, seq_acc = 0.0;
  std::ostringstream per;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    wins += fr[i].forgetting() < sr[i].forgetting();
    full_acc += fr[i].eval.acc / static_cast<double>(fr.size());
    seq_acc += sr[i].eval.acc / static_cast<double>(sr.size());
    per << " seed " << fr[i].seed << ": forgetting " << fmt(fr[i].forgetting()) << " vs " << fmt(sr[i].forgetting())
        << ", acc " << fmt(fr[i].eval.acc) << " vs " << fmt(sr[i].eval.acc) << ";";
  }
  write_json(root / "summary.json",
             {{"full", Experiment::aggregate(fr)}, {"sequential", Experiment::aggregate(sr)}, {"forgetting_wins", wins}});
  const double secs = seconds_since(t0);
  const bool scale_ok = n_images >= 500 && full_cfg.stages.size() == 2 && full_cfg.stages[0].epochs == 30 &&
                        full_cfg.stages[1].epochs == 30 && fr.size() == 3;
  const bool pass = scale_ok && wins >= 2 && full_acc > seq_acc && secs < 1800.0;
  return {pass, "(a) lower forgetting in " + std::to_string(wins) + "/3 seeds (need >= 2); (b) mean probe ACC " +
                    fmt(full_acc) + " full vs " + fmt(seq_acc) + " sequential (need >);" + per.str() + " " +
                    std::to_string(n_images) + " images/domain, " + fmt(secs) + " s (< 1800 s)"};
}

// ---- 8 ----
Outcome schedule() {
  LrSchedule s;
  const double at0 = lr_schedule(0, s), peak = lr_schedule(static_cast<double>(s.warmup_epochs), s);
  const double last = lr_schedule(static_cast<double>(s.total_epochs - 1), s);
  const bool pass = at0 == 0.0 && std::abs(peak - kPeakLr) <= 1e-18 && last < kTailLr && s.warmup_epochs == 40;
  return {pass, "lr(0) = " + fmt(at0) + ", lr(40) = " + fmt(peak) + ", lr(299) = " + fmt(last) + " (< 1.5e-7)"};
}

// ---- 9 ----
int run_cli(const std::string& args) {
  const std::string cmd = std::string(RDCSSL_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

Outcome determinism() {
  const fs::path root = fs::path(RDCSSL_WORK_DIR) / "acceptance_determinism";
  fs::remove_all(root);
  const auto cfg = source_path("configs/tiny.json").string();
  const int a = run_cli("run-all --config " + cfg + " --out " + (root / "a").string());
  const int b = run_cli("run-all --config " + cfg + " --out " + (root / "b").string());
  const int c = run_cli("run-all --config " + cfg + " --out " + (root / "a").string() + " --force");
  if (a != 0 || b != 0 || c != 0) {
    return {false, "run-all exit codes " + std::to_string(a) + ", " + std::to_string(b) + ", " + std::to_string(c)};
  }
  auto ta = tree(root / "a"), tb = tree(root / "b");
  std::size_t ckpt = 0, buffers = 0, metrics = 0;
  for (const auto& [name, _] : ta) {
    ckpt += name.ends_with(".rdtn");
    buffers += name.ends_with(".rdlb");
    metrics += name.ends_with("metrics.json");
  }
  std::string differing;
  for (const auto& [name, bytes] : ta) {
    auto it = tb.find(name);
    if (it == tb.end() || it->second != bytes) differing += " " + name;
  }
  const bool same = ta.size() == tb.size() && differing.empty();
  return {same && ckpt > 0 && buffers > 0 && metrics > 0,
          std::to_string(ta.size()) + " files (" + std::to_string(ckpt) + " tensors, " + std::to_string(buffers) +
              " buffers, " + std::to_string(metrics) + " metric files) " +
              (same ? "bitwise identical across two runs and a --force rerun" : "differ:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"bke closed form equals iterated propagation", closed_form_matches_iteration},
      {"wkd loss equals squared 2-Wasserstein", wkd_is_squared_w2},
      {"gradients match central differences", gradient_suite},
      {"replayed teacher carries no gradient", stop_gradient},
      {"buffer arithmetic, round trip, size", buffer_arithmetic},
      {"metric oracles", metric_oracles},
      {"desk-scale forgetting experiment", forgetting_experiment},
      {"learning-rate schedule", schedule},
      {"run-all determinism", determinism},
  };
  std::set<std::size_t> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted.empty() && !wanted.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << i + 1 << "] " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
