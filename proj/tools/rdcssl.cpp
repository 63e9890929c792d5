// rdcssl: command-line driver for data generation, the pretraining stages,
// buffer sampling, fine-tuning and evaluation.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 config violation.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rdcssl/rdcssl.hpp"

namespace {

using nlohmann::json;
using namespace rdcssl;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  bool force = false;
  std::string stage;
};

std::size_t find_stage(const ExperimentConfig& cfg, const std::string& name) {
  for (std::size_t i = 0; i < cfg.stages.size(); ++i)
    if (cfg.stages[i].name == name) return i;
  throw ConfigError("no stage named \"" + name + "\" (from --stage)", "/stages");
}

json cmd_gen_data(Experiment& exp, const Options& o) {
  json out = json::object();
  for (const auto& [name, spec] : exp.config().data_sets) {
    const auto dir = exp.data_root() / name;
    auto rows = generate_synth(spec, dir, o.force);
    out[name] = {{"dir", dir.string()}, {"rows", rows.size()}, {"images_per_domain", spec.n_images}};
  }
  return out;
}

json cmd_pretrain(Experiment& exp, const Options& o) {
  exp.prepare_data(o.force);
  const std::size_t stage = o.stage.empty() ? 0 : find_stage(exp.config(), o.stage);
  json out = json::object();
  for (auto seed : exp.config().seeds) out[std::to_string(seed)] = exp.train_stage(seed, stage);
  return out;
}

json cmd_sample_buffer(Experiment& exp, const Options& o) {
  const auto& cfg = exp.config();
  std::size_t stage = 0;
  if (!o.stage.empty()) {
    stage = find_stage(cfg, o.stage);
  } else {
    while (stage < cfg.stages.size() && cfg.stages[stage].buffer_out.empty()) ++stage;
    if (stage == cfg.stages.size()) throw ConfigError("no stage declares buffer_out", "/stages/0/buffer_out");
  }
  exp.prepare_data(o.force);
  json out = json::object();
  for (auto seed : cfg.seeds) out[std::to_string(seed)] = exp.sample_buffer_for(seed, stage);
  return out;
}

json cmd_cssl(Experiment& exp, const Options& o) {
  const auto& cfg = exp.config();
  if (cfg.stages.size() < 2 && o.stage.empty()) {
    throw ConfigError("cssl needs at least one stage after the first", "/stages");
  }
  exp.prepare_data(o.force);
  json out = json::object();
  for (auto seed : cfg.seeds) {
    json runs = json::array();
    if (!o.stage.empty()) {
      runs.push_back(exp.run_stage_and_sample(seed, find_stage(cfg, o.stage)));
    } else {
      for (std::size_t s = 1; s < cfg.stages.size(); ++s) runs.push_back(exp.run_stage_and_sample(seed, s));
    }
    out[std::to_string(seed)] = runs;
  }
  return out;
}

json cmd_finetune(Experiment& exp, const Options& o) {
  exp.prepare_data(o.force);
  json out = json::object();
  for (auto seed : exp.config().seeds) out[std::to_string(seed)] = exp.finetune(seed);
  return out;
}

json cmd_evaluate(Experiment& exp, const Options& o, const std::filesystem::path& out_dir) {
  exp.prepare_data(o.force);
  std::vector<SeedReport> reports;
  for (auto seed : exp.config().seeds) reports.push_back(exp.evaluate(seed));
  auto agg = Experiment::aggregate(reports);
  write_json(out_dir / "metrics.json", agg);
  return agg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual self-supervised pretraining with latent replay and feature distillation"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--seed", o.seed, "run a single seed instead of the config's list");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_flag("--force", o.force, "overwrite existing outputs");
    return sub;
  };
  auto* gen = add_common(app.add_subcommand("gen-data", "render the synthetic two-window data sets"));
  auto* pre = add_common(app.add_subcommand("pretrain", "train the first stage (masked reconstruction only)"));
  auto* smp = add_common(app.add_subcommand("sample-buffer", "cluster stage features and write the replay buffer"));
  auto* css = add_common(app.add_subcommand("cssl", "train the later stages with replay and distillation"));
  auto* fin = add_common(app.add_subcommand("finetune", "fine-tune a classifier on the final encoder"));
  auto* evl = add_common(app.add_subcommand("evaluate", "score the classifier and measure forgetting"));
  add_common(app.add_subcommand("run-all", "every step above, for every seed"));
  for (auto* sub : {pre, smp, css}) sub->add_option("--stage", o.stage, "stage name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::filesystem::path out_dir(o.out);
  try {
    auto cfg = load_config(o.config);
    if (o.seed) cfg.seeds = {*o.seed};
    Experiment exp(std::move(cfg), out_dir);
    json result;
    std::string command;
    if (gen->parsed()) {
      command = "gen-data";
      result = cmd_gen_data(exp, o);
    } else if (pre->parsed()) {
      command = "pretrain";
      result = cmd_pretrain(exp, o);
    } else if (smp->parsed()) {
      command = "sample-buffer";
      result = cmd_sample_buffer(exp, o);
    } else if (css->parsed()) {
      command = "cssl";
      result = cmd_cssl(exp, o);
    } else if (fin->parsed()) {
      command = "finetune";
      result = cmd_finetune(exp, o);
    } else if (evl->parsed()) {
      command = "evaluate";
      result = cmd_evaluate(exp, o, out_dir);
    } else {
      command = "run-all";
      result = exp.run_all(o.force);
    }
    std::cout << json{{"ok", true}, {"command", command}, {"result", result}}.dump(2) << std::endl;
    return 0;
  } catch (const ConfigError& e) {
    log::error(e.what(), e.pointer().empty() ? "" : " at ", e.pointer());
    std::cout << json{{"ok", false}, {"error", e.what()}, {"pointer", e.pointer()}}.dump(2) << std::endl;
    return 3;
  } catch (const std::exception& e) {
    log::error(e.what());
    std::cout << json{{"ok", false}, {"error", e.what()}}.dump(2) << std::endl;
    return 1;
  }
}
