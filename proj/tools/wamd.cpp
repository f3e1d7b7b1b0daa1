// wamd: dataset generation, training, evaluation and robustness sweeps.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wamd/commands.hpp"
#include "wamd/version.hpp"

namespace fs = std::filesystem;
using namespace wamd;

namespace {

nlohmann::json config_or_empty(const std::string& path) {
  return path.empty() ? nlohmann::json::object() : read_json_file(path);
}

// Eval settings from an optional JSON file plus command-line overrides.
EvalRunConfig eval_config(const std::string& path, const std::string& metric, const std::string& split,
                          std::optional<int> workers) {
  const nlohmann::json j = config_or_empty(path);
  EvalRunConfig c = EvalRunConfig::from_json(j);
  if (!j.contains("workers")) c.workers = default_workers();
  if (!metric.empty()) {
    try {
      c.metric = metric_from_string(metric);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  if (!split.empty()) c.split = split;
  if (workers) c.workers = *workers;
  if (c.workers < 1) throw ConfigError("--workers must be >= 1");
  return c;
}

void print_headline(const EvalReport& r) {
  const auto j = r.to_json();
  std::string key = r.metric;
  for (auto& ch : key) {
    if (ch == '-') ch = '_';
  }
  if (j.contains(key) && !j.at(key).is_null()) std::printf("%s %.6f\n", r.metric.c_str(), j.at(key).get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly aligned multi-modal detection toolkit"};
  app.set_version_flag("--version", std::string(tool_version()));
  app.require_subcommand(1);

  // gen-data
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_scenes, gen_test;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic weakly aligned dataset");
  gen->add_option("--config", gen_config, "JSON generation config");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Override the master seed");
  gen->add_option("--scenes", gen_scenes, "Override the scene count");
  gen->add_option("--test-scenes", gen_test, "Override the number of held-out scenes");

  // train
  std::string train_config, train_data, train_out;
  std::optional<int> train_epochs;
  std::optional<std::uint64_t> train_seed;
  AblationFlags ablate;
  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--config", train_config, "JSON run config with 'model' and 'train' sections");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--out", train_out, "Output directory")->required();
  tr->add_option("--epochs", train_epochs, "Override the epoch count");
  tr->add_option("--seed", train_seed, "Override the training seed");
  tr->add_flag("--no-rfa", ablate.no_rfa, "Disable region feature alignment");
  tr->add_flag("--no-jitter", ablate.no_jitter, "Disable RoI jitter");
  tr->add_flag("--no-caf", ablate.no_caf, "Disable confidence-aware fusion");
  tr->add_flag("--no-asc", ablate.no_asc, "Disable the adjacent similarity constraint");

  // eval
  std::string ev_ckpt, ev_data, ev_out, ev_config, ev_metric, ev_split, ev_dets;
  std::optional<int> ev_workers;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint or a detections file");
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--config", ev_config, "JSON eval config");
  ev->add_option("--metric", ev_metric, "mr | mr-ref | mr-sensed | map2d | map3d");
  ev->add_option("--split", ev_split, "train | test | all");
  ev->add_option("--detections", ev_dets, "Score this detections file instead of running a model");
  ev->add_option("--workers", ev_workers, "Parallel scene workers (default: WAMD_WORKERS or 1)");

  // sweep
  std::string sw_ckpt, sw_data, sw_out, sw_config, sw_metric, sw_split, sw_bounds;
  std::optional<int> sw_grid, sw_workers;
  bool sw_directional = false;
  int sw_max_px = 6;
  auto* sw = app.add_subcommand("sweep", "Shift-robustness sweeps");
  sw->add_option("--checkpoint", sw_ckpt, "Model checkpoint")->required();
  sw->add_option("--data", sw_data, "Dataset directory")->required();
  sw->add_option("--out", sw_out, "Output directory")->required();
  sw->add_option("--config", sw_config, "JSON eval config");
  sw->add_option("--metric", sw_metric, "mr | mr-ref | mr-sensed | map2d | map3d");
  sw->add_option("--split", sw_split, "train | test | all");
  sw->add_option("--grid", sw_grid, "Half extent N of the (2N+1)^2 shift grid");
  sw->add_flag("--directional", sw_directional, "Directional statistics at 0, 45, 90 and 135 degrees");
  sw->add_option("--max-px", sw_max_px, "Search range of the weak aligned bound");
  sw->add_option("--bounds-from", sw_bounds, "Checkpoint whose degradation sets the bounds");
  sw->add_option("--workers", sw_workers, "Parallel scene workers (default: WAMD_WORKERS or 1)");

  // plot
  std::vector<std::string> pl_reports;
  std::string pl_out;
  auto* pl = app.add_subcommand("plot", "Render plots from saved reports");
  pl->add_option("reports", pl_reports, "eval_report.json files")->required();
  pl->add_option("--out", pl_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      GenDataConfig c = GenDataConfig::from_json(config_or_empty(gen_config));
      if (gen_seed) c.seed = *gen_seed;
      if (gen_scenes) c.scenes = *gen_scenes;
      if (gen_test) c.test_scenes = *gen_test;
      c.validate();
      const auto s = cmd_gen_data(c, gen_out);
      std::printf("scenes %d (train %d, test %d)  objects %d  unpaired %d (%.1f%%)  checksum %s\n", s.scenes,
                  s.train_scenes, s.test_scenes, s.objects, s.unpaired,
                  s.objects ? 100.0 * s.unpaired / s.objects : 0.0, s.checksum.c_str());
    } else if (*tr) {
      TrainRunConfig c = TrainRunConfig::from_json(config_or_empty(train_config));
      ablate.apply(c.model);
      if (train_epochs) c.train.epochs = *train_epochs;
      if (train_seed) c.train.seed = *train_seed;
      const auto s = cmd_train(c, train_data, train_out, &std::cerr);
      std::printf("checkpoint %s  epochs %d  final_loss %.10g\n", s.checkpoint.c_str(), s.epochs, s.final_loss);
    } else if (*ev) {
      if (ev_ckpt.empty() && ev_dets.empty()) throw ConfigError("eval: give --checkpoint or --detections");
      const EvalRunConfig c = eval_config(ev_config, ev_metric, ev_split, ev_workers);
      std::optional<fs::path> dets;
      if (!ev_dets.empty()) dets = ev_dets;
      print_headline(cmd_eval(ev_ckpt, ev_data, c, ev_out, dets));
    } else if (*sw) {
      const EvalRunConfig c = eval_config(sw_config, sw_metric, sw_split, sw_workers);
      SweepOptions o;
      o.grid = sw_grid;
      o.directional = sw_directional;
      o.max_px = sw_max_px;
      if (!sw_bounds.empty()) o.bounds_from = sw_bounds;
      const EvalReport r = cmd_sweep(sw_ckpt, sw_data, o, c, sw_out);
      print_headline(r);
      for (std::size_t i = 0; i < r.directional.size(); ++i) {
        const auto& d = r.directional[i];
        const auto& b = r.weak_bounds[i];
        std::printf("S%-3d  O %.4f  mu %.4f  sigma %.4f  bounds %s/%s\n", d.angle_deg, d.origin, d.mean, d.sigma,
                    b.plus ? std::to_string(*b.plus).c_str() : (">" + std::to_string(b.max_px)).c_str(),
                    b.minus ? std::to_string(*b.minus).c_str() : (">" + std::to_string(b.max_px)).c_str());
      }
      if (!r.shift_surface.empty()) std::printf("surface %zu shifts\n", r.shift_surface.size());
    } else if (*pl) {
      std::vector<fs::path> in(pl_reports.begin(), pl_reports.end());
      for (const auto& p : cmd_plot(in, pl_out)) std::printf("%s\n", p.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "wamd: %s\n", e.what());
    return 1;
  }
  return 0;
}
