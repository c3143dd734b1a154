// Command-line front end: task generation, training, evaluation, sweeps and
// SVG plots. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "merlot/harness.hpp"
#include "merlot/log.hpp"
#include "merlot/plot.hpp"

namespace {

using namespace merlot;
namespace hs = merlot::harness;
namespace t1 = merlot::task1d;
namespace mz = merlot::maze;

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> sizes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    sizes.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (sizes.empty()) throw ConfigError("--sizes: no sizes given");
  return sizes;
}

void cmd_gen_tasks(const std::string& split, const std::string& protocol, std::size_t n,
                   std::uint64_t seed, std::size_t context_size, const std::string& out_path) {
  const t1::Split sp = t1::split_from_name(split);
  const t1::Protocol pr = t1::protocol_from_name(protocol);
  std::vector<t1::RegressionTask> tasks;
  tasks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    t1::RegressionTask task;
    if (pr == t1::Protocol::kRangeShift) {
      task = t1::sample_range_shift_task(sp, rng);
    } else {
      const std::size_t m =
          context_size > 0 ? context_size : static_cast<std::size_t>(rng.uniform_int(5, 100));
      task = t1::sample_scale_shift_task(m, rng);
    }
    task.id = i;
    tasks.push_back(std::move(task));
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + out_path);
  t1::write_tasks(out, tasks);
  log::info("wrote " + std::to_string(tasks.size()) + " tasks to " + out_path);
}

void cmd_gen_maze_data(std::size_t mazes, std::size_t episodes, std::size_t len,
                       std::uint64_t seed, const std::string& out_path) {
  Rng rng(seed);
  const mz::Dataset data = mz::gen_dataset(mazes, episodes, len, rng);
  mz::save_dataset(out_path, data);
  log::info("wrote " + std::to_string(mazes) + " mazes to " + out_path);
}

void cmd_train(const std::string& config_path, const std::string& out_path,
               std::size_t workers) {
  const hs::TrainConfig cfg = hs::parse_config_file(config_path);
  hs::train(cfg, workers, out_path);
  log::info("checkpoint written to " + out_path);
}

// Overlay rows for the first evaluation task: the true curve on a dense grid,
// the mixture mean and standard deviation, and the context points.
void dump_predictions(const model::Model& m, t1::Split split, t1::Protocol protocol,
                      std::size_t context_size, std::uint64_t seed, const std::string& path) {
  const std::uint64_t first_seed = derive_seed(seed, 0);
  Rng rng(first_seed);
  const t1::RegressionTask raw = protocol == t1::Protocol::kRangeShift
                                     ? t1::sample_range_shift_task(split, rng)
                                     : t1::sample_scale_shift_task(context_size, rng);
  // The generator function is the first thing a sampler draws.
  Rng replay(first_seed);
  const t1::PiecewiseFunction fn = t1::gen_function(split, replay);

  double lo = raw.ctx_x[0], hi = raw.ctx_x[0];
  for (double x : raw.ctx_x) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const model::Task task = t1::to_model_task(raw);
  const auto adapted = model::adapt_context(m, task.ctx_x, task.ctx_y);
  const std::size_t grid = 200;
  std::vector<double> xs(grid);
  for (std::size_t i = 0; i < grid; ++i)
    xs[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid - 1);
  const auto mixtures = model::predict_adapted(m, adapted, Tensor({grid, 1}, xs));

  std::vector<plot::OverlayPoint> points;
  for (std::size_t i = 0; i < grid; ++i) {
    plot::OverlayPoint p;
    p.x = xs[i];
    p.y_true = t1::eval_function(fn, xs[i]);
    const auto mean = model::mixture_mean(mixtures[i]);
    p.mu = mean[0];
    double second = 0.0;
    for (std::size_t c = 0; c < mixtures[i].weights.size(); ++c) {
      const double mu = mixtures[i].mu[c][0];
      const double sg = mixtures[i].sigma.empty() ? 0.0 : mixtures[i].sigma[c][0];
      second += mixtures[i].weights[c] * (sg * sg + mu * mu);
    }
    p.sigma = std::sqrt(std::max(second - mean[0] * mean[0], 0.0));
    points.push_back(p);
  }
  for (std::size_t i = 0; i < raw.ctx_x.size(); ++i) {
    plot::OverlayPoint p;
    p.x = raw.ctx_x[i];
    p.y_true = raw.ctx_y[i];
    p.is_context = true;
    points.push_back(p);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  plot::write_overlay_csv(out, points);
}

void cmd_eval(const std::string& checkpoint_path, const std::string& split,
              const std::string& protocol, std::size_t n_tasks, std::uint64_t seed,
              std::size_t context_size, const std::string& task_file, std::size_t workers,
              const std::string& out_path, const std::string& dump_path) {
  const hs::Checkpoint ckpt = hs::load_checkpoint(checkpoint_path);
  const model::Model m = hs::model_from_checkpoint(ckpt);
  hs::EvalReport report;
  if (protocol == "rollout" || protocol == "walls") {
    if (task_file.empty()) throw ConfigError("maze evaluation requires --task-file");
    const mz::Dataset data = mz::load_dataset(task_file);
    mz::ModelDynamics dynamics(m, data.x_std, data.y_std);
    hs::EvalRow row;
    row.task_id = -1;
    row.split = split;
    row.protocol = protocol;
    row.nll = std::nan("");
    if (protocol == "rollout") {
      mz::RolloutOptions opts;
      opts.n_mazes = n_tasks;
      opts.seed = seed;
      row.context_size = 60;
      row.rmse = mz::rollout_rmse(dynamics, opts);
    } else {
      mz::WallTestOptions opts;
      opts.n_mazes = n_tasks;
      opts.seed = seed;
      row.context_size = 30;
      row.rmse = mz::wall_inference_test(dynamics, opts).accuracy;
    }
    report.rows.push_back(row);
    report.mean_rmse = row.rmse;
    report.mean_nll = row.nll;
  } else {
    report = hs::evaluate_1d(m, t1::split_from_name(split), t1::protocol_from_name(protocol),
                             n_tasks, context_size, seed, workers);
    if (!dump_path.empty())
      dump_predictions(m, t1::split_from_name(split), t1::protocol_from_name(protocol),
                       context_size, seed, dump_path);
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + out_path);
  hs::write_eval_csv(out, report);
  std::ostringstream summary;
  summary << "mean nll " << report.mean_nll << ", mean rmse " << report.mean_rmse;
  log::info(summary.str());
}

void cmd_sweep(const std::string& checkpoint_path, const std::string& sizes_text,
               std::size_t n_tasks, std::uint64_t seed, std::size_t workers,
               const std::string& out_path) {
  const hs::Checkpoint ckpt = hs::load_checkpoint(checkpoint_path);
  const model::Model m = hs::model_from_checkpoint(ckpt);
  const auto sizes = parse_sizes(sizes_text);
  const hs::EvalReport report = hs::sweep_context(m, sizes, n_tasks, seed, workers);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + out_path);
  hs::write_eval_csv(out, report);
}

void cmd_plot(const std::string& csv_path, const std::string& out_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + csv_path);
  std::string header;
  if (!std::getline(in, header)) throw IoError("empty csv: " + csv_path);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  in.seekg(0);
  std::string svg;
  if (plot::is_overlay_header(header)) {
    svg = plot::overlay_svg(plot::read_overlay_csv(in));
  } else {
    const hs::EvalReport report = hs::read_eval_csv(in);
    svg = plot::curve_svg(report.rows);
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + out_path);
  out << svg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local nonparametric meta-regression toolkit"};
  app.require_subcommand(1);

  std::string split = "train", protocol = "range_shift", out_path, config_path;
  std::string checkpoint_path, task_file;
  std::string sizes_text = "5,10,15,20,25,30,35,40,45,50,55,60,65,70,75,80,85,90,95,100";
  std::string csv_path, dump_path;
  std::size_t n = 1000, n_tasks = 1000, context_size = 0, workers = 1;
  std::size_t mazes = 1000, episodes = 100, len = 300;
  std::uint64_t seed = 0;

  auto* gen_tasks = app.add_subcommand("gen-tasks", "Generate a 1D regression task set");
  gen_tasks->add_option("--split", split, "train | interpolation | extrapolation");
  gen_tasks->add_option("--protocol", protocol, "range_shift | scale_shift");
  gen_tasks->add_option("--n", n, "number of tasks");
  gen_tasks->add_option("--seed", seed, "rng seed");
  gen_tasks->add_option("--context-size", context_size,
                        "fixed context size for scale_shift (0 = random 5..100)");
  gen_tasks->add_option("--out", out_path, "output task file")->required();

  auto* gen_maze = app.add_subcommand("gen-maze-data", "Generate a maze transition dataset");
  gen_maze->add_option("--mazes", mazes, "number of mazes");
  gen_maze->add_option("--episodes", episodes, "episodes per maze");
  gen_maze->add_option("--len", len, "transitions per episode");
  gen_maze->add_option("--seed", seed, "rng seed");
  gen_maze->add_option("--out", out_path, "output dataset file")->required();

  auto* train = app.add_subcommand("train", "Meta-train a model");
  train->add_option("--config", config_path, "key = value config file")->required();
  train->add_option("--out", out_path, "checkpoint output path")->required();
  train->add_option("--workers", workers, "parallel task workers per step");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  eval->add_option("--split", split, "train | interpolation | extrapolation");
  eval->add_option("--protocol", protocol, "range_shift | scale_shift | rollout | walls");
  eval->add_option("--n-tasks", n_tasks, "number of tasks / mazes");
  eval->add_option("--seed", seed, "rng seed");
  eval->add_option("--context-size", context_size, "context size for scale_shift");
  eval->add_option("--task-file", task_file, "maze dataset (rollout/walls)");
  eval->add_option("--workers", workers, "parallel evaluation workers");
  eval->add_option("--dump-predictions", dump_path, "write an overlay csv for the first task");
  eval->add_option("--out", out_path, "output csv")->required();

  auto* sweep = app.add_subcommand("sweep-context", "Evaluate across context sizes");
  sweep->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  sweep->add_option("--sizes", sizes_text, "comma-separated context sizes");
  sweep->add_option("--n-tasks", n_tasks, "tasks per size");
  sweep->add_option("--seed", seed, "rng seed");
  sweep->add_option("--workers", workers, "parallel evaluation workers");
  sweep->add_option("--out", out_path, "output csv")->required();

  auto* plot_cmd = app.add_subcommand("plot", "Render a csv as svg");
  plot_cmd->add_option("--csv", csv_path, "input csv (eval/sweep or overlay)")->required();
  plot_cmd->add_option("--out", out_path, "output svg")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic and usage
    return 1;
  }

  try {
    if (gen_tasks->parsed())
      cmd_gen_tasks(split, protocol, n, seed, context_size, out_path);
    else if (gen_maze->parsed())
      cmd_gen_maze_data(mazes, episodes, len, seed, out_path);
    else if (train->parsed())
      cmd_train(config_path, out_path, workers);
    else if (eval->parsed())
      cmd_eval(checkpoint_path, split, protocol, n_tasks, seed, context_size, task_file, workers,
               out_path, dump_path);
    else if (sweep->parsed())
      cmd_sweep(checkpoint_path, sizes_text, n_tasks, seed, workers, out_path);
    else if (plot_cmd->parsed())
      cmd_plot(csv_path, out_path);
  } catch (const std::exception& e) {
    log::error(e.what());
    return 2;
  }
  return 0;
}
