#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "merlot/checkpoint.hpp"
#include "merlot/maze.hpp"
#include "merlot/model.hpp"
#include "merlot/task1d.hpp"

namespace merlot::harness {

// Training configuration, parsed from UTF-8 "key = value" lines with '#'
// comments. Unknown keys are errors.
struct TrainConfig {
  std::string model = "merlot";  // merlot | metafun | metafun_sa | merlot_no_psi
  std::optional<bool> use_self_attention;  // explicit overrides of the preset
  std::optional<bool> use_local_functions;
  std::optional<bool> use_seed_generator;
  std::size_t d_r = 128;
  std::size_t k_depth = 2;
  std::size_t heads = 8;
  std::size_t adapt_steps = 3;  // T
  double alpha = 0.01;
  double outer_lr = 5e-5;
  std::size_t batch_size = 16;
  std::size_t steps = 50000;
  std::uint64_t seed = 0;
  std::string task = "oned";  // oned | maze
  std::string split = "train";
  std::string protocol = "range_shift";
  std::string task_file;  // maze dataset path (required for task = maze)

  model::Config model_config() const;
};

TrainConfig parse_config(std::istream& in);
TrainConfig parse_config_file(const std::string& path);
std::string config_to_string(const TrainConfig& cfg);

// Runs fn(0) .. fn(n-1), fanning out over `workers` threads. Work items must
// be independent; results keyed by index stay deterministic for any worker
// count.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

// Per-task seed stream shared by serial and parallel execution.
inline std::uint64_t task_seed(std::uint64_t root, std::uint64_t step, std::uint64_t index) {
  return derive_seed(root, step, index);
}

using TaskSampler = std::function<model::Task(std::uint64_t step, std::uint64_t index)>;

struct TrainResult {
  Checkpoint checkpoint;
  model::Model model;
  std::vector<double> loss_trace;  // mean batch loss per meta-step
};

// Meta-training: per step, `batch_size` tasks are evaluated (in parallel when
// workers > 1), their gradients averaged in task order, and one Adam update
// applied. Bitwise reproducible for any worker count. A non-finite loss
// aborts with the step number; periodic checkpoints stay on disk.
TrainResult train_with_sampler(const TrainConfig& cfg, const TaskSampler& sampler,
                               std::size_t workers = 1, const std::string& checkpoint_path = "",
                               std::size_t checkpoint_every = 5000);

// Builds the task sampler named by cfg.task/protocol/split. For maze tasks the
// dataset is loaded from cfg.task_file.
TrainResult train(const TrainConfig& cfg, std::size_t workers = 1,
                  const std::string& checkpoint_path = "");

// ---- checkpoint <-> model ----

Checkpoint make_checkpoint(const model::Model& model, const nn::AdamState& opt,
                           const TrainConfig& cfg, std::uint64_t step);
model::Model model_from_checkpoint(const Checkpoint& ckpt);
TrainConfig config_from_checkpoint(const Checkpoint& ckpt);
nn::AdamState adam_from_checkpoint(const Checkpoint& ckpt, double lr);

// ---- evaluation ----

struct EvalRow {
  std::int64_t task_id = 0;  // -1 marks an aggregate row (sweep output)
  std::string split;
  std::string protocol;
  std::size_t context_size = 0;
  double nll = 0.0;
  double rmse = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_nll = 0.0;
  double mean_rmse = 0.0;
};

// 1D evaluation: per task, NLL averaged over query points and RMSE of the
// 30-sample point predictions. scale_shift tasks use `context_size` context
// points. Deterministic per (seed, task index); parallel equals serial.
EvalReport evaluate_1d(const model::Model& model, task1d::Split split, task1d::Protocol protocol,
                       std::size_t n_tasks, std::size_t context_size, std::uint64_t seed,
                       std::size_t workers = 1);

// One aggregate row per context size; row for size s reproduces
// evaluate_1d(..., s, derive_seed(seed, s)).
EvalReport sweep_context(const model::Model& model, const std::vector<std::size_t>& sizes,
                         std::size_t n_tasks, std::uint64_t seed, std::size_t workers = 1);

void write_eval_csv(std::ostream& out, const EvalReport& report);
EvalReport read_eval_csv(std::istream& in);

constexpr std::size_t kPointPredictionSamples = 30;

}  // namespace merlot::harness
