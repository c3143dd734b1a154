#include "merlot/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "merlot/log.hpp"

namespace merlot::harness {

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected boolean, got '" + value + "'");
}

std::size_t parse_size(const std::string& value, const std::string& key) {
  try {
    const long long v = std::stoll(value);
    if (v < 0) throw ConfigError("config key '" + key + "': negative value");
    return static_cast<std::size_t>(v);
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + value + "'");
  }
}

double parse_real(const std::string& value, const std::string& key) {
  try {
    return std::stod(value);
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected real, got '" + value + "'");
  }
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

model::Config TrainConfig::model_config() const {
  model::Config mc = model::preset(model);
  if (use_self_attention) mc.use_self_attention = *use_self_attention;
  if (use_local_functions) mc.use_local_functions = *use_local_functions;
  if (use_seed_generator) mc.use_seed_generator = *use_seed_generator;
  mc.d_r = d_r;
  mc.depth = k_depth;
  mc.heads = heads;
  mc.steps = adapt_steps;
  mc.alpha = alpha;
  if (task == "oned") {
    mc.d_x = 1;
    mc.d_y = 1;
    mc.gaussian_output = true;
  } else if (task == "maze") {
    mc.d_x = 6;
    mc.d_y = 4;
    mc.gaussian_output = false;
  } else {
    throw ConfigError("unknown task: " + task);
  }
  mc.validate();
  return mc;
}

TrainConfig parse_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key == "model")
      cfg.model = value;
    else if (key == "use_self_attention")
      cfg.use_self_attention = parse_bool(value, key);
    else if (key == "use_local_functions")
      cfg.use_local_functions = parse_bool(value, key);
    else if (key == "use_seed_generator")
      cfg.use_seed_generator = parse_bool(value, key);
    else if (key == "d_r")
      cfg.d_r = parse_size(value, key);
    else if (key == "K")
      cfg.k_depth = parse_size(value, key);
    else if (key == "heads")
      cfg.heads = parse_size(value, key);
    else if (key == "T")
      cfg.adapt_steps = parse_size(value, key);
    else if (key == "alpha")
      cfg.alpha = parse_real(value, key);
    else if (key == "outer_lr")
      cfg.outer_lr = parse_real(value, key);
    else if (key == "batch_size")
      cfg.batch_size = parse_size(value, key);
    else if (key == "steps")
      cfg.steps = parse_size(value, key);
    else if (key == "seed")
      cfg.seed = static_cast<std::uint64_t>(parse_size(value, key));
    else if (key == "task")
      cfg.task = value;
    else if (key == "split")
      cfg.split = value;
    else if (key == "protocol")
      cfg.protocol = value;
    else if (key == "task_file")
      cfg.task_file = value;
    else
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  return parse_config(in);
}

std::string config_to_string(const TrainConfig& cfg) {
  std::ostringstream out;
  out << "model = " << cfg.model << '\n';
  const model::Config mc = cfg.model_config();
  out << "use_self_attention = " << (mc.use_self_attention ? "true" : "false") << '\n';
  out << "use_local_functions = " << (mc.use_local_functions ? "true" : "false") << '\n';
  out << "use_seed_generator = " << (mc.use_seed_generator ? "true" : "false") << '\n';
  out << "d_r = " << cfg.d_r << '\n';
  out << "K = " << cfg.k_depth << '\n';
  out << "heads = " << cfg.heads << '\n';
  out << "T = " << cfg.adapt_steps << '\n';
  out << "alpha = " << fmt_real(cfg.alpha) << '\n';
  out << "outer_lr = " << fmt_real(cfg.outer_lr) << '\n';
  out << "batch_size = " << cfg.batch_size << '\n';
  out << "steps = " << cfg.steps << '\n';
  out << "seed = " << cfg.seed << '\n';
  out << "task = " << cfg.task << '\n';
  out << "split = " << cfg.split << '\n';
  out << "protocol = " << cfg.protocol << '\n';
  if (!cfg.task_file.empty()) out << "task_file = " << cfg.task_file << '\n';
  return out.str();
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const std::size_t count = std::min(workers, n);
  std::exception_ptr error;
  std::mutex error_mutex;
  pool.reserve(count);
  for (std::size_t w = 0; w < count; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---- checkpoint mapping ----

namespace {

Tensor u64_tensor(std::uint64_t v) {
  double bits;
  static_assert(sizeof bits == sizeof v);
  std::memcpy(&bits, &v, 8);
  return Tensor::scalar(bits);
}

}  // namespace

Checkpoint make_checkpoint(const model::Model& model, const nn::AdamState& opt,
                           const TrainConfig& cfg, std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.config_echo = config_to_string(cfg);
  for (const auto& [name, value] : model.params) ckpt.add("param." + name, value);
  for (const auto& [name, value] : opt.m) ckpt.add("adam.m." + name, value);
  for (const auto& [name, value] : opt.v) ckpt.add("adam.v." + name, value);
  ckpt.add("adam.step", Tensor::scalar(static_cast<double>(opt.step)));
  ckpt.add("train.step", Tensor::scalar(static_cast<double>(step)));
  ckpt.add("train.rng", u64_tensor(derive_seed(cfg.seed, step)));
  return ckpt;
}

TrainConfig config_from_checkpoint(const Checkpoint& ckpt) {
  std::istringstream in(ckpt.config_echo);
  return parse_config(in);
}

model::Model model_from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig cfg = config_from_checkpoint(ckpt);
  model::Model model;
  model.cfg = cfg.model_config();
  for (const auto& [name, value] : ckpt.arrays)
    if (name.rfind("param.", 0) == 0) model.params.insert_or_assign(name.substr(6), value);
  if (model.params.empty()) throw IoError("checkpoint: no parameter arrays");
  return model;
}

nn::AdamState adam_from_checkpoint(const Checkpoint& ckpt, double lr) {
  nn::AdamState state;
  state.cfg.lr = lr;
  state.step = static_cast<std::int64_t>(ckpt.require("adam.step").value());
  for (const auto& [name, value] : ckpt.arrays) {
    if (name.rfind("adam.m.", 0) == 0) state.m.insert_or_assign(name.substr(7), value);
    if (name.rfind("adam.v.", 0) == 0) state.v.insert_or_assign(name.substr(7), value);
  }
  return state;
}

// ---- training ----

TrainResult train_with_sampler(const TrainConfig& cfg, const TaskSampler& sampler,
                               std::size_t workers, const std::string& checkpoint_path,
                               std::size_t checkpoint_every) {
  const model::Config mc = cfg.model_config();
  model::Model model = model::build_model(mc, cfg.seed);
  log::info("training " + mc.preset_name() + ": " + std::to_string(model::param_count(model)) +
            " parameters, " + std::to_string(cfg.steps) + " steps, batch " +
            std::to_string(cfg.batch_size));
  nn::AdamState opt;
  opt.cfg.lr = cfg.outer_lr;

  TrainResult result;
  result.loss_trace.reserve(cfg.steps);
  const std::size_t batch = cfg.batch_size;
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    std::vector<double> losses(batch);
    std::vector<GradMap> grads(batch);
    parallel_for(batch, workers, [&](std::size_t idx) {
      const model::Task task = sampler(step, idx);
      Tape tape;
      Binder bind(tape, model.params);
      const model::Forward fwd = model::predict_tape(bind, mc, task);
      const Tensor loss = mc.gaussian_output ? model::nll_loss(fwd, task.query_y)
                                             : model::l2_loss(fwd, task.query_y);
      tape.backward(loss);
      losses[idx] = loss.value();
      grads[idx] = bind.gradients();
    });

    double mean_loss = 0.0;
    for (double l : losses) mean_loss += l;
    mean_loss /= static_cast<double>(batch);
    result.loss_trace.push_back(mean_loss);
    if (!std::isfinite(mean_loss))
      throw ContractError("train: non-finite loss at step " + std::to_string(step) +
                          (checkpoint_path.empty() ? "" : "; last checkpoint retained at " +
                                                              checkpoint_path));

    // Fixed-order reduction keeps training bitwise identical for any worker
    // count.
    GradMap total = std::move(grads[0]);
    for (std::size_t idx = 1; idx < batch; ++idx)
      for (auto& [name, g] : total) {
        const auto& other = grads[idx].at(name);
        std::vector<double> sum(g.size());
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = g.values()[i] + other.values()[i];
        g = Tensor(g.shape(), std::move(sum));
      }
    const double inv = 1.0 / static_cast<double>(batch);
    for (auto& [name, g] : total) {
      std::vector<double> scaled(g.size());
      for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = g.values()[i] * inv;
      g = Tensor(g.shape(), std::move(scaled));
    }
    nn::adam_step(opt, model.params, total);

    if (step % 100 == 0)
      log::info("step " + std::to_string(step) + " loss " + fmt_real(mean_loss));
    if (!checkpoint_path.empty() && checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 &&
        step + 1 < cfg.steps)
      save_checkpoint(checkpoint_path, make_checkpoint(model, opt, cfg, step + 1));
  }

  result.checkpoint = make_checkpoint(model, opt, cfg, cfg.steps);
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, result.checkpoint);
  result.model = std::move(model);
  return result;
}

TrainResult train(const TrainConfig& cfg, std::size_t workers,
                  const std::string& checkpoint_path) {
  if (cfg.task == "oned") {
    const task1d::Split split = task1d::split_from_name(cfg.split);
    const task1d::Protocol protocol = task1d::protocol_from_name(cfg.protocol);
    TaskSampler sampler = [=](std::uint64_t step, std::uint64_t idx) {
      Rng rng(task_seed(cfg.seed, step, idx));
      if (protocol == task1d::Protocol::kRangeShift)
        return task1d::to_model_task(task1d::sample_range_shift_task(split, rng));
      const auto m = static_cast<std::size_t>(rng.uniform_int(5, 100));
      return task1d::to_model_task(task1d::sample_scale_shift_task(m, rng));
    };
    return train_with_sampler(cfg, sampler, workers, checkpoint_path);
  }
  if (cfg.task == "maze") {
    if (cfg.task_file.empty()) throw ConfigError("task = maze requires task_file");
    auto data = std::make_shared<maze::Dataset>(maze::load_dataset(cfg.task_file));
    TaskSampler sampler = [=](std::uint64_t step, std::uint64_t idx) {
      Rng rng(task_seed(cfg.seed, step, idx));
      return maze::sample_maze_task(*data, 0, rng).task;
    };
    return train_with_sampler(cfg, sampler, workers, checkpoint_path);
  }
  throw ConfigError("unknown task: " + cfg.task);
}

// ---- evaluation ----

EvalReport evaluate_1d(const model::Model& model, task1d::Split split, task1d::Protocol protocol,
                       std::size_t n_tasks, std::size_t context_size, std::uint64_t seed,
                       std::size_t workers) {
  EvalReport report;
  report.rows.resize(n_tasks);
  parallel_for(n_tasks, workers, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    const task1d::RegressionTask raw =
        protocol == task1d::Protocol::kRangeShift
            ? task1d::sample_range_shift_task(split, rng)
            : task1d::sample_scale_shift_task(context_size, rng);
    const model::Task task = task1d::to_model_task(raw);
    const auto mixtures = model::predict(model, task);
    double nll = 0.0, se = 0.0;
    for (std::size_t j = 0; j < mixtures.size(); ++j) {
      const std::vector<double> y{task.query_y.at(j, 0)};
      nll += model::nll_value(mixtures[j], y);
      const auto point = model::point_prediction(mixtures[j], kPointPredictionSamples, rng);
      se += (point[0] - y[0]) * (point[0] - y[0]);
    }
    EvalRow row;
    row.task_id = static_cast<std::int64_t>(i);
    row.split = task1d::split_name(raw.split);
    row.protocol = task1d::protocol_name(raw.protocol);
    row.context_size = raw.ctx_x.size();
    row.nll = nll / static_cast<double>(mixtures.size());
    row.rmse = std::sqrt(se / static_cast<double>(mixtures.size()));
    report.rows[i] = row;
  });
  for (const auto& row : report.rows) {
    report.mean_nll += row.nll;
    report.mean_rmse += row.rmse;
  }
  report.mean_nll /= static_cast<double>(n_tasks);
  report.mean_rmse /= static_cast<double>(n_tasks);
  return report;
}

EvalReport sweep_context(const model::Model& model, const std::vector<std::size_t>& sizes,
                         std::size_t n_tasks, std::uint64_t seed, std::size_t workers) {
  EvalReport report;
  for (const std::size_t size : sizes) {
    const EvalReport at_size = evaluate_1d(model, task1d::Split::kTrain,
                                           task1d::Protocol::kScaleShift, n_tasks, size,
                                           derive_seed(seed, size), workers);
    EvalRow row;
    row.task_id = -1;
    row.split = task1d::split_name(task1d::Split::kTrain);
    row.protocol = task1d::protocol_name(task1d::Protocol::kScaleShift);
    row.context_size = size;
    row.nll = at_size.mean_nll;
    row.rmse = at_size.mean_rmse;
    report.rows.push_back(row);
  }
  for (const auto& row : report.rows) {
    report.mean_nll += row.nll;
    report.mean_rmse += row.rmse;
  }
  report.mean_nll /= static_cast<double>(report.rows.size());
  report.mean_rmse /= static_cast<double>(report.rows.size());
  return report;
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "task_id,split,protocol,context_size,nll,rmse\n";
  for (const auto& row : report.rows)
    out << row.task_id << ',' << row.split << ',' << row.protocol << ',' << row.context_size
        << ',' << fmt_real(row.nll) << ',' << fmt_real(row.rmse) << '\n';
}

EvalReport read_eval_csv(std::istream& in) {
  EvalReport report;
  std::string line;
  if (!std::getline(in, line) || line != "task_id,split,protocol,context_size,nll,rmse")
    throw IoError("eval csv: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    EvalRow r;
    auto next = [&](const char* what) {
      if (!std::getline(row, field, ',')) throw IoError(std::string("eval csv: missing ") + what);
      return field;
    };
    r.task_id = std::stoll(next("task_id"));
    r.split = next("split");
    r.protocol = next("protocol");
    r.context_size = static_cast<std::size_t>(std::stoull(next("context_size")));
    r.nll = std::strtod(next("nll").c_str(), nullptr);
    r.rmse = std::strtod(next("rmse").c_str(), nullptr);
    report.rows.push_back(std::move(r));
  }
  for (const auto& row : report.rows) {
    report.mean_nll += row.nll;
    report.mean_rmse += row.rmse;
  }
  if (!report.rows.empty()) {
    report.mean_nll /= static_cast<double>(report.rows.size());
    report.mean_rmse /= static_cast<double>(report.rows.size());
  }
  return report;
}

}  // namespace merlot::harness
