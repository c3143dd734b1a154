#include "merlot/task1d.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace merlot::task1d {

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kInterpolation: return "interpolation";
    case Split::kExtrapolation: return "extrapolation";
  }
  throw ContractError("bad split");
}

std::string protocol_name(Protocol p) {
  return p == Protocol::kRangeShift ? "range_shift" : "scale_shift";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "interpolation") return Split::kInterpolation;
  if (name == "extrapolation") return Split::kExtrapolation;
  throw ConfigError("unknown split: " + name);
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "range_shift") return Protocol::kRangeShift;
  if (name == "scale_shift") return Protocol::kScaleShift;
  throw ConfigError("unknown protocol: " + name);
}

double sample_coefficient(Split split, Rng& rng) {
  switch (split) {
    case Split::kInterpolation:
      return rng.uniform(-1.0, 1.0);
    case Split::kTrain: {
      const double magnitude = rng.uniform(1.0, 2.0);
      return rng.bernoulli(0.5) ? magnitude : -magnitude;
    }
    case Split::kExtrapolation: {
      const double magnitude = rng.uniform(2.0, 3.0);
      return rng.bernoulli(0.5) ? magnitude : -magnitude;
    }
  }
  throw ContractError("bad split");
}

PiecewiseFunction gen_function(Split split, Rng& rng) {
  PiecewiseFunction f;
  const std::size_t count = rng.bernoulli(0.5) ? 6 : 5;
  // 5 width-2 pieces covering [-5,5] force start = -5; with 6 pieces any start
  // in [-7,-5] keeps [-5,5] inside the union.
  f.start = count == 5 ? -5.0 : rng.uniform(-7.0, -5.0);
  f.pieces.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Piece& p = f.pieces[i];
    p.center = f.start + 2.0 * static_cast<double>(i) + 1.0;
    p.quadratic = rng.bernoulli(0.5);
    p.a = sample_coefficient(split, rng);
    p.b = sample_coefficient(split, rng);
  }
  return f;
}

double eval_function(const PiecewiseFunction& f, double x) {
  if (x < f.start || x > f.end())
    throw ContractError("eval_function: x = " + std::to_string(x) + " outside covered domain [" +
                        std::to_string(f.start) + ", " + std::to_string(f.end()) + "]");
  auto idx = static_cast<std::size_t>(std::floor((x - f.start) / 2.0));
  if (idx >= f.pieces.size()) idx = f.pieces.size() - 1;  // x == end()
  const Piece& p = f.pieces[idx];
  const double dx = x - p.center;
  return p.quadratic ? p.a * dx * dx + p.b : p.a * dx + p.b;
}

namespace {

constexpr double kNoiseStd = 0.1;

}  // namespace

RegressionTask sample_range_shift_task(Split split, Rng& rng) {
  RegressionTask task;
  task.split = split;
  task.protocol = Protocol::kRangeShift;
  PiecewiseFunction f = gen_function(split, rng);
  const double lo = rng.uniform(-5.0, 1.0);  // width-4 window inside [-5, 5]
  const auto m = static_cast<std::size_t>(rng.uniform_int(7, 15));
  const auto n = static_cast<std::size_t>(rng.uniform_int(5, 10));
  task.ctx_x.resize(m);
  task.ctx_y.resize(m);
  for (std::size_t i = 0; i < m; ++i) task.ctx_x[i] = rng.uniform(lo, lo + 4.0);
  for (std::size_t i = 0; i < m; ++i)
    task.ctx_y[i] = eval_function(f, task.ctx_x[i]) + kNoiseStd * rng.normal();
  task.query_x.resize(n);
  task.query_y.resize(n);
  for (std::size_t j = 0; j < n; ++j) task.query_x[j] = rng.uniform(lo, lo + 4.0);
  for (std::size_t j = 0; j < n; ++j) task.query_y[j] = eval_function(f, task.query_x[j]);
  return task;
}

RegressionTask sample_scale_shift_task(std::size_t m, Rng& rng) {
  if (m < 5 || m > 100)
    throw ContractError("sample_scale_shift_task: context size " + std::to_string(m) +
                        " outside [5, 100]");
  RegressionTask task;
  task.split = Split::kTrain;
  task.protocol = Protocol::kScaleShift;
  PiecewiseFunction f = gen_function(Split::kTrain, rng);
  constexpr std::size_t n = 100;
  task.ctx_x.resize(m);
  task.ctx_y.resize(m);
  for (std::size_t i = 0; i < m; ++i) task.ctx_x[i] = rng.uniform(-5.0, 5.0);
  for (std::size_t i = 0; i < m; ++i)
    task.ctx_y[i] = eval_function(f, task.ctx_x[i]) + kNoiseStd * rng.normal();
  task.query_x.resize(n);
  task.query_y.resize(n);
  for (std::size_t j = 0; j < n; ++j) task.query_x[j] = rng.uniform(-5.0, 5.0);
  for (std::size_t j = 0; j < n; ++j) task.query_y[j] = eval_function(f, task.query_x[j]);
  return task;
}

model::Task to_model_task(const RegressionTask& task) {
  model::Task t;
  t.ctx_x = Tensor({task.ctx_x.size(), 1}, task.ctx_x);
  t.ctx_y = Tensor({task.ctx_y.size(), 1}, task.ctx_y);
  t.query_x = Tensor({task.query_x.size(), 1}, task.query_x);
  t.query_y = Tensor({task.query_y.size(), 1}, task.query_y);
  return t;
}

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_tasks(std::ostream& out, const std::vector<RegressionTask>& tasks) {
  for (const auto& task : tasks) {
    out << "task " << task.id << ' ' << split_name(task.split) << ' '
        << protocol_name(task.protocol) << ' ' << task.ctx_x.size() << ' ' << task.query_x.size()
        << '\n';
    for (std::size_t i = 0; i < task.ctx_x.size(); ++i)
      out << "c " << fmt_real(task.ctx_x[i]) << ' ' << fmt_real(task.ctx_y[i]) << '\n';
    for (std::size_t j = 0; j < task.query_x.size(); ++j)
      out << "q " << fmt_real(task.query_x[j]) << ' ' << fmt_real(task.query_y[j]) << '\n';
  }
}

std::vector<RegressionTask> read_tasks(std::istream& in) {
  std::vector<RegressionTask> tasks;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw IoError("task file line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream header(line);
    std::string tag, split, protocol;
    std::uint64_t id = 0;
    std::size_t m = 0, n = 0;
    if (!(header >> tag >> id >> split >> protocol >> m >> n) || tag != "task")
      fail("expected task header, got '" + line + "'");
    RegressionTask task;
    task.id = id;
    task.split = split_from_name(split);
    task.protocol = protocol_from_name(protocol);
    for (std::size_t i = 0; i < m + n; ++i) {
      if (!std::getline(in, line)) fail("unexpected end of file inside task record");
      ++line_no;
      std::istringstream row(line);
      std::string kind;
      double x = 0.0, y = 0.0;
      if (!(row >> kind >> x >> y)) fail("malformed point line '" + line + "'");
      const bool is_ctx = i < m;
      if (kind != (is_ctx ? "c" : "q")) fail("expected '" + std::string(is_ctx ? "c" : "q") +
                                             "' line, got '" + line + "'");
      if (is_ctx) {
        task.ctx_x.push_back(x);
        task.ctx_y.push_back(y);
      } else {
        task.query_x.push_back(x);
        task.query_y.push_back(y);
      }
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

}  // namespace merlot::task1d
