#include "merlot/maze.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace merlot::maze {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLoopWallRemovalProb = 0.2;

}  // namespace

bool MazeConfig::connected() const {
  if (cells() == 0) return false;
  std::vector<std::uint8_t> seen(cells(), 0);
  std::vector<std::size_t> stack{0};
  seen[0] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const std::size_t cell = stack.back();
    stack.pop_back();
    const std::size_t cx = cell % width, cy = cell / width;
    auto visit = [&](std::size_t nx, std::size_t ny) {
      const std::size_t idx = ny * width + nx;
      if (!seen[idx]) {
        seen[idx] = 1;
        ++count;
        stack.push_back(idx);
      }
    };
    if (cx + 1 < width && !vwall(cx + 1, cy)) visit(cx + 1, cy);
    if (cx > 0 && !vwall(cx, cy)) visit(cx - 1, cy);
    if (cy + 1 < height && !hwall(cx, cy + 1)) visit(cx, cy + 1);
    if (cy > 0 && !hwall(cx, cy)) visit(cx, cy - 1);
  }
  return count == cells();
}

std::size_t MazeConfig::interior_wall_count() const {
  std::size_t count = 0;
  for (std::size_t cx = 1; cx < width; ++cx)
    for (std::size_t ry = 0; ry < height; ++ry) count += vwall(cx, ry) ? 1 : 0;
  for (std::size_t ry = 1; ry < height; ++ry)
    for (std::size_t cx = 0; cx < width; ++cx) count += hwall(cx, ry) ? 1 : 0;
  return count;
}

MazeConfig gen_maze(Rng& rng) {
  MazeConfig m;
  m.width = static_cast<std::size_t>(rng.uniform_int(7, 9));
  m.height = static_cast<std::size_t>(rng.uniform_int(7, 9));
  m.vwalls.assign((m.width + 1) * m.height, 1);
  m.hwalls.assign(m.width * (m.height + 1), 1);

  // Randomized depth-first carving of a perfect maze.
  std::vector<std::uint8_t> visited(m.cells(), 0);
  std::vector<std::size_t> stack;
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(m.cells()) - 1));
  visited[start] = 1;
  stack.push_back(start);
  while (!stack.empty()) {
    const std::size_t cell = stack.back();
    const std::size_t cx = cell % m.width, cy = cell / m.width;
    struct Move {
      int dx, dy;
    };
    Move moves[4] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (std::size_t i = 3; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(moves[i], moves[j]);
    }
    bool advanced = false;
    for (const auto& mv : moves) {
      const auto nx = static_cast<std::int64_t>(cx) + mv.dx;
      const auto ny = static_cast<std::int64_t>(cy) + mv.dy;
      if (nx < 0 || ny < 0 || nx >= static_cast<std::int64_t>(m.width) ||
          ny >= static_cast<std::int64_t>(m.height))
        continue;
      const std::size_t nidx = static_cast<std::size_t>(ny) * m.width + static_cast<std::size_t>(nx);
      if (visited[nidx]) continue;
      if (mv.dx == 1) m.set_vwall(cx + 1, cy, false);
      if (mv.dx == -1) m.set_vwall(cx, cy, false);
      if (mv.dy == 1) m.set_hwall(cx, cy + 1, false);
      if (mv.dy == -1) m.set_hwall(cx, cy, false);
      visited[nidx] = 1;
      stack.push_back(nidx);
      advanced = true;
      break;
    }
    if (!advanced) stack.pop_back();
  }

  // Remove interior walls independently to introduce loops.
  for (std::size_t cx = 1; cx < m.width; ++cx)
    for (std::size_t ry = 0; ry < m.height; ++ry)
      if (m.vwall(cx, ry) && rng.bernoulli(kLoopWallRemovalProb)) m.set_vwall(cx, ry, false);
  for (std::size_t ry = 1; ry < m.height; ++ry)
    for (std::size_t cx = 0; cx < m.width; ++cx)
      if (m.hwall(cx, ry) && rng.bernoulli(kLoopWallRemovalProb)) m.set_hwall(cx, ry, false);

  if (!m.connected()) throw ContractError("gen_maze: free space not connected");
  return m;
}

BallState random_free_state(const MazeConfig& maze, Rng& rng) {
  const auto cx = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(maze.width) - 1));
  const auto cy = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(maze.height) - 1));
  BallState s;
  s.x = cx + rng.uniform(2.0 * kRadius, 1.0 - 2.0 * kRadius);
  s.y = cy + rng.uniform(2.0 * kRadius, 1.0 - 2.0 * kRadius);
  return s;
}

namespace {

// Rows the ball's vertical extent [y-r, y+r] can touch.
void touched_rows(double y, std::size_t height, std::size_t& lo, std::size_t& hi) {
  const double lo_f = std::floor(y - kRadius);
  const double hi_f = std::floor(y + kRadius);
  lo = lo_f < 0.0 ? 0 : static_cast<std::size_t>(lo_f);
  hi = hi_f < 0.0 ? 0 : static_cast<std::size_t>(hi_f);
  if (lo >= height) lo = height - 1;
  if (hi >= height) hi = height - 1;
}

}  // namespace

StepResult step(const MazeConfig& maze, const BallState& state, const Action& action) {
  StepResult res;
  double vx = (state.vx + action.ax * kDt) * (1.0 - kFriction * kDt);
  double vy = (state.vy + action.ay * kDt) * (1.0 - kFriction * kDt);
  const double speed = std::sqrt(vx * vx + vy * vy);
  if (speed > kMaxSpeed) {
    const double scale = kMaxSpeed / speed;
    vx *= scale;
    vy *= scale;
  }

  double x = state.x, y = state.y;

  // Axis-separated advance; per-step travel (<= kMaxSpeed * kDt = 0.1) never
  // exceeds the ball radius, so at most one wall plane per axis is reachable.
  if (vx != 0.0) {
    const double nx = x + vx * kDt;
    const int dir = vx > 0.0 ? 1 : -1;
    const double lead = nx + dir * kRadius;
    const auto plane = dir > 0 ? static_cast<std::int64_t>(std::floor(x)) + 1
                               : static_cast<std::int64_t>(std::ceil(x)) - 1;
    const bool crosses = dir > 0 ? lead > static_cast<double>(plane)
                                 : lead < static_cast<double>(plane);
    if (crosses && plane >= 0 && plane <= static_cast<std::int64_t>(maze.width)) {
      std::size_t lo, hi;
      touched_rows(y, maze.height, lo, hi);
      bool blocked = false;
      for (std::size_t ry = lo; ry <= hi && !blocked; ++ry)
        blocked = maze.vwall(static_cast<std::size_t>(plane), ry);
      if (blocked) {
        x = static_cast<double>(plane) - dir * kRadius;
        vx = 0.0;
        res.hit_x = true;
        res.wall_x = static_cast<int>(plane);
        res.dir_x = dir;
      } else {
        x = nx;
      }
    } else {
      x = nx;
    }
  }

  if (vy != 0.0) {
    const double ny = y + vy * kDt;
    const int dir = vy > 0.0 ? 1 : -1;
    const double lead = ny + dir * kRadius;
    const auto plane = dir > 0 ? static_cast<std::int64_t>(std::floor(y)) + 1
                               : static_cast<std::int64_t>(std::ceil(y)) - 1;
    const bool crosses = dir > 0 ? lead > static_cast<double>(plane)
                                 : lead < static_cast<double>(plane);
    if (crosses && plane >= 0 && plane <= static_cast<std::int64_t>(maze.height)) {
      const double lo_f = std::floor(x - kRadius);
      const double hi_f = std::floor(x + kRadius);
      std::size_t lo = lo_f < 0.0 ? 0 : static_cast<std::size_t>(lo_f);
      std::size_t hi = hi_f < 0.0 ? 0 : static_cast<std::size_t>(hi_f);
      if (lo >= maze.width) lo = maze.width - 1;
      if (hi >= maze.width) hi = maze.width - 1;
      bool blocked = false;
      for (std::size_t cx = lo; cx <= hi && !blocked; ++cx)
        blocked = maze.hwall(cx, static_cast<std::size_t>(plane));
      if (blocked) {
        y = static_cast<double>(plane) - dir * kRadius;
        vy = 0.0;
        res.hit_y = true;
        res.wall_y = static_cast<int>(plane);
        res.dir_y = dir;
      } else {
        y = ny;
      }
    } else {
      y = ny;
    }
  }

  res.next = BallState{x, y, vx, vy};
  return res;
}

Episode gen_episode(const MazeConfig& maze, const BallState& start, std::size_t length, Rng& rng) {
  Episode episode;
  episode.reserve(length);
  BallState s = start;
  for (std::size_t k = 0; k < length; ++k) {
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    const Action a{std::cos(theta), std::sin(theta)};
    const BallState s2 = step(maze, s, a).next;
    episode.push_back(Transition{s, a, s2});
    s = s2;
  }
  return episode;
}

Dataset gen_dataset(std::size_t n_mazes, std::size_t episodes, std::size_t length, Rng& rng) {
  Dataset data;
  data.mazes.reserve(n_mazes);
  for (std::size_t i = 0; i < n_mazes; ++i) {
    MazeData md;
    md.maze = gen_maze(rng);
    md.episodes.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
      const BallState start = random_free_state(md.maze, rng);
      md.episodes.push_back(gen_episode(md.maze, start, length, rng));
    }
    data.mazes.push_back(std::move(md));
  }

  // Population std per dimension over the full dataset; the data is divided by
  // these without mean centering.
  std::array<double, 6> x_sum{}, x_sq{};
  std::array<double, 4> y_sum{}, y_sq{};
  std::size_t count = 0;
  for (const auto& md : data.mazes)
    for (const auto& ep : md.episodes)
      for (const auto& tr : ep) {
        const double xs[6] = {tr.s.x, tr.s.y, tr.s.vx, tr.s.vy, tr.a.ax, tr.a.ay};
        const double ys[4] = {tr.s2.x - tr.s.x, tr.s2.y - tr.s.y, tr.s2.vx - tr.s.vx,
                              tr.s2.vy - tr.s.vy};
        for (int d = 0; d < 6; ++d) {
          x_sum[d] += xs[d];
          x_sq[d] += xs[d] * xs[d];
        }
        for (int d = 0; d < 4; ++d) {
          y_sum[d] += ys[d];
          y_sq[d] += ys[d] * ys[d];
        }
        ++count;
      }
  const auto n = static_cast<double>(count);
  for (int d = 0; d < 6; ++d) {
    const double mean = x_sum[d] / n;
    data.x_std[d] = std::max(std::sqrt(x_sq[d] / n - mean * mean), 1e-12);
  }
  for (int d = 0; d < 4; ++d) {
    const double mean = y_sum[d] / n;
    data.y_std[d] = std::max(std::sqrt(y_sq[d] / n - mean * mean), 1e-12);
  }
  return data;
}

// ---- dataset file ----
// magic "MZDS" | u32 version | u32 maze count
// per maze: u32 width | u32 height | vwall bitmap | hwall bitmap |
//           u32 episodes; per episode: u32 transitions | 10 f64 per transition
// trailer:  u32 6 | 6 f64 x_std | u32 4 | 4 f64 y_std
// Bitmaps are packed LSB-first in index order; integers and doubles are
// little-endian.

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("dataset file: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
  static_assert(sizeof(double) == 8);
  out.write(reinterpret_cast<const char*>(&v), 8);
}

double get_f64(std::istream& in) {
  double v;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw IoError("dataset file: truncated");
  return v;
}

void put_bitmap(std::ostream& out, const std::vector<std::uint8_t>& flags) {
  std::vector<unsigned char> bytes((flags.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) bytes[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> get_bitmap(std::istream& in, std::size_t count) {
  std::vector<unsigned char> bytes((count + 7) / 8);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw IoError("dataset file: truncated");
  std::vector<std::uint8_t> flags(count);
  for (std::size_t i = 0; i < count; ++i)
    flags[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  return flags;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write("MZDS", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(data.mazes.size()));
  for (const auto& md : data.mazes) {
    put_u32(out, static_cast<std::uint32_t>(md.maze.width));
    put_u32(out, static_cast<std::uint32_t>(md.maze.height));
    put_bitmap(out, md.maze.vwalls);
    put_bitmap(out, md.maze.hwalls);
    put_u32(out, static_cast<std::uint32_t>(md.episodes.size()));
    for (const auto& ep : md.episodes) {
      put_u32(out, static_cast<std::uint32_t>(ep.size()));
      for (const auto& tr : ep) {
        for (double v : {tr.s.x, tr.s.y, tr.s.vx, tr.s.vy, tr.a.ax, tr.a.ay, tr.s2.x, tr.s2.y,
                         tr.s2.vx, tr.s2.vy})
          put_f64(out, v);
      }
    }
  }
  put_u32(out, 6);
  for (double v : data.x_std) put_f64(out, v);
  put_u32(out, 4);
  for (double v : data.y_std) put_f64(out, v);
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  if (!in.read(magic, 4)) throw IoError("dataset file: truncated");
  if (std::memcmp(magic, "MZDS", 4) != 0) throw IoError("dataset file: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != 1) throw IoError("dataset file: unsupported version " + std::to_string(version));
  Dataset data;
  const std::uint32_t n_mazes = get_u32(in);
  data.mazes.resize(n_mazes);
  for (auto& md : data.mazes) {
    md.maze.width = get_u32(in);
    md.maze.height = get_u32(in);
    md.maze.vwalls = get_bitmap(in, (md.maze.width + 1) * md.maze.height);
    md.maze.hwalls = get_bitmap(in, md.maze.width * (md.maze.height + 1));
    md.episodes.resize(get_u32(in));
    for (auto& ep : md.episodes) {
      ep.resize(get_u32(in));
      for (auto& tr : ep) {
        tr.s.x = get_f64(in);
        tr.s.y = get_f64(in);
        tr.s.vx = get_f64(in);
        tr.s.vy = get_f64(in);
        tr.a.ax = get_f64(in);
        tr.a.ay = get_f64(in);
        tr.s2.x = get_f64(in);
        tr.s2.y = get_f64(in);
        tr.s2.vx = get_f64(in);
        tr.s2.vy = get_f64(in);
      }
    }
  }
  if (get_u32(in) != 6) throw IoError("dataset file: bad x_std block");
  for (auto& v : data.x_std) v = get_f64(in);
  if (get_u32(in) != 4) throw IoError("dataset file: bad y_std block");
  for (auto& v : data.y_std) v = get_f64(in);
  return data;
}

model::Task make_task(const std::vector<Transition>& context,
                      const std::vector<Transition>& query, const std::array<double, 6>& x_std,
                      const std::array<double, 4>& y_std) {
  auto fill = [&](const std::vector<Transition>& src, std::vector<double>& xs,
                  std::vector<double>& ys) {
    xs.reserve(src.size() * 6);
    ys.reserve(src.size() * 4);
    for (const auto& tr : src) {
      const double raw_x[6] = {tr.s.x, tr.s.y, tr.s.vx, tr.s.vy, tr.a.ax, tr.a.ay};
      const double raw_y[4] = {tr.s2.x - tr.s.x, tr.s2.y - tr.s.y, tr.s2.vx - tr.s.vx,
                               tr.s2.vy - tr.s.vy};
      for (int d = 0; d < 6; ++d) xs.push_back(raw_x[d] / x_std[d]);
      for (int d = 0; d < 4; ++d) ys.push_back(raw_y[d] / y_std[d]);
    }
  };
  std::vector<double> cx, cy, qx, qy;
  fill(context, cx, cy);
  fill(query, qx, qy);
  model::Task task;
  task.ctx_x = Tensor({context.size(), 6}, std::move(cx));
  task.ctx_y = Tensor({context.size(), 4}, std::move(cy));
  task.query_x = Tensor({query.size(), 6}, std::move(qx));
  task.query_y = Tensor({query.size(), 4}, std::move(qy));
  return task;
}

MazeTask sample_maze_task(const Dataset& data, std::size_t n_extra_episodes, Rng& rng) {
  if (data.mazes.empty()) throw ContractError("sample_maze_task: empty dataset");
  const auto maze_idx =
      static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.mazes.size()) - 1));
  const auto& md = data.mazes[maze_idx];
  const auto ep_idx = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(md.episodes.size()) - 1));
  const auto& ep = md.episodes[ep_idx];
  if (ep.size() < 50) throw ContractError("sample_maze_task: episode shorter than 50");
  const auto start = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(ep.size()) - 50));
  std::vector<Transition> context(ep.begin() + static_cast<std::ptrdiff_t>(start),
                                  ep.begin() + static_cast<std::ptrdiff_t>(start + 30));
  std::vector<Transition> query(ep.begin() + static_cast<std::ptrdiff_t>(start + 30),
                                ep.begin() + static_cast<std::ptrdiff_t>(start + 50));
  for (std::size_t e = 0; e < n_extra_episodes; ++e) {
    auto other = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(md.episodes.size()) - 1));
    if (md.episodes.size() > 1 && other == ep_idx) other = (other + 1) % md.episodes.size();
    const auto& oep = md.episodes[other];
    const auto ostart = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(oep.size()) - 30));
    context.insert(context.end(), oep.begin() + static_cast<std::ptrdiff_t>(ostart),
                   oep.begin() + static_cast<std::ptrdiff_t>(ostart + 30));
  }
  MazeTask out;
  out.task = make_task(context, query, data.x_std, data.y_std);
  out.maze_index = maze_idx;
  return out;
}

// ---- dynamics implementations ----

void OracleDynamics::begin_task(const MazeConfig& maze, const std::vector<Transition>&) {
  maze_ = &maze;
}

std::vector<BallState> OracleDynamics::predict_next(const std::vector<BallState>& states,
                                                    const std::vector<Action>& actions) {
  if (!maze_) throw ContractError("OracleDynamics: begin_task not called");
  std::vector<BallState> out(states.size());
  for (std::size_t i = 0; i < states.size(); ++i)
    out[i] = step(*maze_, states[i], actions[i]).next;
  return out;
}

void ModelDynamics::begin_task(const MazeConfig&, const std::vector<Transition>& context) {
  model::Task task = make_task(context, {}, x_std_, y_std_);
  adapted_ = std::make_unique<model::AdaptedContext>(
      model::adapt_context(model_, task.ctx_x, task.ctx_y));
}

std::vector<BallState> ModelDynamics::predict_next(const std::vector<BallState>& states,
                                                   const std::vector<Action>& actions) {
  if (!adapted_) throw ContractError("ModelDynamics: begin_task not called");
  const std::size_t n = states.size();
  std::vector<double> xs(n * 6);
  for (std::size_t i = 0; i < n; ++i) {
    const double raw[6] = {states[i].x,  states[i].y,   states[i].vx,
                           states[i].vy, actions[i].ax, actions[i].ay};
    for (int d = 0; d < 6; ++d) xs[i * 6 + static_cast<std::size_t>(d)] = raw[d] / x_std_[d];
  }
  auto mixtures = model::predict_adapted(model_, *adapted_, Tensor({n, 6}, std::move(xs)));
  std::vector<BallState> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mean = model::mixture_mean(mixtures[i]);
    out[i].x = states[i].x + mean[0] * y_std_[0];
    out[i].y = states[i].y + mean[1] * y_std_[1];
    out[i].vx = states[i].vx + mean[2] * y_std_[2];
    out[i].vy = states[i].vy + mean[3] * y_std_[3];
  }
  return out;
}

// ---- evaluation protocols ----

namespace {

// Stored episodes put the ball in motion almost immediately, so snippets drawn
// from them rarely start at rest. Evaluation contexts reproduce that by
// warming the start state up with a burst of random steps.
BallState warmed_up_state(const MazeConfig& maze, Rng& rng, std::size_t warmup = 50) {
  BallState s = random_free_state(maze, rng);
  return gen_episode(maze, s, warmup, rng).back().s2;
}

}  // namespace

double rollout_rmse(Dynamics& dynamics, const RolloutOptions& opts) {
  double total = 0.0;
  for (std::size_t i = 0; i < opts.n_mazes; ++i) {
    Rng rng(derive_seed(opts.seed, i));
    const MazeConfig maze = gen_maze(rng);
    const BallState start = warmed_up_state(maze, rng);
    Episode context_a = gen_episode(maze, start, 30, rng);
    Episode context_b = gen_episode(maze, start, 30, rng);
    Episode truth = gen_episode(maze, start, opts.horizon, rng);
    std::vector<Transition> context = context_a;
    context.insert(context.end(), context_b.begin(), context_b.end());
    for (std::size_t e = 0; e < opts.n_extra_episodes; ++e) {
      const BallState other = warmed_up_state(maze, rng);
      Episode extra = gen_episode(maze, other, 30, rng);
      context.insert(context.end(), extra.begin(), extra.end());
    }
    dynamics.begin_task(maze, context);
    BallState s = start;
    double err = 0.0;
    for (std::size_t k = 0; k < opts.horizon; ++k) {
      s = dynamics.predict_next({s}, {truth[k].a})[0];
      const double dx = s.x - truth[k].s2.x;
      const double dy = s.y - truth[k].s2.y;
      err += dx * dx + dy * dy;
    }
    total += std::sqrt(err / (static_cast<double>(opts.horizon) * 2.0));
  }
  return total / static_cast<double>(opts.n_mazes);
}

namespace {

struct WallProbe {
  std::size_t cx, cy;
  int dir;  // 0:+x 1:-x 2:+y 3:-y
  bool truth_wall;
};

constexpr double kDirX[4] = {1.0, -1.0, 0.0, 0.0};
constexpr double kDirY[4] = {0.0, 0.0, 1.0, -1.0};

}  // namespace

WallTestResult wall_inference_test(Dynamics& dynamics, const WallTestOptions& opts) {
  std::size_t correct = 0, tested = 0, walls = 0;
  for (std::size_t i = 0; i < opts.n_mazes; ++i) {
    Rng rng(derive_seed(opts.seed ^ 0x57414c4cull, i));
    const MazeConfig maze = gen_maze(rng);
    const BallState start = warmed_up_state(maze, rng);
    std::vector<Transition> context = gen_episode(maze, start, 30, rng);
    for (std::size_t e = 0; e < opts.n_extra_episodes; ++e) {
      const BallState other = warmed_up_state(maze, rng);
      Episode extra = gen_episode(maze, other, 30, rng);
      context.insert(context.end(), extra.begin(), extra.end());
    }

    // Ground truth is inferable for a (cell, direction) only when the context
    // collided with that wall or crossed that edge.
    std::vector<std::uint8_t> inferable(maze.cells() * 4, 0);
    for (const auto& tr : context) {
      const auto cx = static_cast<std::size_t>(std::floor(tr.s.x));
      const auto cy = static_cast<std::size_t>(std::floor(tr.s.y));
      const StepResult replay = step(maze, tr.s, tr.a);
      const std::size_t base = (cy * maze.width + cx) * 4;
      if (replay.hit_x) inferable[base + (replay.dir_x > 0 ? 0 : 1)] = 1;
      if (replay.hit_y) inferable[base + (replay.dir_y > 0 ? 2 : 3)] = 1;
      const auto ncx = static_cast<std::size_t>(std::floor(tr.s2.x));
      const auto ncy = static_cast<std::size_t>(std::floor(tr.s2.y));
      if (ncx != cx) inferable[base + (ncx > cx ? 0 : 1)] = 1;
      if (ncy != cy) inferable[base + (ncy > cy ? 2 : 3)] = 1;
    }

    std::vector<WallProbe> probes;
    for (std::size_t cy = 0; cy < maze.height; ++cy)
      for (std::size_t cx = 0; cx < maze.width; ++cx)
        for (int dir = 0; dir < 4; ++dir) {
          if (!inferable[(cy * maze.width + cx) * 4 + static_cast<std::size_t>(dir)]) continue;
          bool wall = false;
          switch (dir) {
            case 0: wall = maze.vwall(cx + 1, cy); break;
            case 1: wall = maze.vwall(cx, cy); break;
            case 2: wall = maze.hwall(cx, cy + 1); break;
            case 3: wall = maze.hwall(cx, cy); break;
          }
          probes.push_back(WallProbe{cx, cy, dir, wall});
        }
    if (probes.empty()) continue;

    dynamics.begin_task(maze, context);
    std::vector<BallState> states(probes.size());
    std::vector<Action> actions(probes.size());
    for (std::size_t p = 0; p < probes.size(); ++p) {
      states[p] = BallState{static_cast<double>(probes[p].cx) + 0.5,
                            static_cast<double>(probes[p].cy) + 0.5, 0.0, 0.0};
      actions[p] = Action{kDirX[probes[p].dir], kDirY[probes[p].dir]};
    }
    const std::vector<BallState> origin = states;
    for (std::size_t k = 0; k < opts.push_steps; ++k)
      states = dynamics.predict_next(states, actions);
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const double disp = (states[p].x - origin[p].x) * kDirX[probes[p].dir] +
                          (states[p].y - origin[p].y) * kDirY[probes[p].dir];
      const bool predicted_wall = disp < opts.threshold;
      if (predicted_wall == probes[p].truth_wall) ++correct;
      if (probes[p].truth_wall) ++walls;
      ++tested;
    }
  }
  WallTestResult result;
  result.tested = tested;
  if (tested > 0) {
    result.accuracy = static_cast<double>(correct) / static_cast<double>(tested);
    const double wall_frac = static_cast<double>(walls) / static_cast<double>(tested);
    result.majority_baseline = std::max(wall_frac, 1.0 - wall_frac);
  }
  return result;
}

}  // namespace merlot::maze
