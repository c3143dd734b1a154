#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "merlot/model.hpp"
#include "merlot/rng.hpp"

namespace merlot::maze {

// Point-mass physics constants. Chosen so a ball at cruising speed crosses a
// cell in 10-20 steps, which makes walls inferable from 30-step contexts.
constexpr double kDt = 0.05;
constexpr double kFriction = 0.05;
constexpr double kMaxSpeed = 2.0;
constexpr double kRadius = 0.1;

// Cells are unit squares; cell (cx, cy) spans [cx, cx+1] x [cy, cy+1]. Walls
// sit on cell edges; the outer boundary is always fully walled.
struct MazeConfig {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> vwalls;  // (width+1) x height, plane x = cx beside row ry
  std::vector<std::uint8_t> hwalls;  // width x (height+1), plane y = ry beside column cx

  bool vwall(std::size_t cx, std::size_t ry) const { return vwalls[cx * height + ry] != 0; }
  bool hwall(std::size_t cx, std::size_t ry) const { return hwalls[ry * width + cx] != 0; }
  void set_vwall(std::size_t cx, std::size_t ry, bool on) { vwalls[cx * height + ry] = on; }
  void set_hwall(std::size_t cx, std::size_t ry, bool on) { hwalls[ry * width + cx] = on; }

  std::size_t cells() const { return width * height; }
  bool connected() const;
  std::size_t interior_wall_count() const;
  std::size_t interior_wall_slots() const { return 2 * width * height - width - height; }
};

struct BallState {
  double x = 0.0, y = 0.0;
  double vx = 0.0, vy = 0.0;
};

struct Action {
  double ax = 0.0, ay = 0.0;
};

struct StepResult {
  BallState next;
  bool hit_x = false, hit_y = false;  // collision with a vertical / horizontal wall
  int wall_x = 0, wall_y = 0;         // grid coordinate of the wall plane hit
  int dir_x = 0, dir_y = 0;           // travel direction when hit (+1 / -1)
};

// Randomized-DFS perfect maze over a {7,8,9} x {7,8,9} grid, then every
// remaining interior wall is removed independently with probability 0.2.
MazeConfig gen_maze(Rng& rng);
BallState random_free_state(const MazeConfig& maze, Rng& rng);

// Semi-implicit Euler with axis-separated, inelastic wall collisions:
// v' = (v + a*dt) * (1 - friction*dt), speed clamped to kMaxSpeed; on
// collision the normal velocity component is zeroed and the position clamps
// to the wall face minus the ball radius.
StepResult step(const MazeConfig& maze, const BallState& state, const Action& action);

struct Transition {
  BallState s;
  Action a;
  BallState s2;
};
using Episode = std::vector<Transition>;

Episode gen_episode(const MazeConfig& maze, const BallState& start, std::size_t length, Rng& rng);

struct MazeData {
  MazeConfig maze;
  std::vector<Episode> episodes;
};

struct Dataset {
  std::vector<MazeData> mazes;
  // Per-dimension standard deviations of x = (s, a) and y = s' - s over the
  // whole meta-training dataset; frozen with the data. Values are divided by
  // these (no mean centering).
  std::array<double, 6> x_std{};
  std::array<double, 4> y_std{};
};

Dataset gen_dataset(std::size_t n_mazes, std::size_t episodes, std::size_t length, Rng& rng);

// Versioned binary dataset file (magic MZDS); see save for the exact layout.
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

// Normalized task rows: x = concat(s, a) / x_std (d_x = 6), y = (s2 - s) / y_std
// (d_y = 4).
model::Task make_task(const std::vector<Transition>& context,
                      const std::vector<Transition>& query, const std::array<double, 6>& x_std,
                      const std::array<double, 4>& y_std);

struct MazeTask {
  model::Task task;
  std::size_t maze_index = 0;
};

// Base snippet: 30 context + 20 query transitions from one stored episode;
// n_extra_episodes appends further 30-length context snippets from other
// episodes of the same maze.
MazeTask sample_maze_task(const Dataset& data, std::size_t n_extra_episodes, Rng& rng);

// Forward-dynamics predictor interface for the evaluation protocols. Works in
// raw (unnormalized) units; predicts next states for a batch of queries.
class Dynamics {
 public:
  virtual ~Dynamics() = default;
  virtual void begin_task(const MazeConfig& maze, const std::vector<Transition>& context) = 0;
  virtual std::vector<BallState> predict_next(const std::vector<BallState>& states,
                                              const std::vector<Action>& actions) = 0;
};

// The simulator itself (reads the true maze).
class OracleDynamics : public Dynamics {
 public:
  void begin_task(const MazeConfig& maze, const std::vector<Transition>& context) override;
  std::vector<BallState> predict_next(const std::vector<BallState>& states,
                                      const std::vector<Action>& actions) override;

 private:
  const MazeConfig* maze_ = nullptr;
};

// Predicts no movement.
class ZeroDynamics : public Dynamics {
 public:
  void begin_task(const MazeConfig&, const std::vector<Transition>&) override {}
  std::vector<BallState> predict_next(const std::vector<BallState>& states,
                                      const std::vector<Action>&) override {
    return states;
  }
};

// A trained model behind the dynamics interface: adapts to the normalized
// context once per task, then turns mixture-mean deltas back into raw units.
class ModelDynamics : public Dynamics {
 public:
  ModelDynamics(const model::Model& model, std::array<double, 6> x_std,
                std::array<double, 4> y_std)
      : model_(model), x_std_(x_std), y_std_(y_std) {}
  void begin_task(const MazeConfig& maze, const std::vector<Transition>& context) override;
  std::vector<BallState> predict_next(const std::vector<BallState>& states,
                                      const std::vector<Action>& actions) override;

 private:
  const model::Model& model_;
  std::array<double, 6> x_std_;
  std::array<double, 4> y_std_;
  std::unique_ptr<model::AdaptedContext> adapted_;
};

struct RolloutOptions {
  std::size_t horizon = 15;
  std::size_t n_mazes = 300;
  std::size_t n_extra_episodes = 0;  // extra differently-started context episodes
  std::uint64_t seed = 0;
};

// Closed-loop position RMSE against fresh evaluation mazes. The context is two
// 30-step episodes sharing the query's starting position (plus any extras);
// predictions are fed back for `horizon` steps.
double rollout_rmse(Dynamics& dynamics, const RolloutOptions& opts);

struct WallTestOptions {
  std::size_t n_mazes = 50;
  std::size_t n_extra_episodes = 0;
  std::size_t push_steps = 30;
  double threshold = 0.5;  // predicted displacement below this many cells => wall
  std::uint64_t seed = 0;
};

struct WallTestResult {
  double accuracy = 0.0;
  double majority_baseline = 0.0;  // max(wall fraction, 1 - wall fraction)
  std::size_t tested = 0;
};

// For every (visited cell, direction) whose ground truth is inferable from the
// context trajectory (a collision or an edge crossing), pushes the ball from
// rest at the cell center and classifies wall/no-wall from the predicted
// displacement.
WallTestResult wall_inference_test(Dynamics& dynamics, const WallTestOptions& opts);

}  // namespace merlot::maze
