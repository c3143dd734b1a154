#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "merlot/model.hpp"
#include "merlot/rng.hpp"

namespace merlot::task1d {

// Latent coefficient regions: train = [-2,-1] u [1,2], interpolation = [-1,1],
// extrapolation = [-3,-2] u [2,3]. Each coefficient is drawn independently and
// uniformly from its split's region.
enum class Split { kTrain, kInterpolation, kExtrapolation };
enum class Protocol { kRangeShift, kScaleShift };

std::string split_name(Split s);
std::string protocol_name(Protocol p);
Split split_from_name(const std::string& name);
Protocol protocol_from_name(const std::string& name);

struct Piece {
  double center = 0.0;
  bool quadratic = false;
  double a = 0.0;
  double b = 0.0;
};

// 5 or 6 consecutive non-overlapping width-2 pieces whose union contains
// [-5, 5]; each piece is a*(x-c)+b or a*(x-c)^2+b on [c-1, c+1].
struct PiecewiseFunction {
  double start = -5.0;
  std::vector<Piece> pieces;
  double end() const { return start + 2.0 * static_cast<double>(pieces.size()); }
};

struct RegressionTask {
  std::uint64_t id = 0;
  Split split = Split::kTrain;
  Protocol protocol = Protocol::kRangeShift;
  std::vector<double> ctx_x, ctx_y;      // context y carries N(0, 0.1^2) noise
  std::vector<double> query_x, query_y;  // query y is noiseless
};

double sample_coefficient(Split split, Rng& rng);
PiecewiseFunction gen_function(Split split, Rng& rng);
// Shared boundaries belong to the right-hand piece. Throws ContractError when
// x lies outside the covered union.
double eval_function(const PiecewiseFunction& f, double x);

// 7..15 context and 5..10 query points in one random width-4 interval.
RegressionTask sample_range_shift_task(Split split, Rng& rng);
// m context points (5 <= m <= 100) and 100 query points over the full domain,
// coefficients from the train region.
RegressionTask sample_scale_shift_task(std::size_t m, Rng& rng);

model::Task to_model_task(const RegressionTask& task);

// Line-oriented text format: per task a header
//   task <id> <split> <protocol> <m> <n>
// followed by m lines "c <x> <y>" and n lines "q <x> <y>", reals with 17
// significant digits.
void write_tasks(std::ostream& out, const std::vector<RegressionTask>& tasks);
std::vector<RegressionTask> read_tasks(std::istream& in);

}  // namespace merlot::task1d
