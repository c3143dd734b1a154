#pragma once

#include <string>
#include <vector>

#include "merlot/harness.hpp"

namespace merlot::plot {

// NLL and RMSE vs context size, one panel each (sweep/eval CSV input). Rows
// are aggregated by context size.
std::string curve_svg(const std::vector<harness::EvalRow>& rows);

// Predicted-vs-true 1D overlay: true function, predicted mean with a +-sigma
// band, and the context points.
struct OverlayPoint {
  double x = 0.0;
  double y_true = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  bool is_context = false;
};

std::string overlay_svg(const std::vector<OverlayPoint>& points);

void write_overlay_csv(std::ostream& out, const std::vector<OverlayPoint>& points);
std::vector<OverlayPoint> read_overlay_csv(std::istream& in);
bool is_overlay_header(const std::string& header);

}  // namespace merlot::plot
