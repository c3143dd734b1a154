#include "merlot/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

namespace merlot::plot {

namespace {

constexpr double kWidth = 480.0;
constexpr double kHeight = 360.0;
constexpr double kMarginLeft = 64.0;
constexpr double kMarginRight = 16.0;
constexpr double kMarginTop = 28.0;
constexpr double kMarginBottom = 44.0;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  double to_px(double v, double px_lo, double px_hi) const {
    if (hi == lo) return (px_lo + px_hi) / 2.0;
    return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo);
  }
};

Axis fit_axis(double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

struct Panel {
  std::ostringstream svg;
  double x0, y0;  // top-left of the panel in document coordinates
  Axis ax, ay;

  double px(double v) const { return ax.to_px(v, x0 + kMarginLeft, x0 + kWidth - kMarginRight); }
  double py(double v) const {
    return ay.to_px(v, y0 + kHeight - kMarginBottom, y0 + kMarginTop);
  }

  void frame(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    svg << "<rect x='" << x0 + kMarginLeft << "' y='" << y0 + kMarginTop << "' width='"
        << kWidth - kMarginLeft - kMarginRight << "' height='"
        << kHeight - kMarginTop - kMarginBottom
        << "' fill='none' stroke='#444' stroke-width='1'/>\n";
    svg << "<text x='" << x0 + kWidth / 2 << "' y='" << y0 + 18
        << "' text-anchor='middle' font-size='14'>" << title << "</text>\n";
    svg << "<text x='" << x0 + kWidth / 2 << "' y='" << y0 + kHeight - 8
        << "' text-anchor='middle' font-size='12'>" << xlabel << "</text>\n";
    svg << "<text x='" << x0 + 14 << "' y='" << y0 + kHeight / 2
        << "' text-anchor='middle' font-size='12' transform='rotate(-90 " << x0 + 14 << ' '
        << y0 + kHeight / 2 << ")'>" << ylabel << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = ax.lo + (ax.hi - ax.lo) * i / 4.0;
      const double fy = ay.lo + (ay.hi - ay.lo) * i / 4.0;
      svg << "<text x='" << px(fx) << "' y='" << y0 + kHeight - kMarginBottom + 16
          << "' text-anchor='middle' font-size='10'>" << fmt(fx) << "</text>\n";
      svg << "<text x='" << x0 + kMarginLeft - 6 << "' y='" << py(fy) + 3
          << "' text-anchor='end' font-size='10'>" << fmt(fy) << "</text>\n";
      svg << "<line x1='" << x0 + kMarginLeft << "' y1='" << py(fy) << "' x2='"
          << x0 + kWidth - kMarginRight << "' y2='" << py(fy)
          << "' stroke='#ddd' stroke-width='0.5'/>\n";
    }
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                bool dashed = false) {
    if (pts.empty()) return;
    svg << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5'"
        << (dashed ? " stroke-dasharray='5 3'" : "") << " points='";
    for (const auto& [x, y] : pts) svg << px(x) << ',' << py(y) << ' ';
    svg << "'/>\n";
  }

  void cross(double x, double y, const std::string& color) {
    const double cx = px(x), cy = py(y), r = 3.5;
    svg << "<path d='M" << cx - r << ' ' << cy << " H" << cx + r << " M" << cx << ' ' << cy - r
        << " V" << cy + r << "' stroke='" << color << "' stroke-width='1.5'/>\n";
  }
};

std::string document(double width, double height, const std::string& body) {
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "' viewBox='0 0 " << width << ' ' << height << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << body << "</svg>\n";
  return out.str();
}

}  // namespace

std::string curve_svg(const std::vector<harness::EvalRow>& rows) {
  if (rows.empty()) throw ContractError("curve_svg: no rows");
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_size;
  for (const auto& row : rows) {
    by_size[row.context_size].first.push_back(row.nll);
    by_size[row.context_size].second.push_back(row.rmse);
  }
  std::vector<std::pair<double, double>> nll_pts, rmse_pts;
  for (const auto& [size, values] : by_size) {
    double nll = 0.0, rmse = 0.0;
    for (double v : values.first) nll += v;
    for (double v : values.second) rmse += v;
    nll_pts.emplace_back(static_cast<double>(size), nll / static_cast<double>(values.first.size()));
    rmse_pts.emplace_back(static_cast<double>(size),
                          rmse / static_cast<double>(values.second.size()));
  }

  auto make_panel = [&](double x0, const std::vector<std::pair<double, double>>& pts,
                        const std::string& title) {
    Panel p;
    p.x0 = x0;
    p.y0 = 0.0;
    double xlo = pts.front().first, xhi = pts.front().first;
    double ylo = pts.front().second, yhi = pts.front().second;
    for (const auto& [x, y] : pts) {
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
    p.ax = fit_axis(xlo, xhi);
    p.ay = fit_axis(ylo, yhi);
    p.frame(title, "context size", title);
    p.polyline(pts, "#1f6fb2");
    for (const auto& [x, y] : pts)
      p.svg << "<circle cx='" << p.px(x) << "' cy='" << p.py(y) << "' r='2.5' fill='#1f6fb2'/>\n";
    return p.svg.str();
  };

  const std::string body = make_panel(0.0, nll_pts, "NLL") + make_panel(kWidth, rmse_pts, "RMSE");
  return document(2 * kWidth, kHeight, body);
}

std::string overlay_svg(const std::vector<OverlayPoint>& points) {
  if (points.empty()) throw ContractError("overlay_svg: no points");
  std::vector<OverlayPoint> curve, context;
  for (const auto& p : points) (p.is_context ? context : curve).push_back(p);
  std::sort(curve.begin(), curve.end(),
            [](const OverlayPoint& a, const OverlayPoint& b) { return a.x < b.x; });

  Panel p;
  p.x0 = 0.0;
  p.y0 = 0.0;
  double xlo = points.front().x, xhi = xlo, ylo = 0.0, yhi = 0.0;
  bool first = true;
  for (const auto& pt : points) {
    xlo = std::min(xlo, pt.x);
    xhi = std::max(xhi, pt.x);
    const double candidates[] = {pt.y_true, pt.is_context ? pt.y_true : pt.mu - pt.sigma,
                                 pt.is_context ? pt.y_true : pt.mu + pt.sigma};
    for (double c : candidates) {
      if (first) {
        ylo = yhi = c;
        first = false;
      }
      ylo = std::min(ylo, c);
      yhi = std::max(yhi, c);
    }
  }
  p.ax = fit_axis(xlo, xhi);
  p.ay = fit_axis(ylo, yhi);
  p.frame("prediction overlay", "x", "y");

  std::vector<std::pair<double, double>> truth, mean, lo_band, hi_band;
  for (const auto& pt : curve) {
    truth.emplace_back(pt.x, pt.y_true);
    mean.emplace_back(pt.x, pt.mu);
    lo_band.emplace_back(pt.x, pt.mu - pt.sigma);
    hi_band.emplace_back(pt.x, pt.mu + pt.sigma);
  }
  p.polyline(truth, "#c23b3b");
  p.polyline(mean, "#1f6fb2", true);
  p.polyline(lo_band, "#9ec5e8");
  p.polyline(hi_band, "#9ec5e8");
  for (const auto& pt : context) p.cross(pt.x, pt.y_true, "#222");
  return document(kWidth, kHeight, p.svg.str());
}

bool is_overlay_header(const std::string& header) {
  return header == "x,y_true,mu,sigma,is_context";
}

void write_overlay_csv(std::ostream& out, const std::vector<OverlayPoint>& points) {
  out << "x,y_true,mu,sigma,is_context\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%d\n", p.x, p.y_true, p.mu, p.sigma,
                  p.is_context ? 1 : 0);
    out << buf;
  }
}

std::vector<OverlayPoint> read_overlay_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || !is_overlay_header(line))
    throw IoError("overlay csv: bad header");
  std::vector<OverlayPoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    OverlayPoint p;
    int is_ctx = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%d", &p.x, &p.y_true, &p.mu, &p.sigma,
                    &is_ctx) != 5)
      throw IoError("overlay csv: malformed row '" + line + "'");
    p.is_context = is_ctx != 0;
    points.push_back(p);
  }
  return points;
}

}  // namespace merlot::plot
