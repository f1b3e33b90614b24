#pragma once

// Minimal SVG figures: scatter, heatmap, and line series.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "ept/tensor.hpp"

namespace ept::svg {

struct Box {
  double x0, x1, y0, y1;
};

// Bounding box of the first two coordinates, padded by `pad` of each extent.
inline Box bounding_box(const Tensor& pts, double pad = 0.1) {
  require_matrix(pts, "bounding_box");
  if (pts.rows() == 0 || pts.cols() < 2) throw ShapeError("bounding_box needs 2D points");
  Box b{INFINITY, -INFINITY, INFINITY, -INFINITY};
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    b.x0 = std::min(b.x0, pts(i, 0));
    b.x1 = std::max(b.x1, pts(i, 0));
    b.y0 = std::min(b.y0, pts(i, 1));
    b.y1 = std::max(b.y1, pts(i, 1));
  }
  const double dx = std::max(b.x1 - b.x0, 1e-9) * pad, dy = std::max(b.y1 - b.y0, 1e-9) * pad;
  return {b.x0 - dx, b.x1 + dx, b.y0 - dy, b.y1 + dy};
}

namespace detail {

inline constexpr double kSize = 480, kMargin = 40;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string header(const std::string& title) {
  const std::string s = num(kSize + 2 * kMargin);
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + s + "\" height=\"" + s + "\" viewBox=\"0 0 " + s +
         " " + s + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"" + num(kMargin) +
         "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
}

// Viridis-like ramp on [0, 1].
inline std::string colour(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double r = 68 + t * (253 - 68), g = 1 + t * (231 - 1), b = 84 + t * (37 - 84);
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(r), static_cast<int>(g), static_cast<int>(b));
  return buf;
}

}  // namespace detail

inline std::string scatter(const Tensor& pts, const std::string& title, const Box& box) {
  using namespace detail;
  std::string out = header(title);
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    const double x = kMargin + (pts(i, 0) - box.x0) / (box.x1 - box.x0) * kSize;
    const double y = kMargin + (box.y1 - pts(i, 1)) / (box.y1 - box.y0) * kSize;
    out += "<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"1.2\" fill=\"#1f77b4\" fill-opacity=\"0.5\"/>\n";
  }
  return out + "</svg>\n";
}

// values is (ny x nx), row 0 at the bottom of the box.
inline std::string heatmap(const Tensor& values, const std::string& title) {
  using namespace detail;
  require_matrix(values, "heatmap");
  const std::size_t ny = values.rows(), nx = values.cols();
  double lo = INFINITY, hi = -INFINITY;
  for (double v : values.storage()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  const double w = kSize / static_cast<double>(nx), h = kSize / static_cast<double>(ny);
  std::string out = header(title);
  for (std::size_t r = 0; r < ny; ++r) {
    for (std::size_t c = 0; c < nx; ++c) {
      out += "<rect x=\"" + num(kMargin + static_cast<double>(c) * w) + "\" y=\"" +
             num(kMargin + static_cast<double>(ny - 1 - r) * h) + "\" width=\"" + num(w + 0.05) + "\" height=\"" +
             num(h + 0.05) + "\" fill=\"" + colour((values(r, c) - lo) / span) + "\"/>\n";
    }
  }
  return out + "</svg>\n";
}

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Each series in its own horizontal panel, sharing the x range.
inline std::string lines(const std::vector<Series>& series, const std::string& title) {
  using namespace detail;
  std::string out = header(title);
  const double panel = kSize / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
    const double top = kMargin + static_cast<double>(k) * panel;
    out += "<text x=\"" + num(kMargin) + "\" y=\"" + num(top + 12) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
           s.name + " [" + num(y0) + ", " + num(y1) + "]</text>\n";
    if (!(x1 > x0)) continue;
    const double ys = y1 > y0 ? y1 - y0 : 1.0;
    std::string path;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const double px = kMargin + (s.x[i] - x0) / (x1 - x0) * kSize;
      const double py = top + 16 + (1 - (s.y[i] - y0) / ys) * (panel - 24);
      path += (path.empty() ? "M" : " L") + num(px) + " " + num(py);
    }
    out += "<path d=\"" + path + "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1\"/>\n";
  }
  return out + "</svg>\n";
}

}  // namespace ept::svg
