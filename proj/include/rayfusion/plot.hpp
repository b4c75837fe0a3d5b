#pragma once

// Static SVG line charts and CSV tables for reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace rayfusion {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Fixed 640x420 canvas, linear axes with five ticks each. Output depends
/// only on the inputs.
inline std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<Series>& series) {
  using detail::fmt;
  constexpr double W = 640, H = 420, L = 70, R = 160, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return T + ph - (y - y0) / (y1 - y0) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(W) + "\" height=\"" + fmt(H) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + fmt(L + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + detail::xml_escape(title) + "</text>\n";
  o += "<rect x=\"" + fmt(L) + "\" y=\"" + fmt(T) + "\" width=\"" + fmt(pw) + "\" height=\"" + fmt(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o += "<line x1=\"" + fmt(sx(xv)) + "\" y1=\"" + fmt(T + ph) + "\" x2=\"" + fmt(sx(xv)) + "\" y2=\"" + fmt(T + ph + 5) + "\" stroke=\"black\"/>";
    o += "<text x=\"" + fmt(sx(xv)) + "\" y=\"" + fmt(T + ph + 18) + "\" text-anchor=\"middle\">" + fmt(xv, "%.3g") + "</text>\n";
    o += "<line x1=\"" + fmt(L - 5) + "\" y1=\"" + fmt(sy(yv)) + "\" x2=\"" + fmt(L) + "\" y2=\"" + fmt(sy(yv)) + "\" stroke=\"black\"/>";
    o += "<text x=\"" + fmt(L - 8) + "\" y=\"" + fmt(sy(yv) + 4) + "\" text-anchor=\"end\">" + fmt(yv, "%.3g") + "</text>\n";
  }
  o += "<text x=\"" + fmt(L + pw / 2) + "\" y=\"" + fmt(H - 10) + "\" text-anchor=\"middle\">" + detail::xml_escape(xlabel) + "</text>\n";
  o += "<text transform=\"translate(18," + fmt(T + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" + detail::xml_escape(ylabel) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const std::string color = colors[k % 8];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) pts += fmt(sx(s.x[i])) + "," + fmt(sy(s.y[i])) + " ";
    o += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    o += "<line x1=\"" + fmt(W - R + 10) + "\" y1=\"" + fmt(ly) + "\" x2=\"" + fmt(W - R + 30) + "\" y2=\"" + fmt(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>";
    o += "<text x=\"" + fmt(W - R + 36) + "\" y=\"" + fmt(ly + 4) + "\">" + detail::xml_escape(s.name) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

/// Comma-separated table with a header row; numbers use %.6f.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void row(const std::vector<std::string>& cells) { rows_.push_back(cells); }

  static std::string num(double v) { return detail::fmt(v, "%.6f"); }

  std::string str() const {
    std::string o;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) o += (i ? "," : "") + cells[i];
      o += "\n";
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return o;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace rayfusion
