#include "wamd/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "wamd/image_io.hpp"

namespace wamd {

namespace {

// Piecewise-linear dark-blue -> teal -> yellow ramp.
std::array<std::uint8_t, 3> ramp(double t) {
  static constexpr double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[static_cast<std::size_t>(k)] =
        static_cast<std::uint8_t>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
  }
  return c;
}

}  // namespace

void write_surface_png(const std::vector<SurfacePoint>& surface, const std::filesystem::path& path, int cell_px) {
  if (surface.empty()) throw ValidationError("write_surface_png: empty surface");
  if (cell_px < 1) throw ValidationError("write_surface_png: cell size must be positive");
  int x0 = surface[0].dx, x1 = x0, y0 = surface[0].dy, y1 = y0;
  double lo = surface[0].value, hi = lo;
  for (const auto& p : surface) {
    x0 = std::min(x0, p.dx);
    x1 = std::max(x1, p.dx);
    y0 = std::min(y0, p.dy);
    y1 = std::max(y1, p.dy);
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  const int cols = x1 - x0 + 1, rows = y1 - y0 + 1;
  Rgb8 img = Rgb8::Constant(rows * cell_px, 3 * cols * cell_px, 128);
  for (const auto& p : surface) {
    const auto c = ramp(hi > lo ? (p.value - lo) / (hi - lo) : 0.5);
    const int r0 = (p.dy - y0) * cell_px, c0 = (p.dx - x0) * cell_px;
    for (int r = r0; r < r0 + cell_px; ++r) {
      for (int q = c0; q < c0 + cell_px; ++q) {
        for (int k = 0; k < 3; ++k) img(r, 3 * q + k) = c[static_cast<std::size_t>(k)];
      }
    }
  }
  write_png_rgb(path, img);
}

void write_mr_curves_svg(const std::vector<LabeledCurve>& curves, const std::filesystem::path& path) {
  constexpr double W = 520, H = 420, L = 70, R = 170, T = 20, B = 50;
  constexpr double fx0 = -2, fx1 = 0, my0 = std::log10(0.05), my1 = 0;
  auto px = [&](double fppi) {
    const double lx = std::clamp(std::log10(std::max(fppi, 1e-4)), fx0, fx1);
    return L + (lx - fx0) / (fx1 - fx0) * (W - L - R);
  };
  auto py = [&](double mr) {
    const double ly = std::clamp(std::log10(std::max(mr, 1e-4)), my0, my1);
    return T + (my1 - ly) / (my1 - my0) * (H - T - B);
  };
  static const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (double e : {-2.0, -1.0, 0.0}) {
    const double x = px(std::pow(10.0, e));
    s << "<line x1=\"" << x << "\" y1=\"" << T << "\" x2=\"" << x << "\" y2=\"" << H - B << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << x << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">1e" << e << "</text>\n";
  }
  for (double m : {0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.64, 0.8, 1.0}) {
    const double y = py(m);
    s << "<line x1=\"" << L << "\" y1=\"" << y << "\" x2=\"" << W - R << "\" y2=\"" << y << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << m << "</text>\n";
  }
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">false positives per image</text>\n";
  s << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">miss rate</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* col = colors[i % 6];
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    // Step plot: miss rate holds until the next operating point.
    double prev_mr = 1.0;
    s << px(1e-4) << ',' << py(prev_mr) << ' ';
    for (const auto& p : curves[i].points) {
      s << px(p.fppi) << ',' << py(prev_mr) << ' ' << px(p.fppi) << ',' << py(p.miss_rate) << ' ';
      prev_mr = p.miss_rate;
    }
    s << px(1e2) << ',' << py(prev_mr) << "\"/>\n";
    const double ly = T + 16 + 18 * static_cast<double>(i);
    s << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    std::ostringstream lab;
    lab.precision(2);
    lab << std::fixed << 100.0 * curves[i].mr << "% " << curves[i].label;
    s << "<text x=\"" << W - R + 34 << "\" y=\"" << ly << "\">" << lab.str() << "</text>\n";
  }
  s << "</svg>\n";
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write plot: " + path.string());
  os << s.str();
}

}  // namespace wamd
