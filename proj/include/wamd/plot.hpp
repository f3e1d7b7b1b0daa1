#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wamd/evaluation.hpp"

namespace wamd {

/// Heat map of a shift surface, one square cell per (dx, dy); +dy points
/// down as in image coordinates. Low values are dark.
void write_surface_png(const std::vector<SurfacePoint>& surface, const std::filesystem::path& path,
                       int cell_px = 24);

struct LabeledCurve {
  std::string label;
  std::vector<CurvePoint> points;
  double mr{0};
};

/// Miss rate against FPPI on log-log axes over FPPI in [1e-2, 1e0].
void write_mr_curves_svg(const std::vector<LabeledCurve>& curves, const std::filesystem::path& path);

}  // namespace wamd
