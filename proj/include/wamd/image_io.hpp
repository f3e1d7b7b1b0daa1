#pragma once

#include <cstdint>
#include <filesystem>

#include <Eigen/Core>

namespace wamd {

using Gray16 = Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rgb8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 16-bit grayscale PNG.
void write_png16(const std::filesystem::path& path, const Gray16& pixels);
Gray16 read_png16(const std::filesystem::path& path);

/// 8-bit RGB PNG; `pixels` is height x (3 * width), interleaved.
void write_png_rgb(const std::filesystem::path& path, const Rgb8& pixels);

}  // namespace wamd
