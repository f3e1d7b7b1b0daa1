#include "wamd/image_io.hpp"

#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

#include "wamd/errors.hpp"

namespace wamd {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw ParseError("cannot open " + path.string());
  return f;
}

void write_rows(const std::filesystem::path& path, int width, int height, int bit_depth,
                int color_type, const std::vector<png_bytep>& rows) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ParseError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ParseError("failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header so identical pixels give identical bytes.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png16(const std::filesystem::path& path, const Gray16& pixels) {
  Gray16 copy = pixels;
  std::vector<png_bytep> rows(static_cast<std::size_t>(copy.rows()));
  for (Eigen::Index r = 0; r < copy.rows(); ++r) {
    rows[static_cast<std::size_t>(r)] = reinterpret_cast<png_bytep>(copy.row(r).data());
  }
  // libpng expects big-endian samples; png_set_swap converts from host order.
  write_rows(path, static_cast<int>(copy.cols()), static_cast<int>(copy.rows()), 16,
             PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_rgb(const std::filesystem::path& path, const Rgb8& pixels) {
  Rgb8 copy = pixels;
  std::vector<png_bytep> rows(static_cast<std::size_t>(copy.rows()));
  for (Eigen::Index r = 0; r < copy.rows(); ++r) {
    rows[static_cast<std::size_t>(r)] = copy.row(r).data();
  }
  write_rows(path, static_cast<int>(copy.cols() / 3), static_cast<int>(copy.rows()), 8,
             PNG_COLOR_TYPE_RGB, rows);
}

Gray16 read_png16(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("failed reading " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type != PNG_COLOR_TYPE_GRAY || bit_depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path.string() + ": expected a 16-bit grayscale PNG");
  }
  png_set_swap(png);
  png_read_update_info(png, info);
  Gray16 pixels(height, width);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) rows[static_cast<std::size_t>(r)] = reinterpret_cast<png_bytep>(pixels.row(r).data());
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace wamd
