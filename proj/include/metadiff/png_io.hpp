#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "metadiff/codec.hpp"

namespace metadiff {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// 8-bit RGB PNG, value = round(255 * channel) after clamping.
inline void write_png(const std::filesystem::path& path, const EncodedImage& img) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng error while writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks, so identical images give identical bytes.
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(3 * img.width));
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(static_cast<double>(img.at(ch, r, c)), 0.0, 1.0);
        row[static_cast<std::size_t>(3 * c + ch)] = static_cast<png_byte>(std::lround(255.0 * v));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline EncodedImage read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng error while reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path.string() + ": expected 8-bit RGB");
  }
  EncodedImage img(height, width);
  std::vector<png_byte> row(static_cast<std::size_t>(3 * width));
  for (int r = 0; r < height; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < width; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(ch, r, c) = static_cast<float>(row[static_cast<std::size_t>(3 * c + ch)]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace metadiff
