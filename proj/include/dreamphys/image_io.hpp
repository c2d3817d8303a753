#pragma once

// 8-bit RGB PNG frames. Rendered values are already display-referred (the
// 3DGS color convention), so they are stored without a transfer curve and
// tagged sRGB.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dreamphys/error.hpp"
#include "dreamphys/render.hpp"

namespace dreamphys::image_io {

using render::Image;

inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

/// Value after a round trip through an 8-bit PNG.
template <typename Real>
Real quantize(Real v) {
  return static_cast<Real>(to_byte(static_cast<double>(v))) / Real(255);
}

template <typename Real>
void write_png(const std::filesystem::path& path, const Image<Real>& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) raise(ErrorKind::Io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    raise(ErrorKind::Io, "libpng initialization failed");
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.height) * img.width * 3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = to_byte(static_cast<double>(img.data[i]));
  std::vector<png_bytep> row_ptrs(img.height);
  for (int i = 0; i < img.height; ++i) row_ptrs[i] = rows.data() + static_cast<std::size_t>(i) * img.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise(ErrorKind::Io, "PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_sRGB(png, info, PNG_sRGB_INTENT_PERCEPTUAL);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any 8/16-bit PNG as RGB in [0, 1].
inline Image<float> read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) raise(ErrorKind::Io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::Io, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::Io, "PNG decoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> row_ptrs(h);
  for (int i = 0; i < h; ++i) row_ptrs[i] = rows.data() + static_cast<std::size_t>(i) * w * 3;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Image<float> img(h, w);
  for (std::size_t i = 0; i < rows.size(); ++i) img.data[i] = rows[i] / 255.0f;
  return img;
}

inline std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04d.png", index);
  return buf;
}

template <typename Real>
void write_frames(const std::filesystem::path& dir, const render::Video<Real>& video, int first_index = 0) {
  std::filesystem::create_directories(dir);
  for (int t = 0; t < video.frames; ++t) write_png(dir / frame_name(first_index + t), video.image(t));
}

/// Reads frame_0000.png, frame_0001.png, ... until the first gap.
inline render::Video<float> read_frames(const std::filesystem::path& dir) {
  std::vector<Image<float>> frames;
  while (std::filesystem::exists(dir / frame_name(static_cast<int>(frames.size())))) {
    frames.push_back(read_png(dir / frame_name(static_cast<int>(frames.size()))));
  }
  if (frames.empty()) raise(ErrorKind::Io, "no frame_0000.png in " + dir.string());
  render::Video<float> v(static_cast<int>(frames.size()), frames[0].height, frames[0].width);
  for (int t = 0; t < v.frames; ++t) v.set_frame(t, frames[t]);
  return v;
}

}  // namespace dreamphys::image_io
