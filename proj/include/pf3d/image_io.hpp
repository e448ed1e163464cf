#pragma once

// 8-bit PNG I/O for channel-major [C, H, W] tensors with values in [0, 1].
// Encoding settings are fixed so identical pixels give identical bytes.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "pf3d/autodiff.hpp"

namespace pf3d {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;              // 1 or 3
  std::vector<std::uint8_t> px;  // interleaved, row-major
};

inline std::uint8_t quantize(double v) {
  if (!std::isfinite(v)) throw NonFiniteError("quantize", -1);
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

// Accepts [C, H, W] (C = 1 or 3) or [H, W].
inline Image8 to_image8(const Tensor& t) {
  Image8 img;
  std::size_t c, h, w;
  if (t.rank() == 2) {
    c = 1, h = t.dim(0), w = t.dim(1);
  } else if (t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
    c = t.dim(0), h = t.dim(1), w = t.dim(2);
  } else {
    throw ShapeError("to_image8: expected [H,W], [1,H,W] or [3,H,W], got " + shape_str(t.shape()));
  }
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.channels = static_cast<int>(c);
  img.px.resize(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) img.px[i * c + ch] = quantize(t[ch * h * w + i]);
  return img;
}

// Returns [C, H, W].
inline Tensor from_image8(const Image8& img) {
  const std::size_t c = img.channels, h = img.height, w = img.width;
  Tensor t(Shape{c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) t[ch * h * w + i] = img.px[i * c + ch] / 255.0;
  return t;
}

namespace detail {

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush_noop(png_structp) {}

struct PngReadSource {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->pos + len > src->size) png_error(png, "unexpected end of PNG data");
  std::copy(src->data + src->pos, src->data + src->pos + len, out);
  src->pos += len;
}

// libpng reports errors by longjmp; the message is stashed here first.
inline void png_error_store(png_structp png, png_const_charp msg) {
  auto* slot = static_cast<std::string*>(png_get_error_ptr(png));
  if (slot) *slot = msg;
  png_longjmp(png, 1);
}
inline void png_warn_silent(png_structp, png_const_charp) {}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_png: 1 or 3 channels");
  if (img.px.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw std::invalid_argument("encode_png: pixel buffer size mismatch");
  std::string err;
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_store, detail::png_warn_silent);
  if (!png) throw std::runtime_error("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png encode: " + err);
  }
  {
    png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int r = 0; r < img.height; ++r)
      png_write_row(png, const_cast<png_bytep>(img.px.data() + r * stride));
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw std::runtime_error("png: not a PNG file");
  std::string err;
  Image8 img;
  detail::PngReadSource src{bytes.data(), bytes.size(), 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_store, detail::png_warn_silent);
  if (!png) throw std::runtime_error("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png decode: " + err);
  }
  {
    png_set_read_fn(png, &src, detail::png_read_from_memory);
    png_read_info(png, info);
    const int ct = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = static_cast<int>(png_get_channels(png, info));
    img.px.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int r = 0; r < img.height; ++r) png_read_row(png, img.px.data() + r * stride, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Tensor& t) { write_file_bytes(path, encode_png(to_image8(t))); }

inline Tensor read_png(const std::filesystem::path& path) { return from_image8(decode_png(read_file_bytes(path))); }

}  // namespace pf3d
