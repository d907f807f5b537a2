#include "slottok/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace slottok {

Image Image::clamped() const {
  Image out = *this;
  out.rgb = out.rgb.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("mean_abs_diff: shape mismatch");
  return (a.rgb - b.rgb).cwiseAbs().mean();
}

void write_png(const std::string& path, const Image& img) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.h) * img.w * 3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::min(1.0, std::max(0.0, img.at(c, y, x)));
        buf[(static_cast<std::size_t>(y) * img.w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.w);
  pi.height = static_cast<png_uint_32>(img.h);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw std::runtime_error("write_png: " + path + ": " + pi.message);
}

Image read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  Image img(static_cast<int>(pi.height), static_cast<int>(pi.width));
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) =
            buf[(static_cast<std::size_t>(y) * img.w + x) * 3 + c] / 255.0;
  return img;
}

}  // namespace slottok
