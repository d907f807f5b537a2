#pragma once

#include <Eigen/Dense>
#include <string>

namespace slottok {

// RGB image with values in [0,1], stored planar as a 3 x (h*w) matrix so it
// can feed convolutions directly. Pixel (y, x) lives in column y*w + x.
struct Image {
  int h = 0;
  int w = 0;
  Eigen::MatrixXd rgb;  // 3 x (h*w)

  Image() = default;
  Image(int height, int width)
      : h(height), w(width), rgb(Eigen::MatrixXd::Zero(3, Eigen::Index(height) * width)) {}

  double& at(int c, int y, int x) { return rgb(c, Eigen::Index(y) * w + x); }
  double at(int c, int y, int x) const { return rgb(c, Eigen::Index(y) * w + x); }

  Image clamped() const;
};

double mean_abs_diff(const Image& a, const Image& b);

// 8-bit PNG round trip. Writing quantizes to 8 bits; loading maps back to
// [0,1] by /255. Both throw std::runtime_error on I/O failure.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace slottok
