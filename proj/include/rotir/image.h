#pragma once

#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rotir/vec.h"

namespace rotir {

// Row-major linear radiometric buffer, top row first. Channel count 1, 3 or 4;
// a 4th channel, when present, is the object mask in [0, 1].
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<size_t>(width) * height * channels, fill) {
    if (width <= 0 || height <= 0 || (channels != 1 && channels != 3 && channels != 4)) {
      throw std::invalid_argument("ImageBuffer: bad dimensions or channel count");
    }
  }
  ImageBuffer(const ImageBuffer&) = default;
  ImageBuffer& operator=(const ImageBuffer&) = default;
  // moved-from buffers report empty dimensions instead of dangling ones
  ImageBuffer(ImageBuffer&& o) noexcept
      : width_(std::exchange(o.width_, 0)), height_(std::exchange(o.height_, 0)),
        channels_(std::exchange(o.channels_, 0)), data_(std::move(o.data_)) {}
  ImageBuffer& operator=(ImageBuffer&& o) noexcept {
    width_ = std::exchange(o.width_, 0);
    height_ = std::exchange(o.height_, 0);
    channels_ = std::exchange(o.channels_, 0);
    data_ = std::move(o.data_);
    return *this;
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  size_t pixel_count() const { return static_cast<size_t>(width_) * height_; }

  double& at(int x, int y, int c) {
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int x, int y, int c) const {
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }

  Vec3 rgb(int x, int y) const {
    if (channels_ == 1) return Vec3(at(x, y, 0));
    return {at(x, y, 0), at(x, y, 1), at(x, y, 2)};
  }
  void set_rgb(int x, int y, const Vec3& v) {
    if (channels_ == 1) {
      at(x, y, 0) = mean(v);
      return;
    }
    at(x, y, 0) = v.x;
    at(x, y, 1) = v.y;
    at(x, y, 2) = v.z;
  }
  double alpha(int x, int y) const { return channels_ == 4 ? at(x, y, 3) : 1.0; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  int width_ = 0, height_ = 0, channels_ = 0;
  std::vector<double> data_;
};

}  // namespace rotir
