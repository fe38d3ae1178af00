#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "massseg/errors.hpp"

namespace massseg {

/// Row-major 2-D raster.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw InputError("negative grid dimensions");
    data_.assign(static_cast<std::size_t>(height) * width, fill);
  }
  Grid(int height, int width, std::vector<T> data) : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(height) * width) throw InputError("grid data size mismatch");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool same_dims(const Grid<T>& other) const { return height_ == other.height_ && width_ == other.width_; }
  template <typename U>
  bool same_dims(const Grid<U>& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using FloatImage = Grid<float>;
/// Pixels are 0 or 1.
using BinaryMask = Grid<std::uint8_t>;

inline std::string dims_string(int h, int w) { return std::to_string(h) + "x" + std::to_string(w); }

}  // namespace massseg
