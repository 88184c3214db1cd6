#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace drasmil {

using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

// Patch position on the tile grid: x = column, y = row.
struct GridCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  friend bool operator==(const GridCoord& a, const GridCoord& b) {
    return a.x == b.x && a.y == b.y;
  }
};

}  // namespace drasmil
