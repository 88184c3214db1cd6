#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "drasmil/rng.hpp"
#include "drasmil/slide.hpp"
#include "drasmil/types.hpp"

namespace testsupport {

// Scratch directory under the system temp root, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("drasmil-test-" + name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

// Exact elementwise equality (bitwise for the usual non-NaN case).
inline bool same_values(const drasmil::Vec& a, const drasmil::Vec& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

inline bool same_values(const drasmil::Mat& a, const drasmil::Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

// Bag on a full grid_w-wide row-major grid with standard-normal features.
inline drasmil::Bag make_random_bag(drasmil::Index patches, drasmil::Index dim,
                                    std::uint64_t seed, int grid_w,
                                    const std::string& slide_id = "bag",
                                    const std::string& patient_id = "pat", int label = 0) {
  drasmil::Bag bag;
  bag.slide_id = slide_id;
  bag.patient_id = patient_id;
  bag.label = label;
  bag.coords.reserve(static_cast<std::size_t>(patches));
  for (drasmil::Index i = 0; i < patches; ++i)
    bag.coords.push_back({static_cast<std::int32_t>(i % grid_w),
                          static_cast<std::int32_t>(i / grid_w)});
  bag.features.resize(patches, dim);
  drasmil::Rng rng(seed);
  for (drasmil::Index i = 0; i < patches; ++i)
    for (drasmil::Index j = 0; j < dim; ++j) bag.features(i, j) = drasmil::normal(rng);
  return bag;
}

}  // namespace testsupport
