#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "drasmil/image.hpp"
#include "drasmil/types.hpp"

namespace drasmil {

// One slide as a bag of patch instances: grid coordinates plus one feature
// row per patch, carrying the slide-level label.
struct Bag {
  enum class Provenance : std::uint8_t { synthetic, raster };

  std::string slide_id;
  std::string patient_id;
  int label = 0;  // 0 = majority subtype, 1 = other (the positive class)
  std::vector<GridCoord> coords;  // aligned with feature rows
  Mat features;                   // K x M
  Provenance provenance = Provenance::synthetic;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }
};

// Field-wise equality over the serialized fields (ids, label, coords,
// features); provenance is an in-memory annotation.
bool operator==(const Bag& a, const Bag& b);

struct SynthSpec {
  int grid_width = 100;
  int grid_height = 160;
  double region_fraction = 0.05;  // share of patches carrying the class signal
  double signal_shift = 2.0;      // mean shift applied to signal patches
  double noise_scale = 1.0;
  Index feature_dim = 32;
  int label = 0;
  std::string slide_id = "synth";
  std::string patient_id = "patient";
  std::uint64_t seed = 0;
};

struct GridRect {
  int x0 = 0, y0 = 0;  // inclusive top-left
  int x1 = 0, y1 = 0;  // exclusive bottom-right of the bounding box
};

struct SynthBag {
  Bag bag;
  GridRect region;                 // bounding box of the signal patches
  std::vector<Index> signal_rows;  // row indices of signal patches
};

// Background features are iid Gaussian noise; a contiguous near-square block
// of round(fraction * K) patches gets a label-dependent mean shift (first
// half of the feature dims for label 0, second half for label 1). The block
// anchor is drawn uniformly among positions where it fits.
SynthBag generate_synthetic(const SynthSpec& spec);

struct TissueMask {
  int cols = 0;
  int rows = 0;
  std::vector<char> tissue;  // row-major, cols * rows
  double threshold = 0.0;

  bool at(int col, int row) const { return tissue[static_cast<std::size_t>(row) * cols + col] != 0; }
};

// A patch counts as tissue when more than half of its pixels exceed the
// saturation threshold.
TissueMask tissue_mask(const Image& img, int patch_size, double threshold = 0.07);

struct RawPatch {
  GridCoord coord;
  Image pixels;  // patch_size x patch_size
};

// Non-overlapping row-major tiling; partial edge tiles are dropped and only
// mask-positive patches are kept.
std::vector<RawPatch> extract_grid(const Image& img, int patch_size, const TissueMask& mask);

enum class EncoderKind { random_projection, color_histogram };

// Pure per-patch feature encoders. random_projection flattens the pixels to
// [0,1], multiplies by a seeded Gaussian matrix and scales by 1/sqrt(len);
// color_histogram tiles per-channel 8-bin histograms out to M.
class PatchEncoder {
 public:
  PatchEncoder(EncoderKind kind, Index feature_dim, std::uint64_t seed);

  Index feature_dim() const { return feature_dim_; }
  EncoderKind kind() const { return kind_; }

  // One feature row per patch; all patches must share dimensions.
  Mat encode(const std::vector<RawPatch>& patches) const;
  // Raw interleaved RGB buffers, `count` patches of `patch_size` square.
  Mat encode_raw(const std::uint8_t* rgb, Index count, int patch_size) const;

 private:
  const Mat& projection(Index input_len) const;

  EncoderKind kind_;
  Index feature_dim_;
  std::uint64_t seed_;
  mutable Mat projection_;  // lazily built per input length
  mutable Index projection_len_ = -1;
};

// Binary feature cache. Layout (little-endian): magic "DRASFEAT", version
// u16, K u64, M u64, label u8, u16-length-prefixed slide and patient ids,
// K coordinate pairs as u32 (x, y), then K*M features as f64 row-major.
void cache_write(const Bag& bag, const std::string& path);
Bag cache_read(const std::string& path);

struct ManifestEntry {
  std::string slide_id;
  std::string patient_id;
  int label = 0;
  std::string path;
};

// CSV with header slide_id,patient_id,label,path.
void manifest_write(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> manifest_read(const std::string& path);

}  // namespace drasmil
