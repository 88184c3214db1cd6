#include "drasmil/slide.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "drasmil/rng.hpp"

namespace drasmil {

bool operator==(const Bag& a, const Bag& b) {
  return a.slide_id == b.slide_id && a.patient_id == b.patient_id && a.label == b.label &&
         a.coords == b.coords && a.features.rows() == b.features.rows() &&
         a.features.cols() == b.features.cols() && a.features == b.features;
}

SynthBag generate_synthetic(const SynthSpec& spec) {
  if (spec.grid_width < 1 || spec.grid_height < 1)
    throw std::invalid_argument("synthetic grid must be nonempty");
  if (spec.region_fraction <= 0.0 || spec.region_fraction > 1.0)
    throw std::invalid_argument("region fraction must be in (0, 1]");
  if (spec.feature_dim < 1) throw std::invalid_argument("feature dim must be positive");
  if (spec.label != 0 && spec.label != 1) throw std::invalid_argument("label must be 0 or 1");

  const Index total = static_cast<Index>(spec.grid_width) * spec.grid_height;
  const Index n_signal = static_cast<Index>(std::llround(spec.region_fraction * double(total)));
  if (n_signal < 1) throw std::invalid_argument("region fraction yields zero signal patches");

  Rng rng(spec.seed);

  SynthBag out;
  Bag& bag = out.bag;
  bag.slide_id = spec.slide_id;
  bag.patient_id = spec.patient_id;
  bag.label = spec.label;
  bag.provenance = Bag::Provenance::synthetic;
  bag.coords.resize(total);
  bag.features.resize(total, spec.feature_dim);
  for (int y = 0; y < spec.grid_height; ++y)
    for (int x = 0; x < spec.grid_width; ++x)
      bag.coords[static_cast<std::size_t>(y) * spec.grid_width + x] = {x, y};

  for (Index i = 0; i < total; ++i)
    for (Index j = 0; j < spec.feature_dim; ++j)
      bag.features(i, j) = spec.noise_scale * normal(rng);

  // Signal block: rows of width side filled top-to-bottom, last row partial,
  // so the patch count is exact while staying contiguous and near-square.
  int side = static_cast<int>(std::ceil(std::sqrt(double(n_signal))));
  const int min_side =
      static_cast<int>((n_signal + spec.grid_height - 1) / spec.grid_height);
  side = std::min(spec.grid_width, std::max(side, min_side));
  const int full_rows = static_cast<int>(n_signal / side);
  const int remainder = static_cast<int>(n_signal % side);
  const int block_h = full_rows + (remainder > 0 ? 1 : 0);
  if (side > spec.grid_width || block_h > spec.grid_height)
    throw std::invalid_argument("signal region does not fit the grid");

  const int ax_max = spec.grid_width - side;
  const int ay_max = spec.grid_height - block_h;
  const int ax = ax_max > 0 ? static_cast<int>(uniform_below(rng, ax_max + 1)) : 0;
  const int ay = ay_max > 0 ? static_cast<int>(uniform_below(rng, ay_max + 1)) : 0;

  const Index half = spec.feature_dim / 2;
  const Index shift_lo = spec.label == 0 ? 0 : half;
  const Index shift_hi = spec.label == 0 ? (half > 0 ? half : spec.feature_dim) : spec.feature_dim;

  out.region = {ax, ay, ax + side, ay + block_h};
  out.signal_rows.reserve(n_signal);
  for (Index s = 0; s < n_signal; ++s) {
    const int dx = static_cast<int>(s % side);
    const int dy = static_cast<int>(s / side);
    const Index row = static_cast<Index>(ay + dy) * spec.grid_width + (ax + dx);
    out.signal_rows.push_back(row);
    for (Index j = shift_lo; j < shift_hi; ++j) bag.features(row, j) += spec.signal_shift;
  }
  return out;
}

TissueMask tissue_mask(const Image& img, int patch_size, double threshold) {
  if (patch_size < 1) throw std::invalid_argument("patch size must be positive");
  if (img.width < patch_size || img.height < patch_size)
    throw std::invalid_argument("image smaller than one patch");

  TissueMask mask;
  mask.cols = img.width / patch_size;
  mask.rows = img.height / patch_size;
  mask.threshold = threshold;
  mask.tissue.assign(static_cast<std::size_t>(mask.cols) * mask.rows, 0);

  const double half = 0.5 * patch_size * patch_size;
  for (int row = 0; row < mask.rows; ++row) {
    for (int col = 0; col < mask.cols; ++col) {
      int saturated = 0;
      for (int dy = 0; dy < patch_size; ++dy) {
        const std::uint8_t* p = img.at(col * patch_size, row * patch_size + dy);
        for (int dx = 0; dx < patch_size; ++dx, p += 3) {
          if (pixel_saturation(p[0], p[1], p[2]) > threshold) ++saturated;
        }
      }
      mask.tissue[static_cast<std::size_t>(row) * mask.cols + col] = saturated > half ? 1 : 0;
    }
  }
  return mask;
}

std::vector<RawPatch> extract_grid(const Image& img, int patch_size, const TissueMask& mask) {
  const int cols = img.width / patch_size;
  const int rows = img.height / patch_size;
  if (mask.cols != cols || mask.rows != rows)
    throw std::invalid_argument("tissue mask does not match the tile grid");

  std::vector<RawPatch> patches;
  for (int row = 0; row < rows; ++row) {
    for (int col = 0; col < cols; ++col) {
      if (!mask.at(col, row)) continue;
      RawPatch p;
      p.coord = {col, row};
      p.pixels = Image(patch_size, patch_size);
      for (int dy = 0; dy < patch_size; ++dy) {
        const std::uint8_t* src = img.at(col * patch_size, row * patch_size + dy);
        std::memcpy(p.pixels.at(0, dy), src, 3u * patch_size);
      }
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

PatchEncoder::PatchEncoder(EncoderKind kind, Index feature_dim, std::uint64_t seed)
    : kind_(kind), feature_dim_(feature_dim), seed_(seed) {
  if (feature_dim < 1) throw std::invalid_argument("feature dim must be positive");
}

const Mat& PatchEncoder::projection(Index input_len) const {
  if (projection_len_ != input_len) {
    Rng rng(derive_seed(seed_, "projection", static_cast<std::uint64_t>(input_len),
                        static_cast<std::uint64_t>(feature_dim_)));
    projection_.resize(input_len, feature_dim_);
    for (Index i = 0; i < input_len; ++i)
      for (Index j = 0; j < feature_dim_; ++j) projection_(i, j) = normal(rng);
    projection_len_ = input_len;
  }
  return projection_;
}

Mat PatchEncoder::encode_raw(const std::uint8_t* rgb, Index count, int patch_size) const {
  const Index len = static_cast<Index>(3) * patch_size * patch_size;
  Mat features(count, feature_dim_);
  if (kind_ == EncoderKind::random_projection) {
    // One row at a time so a patch's features never depend on how many
    // neighbours share the encode call (batched and single fetches agree
    // bitwise).
    const Mat& proj = projection(len);
    Vec flat(len);
    for (Index p = 0; p < count; ++p) {
      const std::uint8_t* src = rgb + p * len;
      for (Index i = 0; i < len; ++i) flat[i] = src[i] / 255.0;
      features.row(p).noalias() = flat.transpose() * proj;
    }
    features /= std::sqrt(static_cast<double>(len));
  } else {
    const double npix = double(patch_size) * patch_size;
    for (Index p = 0; p < count; ++p) {
      double hist[24] = {0};
      const std::uint8_t* src = rgb + p * len;
      for (Index i = 0; i < len; i += 3) {
        hist[src[i] >> 5] += 1.0;
        hist[8 + (src[i + 1] >> 5)] += 1.0;
        hist[16 + (src[i + 2] >> 5)] += 1.0;
      }
      for (double& h : hist) h /= npix;
      for (Index j = 0; j < feature_dim_; ++j) features(p, j) = hist[j % 24];
    }
  }
  return features;
}

Mat PatchEncoder::encode(const std::vector<RawPatch>& patches) const {
  if (patches.empty()) return Mat(0, feature_dim_);
  const int ps = patches.front().pixels.width;
  for (const auto& p : patches)
    if (p.pixels.width != ps || p.pixels.height != ps)
      throw std::invalid_argument("patches must share dimensions");
  std::vector<std::uint8_t> buf;
  buf.reserve(patches.size() * 3u * ps * ps);
  for (const auto& p : patches) buf.insert(buf.end(), p.pixels.pixels.begin(), p.pixels.pixels.end());
  return encode_raw(buf.data(), static_cast<Index>(patches.size()), ps);
}

namespace {

constexpr char kCacheMagic[8] = {'D', 'R', 'A', 'S', 'F', 'E', 'A', 'T'};
constexpr std::uint16_t kCacheVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  if (in.gcount() != sizeof(T)) throw std::runtime_error(path + ": truncated feature cache");
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  if (s.size() > 0xffff) throw std::invalid_argument("id too long for cache format");
  put<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& path) {
  const auto len = get<std::uint16_t>(in, path);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != len) throw std::runtime_error(path + ": truncated feature cache");
  return s;
}

}  // namespace

void cache_write(const Bag& bag, const std::string& path) {
  if (bag.size() < 1) throw std::invalid_argument("refusing to cache an empty bag");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kCacheMagic, sizeof(kCacheMagic));
  put<std::uint16_t>(out, kCacheVersion);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(bag.size()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(bag.dim()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(bag.label));
  put_string(out, bag.slide_id);
  put_string(out, bag.patient_id);
  for (const auto& c : bag.coords) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.x));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.y));
  }
  for (Index i = 0; i < bag.size(); ++i)
    for (Index j = 0; j < bag.dim(); ++j) put<double>(out, bag.features(i, j));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Bag cache_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path + ": not a feature cache");
  const auto version = get<std::uint16_t>(in, path);
  if (version != kCacheVersion) throw std::runtime_error(path + ": unsupported cache version");

  Bag bag;
  const auto k = get<std::uint64_t>(in, path);
  const auto m = get<std::uint64_t>(in, path);
  bag.label = get<std::uint8_t>(in, path);
  bag.slide_id = get_string(in, path);
  bag.patient_id = get_string(in, path);
  bag.coords.resize(k);
  for (auto& c : bag.coords) {
    c.x = static_cast<std::int32_t>(get<std::uint32_t>(in, path));
    c.y = static_cast<std::int32_t>(get<std::uint32_t>(in, path));
  }
  bag.features.resize(static_cast<Index>(k), static_cast<Index>(m));
  for (Index i = 0; i < bag.features.rows(); ++i)
    for (Index j = 0; j < bag.features.cols(); ++j) bag.features(i, j) = get<double>(in, path);
  bag.provenance = Bag::Provenance::raster;
  return bag;
}

void manifest_write(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "slide_id,patient_id,label,path\n";
  for (const auto& e : entries)
    out << e.slide_id << ',' << e.patient_id << ',' << e.label << ',' << e.path << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ManifestEntry> manifest_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "slide_id,patient_id,label,path")
    throw std::runtime_error(path + ": bad manifest header");
  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    std::string label;
    if (!std::getline(ss, e.slide_id, ',') || !std::getline(ss, e.patient_id, ',') ||
        !std::getline(ss, label, ',') || !std::getline(ss, e.path))
      throw std::runtime_error(path + ": bad manifest row: " + line);
    e.label = std::stoi(label);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace drasmil
