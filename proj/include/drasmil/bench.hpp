#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drasmil/sampler.hpp"
#include "drasmil/slide.hpp"

namespace drasmil {

// Procedurally generated raster bag for end-to-end timing: patch pixels are
// produced on demand from the seed and encoded in batches of batch_size, so
// runs measure real-time extraction without touching disk. Pixel buffers are
// charged to the accountant while held.
class EncodingFeatureSource : public FeatureSource {
 public:
  EncodingFeatureSource(Index patches, int patch_size, const PatchEncoder& encoder,
                        int batch_size, std::uint64_t seed, ByteAccountant* bytes);

  Index size() const override { return patches_; }
  Index dim() const override;
  const std::vector<GridCoord>& coords() const override { return coords_; }
  Mat fetch(const std::vector<Index>& indices) override;

  std::int64_t patch_bytes() const { return 3ll * patch_size_ * patch_size_; }

 private:
  Index patches_;
  int patch_size_;
  const PatchEncoder* encoder_;
  int batch_size_;
  std::uint64_t seed_;
  ByteAccountant* bytes_;
  std::vector<GridCoord> coords_;  // near-square grid, row-major
};

struct BenchConfig {
  std::vector<int> batch_sizes{1, 4, 8, 16, 32, 64};
  std::vector<Method> methods{Method::full, Method::dras};
  int repetitions = 3;  // odd; the median is reported
  int bag_count = 10;
  Index patches_per_bag = 16000;
  int patch_size = 32;
  Index feature_dim = 32;
  EncoderKind encoder = EncoderKind::random_projection;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
};

void validate(const BenchConfig& config);

struct BenchCell {
  Method method = Method::full;
  int batch_size = 1;
  double total_seconds = 0.0;  // median over repetitions, all bags
  double mean_seconds_per_bag = 0.0;
  std::int64_t peak_bytes = 0;
  std::int64_t patches_encoded = 0;
};

struct BenchReport {
  std::vector<BenchCell> cells;
};

// Sweeps batch sizes sequentially; per batch size, one discarded warm-up run
// per method, then `repetitions` timed passes alternating between the
// methods. Everything except wall-clock time is deterministic in the seed.
BenchReport run_bench(const BenchConfig& config, const ModelParams& params);

// Fixed-width table for the terminal.
std::string report_text(const BenchReport& report);

// CSV: method,batch_size,total_seconds,mean_seconds_per_bag,peak_bytes,
// patches_encoded. Values round-trip exactly through report_parse_csv.
std::string report_csv(const BenchReport& report);
BenchReport report_parse_csv(const std::string& text);

}  // namespace drasmil
