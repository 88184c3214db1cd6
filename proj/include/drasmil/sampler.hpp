#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "drasmil/eval.hpp"
#include "drasmil/model.hpp"
#include "drasmil/rng.hpp"
#include "drasmil/slide.hpp"
#include "drasmil/types.hpp"

namespace drasmil {

// Evaluation-time sampling configuration. The pre-final budget
// (total_budget - final_extra) is spread over `iterations` draws; the
// schedule below reproduces the rounding of the per-iteration counts.
struct SamplingConfig {
  Index total_budget = 800;
  int iterations = 10;
  Index final_extra = 160;
  int neighbours = 64;
  double sampling_random = 0.29;        // r0, the starting random fraction
  double sampling_random_delta = 0.36;  // per-iteration decay of that fraction
};

// Throws std::invalid_argument when a field is out of range.
void validate(const SamplingConfig& config);

// Per-iteration draw counts: round(pre_final_total / iterations) everywhere
// except the last entry, which absorbs the rounding difference so the counts
// sum to exactly pre_final_total.
std::vector<Index> schedule_counts(Index pre_final_total, int iterations);

// Iteration 0 is fully random; afterwards the rate decays multiplicatively,
// r_i = r0 * (1 - delta)^i.
double random_rate_schedule(double r0, double delta, int iteration);

// High-water accounting for the working buffers (patch pixels, feature rows)
// that dominate evaluation memory.
class ByteAccountant {
 public:
  void acquire(std::int64_t bytes);
  void release(std::int64_t bytes);
  void reset();
  std::int64_t current() const { return current_; }
  std::int64_t peak() const { return peak_; }

 private:
  std::int64_t current_ = 0;
  std::int64_t peak_ = 0;
};

// Feature rows served on demand, so the same sampling loop runs against
// in-memory caches and against real-time encoding. Within one sampler run
// each index is fetched at most once; the patches-encoded counter is the sum
// of fetched row counts.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual Index size() const = 0;
  virtual Index dim() const = 0;
  virtual const std::vector<GridCoord>& coords() const = 0;
  // One feature row per requested index, in request order.
  virtual Mat fetch(const std::vector<Index>& indices) = 0;
};

// Serves rows of an already-encoded bag.
class BagFeatureSource : public FeatureSource {
 public:
  explicit BagFeatureSource(const Bag& bag) : bag_(&bag) {}
  Index size() const override { return bag_->size(); }
  Index dim() const override { return bag_->dim(); }
  const std::vector<GridCoord>& coords() const override { return bag_->coords; }
  Mat fetch(const std::vector<Index>& indices) override;

 private:
  const Bag* bag_;
};

// The two model calls the sampler needs, behind std::function so tests can
// substitute attention oracles for the trained network.
struct SamplerModel {
  std::function<AttentionResult(const Mat&)> attention;
  std::function<Vec(const Vec&)> classify;
};

SamplerModel wrap_model(const ModelParams& params);

struct SamplerState {
  std::vector<Index> sampled;  // in draw order
  std::vector<char> is_sampled;
  Vec weights;  // per patch, zero for sampled patches
  double current_random_rate = 1.0;
  int iteration = 0;

  explicit SamplerState(Index total_patches);
  Index total_patches() const { return static_cast<Index>(is_sampled.size()); }
  std::vector<Index> unsampled() const;  // ascending
};

// Patch lookup on the tile grid for nearest-neighbour queries.
class GridIndex {
 public:
  explicit GridIndex(const std::vector<GridCoord>& coords);

  // The k nearest eligible patches to `of` by Euclidean grid distance, ties
  // broken by ascending patch index; `of` itself is never returned. Returns
  // fewer than k when fewer eligible patches exist.
  std::vector<Index> nearest(Index of, int k, const std::vector<char>& eligible) const;

 private:
  int min_x_ = 0, min_y_ = 0, width_ = 0, height_ = 0;
  std::vector<Index> cell_;  // row-major over the bounding box, -1 = empty
  std::vector<GridCoord> coords_;
};

// Spreads each source patch's attention score to its `k` nearest unsampled
// patches, combining overlaps by maximum; sampled patches are forced to
// weight zero. Scores align with `sources` by position.
void propagate_weights(SamplerState& state, const GridIndex& grid,
                       const std::vector<Index>& sources, const Vec& scores, int k);

// `n` distinct entries of `pool` drawn uniformly without replacement, in draw
// order; consumes one rng value per draw.
std::vector<Index> sample_without_replacement(const std::vector<Index>& pool, Index n,
                                              Rng& rng);

struct DrawResult {
  std::vector<Index> indices;  // in draw order
  std::vector<char> drawn_randomly;
  std::vector<double> weight_at_draw;
};

// One sampling step: floor(rate * n) uniform draws from the unsampled pool,
// the rest weighted without replacement proportional to the state's weights
// (zero-weight patches excluded; shortfall falls back to uniform). Marks the
// drawn patches sampled and zeroes their weights. Takes everything remaining
// when fewer than n unsampled patches are left.
DrawResult draw_iteration(SamplerState& state, Index n, double rate, Rng& rng);

struct TraceRow {
  int iteration = 0;
  Index patch = 0;
  GridCoord coord;
  bool drawn_randomly = false;
  double weight_at_draw = 0.0;
  double attention = 0.0;  // score in the first forward pass that saw the patch
};

struct SamplingResult {
  Vec logits;     // 2 class logits from the final forward
  Vec attention;  // final attention scores, aligned with `sampled`
  Vec weight_map;  // per patch, from the final propagation (zero for full/random)
  std::vector<Index> sampled;  // in draw order
  std::int64_t patches_encoded = 0;
  int forward_passes = 0;
  std::vector<TraceRow> trace;
};

// One forward pass over every patch.
SamplingResult run_full(const SamplerModel& model, FeatureSource& source,
                        ByteAccountant* bytes = nullptr);

// Uniform sample of min(budget, K) patches, one forward pass. With
// budget >= K this is exactly run_full.
SamplingResult run_random(const SamplerModel& model, FeatureSource& source, Index budget,
                          std::uint64_t seed, ByteAccountant* bytes = nullptr);

// The iterative attention-guided loop: a fully random first draw, then
// alternating forward passes, weight propagation to grid neighbours, and
// explore/exploit draws under the decaying random rate, with final_extra
// patches drawn at the end. Bags that fit inside the budget are delegated to
// run_full wholesale.
SamplingResult run_dras(const SamplerModel& model, FeatureSource& source,
                        const SamplingConfig& config, std::uint64_t seed,
                        ByteAccountant* bytes = nullptr);

// Conveniences for cached bags.
SamplingResult run_full(const ModelParams& params, const Bag& bag);
SamplingResult run_random(const ModelParams& params, const Bag& bag, Index budget,
                          std::uint64_t seed);
SamplingResult run_dras(const ModelParams& params, const Bag& bag,
                        const SamplingConfig& config, std::uint64_t seed);

enum class Method { full, random, dras };

std::string method_name(Method method);
Method parse_method(const std::string& name);

struct EvalOptions {
  Method method = Method::full;
  int repeats = 50;
  SamplingConfig sampling;  // total_budget doubles as the random-method budget
  std::uint64_t base_seed = 0;
  int workers = 1;
};

// Positive-class probability per (bag, repeat). Each cell's RNG stream is
// derived from (base seed, slide id, repeat), so results are independent of
// evaluation order and worker count; full-evaluation rows are constant across
// repeats and computed once.
PredictionTable repeat_evaluate(const ModelParams& params, const std::vector<Bag>& bags,
                                const EvalOptions& options);

// CSV: iteration,patch,grid_x,grid_y,drawn_randomly,weight_at_draw,attention.
void trace_write(const std::vector<TraceRow>& trace, const std::string& path);

// Per-patch values placed on the dense bounding-box grid; cells without a
// patch hold zero.
struct ValueMap {
  int min_x = 0, min_y = 0;
  Mat values;  // height x width, row = grid y offset, col = grid x offset
};

ValueMap build_value_map(const std::vector<GridCoord>& coords, const Vec& per_patch);

// Scatters values over the sampled subset only; other patches hold zero.
ValueMap build_value_map(const std::vector<GridCoord>& coords,
                         const std::vector<Index>& subset, const Vec& values);

void value_map_write_csv(const ValueMap& map, const std::string& path);
// 8-bit PGM, min-max scaled; a flat map renders as all zero.
void value_map_write_pgm(const ValueMap& map, const std::string& path);

}  // namespace drasmil
