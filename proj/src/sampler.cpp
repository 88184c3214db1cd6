#include "drasmil/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <queue>
#include <stdexcept>
#include <utility>

#include "drasmil/parallel.hpp"

namespace drasmil {

void validate(const SamplingConfig& config) {
  if (config.total_budget < 1) throw std::invalid_argument("total_budget must be positive");
  if (config.final_extra < 0 || config.final_extra >= config.total_budget)
    throw std::invalid_argument("final_extra must be in [0, total_budget)");
  if (config.iterations < 1) throw std::invalid_argument("iterations must be positive");
  if (config.neighbours < 1) throw std::invalid_argument("neighbours must be positive");
  if (!(config.sampling_random >= 0.0 && config.sampling_random <= 1.0))
    throw std::invalid_argument("sampling_random must be in [0, 1]");
  if (!(config.sampling_random_delta >= 0.0 && config.sampling_random_delta <= 1.0))
    throw std::invalid_argument("sampling_random_delta must be in [0, 1]");
}

std::vector<Index> schedule_counts(Index pre_final_total, int iterations) {
  if (pre_final_total < 1) throw std::invalid_argument("pre-final total must be positive");
  if (iterations < 1) throw std::invalid_argument("iterations must be positive");
  const Index base = static_cast<Index>(
      std::llround(static_cast<double>(pre_final_total) / iterations));
  const Index last = pre_final_total - base * (iterations - 1);
  if (base < 1 || last < 1)
    throw std::invalid_argument("too many iterations for the pre-final budget");
  std::vector<Index> counts(static_cast<std::size_t>(iterations), base);
  counts.back() = last;
  return counts;
}

double random_rate_schedule(double r0, double delta, int iteration) {
  if (iteration < 0) throw std::invalid_argument("iteration must be nonnegative");
  if (iteration == 0) return 1.0;
  return r0 * std::pow(1.0 - delta, iteration);
}

void ByteAccountant::acquire(std::int64_t bytes) {
  current_ += bytes;
  if (current_ > peak_) peak_ = current_;
}

void ByteAccountant::release(std::int64_t bytes) { current_ -= bytes; }

void ByteAccountant::reset() {
  current_ = 0;
  peak_ = 0;
}

Mat BagFeatureSource::fetch(const std::vector<Index>& indices) {
  Mat out(static_cast<Index>(indices.size()), bag_->dim());
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.row(static_cast<Index>(i)) = bag_->features.row(indices[i]);
  return out;
}

SamplerModel wrap_model(const ModelParams& params) {
  SamplerModel model;
  model.attention = [&params](const Mat& features) {
    return attention_forward(params, features);
  };
  model.classify = [&params](const Vec& embedding) { return classify(params, embedding); };
  return model;
}

SamplerState::SamplerState(Index total_patches)
    : is_sampled(static_cast<std::size_t>(total_patches), 0),
      weights(Vec::Zero(total_patches)) {
  if (total_patches < 1) throw std::invalid_argument("bag must contain at least one patch");
}

std::vector<Index> SamplerState::unsampled() const {
  std::vector<Index> out;
  out.reserve(is_sampled.size() - sampled.size());
  for (std::size_t i = 0; i < is_sampled.size(); ++i)
    if (!is_sampled[i]) out.push_back(static_cast<Index>(i));
  return out;
}

GridIndex::GridIndex(const std::vector<GridCoord>& coords) : coords_(coords) {
  if (coords.empty()) throw std::invalid_argument("no coordinates");
  int max_x = coords[0].x, max_y = coords[0].y;
  min_x_ = coords[0].x;
  min_y_ = coords[0].y;
  for (const auto& c : coords) {
    min_x_ = std::min(min_x_, c.x);
    min_y_ = std::min(min_y_, c.y);
    max_x = std::max(max_x, c.x);
    max_y = std::max(max_y, c.y);
  }
  width_ = max_x - min_x_ + 1;
  height_ = max_y - min_y_ + 1;
  cell_.assign(static_cast<std::size_t>(width_) * height_, Index(-1));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::size_t slot =
        static_cast<std::size_t>(coords[i].y - min_y_) * width_ + (coords[i].x - min_x_);
    if (cell_[slot] >= 0) throw std::invalid_argument("duplicate grid coordinate");
    cell_[slot] = static_cast<Index>(i);
  }
}

std::vector<Index> GridIndex::nearest(Index of, int k,
                                      const std::vector<char>& eligible) const {
  if (k < 1) throw std::invalid_argument("neighbour count must be positive");
  if (of < 0 || of >= static_cast<Index>(coords_.size()))
    throw std::out_of_range("patch index out of range");

  const int cx = coords_[static_cast<std::size_t>(of)].x - min_x_;
  const int cy = coords_[static_cast<std::size_t>(of)].y - min_y_;
  using Cand = std::pair<std::int64_t, Index>;  // (squared distance, patch index)
  std::priority_queue<Cand> best;               // top is the worst kept candidate

  auto consider = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    const Index idx = cell_[static_cast<std::size_t>(y) * width_ + x];
    if (idx < 0 || idx == of || !eligible[static_cast<std::size_t>(idx)]) return;
    const std::int64_t dx = x - cx, dy = y - cy;
    const Cand cand{dx * dx + dy * dy, idx};
    if (static_cast<int>(best.size()) < k) {
      best.push(cand);
    } else if (cand < best.top()) {
      best.pop();
      best.push(cand);
    }
  };

  // Chebyshev rings around the center; ring r holds Euclidean distances in
  // [r, r*sqrt(2)], so once k candidates beat the ring's minimum the search
  // can stop.
  const int max_ring = std::max(std::max(cx, width_ - 1 - cx),
                                std::max(cy, height_ - 1 - cy));
  for (int r = 0; r <= max_ring; ++r) {
    if (static_cast<int>(best.size()) == k &&
        static_cast<std::int64_t>(r) * r > best.top().first)
      break;
    if (r == 0) {
      consider(cx, cy);
      continue;
    }
    for (int x = cx - r; x <= cx + r; ++x) {
      consider(x, cy - r);
      consider(x, cy + r);
    }
    for (int y = cy - r + 1; y <= cy + r - 1; ++y) {
      consider(cx - r, y);
      consider(cx + r, y);
    }
  }

  std::vector<Cand> kept;
  kept.reserve(best.size());
  while (!best.empty()) {
    kept.push_back(best.top());
    best.pop();
  }
  std::sort(kept.begin(), kept.end());
  std::vector<Index> out;
  out.reserve(kept.size());
  for (const auto& c : kept) out.push_back(c.second);
  return out;
}

void propagate_weights(SamplerState& state, const GridIndex& grid,
                       const std::vector<Index>& sources, const Vec& scores, int k) {
  if (k < 1) throw std::invalid_argument("neighbour count must be positive");
  if (static_cast<Index>(sources.size()) != scores.size())
    throw std::invalid_argument("sources and scores must align");
  std::vector<char> eligible(state.is_sampled.size());
  for (std::size_t i = 0; i < eligible.size(); ++i) eligible[i] = !state.is_sampled[i];
  for (std::size_t j = 0; j < sources.size(); ++j) {
    const double a = scores[static_cast<Index>(j)];
    for (Index q : grid.nearest(sources[j], k, eligible))
      state.weights[q] = std::max(state.weights[q], a);
  }
  for (Index i : state.sampled) state.weights[i] = 0.0;
}

std::vector<Index> sample_without_replacement(const std::vector<Index>& pool, Index n,
                                              Rng& rng) {
  std::vector<Index> v(pool);
  const Index m = static_cast<Index>(v.size());
  n = std::min(n, m);
  for (Index j = 0; j < n; ++j) {
    const Index t = j + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(m - j)));
    std::swap(v[static_cast<std::size_t>(j)], v[static_cast<std::size_t>(t)]);
  }
  v.resize(static_cast<std::size_t>(n));
  return v;
}

namespace {

// Prefix-sum tree over nonnegative weights, for weighted draws without
// replacement in O(log n) per draw.
class Fenwick {
 public:
  explicit Fenwick(const std::vector<double>& values)
      : n_(values.size()), tree_(values.size() + 1, 0.0) {
    for (std::size_t i = 0; i < n_; ++i) add(i, values[i]);
  }

  void add(std::size_t i, double delta) {
    for (std::size_t j = i + 1; j <= n_; j += j & (~j + 1)) tree_[j] += delta;
  }

  double total() const {
    double sum = 0.0;
    for (std::size_t j = n_; j > 0; j -= j & (~j + 1)) sum += tree_[j];
    return sum;
  }

  // Smallest index whose inclusive prefix sum exceeds u.
  std::size_t find(double u) const {
    std::size_t pos = 0;
    std::size_t mask = 1;
    while ((mask << 1) <= n_) mask <<= 1;
    for (; mask > 0; mask >>= 1) {
      const std::size_t next = pos + mask;
      if (next <= n_ && tree_[next] <= u) {
        u -= tree_[next];
        pos = next;
      }
    }
    return pos;  // in [0, n_], n_ only on floating-point edge cases
  }

 private:
  std::size_t n_;
  std::vector<double> tree_;
};

}  // namespace

DrawResult draw_iteration(SamplerState& state, Index n, double rate, Rng& rng) {
  if (n < 1) throw std::invalid_argument("draw count must be positive");
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("rate must be in [0, 1]");

  DrawResult out;
  const std::vector<Index> pool = state.unsampled();
  const Index available = static_cast<Index>(pool.size());
  const Index n_eff = std::min(n, available);
  if (n_eff == 0) return out;

  auto take = [&](Index patch, bool random_flag) {
    out.indices.push_back(patch);
    out.drawn_randomly.push_back(random_flag ? 1 : 0);
    out.weight_at_draw.push_back(state.weights[patch]);
    state.sampled.push_back(patch);
    state.is_sampled[static_cast<std::size_t>(patch)] = 1;
    state.weights[patch] = 0.0;
  };

  const Index n_uniform =
      std::min(static_cast<Index>(std::floor(rate * static_cast<double>(n_eff))), n_eff);
  for (Index patch : sample_without_replacement(pool, n_uniform, rng)) take(patch, true);

  Index n_weighted = n_eff - n_uniform;
  if (n_weighted > 0) {
    std::vector<Index> weighted_pool;
    std::vector<double> weights;
    for (Index i : pool) {
      if (state.is_sampled[static_cast<std::size_t>(i)]) continue;
      if (state.weights[i] > 0.0) {
        weighted_pool.push_back(i);
        weights.push_back(state.weights[i]);
      }
    }
    Fenwick tree(weights);
    Index drawn = 0;
    while (drawn < n_weighted && !weighted_pool.empty()) {
      const double total = tree.total();
      if (!(total > 0.0)) break;
      const double u = uniform01(rng) * total;
      std::size_t pos = tree.find(u);
      // Floating-point edges can land on an exhausted slot; move to the next
      // live one.
      while (pos < weights.size() && weights[pos] <= 0.0) ++pos;
      if (pos >= weights.size()) {
        pos = weights.size();
        while (pos > 0 && weights[pos - 1] <= 0.0) --pos;
        if (pos == 0) break;
        --pos;
      }
      take(weighted_pool[pos], false);
      tree.add(pos, -weights[pos]);
      weights[pos] = 0.0;
      ++drawn;
    }
    // Weighted pool exhausted early: the rest is uniform over what remains.
    if (drawn < n_weighted) {
      std::vector<Index> rest;
      for (Index i : pool)
        if (!state.is_sampled[static_cast<std::size_t>(i)]) rest.push_back(i);
      for (Index patch : sample_without_replacement(rest, n_weighted - drawn, rng))
        take(patch, true);
    }
  }
  return out;
}

namespace {

constexpr double kNanAttention = std::numeric_limits<double>::quiet_NaN();

// RAII charge for a feature matrix held in memory for the run's duration.
struct ByteCharge {
  ByteAccountant* acct;
  std::int64_t bytes;
  ByteCharge(ByteAccountant* a, Index rows, Index cols)
      : acct(a), bytes(static_cast<std::int64_t>(rows) * cols * sizeof(double)) {
    if (acct) acct->acquire(bytes);
  }
  ~ByteCharge() {
    if (acct) acct->release(bytes);
  }
};

}  // namespace

SamplingResult run_full(const SamplerModel& model, FeatureSource& source,
                        ByteAccountant* bytes) {
  const Index k = source.size();
  if (k < 1) throw std::invalid_argument("bag must contain at least one patch");

  std::vector<Index> all(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) all[static_cast<std::size_t>(i)] = i;

  ByteCharge charge(bytes, k, source.dim());
  const Mat features = source.fetch(all);
  const AttentionResult att = model.attention(features);

  SamplingResult result;
  result.logits = model.classify(att.bag_embedding);
  result.attention = att.scores;
  result.weight_map = Vec::Zero(k);
  result.sampled = std::move(all);
  result.patches_encoded = k;
  result.forward_passes = 1;
  result.trace.reserve(static_cast<std::size_t>(k));
  const auto& coords = source.coords();
  for (Index i = 0; i < k; ++i)
    result.trace.push_back({0, i, coords[static_cast<std::size_t>(i)], false, 0.0,
                            att.scores[i]});
  return result;
}

SamplingResult run_random(const SamplerModel& model, FeatureSource& source, Index budget,
                          std::uint64_t seed, ByteAccountant* bytes) {
  const Index k = source.size();
  if (k < 1) throw std::invalid_argument("bag must contain at least one patch");
  if (budget >= k) return run_full(model, source, bytes);
  if (budget < 1) throw std::invalid_argument("budget must be positive");

  Rng rng(seed);
  std::vector<Index> all(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) all[static_cast<std::size_t>(i)] = i;
  std::vector<Index> chosen = sample_without_replacement(all, budget, rng);

  ByteCharge charge(bytes, budget, source.dim());
  const Mat features = source.fetch(chosen);
  const AttentionResult att = model.attention(features);

  SamplingResult result;
  result.logits = model.classify(att.bag_embedding);
  result.attention = att.scores;
  result.weight_map = Vec::Zero(k);
  result.patches_encoded = budget;
  result.forward_passes = 1;
  const auto& coords = source.coords();
  result.trace.reserve(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i)
    result.trace.push_back({0, chosen[i], coords[static_cast<std::size_t>(chosen[i])], true,
                            0.0, att.scores[static_cast<Index>(i)]});
  result.sampled = std::move(chosen);
  return result;
}

SamplingResult run_dras(const SamplerModel& model, FeatureSource& source,
                        const SamplingConfig& config, std::uint64_t seed,
                        ByteAccountant* bytes) {
  validate(config);
  const Index k = source.size();
  if (k < 1) throw std::invalid_argument("bag must contain at least one patch");
  if (k <= config.total_budget) return run_full(model, source, bytes);

  const std::vector<Index> counts =
      schedule_counts(config.total_budget - config.final_extra, config.iterations);
  Rng rng(seed);
  const GridIndex grid(source.coords());
  SamplerState state(k);
  const auto& coords = source.coords();

  SamplingResult result;
  ByteCharge charge(bytes, config.total_budget, source.dim());
  Mat cached(config.total_budget, source.dim());
  Index cached_rows = 0;
  std::vector<std::size_t> trace_row(static_cast<std::size_t>(k), SIZE_MAX);

  auto append = [&](const DrawResult& draw, int iteration) {
    const Mat rows = source.fetch(draw.indices);
    cached.middleRows(cached_rows, rows.rows()) = rows;
    cached_rows += rows.rows();
    result.patches_encoded += rows.rows();
    for (std::size_t i = 0; i < draw.indices.size(); ++i) {
      trace_row[static_cast<std::size_t>(draw.indices[i])] = result.trace.size();
      result.trace.push_back({iteration, draw.indices[i],
                              coords[static_cast<std::size_t>(draw.indices[i])],
                              draw.drawn_randomly[i] != 0, draw.weight_at_draw[i],
                              kNanAttention});
    }
  };

  auto forward = [&]() {
    const AttentionResult att = model.attention(cached.topRows(cached_rows));
    ++result.forward_passes;
    for (std::size_t j = 0; j < state.sampled.size(); ++j) {
      TraceRow& row = result.trace[trace_row[static_cast<std::size_t>(state.sampled[j])]];
      if (std::isnan(row.attention)) row.attention = att.scores[static_cast<Index>(j)];
    }
    return att;
  };

  auto rebuild_weights = [&](const Vec& scores) {
    state.weights.setZero();
    propagate_weights(state, grid, state.sampled, scores, config.neighbours);
  };

  state.current_random_rate = random_rate_schedule(
      config.sampling_random, config.sampling_random_delta, 0);
  append(draw_iteration(state, counts[0], state.current_random_rate, rng), 0);

  for (int i = 1; i < config.iterations; ++i) {
    rebuild_weights(forward().scores);
    state.iteration = i;
    state.current_random_rate =
        random_rate_schedule(config.sampling_random, config.sampling_random_delta, i);
    append(draw_iteration(state, counts[static_cast<std::size_t>(i)],
                          state.current_random_rate, rng),
           i);
  }

  if (config.final_extra > 0) {
    rebuild_weights(forward().scores);
    state.iteration = config.iterations;
    state.current_random_rate = random_rate_schedule(
        config.sampling_random, config.sampling_random_delta, config.iterations);
    append(draw_iteration(state, config.final_extra, state.current_random_rate, rng),
           config.iterations);
  }

  const AttentionResult att = forward();
  result.logits = model.classify(att.bag_embedding);
  result.attention = att.scores;
  rebuild_weights(att.scores);
  result.weight_map = state.weights;
  result.sampled = state.sampled;
  return result;
}

SamplingResult run_full(const ModelParams& params, const Bag& bag) {
  BagFeatureSource source(bag);
  return run_full(wrap_model(params), source);
}

SamplingResult run_random(const ModelParams& params, const Bag& bag, Index budget,
                          std::uint64_t seed) {
  BagFeatureSource source(bag);
  return run_random(wrap_model(params), source, budget, seed);
}

SamplingResult run_dras(const ModelParams& params, const Bag& bag,
                        const SamplingConfig& config, std::uint64_t seed) {
  BagFeatureSource source(bag);
  return run_dras(wrap_model(params), source, config, seed);
}

std::string method_name(Method method) {
  switch (method) {
    case Method::full: return "full";
    case Method::random: return "random";
    case Method::dras: return "dras";
  }
  throw std::invalid_argument("unknown method");
}

Method parse_method(const std::string& name) {
  if (name == "full") return Method::full;
  if (name == "random") return Method::random;
  if (name == "dras") return Method::dras;
  throw std::invalid_argument("unknown method: " + name + " (expected full|random|dras)");
}

PredictionTable repeat_evaluate(const ModelParams& params, const std::vector<Bag>& bags,
                                const EvalOptions& options) {
  if (options.repeats < 1) throw std::invalid_argument("repeats must be positive");
  if (options.method == Method::dras) validate(options.sampling);

  PredictionTable table;
  table.rows.reserve(bags.size());
  for (const Bag& bag : bags)
    table.rows.push_back({bag.slide_id, bag.patient_id, bag.label});
  table.probs.resize(static_cast<Index>(bags.size()), options.repeats);

  const SamplerModel model = wrap_model(params);
  auto probability = [](const Vec& logits) { return softmax(logits)[1]; };

  if (options.method == Method::full) {
    parallel_for(bags.size(), options.workers, [&](std::size_t b) {
      BagFeatureSource source(bags[b]);
      const double p = probability(run_full(model, source).logits);
      for (Index r = 0; r < options.repeats; ++r)
        table.probs(static_cast<Index>(b), r) = p;
    });
    return table;
  }

  const std::size_t cells = bags.size() * static_cast<std::size_t>(options.repeats);
  parallel_for(cells, options.workers, [&](std::size_t cell) {
    const std::size_t b = cell / static_cast<std::size_t>(options.repeats);
    const Index r = static_cast<Index>(cell % static_cast<std::size_t>(options.repeats));
    const std::uint64_t seed = derive_seed(options.base_seed, "evaluate",
                                           bags[b].slide_id,
                                           static_cast<std::uint64_t>(r));
    BagFeatureSource source(bags[b]);
    const SamplingResult result =
        options.method == Method::random
            ? run_random(model, source, options.sampling.total_budget, seed)
            : run_dras(model, source, options.sampling, seed);
    table.probs(static_cast<Index>(b), r) = probability(result.logits);
  });
  return table;
}

void trace_write(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "iteration,patch,grid_x,grid_y,drawn_randomly,weight_at_draw,attention\n";
  char buf[96];
  for (const TraceRow& row : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%d,%d,%d,%.17g,%.17g\n", row.iteration,
                  static_cast<long long>(row.patch), row.coord.x, row.coord.y,
                  row.drawn_randomly ? 1 : 0, row.weight_at_draw, row.attention);
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ValueMap build_value_map(const std::vector<GridCoord>& coords, const Vec& per_patch) {
  if (static_cast<Index>(coords.size()) != per_patch.size())
    throw std::invalid_argument("coordinates and values must align");
  std::vector<Index> subset(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) subset[i] = static_cast<Index>(i);
  return build_value_map(coords, subset, per_patch);
}

ValueMap build_value_map(const std::vector<GridCoord>& coords,
                         const std::vector<Index>& subset, const Vec& values) {
  if (coords.empty()) throw std::invalid_argument("no coordinates");
  if (static_cast<Index>(subset.size()) != values.size())
    throw std::invalid_argument("subset and values must align");
  ValueMap map;
  map.min_x = coords[0].x;
  map.min_y = coords[0].y;
  int max_x = coords[0].x, max_y = coords[0].y;
  for (const auto& c : coords) {
    map.min_x = std::min(map.min_x, c.x);
    map.min_y = std::min(map.min_y, c.y);
    max_x = std::max(max_x, c.x);
    max_y = std::max(max_y, c.y);
  }
  map.values = Mat::Zero(max_y - map.min_y + 1, max_x - map.min_x + 1);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const GridCoord& c = coords[static_cast<std::size_t>(subset[i])];
    map.values(c.y - map.min_y, c.x - map.min_x) = values[static_cast<Index>(i)];
  }
  return map;
}

void value_map_write_csv(const ValueMap& map, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[40];
  for (Index y = 0; y < map.values.rows(); ++y) {
    for (Index x = 0; x < map.values.cols(); ++x) {
      std::snprintf(buf, sizeof(buf), "%.17g", map.values(y, x));
      out << (x ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void value_map_write_pgm(const ValueMap& map, const std::string& path) {
  const double lo = map.values.minCoeff();
  const double hi = map.values.maxCoeff();
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(map.values.size()));
  std::size_t p = 0;
  for (Index y = 0; y < map.values.rows(); ++y)
    for (Index x = 0; x < map.values.cols(); ++x)
      gray[p++] = static_cast<std::uint8_t>(
          std::lround((map.values(y, x) - lo) * scale));
  write_pgm(gray, static_cast<int>(map.values.cols()),
            static_cast<int>(map.values.rows()), path);
}

}  // namespace drasmil
