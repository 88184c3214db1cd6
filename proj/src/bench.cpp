#include "drasmil/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace drasmil {

EncodingFeatureSource::EncodingFeatureSource(Index patches, int patch_size,
                                             const PatchEncoder& encoder, int batch_size,
                                             std::uint64_t seed, ByteAccountant* bytes)
    : patches_(patches),
      patch_size_(patch_size),
      encoder_(&encoder),
      batch_size_(batch_size),
      seed_(seed),
      bytes_(bytes) {
  if (patches < 1) throw std::invalid_argument("patch count must be positive");
  if (patch_size < 1) throw std::invalid_argument("patch size must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  const int grid_w = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(patches))));
  coords_.reserve(static_cast<std::size_t>(patches));
  for (Index i = 0; i < patches; ++i)
    coords_.push_back({static_cast<std::int32_t>(i % grid_w),
                       static_cast<std::int32_t>(i / grid_w)});
}

Index EncodingFeatureSource::dim() const { return encoder_->feature_dim(); }

Mat EncodingFeatureSource::fetch(const std::vector<Index>& indices) {
  const Index n = static_cast<Index>(indices.size());
  Mat out(n, dim());
  const std::size_t len = static_cast<std::size_t>(patch_bytes());
  std::vector<std::uint8_t> buffer;
  for (Index start = 0; start < n; start += batch_size_) {
    const Index count = std::min<Index>(batch_size_, n - start);
    const std::int64_t chunk_bytes = count * patch_bytes();
    if (bytes_) bytes_->acquire(chunk_bytes);
    buffer.resize(static_cast<std::size_t>(chunk_bytes));
    for (Index i = 0; i < count; ++i) {
      Rng rng(derive_seed(seed_, "pixels",
                          static_cast<std::uint64_t>(indices[static_cast<std::size_t>(start + i)])));
      std::uint8_t* p = buffer.data() + static_cast<std::size_t>(i) * len;
      std::size_t off = 0;
      while (off + 8 <= len) {
        const std::uint64_t word = rng();
        std::memcpy(p + off, &word, 8);
        off += 8;
      }
      if (off < len) {
        const std::uint64_t word = rng();
        std::memcpy(p + off, &word, len - off);
      }
    }
    out.middleRows(start, count) = encoder_->encode_raw(buffer.data(), count, patch_size_);
    if (bytes_) bytes_->release(chunk_bytes);
  }
  return out;
}

void validate(const BenchConfig& config) {
  for (int b : config.batch_sizes)
    if (b < 1) throw std::invalid_argument("batch sizes must be positive");
  if (config.repetitions < 1 || config.repetitions % 2 == 0)
    throw std::invalid_argument("repetitions must be odd and positive");
  if (config.bag_count < 1) throw std::invalid_argument("bag count must be positive");
  if (config.patches_per_bag < 1)
    throw std::invalid_argument("patches per bag must be positive");
  if (config.patch_size < 1) throw std::invalid_argument("patch size must be positive");
  if (config.feature_dim < 1) throw std::invalid_argument("feature dim must be positive");
  validate(config.sampling);
}

namespace {

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return values[values.size() / 2];
}

}  // namespace

BenchReport run_bench(const BenchConfig& config, const ModelParams& params) {
  validate(config);
  if (params.embedding_dim() != config.feature_dim)
    throw std::invalid_argument("model embedding width does not match the encoder");

  const SamplerModel model = wrap_model(params);
  const PatchEncoder encoder(config.encoder, config.feature_dim,
                             derive_seed(config.seed, "bench-encoder"));

  // One full pass over the bag set; returns total patches encoded.
  auto run_all = [&](Method method, int batch_size, ByteAccountant* acct) {
    std::int64_t encoded = 0;
    for (int b = 0; b < config.bag_count; ++b) {
      EncodingFeatureSource source(config.patches_per_bag, config.patch_size, encoder,
                                   batch_size,
                                   derive_seed(config.seed, "bench-bag",
                                               static_cast<std::uint64_t>(b)),
                                   acct);
      const std::uint64_t run_seed =
          derive_seed(config.seed, "bench-run", static_cast<std::uint64_t>(b));
      SamplingResult result;
      switch (method) {
        case Method::full:
          result = run_full(model, source, acct);
          break;
        case Method::random:
          result = run_random(model, source, config.sampling.total_budget, run_seed, acct);
          break;
        case Method::dras:
          result = run_dras(model, source, config.sampling, run_seed, acct);
          break;
      }
      encoded += result.patches_encoded;
    }
    return encoded;
  };

  BenchReport report;
  using Clock = std::chrono::steady_clock;
  for (int batch_size : config.batch_sizes) {
    for (Method method : config.methods) run_all(method, batch_size, nullptr);  // warm-up

    std::vector<std::vector<double>> times(config.methods.size());
    std::vector<std::int64_t> peaks(config.methods.size(), 0);
    std::vector<std::int64_t> encoded(config.methods.size(), 0);
    for (int rep = 0; rep < config.repetitions; ++rep) {
      for (std::size_t m = 0; m < config.methods.size(); ++m) {
        ByteAccountant acct;
        const auto t0 = Clock::now();
        encoded[m] = run_all(config.methods[m], batch_size, &acct);
        const auto t1 = Clock::now();
        times[m].push_back(std::chrono::duration<double>(t1 - t0).count());
        peaks[m] = std::max(peaks[m], acct.peak());
      }
    }
    for (std::size_t m = 0; m < config.methods.size(); ++m) {
      BenchCell cell;
      cell.method = config.methods[m];
      cell.batch_size = batch_size;
      cell.total_seconds = median(times[m]);
      cell.mean_seconds_per_bag = cell.total_seconds / config.bag_count;
      cell.peak_bytes = peaks[m];
      cell.patches_encoded = encoded[m];
      report.cells.push_back(cell);
    }
  }
  return report;
}

std::string report_text(const BenchReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-8s %6s %14s %14s %14s %10s\n", "method", "batch",
                "total_s", "s_per_bag", "peak_bytes", "patches");
  out += line;
  for (const BenchCell& c : report.cells) {
    std::snprintf(line, sizeof(line), "%-8s %6d %14.4f %14.4f %14lld %10lld\n",
                  method_name(c.method).c_str(), c.batch_size, c.total_seconds,
                  c.mean_seconds_per_bag, static_cast<long long>(c.peak_bytes),
                  static_cast<long long>(c.patches_encoded));
    out += line;
  }
  return out;
}

std::string report_csv(const BenchReport& report) {
  std::string out = "method,batch_size,total_seconds,mean_seconds_per_bag,peak_bytes,patches_encoded\n";
  char line[200];
  for (const BenchCell& c : report.cells) {
    std::snprintf(line, sizeof(line), "%s,%d,%.17g,%.17g,%lld,%lld\n",
                  method_name(c.method).c_str(), c.batch_size, c.total_seconds,
                  c.mean_seconds_per_bag, static_cast<long long>(c.peak_bytes),
                  static_cast<long long>(c.patches_encoded));
    out += line;
  }
  return out;
}

BenchReport report_parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "method,batch_size,total_seconds,mean_seconds_per_bag,peak_bytes,patches_encoded")
    throw std::runtime_error("bad benchmark CSV header");
  BenchReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    BenchCell cell;
    if (!std::getline(row, field, ',')) throw std::runtime_error("bad benchmark row: " + line);
    cell.method = parse_method(field);
    auto next = [&]() {
      if (!std::getline(row, field, ','))
        throw std::runtime_error("bad benchmark row: " + line);
      return field;
    };
    cell.batch_size = std::stoi(next());
    cell.total_seconds = std::stod(next());
    cell.mean_seconds_per_bag = std::stod(next());
    cell.peak_bytes = std::stoll(next());
    cell.patches_encoded = std::stoll(next());
    report.cells.push_back(cell);
  }
  return report;
}

}  // namespace drasmil
