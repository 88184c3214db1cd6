#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace drasmil {

// Random-search space: an ordered list of named distributions. Order matters
// because a sampled configuration draws the parameters in sequence from one
// seeded stream.
struct ParamSpace {
  enum class Dist { log_uniform, uniform, choice };

  struct Param {
    std::string name;
    Dist dist = Dist::uniform;
    double lo = 0.0, hi = 0.0;   // bounds for uniform / log_uniform
    std::vector<double> values;  // options for choice
    // Derived values tied to the chosen option's position, drawn jointly.
    std::vector<std::pair<std::string, std::vector<double>>> paired;
  };

  std::vector<Param> params;
};

void validate(const ParamSpace& space);

// JSON object, one entry per parameter in declaration order:
//   {"lr": {"dist": "log_uniform", "lo": 1e-5, "hi": 1e-2},
//    "iters": {"dist": "choice", "values": [2,4], "paired": {"per_iter": [320,160]}}}
ParamSpace param_space_from_json(const std::string& text);
std::string param_space_to_json(const ParamSpace& space);

// Built-in spaces for the two tuning modes.
ParamSpace training_space();  // learning_rate, weight_decay, dropout
ParamSpace sampling_space();  // iterations (+paired counts), neighbours, rates

using TrialConfig = std::vector<std::pair<std::string, double>>;

double config_value(const TrialConfig& config, const std::string& name);
bool config_has(const TrialConfig& config, const std::string& name);

// One draw from every distribution (paired values included), deterministic
// per seed.
TrialConfig sample_config(const ParamSpace& space, std::uint64_t seed);

// Parameter columns in log order: each parameter followed by its paired names.
std::vector<std::string> column_names(const ParamSpace& space);

struct TrialRecord {
  int trial = 0;
  TrialConfig config;
  double objective = 0.0;  // NaN when failed
  bool failed = false;
  std::uint64_t seed = 0;  // the trial's config seed
  int repeats = 0;
};

enum class SearchMode { maximize, minimize };

struct SearchResult {
  std::vector<TrialRecord> log;  // ordered by trial index
  int best_trial = -1;
};

// Evaluates a sampled configuration under one derived repeat seed; a
// non-finite return (or a throw) marks the repeat failed.
using Objective = std::function<double(const TrialConfig& config, std::uint64_t seed)>;

// Draws `trials` configurations, evaluates each `repeats_per_trial` times
// with distinct derived seeds, and aggregates by mean. Failed trials stay in
// the log but are excluded from the best pick; throws when every trial
// failed. Trials are independent and may run on `workers` threads without
// changing the result.
SearchResult random_search(const ParamSpace& space, const Objective& objective,
                           int trials, int repeats_per_trial, SearchMode mode,
                           std::uint64_t seed, int workers = 1);

// One row per trial: parameter columns, then objective and the trial seed.
std::string tuning_log_csv(const ParamSpace& space, const SearchResult& result);

}  // namespace drasmil
