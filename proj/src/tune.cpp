#include "drasmil/tune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "drasmil/parallel.hpp"
#include "drasmil/rng.hpp"

namespace drasmil {

void validate(const ParamSpace& space) {
  if (space.params.empty()) throw std::invalid_argument("empty parameter space");
  std::set<std::string> names;
  auto claim = [&](const std::string& name) {
    if (name.empty()) throw std::invalid_argument("parameter name must be nonempty");
    if (!names.insert(name).second)
      throw std::invalid_argument("duplicate parameter name: " + name);
  };
  for (const auto& p : space.params) {
    claim(p.name);
    switch (p.dist) {
      case ParamSpace::Dist::log_uniform:
        if (!(p.lo > 0.0 && p.lo < p.hi))
          throw std::invalid_argument(p.name + ": log_uniform needs 0 < lo < hi");
        break;
      case ParamSpace::Dist::uniform:
        if (!(p.lo < p.hi)) throw std::invalid_argument(p.name + ": uniform needs lo < hi");
        break;
      case ParamSpace::Dist::choice:
        if (p.values.empty()) throw std::invalid_argument(p.name + ": empty choice list");
        break;
    }
    if (!p.paired.empty() && p.dist != ParamSpace::Dist::choice)
      throw std::invalid_argument(p.name + ": paired values require a choice parameter");
    for (const auto& [paired_name, paired_values] : p.paired) {
      claim(paired_name);
      if (paired_values.size() != p.values.size())
        throw std::invalid_argument(paired_name + ": paired list length mismatch");
    }
  }
}

namespace {

std::string dist_name(ParamSpace::Dist dist) {
  switch (dist) {
    case ParamSpace::Dist::log_uniform: return "log_uniform";
    case ParamSpace::Dist::uniform: return "uniform";
    case ParamSpace::Dist::choice: return "choice";
  }
  throw std::invalid_argument("unknown distribution");
}

ParamSpace::Dist parse_dist(const std::string& name) {
  if (name == "log_uniform") return ParamSpace::Dist::log_uniform;
  if (name == "uniform") return ParamSpace::Dist::uniform;
  if (name == "choice") return ParamSpace::Dist::choice;
  throw std::invalid_argument("unknown distribution: " + name);
}

}  // namespace

ParamSpace param_space_from_json(const std::string& text) {
  const auto root = nlohmann::ordered_json::parse(text);
  if (!root.is_object()) throw std::invalid_argument("parameter space must be a JSON object");
  ParamSpace space;
  for (const auto& [name, spec] : root.items()) {
    ParamSpace::Param p;
    p.name = name;
    p.dist = parse_dist(spec.at("dist").get<std::string>());
    if (p.dist == ParamSpace::Dist::choice) {
      p.values = spec.at("values").get<std::vector<double>>();
      if (spec.contains("paired"))
        for (const auto& [paired_name, paired_values] : spec.at("paired").items())
          p.paired.emplace_back(paired_name, paired_values.get<std::vector<double>>());
    } else {
      p.lo = spec.at("lo").get<double>();
      p.hi = spec.at("hi").get<double>();
    }
    space.params.push_back(std::move(p));
  }
  validate(space);
  return space;
}

std::string param_space_to_json(const ParamSpace& space) {
  nlohmann::ordered_json root = nlohmann::ordered_json::object();
  for (const auto& p : space.params) {
    nlohmann::ordered_json spec;
    spec["dist"] = dist_name(p.dist);
    if (p.dist == ParamSpace::Dist::choice) {
      spec["values"] = p.values;
      if (!p.paired.empty()) {
        nlohmann::ordered_json paired = nlohmann::ordered_json::object();
        for (const auto& [paired_name, paired_values] : p.paired)
          paired[paired_name] = paired_values;
        spec["paired"] = paired;
      }
    } else {
      spec["lo"] = p.lo;
      spec["hi"] = p.hi;
    }
    root[p.name] = spec;
  }
  return root.dump(2) + "\n";
}

ParamSpace training_space() {
  ParamSpace space;
  space.params.push_back({"learning_rate", ParamSpace::Dist::log_uniform, 1e-5, 1e-2, {}, {}});
  space.params.push_back({"weight_decay", ParamSpace::Dist::log_uniform, 1e-10, 1e-2, {}, {}});
  space.params.push_back({"dropout", ParamSpace::Dist::uniform, 0.0, 0.99, {}, {}});
  return space;
}

ParamSpace sampling_space() {
  ParamSpace space;
  ParamSpace::Param iterations;
  iterations.name = "iterations";
  iterations.dist = ParamSpace::Dist::choice;
  iterations.values = {2, 4, 6, 8, 10, 12, 16};
  iterations.paired.emplace_back("samples_per_iteration",
                                 std::vector<double>{320, 160, 107, 80, 64, 53, 40});
  space.params.push_back(std::move(iterations));
  space.params.push_back(
      {"neighbours", ParamSpace::Dist::choice, 0.0, 0.0, {4, 8, 16, 32, 48, 64}, {}});
  space.params.push_back({"sampling_random", ParamSpace::Dist::uniform, 0.0, 0.75, {}, {}});
  space.params.push_back(
      {"sampling_random_delta", ParamSpace::Dist::log_uniform, 0.0001, 0.5, {}, {}});
  return space;
}

double config_value(const TrialConfig& config, const std::string& name) {
  for (const auto& [key, value] : config)
    if (key == name) return value;
  throw std::out_of_range("no such parameter: " + name);
}

bool config_has(const TrialConfig& config, const std::string& name) {
  for (const auto& [key, value] : config)
    if (key == name) return true;
  return false;
}

TrialConfig sample_config(const ParamSpace& space, std::uint64_t seed) {
  validate(space);
  Rng rng(seed);
  TrialConfig config;
  for (const auto& p : space.params) {
    switch (p.dist) {
      case ParamSpace::Dist::log_uniform:
        config.emplace_back(p.name,
                            std::exp(uniform_real(rng, std::log(p.lo), std::log(p.hi))));
        break;
      case ParamSpace::Dist::uniform:
        config.emplace_back(p.name, uniform_real(rng, p.lo, p.hi));
        break;
      case ParamSpace::Dist::choice: {
        const std::size_t pick = static_cast<std::size_t>(uniform_below(rng, p.values.size()));
        config.emplace_back(p.name, p.values[pick]);
        for (const auto& [paired_name, paired_values] : p.paired)
          config.emplace_back(paired_name, paired_values[pick]);
        break;
      }
    }
  }
  return config;
}

std::vector<std::string> column_names(const ParamSpace& space) {
  std::vector<std::string> names;
  for (const auto& p : space.params) {
    names.push_back(p.name);
    for (const auto& [paired_name, paired_values] : p.paired) names.push_back(paired_name);
  }
  return names;
}

SearchResult random_search(const ParamSpace& space, const Objective& objective,
                           int trials, int repeats_per_trial, SearchMode mode,
                           std::uint64_t seed, int workers) {
  validate(space);
  if (trials < 1) throw std::invalid_argument("trials must be positive");
  if (repeats_per_trial < 1) throw std::invalid_argument("repeats must be positive");
  if (!objective) throw std::invalid_argument("objective must be callable");

  SearchResult result;
  result.log.resize(static_cast<std::size_t>(trials));
  parallel_for(static_cast<std::size_t>(trials), workers, [&](std::size_t t) {
    TrialRecord& record = result.log[t];
    record.trial = static_cast<int>(t);
    record.seed = derive_seed(seed, "trial-config", t);
    record.repeats = repeats_per_trial;
    record.config = sample_config(space, record.seed);
    double sum = 0.0;
    bool ok = true;
    for (int r = 0; r < repeats_per_trial && ok; ++r) {
      double value;
      try {
        value = objective(record.config,
                          derive_seed(seed, "trial-eval", t, static_cast<std::uint64_t>(r)));
      } catch (const std::exception&) {
        value = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(value)) ok = false;
      sum += value;
    }
    record.failed = !ok;
    record.objective = ok ? sum / repeats_per_trial
                          : std::numeric_limits<double>::quiet_NaN();
  });

  for (std::size_t t = 0; t < result.log.size(); ++t) {
    const TrialRecord& record = result.log[t];
    if (record.failed) continue;
    if (result.best_trial < 0) {
      result.best_trial = static_cast<int>(t);
      continue;
    }
    const double best = result.log[static_cast<std::size_t>(result.best_trial)].objective;
    const bool better = mode == SearchMode::maximize ? record.objective > best
                                                     : record.objective < best;
    if (better) result.best_trial = static_cast<int>(t);
  }
  if (result.best_trial < 0) throw std::runtime_error("every tuning trial failed");
  return result;
}

std::string tuning_log_csv(const ParamSpace& space, const SearchResult& result) {
  const std::vector<std::string> columns = column_names(space);
  std::string out;
  for (const auto& name : columns) {
    out += name;
    out += ',';
  }
  out += "objective,seed\n";
  char buf[40];
  for (const TrialRecord& record : result.log) {
    for (const auto& name : columns) {
      std::snprintf(buf, sizeof(buf), "%.17g,", config_value(record.config, name));
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g,", record.objective);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%llu\n", static_cast<unsigned long long>(record.seed));
    out += buf;
  }
  return out;
}

}  // namespace drasmil
