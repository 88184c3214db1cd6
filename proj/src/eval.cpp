#include "drasmil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "drasmil/rng.hpp"

namespace drasmil {

namespace {

std::string format_prob(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void prediction_table_write(const PredictionTable& table, const std::string& path) {
  if (static_cast<Index>(table.rows.size()) != table.probs.rows())
    throw std::invalid_argument("prediction table rows and probabilities disagree");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "slide_id,patient_id,label";
  for (Index r = 0; r < table.probs.cols(); ++r) out << ",repeat_" << r;
  out << '\n';
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    out << row.slide_id << ',' << row.patient_id << ',' << row.label;
    for (Index r = 0; r < table.probs.cols(); ++r)
      out << ',' << format_prob(table.probs(static_cast<Index>(i), r));
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

PredictionTable prediction_table_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty prediction table");
  Index repeats = 0;
  {
    std::stringstream ss(line);
    std::string col;
    std::vector<std::string> cols;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() < 4 || cols[0] != "slide_id" || cols[1] != "patient_id" || cols[2] != "label")
      throw std::runtime_error(path + ": bad prediction table header");
    repeats = static_cast<Index>(cols.size()) - 3;
  }
  PredictionTable table;
  std::vector<std::vector<double>> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    PredictionTable::Row row;
    std::string field;
    if (!std::getline(ss, row.slide_id, ',') || !std::getline(ss, row.patient_id, ',') ||
        !std::getline(ss, field, ','))
      throw std::runtime_error(path + ": bad prediction row: " + line);
    row.label = std::stoi(field);
    std::vector<double> vals;
    while (std::getline(ss, field, ',')) vals.push_back(std::stod(field));
    if (static_cast<Index>(vals.size()) != repeats)
      throw std::runtime_error(path + ": ragged prediction row: " + line);
    table.rows.push_back(std::move(row));
    values.push_back(std::move(vals));
  }
  table.probs.resize(static_cast<Index>(values.size()), repeats);
  for (Index i = 0; i < table.probs.rows(); ++i)
    for (Index r = 0; r < repeats; ++r) table.probs(i, r) = values[i][r];
  return table;
}

double auc(const Vec& scores, const std::vector<int>& labels) {
  const Index n = scores.size();
  if (n != static_cast<Index>(labels.size()))
    throw std::invalid_argument("scores and labels must align");
  Index n_pos = 0;
  for (int l : labels) n_pos += (l == 1);
  const Index n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::domain_error("AUC undefined for single-class labels");

  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index(0));
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups; rank sum of positives gives the
  // Mann-Whitney statistic.
  double pos_rank_sum = 0.0;
  Index i = 0;
  while (i < n) {
    Index j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // 1-based ranks i+1 .. j
    for (Index t = i; t < j; ++t)
      if (labels[order[t]] == 1) pos_rank_sum += avg_rank;
    i = j;
  }
  const double u = pos_rank_sum - 0.5 * double(n_pos) * double(n_pos + 1);
  return u / (double(n_pos) * double(n_neg));
}

MetricsReport threshold_metrics(const Vec& scores, const std::vector<int>& labels,
                                double threshold) {
  const Index n = scores.size();
  if (n == 0 || n != static_cast<Index>(labels.size()))
    throw std::invalid_argument("scores and labels must align and be nonempty");
  Index tp = 0, tn = 0, fp = 0, fn = 0;
  for (Index i = 0; i < n; ++i) {
    const bool pred = scores[i] > threshold;
    const bool truth = labels[i] == 1;
    if (pred && truth) ++tp;
    else if (pred && !truth) ++fp;
    else if (!pred && truth) ++fn;
    else ++tn;
  }
  MetricsReport r;
  r.threshold = threshold;
  r.accuracy = double(tp + tn) / double(n);

  double recall_sum = 0.0;
  int classes = 0;
  if (tp + fn > 0) {
    recall_sum += double(tp) / double(tp + fn);
    ++classes;
  }
  if (tn + fp > 0) {
    recall_sum += double(tn) / double(tn + fp);
    ++classes;
  }
  r.balanced_accuracy = classes > 0 ? recall_sum / classes : 0.0;

  const double precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  r.f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return r;
}

MetricsReport compute_metrics(const Vec& scores, const std::vector<int>& labels,
                              double threshold) {
  MetricsReport r = threshold_metrics(scores, labels, threshold);
  r.auc = auc(scores, labels);
  return r;
}

FoldAssignment stratified_folds(const std::vector<SlideInfo>& slides, int n_folds,
                                std::uint64_t seed) {
  if (n_folds < 2) throw std::invalid_argument("need at least 2 folds");
  if (slides.empty()) throw std::invalid_argument("no slides to assign");

  // Patient -> label, in first-appearance order.
  std::vector<std::string> patients;
  std::map<std::string, int> patient_label;
  for (const auto& s : slides) {
    auto [it, inserted] = patient_label.emplace(s.patient_id, s.label);
    if (inserted) patients.push_back(s.patient_id);
    else if (it->second != s.label)
      throw std::invalid_argument("patient " + s.patient_id + " has inconsistent labels");
  }

  std::vector<std::vector<std::string>> by_class(2);
  for (const auto& p : patients) by_class[patient_label[p]].push_back(p);
  for (int c = 0; c < 2; ++c)
    if (!by_class[c].empty() && static_cast<int>(by_class[c].size()) < n_folds)
      throw std::invalid_argument("too few patients in one class for the fold count");
  if (by_class[0].empty() && by_class[1].empty())
    throw std::invalid_argument("no patients");

  FoldAssignment fa;
  fa.n_folds = n_folds;
  Rng rng(derive_seed(seed, "folds"));
  std::map<std::string, int> fold_of;
  for (int c = 0; c < 2; ++c) {
    auto& group = by_class[c];
    for (std::size_t i = group.size(); i > 1; --i)
      std::swap(group[i - 1], group[uniform_below(rng, i)]);
    for (std::size_t i = 0; i < group.size(); ++i)
      fold_of[group[i]] = static_cast<int>(i % n_folds);
  }
  for (const auto& p : patients) fa.patient_fold.emplace_back(p, fold_of[p]);
  fa.slide_fold.reserve(slides.size());
  for (const auto& s : slides) fa.slide_fold.push_back(fold_of[s.patient_id]);
  return fa;
}

namespace {

struct Welford {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    n += 1;
    const double delta = x - mean;
    mean += delta / double(n);
    m2 += delta * (x - mean);
  }
  MetricStat stat() const { return {mean, n > 0 ? std::sqrt(m2 / double(n)) : 0.0}; }
};

}  // namespace

BootstrapReport bootstrap(const PredictionTable& table, std::int64_t epochs,
                          std::uint64_t seed, double threshold) {
  const Index n = table.probs.rows();
  const Index repeats = table.probs.cols();
  if (n < 1 || repeats < 1) throw std::invalid_argument("empty prediction table");
  if (epochs < 1) throw std::invalid_argument("need at least one bootstrap epoch");
  std::vector<int> labels(n);
  for (Index i = 0; i < n; ++i) labels[i] = table.rows[i].label;

  Welford w_auc, w_acc, w_bal, w_f1;
  Vec scores(n);
  for (std::int64_t e = 0; e < epochs; ++e) {
    Rng rng(derive_seed(seed, "bootstrap-epoch", static_cast<std::uint64_t>(e)));
    for (Index i = 0; i < n; ++i)
      scores[i] = table.probs(i, static_cast<Index>(uniform_below(rng, repeats)));
    const MetricsReport m = compute_metrics(scores, labels, threshold);
    w_auc.add(m.auc);
    w_acc.add(m.accuracy);
    w_bal.add(m.balanced_accuracy);
    w_f1.add(m.f1);
  }

  BootstrapReport report;
  report.auc = w_auc.stat();
  report.accuracy = w_acc.stat();
  report.balanced_accuracy = w_bal.stat();
  report.f1 = w_f1.stat();
  report.epochs = epochs;
  report.threshold = threshold;
  return report;
}

std::string metrics_report_json(const MetricsReport& report, const std::string& meta_json) {
  nlohmann::json j;
  j["auc"] = report.auc;
  j["accuracy"] = report.accuracy;
  j["balanced_accuracy"] = report.balanced_accuracy;
  j["f1"] = report.f1;
  j["threshold"] = report.threshold;
  if (!meta_json.empty()) j["meta"] = nlohmann::json::parse(meta_json);
  return j.dump(2) + "\n";
}

std::string bootstrap_report_json(const BootstrapReport& report, const std::string& meta_json) {
  nlohmann::json j;
  auto stat = [](const MetricStat& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}};
  };
  j["auc"] = stat(report.auc);
  j["accuracy"] = stat(report.accuracy);
  j["balanced_accuracy"] = stat(report.balanced_accuracy);
  j["f1"] = stat(report.f1);
  j["epochs"] = report.epochs;
  j["threshold"] = report.threshold;
  if (!meta_json.empty()) j["meta"] = nlohmann::json::parse(meta_json);
  return j.dump(2) + "\n";
}

}  // namespace drasmil
