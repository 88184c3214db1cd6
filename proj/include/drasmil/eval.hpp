#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drasmil/types.hpp"

namespace drasmil {

// Repeated per-slide predictions: one row per bag, one column per repeat,
// cells are positive-class probabilities.
struct PredictionTable {
  struct Row {
    std::string slide_id;
    std::string patient_id;
    int label = 0;
  };
  std::vector<Row> rows;
  Mat probs;  // rows x repeats

  Index repeats() const { return probs.cols(); }
};

// CSV with header slide_id,patient_id,label,repeat_0,...,repeat_{R-1};
// probabilities printed with full round-trip precision.
void prediction_table_write(const PredictionTable& table, const std::string& path);
PredictionTable prediction_table_read(const std::string& path);

// Probability that a random positive outranks a random negative, ties 1/2.
// Throws std::domain_error unless both classes are present.
double auc(const Vec& scores, const std::vector<int>& labels);

struct MetricsReport {
  double auc = 0.0;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
};

// Threshold metrics with predicted-positive = score > threshold; balanced
// accuracy is the mean of per-class recalls and zero-denominator F1 is 0.
MetricsReport threshold_metrics(const Vec& scores, const std::vector<int>& labels,
                                double threshold = 0.5);

// All four metrics on one score vector.
MetricsReport compute_metrics(const Vec& scores, const std::vector<int>& labels,
                              double threshold = 0.5);

struct SlideInfo {
  std::string slide_id;
  std::string patient_id;
  int label = 0;
};

struct FoldAssignment {
  int n_folds = 0;
  std::vector<int> slide_fold;  // aligned with the input slides
  std::vector<std::pair<std::string, int>> patient_fold;

  // Fold roles rotate: run r tests fold r and validates fold (r+1) % n.
  int test_fold(int run) const { return run % n_folds; }
  int val_fold(int run) const { return (run + 1) % n_folds; }
};

// Patient-level fold assignment (all of a patient's slides share a fold),
// stratified by class: patients of each class are shuffled and dealt
// round-robin, so per-fold class counts differ by at most one.
FoldAssignment stratified_folds(const std::vector<SlideInfo>& slides, int n_folds,
                                std::uint64_t seed);

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;
};

struct BootstrapReport {
  MetricStat auc;
  MetricStat accuracy;
  MetricStat balanced_accuracy;
  MetricStat f1;
  std::int64_t epochs = 0;
  double threshold = 0.5;
};

// Each epoch draws one repeat column per slide independently and scores the
// resulting prediction set; mean and (population) std are accumulated with
// Welford updates so identical columns give exactly zero spread.
BootstrapReport bootstrap(const PredictionTable& table, std::int64_t epochs,
                          std::uint64_t seed, double threshold = 0.5);

// JSON report bodies per the artifact's report schema; metadata is merged in
// by the caller.
std::string metrics_report_json(const MetricsReport& report, const std::string& meta_json);
std::string bootstrap_report_json(const BootstrapReport& report, const std::string& meta_json);

}  // namespace drasmil
