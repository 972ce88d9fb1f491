// Evaluation metrics: classification accuracy and equal error rate over
// speaker-verification trial sets, plus the trial-list and report file
// formats.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "srlkit/tensor.hpp"

namespace srlkit {

struct Trial {
  std::string id_a;
  std::string id_b;
  bool same_speaker = false;
};

struct TrialSet {
  std::vector<Trial> trials;
  std::vector<double> scores;  // parallel to trials when present
};

struct MetricReport {
  std::string task;    // "kws" or "sv"
  std::string metric;  // "accuracy" or "eer"
  double value = 0.0;  // percentage
  std::int64_t n = 0;
};

// 100 * (#equal) / n.
double accuracy(std::span<const Index> predictions, std::span<const Index> labels);

// Equal error rate in percent. Sweeps all n+1 operating points induced by
// the score order statistics (score >= threshold accepts) and linearly
// interpolates the FAR/FRR crossing between the two bracketing points.
double compute_eer(const TrialSet& trials);

// Trial list file: idA<TAB>idB<TAB>{0|1}, score appended as a fourth column
// when present.
TrialSet read_trial_list(const std::string& path);
void write_trial_list(const std::string& path, const TrialSet& trials);

// Metric report CSV: task,metric,value,n.
void write_metric_report_csv(const std::string& path,
                             std::span<const MetricReport> reports);

}  // namespace srlkit
