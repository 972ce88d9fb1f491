#include "srlkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace srlkit {

double accuracy(std::span<const Index> predictions,
                std::span<const Index> labels) {
  if (predictions.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(predictions.size()) +
                     " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  if (predictions.empty()) throw ValueError("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return 100.0 * static_cast<double>(correct) /
         static_cast<double>(predictions.size());
}

double compute_eer(const TrialSet& set) {
  if (set.scores.size() != set.trials.size())
    throw ValueError("compute_eer: scores missing or not parallel to trials");
  std::size_t targets = 0, impostors = 0;
  for (std::size_t i = 0; i < set.trials.size(); ++i) {
    if (!std::isfinite(set.scores[i]))
      throw ValueError("compute_eer: non-finite score");
    (set.trials[i].same_speaker ? targets : impostors) += 1;
  }
  if (targets == 0 || impostors == 0)
    throw ValueError("compute_eer: need at least one target and one impostor trial");

  // Sort scores ascending; cut k rejects the k lowest scores. Cumulative
  // counts give FAR/FRR at every cut in one pass.
  std::vector<std::pair<double, bool>> sorted;
  sorted.reserve(set.trials.size());
  for (std::size_t i = 0; i < set.trials.size(); ++i)
    sorted.emplace_back(set.scores[i], set.trials[i].same_speaker);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  const double nt = static_cast<double>(targets);
  const double ni = static_cast<double>(impostors);
  double prev_far = 1.0, prev_frr = 0.0;  // cut 0: accept everything
  std::size_t rejected_targets = 0, rejected_impostors = 0;
  for (std::size_t k = 0; k <= sorted.size(); ++k) {
    const double far = (ni - static_cast<double>(rejected_impostors)) / ni;
    const double frr = static_cast<double>(rejected_targets) / nt;
    const double diff = far - frr;
    if (diff <= 0.0) {
      if (diff == 0.0) return 100.0 * far;
      // Interpolate between the previous and current operating point.
      const double prev_diff = prev_far - prev_frr;
      const double t = prev_diff / (prev_diff - diff);
      return 100.0 * (prev_far + t * (far - prev_far));
    }
    prev_far = far;
    prev_frr = frr;
    if (k < sorted.size())
      (sorted[k].second ? rejected_targets : rejected_impostors) += 1;
  }
  // FAR ends at 0 and FRR at 1, so the crossing always exists.
  throw ValueError("compute_eer: no FAR/FRR crossing found");
}

TrialSet read_trial_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open trial list " + path);
  TrialSet set;
  std::string line;
  std::size_t line_no = 0;
  bool any_scores = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    Trial t;
    std::string label, score;
    if (!std::getline(ss, t.id_a, '\t') || !std::getline(ss, t.id_b, '\t') ||
        !std::getline(ss, label, '\t'))
      throw ValueError("trial list " + path + ": malformed line " +
                       std::to_string(line_no));
    if (label != "0" && label != "1")
      throw ValueError("trial list " + path + ": label must be 0 or 1 at line " +
                       std::to_string(line_no));
    t.same_speaker = label == "1";
    set.trials.push_back(std::move(t));
    if (std::getline(ss, score, '\t')) {
      set.scores.push_back(std::stod(score));
      any_scores = true;
    } else if (any_scores) {
      throw ValueError("trial list " + path + ": missing score at line " +
                       std::to_string(line_no));
    }
  }
  if (!set.scores.empty() && set.scores.size() != set.trials.size())
    throw ValueError("trial list " + path + ": scores present on some lines only");
  return set;
}

void write_trial_list(const std::string& path, const TrialSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write trial list " + path);
  const bool with_scores = !set.scores.empty();
  if (with_scores && set.scores.size() != set.trials.size())
    throw ValueError("write_trial_list: scores not parallel to trials");
  char buf[64];
  for (std::size_t i = 0; i < set.trials.size(); ++i) {
    const Trial& t = set.trials[i];
    out << t.id_a << '\t' << t.id_b << '\t' << (t.same_speaker ? '1' : '0');
    if (with_scores) {
      std::snprintf(buf, sizeof buf, "%.9g", set.scores[i]);
      out << '\t' << buf;
    }
    out << '\n';
  }
}

void write_metric_report_csv(const std::string& path,
                             std::span<const MetricReport> reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write metric report " + path);
  out << "task,metric,value,n\n";
  char buf[64];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%.6f", r.value);
    out << r.task << ',' << r.metric << ',' << buf << ',' << r.n << '\n';
  }
}

}  // namespace srlkit
