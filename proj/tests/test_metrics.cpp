#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "srlkit/metrics.hpp"
#include "srlkit/rng.hpp"

using namespace srlkit;

namespace {

// Exhaustive sweep over all n+1 operating points, recounting from scratch at
// every cut. Structurally independent of the single-pass implementation.
double eer_bruteforce_oracle(const TrialSet& set) {
  std::vector<std::pair<double, bool>> sorted;
  for (std::size_t i = 0; i < set.trials.size(); ++i)
    sorted.emplace_back(set.scores[i], set.trials[i].same_speaker);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  double nt = 0, ni = 0;
  for (const auto& [s, tgt] : sorted) (tgt ? nt : ni) += 1;

  double prev_far = 1.0, prev_frr = 0.0;
  for (std::size_t k = 0; k <= sorted.size(); ++k) {
    double rejected_targets = 0, rejected_impostors = 0;
    for (std::size_t j = 0; j < k; ++j)
      (sorted[j].second ? rejected_targets : rejected_impostors) += 1;
    const double far = (ni - rejected_impostors) / ni;
    const double frr = rejected_targets / nt;
    if (far - frr <= 0.0) {
      if (far == frr) return 100.0 * far;
      const double prev_diff = prev_far - prev_frr;
      const double t = prev_diff / (prev_diff - (far - frr));
      return 100.0 * (prev_far + t * (far - prev_far));
    }
    prev_far = far;
    prev_frr = frr;
  }
  return -1.0;
}

TrialSet random_trial_set(Rng& rng, std::size_t n) {
  TrialSet set;
  for (std::size_t i = 0; i < n; ++i) {
    Trial t;
    t.id_a = "a" + std::to_string(i);
    t.id_b = "b" + std::to_string(i);
    t.same_speaker = rng.uniform() < 0.4;
    set.trials.push_back(t);
    set.scores.push_back(rng.normal());
  }
  // Guarantee both classes.
  set.trials.front().same_speaker = true;
  set.trials.back().same_speaker = false;
  return set;
}

}  // namespace

TEST_CASE("accuracy basics") {
  std::vector<Index> labels = {0, 1, 2, 3};
  std::vector<Index> right = labels;
  std::vector<Index> wrong = {1, 2, 3, 0};
  CHECK(accuracy(right, labels) == 100.0);
  CHECK(accuracy(wrong, labels) == 0.0);
  std::vector<Index> half = {0, 1, 3, 2};
  CHECK(accuracy(half, labels) == 50.0);

  std::vector<Index> short_pred = {0};
  CHECK_THROWS_AS(accuracy(short_pred, labels), ShapeError);
}

TEST_CASE("accuracy of random predictions sits at chance level") {
  Rng rng(123);
  const std::size_t n = 10000;
  std::vector<Index> preds(n), labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    preds[i] = static_cast<Index>(rng.uniform_int(0, 12));
    labels[i] = static_cast<Index>(rng.uniform_int(0, 12));
  }
  const double acc = accuracy(preds, labels);
  CHECK(acc > 100.0 / 12 - 1.5);
  CHECK(acc < 100.0 / 12 + 1.5);
}

TEST_CASE("accuracy is invariant under consistent relabeling") {
  Rng rng(7);
  const std::size_t n = 500;
  std::vector<Index> preds(n), labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    preds[i] = static_cast<Index>(rng.uniform_int(0, 6));
    labels[i] = static_cast<Index>(rng.uniform_int(0, 6));
  }
  const double base = accuracy(preds, labels);
  std::vector<Index> perm = {3, 5, 0, 1, 4, 2};
  std::vector<Index> preds2(n), labels2(n);
  for (std::size_t i = 0; i < n; ++i) {
    preds2[i] = perm[static_cast<std::size_t>(preds[i])];
    labels2[i] = perm[static_cast<std::size_t>(labels[i])];
  }
  CHECK(accuracy(preds2, labels2) == base);
}

TEST_CASE("EER: perfect separation and anti-classifier") {
  TrialSet perfect;
  perfect.trials = {{"a", "b", true}, {"c", "d", false}};
  perfect.scores = {0.9, 0.1};
  CHECK(compute_eer(perfect) == 0.0);

  TrialSet anti;
  anti.trials = {{"a", "b", true}, {"c", "d", false}};
  anti.scores = {0.1, 0.9};
  CHECK(compute_eer(anti) == 100.0);
}

TEST_CASE("EER equals the brute-force sweep oracle") {
  Rng rng(99);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform_int(0, 120));
    TrialSet set = random_trial_set(rng, n);
    const double expect = eer_bruteforce_oracle(set);
    CHECK(std::abs(compute_eer(set) - expect) < 1e-9);
  }
}

TEST_CASE("EER is invariant under strictly increasing score transforms") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    TrialSet set = random_trial_set(rng, 60);
    const double base = compute_eer(set);

    TrialSet affine = set;
    for (auto& s : affine.scores) s = 2.0 * s + 1.0;
    CHECK(std::abs(compute_eer(affine) - base) < 1e-12);

    TrialSet squashed = set;
    for (auto& s : squashed.scores) s = std::tanh(s * 3.0);
    CHECK(std::abs(compute_eer(squashed) - base) < 1e-12);
  }
}

TEST_CASE("EER is symmetric under label swap with score negation") {
  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    TrialSet set = random_trial_set(rng, 75);
    TrialSet mirrored = set;
    for (auto& t : mirrored.trials) t.same_speaker = !t.same_speaker;
    for (auto& s : mirrored.scores) s = -s;
    CHECK(std::abs(compute_eer(mirrored) - compute_eer(set)) < 1e-12);
  }
}

TEST_CASE("EER stays within [0, 100]") {
  Rng rng(77);
  for (int rep = 0; rep < 50; ++rep) {
    TrialSet set = random_trial_set(rng, 30);
    const double eer = compute_eer(set);
    CHECK(eer >= 0.0);
    CHECK(eer <= 100.0);
  }
}

TEST_CASE("EER requires both trial classes and parallel scores") {
  TrialSet only_targets;
  only_targets.trials = {{"a", "b", true}, {"c", "d", true}};
  only_targets.scores = {0.5, 0.6};
  CHECK_THROWS_AS(compute_eer(only_targets), ValueError);

  TrialSet no_scores;
  no_scores.trials = {{"a", "b", true}, {"c", "d", false}};
  CHECK_THROWS_AS(compute_eer(no_scores), ValueError);

  TrialSet bad_score;
  bad_score.trials = {{"a", "b", true}, {"c", "d", false}};
  bad_score.scores = {0.5, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(compute_eer(bad_score), ValueError);
}

TEST_CASE("trial list files round-trip with and without scores") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "srlkit_metrics_test").string();
  fs::create_directories(dir);

  TrialSet set;
  set.trials = {{"u1", "u2", true}, {"u3", "u4", false}, {"u5", "u6", true}};
  write_trial_list(dir + "/plain.tsv", set);
  TrialSet plain = read_trial_list(dir + "/plain.tsv");
  REQUIRE(plain.trials.size() == 3);
  CHECK(plain.scores.empty());
  CHECK(plain.trials[1].id_a == "u3");
  CHECK_FALSE(plain.trials[1].same_speaker);

  set.scores = {0.25, -0.5, 0.875};
  write_trial_list(dir + "/scored.tsv", set);
  TrialSet scored = read_trial_list(dir + "/scored.tsv");
  REQUIRE(scored.scores.size() == 3);
  CHECK(scored.scores[0] == 0.25);
  CHECK(scored.scores[1] == -0.5);
  CHECK(scored.scores[2] == 0.875);

  std::vector<MetricReport> reports = {{"kws", "accuracy", 97.5, 192},
                                       {"sv", "eer", 4.25, 2112}};
  write_metric_report_csv(dir + "/metrics.csv", reports);
  std::ifstream in(dir + "/metrics.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "task,metric,value,n");
  std::getline(in, line);
  CHECK(line == "kws,accuracy,97.500000,192");
  fs::remove_all(dir);
}
