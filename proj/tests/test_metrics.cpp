#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mlkd/metrics.hpp"

using namespace mlkd;

namespace {

// Brute-force AP oracle: build the full precision table by re-scanning the
// top-r set at every rank.
double ap_oracle(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  int64_t n = static_cast<int64_t>(scores.size());
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  double positives = 0;
  for (uint8_t l : labels) positives += l;
  double ap = 0;
  for (int64_t r = 1; r <= n; ++r) {
    if (!labels[order[r - 1]]) continue;
    double hits = 0;
    for (int64_t j = 0; j < r; ++j) hits += labels[order[j]];
    ap += hits / static_cast<double>(r);
  }
  return ap / positives;
}

}  // namespace

TEST_CASE("average precision: perfect ranking, hand value, rank dependence only") {
  CHECK(average_precision({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);

  double ap = average_precision({0.9, 0.6, 0.3, 0.1}, {1, 0, 1, 0});
  CHECK(ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

  // any strictly monotone transform of scores leaves AP unchanged
  std::vector<double> scores = {0.9, 0.6, 0.3, 0.1};
  std::vector<double> warped(4);
  for (int i = 0; i < 4; ++i) warped[i] = std::exp(7.0 * scores[i]) - 3.0;
  CHECK(average_precision(warped, {1, 0, 1, 0}) == doctest::Approx(ap).epsilon(1e-12));

  CHECK_THROWS_AS(average_precision({0.5, 0.4}, {0, 0}), std::invalid_argument);
}

TEST_CASE("average precision matches the brute-force oracle on 1000 random cases") {
  Rng rng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    int64_t n = 1 + rng.index(8);
    std::vector<double> scores(n);
    std::vector<uint8_t> labels(n);
    bool any = false;
    for (int64_t i = 0; i < n; ++i) {
      scores[i] = rng.index(5) * 0.25;  // coarse grid forces ties
      labels[i] = rng.bernoulli(0.5) ? 1 : 0;
      any = any || labels[i];
    }
    if (!any) labels[rng.index(n)] = 1;
    CHECK(average_precision(scores, labels) == ap_oracle(scores, labels));
  }
}

TEST_CASE("f1 scores: perfect, all-negative, hand-counted micro case") {
  // predictions == labels
  std::vector<double> p1 = {0.9, 0.1, 0.8, 0.7};
  std::vector<uint8_t> y1 = {1, 0, 1, 1};
  auto r1 = f1_scores(p1, y1, 2, 2, 0.5);
  CHECK(r1.of1 == 1.0);
  CHECK(r1.cf1 == 1.0);

  // everything predicted negative
  std::vector<double> p2 = {0.1, 0.2, 0.3, 0.2};
  auto r2 = f1_scores(p2, y1, 2, 2, 0.5);
  CHECK(r2.of1 == 0.0);

  // n=2, q=2, labels [[1,0],[1,1]], preds [[1,0],[0,1]] -> OF1 = 0.8
  std::vector<double> p3 = {0.9, 0.1, 0.2, 0.9};
  std::vector<uint8_t> y3 = {1, 0, 1, 1};
  auto r3 = f1_scores(p3, y3, 2, 2, 0.5);
  CHECK(r3.of1 == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("f1 zero-division convention: silent classes score 0 and are counted") {
  // class 1 has no true positives and no predictions
  std::vector<double> p = {0.9, 0.1, 0.8, 0.2};
  std::vector<uint8_t> y = {1, 0, 1, 0};
  auto r = f1_scores(p, y, 2, 2, 0.5);
  CHECK(r.zero_division_classes == 1);
  CHECK(r.cf1 == doctest::Approx(0.5).epsilon(1e-12));  // (1 + 0) / 2
}

TEST_CASE("correlation matrix: perfect, anti, independent, degenerate") {
  // column 1 == column 0; column 2 = -column 0 + const
  int64_t n = 50;
  std::vector<double> probs(n * 3);
  Rng rng(7);
  for (int64_t i = 0; i < n; ++i) {
    double v = rng.u01();
    probs[i * 3 + 0] = v;
    probs[i * 3 + 1] = v;
    probs[i * 3 + 2] = 1.0 - v;
  }
  auto m = correlation_matrix(probs, n, 3);
  CHECK(m[0 * 3 + 1] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m[0 * 3 + 2] == doctest::Approx(-1.0).epsilon(1e-9));
  for (int64_t a = 0; a < 3; ++a) {
    CHECK(m[a * 3 + a] == 1.0);
    for (int64_t b = 0; b < 3; ++b) {
      CHECK(m[a * 3 + b] == m[b * 3 + a]);
      CHECK(m[a * 3 + b] >= -1.0 - 1e-9);
      CHECK(m[a * 3 + b] <= 1.0 + 1e-9);
    }
  }

  // independent columns, n = 1e4: |r| < 0.05
  int64_t big = 10000;
  std::vector<double> ind(big * 2);
  for (auto& v : ind) v = rng.u01();
  auto mi = correlation_matrix(ind, big, 2);
  CHECK(std::abs(mi[1]) < 0.05);

  // degenerate constant column: 0 off-diagonal, 1 on-diagonal
  std::vector<double> deg(10 * 2);
  for (int64_t i = 0; i < 10; ++i) {
    deg[i * 2] = 0.5;
    deg[i * 2 + 1] = rng.u01();
  }
  auto md = correlation_matrix(deg, 10, 2);
  CHECK(md[0] == 1.0);
  CHECK(md[1] == 0.0);
}

TEST_CASE("correlation diff: identity, hand value, symmetry") {
  std::vector<double> eye = {1, 0, 0, 1};
  std::vector<double> ones = {1, 1, 1, 1};
  CHECK(correlation_diff(eye, eye) == 0.0);
  CHECK(correlation_diff(eye, ones) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(correlation_diff(ones, eye) == correlation_diff(eye, ones));
  CHECK_THROWS_AS(correlation_diff(eye, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("knn retrieval: self-match, full sort, hand distances, monotone") {
  std::vector<double> db = {0.0, 1.0, 10.0};  // 3 points in 1-D
  auto top2 = knn_retrieve(db, 3, 1, {0.4}, 2);
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].index == 0);
  CHECK(top2[0].distance == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(top2[1].index == 1);

  auto self = knn_retrieve(db, 3, 1, {10.0}, 1);
  CHECK(self[0].index == 2);
  CHECK(self[0].distance == 0.0);

  auto full = knn_retrieve(db, 3, 1, {0.4}, 3);
  CHECK(full.size() == 3);
  for (size_t i = 1; i < full.size(); ++i) CHECK(full[i].distance >= full[i - 1].distance);

  CHECK_THROWS_AS(knn_retrieve(db, 3, 1, {0.0}, 4), std::invalid_argument);
}

TEST_CASE("retrieval table annotates shared labels") {
  std::vector<double> db = {0.0, 0.1, 5.0};
  std::vector<uint8_t> labels = {1, 0, 1, 1, 0, 1};  // 3 rows, q = 2
  auto table = retrieval_table(db, labels, 3, 1, 2, {0.0}, {1, 0}, 2);
  REQUIRE(table.size() == 2);
  CHECK(table[0].index == 0);
  CHECK(table[0].shared_labels == std::vector<int64_t>{0});
  CHECK(table[1].index == 1);
  CHECK(table[1].shared_labels == std::vector<int64_t>{0});
  CHECK(table[1].result_labels == std::vector<int64_t>{0, 1});
}

TEST_CASE("compute_metrics: class permutation invariance and undefined AP marker") {
  Rng rng(21);
  int64_t n = 40, q = 4;
  std::vector<double> probs(n * q);
  std::vector<uint8_t> labels(n * q, 0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < q; ++k) probs[i * q + k] = rng.u01();
    labels[i * q + rng.index(q - 1)] = 1;  // class q-1 never positive
  }
  auto rep = compute_metrics(probs, labels, n, q);
  CHECK(rep.classes_without_positives == 1);
  CHECK(std::isnan(rep.per_class_ap[q - 1]));
  // mAP equals the mean over defined classes
  double mean = 0;
  for (int64_t k = 0; k < q - 1; ++k) mean += rep.per_class_ap[k];
  CHECK(rep.map == doctest::Approx(mean / (q - 1)).epsilon(1e-12));

  // permute classes consistently
  std::vector<int64_t> perm = {2, 0, 3, 1};
  std::vector<double> probs_p(n * q);
  std::vector<uint8_t> labels_p(n * q);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < q; ++k) {
      probs_p[i * q + k] = probs[i * q + perm[k]];
      labels_p[i * q + k] = labels[i * q + perm[k]];
    }
  auto rep_p = compute_metrics(probs_p, labels_p, n, q);
  CHECK(rep_p.map == doctest::Approx(rep.map).epsilon(1e-12));
  CHECK(rep_p.of1 == doctest::Approx(rep.of1).epsilon(1e-12));
  CHECK(rep_p.cf1 == doctest::Approx(rep.cf1).epsilon(1e-12));

  // report serialization carries the pinned conventions
  auto j = rep.to_json();
  CHECK(j.find("non_interpolated") != std::string::npos);
  CHECK(j.find("\"threshold\": 0.5") != std::string::npos);
}
