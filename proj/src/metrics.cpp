#include "mlkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mlkd {

double average_precision(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw ShapeError("average_precision: scores and labels lengths differ");
  int64_t n = static_cast<int64_t>(scores.size());
  int64_t positives = std::count(labels.begin(), labels.end(), uint8_t(1));
  if (positives == 0)
    throw std::invalid_argument("average_precision: no positive labels");

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  double ap = 0.0;
  int64_t hits = 0;
  for (int64_t rank = 1; rank <= n; ++rank) {
    if (labels[order[rank - 1]]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return ap / static_cast<double>(positives);
}

F1Result f1_scores(const std::vector<double>& probs, const std::vector<uint8_t>& labels,
                   int64_t n, int64_t q, double threshold) {
  if (static_cast<int64_t>(probs.size()) != n * q ||
      static_cast<int64_t>(labels.size()) != n * q)
    throw ShapeError("f1_scores: buffers do not match n*q");
  F1Result res;
  int64_t tp_all = 0, fp_all = 0, fn_all = 0;
  double cf1_sum = 0.0;
  for (int64_t k = 0; k < q; ++k) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (int64_t i = 0; i < n; ++i) {
      bool pred = probs[i * q + k] >= threshold;
      bool truth = labels[i * q + k] != 0;
      if (pred && truth) ++tp;
      if (pred && !truth) ++fp;
      if (!pred && truth) ++fn;
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    if (tp + fp + fn == 0) {
      ++res.zero_division_classes;  // scores 0, counted and reported
    } else {
      cf1_sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    }
  }
  res.of1 = (tp_all + fp_all + fn_all) == 0
                ? 0.0
                : 2.0 * tp_all / static_cast<double>(2 * tp_all + fp_all + fn_all);
  res.cf1 = q == 0 ? 0.0 : cf1_sum / static_cast<double>(q);
  return res;
}

std::vector<double> correlation_matrix(const std::vector<double>& probs, int64_t n, int64_t q) {
  if (n < 2) throw std::invalid_argument("correlation_matrix: need n >= 2 rows");
  if (static_cast<int64_t>(probs.size()) != n * q)
    throw ShapeError("correlation_matrix: buffer does not match n*q");
  std::vector<double> mean(q, 0.0), var(q, 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < q; ++k) mean[k] += probs[i * q + k];
  for (int64_t k = 0; k < q; ++k) mean[k] /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < q; ++k) {
      double d = probs[i * q + k] - mean[k];
      var[k] += d * d;
    }
  std::vector<double> m(q * q, 0.0);
  for (int64_t a = 0; a < q; ++a) {
    m[a * q + a] = 1.0;
    for (int64_t b = a + 1; b < q; ++b) {
      double cov = 0.0;
      for (int64_t i = 0; i < n; ++i)
        cov += (probs[i * q + a] - mean[a]) * (probs[i * q + b] - mean[b]);
      double denom = std::sqrt(var[a] * var[b]);
      double r = denom > 0.0 ? cov / denom : 0.0;
      r = std::clamp(r, -1.0, 1.0);
      m[a * q + b] = r;
      m[b * q + a] = r;
    }
  }
  return m;
}

double correlation_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ShapeError("correlation_diff: matrices differ in size");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<Neighbor> knn_retrieve(const std::vector<double>& db, int64_t n, int64_t d,
                                   const std::vector<double>& query, int64_t k) {
  if (static_cast<int64_t>(db.size()) != n * d)
    throw ShapeError("knn_retrieve: db buffer does not match n*d");
  if (static_cast<int64_t>(query.size()) != d)
    throw ShapeError("knn_retrieve: query length does not match d");
  if (k > n || k < 0)
    throw std::invalid_argument("knn_retrieve: k must satisfy 0 <= k <= n");
  std::vector<Neighbor> all(n);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = db.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      double diff = row[j] - query[j];
      s += diff * diff;
    }
    all[i] = {i, std::sqrt(s)};
  }
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.index < b.index;
  });
  all.resize(k);
  return all;
}

std::vector<RetrievalEntry> retrieval_table(const std::vector<double>& db,
                                            const std::vector<uint8_t>& db_labels, int64_t n,
                                            int64_t d, int64_t q,
                                            const std::vector<double>& query,
                                            const std::vector<uint8_t>& query_labels, int64_t k) {
  auto neighbors = knn_retrieve(db, n, d, query, k);
  std::vector<RetrievalEntry> out;
  out.reserve(neighbors.size());
  for (const auto& nb : neighbors) {
    RetrievalEntry e;
    e.index = nb.index;
    e.distance = nb.distance;
    for (int64_t c = 0; c < q; ++c) {
      if (db_labels[nb.index * q + c]) {
        e.result_labels.push_back(c);
        if (query_labels[c]) e.shared_labels.push_back(c);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

MetricsReport compute_metrics(const std::vector<double>& probs, const std::vector<uint8_t>& labels,
                              int64_t n, int64_t q, double threshold, bool with_correlation) {
  MetricsReport rep;
  rep.threshold = threshold;
  rep.per_class_ap.assign(q, std::numeric_limits<double>::quiet_NaN());
  double ap_sum = 0.0;
  int64_t ap_classes = 0;
  std::vector<double> col_scores(n);
  std::vector<uint8_t> col_labels(n);
  for (int64_t k = 0; k < q; ++k) {
    bool any_pos = false;
    for (int64_t i = 0; i < n; ++i) {
      col_scores[i] = probs[i * q + k];
      col_labels[i] = labels[i * q + k];
      any_pos = any_pos || col_labels[i];
    }
    if (!any_pos) {
      ++rep.classes_without_positives;
      continue;
    }
    double ap = average_precision(col_scores, col_labels);
    rep.per_class_ap[k] = ap;
    ap_sum += ap;
    ++ap_classes;
  }
  rep.map = ap_classes > 0 ? ap_sum / static_cast<double>(ap_classes) : 0.0;
  auto f1 = f1_scores(probs, labels, n, q, threshold);
  rep.of1 = f1.of1;
  rep.cf1 = f1.cf1;
  rep.cf1_zero_division_classes = f1.zero_division_classes;
  if (with_correlation && n >= 2) rep.correlation = correlation_matrix(probs, n, q);
  return rep;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["map"] = map;
  nlohmann::ordered_json aps = nlohmann::ordered_json::array();
  for (double ap : per_class_ap) {
    if (std::isnan(ap))
      aps.push_back(nullptr);  // undefined marker: class had no positives
    else
      aps.push_back(ap);
  }
  j["per_class_ap"] = aps;
  j["of1"] = of1;
  j["cf1"] = cf1;
  j["cf1_zero_division_classes"] = cf1_zero_division_classes;
  j["classes_without_positives"] = classes_without_positives;
  j["threshold"] = threshold;
  j["ap_convention"] = ap_convention;
  if (!correlation.empty()) j["correlation"] = correlation;
  if (correlation_diff_vs_reference)
    j["correlation_diff_vs_reference"] = *correlation_diff_vs_reference;
  return j.dump(2);
}

std::string ap_table_csv(const MetricsReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os.precision(17);
  os << "class,ap\n";
  for (size_t k = 0; k < report.per_class_ap.size(); ++k) {
    std::string name = k < class_names.size() ? class_names[k] : "class_" + std::to_string(k);
    os << name << ",";
    if (std::isnan(report.per_class_ap[k]))
      os << "NA";
    else
      os << report.per_class_ap[k];
    os << "\n";
  }
  os << "mAP," << report.map << "\n";
  return os.str();
}

}  // namespace mlkd
