#pragma once

// Evaluation metrics: per-class average precision / mAP, micro- and
// macro-averaged F1, prediction correlation analysis, kNN retrieval.
// Everything here is pure and runs on plain double buffers.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mlkd/common.hpp"

namespace mlkd {

/// Non-interpolated AP: mean of precision@r over positive ranks, scores
/// sorted descending, ties broken by ascending original index.
/// Requires at least one positive label.
double average_precision(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

struct F1Result {
  double of1 = 0.0;  // micro: pooled decisions
  double cf1 = 0.0;  // macro: mean per-class F1
  int64_t zero_division_classes = 0;  // classes with no true and no predicted positives
};

/// Thresholded multi-label F1. probs and labels are [n, q] row-major.
F1Result f1_scores(const std::vector<double>& probs, const std::vector<uint8_t>& labels,
                   int64_t n, int64_t q, double threshold);

/// Pearson correlation between class-probability columns; [q, q] row-major.
/// Degenerate (zero-variance) columns correlate 0 off-diagonal, 1 on it.
std::vector<double> correlation_matrix(const std::vector<double>& probs, int64_t n, int64_t q);

/// Frobenius norm of the elementwise difference of two q x q matrices.
double correlation_diff(const std::vector<double>& a, const std::vector<double>& b);

struct Neighbor {
  int64_t index;
  double distance;
};

/// k nearest database rows by Euclidean distance, ascending, ties broken by
/// ascending index. db is [n, d] row-major. k > n is a contract error.
std::vector<Neighbor> knn_retrieve(const std::vector<double>& db, int64_t n, int64_t d,
                                   const std::vector<double>& query, int64_t k);

struct RetrievalEntry {
  int64_t index = 0;
  double distance = 0.0;
  std::vector<int64_t> shared_labels;  // classes positive in both query and result
  std::vector<int64_t> result_labels;
};

/// Retrieval with shared-label annotation against a labeled query.
std::vector<RetrievalEntry> retrieval_table(const std::vector<double>& db,
                                            const std::vector<uint8_t>& db_labels, int64_t n,
                                            int64_t d, int64_t q,
                                            const std::vector<double>& query,
                                            const std::vector<uint8_t>& query_labels, int64_t k);

struct MetricsReport {
  double map = 0.0;
  std::vector<double> per_class_ap;  // NaN marks classes without positives
  double of1 = 0.0;
  double cf1 = 0.0;
  int64_t cf1_zero_division_classes = 0;
  int64_t classes_without_positives = 0;
  double threshold = 0.5;
  std::string ap_convention = "non_interpolated";
  std::vector<double> correlation;  // optional, empty when not requested
  std::optional<double> correlation_diff_vs_reference;

  std::string to_json() const;
};

/// Full report from probabilities [n, q] and binary labels [n, q].
MetricsReport compute_metrics(const std::vector<double>& probs, const std::vector<uint8_t>& labels,
                              int64_t n, int64_t q, double threshold = 0.5,
                              bool with_correlation = false);

/// Per-class AP table as CSV: class,ap rows followed by a mAP footer.
std::string ap_table_csv(const MetricsReport& report, const std::vector<std::string>& class_names);

}  // namespace mlkd
