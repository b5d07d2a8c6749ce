#pragma once

// Training objectives: BCE, one-versus-all logits distillation (MLD),
// class-aware and instance-aware label-wise embedding distillation (CD/ID)
// compared through a Huber measure, the combined L2D objective, and the
// MSE / partial-softmax (PS) distillation baselines.
//
// Teacher inputs are detached inside every distillation loss; gradients only
// ever flow into the student. Structural sums follow the written equations:
// plain sums over ordered pairs with masked and diagonal pairs contributing
// exactly zero, no normalization unless `normalize_pairs` is set.

#include <cmath>
#include <string>
#include <vector>

#include "mlkd/common.hpp"
#include "mlkd/data.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

// Probability clamp applied before every log.
constexpr double kProbEps = 1e-7;

struct DistillConfig {
  double lambda_mld = 10.0;
  double lambda_cd = 100.0;
  double lambda_id = 1000.0;
  enum class Baseline { none, mse, ps };
  Baseline baseline = Baseline::none;
  double ps_temperature = 1.0;
  // Training defaults compare scale-free structure: distances divided by
  // their batch mean over valid pairs, and the pair sum averaged. The
  // written equations (plain sums of raw distances) remain available by
  // switching both off, and are what the standalone ops default to.
  bool normalize_pairs = true;            // divide CD/ID by valid off-diagonal pair count
  bool mean_normalize_distances = true;   // divide distances by their valid-pair batch mean
  bool l2_normalize_embeddings = false;   // normalize embeddings before distances

  void validate() const {
    if (!(lambda_mld >= 0) || !(lambda_cd >= 0) || !(lambda_id >= 0) ||
        !std::isfinite(lambda_mld) || !std::isfinite(lambda_cd) || !std::isfinite(lambda_id))
      throw ConfigError("distill: balancing parameters must be finite and non-negative");
    if (!(ps_temperature > 0)) throw ConfigError("distill: ps temperature must be positive");
  }
};

inline DistillConfig::Baseline baseline_from_string(const std::string& s) {
  if (s == "none") return DistillConfig::Baseline::none;
  if (s == "mse") return DistillConfig::Baseline::mse;
  if (s == "ps") return DistillConfig::Baseline::ps;
  throw ConfigError("unknown baseline mode: " + s);
}

template <typename T>
Tensor<T> labels_to_tensor(const LabelMatrix& y) {
  std::vector<T> v(y.bits.begin(), y.bits.end());
  return Tensor<T>::from({y.rows, y.classes}, std::move(v));
}

namespace detail {

template <typename T>
void check_prob_label_pair(const Tensor<T>& probs, const Tensor<T>& y, const char* who) {
  if (probs.shape() != y.shape() || probs.rank() != 2)
    throw ShapeError(std::string(who) + ": probabilities " + shape_str(probs.shape()) +
                     " vs labels " + shape_str(y.shape()));
  for (T v : y.value())
    if (v != T(0) && v != T(1))
      throw ConfigError(std::string(who) + ": labels must be 0/1");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// logit-level losses
// ---------------------------------------------------------------------------

/// -(1/b) sum_i sum_k [ y log p + (1-y) log(1-p) ]. Classes are summed,
/// only the batch dimension is averaged.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probs, const Tensor<T>& y) {
  detail::check_prob_label_pair(probs, y, "bce_loss");
  int64_t b = probs.dim(0);
  Tensor<T> p = clamp(probs, T(kProbEps), T(1.0 - kProbEps));
  Tensor<T> one = Tensor<T>::scalar(T(1));
  Tensor<T> ll = add(mul(y, log(p)), mul(sub(one, y), log(sub(one, p))));
  return mul(sum_all(ll), T(-1.0 / static_cast<double>(b)));
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probs, const LabelMatrix& y) {
  return bce_loss(probs, labels_to_tensor<T>(y));
}

/// KL divergence of the binary distributions [p, 1-p], teacher as reference.
inline double binary_kl(double p_t, double p_s) {
  double t = std::clamp(p_t, kProbEps, 1.0 - kProbEps);
  double s = std::clamp(p_s, kProbEps, 1.0 - kProbEps);
  return t * std::log(t / s) + (1.0 - t) * std::log((1.0 - t) / (1.0 - s));
}

/// Elementwise binary KL over probability tensors (teacher side constant).
template <typename T>
Tensor<T> binary_kl_elem(const Tensor<T>& probs_t, const Tensor<T>& probs_s) {
  if (probs_t.shape() != probs_s.shape())
    throw ShapeError("binary_kl: teacher " + shape_str(probs_t.shape()) + " vs student " +
                     shape_str(probs_s.shape()));
  Tensor<T> t = clamp(probs_t.detach(), T(kProbEps), T(1.0 - kProbEps));
  Tensor<T> s = clamp(probs_s, T(kProbEps), T(1.0 - kProbEps));
  Tensor<T> one = Tensor<T>::scalar(T(1));
  Tensor<T> ct = sub(one, t);
  Tensor<T> cs = sub(one, s);
  return add(mul(t, log(div(t, s))), mul(ct, log(div(ct, cs))));
}

/// (1/b) sum_i sum_k KL([t,1-t] || [s,1-s]); the one-versus-all reduction
/// of logits distillation. No temperature: the decomposition has none.
template <typename T>
Tensor<T> mld_loss(const Tensor<T>& probs_t, const Tensor<T>& probs_s) {
  if (probs_s.rank() != 2)
    throw ShapeError("mld_loss: expected [b,q] probabilities");
  int64_t b = probs_s.dim(0);
  return mul(sum_all(binary_kl_elem(probs_t, probs_s)), T(1.0 / static_cast<double>(b)));
}

// ---------------------------------------------------------------------------
// structural losses
// ---------------------------------------------------------------------------

/// Huber measure between two structural relations.
inline double huber(double a, double b) {
  double d = std::abs(a - b);
  return d <= 1.0 ? 0.5 * d * d : d - 0.5;
}

/// Masked pairwise distance: the Euclidean distance when both labels are
/// positive, exactly 0 otherwise. The same form serves phi_CD (one class,
/// two instances) and phi_ID (one instance, two classes).
inline double masked_pair_distance(const std::vector<double>& e_a, const std::vector<double>& e_b,
                                   bool y_a, bool y_b) {
  if (!(y_a && y_b)) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < e_a.size(); ++i) {
    double d = e_a[i] - e_b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

namespace detail {

template <typename T>
void check_embedding_sets(const Tensor<T>& embs_t, const Tensor<T>& embs_s, const Tensor<T>& y,
                          const char* who) {
  if (embs_t.rank() != 3 || embs_s.rank() != 3 || y.rank() != 2)
    throw ShapeError(std::string(who) + ": expected [b,q,d] embeddings and [b,q] labels");
  if (embs_t.dim(0) != embs_s.dim(0) || embs_t.dim(1) != embs_s.dim(1) ||
      y.dim(0) != embs_s.dim(0) || y.dim(1) != embs_s.dim(1))
    throw ShapeError(std::string(who) + ": batch/class extents disagree: teacher " +
                     shape_str(embs_t.shape()) + ", student " + shape_str(embs_s.shape()) +
                     ", labels " + shape_str(y.shape()));
}

template <typename T>
Tensor<T> maybe_normalize(const Tensor<T>& embs, bool enabled) {
  if (!enabled) return embs;
  Tensor<T> norm = sqrt0(sum_axis(mul(embs, embs), 2, /*keepdim=*/true));
  return div(embs, max(norm, Tensor<T>::scalar(T(kProbEps))));
}

/// Intra-class pairwise distances across the batch: [b, b, q].
template <typename T>
Tensor<T> class_pair_distances(const Tensor<T>& embs) {
  int64_t b = embs.dim(0), q = embs.dim(1), d = embs.dim(2);
  Tensor<T> lhs = reshape(embs, {b, 1, q, d});
  Tensor<T> rhs = reshape(embs, {1, b, q, d});
  Tensor<T> diff = sub(lhs, rhs);
  return sqrt0(sum_axis(mul(diff, diff), 3));
}

/// Inter-class pairwise distances within each instance: [b, q, q].
template <typename T>
Tensor<T> instance_pair_distances(const Tensor<T>& embs) {
  int64_t b = embs.dim(0), q = embs.dim(1), d = embs.dim(2);
  Tensor<T> lhs = reshape(embs, {b, q, 1, d});
  Tensor<T> rhs = reshape(embs, {b, 1, q, d});
  Tensor<T> diff = sub(lhs, rhs);
  return sqrt0(sum_axis(mul(diff, diff), 3));
}

}  // namespace detail

namespace detail {

/// phi / mean(phi over valid off-diagonal pairs). Masked entries stay 0;
/// the result is invariant to a global rescaling of the embeddings.
template <typename T>
Tensor<T> mean_normalized(const Tensor<T>& phi, const Tensor<T>& mask, int64_t valid_offdiag) {
  if (valid_offdiag < 1) return phi;
  Tensor<T> mean = mul(sum_all(mul(phi, mask)), T(1.0 / static_cast<double>(valid_offdiag)));
  return div(phi, max(mean, Tensor<T>::scalar(T(kProbEps))));
}

}  // namespace detail

/// Class-aware structural consistency: sum over classes and ordered instance
/// pairs of huber(phi_T, phi_S) with phi masked by the ground-truth labels.
/// Defaults follow the written equation (raw distances, plain sum).
template <typename T>
Tensor<T> cd_loss(const Tensor<T>& embs_t, const Tensor<T>& embs_s, const Tensor<T>& y,
                  bool normalize_pairs = false, bool l2_normalize = false,
                  bool mean_normalize = false) {
  detail::check_embedding_sets(embs_t, embs_s, y, "cd_loss");
  int64_t b = y.dim(0), q = y.dim(1);

  // mask[i,j,k] = y_ik * y_jk
  auto mask = Tensor<T>::zeros({b, b, q});
  int64_t valid = 0;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < b; ++j)
      for (int64_t k = 0; k < q; ++k) {
        T m = y.value()[i * q + k] * y.value()[j * q + k];
        mask.value()[(i * b + j) * q + k] = m;
        if (m != T(0) && i != j) ++valid;
      }

  Tensor<T> et = detail::maybe_normalize(embs_t.detach(), l2_normalize);
  Tensor<T> es = detail::maybe_normalize(embs_s, l2_normalize);
  Tensor<T> phi_t = mul(detail::class_pair_distances(et), mask);
  Tensor<T> phi_s = mul(detail::class_pair_distances(es), mask);
  if (mean_normalize) {
    phi_t = detail::mean_normalized(phi_t, mask, valid);
    phi_s = detail::mean_normalized(phi_s, mask, valid);
  }
  Tensor<T> loss = sum_all(huber_elem(phi_t, phi_s));
  if (normalize_pairs) loss = mul(loss, T(1.0 / static_cast<double>(std::max<int64_t>(valid, 1))));
  return loss;
}

/// Instance-aware structural consistency: sum over instances and ordered
/// class pairs of huber(phi_T, phi_S). Defaults follow the written equation.
template <typename T>
Tensor<T> id_loss(const Tensor<T>& embs_t, const Tensor<T>& embs_s, const Tensor<T>& y,
                  bool normalize_pairs = false, bool l2_normalize = false,
                  bool mean_normalize = false) {
  detail::check_embedding_sets(embs_t, embs_s, y, "id_loss");
  int64_t b = y.dim(0), q = y.dim(1);

  // mask[i,k,l] = y_ik * y_il
  auto mask = Tensor<T>::zeros({b, q, q});
  int64_t valid = 0;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t k = 0; k < q; ++k)
      for (int64_t l = 0; l < q; ++l) {
        T m = y.value()[i * q + k] * y.value()[i * q + l];
        mask.value()[(i * q + k) * q + l] = m;
        if (m != T(0) && k != l) ++valid;
      }

  Tensor<T> et = detail::maybe_normalize(embs_t.detach(), l2_normalize);
  Tensor<T> es = detail::maybe_normalize(embs_s, l2_normalize);
  Tensor<T> phi_t = mul(detail::instance_pair_distances(et), mask);
  Tensor<T> phi_s = mul(detail::instance_pair_distances(es), mask);
  if (mean_normalize) {
    phi_t = detail::mean_normalized(phi_t, mask, valid);
    phi_s = detail::mean_normalized(phi_s, mask, valid);
  }
  Tensor<T> loss = sum_all(huber_elem(phi_t, phi_s));
  if (normalize_pairs) loss = mul(loss, T(1.0 / static_cast<double>(std::max<int64_t>(valid, 1))));
  return loss;
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

/// Mean squared error over all b*q logit entries.
template <typename T>
Tensor<T> mse_baseline(const Tensor<T>& logits_t, const Tensor<T>& logits_s) {
  if (logits_t.shape() != logits_s.shape())
    throw ShapeError("mse_baseline: teacher " + shape_str(logits_t.shape()) + " vs student " +
                     shape_str(logits_s.shape()));
  Tensor<T> d = sub(logits_t.detach(), logits_s);
  return mean_all(mul(d, d));
}

/// Partial-softmax distillation: for every (instance, positive label) pair,
/// softmax at temperature `temp` over that positive logit plus all negative
/// logits of the instance; accumulate KL(teacher || student) and normalize
/// by the pair count. Pairs whose instance has no negative label are skipped.
template <typename T>
Tensor<T> ps_baseline(const Tensor<T>& logits_t, const Tensor<T>& logits_s, const Tensor<T>& y,
                      T temp) {
  if (logits_t.shape() != logits_s.shape() || logits_s.shape() != y.shape() ||
      logits_s.rank() != 2)
    throw ShapeError("ps_baseline: logits/labels extents disagree");
  if (!(temp > T(0))) throw ConfigError("ps_baseline: temperature must be positive");
  int64_t b = y.dim(0), q = y.dim(1);

  auto y_neg = Tensor<T>::zeros({b, q});
  auto pair_mask = Tensor<T>::zeros({b, q});
  double pair_count = 0;
  for (int64_t i = 0; i < b; ++i) {
    int64_t negatives = 0;
    for (int64_t k = 0; k < q; ++k) {
      y_neg.value()[i * q + k] = T(1) - y.value()[i * q + k];
      if (y.value()[i * q + k] == T(0)) ++negatives;
    }
    if (negatives == 0) continue;  // degenerate single-element distribution
    for (int64_t k = 0; k < q; ++k)
      if (y.value()[i * q + k] == T(1)) {
        pair_mask.value()[i * q + k] = T(1);
        pair_count += 1;
      }
  }
  if (pair_count == 0) return Tensor<T>::scalar(T(0));

  Tensor<T> zt = mul(logits_t.detach(), T(1) / temp);
  Tensor<T> zs = mul(logits_s, T(1) / temp);

  // constant per-row shifts keep the exponentials in range
  auto row_max = [&](const Tensor<T>& z) {
    auto m = Tensor<T>::zeros({b, 1});
    for (int64_t i = 0; i < b; ++i) {
      T v = z.value()[i * q];
      for (int64_t k = 1; k < q; ++k) v = std::max(v, z.value()[i * q + k]);
      m.value()[i] = v;
    }
    return m;
  };
  Tensor<T> mt = row_max(zt);
  Tensor<T> ms = row_max(zs);

  Tensor<T> at = exp(sub(zt, mt));
  Tensor<T> as = exp(sub(zs, ms));
  Tensor<T> den_t = add(at, sum_axis(mul(at, y_neg), 1, true));  // [b,q]
  Tensor<T> den_s = add(as, sum_axis(mul(as, y_neg), 1, true));

  // KL(i,k) = sum_{j in set} pT(j) Delta(j) + (mS - mT) + log denS - log denT
  Tensor<T> delta = sub(zt, zs);
  Tensor<T> num = add(mul(at, delta), sum_axis(mul(mul(at, y_neg), delta), 1, true));
  Tensor<T> kl = add(add(div(num, den_t), sub(ms, mt)), sub(log(den_s), log(den_t)));
  return mul(sum_all(mul(kl, pair_mask)), T(1.0 / pair_count));
}

// ---------------------------------------------------------------------------
// combined objective
// ---------------------------------------------------------------------------

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double bce = 0.0;
  double mld = 0.0;
  double cd = 0.0;
  double id = 0.0;
  double baseline = 0.0;  // mse or ps term when a baseline mode is active
};

/// L_BCE + lambda_MLD L_MLD + lambda_CD L_CD + lambda_ID L_ID. Terms with a
/// zero balancing parameter are neither computed nor part of the objective.
template <typename T>
LossBreakdown<T> l2d_loss(const Tensor<T>& probs_s, const Tensor<T>& y, const Tensor<T>& probs_t,
                          const Tensor<T>& embs_t, const Tensor<T>& embs_s,
                          const DistillConfig& cfg) {
  cfg.validate();
  LossBreakdown<T> out;
  Tensor<T> total = bce_loss(probs_s, y);
  out.bce = static_cast<double>(total.item());
  if (cfg.lambda_mld > 0) {
    Tensor<T> term = mld_loss(probs_t, probs_s);
    out.mld = static_cast<double>(term.item());
    total = add(total, mul(term, T(cfg.lambda_mld)));
  }
  if (cfg.lambda_cd > 0) {
    Tensor<T> term = cd_loss(embs_t, embs_s, y, cfg.normalize_pairs, cfg.l2_normalize_embeddings,
                             cfg.mean_normalize_distances);
    out.cd = static_cast<double>(term.item());
    total = add(total, mul(term, T(cfg.lambda_cd)));
  }
  if (cfg.lambda_id > 0) {
    Tensor<T> term = id_loss(embs_t, embs_s, y, cfg.normalize_pairs, cfg.l2_normalize_embeddings,
                             cfg.mean_normalize_distances);
    out.id = static_cast<double>(term.item());
    total = add(total, mul(term, T(cfg.lambda_id)));
  }
  out.total = total;
  return out;
}

}  // namespace mlkd
