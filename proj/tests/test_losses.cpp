#include <doctest.h>

#include <cmath>

#include "mlkd/losses.hpp"
#include "test_util.hpp"

using namespace mlkd;
using testutil::random_tensor;

using T64 = Tensor<double>;

namespace {

/// Random label matrix with at least one positive per row and, usually,
/// multi-positive rows so the structural losses see valid pairs.
T64 random_labels(int64_t b, int64_t q, Rng& rng, double p = 0.5) {
  auto y = T64::zeros({b, q});
  for (int64_t i = 0; i < b; ++i) {
    int64_t pos = 0;
    for (int64_t k = 0; k < q; ++k) {
      if (rng.bernoulli(p)) {
        y.value()[i * q + k] = 1.0;
        ++pos;
      }
    }
    if (pos == 0) y.value()[i * q + rng.index(q)] = 1.0;
  }
  return y;
}

}  // namespace

TEST_CASE("bce: perfect prediction, hand value, permutation symmetry") {
  auto y = T64::from({1, 2}, {1, 0});
  auto exact = T64::from({1, 2}, {1.0, 0.0});
  CHECK(bce_loss(exact, y).item() < 2 * 1e-7 * 20);  // clamp floor only

  auto half = T64::from({1, 2}, {0.5, 0.5});
  CHECK(bce_loss(half, y).item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));

  Rng rng(3);
  auto probs = random_tensor({4, 5}, rng, 0.05, 0.95);
  auto labels = random_labels(4, 5, rng);
  double base = bce_loss(probs, labels).item();
  // permute class columns of both together
  std::vector<size_t> perm = {3, 0, 4, 1, 2};
  auto probs_p = T64::zeros({4, 5});
  auto labels_p = T64::zeros({4, 5});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t k = 0; k < 5; ++k) {
      probs_p.value()[i * 5 + k] = probs.value()[i * 5 + perm[k]];
      labels_p.value()[i * 5 + k] = labels.value()[i * 5 + perm[k]];
    }
  CHECK(bce_loss(probs_p, labels_p).item() == doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS_AS(bce_loss(probs, T64::zeros({4, 4})), ShapeError);
}

TEST_CASE("binary_kl: identity, hand value, non-negativity") {
  CHECK(binary_kl(0.37, 0.37) == 0.0);
  double v = binary_kl(0.8, 0.5);
  CHECK(v == doctest::Approx(0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5)).epsilon(1e-12));
  CHECK(v == doctest::Approx(0.19274).epsilon(1e-4));

  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    double kl = binary_kl(rng.u01(), rng.u01());
    CHECK(kl >= 0.0);
  }
}

TEST_CASE("mld: identity, scalar case equals binary_kl, batch averaging") {
  Rng rng(11);
  auto p = random_tensor({3, 4}, rng, 0.05, 0.95);
  CHECK(mld_loss(p, p).item() == 0.0);

  auto t1 = T64::from({1, 1}, {0.8});
  auto s1 = T64::from({1, 1}, {0.5});
  CHECK(mld_loss(t1, s1).item() == doctest::Approx(0.1927448).epsilon(1e-6));

  auto t2 = T64::from({2, 1}, {0.8, 0.8});
  auto s2 = T64::from({2, 1}, {0.5, 0.5});
  CHECK(mld_loss(t2, s2).item() == doctest::Approx(mld_loss(t1, s1).item()).epsilon(1e-12));
}

TEST_CASE("huber: zero, quadratic and linear branches") {
  CHECK(huber(1.7, 1.7) == 0.0);
  CHECK(huber(0.5, 0.0) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(huber(3.0, 1.0) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("masked pair distance: mask cases, hand values, symmetry") {
  std::vector<double> a = {1, 0}, b = {0, 1};
  CHECK(masked_pair_distance(a, b, true, false) == 0.0);
  CHECK(masked_pair_distance(a, b, false, true) == 0.0);
  CHECK(masked_pair_distance(a, b, true, true) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(masked_pair_distance(a, a, true, true) == 0.0);

  std::vector<double> e1 = {3, 4}, e2 = {0, 0};
  CHECK(masked_pair_distance(e1, e2, true, true) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(masked_pair_distance(e1, e2, true, true) ==
        masked_pair_distance(e2, e1, true, true));
}

TEST_CASE("cd_loss: identity, two-instance hand case, no-pair batch") {
  Rng rng(13);
  auto embs = random_tensor({3, 2, 4}, rng);
  auto y = random_labels(3, 2, rng);
  CHECK(cd_loss(embs, embs, y).item() == 0.0);

  // q=1, b=2, both positive, teacher distance 1, student distance 0.5
  auto et = T64::from({2, 1, 2}, {0, 0, 1, 0});
  auto es = T64::from({2, 1, 2}, {0, 0, 0.5, 0});
  auto ones = T64::from({2, 1}, {1, 1});
  CHECK(cd_loss(et, es, ones).item() == doctest::Approx(0.25).epsilon(1e-12));

  // no class has two positive instances -> everything masked
  auto y_disjoint = T64::from({2, 2}, {1, 0, 0, 1});
  auto a = random_tensor({2, 2, 4}, rng);
  auto b = random_tensor({2, 2, 4}, rng);
  CHECK(cd_loss(a, b, y_disjoint).item() == 0.0);
}

TEST_CASE("id_loss: identity, single-positive instance, matched structure") {
  Rng rng(17);
  auto embs = random_tensor({2, 3, 4}, rng);
  auto y = random_labels(2, 3, rng);
  CHECK(id_loss(embs, embs, y).item() == 0.0);

  // an instance with exactly one positive label contributes nothing
  auto y_single = T64::from({1, 3}, {0, 1, 0});
  auto a = random_tensor({1, 3, 4}, rng);
  auto b = random_tensor({1, 3, 4}, rng);
  CHECK(id_loss(a, b, y_single).item() == 0.0);

  // equal pair distances (2.0) even though embeddings differ
  auto et = T64::from({1, 2, 2}, {0, 0, 2, 0});
  auto es = T64::from({1, 2, 2}, {1, 1, 1, 1 + 2});
  auto y2 = T64::from({1, 2}, {1, 1});
  CHECK(id_loss(et, es, y2).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("l2d_loss: degenerate weights, defaults, student equals teacher") {
  Rng rng(19);
  auto y = random_labels(3, 4, rng);
  auto probs_t = random_tensor({3, 4}, rng, 0.05, 0.95);
  auto probs_s = random_tensor({3, 4}, rng, 0.05, 0.95);
  auto embs_t = random_tensor({3, 4, 5}, rng);
  auto embs_s = random_tensor({3, 4, 5}, rng);

  DistillConfig zero;
  zero.lambda_mld = zero.lambda_cd = zero.lambda_id = 0;
  auto bd0 = l2d_loss(probs_s, y, probs_t, embs_t, embs_s, zero);
  CHECK(bd0.total.item() == bce_loss(probs_s, y).item());

  DistillConfig defaults;  // 10 / 100 / 1000
  CHECK(defaults.lambda_mld == 10.0);
  CHECK(defaults.lambda_cd == 100.0);
  CHECK(defaults.lambda_id == 1000.0);
  auto bd = l2d_loss(probs_s, y, probs_t, embs_t, embs_s, defaults);
  CHECK(bd.total.item() >= bd.bce);
  CHECK(bd.mld > 0.0);

  // student identical to teacher: all distillation terms vanish
  auto bd_same = l2d_loss(probs_t, y, probs_t, embs_t, embs_t, defaults);
  CHECK(bd_same.mld == 0.0);
  CHECK(bd_same.cd == 0.0);
  CHECK(bd_same.id == 0.0);
  CHECK(bd_same.total.item() == doctest::Approx(bce_loss(probs_t, y).item()).epsilon(1e-12));
}

TEST_CASE("mse baseline: identity, hand value, permutation symmetry") {
  auto a = T64::from({1, 2}, {1, -1});
  CHECK(mse_baseline(a, a).item() == 0.0);
  auto zero = T64::zeros({1, 2});
  CHECK(mse_baseline(a, zero).item() == doctest::Approx(1.0).epsilon(1e-12));
  auto a_swapped = T64::from({1, 2}, {-1, 1});
  auto z2 = T64::zeros({1, 2});
  CHECK(mse_baseline(a_swapped, z2).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ps baseline: identity, hand-derived value, shift invariance, degenerate skip") {
  auto y = T64::from({1, 3}, {1, 0, 0});
  auto zt = T64::from({1, 3}, {std::log(2.0), 0, 0});
  auto zs = T64::zeros({1, 3});
  CHECK(ps_baseline(zt, zt, y, 1.0).item() == doctest::Approx(0.0).epsilon(1e-12));

  // oracle: KL([0.5,0.25,0.25] || [1/3,1/3,1/3]) = 0.5 ln 1.5 + 2*0.25 ln 0.75
  double oracle = 0.5 * std::log(1.5) + 2 * 0.25 * std::log(0.75);
  CHECK(oracle == doctest::Approx(0.0588915178).epsilon(1e-8));
  CHECK(ps_baseline(zt, zs, y, 1.0).item() == doctest::Approx(oracle).epsilon(1e-9));

  // adding a constant to one model's logits changes nothing
  auto zs_shift = add(zs, T64::scalar(3.7));
  CHECK(ps_baseline(zt, zs_shift, y, 1.0).item() ==
        doctest::Approx(ps_baseline(zt, zs, y, 1.0).item()).epsilon(1e-9));
  auto zt_shift = add(zt, T64::scalar(-1.3));
  CHECK(ps_baseline(zt_shift, zs, y, 1.0).item() ==
        doctest::Approx(ps_baseline(zt, zs, y, 1.0).item()).epsilon(1e-9));

  // all labels positive: no negatives, every pair skipped
  auto y_full = T64::ones({1, 3});
  CHECK(ps_baseline(zt, zs, y_full, 1.0).item() == 0.0);

  CHECK_THROWS_AS(ps_baseline(zt, zs, y, 0.0), ConfigError);
}

TEST_CASE("ps baseline against a per-pair reference implementation") {
  Rng rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t b = 1 + rng.index(3), q = 2 + rng.index(3);
    auto zt = random_tensor({b, q}, rng);
    auto zs = random_tensor({b, q}, rng);
    auto y = random_labels(b, q, rng, 0.4);
    double temp = 0.5 + rng.u01() * 2.0;

    double expected = 0.0;
    int64_t pairs = 0;
    for (int64_t i = 0; i < b; ++i) {
      std::vector<int64_t> negs;
      for (int64_t k = 0; k < q; ++k)
        if (y.value()[i * q + k] == 0) negs.push_back(k);
      if (negs.empty()) continue;
      for (int64_t k = 0; k < q; ++k) {
        if (y.value()[i * q + k] != 1) continue;
        std::vector<int64_t> set = {k};
        set.insert(set.end(), negs.begin(), negs.end());
        auto dist = [&](const T64& z) {
          std::vector<double> p;
          double denom = 0;
          for (int64_t j : set) denom += std::exp(z.value()[i * q + j] / temp);
          for (int64_t j : set) p.push_back(std::exp(z.value()[i * q + j] / temp) / denom);
          return p;
        };
        auto pt = dist(zt), ps = dist(zs);
        for (size_t j = 0; j < set.size(); ++j) expected += pt[j] * std::log(pt[j] / ps[j]);
        ++pairs;
      }
    }
    if (pairs > 0) expected /= static_cast<double>(pairs);
    CHECK(ps_baseline(zt, zs, y, temp).item() == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("non-negativity of every loss on random inputs") {
  Rng rng(29);
  for (int rep = 0; rep < 30; ++rep) {
    int64_t b = 2 + rng.index(3), q = 2 + rng.index(4), d = 2 + rng.index(4);
    auto y = random_labels(b, q, rng);
    auto pt = random_tensor({b, q}, rng, 0.01, 0.99);
    auto ps = random_tensor({b, q}, rng, 0.01, 0.99);
    auto et = random_tensor({b, q, d}, rng);
    auto es = random_tensor({b, q, d}, rng);
    auto zt = random_tensor({b, q}, rng);
    auto zs = random_tensor({b, q}, rng);
    CHECK(bce_loss(ps, y).item() >= 0.0);
    CHECK(mld_loss(pt, ps).item() >= 0.0);
    CHECK(cd_loss(et, es, y).item() >= 0.0);
    CHECK(id_loss(et, es, y).item() >= 0.0);
    CHECK(mse_baseline(zt, zs).item() >= 0.0);
    CHECK(ps_baseline(zt, zs, y, 2.0).item() >= -1e-12);
  }
}

TEST_CASE("isometry invariance: rigid transforms preserve cd and id") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    int64_t b = 4, q = 3, d = 5;
    auto y = random_labels(b, q, rng);
    auto et = random_tensor({b, q, d}, rng);
    auto es = random_tensor({b, q, d}, rng);
    double cd0 = cd_loss(et, es, y).item();
    double id0 = id_loss(et, es, y).item();

    auto rot = testutil::random_orthogonal(d, rng);
    std::vector<double> shift(d);
    for (auto& v : shift) v = rng.uniform(-3, 3);
    auto es_t = testutil::rigid_transform(es, rot, shift);
    CHECK(cd_loss(et, es_t, y).item() == doctest::Approx(cd0).epsilon(1e-8));
    CHECK(id_loss(et, es_t, y).item() == doctest::Approx(id0).epsilon(1e-8));
  }
}

TEST_CASE("mask soundness: masked embeddings are inert") {
  Rng rng(37);
  int64_t b = 4, q = 3, d = 5;
  auto y = random_labels(b, q, rng);
  auto et = random_tensor({b, q, d}, rng);
  auto es = random_tensor({b, q, d}, rng);
  double cd0 = cd_loss(et, es, y).item();
  double id0 = id_loss(et, es, y).item();

  auto es_z = es.clone();
  auto et_z = et.clone();
  int64_t touched = 0;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t k = 0; k < q; ++k)
      if (y.value()[i * q + k] == 0.0) {
        ++touched;
        for (int64_t j = 0; j < d; ++j) {
          es_z.value()[(i * q + k) * d + j] = 1000.0 + j;
          et_z.value()[(i * q + k) * d + j] = -777.0;
        }
      }
  REQUIRE(touched > 0);
  CHECK(cd_loss(et_z, es_z, y).item() == cd0);
  CHECK(id_loss(et_z, es_z, y).item() == id0);
}

TEST_CASE("teacher detachment: no gradient reaches teacher inputs") {
  Rng rng(41);
  int64_t b = 3, q = 3, d = 4;
  auto y = random_labels(b, q, rng);
  auto probs_t = random_tensor({b, q}, rng, 0.1, 0.9).clone(true);
  auto probs_s = random_tensor({b, q}, rng, 0.1, 0.9).clone(true);
  auto embs_t = random_tensor({b, q, d}, rng).clone(true);
  auto embs_s = random_tensor({b, q, d}, rng).clone(true);
  auto logits_t = random_tensor({b, q}, rng).clone(true);
  auto logits_s = random_tensor({b, q}, rng).clone(true);

  DistillConfig cfg;
  auto bd = l2d_loss(probs_s, y, probs_t, embs_t, embs_s, cfg);
  backward(bd.total);
  for (double g : probs_t.grad()) CHECK(g == 0.0);
  for (double g : embs_t.grad()) CHECK(g == 0.0);
  bool student_touched = false;
  for (double g : probs_s.grad()) student_touched = student_touched || g != 0.0;
  CHECK(student_touched);

  backward(mse_baseline(logits_t, logits_s));
  backward(ps_baseline(logits_t, logits_s, y, 1.5));
  for (double g : logits_t.grad()) CHECK(g == 0.0);
}

TEST_CASE("gradient checks for every loss at 64-bit") {
  Rng rng(43);
  for (int rep = 0; rep < 5; ++rep) {
    int64_t b = 2 + rng.index(2), q = 2 + rng.index(3), d = 3;
    auto y = random_labels(b, q, rng);
    auto pt = random_tensor({b, q}, rng, 0.1, 0.9);
    auto ps0 = random_tensor({b, q}, rng, 0.1, 0.9);
    auto et = random_tensor({b, q, d}, rng);
    auto es0 = random_tensor({b, q, d}, rng);
    auto zt = random_tensor({b, q}, rng);
    auto zs0 = random_tensor({b, q}, rng);

    CHECK(grad_check([&](const T64& t) { return bce_loss(t, y); }, ps0, 1e-5) < 1e-4);
    CHECK(grad_check([&](const T64& t) { return mld_loss(pt, t); }, ps0, 1e-5) < 1e-4);
    CHECK(grad_check([&](const T64& t) { return cd_loss(et, t, y); }, es0, 1e-5) < 1e-4);
    CHECK(grad_check([&](const T64& t) { return id_loss(et, t, y); }, es0, 1e-5) < 1e-4);
    CHECK(grad_check([&](const T64& t) { return mse_baseline(zt, t); }, zs0, 1e-5) < 1e-4);
    CHECK(grad_check([&](const T64& t) { return ps_baseline(zt, t, y, 1.7); }, zs0, 1e-5) < 1e-4);

    DistillConfig cfg;
    CHECK(grad_check(
              [&](const T64& t) { return l2d_loss(sigmoid(t), y, pt, et, es0, cfg).total; },
              zs0, 1e-5) < 1e-4);
  }
}

TEST_CASE("cd/id invariant under batch permutation") {
  Rng rng(47);
  int64_t b = 5, q = 3, d = 4;
  auto y = random_labels(b, q, rng);
  auto et = random_tensor({b, q, d}, rng);
  auto es = random_tensor({b, q, d}, rng);
  double cd0 = cd_loss(et, es, y).item();
  double id0 = id_loss(et, es, y).item();

  std::vector<int64_t> perm(b);
  for (int64_t i = 0; i < b; ++i) perm[i] = i;
  rng.shuffle(perm);
  auto permute_batch = [&](const T64& t, int64_t inner) {
    auto out = T64::zeros(t.shape());
    for (int64_t i = 0; i < b; ++i)
      std::copy(t.value().begin() + perm[i] * inner, t.value().begin() + (perm[i] + 1) * inner,
                out.value().begin() + i * inner);
    return out;
  };
  auto yp = permute_batch(y, q);
  auto etp = permute_batch(et, q * d);
  auto esp = permute_batch(es, q * d);
  CHECK(cd_loss(etp, esp, yp).item() == doctest::Approx(cd0).epsilon(1e-10));
  CHECK(id_loss(etp, esp, yp).item() == doctest::Approx(id0).epsilon(1e-10));
}

TEST_CASE("normalize_pairs and l2_normalize flags change scale, not zero point") {
  Rng rng(53);
  int64_t b = 4, q = 3, d = 4;
  auto y = random_labels(b, q, rng);
  auto et = random_tensor({b, q, d}, rng);
  auto es = random_tensor({b, q, d}, rng);
  double plain = cd_loss(et, es, y, false, false).item();
  double normed = cd_loss(et, es, y, true, false).item();
  CHECK(normed <= plain);
  CHECK(cd_loss(et, et, y, true, true).item() == 0.0);
  CHECK(id_loss(et, et, y, true, true).item() == 0.0);
}

TEST_CASE("mean-normalized distances: scale invariance and gradients") {
  Rng rng(59);
  int64_t b = 4, q = 3, d = 4;
  auto y = random_labels(b, q, rng);
  auto et = random_tensor({b, q, d}, rng);
  auto es = random_tensor({b, q, d}, rng);

  double base_cd = cd_loss(et, es, y, true, false, true).item();
  double base_id = id_loss(et, es, y, true, false, true).item();

  // multiplying either side by any positive constant changes nothing
  for (double c : {0.1, 3.0, 42.0}) {
    auto es_scaled = es.clone();
    for (auto& v : es_scaled.value()) v *= c;
    auto et_scaled = et.clone();
    for (auto& v : et_scaled.value()) v *= c;
    CHECK(cd_loss(et, es_scaled, y, true, false, true).item() ==
          doctest::Approx(base_cd).epsilon(1e-9));
    CHECK(cd_loss(et_scaled, es, y, true, false, true).item() ==
          doctest::Approx(base_cd).epsilon(1e-9));
    CHECK(id_loss(et, es_scaled, y, true, false, true).item() ==
          doctest::Approx(base_id).epsilon(1e-9));
  }

  // identity and gradients still hold in this mode
  CHECK(cd_loss(et, et, y, true, false, true).item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(grad_check([&](const T64& t) { return cd_loss(et, t, y, true, false, true); }, es,
                   1e-5) < 1e-4);
  CHECK(grad_check([&](const T64& t) { return id_loss(et, t, y, true, false, true); }, es,
                   1e-5) < 1e-4);
}

TEST_CASE("mld strictly positive under any single perturbed coordinate") {
  auto pt = T64::from({1, 3}, {0.2, 0.5, 0.8});
  for (int64_t k = 0; k < 3; ++k) {
    auto ps = pt.clone();
    ps.value()[k] = std::min(0.999, ps.value()[k] + 0.05);
    CHECK(mld_loss(pt, ps).item() > 0.0);
  }
}
