#include <cmath>
#include <limits>

#include "doctest.h"
#include "eptq/calibration.hpp"
#include "test_support.hpp"

using namespace eptq;
using eptq::testing::random_tensor;

TEST_CASE("hmse formula and error paths") {
  const Tensor w({2}, {1.0, 2.0});
  const Tensor wq({2}, {1.0, 1.0});
  CHECK(hmse(w, w, {3.0, 5.0}) == 0.0);
  CHECK(hmse(w, wq, {3.0, 5.0}) == 5.0);
  CHECK(hmse(w, wq, {1.0, 1.0}) == 1.0);  // unweighted squared error
  CHECK_THROWS(hmse(w, Tensor({3}), {1.0, 1.0, 1.0}));
  CHECK_THROWS(hmse(w, wq, {1.0, -1.0}));
}

TEST_CASE("exactly representable weights select the zero-error threshold") {
  // Codes include the negative edge -4 so t = max|w| lies on the grid.
  const int bits = 3;
  const double t_true = 0.8;
  const double s = t_true / 4.0;
  Tensor w({1, 6}, {-4 * s, -2 * s, -s, 0.0, 2 * s, 3 * s});
  ThresholdSearchSpec spec;
  spec.metric = ThresholdMetric::MSE;
  const auto sel = select_threshold(w, nullptr, bits, spec);
  CHECK(sel.thresholds[0] == doctest::Approx(t_true).epsilon(1e-12));
  const auto wq = quantize_weights_nearest(w, {bits, sel.thresholds, {}, {}, false});
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(wq[i] == doctest::Approx(w[i]).epsilon(1e-12));
}

TEST_CASE("select_threshold returns the exhaustive grid argmin") {
  Rng rng(111);
  const Tensor w = random_tensor({2, 24}, rng);
  std::vector<double> h(w.size());
  for (auto& x : h) x = std::fabs(rng.next_gaussian()) + 0.01;

  ThresholdSearchSpec spec;
  for (ThresholdMetric metric : {ThresholdMetric::MSE, ThresholdMetric::HMSE}) {
    spec.metric = metric;
    const std::vector<double>* hp = metric == ThresholdMetric::HMSE ? &h : nullptr;
    const auto sel = select_threshold(w, hp, 3, spec);

    // Independent exhaustive evaluation of the same objective.
    const std::size_t per = w.size() / 2;
    for (std::size_t c = 0; c < 2; ++c) {
      double amax = 0.0;
      for (std::size_t i = 0; i < per; ++i) amax = std::max(amax, std::fabs(w[c * per + i]));
      double best = std::numeric_limits<double>::infinity();
      double best_t = 0.0;
      for (int j = 0; j < spec.n_steps; ++j) {
        const double t = spec.alpha(j) * amax;
        const double step = t / 4.0;
        double err = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
          double q = round_half_away(w[c * per + i] / step);
          q = std::min(std::max(q, -4.0), 3.0);
          const double d = w[c * per + i] - q * step;
          err += (hp ? (*hp)[c * per + i] : 1.0) * d * d;
        }
        if (err < best) {
          best = err;
          best_t = t;
        }
      }
      CHECK(sel.thresholds[c] == doctest::Approx(best_t).epsilon(1e-12));
    }
  }
}

TEST_CASE("hmse protects a sensitive outlier where plain mse clips it") {
  // Bulk of small weights plus one large element carrying a huge Hessian
  // entry: the MSE threshold shrinks to fit the bulk, the HMSE threshold
  // keeps the outlier representable.
  Rng rng(112);
  Tensor w({1, 512});
  for (std::size_t i = 0; i < 511; ++i) w[i] = rng.next_gaussian() * 0.05;
  w[511] = 1.0;
  std::vector<double> h(512, 1.0);
  h[511] = 5000.0;

  ThresholdSearchSpec spec;
  spec.metric = ThresholdMetric::MSE;
  const auto t_mse = select_threshold(w, nullptr, 3, spec);
  spec.metric = ThresholdMetric::HMSE;
  const auto t_hmse = select_threshold(w, &h, 3, spec);

  CHECK(t_hmse.thresholds[0] > t_mse.thresholds[0]);

  auto outlier_error = [&](double t) {
    const Tensor wq = quantize_weights_nearest(w, {3, {t}, {}, {}, false});
    return std::fabs(w[511] - wq[511]);
  };
  CHECK(outlier_error(t_hmse.thresholds[0]) < outlier_error(t_mse.thresholds[0]));

  // HMSE dominance at the optimum, by construction of the argmin.
  auto hmse_at = [&](double t) {
    const Tensor wq = quantize_weights_nearest(w, {3, {t}, {}, {}, false});
    return hmse(w, wq, h);
  };
  CHECK(hmse_at(t_hmse.thresholds[0]) <= hmse_at(t_mse.thresholds[0]));
}

TEST_CASE("threshold argmin is invariant to positive scaling of h") {
  Rng rng(113);
  const Tensor w = random_tensor({3, 16}, rng);
  std::vector<double> h(w.size());
  for (auto& x : h) x = std::fabs(rng.next_gaussian()) + 0.1;
  std::vector<double> h_scaled(h);
  for (auto& x : h_scaled) x *= 137.0;

  ThresholdSearchSpec spec;
  const auto a = select_threshold(w, &h, 4, spec);
  const auto b = select_threshold(w, &h_scaled, 4, spec);
  CHECK(a.thresholds == b.thresholds);
}

TEST_CASE("threshold selection is scale equivariant in w") {
  Rng rng(114);
  const Tensor w = random_tensor({2, 12}, rng);
  Tensor w_scaled(w.shape());
  const double k = 3.7;
  for (std::size_t i = 0; i < w.size(); ++i) w_scaled[i] = k * w[i];

  ThresholdSearchSpec spec;
  spec.metric = ThresholdMetric::MSE;
  const auto a = select_threshold(w, nullptr, 3, spec);
  const auto b = select_threshold(w_scaled, nullptr, 3, spec);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(b.thresholds[c] == doctest::Approx(k * a.thresholds[c]).epsilon(1e-12));
  }
}

TEST_CASE("all-zero channels get a flagged fallback threshold") {
  Tensor w({2, 4}, {0, 0, 0, 0, 0.5, -0.2, 0.1, 0.3});
  ThresholdSearchSpec spec;
  spec.metric = ThresholdMetric::MSE;
  const auto sel = select_threshold(w, nullptr, 4, spec);
  CHECK(sel.degenerate_channels == std::vector<int>{0});
  CHECK(sel.thresholds[0] > 0.0);
  CHECK(sel.thresholds[1] > 0.0);
}

TEST_CASE("activation range search recovers an exact grid") {
  // z uniformly on a 4-level grid over [0, 1]: zero error at alpha = 1.
  const int bits = 2;
  Tensor z({8}, {0.0, 1.0 / 3, 2.0 / 3, 1.0, 0.0, 1.0, 1.0 / 3, 2.0 / 3});
  const auto sel = select_activation_range({z}, bits, 96);
  CHECK(!sel.degenerate);
  CHECK(sel.params.lo == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(sel.params.hi == doctest::Approx(1.0).epsilon(1e-12));
  const Tensor q = quantize_activation(z, sel.params);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(q[i] == doctest::Approx(z[i]).epsilon(1e-12));
}

TEST_CASE("an extreme outlier pulls the activation range inward") {
  Rng rng(115);
  Tensor z({65});
  for (std::size_t i = 0; i < 64; ++i) z[i] = rng.next_gaussian() * 0.2;
  z[64] = 40.0;
  const auto sel = select_activation_range({z}, 4, 96);
  CHECK(sel.params.hi < 40.0);

  // Exhaustive check that the selected range is the grid argmin.
  double lo = z[0], hi = z[0];
  for (std::size_t i = 0; i < z.size(); ++i) {
    lo = std::min(lo, z[i]);
    hi = std::max(hi, z[i]);
  }
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  double best = std::numeric_limits<double>::infinity();
  double best_lo = lo, best_hi = hi;
  for (int j = 0; j < 96; ++j) {
    const double alpha = 1.0 - j / 128.0;
    ActQuantParams p{4, mid - alpha * half, mid + alpha * half};
    const Tensor q = quantize_activation(z, p);
    double err = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) err += (z[i] - q[i]) * (z[i] - q[i]);
    if (err < best) {
      best = err;
      best_lo = p.lo;
      best_hi = p.hi;
    }
  }
  CHECK(sel.params.lo == doctest::Approx(best_lo).epsilon(1e-12));
  CHECK(sel.params.hi == doctest::Approx(best_hi).epsilon(1e-12));
}

TEST_CASE("constant activations fall back to a flagged epsilon range") {
  const auto sel = select_activation_range({Tensor({4})}, 8, 96);
  CHECK(sel.degenerate);
  CHECK(sel.params.lo < sel.params.hi);
  const Tensor q = quantize_activation(Tensor({4}), sel.params);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(q[i]) < 1e-5);
}
