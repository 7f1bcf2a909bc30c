#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "analysis_fixtures.hpp"
#include "grucnn/analysis.hpp"

using namespace grucnn;
using namespace grucnn::testing;

namespace {

// Labels drawn from the predicted distribution: calibrated by construction.
PredictionTable self_consistent(std::size_t items, std::uint64_t seed, double sharpness = 3.0) {
  auto t = PredictionTable::zeros(items, 1, 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, sharpness);
  for (std::size_t i = 0; i < items; ++i) {
    auto row = t.row(i, 0, 0);
    double s = 0;
    for (auto& v : row) s += v = std::exp(n(rng));
    for (auto& v : row) v /= s;
    std::discrete_distribution<int> pick(row.begin(), row.end());
    t.labels[i] = pick(rng);
    t.snr[i] = SnrLevel(1);
  }
  return t;
}

}  // namespace

TEST(Bayes, FlatPriorGivesNormalizedLikelihood) {
  const std::vector<double> prior(4, 0.25), like{0.1, 0.2, 0.3, 0.4};
  const auto u = bayes_update(prior, like);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(u.posterior[k], like[k], 1e-15);
  EXPECT_FALSE(u.degenerate);
}

TEST(Bayes, TwoClassExample) {
  const std::vector<double> prior{0.6, 0.4}, like{0.3, 0.7};
  const auto u = bayes_update(prior, like);
  const double z = 0.6 * 0.3 + 0.4 * 0.7;
  EXPECT_NEAR(u.posterior[0], 0.18 / z, 1e-15);
  EXPECT_NEAR(u.posterior[1], 0.28 / z, 1e-15);
  EXPECT_NEAR(u.posterior[0], 0.391304347826087, 1e-12);
}

TEST(Bayes, UniformLikelihoodKeepsPrior) {
  std::mt19937_64 rng(1);
  const auto prior = random_probs(rng, 10);
  const auto u = bayes_update(prior, std::vector<double>(10, 0.1));
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(u.posterior[k], prior[k], 1e-14);
}

TEST(Bayes, DisjointSupportIsFlagged) {
  const std::vector<double> prior{1, 0, 0}, like{0, 0.5, 0.5};
  const auto u = bayes_update(prior, like);
  EXPECT_TRUE(u.degenerate);
  EXPECT_EQ(u.posterior, prior);
}

TEST(Bayes, LogSpaceMatchesNaiveFold) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t frames = 1 + trial % 10;
    std::vector<double> seq;
    for (std::size_t t = 0; t < frames; ++t) {
      auto p = random_probs(rng, 10, 0.01);
      seq.insert(seq.end(), p.begin(), p.end());
    }
    ASSERT_TRUE(std::all_of(seq.begin(), seq.end(), [](double v) { return v >= 1e-3; }));
    const auto fast = bayes_over_frames(seq, 10);
    const auto slow = naive_fold(seq, 10);
    for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-10);
  }
}

TEST(Bayes, SingleFrameIsModelOutput) {
  std::mt19937_64 rng(3);
  const auto p = random_probs(rng, 10);
  const auto out = bayes_over_frames(p, 10);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(out[k], p[k], 1e-15);
}

TEST(Bayes, UniformFramesStayUniform) {
  const std::vector<double> seq(10 * 30, 0.1);
  for (double v : bayes_over_frames(seq, 10)) EXPECT_NEAR(v, 0.1, 1e-15);
}

TEST(Bayes, ConsistentEvidenceConcentratesMonotonically) {
  std::mt19937_64 rng(4);
  std::vector<double> seq;
  for (int t = 0; t < 40; ++t) {
    auto p = random_probs(rng, 10, 0.5);
    p[3] += 0.05;
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) v /= s;
    seq.insert(seq.end(), p.begin(), p.end());
  }
  // Frame-wise ratio p3 / pk > 1 for every k, so the posterior of class 3 rises.
  const auto out = bayes_over_frames(seq, 10);
  for (std::size_t t = 1; t < 40; ++t) {
    bool favoured = true;
    for (std::size_t k = 0; k < 10; ++k) favoured = favoured && (k == 3 || seq[t * 10 + 3] > seq[t * 10 + k]);
    if (favoured) EXPECT_GT(out[t * 10 + 3], out[(t - 1) * 10 + 3]);
  }
  EXPECT_GT(out[39 * 10 + 3], 0.9);
}

TEST(Bayes, ScalingAFrameLeavesPosteriorsUnchanged) {
  std::mt19937_64 rng(5);
  std::vector<double> seq;
  for (int t = 0; t < 8; ++t) {
    auto p = random_probs(rng, 10, 0.05);
    seq.insert(seq.end(), p.begin(), p.end());
  }
  const auto base = bayes_over_frames(seq, 10);
  for (std::size_t t = 0; t < 8; ++t) {
    auto scaled = seq;
    for (std::size_t k = 0; k < 10; ++k) scaled[t * 10 + k] *= 0.37;
    // Scaled rows no longer sum to one, so fold them with the single-step update.
    std::vector<double> post(10, 0.1);
    for (std::size_t s = 0; s < 8; ++s) {
      post = bayes_update(post, std::span<const double>(scaled).subspan(s * 10, 10)).posterior;
      for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(post[k], base[s * 10 + k], 1e-12);
    }
  }
}

TEST(Bayes, FoldedTableFrameZeroEqualsRaw) {
  const auto t = noisy_stateless(200, 5, 1.5, 6);
  const auto folded = bayes_folded(t);
  for (std::size_t i = 0; i < t.items; ++i)
    for (std::size_t k = 0; k < kNumClasses; ++k) EXPECT_NEAR(folded.row(i, 0, 0)[k], t.row(i, 0, 0)[k], 1e-15);
  const auto raw = accuracy_curves(t, false);
  const auto bayes = accuracy_curves(t, true);
  EXPECT_EQ(raw.percent[0][0], bayes.percent[0][0]);
}

TEST(Bayes, FoldingImprovesStatelessClassifier) {
  const auto t = noisy_stateless(2000, 10, 2.2, 7);
  const auto raw = accuracy_curves(t, false).percent[0];
  const auto bayes = accuracy_curves(t, true).percent[0];
  EXPECT_GE(raw.back(), 60.0);
  EXPECT_LE(raw.back(), 90.0);
  EXPECT_GE(bayes.back() - raw.back(), 2.0);
}

TEST(Accuracy, PerfectModelIsHundredPercent) {
  const auto c = accuracy_curves(perfect_table(30, 2, 4), true);
  for (double v : c.percent[0]) EXPECT_EQ(v, 100.0);
}

TEST(Accuracy, UniformTiesGoToIndexZero) {
  auto t = PredictionTable::zeros(100, 1, 3);
  std::fill(t.probs.begin(), t.probs.end(), 0.1);
  for (std::size_t i = 0; i < 100; ++i) {
    t.labels[i] = static_cast<int>(i % 10);
    t.snr[i] = SnrLevel(1);
  }
  const auto c = accuracy_curves(t, false);
  for (double v : c.percent[0]) EXPECT_DOUBLE_EQ(v, 10.0);
  const std::vector<double> row{0.3, 0.3, 0.4, 0.4};
  EXPECT_EQ(argmax(row), 2u);
}

TEST(Accuracy, SplitsBySnrHighestFirst) {
  auto t = perfect_table(20, 1, 2);
  for (std::size_t i = 10; i < 20; ++i) {
    t.snr[i] = SnrLevel(0.25);
    std::fill(t.row(i, 0, 0).begin(), t.row(i, 0, 0).end(), 0.1);
    std::fill(t.row(i, 0, 1).begin(), t.row(i, 0, 1).end(), 0.1);
  }
  const auto c = accuracy_curves(t, false);
  ASSERT_EQ(c.snrs.size(), 2u);
  EXPECT_GT(c.snrs[0].value(), c.snrs[1].value());
  EXPECT_EQ(c.at(SnrLevel(64))[0], 100.0);
  EXPECT_EQ(c.at(SnrLevel(0.25))[0], 10.0);
  const auto d = difference(c, c);
  for (const auto& row : d.percent)
    for (double v : row) EXPECT_EQ(v, 0.0);
}

TEST(Accuracy, EmptyTableRejected) {
  PredictionTable t;
  EXPECT_THROW(accuracy_curves(t, false), std::invalid_argument);
}

TEST(FitIntegration, NoiseFreeRecovery) {
  const double params[][3] = {{95, 80, 8}, {40, 30, 3}, {70, 60, 15}, {20, 12, 1.5}};
  for (const auto& p : params) {
    std::vector<double> curve(51);
    for (std::size_t t = 0; t < curve.size(); ++t) curve[t] = exp_curve(p[0], p[1], p[2], static_cast<double>(t));
    const auto fit = fit_integration(curve);
    EXPECT_TRUE(fit.converged);
    EXPECT_NEAR(fit.a, p[0], 1e-3 * std::abs(p[0]));
    EXPECT_NEAR(fit.c, p[1], 1e-3 * std::abs(p[1]));
    EXPECT_NEAR(fit.tau, p[2], 1e-3 * p[2]);
    EXPECT_NEAR(fit.amplitude, p[0] - p[1], 1e-6 + 1e-3 * std::abs(p[0] - p[1]));
  }
}

TEST(FitIntegration, NoisyRecovery) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1e-4);
  const double params[][3] = {{95, 80, 8}, {40, 30, 3}, {70, 60, 15}};
  for (const auto& p : params) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> curve(51);
      for (std::size_t t = 0; t < curve.size(); ++t) curve[t] = exp_curve(p[0], p[1], p[2], static_cast<double>(t)) + n(rng);
      const auto fit = fit_integration(curve);
      EXPECT_NEAR(fit.a, p[0], 1e-2 * std::abs(p[0]));
      EXPECT_NEAR(fit.c, p[1], 1e-2 * std::abs(p[1]));
      EXPECT_NEAR(fit.tau, p[2], 1e-2 * p[2]);
    }
  }
}

TEST(FitIntegration, ConstantCurve) {
  const std::vector<double> curve(51, 42.0);
  const auto fit = fit_integration(curve);
  EXPECT_NEAR(fit.c, 42.0, 1e-9);
  EXPECT_NEAR(fit.amplitude, 0.0, 1e-6);
  EXPECT_NEAR(fit.residual_norm, 0.0, 1e-9);
}

TEST(FitIntegration, SaturatingCurveHasPositiveTau) {
  std::vector<double> curve(51);
  for (std::size_t t = 0; t < curve.size(); ++t) curve[t] = 50 - 30 / (1.0 + 0.3 * static_cast<double>(t));
  const auto fit = fit_integration(curve);
  EXPECT_GT(fit.tau, 0.0);
  EXPECT_LE(fit.tau, 510.0);
  EXPECT_GE(fit.c, fit(0.0));
}

TEST(Rejection, PerfectModelIsZero) {
  const auto t = perfect_table(50, 2, 3);
  for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(false_rejection_rate(t, f), 0.0);
}

TEST(Rejection, UniformRandomModelIsTenPercent) {
  const auto t = uniform_random_table(2000, 5, 9);  // 10^5 pooled predictions
  EXPECT_NEAR(false_rejection_rate(t, 0), 0.10, 0.01);
}

TEST(Rejection, MatchesEnumerationOnHandTables) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t items = 1 + trial % 3;
    auto t = PredictionTable::zeros(items, 1, 1);
    std::uniform_int_distribution<int> coarse(0, 4);  // few distinct values, many ties
    for (std::size_t i = 0; i < items; ++i) {
      t.labels[i] = static_cast<int>(rng() % 10);
      t.snr[i] = SnrLevel(1);
      for (auto& v : t.row(i, 0, 0)) v = 0.05 * coarse(rng);
    }
    for (double pct : {10.0, 20.0, 35.0, 50.0}) {
      const std::size_t n = items * 10;
      const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * pct / 100.0 + 1e-9));
      if (k == 0) continue;
      // Entry j is rejected when fewer than k entries precede it in
      // (value, pool position) order.
      std::size_t hits = 0;
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t before = 0;
        for (std::size_t m = 0; m < n; ++m)
          before += t.probs[m] < t.probs[j] || (t.probs[m] == t.probs[j] && m < j);
        if (before < k && j % 10 == static_cast<std::size_t>(t.labels[j / 10])) ++hits;
      }
      EXPECT_DOUBLE_EQ(false_rejection_rate(t, 0, pct), static_cast<double>(hits) / static_cast<double>(k));
    }
  }
}

TEST(Rejection, InvariantUnderIncreasingTransform) {
  auto t = uniform_random_table(300, 2, 11);
  const double before = false_rejection_rate(t, 0);
  for (auto& v : t.probs) v = std::pow(v, 3.0) + 0.5;
  EXPECT_EQ(false_rejection_rate(t, 0), before);
}

TEST(Rejection, PoolTooSmall) {
  const auto t = perfect_table(1, 1, 1);
  EXPECT_THROW(false_rejection_rate(t, 0, 5.0), std::invalid_argument);
}

TEST(Reliability, BinsPartitionThePool) {
  const auto t = self_consistent(1003, 12);
  const auto bins = reliability_bins(t, 0);
  ASSERT_EQ(bins.size(), 50u);
  std::size_t total = 0;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    total += bins[b].count;
    EXPECT_DOUBLE_EQ(bins[b].hi_percentile - bins[b].lo_percentile, 2.0);
    if (b > 0) EXPECT_GE(bins[b].mean_prob, bins[b - 1].mean_prob);
  }
  EXPECT_EQ(total, 10030u);
}

TEST(Reliability, ConstantPredictions) {
  auto t = PredictionTable::zeros(500, 1, 1);
  std::fill(t.probs.begin(), t.probs.end(), 0.1);
  for (std::size_t i = 0; i < 500; ++i) {
    t.labels[i] = static_cast<int>(i % 10);
    t.snr[i] = SnrLevel(1);
  }
  for (const auto& b : reliability_bins(t, 0)) {
    EXPECT_NEAR(b.mean_prob, 0.1, 1e-12);
    EXPECT_NEAR(b.fraction_positive, 0.1, 0.1);
  }
}

TEST(Reliability, SelfConsistentPassesChiSquare) {
  const auto t = self_consistent(20000, 13);
  double chi2 = 0;
  for (const auto& b : reliability_bins(t, 0)) {
    const double n = static_cast<double>(b.count);
    // Expected positives and binomial variance from the per-entry probabilities.
    const double expect = n * b.mean_prob;
    EXPECT_NEAR(b.fraction_positive, b.mean_prob, 4 * std::sqrt(b.mean_prob * (1 - b.mean_prob) / n) + 1e-3);
    if (expect > 0 && expect < n) chi2 += std::pow(static_cast<double>(b.positives) - expect, 2) / (expect * (1 - b.mean_prob));
  }
  EXPECT_LT(chi2, 76.154);  // chi-square, 50 dof, 1% level
}

TEST(Reliability, TooFewPredictions) {
  const auto t = perfect_table(4, 1, 1);
  EXPECT_THROW(reliability_bins(t, 0), std::invalid_argument);
}

TEST(Calibration, NoiseFreeRecovery) {
  for (double c : {0.3, 0.6, 1.2}) {
    const auto bins = calibration_bins(-11.6, c, log_spaced(1e-4, 1.0, 50), 10000);
    const auto fit = fit_calibration(bins);
    EXPECT_NEAR(fit.a, -11.6, 1e-3 * 11.6) << c;
    EXPECT_NEAR(fit.c, c, 1e-3 * c) << c;
    EXPECT_GT(fit.r2, 0.999);
    EXPECT_EQ(fit(1.0), 1.0);
  }
}

TEST(Calibration, BinomialNoiseRecovery) {
  // With n = 10^4 per bin a = -11.6 would leave the low bins with ~0.1
  // expected positives; a = -4 keeps every bin in the hundreds. Each draw must
  // explain the log-domain data with r^2 > 0.99; the parameter estimates,
  // whose per-draw spread is about 1%, are checked on the replicate mean.
  std::mt19937_64 rng(14);
  const std::size_t n = 10000;
  const int draws = 40;
  for (double c : {0.3, 0.6, 1.0}) {
    double mean_a = 0, mean_c = 0;
    for (int trial = 0; trial < draws; ++trial) {
      auto bins = calibration_bins(-4.0, c, log_spaced(1e-4, 1.0, 50), n);
      for (auto& b : bins) {
        std::binomial_distribution<std::size_t> draw(n, b.fraction_positive);
        b.positives = draw(rng);
        b.fraction_positive = static_cast<double>(b.positives) / static_cast<double>(n);
      }
      const auto fit = fit_calibration(bins);
      EXPECT_GT(fit.r2, 0.99);
      mean_a += fit.a / draws;
      mean_c += fit.c / draws;
    }
    EXPECT_NEAR(mean_a, -4.0, 1e-2 * 4.0) << c;
    EXPECT_NEAR(mean_c, c, 1e-2 * c) << c;
  }
}

TEST(Calibration, FittedCurveMonotone) {
  const auto fit = fit_calibration(calibration_bins(-5.0, 0.5, log_spaced(1e-3, 1.0, 20), 1000));
  double prev = 0;
  for (double p : log_spaced(1e-6, 1.0, 200)) {
    EXPECT_GE(fit(p), prev);
    prev = fit(p);
  }
}

TEST(Calibration, NeedsThreeDistinctBins) {
  auto bins = calibration_bins(-3, 1, {0.2, 0.2, 0.5}, 100);
  EXPECT_THROW(fit_calibration(bins), std::invalid_argument);
}

TEST(Calibration, CalibratedRowsSumToOne) {
  const auto t = self_consistent(500, 15);
  CalibrationFit fit;
  fit.a = -11.6;
  fit.c = 0.4;
  const auto cal = calibrate(t, fit);
  for (std::size_t i = 0; i < cal.items; ++i) {
    const auto row = cal.row(i, 0, 0);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(Calibration, NearLinearMapIsNearIdentity) {
  // c -> 0 with a*c = -1: a (1 - p^c) ~ -a c log p = log p.
  const auto t = self_consistent(200, 16, 1.0);
  CalibrationFit fit;
  fit.a = -1e6;
  fit.c = 1e-6;
  const auto cal = calibrate(t, fit);
  for (std::size_t i = 0; i < t.probs.size(); ++i) EXPECT_NEAR(cal.probs[i], t.probs[i], 1e-4);
}

TEST(Calibration, ReducesMiscalibration) {
  // Overconfident model: reported p is the calibrated q sharpened to q^0.5.
  auto truth = self_consistent(20000, 17);
  auto shown = truth;
  for (std::size_t i = 0; i < shown.items; ++i) {
    auto row = shown.row(i, 0, 0);
    double s = 0;
    for (auto& v : row) s += v = std::sqrt(v);
    for (auto& v : row) v /= s;
  }
  auto log_miscal = [](const std::vector<ReliabilityBin>& bins) {
    double e = 0;
    for (const auto& b : bins) {
      const double frac = b.positives > 0 ? b.fraction_positive : 0.5 / static_cast<double>(b.count);
      e += std::pow(std::log(frac) - std::log(b.mean_prob), 2);
    }
    return e;
  };
  const auto before = reliability_bins(shown, 0);
  const auto fit = fit_calibration(before);
  const auto after = reliability_bins(calibrate(shown, fit), 0);
  EXPECT_LT(log_miscal(after), log_miscal(before));
}

TEST(Cdf, PerfectModelSteps) {
  const auto t = perfect_table(40, 1, 1);
  const auto pos = confidence_cdf(t, 0, CdfSelection::Positive);
  const auto neg = confidence_cdf(t, 0, CdfSelection::Negative);
  EXPECT_EQ(pos.sorted.size(), 40u);
  EXPECT_EQ(neg.sorted.size(), 360u);
  EXPECT_EQ(pos.fraction_below(1.0), 0.0);
  EXPECT_EQ(neg.fraction_above(0.0), 0.0);
  EXPECT_EQ(pos.fraction_above(0.4), 1.0);
}

TEST(Cdf, MonotoneFromZeroToOne) {
  const auto cdf = confidence_cdf(self_consistent(300, 18), 0, CdfSelection::Negative);
  const auto s = cdf.samples();
  ASSERT_FALSE(s.empty());
  for (std::size_t i = 1; i < s.size(); ++i) {
    EXPECT_GE(s[i].first, s[i - 1].first);
    EXPECT_GE(s[i].second, s[i - 1].second);
  }
  EXPECT_DOUBLE_EQ(s.back().second, 1.0);
  EXPECT_GE(s.front().second, 0.0);
}

TEST(Cdf, EmptySelectionRejected) {
  auto t = PredictionTable::zeros(1, 1, 1, 1);
  t.probs[0] = 1.0;
  t.labels[0] = 0;
  t.snr[0] = SnrLevel(1);
  EXPECT_THROW(confidence_cdf(t, 0, CdfSelection::Negative), std::invalid_argument);
}

TEST(PredictionCsv, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "grucnn_test_csv";
  std::filesystem::create_directories(dir);
  auto t = noisy_stateless(20, 3, 1.0, 19);
  t.model = "ccnn";
  t.seed = 4;
  write_prediction_csv(dir / "p64.csv", t, 64);
  const auto back = read_prediction_csv(dir / "p64.csv", 64);
  EXPECT_EQ(back.probs, t.probs);
  EXPECT_EQ(back.labels, t.labels);
  EXPECT_EQ(back.items, t.items);
  EXPECT_EQ(back.frames, t.frames);
  for (std::size_t i = 0; i < t.items; ++i) EXPECT_EQ(back.snr[i].value(), t.snr[i].value());

  write_prediction_csv(dir / "p32.csv", t, 32);
  const auto back32 = read_prediction_csv(dir / "p32.csv", 32);
  for (std::size_t i = 0; i < t.probs.size(); ++i)
    EXPECT_EQ(static_cast<float>(back32.probs[i]), static_cast<float>(t.probs[i]));
  std::filesystem::remove_all(dir);
}

TEST(PredictionTable, ValidateRejectsBadRows) {
  auto t = perfect_table(3, 1, 1);
  EXPECT_NO_THROW(t.validate());
  t.probs[0] = 0.5;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}
