#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grucnn/data.hpp"

namespace grucnn {

/// Per-frame class probabilities of one model on a set of test sequences.
/// Each item is one (image, SNR) pair observed `reps` times with fresh noise.
struct PredictionTable {
  std::size_t items = 0;
  std::size_t reps = 0;
  std::size_t frames = 0;
  std::size_t classes = kNumClasses;
  std::vector<double> probs;  // [items, reps, frames, classes]
  std::vector<int> labels;    // per item
  std::vector<SnrLevel> snr;  // per item
  std::string model;
  std::uint64_t seed = 0;

  static PredictionTable zeros(std::size_t items, std::size_t reps, std::size_t frames,
                               std::size_t classes = kNumClasses);

  std::size_t offset(std::size_t item, std::size_t rep, std::size_t frame) const {
    return ((item * reps + rep) * frames + frame) * classes;
  }
  std::span<const double> row(std::size_t item, std::size_t rep, std::size_t frame) const {
    return {probs.data() + offset(item, rep, frame), classes};
  }
  std::span<double> row(std::size_t item, std::size_t rep, std::size_t frame) {
    return {probs.data() + offset(item, rep, frame), classes};
  }

  /// Distinct SNRs present, highest first.
  std::vector<SnrLevel> snr_levels() const;

  /// Throws std::invalid_argument unless sizes agree, values lie in [0, 1]
  /// and every row sums to 1 within `tolerance`.
  void validate(double tolerance = 1e-5) const;
};

/// Items whose SNR equals `snr`.
PredictionTable filter_snr(const PredictionTable& table, SnrLevel snr);

/// CSV `item,rep,frame,label,snr,p0..p9`. Values are written with the
/// shortest representation that round-trips at `precision_bits` (32 or 64).
void write_prediction_csv(const std::filesystem::path& path, const PredictionTable& table,
                          int precision_bits = 64);
PredictionTable read_prediction_csv(const std::filesystem::path& path, int precision_bits = 64);

// ---------------------------------------------------------------------------
// Bayesian temporal integration

struct BayesUpdate {
  std::vector<double> posterior;
  bool degenerate = false;  // prior and likelihood share no support; posterior = prior
};

/// posterior proportional to prior * likelihood, computed in log space.
BayesUpdate bayes_update(std::span<const double> prior, std::span<const double> likelihood);

/// Sequential fold over frames of a row-major [frames, classes] block with a
/// flat prior; frame 0's posterior is its own normalized output.
std::vector<double> bayes_over_frames(std::span<const double> frame_probs, std::size_t classes);

/// Every (item, rep) sequence replaced by its per-frame posteriors.
PredictionTable bayes_folded(const PredictionTable& table);

// ---------------------------------------------------------------------------
// Accuracy

struct AccuracyCurves {
  std::vector<SnrLevel> snrs;                 // highest first
  std::vector<std::vector<double>> percent;  // [snr][frame]

  const std::vector<double>& at(SnrLevel snr) const;
};

/// Percent of (item, rep) sequences whose argmax (lowest index on ties) is the
/// true label, per SNR and frame, pooled over all given tables.
AccuracyCurves accuracy_curves(std::span<const PredictionTable> tables, bool with_bayes);
AccuracyCurves accuracy_curves(const PredictionTable& table, bool with_bayes);

/// Element-wise a - b over matching SNRs and frames.
AccuracyCurves difference(const AccuracyCurves& a, const AccuracyCurves& b);

std::size_t argmax(std::span<const double> row);

// ---------------------------------------------------------------------------
// Integration-time fit, f(t) = (c - a) exp(-t / tau) + c over t = 0..T-1

struct ExpFitResult {
  double a = 0;
  double c = 0;
  double tau = 0;
  double amplitude = 0;  // f(inf) - f(0) = a - c
  double residual_norm = 0;
  bool converged = false;
  int iterations = 0;

  double operator()(double t) const;
};

/// Levenberg-Marquardt from c = last value, a = 2c - first value, tau = T/5,
/// with tau kept inside (0, 10T].
ExpFitResult fit_integration(std::span<const double> curve);

// ---------------------------------------------------------------------------
// False rejection

/// Pools every probability of `frame` (items x reps x classes), takes the
/// lowest `percentile` percent by value (ties resolved in pool order) and
/// returns the fraction of those entries that belong to the true label.
double false_rejection_rate(const PredictionTable& table, std::size_t frame, double percentile = 20.0);

struct RejectionRates {
  std::vector<SnrLevel> snrs;
  std::vector<std::vector<double>> rate;  // [snr][frame]
};

RejectionRates false_rejection_rates(const PredictionTable& table, double percentile = 20.0);

// ---------------------------------------------------------------------------
// Reliability and calibration

inline constexpr std::size_t kReliabilityBins = 50;

struct ReliabilityBin {
  double lo_percentile = 0;
  double hi_percentile = 0;
  double mean_prob = 0;
  double fraction_positive = 0;
  std::size_t count = 0;
  std::size_t positives = 0;
};

/// Predictions of `frame` ranked and split into equal-count bins.
std::vector<ReliabilityBin> reliability_bins(const PredictionTable& table, std::size_t frame,
                                             std::size_t n_bins = kReliabilityBins);

/// log y = a (1 - p^c), least squares in the log domain.
struct CalibrationFit {
  double a = 0;
  double c = 1;
  double r2 = 0;
  std::size_t bins_used = 0;
  bool converged = false;

  double operator()(double p) const;
};

/// Bins with zero positives count as half a positive; bins with mean
/// probability 0 are skipped. Needs at least 3 usable bins with distinct
/// mean probabilities.
CalibrationFit fit_calibration(std::span<const ReliabilityBin> bins);

/// Every probability mapped through the fit, each row renormalized.
PredictionTable calibrate(const PredictionTable& table, const CalibrationFit& fit);

// ---------------------------------------------------------------------------
// Confidence CDF

enum class CdfSelection { Positive, Negative };

struct EmpiricalCdf {
  std::vector<double> sorted;

  double fraction_below(double x) const;  // P(v < x)
  double fraction_above(double x) const;  // P(v > x)
  /// (value, cumulative fraction) at `points` evenly spaced ranks.
  std::vector<std::pair<double, double>> samples(std::size_t points = 101) const;
};

/// Probabilities of the true label (Positive) or of every other class
/// (Negative) at `frame`.
EmpiricalCdf confidence_cdf(const PredictionTable& table, std::size_t frame, CdfSelection which);

}  // namespace grucnn
