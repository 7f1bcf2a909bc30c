#include "grucnn/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <unsupported/Eigen/NonLinearOptimization>

namespace grucnn {

// ---------------------------------------------------------------------------
// PredictionTable

PredictionTable PredictionTable::zeros(std::size_t items, std::size_t reps, std::size_t frames,
                                       std::size_t classes) {
  PredictionTable t;
  t.items = items;
  t.reps = reps;
  t.frames = frames;
  t.classes = classes;
  t.probs.assign(items * reps * frames * classes, 0.0);
  t.labels.assign(items, 0);
  t.snr.assign(items, SnrLevel(1.0));
  return t;
}

std::vector<SnrLevel> PredictionTable::snr_levels() const {
  std::vector<SnrLevel> out;
  for (const auto& s : snr) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](SnrLevel x, SnrLevel y) { return x.value() > y.value(); });
  return out;
}

void PredictionTable::validate(double tolerance) const {
  if (items == 0 || reps == 0 || frames == 0 || classes == 0) {
    throw std::invalid_argument("prediction table is empty");
  }
  if (probs.size() != items * reps * frames * classes) {
    throw std::invalid_argument("prediction table holds " + std::to_string(probs.size()) + " values, expected " +
                                std::to_string(items * reps * frames * classes));
  }
  if (labels.size() != items || snr.size() != items) {
    throw std::invalid_argument("prediction table needs one label and one SNR per item");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) throw std::invalid_argument("label out of range");
  }
  for (std::size_t r = 0; r < items * reps * frames; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = probs[r * classes + k];
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("probability outside [0, 1] in row " + std::to_string(r));
      s += p;
    }
    if (std::abs(s - 1.0) > tolerance) {
      throw std::invalid_argument("probability row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}

PredictionTable filter_snr(const PredictionTable& table, SnrLevel snr) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < table.items; ++i) {
    if (table.snr[i] == snr) keep.push_back(i);
  }
  PredictionTable out = PredictionTable::zeros(keep.size(), table.reps, table.frames, table.classes);
  out.model = table.model;
  out.seed = table.seed;
  const std::size_t block = table.reps * table.frames * table.classes;
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const auto i = keep[j];
    std::copy_n(table.probs.begin() + static_cast<std::ptrdiff_t>(i * block), block,
                out.probs.begin() + static_cast<std::ptrdiff_t>(j * block));
    out.labels[j] = table.labels[i];
    out.snr[j] = table.snr[i];
  }
  return out;
}

void write_prediction_csv(const std::filesystem::path& path, const PredictionTable& table, int precision_bits) {
  if (precision_bits != 32 && precision_bits != 64) throw std::invalid_argument("precision must be 32 or 64");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  std::string line = "item,rep,frame,label,snr";
  for (std::size_t k = 0; k < table.classes; ++k) line += ",p" + std::to_string(k);
  os << line << '\n';
  std::vector<std::string> snr_labels;
  for (const auto& s : table.snr) snr_labels.push_back(s.label());
  std::string buf;
  buf.reserve(1 << 20);
  char num[64];
  auto put_uint = [&](std::size_t v) {
    auto r = std::to_chars(num, num + sizeof(num), v);
    buf.append(num, r.ptr);
  };
  for (std::size_t i = 0; i < table.items; ++i) {
    for (std::size_t r = 0; r < table.reps; ++r) {
      for (std::size_t t = 0; t < table.frames; ++t) {
        put_uint(i);
        buf += ',';
        put_uint(r);
        buf += ',';
        put_uint(t);
        buf += ',';
        put_uint(static_cast<std::size_t>(table.labels[i]));
        buf += ',';
        buf += snr_labels[i];
        for (double p : table.row(i, r, t)) {
          buf += ',';
          auto res = precision_bits == 32 ? std::to_chars(num, num + sizeof(num), static_cast<float>(p))
                                          : std::to_chars(num, num + sizeof(num), p);
          buf.append(num, res.ptr);
        }
        buf += '\n';
      }
      if (buf.size() > (1u << 20) - 4096) {
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        buf.clear();
      }
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

PredictionTable read_prediction_csv(const std::filesystem::path& path, int precision_bits) {
  if (precision_bits != 32 && precision_bits != 64) throw std::invalid_argument("precision must be 32 or 64");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const char* p = text.data();
  const char* end = p + text.size();
  const char* eol = std::find(p, end, '\n');
  const std::string header(p, eol);
  if (header.rfind("item,rep,frame,label,snr,p0", 0) != 0) throw DataFormatError("bad prediction table header", 0);
  const std::size_t classes = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) - 4;

  struct Row {
    std::size_t item, rep, frame;
    int label;
    std::string snr;
  };
  std::vector<Row> rows;
  std::vector<double> values;
  p = eol == end ? end : eol + 1;
  auto fail = [&](const char* what, const char* at) {
    throw DataFormatError(std::string("prediction table: ") + what, static_cast<std::uint64_t>(at - text.data()));
  };
  while (p < end) {
    if (*p == '\n') {
      ++p;
      continue;
    }
    Row row{};
    auto read_uint = [&](std::size_t& v) {
      auto r = std::from_chars(p, end, v);
      if (r.ec != std::errc() || r.ptr == end || *r.ptr != ',') fail("malformed integer field", p);
      p = r.ptr + 1;
    };
    read_uint(row.item);
    read_uint(row.rep);
    read_uint(row.frame);
    std::size_t label = 0;
    read_uint(label);
    row.label = static_cast<int>(label);
    const char* comma = std::find(p, end, ',');
    if (comma == end) fail("missing snr field", p);
    row.snr.assign(p, comma);
    p = comma + 1;
    for (std::size_t k = 0; k < classes; ++k) {
      double v = 0;
      std::from_chars_result r;
      if (precision_bits == 32) {
        float f = 0;
        r = std::from_chars(p, end, f);
        v = f;
      } else {
        r = std::from_chars(p, end, v);
      }
      if (r.ec != std::errc()) fail("malformed probability", p);
      const char expected = k + 1 == classes ? '\n' : ',';
      if (r.ptr != end && *r.ptr != expected) fail("unexpected character after probability", r.ptr);
      p = r.ptr == end ? end : r.ptr + 1;
      values.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataFormatError("prediction table has no rows", static_cast<std::uint64_t>(header.size()));

  std::size_t items = 0, reps = 0, frames = 0;
  for (const auto& r : rows) {
    items = std::max(items, r.item + 1);
    reps = std::max(reps, r.rep + 1);
    frames = std::max(frames, r.frame + 1);
  }
  if (items * reps * frames != rows.size()) {
    throw DataFormatError("prediction table is not a complete items x reps x frames grid", 0);
  }
  PredictionTable t = PredictionTable::zeros(items, reps, frames, classes);
  std::vector<bool> seen(rows.size(), false);
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const auto& r = rows[n];
    const std::size_t slot = (r.item * reps + r.rep) * frames + r.frame;
    if (seen[slot]) throw DataFormatError("duplicate prediction row", 0);
    seen[slot] = true;
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(n * classes), classes,
                t.probs.begin() + static_cast<std::ptrdiff_t>(slot * classes));
    t.labels[r.item] = r.label;
    t.snr[r.item] = SnrLevel::parse(r.snr);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Bayes

namespace {

void check_prob_vector(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument(std::string(what) + " has a negative or non-finite entry");
  }
}

// Normalizes log-weights in place; false when every weight is zero.
bool normalize_log(std::vector<double>& lw) {
  const double m = *std::max_element(lw.begin(), lw.end());
  if (m == -std::numeric_limits<double>::infinity()) return false;
  double s = 0;
  for (double v : lw) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : lw) v -= lse;
  return true;
}

}  // namespace

BayesUpdate bayes_update(std::span<const double> prior, std::span<const double> likelihood) {
  if (prior.size() != likelihood.size() || prior.empty()) {
    throw std::invalid_argument("prior and likelihood must have the same nonzero length");
  }
  check_prob_vector(prior, "prior");
  check_prob_vector(likelihood, "likelihood");
  std::vector<double> lw(prior.size());
  for (std::size_t k = 0; k < lw.size(); ++k) lw[k] = std::log(prior[k]) + std::log(likelihood[k]);
  BayesUpdate out;
  if (!normalize_log(lw)) {
    out.posterior.assign(prior.begin(), prior.end());
    out.degenerate = true;
    return out;
  }
  out.posterior.resize(lw.size());
  std::transform(lw.begin(), lw.end(), out.posterior.begin(), [](double v) { return std::exp(v); });
  return out;
}

std::vector<double> bayes_over_frames(std::span<const double> frame_probs, std::size_t classes) {
  if (classes == 0 || frame_probs.size() % classes != 0) {
    throw std::invalid_argument("frame probabilities must be a whole number of rows");
  }
  check_prob_vector(frame_probs, "frame probabilities");
  const std::size_t frames = frame_probs.size() / classes;
  std::vector<double> out(frame_probs.size());
  std::vector<double> log_post(classes, -std::log(static_cast<double>(classes)));
  std::vector<double> cand(classes);
  // Under the flat prior the first posterior is the frame's own output; keep
  // it verbatim when it is already normalized.
  bool keep_first = false;
  if (frames > 0) {
    const double s0 = std::accumulate(frame_probs.begin(), frame_probs.begin() + static_cast<std::ptrdiff_t>(classes), 0.0);
    keep_first = std::abs(s0 - 1.0) <= 1e-6;
    if (keep_first) std::copy(frame_probs.begin(), frame_probs.begin() + static_cast<std::ptrdiff_t>(classes), out.begin());
  }
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < classes; ++k) cand[k] = log_post[k] + std::log(frame_probs[t * classes + k]);
    if (normalize_log(cand)) log_post = cand;
    if (t == 0 && keep_first) continue;
    for (std::size_t k = 0; k < classes; ++k) out[t * classes + k] = std::exp(log_post[k]);
  }
  return out;
}

PredictionTable bayes_folded(const PredictionTable& table) {
  PredictionTable out = table;
  const std::size_t block = table.frames * table.classes;
  for (std::size_t s = 0; s < table.items * table.reps; ++s) {
    auto folded = bayes_over_frames(std::span<const double>(table.probs.data() + s * block, block), table.classes);
    std::copy(folded.begin(), folded.end(), out.probs.begin() + static_cast<std::ptrdiff_t>(s * block));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy

std::size_t argmax(std::span<const double> row) {
  if (row.empty()) throw std::invalid_argument("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = k;
  }
  return best;
}

const std::vector<double>& AccuracyCurves::at(SnrLevel snr) const {
  for (std::size_t i = 0; i < snrs.size(); ++i) {
    if (snrs[i] == snr) return percent[i];
  }
  throw std::out_of_range("no accuracy curve for SNR " + snr.label());
}

AccuracyCurves accuracy_curves(std::span<const PredictionTable> tables, bool with_bayes) {
  if (tables.empty()) throw std::invalid_argument("accuracy_curves needs at least one table");
  const std::size_t frames = tables[0].frames;
  AccuracyCurves out;
  for (const auto& t : tables) {
    if (t.items == 0 || t.reps == 0) throw std::invalid_argument("accuracy_curves on an empty table");
    if (t.frames != frames) throw std::invalid_argument("tables disagree on the number of frames");
    for (const auto& s : t.snr_levels()) {
      if (std::find(out.snrs.begin(), out.snrs.end(), s) == out.snrs.end()) out.snrs.push_back(s);
    }
  }
  std::sort(out.snrs.begin(), out.snrs.end(), [](SnrLevel x, SnrLevel y) { return x.value() > y.value(); });
  std::vector<std::vector<std::size_t>> correct(out.snrs.size(), std::vector<std::size_t>(frames, 0));
  std::vector<std::size_t> total(out.snrs.size(), 0);
  for (const auto& t : tables) {
    const std::size_t block = frames * t.classes;
    for (std::size_t i = 0; i < t.items; ++i) {
      const auto si = static_cast<std::size_t>(std::find(out.snrs.begin(), out.snrs.end(), t.snr[i]) - out.snrs.begin());
      for (std::size_t r = 0; r < t.reps; ++r) {
        std::span<const double> seq(t.probs.data() + t.offset(i, r, 0), block);
        std::vector<double> folded;
        if (with_bayes) {
          folded = bayes_over_frames(seq, t.classes);
          seq = folded;
        }
        for (std::size_t f = 0; f < frames; ++f) {
          if (argmax(seq.subspan(f * t.classes, t.classes)) == static_cast<std::size_t>(t.labels[i])) {
            ++correct[si][f];
          }
        }
        ++total[si];
      }
    }
  }
  out.percent.resize(out.snrs.size());
  for (std::size_t s = 0; s < out.snrs.size(); ++s) {
    out.percent[s].resize(frames);
    for (std::size_t f = 0; f < frames; ++f) {
      out.percent[s][f] = 100.0 * static_cast<double>(correct[s][f]) / static_cast<double>(total[s]);
    }
  }
  return out;
}

AccuracyCurves accuracy_curves(const PredictionTable& table, bool with_bayes) {
  return accuracy_curves(std::span<const PredictionTable>(&table, 1), with_bayes);
}

AccuracyCurves difference(const AccuracyCurves& a, const AccuracyCurves& b) {
  AccuracyCurves out;
  for (std::size_t i = 0; i < a.snrs.size(); ++i) {
    const auto it = std::find(b.snrs.begin(), b.snrs.end(), a.snrs[i]);
    if (it == b.snrs.end()) continue;
    const auto& cb = b.percent[static_cast<std::size_t>(it - b.snrs.begin())];
    const auto& ca = a.percent[i];
    if (ca.size() != cb.size()) throw std::invalid_argument("curves differ in length");
    std::vector<double> d(ca.size());
    for (std::size_t f = 0; f < ca.size(); ++f) d[f] = ca[f] - cb[f];
    out.snrs.push_back(a.snrs[i]);
    out.percent.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt helpers

namespace {

bool lm_converged(int status) {
  using S = Eigen::LevenbergMarquardtSpace::Status;
  switch (status) {
    case S::RelativeReductionTooSmall:
    case S::RelativeErrorTooSmall:
    case S::RelativeErrorAndReductionTooSmall:
    case S::CosinusTooSmall:
    case S::FtolTooSmall:
    case S::XtolTooSmall:
    case S::GtolTooSmall:
      return true;
    default:
      return false;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct IntegrationFunctor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  std::span<const double> y;
  double tau_max;

  int inputs() const { return 3; }
  int values() const { return static_cast<int>(y.size()); }
  double tau(double s) const { return tau_max * sigmoid(s); }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const {
    const double a = x[0], c = x[1], tau = this->tau(x[2]);
    for (std::size_t t = 0; t < y.size(); ++t) {
      fvec[static_cast<Eigen::Index>(t)] = (c - a) * std::exp(-static_cast<double>(t) / tau) + c - y[t];
    }
    return 0;
  }
  int df(const Eigen::VectorXd& x, Eigen::MatrixXd& fjac) const {
    const double a = x[0], c = x[1], tau = this->tau(x[2]);
    const double dtau_ds = tau * (1.0 - tau / tau_max);
    for (std::size_t t = 0; t < y.size(); ++t) {
      const auto i = static_cast<Eigen::Index>(t);
      const double e = std::exp(-static_cast<double>(t) / tau);
      fjac(i, 0) = -e;
      fjac(i, 1) = e + 1.0;
      fjac(i, 2) = (c - a) * e * static_cast<double>(t) / (tau * tau) * dtau_ds;
    }
    return 0;
  }
};

struct CalibrationFunctor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  std::vector<double> log_p;
  std::vector<double> log_y;

  int inputs() const { return 2; }
  int values() const { return static_cast<int>(log_p.size()); }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const {
    for (std::size_t i = 0; i < log_p.size(); ++i) {
      fvec[static_cast<Eigen::Index>(i)] = x[0] * (1.0 - std::exp(x[1] * log_p[i])) - log_y[i];
    }
    return 0;
  }
  int df(const Eigen::VectorXd& x, Eigen::MatrixXd& fjac) const {
    for (std::size_t i = 0; i < log_p.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double e = std::exp(x[1] * log_p[i]);
      fjac(r, 0) = 1.0 - e;
      fjac(r, 1) = -x[0] * e * log_p[i];
    }
    return 0;
  }
};

template <typename Functor>
int run_lm(Functor& f, Eigen::VectorXd& x, int& iterations) {
  Eigen::LevenbergMarquardt<Functor> lm(f);
  lm.parameters.maxfev = 2000;
  lm.parameters.xtol = 1e-14;
  lm.parameters.ftol = 1e-14;
  const int status = lm.minimize(x);
  iterations = static_cast<int>(lm.iter);
  return status;
}

}  // namespace

double ExpFitResult::operator()(double t) const { return (c - a) * std::exp(-t / tau) + c; }

ExpFitResult fit_integration(std::span<const double> curve) {
  if (curve.size() < 4) throw std::invalid_argument("fit_integration needs at least 4 points");
  for (double v : curve) {
    if (!std::isfinite(v)) throw std::invalid_argument("fit_integration: non-finite curve value");
  }
  const double T = static_cast<double>(curve.size());
  IntegrationFunctor f{curve, 10.0 * T};
  const double c0 = curve.back();
  const double a0 = 2.0 * c0 - curve.front();
  const double tau0 = T / 5.0;
  Eigen::VectorXd x(3);
  x << a0, c0, std::log(tau0 / (f.tau_max - tau0));

  ExpFitResult res;
  const int status = run_lm(f, x, res.iterations);
  res.a = x[0];
  res.c = x[1];
  res.tau = f.tau(x[2]);
  res.amplitude = res.a - res.c;
  Eigen::VectorXd r(curve.size());
  f(x, r);
  res.residual_norm = r.norm();
  res.converged = lm_converged(status) && res.tau > 0;
  return res;
}

// ---------------------------------------------------------------------------
// False rejection

namespace {

void check_frame(const PredictionTable& table, std::size_t frame) {
  if (frame >= table.frames) {
    throw std::out_of_range("frame " + std::to_string(frame) + " outside table of " + std::to_string(table.frames));
  }
}

}  // namespace

double false_rejection_rate(const PredictionTable& table, std::size_t frame, double percentile) {
  check_frame(table, frame);
  if (!(percentile > 0.0 && percentile <= 100.0)) throw std::invalid_argument("percentile must be in (0, 100]");
  const std::size_t n = table.items * table.reps * table.classes;
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * percentile / 100.0 + 1e-9));
  if (k == 0) {
    throw std::invalid_argument("pool of " + std::to_string(n) + " predictions is too small for the " +
                                std::to_string(percentile) + "th percentile");
  }
  std::vector<std::pair<double, std::size_t>> pool;
  pool.reserve(n);
  for (std::size_t i = 0; i < table.items; ++i) {
    for (std::size_t r = 0; r < table.reps; ++r) {
      const auto row = table.row(i, r, frame);
      for (std::size_t c = 0; c < table.classes; ++c) pool.emplace_back(row[c], pool.size());
    }
  }
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k - 1), pool.end());
  std::size_t hits = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t idx = pool[j].second;
    const std::size_t item = idx / (table.reps * table.classes);
    if (idx % table.classes == static_cast<std::size_t>(table.labels[item])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

RejectionRates false_rejection_rates(const PredictionTable& table, double percentile) {
  RejectionRates out;
  out.snrs = table.snr_levels();
  for (const auto& s : out.snrs) {
    const auto sub = filter_snr(table, s);
    std::vector<double> rates(table.frames);
    for (std::size_t f = 0; f < table.frames; ++f) rates[f] = false_rejection_rate(sub, f, percentile);
    out.rate.push_back(std::move(rates));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reliability and calibration

std::vector<ReliabilityBin> reliability_bins(const PredictionTable& table, std::size_t frame, std::size_t n_bins) {
  check_frame(table, frame);
  if (n_bins == 0) throw std::invalid_argument("n_bins must be positive");
  const std::size_t n = table.items * table.reps * table.classes;
  if (n < n_bins) {
    throw std::invalid_argument("reliability_bins needs at least " + std::to_string(n_bins) + " predictions, got " +
                                std::to_string(n));
  }
  std::vector<std::pair<double, bool>> pool;
  pool.reserve(n);
  for (std::size_t i = 0; i < table.items; ++i) {
    for (std::size_t r = 0; r < table.reps; ++r) {
      const auto row = table.row(i, r, frame);
      for (std::size_t c = 0; c < table.classes; ++c) {
        pool.emplace_back(row[c], c == static_cast<std::size_t>(table.labels[i]));
      }
    }
  }
  std::stable_sort(pool.begin(), pool.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  std::vector<ReliabilityBin> bins(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    const std::size_t lo = b * n / n_bins, hi = (b + 1) * n / n_bins;
    auto& bin = bins[b];
    bin.lo_percentile = 100.0 * static_cast<double>(b) / static_cast<double>(n_bins);
    bin.hi_percentile = 100.0 * static_cast<double>(b + 1) / static_cast<double>(n_bins);
    bin.count = hi - lo;
    double s = 0;
    for (std::size_t j = lo; j < hi; ++j) {
      s += pool[j].first;
      bin.positives += pool[j].second ? 1 : 0;
    }
    bin.mean_prob = s / static_cast<double>(bin.count);
    bin.fraction_positive = static_cast<double>(bin.positives) / static_cast<double>(bin.count);
  }
  return bins;
}

double CalibrationFit::operator()(double p) const { return std::exp(a * (1.0 - std::pow(p, c))); }

CalibrationFit fit_calibration(std::span<const ReliabilityBin> bins) {
  CalibrationFunctor f;
  for (const auto& b : bins) {
    if (b.count == 0 || !(b.mean_prob > 0.0)) continue;
    const double frac = b.positives > 0 ? b.fraction_positive : 0.5 / static_cast<double>(b.count);
    f.log_p.push_back(std::log(b.mean_prob));
    f.log_y.push_back(std::log(frac));
  }
  auto distinct = f.log_p;
  std::sort(distinct.begin(), distinct.end());
  const auto n_distinct = static_cast<std::size_t>(std::unique(distinct.begin(), distinct.end()) - distinct.begin());
  if (n_distinct < 3) {
    throw std::invalid_argument("fit_calibration needs at least 3 bins with distinct mean probability, got " +
                                std::to_string(n_distinct));
  }
  Eigen::VectorXd x(2);
  x << *std::min_element(f.log_y.begin(), f.log_y.end()), 1.0;
  int iterations = 0;
  const int status = run_lm(f, x, iterations);

  CalibrationFit fit;
  fit.a = x[0];
  fit.c = x[1];
  fit.bins_used = f.log_p.size();
  fit.converged = lm_converged(status);
  Eigen::VectorXd r(f.log_p.size());
  f(x, r);
  const double mean = std::accumulate(f.log_y.begin(), f.log_y.end(), 0.0) / static_cast<double>(f.log_y.size());
  double ss_tot = 0;
  for (double v : f.log_y) ss_tot += (v - mean) * (v - mean);
  fit.r2 = ss_tot > 0 ? 1.0 - r.squaredNorm() / ss_tot : (r.squaredNorm() == 0 ? 1.0 : 0.0);
  return fit;
}

PredictionTable calibrate(const PredictionTable& table, const CalibrationFit& fit) {
  PredictionTable out = table;
  for (std::size_t row = 0; row < table.items * table.reps * table.frames; ++row) {
    double* p = out.probs.data() + row * table.classes;
    double s = 0;
    for (std::size_t k = 0; k < table.classes; ++k) {
      p[k] = fit(p[k]);
      s += p[k];
    }
    for (std::size_t k = 0; k < table.classes; ++k) p[k] /= s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CDF

double EmpiricalCdf::fraction_below(double x) const {
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), x);
  return static_cast<double>(it - sorted.begin()) / static_cast<double>(sorted.size());
}

double EmpiricalCdf::fraction_above(double x) const {
  const auto it = std::upper_bound(sorted.begin(), sorted.end(), x);
  return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
}

std::vector<std::pair<double, double>> EmpiricalCdf::samples(std::size_t points) const {
  std::vector<std::pair<double, double>> out;
  if (sorted.empty() || points < 2) return out;
  const std::size_t n = sorted.size();
  for (std::size_t i = 0; i < points; ++i) {
    const std::size_t rank = i * (n - 1) / (points - 1);
    out.emplace_back(sorted[rank], static_cast<double>(rank + 1) / static_cast<double>(n));
  }
  return out;
}

EmpiricalCdf confidence_cdf(const PredictionTable& table, std::size_t frame, CdfSelection which) {
  check_frame(table, frame);
  EmpiricalCdf cdf;
  for (std::size_t i = 0; i < table.items; ++i) {
    for (std::size_t r = 0; r < table.reps; ++r) {
      const auto row = table.row(i, r, frame);
      for (std::size_t c = 0; c < table.classes; ++c) {
        const bool positive = c == static_cast<std::size_t>(table.labels[i]);
        if (positive == (which == CdfSelection::Positive)) cdf.sorted.push_back(row[c]);
      }
    }
  }
  if (cdf.sorted.empty()) throw std::invalid_argument("confidence_cdf: empty selection");
  std::sort(cdf.sorted.begin(), cdf.sorted.end());
  return cdf;
}

}  // namespace grucnn
