#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "grucnn/experiment.hpp"

namespace py = pybind11;
using namespace grucnn;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

PredictionTable table_from(const DoubleArray& probs, const std::vector<int>& labels, const std::vector<std::string>& snrs) {
  if (probs.ndim() != 4) throw std::invalid_argument("probs must have shape [items, reps, frames, classes]");
  auto t = PredictionTable::zeros(probs.shape(0), probs.shape(1), probs.shape(2), probs.shape(3));
  std::copy_n(probs.data(), probs.size(), t.probs.begin());
  if (labels.size() != t.items || snrs.size() != t.items) throw std::invalid_argument("need one label and SNR per item");
  t.labels = labels;
  for (std::size_t i = 0; i < snrs.size(); ++i) t.snr[i] = SnrLevel::parse(snrs[i]);
  t.validate();
  return t;
}

py::dict table_to_dict(const PredictionTable& t) {
  DoubleArray probs({t.items, t.reps, t.frames, t.classes});
  std::copy(t.probs.begin(), t.probs.end(), probs.mutable_data());
  std::vector<std::string> snrs;
  for (const auto& s : t.snr) snrs.push_back(s.label());
  py::dict d;
  d["probs"] = probs;
  d["labels"] = t.labels;
  d["snr"] = snrs;
  return d;
}

py::dict fit_dict(const ExpFitResult& f) {
  py::dict d;
  d["a"] = f.a;
  d["c"] = f.c;
  d["tau"] = f.tau;
  d["amplitude"] = f.amplitude;
  d["residual_norm"] = f.residual_norm;
  d["converged"] = f.converged;
  return d;
}

std::string run_command(const std::string& name, const std::string& config_json, int jobs,
                        std::uint64_t stop_after_steps) {
  const auto cfg = ExperimentConfig::from_json(nlohmann::json::parse(config_json));
  CommandOptions opts;
  opts.jobs = jobs;
  opts.stop_after_steps = stop_after_steps;
  nlohmann::json out;
  py::gil_scoped_release release;
  if (name == "generate") {
    out = cmd_generate(cfg, opts);
  } else if (name == "train") {
    out = cmd_train(cfg, opts);
  } else if (name == "eval") {
    out = cmd_eval(cfg, opts);
  } else if (name == "report") {
    out = cmd_report(cfg, opts);
  } else {
    throw std::invalid_argument("unknown command " + name);
  }
  return out.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Recurrent convolutional networks for noisy image sequences";
  m.attr("__version__") = kCodeVersion;

  py::register_exception<DataFormatError>(m, "DataFormatError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.def("desk_default_config", [] { return ExperimentConfig::desk_default().to_json().dump(); });
  m.def("normalize_config", [](const std::string& j) { return ExperimentConfig::from_json(nlohmann::json::parse(j)).to_json().dump(); });
  m.def("run_command", &run_command, py::arg("name"), py::arg("config_json"), py::arg("jobs") = 1,
        py::arg("stop_after_steps") = 0);

  m.def("derive_seed", &derive_seed, py::arg("base"), py::arg("a"), py::arg("b") = 0, py::arg("c") = 0);
  m.def("parse_snr", [](const std::string& s) { return SnrLevel::parse(s).value(); });
  m.def("snr_label", [](double v) { return SnrLevel(v).label(); });

  m.def(
      "synth_toyset",
      [](std::size_t n_per_class, std::size_t size, std::uint64_t seed) {
        const auto corpus = synth_toyset(n_per_class, size, seed);
        DoubleArray images({corpus.size(), std::size_t{3}, size, size});
        std::vector<int> labels;
        double* dst = images.mutable_data();
        for (const auto& img : corpus) {
          dst = std::copy(img.pixels.begin(), img.pixels.end(), dst);
          labels.push_back(img.label);
        }
        return py::make_tuple(images, labels);
      },
      py::arg("n_per_class"), py::arg("image_size"), py::arg("seed"));

  m.def(
      "make_sequence",
      [](const DoubleArray& image, std::size_t frames, double snr, std::uint64_t seed) {
        if (image.ndim() != 3) throw std::invalid_argument("image must have shape [channels, height, width]");
        LabeledImage img{static_cast<std::size_t>(image.shape(0)), static_cast<std::size_t>(image.shape(1)),
                         static_cast<std::size_t>(image.shape(2)),
                         std::vector<double>(image.data(), image.data() + image.size()), 0};
        const auto seq = make_sequence(img, frames, SnrLevel(snr), seed);
        DoubleArray pixels({frames, img.channels, img.height, img.width});
        std::copy(seq.pixels.begin(), seq.pixels.end(), pixels.mutable_data());
        return py::make_tuple(pixels, seq.offsets);
      },
      py::arg("image"), py::arg("frames"), py::arg("snr"), py::arg("seed"));

  m.def(
      "bayes_over_frames",
      [](const DoubleArray& frames) {
        if (frames.ndim() != 2) throw std::invalid_argument("frames must have shape [frames, classes]");
        const auto out = bayes_over_frames(std::span<const double>(frames.data(), frames.size()), frames.shape(1));
        DoubleArray res({frames.shape(0), frames.shape(1)});
        std::copy(out.begin(), out.end(), res.mutable_data());
        return res;
      },
      py::arg("frames"));

  m.def(
      "fit_integration",
      [](const std::vector<double>& curve) { return fit_dict(fit_integration(curve)); }, py::arg("curve"));

  m.def(
      "fit_calibration",
      [](const std::vector<double>& mean_prob, const std::vector<std::size_t>& counts,
         const std::vector<std::size_t>& positives) {
        if (mean_prob.size() != counts.size() || counts.size() != positives.size()) {
          throw std::invalid_argument("bin arrays differ in length");
        }
        std::vector<ReliabilityBin> bins(mean_prob.size());
        for (std::size_t i = 0; i < bins.size(); ++i) {
          bins[i].mean_prob = mean_prob[i];
          bins[i].count = counts[i];
          bins[i].positives = positives[i];
          bins[i].fraction_positive = counts[i] ? static_cast<double>(positives[i]) / static_cast<double>(counts[i]) : 0.0;
        }
        const auto f = fit_calibration(bins);
        py::dict d;
        d["a"] = f.a;
        d["c"] = f.c;
        d["r2"] = f.r2;
        d["bins_used"] = f.bins_used;
        d["converged"] = f.converged;
        return d;
      },
      py::arg("mean_prob"), py::arg("counts"), py::arg("positives"));

  m.def(
      "read_prediction_csv",
      [](const std::filesystem::path& path, int precision) { return table_to_dict(read_prediction_csv(path, precision)); },
      py::arg("path"), py::arg("precision") = 64);

  m.def(
      "accuracy_curves",
      [](const DoubleArray& probs, const std::vector<int>& labels, const std::vector<std::string>& snrs, bool bayes) {
        const auto c = accuracy_curves(table_from(probs, labels, snrs), bayes);
        py::dict d;
        for (std::size_t s = 0; s < c.snrs.size(); ++s) d[py::str(c.snrs[s].label())] = c.percent[s];
        return d;
      },
      py::arg("probs"), py::arg("labels"), py::arg("snr"), py::arg("bayes") = false);

  m.def(
      "false_rejection_rate",
      [](const DoubleArray& probs, const std::vector<int>& labels, const std::vector<std::string>& snrs,
         std::size_t frame, double percentile) {
        return false_rejection_rate(table_from(probs, labels, snrs), frame, percentile);
      },
      py::arg("probs"), py::arg("labels"), py::arg("snr"), py::arg("frame"), py::arg("percentile") = 20.0);
}
