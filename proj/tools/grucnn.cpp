// Command-line driver: generate, train, eval, report (or all four via `run`).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "grucnn/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> precision;
  int jobs = 1;
  std::uint64_t stop_after = 0;
  bool quiet = false;
};

grucnn::ExperimentConfig resolve(const Flags& f) {
  auto j = f.config.empty() ? nlohmann::json::object() : [&] {
    std::ifstream is(f.config);
    if (!is) throw std::invalid_argument("cannot open config " + f.config);
    return nlohmann::json::parse(is);
  }();
  if (f.seed) j["seed"] = *f.seed;
  if (f.out) j["out"] = *f.out;
  if (f.precision) j["precision"] = *f.precision;
  return grucnn::ExperimentConfig::from_json(j);
}

int run_command(const std::string& name, const Flags& flags) {
  using namespace grucnn;
  try {
    const auto cfg = resolve(flags);
    CommandOptions opts;
    opts.jobs = flags.jobs;
    opts.stop_after_steps = flags.stop_after;
    if (!flags.quiet) opts.log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
    const bool all = name == "run";
    if (name == "generate" || all) std::cout << cmd_generate(cfg, opts).dump(2) << '\n';
    if (name == "train" || all) {
      const auto r = cmd_train(cfg, opts);
      if (!all) std::cout << r.dump(2) << '\n';
    }
    if (name == "eval" || all) cmd_eval(cfg, opts);
    if (name == "report" || all) {
      const auto report = cmd_report(cfg, opts);
      std::cout << nlohmann::json{{"report", (RunPaths{cfg.out}.report_dir() / "report.json").string()},
                                  {"gaps", report["gaps"]}}
                       .dump(2)
                << '\n';
    }
    return kExitOk;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: training diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const DataFormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDataFormat;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDataFormat;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: bad config: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent convolutional classifiers on noisy image sequences"};
  app.require_subcommand(1);
  Flags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "Experiment config (JSON); omitted keys take desk defaults");
    sub->add_option("--seed", flags.seed, "Base seed");
    sub->add_option("--out", flags.out, "Run directory");
    sub->add_option("--precision", flags.precision, "Floating point width")->check(CLI::IsMember({32, 64}));
    sub->add_option("--jobs", flags.jobs, "Concurrent (model, seed) jobs")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", flags.quiet, "No progress output");
  };
  std::string chosen;
  for (const auto& [name, help] : std::initializer_list<std::pair<const char*, const char*>>{
           {"generate", "Write or validate the dataset and print corpus statistics"},
           {"train", "Train every model and seed; resumes from existing checkpoints"},
           {"eval", "Evaluate checkpoints on the test protocol"},
           {"report", "Build report.json and CSV sidecars from prediction tables"},
           {"run", "generate, train, eval and report in sequence"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (std::string(name) == "train" || std::string(name) == "run") {
      sub->add_option("--stop-after", flags.stop_after, "Stop each run after this many steps (checkpointed)");
    }
    sub->callback([&chosen, sub] { chosen = sub->get_name(); });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return grucnn::kExitUsage;
  }
  return run_command(chosen, flags);
}
