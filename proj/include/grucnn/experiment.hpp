#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grucnn/analysis.hpp"
#include "grucnn/data.hpp"
#include "grucnn/model.hpp"
#include "grucnn/train.hpp"

namespace grucnn {

inline constexpr const char* kCodeVersion = "0.1.0";

struct DatasetConfig {
  std::string kind = "toyset";  // "toyset" or "cifar10"
  // toyset
  std::size_t n_per_class = 200;
  std::size_t test_per_class = 30;
  std::size_t image_size = 16;
  // cifar10
  std::vector<std::string> train_files;
  std::string test_file;
  std::size_t train_limit = 0;  // 0 = all
  std::size_t test_limit = 0;

  std::size_t input_size() const { return kind == "cifar10" ? 32 : image_size; }
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// One trained architecture in the grid. `snr_set` overrides the training SNRs.
struct ModelRun {
  std::string label;
  std::string spec_name;
  std::optional<ModelSpec> inline_spec;
  std::optional<std::vector<SnrLevel>> snr_set;

  nlohmann::json to_json() const;
  static ModelRun from_json(const nlohmann::json& j);
};

struct TestProtocol {
  std::size_t frames = 51;
  std::size_t repetitions = 5;
  std::vector<SnrLevel> snrs = {SnrLevel(64), SnrLevel(4), SnrLevel(1), SnrLevel(0.25), SnrLevel(0.0625)};
  std::size_t batch_size = 64;

  nlohmann::json to_json() const;
  static TestProtocol from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<ModelRun> models;
  double width_scale = 0.25;
  TrainConfig train;
  TestProtocol test;
  std::vector<std::pair<std::string, std::string>> comparisons;  // (a, b) -> a - b
  int precision = 32;
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";

  /// Desk-scale defaults: 16x16 toyset, ccnn + grucnn, plus grucnn trained
  /// on the low SNR set.
  static ExperimentConfig desk_default();

  ModelSpec spec_for(const ModelRun& run) const;
  TrainConfig train_config_for(const ModelRun& run) const;
  /// Seed of training run `index` of every model.
  std::uint64_t run_seed(std::size_t index) const;
  std::uint64_t eval_seed() const;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys take the desk defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Train and test corpora, normalized with statistics over both.
struct Datasets {
  Corpus train;
  Corpus test;
  CorpusStats raw_stats;
};

Datasets load_datasets(const ExperimentConfig& cfg);

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path train_archive() const { return data_dir() / "train.gcts"; }
  std::filesystem::path test_archive() const { return data_dir() / "test.gcts"; }
  std::filesystem::path model_dir(const std::string& label, std::size_t seed_index) const {
    return root / "models" / label / ("seed" + std::to_string(seed_index));
  }
  std::filesystem::path checkpoint(const std::string& label, std::size_t seed_index) const {
    return model_dir(label, seed_index) / "checkpoint.bin";
  }
  std::filesystem::path train_log(const std::string& label, std::size_t seed_index) const {
    return model_dir(label, seed_index) / "train_log.csv";
  }
  std::filesystem::path predictions_dir() const { return root / "predictions"; }
  std::filesystem::path predictions(const std::string& label, std::size_t seed_index) const {
    return predictions_dir() / label / ("seed" + std::to_string(seed_index) + ".csv");
  }
  std::filesystem::path manifest() const { return predictions_dir() / "manifest.json"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

struct CommandOptions {
  int jobs = 1;
  std::uint64_t stop_after_steps = 0;  // 0 = run to completion
  std::function<void(const std::string&)> log = [](const std::string&) {};
};

/// Exit codes shared by the CLI and the bindings.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitDataFormat = 2, kExitDivergence = 3 };

/// Writes corpus archives (toyset) or validates CIFAR-10 files, plus stats.
/// Returns a summary with corpus sizes, digests and mean/std before and after
/// normalization.
nlohmann::json cmd_generate(const ExperimentConfig& cfg, const CommandOptions& opts = {});

/// Trains every (model, seed), resuming from existing checkpoints. Throws
/// DivergenceError after keeping the last good checkpoint.
nlohmann::json cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts = {});

/// Evaluates every checkpoint on the test protocol; writes prediction tables
/// and predictions/manifest.json.
nlohmann::json cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts = {});

/// Builds report/report.json and its CSV sidecars from the manifest.
nlohmann::json cmd_report(const ExperimentConfig& cfg, const CommandOptions& opts = {});

/// Evaluates one model on the test protocol (dropout off, batch norm in
/// inference mode). Items are ordered SNR-major, then by test image.
template <typename T>
PredictionTable evaluate_model(Model<T>& model, const Corpus& test, const TestProtocol& protocol,
                               std::uint64_t eval_seed);

/// The report computed from in-memory tables; `tables[label]` holds one table
/// per seed. `stateless[label]` selects Bayes folding as the primary curve.
struct ReportInput {
  std::vector<std::string> labels;
  std::vector<std::vector<PredictionTable>> tables;
  std::vector<bool> stateless;
  std::vector<std::pair<std::string, std::string>> comparisons;
  std::vector<std::string> gaps;
};

nlohmann::json build_report(const ReportInput& input, const std::filesystem::path& sidecar_dir);

/// Runs `tasks` on up to `jobs` threads; rethrows the first failure.
void run_parallel(std::vector<std::function<void()>> tasks, int jobs);

}  // namespace grucnn
