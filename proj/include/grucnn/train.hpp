#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "grucnn/data.hpp"
#include "grucnn/model.hpp"

namespace grucnn {

/// Non-finite loss or gradient during training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::uint64_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

/// Checkpoint does not match the expected model or precision.
class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double lr_decay = 1e-6;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::size_t frames = 26;
  std::vector<SnrLevel> snr_set = default_training_snrs();
  std::size_t seeds = 5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

inline constexpr double kRmsPropRho = 0.9;
inline constexpr double kRmsPropEps = 1e-7;

template <typename T>
struct RmsPropState {
  std::vector<std::vector<T>> accumulators;  // one per parameter, lazily sized
  std::uint64_t steps = 0;                   // updates applied so far
};

/// lr0 / (1 + decay * step_index)
double rmsprop_learning_rate(double lr0, double decay, std::uint64_t step_index);

/// One update using each parameter's accumulated gradient:
///   a <- rho a + (1 - rho) g^2;  p <- p - lr g / (sqrt(a) + eps)
/// with lr taken at `state.steps`, which is then incremented. Throws
/// DivergenceError before touching anything if a gradient is not finite.
template <typename T>
void rmsprop_step(std::span<Tensor<T>> params, RmsPropState<T>& state, double lr0, double decay,
                  double rho = kRmsPropRho, double eps = kRmsPropEps);

struct TrainLogRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0;
  double lr = 0;
  double wall_ms = 0;
};

/// CSV with header `step,epoch,loss,lr,wall_ms`; losses at full precision.
void write_train_log(const std::filesystem::path& path, std::span<const TrainLogRow> rows);
void append_train_log(const std::filesystem::path& path, std::span<const TrainLogRow> rows);
std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path);

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian elements
  bool operator==(const CheckpointTensor&) const = default;
};

/// Serialized trainer state; layout documented in docs/formats.md.
struct Checkpoint {
  std::uint32_t precision = 64;  // element width in bits
  std::uint64_t spec_hash = 0;
  nlohmann::json meta;           // spec, train config, seed, counters
  std::vector<CheckpointTensor> tensors;

  ModelSpec spec() const { return ModelSpec::from_json(meta.at("spec")); }
  std::uint64_t epoch() const { return meta.at("epoch").get<std::uint64_t>(); }
  std::uint64_t step() const { return meta.at("step").get<std::uint64_t>(); }
  const CheckpointTensor& tensor(const std::string& name) const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameters and buffers out of a checkpoint into a fresh model.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt);

/// Seed of the model initialization for a run seed.
std::uint64_t init_seed(std::uint64_t run_seed);

/// One training run. All randomness is derived from (seed, epoch, step) so a
/// run restored from a checkpoint continues exactly as if never interrupted.
template <typename T>
class Trainer {
 public:
  Trainer(ModelSpec spec, const Corpus& corpus, TrainConfig cfg, std::uint64_t seed);

  /// Resumes from `ckpt`; throws CheckpointError on spec/precision mismatch.
  Trainer(const Checkpoint& ckpt, const Corpus& corpus, TrainConfig cfg);

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const RmsPropState<T>& optimizer() const { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t step_in_epoch() const { return step_in_epoch_; }
  std::uint64_t global_step() const { return opt_.steps; }
  std::size_t steps_per_epoch() const;
  bool finished() const { return epoch_ >= cfg_.epochs; }

  /// Corpus indices of the given batch within an epoch.
  std::vector<std::size_t> batch_indices(std::uint64_t epoch, std::uint64_t step) const;

  /// One optimizer update; returns its log row. Throws DivergenceError on a
  /// non-finite loss or gradient, leaving the parameters untouched.
  TrainLogRow step();

  /// Steps until every epoch is done. `on_epoch_end` runs after each epoch.
  std::vector<TrainLogRow> run(const std::function<void(const Trainer&)>& on_epoch_end = {});

  Checkpoint checkpoint() const;

 private:
  const Corpus* corpus_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  Model<T> model_;
  RmsPropState<T> opt_;
  std::uint64_t epoch_ = 0;
  std::uint64_t step_in_epoch_ = 0;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace grucnn
