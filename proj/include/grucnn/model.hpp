#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "grucnn/cells.hpp"
#include "grucnn/data.hpp"
#include "grucnn/ops.hpp"

namespace grucnn {

enum class LayerKind { Conv, MaxPool, Dropout, BatchNorm, Flatten, Dense, GruDense, SoftmaxHead };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  CellKind cell = CellKind::FeedforwardConv;  // Conv layers only
  std::size_t units = 0;                      // channels (Conv) or width (Dense, GruDense, SoftmaxHead)
  double rate = 0.0;                          // Dropout only
  std::size_t in_units = 0;                   // Dense/GruDense: expected input width, 0 = inferred

  bool operator==(const LayerSpec&) const = default;
};

/// Declarative layer list. Conv layers are 3x3 same-padded; Dense includes ReLU;
/// SoftmaxHead is the final affine map whose output feeds the softmax.
struct ModelSpec {
  std::string name;
  std::size_t input_channels = 3;
  std::size_t input_size = 32;
  std::vector<LayerSpec> layers;

  bool recurrent() const;
  std::size_t output_classes() const;

  /// Multiplies every conv channel count and hidden dense width by `factor`
  /// (rounded, at least 1). The head keeps its 10 outputs.
  ModelSpec scaled(double factor) const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON form.
  std::uint64_t hash() const;

  bool operator==(const ModelSpec&) const = default;
};

/// Default layouts: conv(a), conv(a), pool, dropout .25, batch norm, conv(b),
/// conv(b), pool, dropout .25, flatten, dense(d)+ReLU, dropout .5, head(10).
ModelSpec default_feedforward(std::size_t input_size = 32);  // a=96, b=192, d=1536
ModelSpec default_recurrent(std::size_t input_size = 32, CellKind cell = CellKind::GruConv);  // 32, 64, 512

/// Named layouts: "ccnn", "grucnn", "lstmcnn", "elmancnn", "rgcnn",
/// "ccnn_grufc" (conv feedforward, hidden dense replaced by a GRU),
/// "grucnn_grufc" (both recurrent), "grucnn_conv34" (layers 6-7 recurrent),
/// "grucnn_conv12" (layers 1-2 recurrent).
ModelSpec model_spec_by_name(const std::string& name, std::size_t input_size);
std::vector<std::string> model_spec_names();

template <typename T>
class Model {
 public:
  /// Instantiates every layer; throws ShapeError on inconsistent specs.
  Model(ModelSpec spec, std::mt19937_64& rng);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelSpec& spec() const { return spec_; }

  /// Trainable tensors in a stable order with stable names.
  std::vector<NamedTensor<T>> parameters() const;
  /// Non-trainable state (batch-norm running statistics).
  std::vector<NamedTensor<T>> buffers() const;
  std::size_t parameter_count() const;

  struct State;
  /// Zeroed recurrent state for a batch.
  State initial_state(std::size_t batch) const;

  /// One frame [batch, ch, H, W] -> logits [batch, classes]; advances `state`.
  Tensor<T> step(const Tensor<T>& frame, State& state, bool training, std::mt19937_64& rng);

 private:
  struct Layer;
  ModelSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

template <typename T>
struct Model<T>::State {
  std::vector<CellState<T>> cells;  // one slot per layer
  std::size_t batch = 0;
};

/// Frame t of every item as a [batch, ch, H, W] tensor.
template <typename T>
Tensor<T> batch_frame(const ImageSequenceBatch& batch, std::size_t t);

template <typename T>
struct SequenceOutput {
  std::vector<T> probs;  // [batch, frames, classes]
  Tensor<T> loss;        // mean cross-entropy over frames and items; undefined without labels
  std::size_t batch = 0;
  std::size_t frames = 0;
  std::size_t classes = 0;
};

/// Runs every frame with recurrent state starting at zero. When `with_loss`
/// is set the result carries the frame-averaged cross-entropy.
template <typename T>
SequenceOutput<T> forward_sequence(Model<T>& model, const ImageSequenceBatch& batch, bool training,
                                   std::mt19937_64& rng, bool with_loss = false);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace grucnn
