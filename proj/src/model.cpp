#include "grucnn/model.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <stdexcept>

namespace grucnn {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
    case LayerKind::GruDense: return "gru_dense";
    case LayerKind::SoftmaxHead: return "softmax_head";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::Conv, LayerKind::MaxPool, LayerKind::Dropout, LayerKind::BatchNorm,
                 LayerKind::Flatten, LayerKind::Dense, LayerKind::GruDense, LayerKind::SoftmaxHead}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind: " + std::string(name));
}

// ---------------------------------------------------------------------------
// ModelSpec

bool ModelSpec::recurrent() const {
  for (const auto& l : layers) {
    if (l.kind == LayerKind::GruDense) return true;
    if (l.kind == LayerKind::Conv && l.cell != CellKind::FeedforwardConv) return true;
  }
  return false;
}

std::size_t ModelSpec::output_classes() const {
  if (layers.empty() || layers.back().kind != LayerKind::SoftmaxHead) {
    throw std::invalid_argument("model spec '" + name + "' must end with a softmax head");
  }
  return layers.back().units;
}

ModelSpec ModelSpec::scaled(double factor) const {
  if (!(factor > 0)) throw std::invalid_argument("width factor must be positive");
  ModelSpec out = *this;
  for (auto& l : out.layers) {
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Dense || l.kind == LayerKind::GruDense) {
      l.units = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(l.units * factor)));
      l.in_units = 0;
    }
  }
  return out;
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json j{{"kind", std::string(to_string(l.kind))}};
    if (l.kind == LayerKind::Conv) j["cell"] = std::string(to_string(l.cell));
    if (l.units) j["units"] = l.units;
    if (l.kind == LayerKind::Dropout) j["rate"] = l.rate;
    if (l.in_units) j["in_units"] = l.in_units;
    layers_json.push_back(std::move(j));
  }
  return {{"name", name}, {"input_channels", input_channels}, {"input_size", input_size}, {"layers", layers_json}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_channels = j.value("input_channels", std::size_t{3});
  s.input_size = j.at("input_size").get<std::size_t>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
    if (lj.contains("cell")) l.cell = cell_kind_from_string(lj["cell"].get<std::string>());
    l.units = lj.value("units", std::size_t{0});
    l.rate = lj.value("rate", 0.0);
    l.in_units = lj.value("in_units", std::size_t{0});
    s.layers.push_back(l);
  }
  return s;
}

std::uint64_t ModelSpec::hash() const {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

LayerSpec conv(CellKind cell, std::size_t units) { return {LayerKind::Conv, cell, units, 0.0, 0}; }
LayerSpec pool() { return {LayerKind::MaxPool}; }
LayerSpec drop(double rate) { return {LayerKind::Dropout, CellKind::FeedforwardConv, 0, rate, 0}; }
LayerSpec bn() { return {LayerKind::BatchNorm}; }
LayerSpec flatten() { return {LayerKind::Flatten}; }
LayerSpec fc(std::size_t units) { return {LayerKind::Dense, CellKind::FeedforwardConv, units, 0.0, 0}; }
LayerSpec gru_fc(std::size_t units) { return {LayerKind::GruDense, CellKind::FeedforwardConv, units, 0.0, 0}; }
LayerSpec head() { return {LayerKind::SoftmaxHead, CellKind::FeedforwardConv, kNumClasses, 0.0, 0}; }

ModelSpec layout(std::string name, std::size_t input_size, CellKind early, CellKind late, std::size_t a,
                 std::size_t b, LayerSpec hidden) {
  ModelSpec s;
  s.name = std::move(name);
  s.input_size = input_size;
  s.layers = {conv(early, a), conv(early, a), pool(), drop(0.25), bn(),     conv(late, b), conv(late, b),
              pool(),         drop(0.25),     flatten(), hidden,  drop(0.5), head()};
  return s;
}

}  // namespace

ModelSpec default_feedforward(std::size_t input_size) {
  return layout("ccnn", input_size, CellKind::FeedforwardConv, CellKind::FeedforwardConv, 96, 192, fc(1536));
}

ModelSpec default_recurrent(std::size_t input_size, CellKind cell) {
  std::string name = cell == CellKind::GruConv    ? "grucnn"
                     : cell == CellKind::LstmConv ? "lstmcnn"
                     : cell == CellKind::ElmanConv ? "elmancnn"
                     : cell == CellKind::RgConv    ? "rgcnn"
                                                   : "ccnn_narrow";
  return layout(std::move(name), input_size, cell, cell, 32, 64, fc(512));
}

std::vector<std::string> model_spec_names() {
  return {"ccnn",       "grucnn",       "lstmcnn",       "elmancnn",     "rgcnn",
          "ccnn_grufc", "grucnn_grufc", "grucnn_conv34", "grucnn_conv12"};
}

ModelSpec model_spec_by_name(const std::string& name, std::size_t input_size) {
  using enum CellKind;
  if (name == "ccnn") return default_feedforward(input_size);
  if (name == "grucnn") return default_recurrent(input_size, GruConv);
  if (name == "lstmcnn") return default_recurrent(input_size, LstmConv);
  if (name == "elmancnn") return default_recurrent(input_size, ElmanConv);
  if (name == "rgcnn") return default_recurrent(input_size, RgConv);
  if (name == "ccnn_grufc") return layout(name, input_size, FeedforwardConv, FeedforwardConv, 96, 192, gru_fc(512));
  if (name == "grucnn_grufc") return layout(name, input_size, GruConv, GruConv, 32, 64, gru_fc(512));
  if (name == "grucnn_conv34") return layout(name, input_size, FeedforwardConv, GruConv, 32, 64, fc(512));
  if (name == "grucnn_conv12") return layout(name, input_size, GruConv, FeedforwardConv, 32, 64, fc(512));
  throw std::invalid_argument("unknown model spec name: " + name);
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct Model<T>::Layer {
  LayerSpec spec;
  std::string prefix;
  std::unique_ptr<ConvCell<T>> cell;
  std::optional<BatchNormState<T>> norm;
  std::optional<GruDenseParams<T>> gru;
  Tensor<T> weight;
  Tensor<T> bias;
  // Output geometry, recorded at construction.
  std::size_t channels = 0;
  std::size_t side = 0;
  std::size_t flat = 0;
};

template <typename T>
Model<T>::Model(ModelSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
  std::size_t ch = spec_.input_channels;
  std::size_t side = spec_.input_size;
  std::size_t flat = 0;  // nonzero once flattened
  spec_.output_classes();
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& ls = spec_.layers[i];
    auto layer = std::make_unique<Layer>();
    layer->spec = ls;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "l%02zu.", i);
    layer->prefix = std::string(buf) + std::string(to_string(ls.kind));
    const bool spatial_kind = ls.kind == LayerKind::Conv || ls.kind == LayerKind::MaxPool ||
                              ls.kind == LayerKind::BatchNorm || ls.kind == LayerKind::Flatten;
    if (spatial_kind && flat) {
      throw ShapeError(layer->prefix + " needs a spatial input but follows a flatten");
    }
    switch (ls.kind) {
      case LayerKind::Conv:
        if (ls.units == 0) throw ShapeError(layer->prefix + " has zero channels");
        layer->prefix += "." + std::string(to_string(ls.cell));
        layer->cell = ConvCell<T>::create(ls.cell, ch, ls.units, rng);
        ch = ls.units;
        break;
      case LayerKind::MaxPool:
        if (side % 2) throw ShapeError(layer->prefix + ": odd spatial extent " + std::to_string(side));
        side /= 2;
        break;
      case LayerKind::Dropout:
        if (!(ls.rate >= 0) || ls.rate >= 1) throw std::invalid_argument(layer->prefix + ": bad dropout rate");
        break;
      case LayerKind::BatchNorm:
        layer->norm = BatchNormState<T>::create(ch);
        break;
      case LayerKind::Flatten:
        flat = ch * side * side;
        break;
      case LayerKind::Dense:
      case LayerKind::GruDense:
      case LayerKind::SoftmaxHead: {
        if (!flat) throw ShapeError(layer->prefix + " needs a flattened input");
        if (ls.in_units && ls.in_units != flat) {
          throw ShapeError(layer->prefix + " expects input width " + std::to_string(ls.in_units) +
                           " but the flatten produces " + std::to_string(flat));
        }
        if (ls.units == 0) throw ShapeError(layer->prefix + " has zero units");
        if (ls.kind == LayerKind::GruDense) {
          layer->gru = GruDenseParams<T>::init(flat, ls.units, rng);
        } else {
          layer->weight = fan_in_uniform<T>({ls.units, flat}, flat, rng);
          layer->bias = Tensor<T>::zeros({ls.units}, true);
        }
        flat = ls.units;
        break;
      }
    }
    layer->channels = ch;
    layer->side = side;
    layer->flat = flat;
    layers_.push_back(std::move(layer));
  }
}

template <typename T>
Model<T>::~Model() = default;
template <typename T>
Model<T>::Model(Model&&) noexcept = default;
template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& l : layers_) {
    auto add_all = [&](const std::vector<NamedTensor<T>>& ps) {
      for (const auto& p : ps) out.push_back({l->prefix + "." + p.name, p.tensor});
    };
    if (l->cell) add_all(l->cell->parameters());
    if (l->norm) add_all({{"gamma", l->norm->gamma}, {"beta", l->norm->beta}});
    if (l->gru) add_all(l->gru->named());
    if (l->weight.defined()) add_all({{"weight", l->weight}, {"bias", l->bias}});
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::buffers() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& l : layers_) {
    if (l->norm) {
      out.push_back({l->prefix + ".running_mean", l->norm->running_mean});
      out.push_back({l->prefix + ".running_var", l->norm->running_var});
    }
  }
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
typename Model<T>::State Model<T>::initial_state(std::size_t batch) const {
  State s;
  s.batch = batch;
  s.cells.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = *layers_[i];
    if (l.cell && l.cell->recurrent()) {
      s.cells[i] = l.cell->initial_state(batch, l.side, l.side);
    } else if (l.gru) {
      s.cells[i].hidden = Tensor<T>::zeros({batch, l.spec.units});
    }
  }
  return s;
}

template <typename T>
Tensor<T> Model<T>::step(const Tensor<T>& frame, State& state, bool training, std::mt19937_64& rng) {
  const Shape expected{state.batch, spec_.input_channels, spec_.input_size, spec_.input_size};
  if (frame.shape() != expected) {
    throw ShapeError("frame " + shape_to_string(frame.shape()) + " does not match model input " +
                     shape_to_string(expected));
  }
  Tensor<T> x = frame;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = *layers_[i];
    switch (l.spec.kind) {
      case LayerKind::Conv: x = l.cell->step(x, state.cells[i]); break;
      case LayerKind::MaxPool: x = max_pool_2x2(x); break;
      case LayerKind::Dropout: x = dropout(x, l.spec.rate, training, rng); break;
      case LayerKind::BatchNorm: x = batch_norm(x, *l.norm, training); break;
      case LayerKind::Flatten: x = reshape(x, {state.batch, l.flat}); break;
      case LayerKind::Dense: x = relu(dense(x, l.weight, l.bias)); break;
      case LayerKind::GruDense:
        state.cells[i].hidden = gru_dense_step(x, state.cells[i].hidden, *l.gru);
        x = state.cells[i].hidden;
        break;
      case LayerKind::SoftmaxHead: x = dense(x, l.weight, l.bias); break;
    }
  }
  return x;
}

template <typename T>
Tensor<T> batch_frame(const ImageSequenceBatch& batch, std::size_t t) {
  if (t >= batch.frames) throw std::out_of_range("frame index out of range");
  const std::size_t fs = batch.frame_size();
  Buffer<T> values(batch.batch * fs);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const double* src = batch.pixels.data() + (b * batch.frames + t) * fs;
    std::transform(src, src + fs, values.begin() + static_cast<std::ptrdiff_t>(b * fs),
                   [](double v) { return static_cast<T>(v); });
  }
  return Tensor<T>::from_buffer({batch.batch, batch.channels, batch.height, batch.width}, std::move(values));
}

template <typename T>
SequenceOutput<T> forward_sequence(Model<T>& model, const ImageSequenceBatch& batch, bool training,
                                   std::mt19937_64& rng, bool with_loss) {
  SequenceOutput<T> out;
  out.batch = batch.batch;
  out.frames = batch.frames;
  out.classes = model.spec().output_classes();
  out.probs.resize(out.batch * out.frames * out.classes);
  auto state = model.initial_state(batch.batch);
  Tensor<T> loss_sum;
  for (std::size_t t = 0; t < batch.frames; ++t) {
    auto logits = model.step(batch_frame<T>(batch, t), state, training, rng);
    Tensor<T> probs;
    if (with_loss) {
      auto sce = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
      loss_sum = loss_sum.defined() ? add(loss_sum, sce.loss) : sce.loss;
      probs = sce.probs;
    } else {
      probs = softmax(logits);
    }
    const auto p = probs.data();
    for (std::size_t b = 0; b < out.batch; ++b) {
      std::copy(p.begin() + static_cast<std::ptrdiff_t>(b * out.classes),
                p.begin() + static_cast<std::ptrdiff_t>((b + 1) * out.classes),
                out.probs.begin() + static_cast<std::ptrdiff_t>((b * out.frames + t) * out.classes));
    }
  }
  if (with_loss) out.loss = scale(loss_sum, T(1) / static_cast<T>(batch.frames));
  return out;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> batch_frame(const ImageSequenceBatch&, std::size_t);
template Tensor<double> batch_frame(const ImageSequenceBatch&, std::size_t);
template SequenceOutput<float> forward_sequence(Model<float>&, const ImageSequenceBatch&, bool, std::mt19937_64&,
                                                bool);
template SequenceOutput<double> forward_sequence(Model<double>&, const ImageSequenceBatch&, bool,
                                                 std::mt19937_64&, bool);

}  // namespace grucnn
