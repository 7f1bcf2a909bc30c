#include "grucnn/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace grucnn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(lr_decay >= 0) || !std::isfinite(lr_decay)) throw std::invalid_argument("lr_decay must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2 (batch norm)");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (frames == 0) throw std::invalid_argument("frames must be positive");
  if (seeds == 0) throw std::invalid_argument("seeds must be positive");
  if (snr_set.empty()) throw std::invalid_argument("snr_set must not be empty");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json snrs = nlohmann::json::array();
  for (const auto& s : snr_set) snrs.push_back(s.label());
  return {{"learning_rate", learning_rate}, {"lr_decay", lr_decay}, {"batch_size", batch_size},
          {"epochs", epochs},               {"frames", frames},     {"snr_set", snrs},
          {"seeds", seeds},                 {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.frames = j.value("frames", c.frames);
  c.seeds = j.value("seeds", c.seeds);
  c.seed = j.value("seed", c.seed);
  if (j.contains("snr_set")) {
    const auto& s = j["snr_set"];
    if (s.is_string()) {
      const auto name = s.get<std::string>();
      if (name == "default") {
        c.snr_set = default_training_snrs();
      } else if (name == "low") {
        c.snr_set = low_training_snrs();
      } else {
        throw std::invalid_argument("snr_set must be \"default\", \"low\" or a list, got \"" + name + "\"");
      }
    } else {
      c.snr_set.clear();
      for (const auto& v : s) {
        c.snr_set.push_back(v.is_string() ? SnrLevel::parse(v.get<std::string>()) : SnrLevel(v.get<double>()));
      }
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// RMSProp

double rmsprop_learning_rate(double lr0, double decay, std::uint64_t step_index) {
  return lr0 / (1.0 + decay * static_cast<double>(step_index));
}

template <typename T>
void rmsprop_step(std::span<Tensor<T>> params, RmsPropState<T>& state, double lr0, double decay, double rho,
                  double eps) {
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient", state.steps);
    }
  }
  state.accumulators.resize(params.size());
  const T lr = static_cast<T>(rmsprop_learning_rate(lr0, decay, state.steps));
  const T r = static_cast<T>(rho);
  const T one_minus_r = static_cast<T>(1.0 - rho);
  const T e = static_cast<T>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& acc = state.accumulators[i];
    auto& p = params[i];
    if (acc.size() != p.numel()) acc.assign(p.numel(), T(0));
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      acc[k] = r * acc[k] + one_minus_r * g[k] * g[k];
      w[k] -= lr * g[k] / (std::sqrt(acc[k]) + e);
    }
  }
  ++state.steps;
}

template void rmsprop_step(std::span<Tensor<float>>, RmsPropState<float>&, double, double, double, double);
template void rmsprop_step(std::span<Tensor<double>>, RmsPropState<double>&, double, double, double, double);

// ---------------------------------------------------------------------------
// Training log

namespace {

constexpr const char* kLogHeader = "step,epoch,loss,lr,wall_ms";

void write_rows(std::ostream& os, std::span<const TrainLogRow> rows) {
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%llu,%llu,%.17g,%.17g,%.3f\n", static_cast<unsigned long long>(r.step),
                  static_cast<unsigned long long>(r.epoch), r.loss, r.lr, r.wall_ms);
    os << buf;
  }
}

}  // namespace

void write_train_log(const std::filesystem::path& path, std::span<const TrainLogRow> rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kLogHeader << '\n';
  write_rows(os, rows);
}

void append_train_log(const std::filesystem::path& path, std::span<const TrainLogRow> rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (fresh) os << kLogHeader << '\n';
  write_rows(os, rows);
}

std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::uint64_t offset = 0;
  if (!std::getline(is, line) || line != kLogHeader) throw DataFormatError("bad training log header", 0);
  offset += line.size() + 1;
  std::vector<TrainLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TrainLogRow r;
    unsigned long long step = 0, epoch = 0;
    if (std::sscanf(line.c_str(), "%llu,%llu,%lf,%lf,%lf", &step, &epoch, &r.loss, &r.lr, &r.wall_ms) != 5) {
      throw DataFormatError("malformed training log row", offset);
    }
    r.step = step;
    r.epoch = epoch;
    rows.push_back(r);
    offset += line.size() + 1;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kCkptMagic[8] = {'G', 'C', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void pod(U v) { bytes(&v, sizeof(U)); }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  const std::uint8_t* bytes(std::size_t n, const char* what) {
    if (n > in_.size() - pos_) throw DataFormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    const auto* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename U>
  U pod(const char* what) {
    U v;
    std::memcpy(&v, bytes(sizeof(U), what), sizeof(U));
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint64_t>(what);
    const auto* p = bytes(n, what);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointTensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw CheckpointError("checkpoint has no tensor named " + name);
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes(kCkptMagic, sizeof(kCkptMagic));
  w.pod(kCkptVersion);
  w.pod(precision);
  w.pod(spec_hash);
  w.str(meta.dump());
  w.pod<std::uint64_t>(tensors.size());
  for (const auto& t : tensors) {
    w.str(t.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.pod<std::uint64_t>(d);
  }
  for (const auto& t : tensors) w.bytes(t.bytes.data(), t.bytes.size());
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.bytes(sizeof(kCkptMagic), "magic"), kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw DataFormatError("not a checkpoint (bad magic)", 0);
  }
  const auto version_pos = r.pos();
  if (r.pod<std::uint32_t>("version") != kCkptVersion) {
    throw DataFormatError("unsupported checkpoint version", version_pos);
  }
  Checkpoint c;
  const auto precision_pos = r.pos();
  c.precision = r.pod<std::uint32_t>("precision");
  if (c.precision != 32 && c.precision != 64) throw DataFormatError("bad precision field", precision_pos);
  c.spec_hash = r.pod<std::uint64_t>("spec hash");
  const auto meta_pos = r.pos();
  try {
    c.meta = nlohmann::json::parse(r.str("metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataFormatError(std::string("bad checkpoint metadata: ") + e.what(), meta_pos);
  }
  const auto n = r.pod<std::uint64_t>("tensor count");
  if (n > bytes.size()) throw DataFormatError("implausible tensor count", r.pos());
  c.tensors.resize(n);
  for (auto& t : c.tensors) {
    t.name = r.str("tensor name");
    const auto rank = r.pod<std::uint32_t>("tensor rank");
    if (rank > 8) throw DataFormatError("implausible tensor rank", r.pos());
    t.shape.resize(rank);
    for (auto& d : t.shape) d = r.pod<std::uint64_t>("tensor shape");
  }
  for (auto& t : c.tensors) {
    const std::size_t len = shape_numel(t.shape) * (c.precision / 8);
    const auto* p = r.bytes(len, "tensor data");
    t.bytes.assign(p, p + len);
  }
  if (!r.done()) throw DataFormatError("trailing bytes after checkpoint data", r.pos());
  if (c.spec().hash() != c.spec_hash) throw CheckpointError("checkpoint spec hash does not match its metadata");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = ckpt.serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return Checkpoint::deserialize(bytes);
}

namespace {

template <typename T>
constexpr std::uint32_t precision_bits() {
  return sizeof(T) * 8;
}

template <typename T>
CheckpointTensor pack(std::string name, const Shape& shape, std::span<const T> values) {
  CheckpointTensor t{std::move(name), shape, {}};
  t.bytes.resize(values.size_bytes());
  std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
  return t;
}

template <typename T>
void unpack(const CheckpointTensor& src, const Shape& shape, std::span<T> dst) {
  if (src.shape != shape) {
    throw CheckpointError("tensor " + src.name + " has shape " + shape_to_string(src.shape) + ", model expects " +
                          shape_to_string(shape));
  }
  std::memcpy(dst.data(), src.bytes.data(), dst.size_bytes());
}

template <typename T>
void check_precision(const Checkpoint& ckpt) {
  if (ckpt.precision != precision_bits<T>()) {
    throw CheckpointError("checkpoint precision is " + std::to_string(ckpt.precision) + "-bit, requested " +
                          std::to_string(precision_bits<T>()) + "-bit");
  }
}

template <typename T>
void restore_model(Model<T>& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    unpack(ckpt.tensor("param/" + p.name), p.tensor.shape(), p.tensor.mutable_data());
  }
  for (auto& b : model.buffers()) {
    unpack(ckpt.tensor("buffer/" + b.name), b.tensor.shape(), b.tensor.mutable_data());
  }
}

template <typename T>
std::vector<Tensor<T>> param_tensors(const Model<T>& model) {
  std::vector<Tensor<T>> out;
  for (auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

}  // namespace

std::uint64_t init_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 1); }

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  check_precision<T>(ckpt);
  std::mt19937_64 rng(0);
  Model<T> model(ckpt.spec(), rng);
  restore_model(model, ckpt);
  return model;
}

template Model<float> model_from_checkpoint(const Checkpoint&);
template Model<double> model_from_checkpoint(const Checkpoint&);

// ---------------------------------------------------------------------------
// Trainer

namespace {

template <typename T>
Model<T> fresh_model(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(init_seed(seed));
  return Model<T>(spec, rng);
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(ModelSpec spec, const Corpus& corpus, TrainConfig cfg, std::uint64_t seed)
    : corpus_(&corpus), cfg_(std::move(cfg)), seed_(seed), model_(fresh_model<T>(spec, seed)) {
  cfg_.validate();
  if (corpus.size() < 2) throw std::invalid_argument("training corpus needs at least 2 images");
  opt_.accumulators.clear();
  for (const auto& p : model_.parameters()) opt_.accumulators.emplace_back(p.tensor.numel(), T(0));
}

template <typename T>
Trainer<T>::Trainer(const Checkpoint& ckpt, const Corpus& corpus, TrainConfig cfg)
    : corpus_(&corpus),
      cfg_(std::move(cfg)),
      seed_(ckpt.meta.at("seed").get<std::uint64_t>()),
      model_(model_from_checkpoint<T>(ckpt)) {
  cfg_.validate();
  const auto params = model_.parameters();
  opt_.accumulators.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ckpt.tensor("opt/" + params[i].name);
    opt_.accumulators[i].resize(params[i].tensor.numel());
    unpack(src, params[i].tensor.shape(), std::span<T>(opt_.accumulators[i]));
  }
  opt_.steps = ckpt.step();
  epoch_ = ckpt.epoch();
  step_in_epoch_ = ckpt.meta.at("step_in_epoch").get<std::uint64_t>();
}

template <typename T>
std::size_t Trainer<T>::steps_per_epoch() const {
  const std::size_t n = corpus_->size();
  std::size_t steps = (n + cfg_.batch_size - 1) / cfg_.batch_size;
  // A trailing batch of one cannot be batch-normalized; fold it into its neighbour.
  if (steps > 1 && n % cfg_.batch_size == 1) --steps;
  return steps;
}

template <typename T>
std::vector<std::size_t> Trainer<T>::batch_indices(std::uint64_t epoch, std::uint64_t step) const {
  const std::size_t n = corpus_->size();
  const std::size_t steps = steps_per_epoch();
  if (step >= steps) throw std::out_of_range("step beyond the end of the epoch");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed_, 2, epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t begin = step * cfg_.batch_size;
  const std::size_t end = step + 1 == steps ? n : begin + cfg_.batch_size;
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

template <typename T>
TrainLogRow Trainer<T>::step() {
  if (finished()) throw std::logic_error("training already finished");
  const auto t0 = std::chrono::steady_clock::now();
  const auto indices = batch_indices(epoch_, step_in_epoch_);
  const auto batch =
      make_sequence_batch(*corpus_, indices, cfg_.frames, cfg_.snr_set, derive_seed(seed_, 3, epoch_, step_in_epoch_));
  auto params = param_tensors(model_);
  for (auto& p : params) p.zero_grad();

  std::mt19937_64 dropout_rng(derive_seed(seed_, 4, epoch_, step_in_epoch_));
  auto out = forward_sequence(model_, batch, true, dropout_rng, true);
  const double loss = static_cast<double>(out.loss.item());
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss", opt_.steps);
  out.loss.backward();

  TrainLogRow row;
  row.step = opt_.steps;
  row.epoch = epoch_;
  row.loss = loss;
  row.lr = rmsprop_learning_rate(cfg_.learning_rate, cfg_.lr_decay, opt_.steps);
  rmsprop_step(std::span<Tensor<T>>(params), opt_, cfg_.learning_rate, cfg_.lr_decay);

  if (++step_in_epoch_ == steps_per_epoch()) {
    step_in_epoch_ = 0;
    ++epoch_;
  }
  row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

template <typename T>
std::vector<TrainLogRow> Trainer<T>::run(const std::function<void(const Trainer&)>& on_epoch_end) {
  std::vector<TrainLogRow> rows;
  while (!finished()) {
    const auto e = epoch_;
    rows.push_back(step());
    if (epoch_ != e && on_epoch_end) on_epoch_end(*this);
  }
  return rows;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint c;
  c.precision = precision_bits<T>();
  const auto& spec = model_.spec();
  c.spec_hash = spec.hash();
  c.meta = {{"spec", spec.to_json()},     {"train", cfg_.to_json()},          {"seed", seed_},
            {"epoch", epoch_},            {"step_in_epoch", step_in_epoch_}, {"step", opt_.steps}};
  const auto params = model_.parameters();
  for (const auto& p : params) c.tensors.push_back(pack<T>("param/" + p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& b : model_.buffers()) {
    c.tensors.push_back(pack<T>("buffer/" + b.name, b.tensor.shape(), b.tensor.data()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back(
        pack<T>("opt/" + params[i].name, params[i].tensor.shape(), std::span<const T>(opt_.accumulators[i])));
  }
  return c;
}

template class Trainer<float>;
template class Trainer<double>;

}  // namespace grucnn
