#include "grucnn/experiment.hpp"

#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace grucnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

nlohmann::json snr_list_json(const std::vector<SnrLevel>& snrs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : snrs) out.push_back(s.label());
  return out;
}

std::vector<SnrLevel> snr_list_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "default") return default_training_snrs();
    if (name == "low") return low_training_snrs();
    throw std::invalid_argument("unknown SNR set \"" + name + "\"");
  }
  std::vector<SnrLevel> out;
  for (const auto& v : j) out.push_back(v.is_string() ? SnrLevel::parse(v.get<std::string>()) : SnrLevel(v.get<double>()));
  if (out.empty()) throw std::invalid_argument("SNR list must not be empty");
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataFormatError(path.string() + ": " + e.what(), e.byte);
  }
}

}  // namespace

nlohmann::json DatasetConfig::to_json() const {
  if (kind == "cifar10") {
    return {{"kind", kind},
            {"train_files", train_files},
            {"test_file", test_file},
            {"train_limit", train_limit},
            {"test_limit", test_limit}};
  }
  return {{"kind", kind}, {"n_per_class", n_per_class}, {"test_per_class", test_per_class}, {"image_size", image_size}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig d;
  d.kind = j.value("kind", d.kind);
  if (d.kind != "toyset" && d.kind != "cifar10") throw std::invalid_argument("dataset kind must be toyset or cifar10");
  d.n_per_class = j.value("n_per_class", d.n_per_class);
  d.test_per_class = j.value("test_per_class", d.test_per_class);
  d.image_size = j.value("image_size", d.image_size);
  if (j.contains("train_files")) d.train_files = j["train_files"].get<std::vector<std::string>>();
  d.test_file = j.value("test_file", d.test_file);
  d.train_limit = j.value("train_limit", d.train_limit);
  d.test_limit = j.value("test_limit", d.test_limit);
  return d;
}

nlohmann::json ModelRun::to_json() const {
  nlohmann::json j{{"label", label}};
  if (inline_spec) {
    j["spec"] = inline_spec->to_json();
  } else {
    j["spec"] = spec_name;
  }
  if (snr_set) j["snr_set"] = snr_list_json(*snr_set);
  return j;
}

ModelRun ModelRun::from_json(const nlohmann::json& j) {
  ModelRun r;
  const auto& spec = j.at("spec");
  if (spec.is_string()) {
    r.spec_name = spec.get<std::string>();
  } else {
    r.inline_spec = ModelSpec::from_json(spec);
    r.spec_name = r.inline_spec->name;
  }
  r.label = j.value("label", r.spec_name);
  if (j.contains("snr_set")) r.snr_set = snr_list_from_json(j["snr_set"]);
  return r;
}

nlohmann::json TestProtocol::to_json() const {
  return {{"frames", frames}, {"repetitions", repetitions}, {"snrs", snr_list_json(snrs)}, {"batch_size", batch_size}};
}

TestProtocol TestProtocol::from_json(const nlohmann::json& j) {
  TestProtocol t;
  t.frames = j.value("frames", t.frames);
  t.repetitions = j.value("repetitions", t.repetitions);
  t.batch_size = j.value("batch_size", t.batch_size);
  if (j.contains("snrs")) t.snrs = snr_list_from_json(j["snrs"]);
  return t;
}

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;
  c.models = {{"ccnn", "ccnn", std::nullopt, std::nullopt},
              {"grucnn", "grucnn", std::nullopt, std::nullopt},
              {"grucnn_low", "grucnn", std::nullopt, low_training_snrs()}};
  c.train.epochs = 10;
  c.train.seeds = 2;
  c.comparisons = {{"grucnn", "ccnn"}, {"grucnn_low", "grucnn"}};
  return c;
}

ModelSpec ExperimentConfig::spec_for(const ModelRun& run) const {
  if (run.inline_spec) return *run.inline_spec;
  auto spec = model_spec_by_name(run.spec_name, dataset.input_size());
  if (width_scale != 1.0) spec = spec.scaled(width_scale);
  return spec;
}

TrainConfig ExperimentConfig::train_config_for(const ModelRun& run) const {
  TrainConfig t = train;
  if (run.snr_set) t.snr_set = *run.snr_set;
  t.seed = seed;
  return t;
}

std::uint64_t ExperimentConfig::run_seed(std::size_t index) const { return derive_seed(seed, 0x5eed, index); }
std::uint64_t ExperimentConfig::eval_seed() const { return derive_seed(seed, 0xe7a1); }

void ExperimentConfig::validate() const {
  train.validate();
  if (models.empty()) throw std::invalid_argument("config lists no models");
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].label.empty()) throw std::invalid_argument("model label must not be empty");
    for (std::size_t j = 0; j < i; ++j) {
      if (models[i].label == models[j].label) throw std::invalid_argument("duplicate model label " + models[i].label);
    }
    spec_for(models[i]).output_classes();
  }
  if (!(width_scale > 0)) throw std::invalid_argument("width_scale must be positive");
  if (precision != 32 && precision != 64) throw std::invalid_argument("precision must be 32 or 64");
  if (test.frames == 0 || test.repetitions == 0 || test.snrs.empty() || test.batch_size == 0) {
    throw std::invalid_argument("test protocol needs frames, repetitions, SNRs and a batch size");
  }
  if (dataset.kind == "toyset" && (dataset.n_per_class == 0 || dataset.test_per_class == 0)) {
    throw std::invalid_argument("toyset needs images per class");
  }
  if (dataset.kind == "cifar10" && (dataset.train_files.empty() || dataset.test_file.empty())) {
    throw std::invalid_argument("cifar10 dataset needs train_files and test_file");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json models_json = nlohmann::json::array();
  for (const auto& m : models) models_json.push_back(m.to_json());
  nlohmann::json cmp = nlohmann::json::array();
  for (const auto& [a, b] : comparisons) cmp.push_back({a, b});
  return {{"dataset", dataset.to_json()},
          {"models", models_json},
          {"width_scale", width_scale},
          {"train", train.to_json()},
          {"test", test.to_json()},
          {"comparisons", cmp},
          {"precision", precision},
          {"seed", seed},
          {"out", out.string()},
          {"code_version", kCodeVersion}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"dataset",   "models", "width_scale", "train", "test",
                                "comparisons", "precision", "seed", "out", "code_version"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known)) {
      throw std::invalid_argument("unknown config key \"" + key + "\"");
    }
  }
  ExperimentConfig c = desk_default();
  auto base = c.to_json();
  base.merge_patch(j);
  c.dataset = DatasetConfig::from_json(base["dataset"]);
  c.models.clear();
  for (const auto& m : base["models"]) c.models.push_back(ModelRun::from_json(m));
  c.width_scale = base["width_scale"].get<double>();
  c.train = TrainConfig::from_json(base["train"]);
  c.test = TestProtocol::from_json(base["test"]);
  c.comparisons.clear();
  for (const auto& p : base["comparisons"]) c.comparisons.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  c.precision = base["precision"].get<int>();
  c.seed = base["seed"].get<std::uint64_t>();
  c.train.seed = c.seed;
  c.out = base["out"].get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// Data

namespace {

std::uint64_t toyset_seed(const ExperimentConfig& cfg, int which) { return derive_seed(cfg.seed, 0xda7a, which); }

Corpus load_cifar_files(const std::vector<std::string>& files, std::size_t limit) {
  Corpus out;
  for (const auto& f : files) {
    auto part = load_cifar10(f);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  if (limit && out.size() > limit) out.resize(limit);
  return out;
}

void load_raw(const ExperimentConfig& cfg, Corpus& train, Corpus& test) {
  const RunPaths paths{cfg.out};
  if (cfg.dataset.kind == "cifar10") {
    train = load_cifar_files(cfg.dataset.train_files, cfg.dataset.train_limit);
    test = load_cifar_files({cfg.dataset.test_file}, cfg.dataset.test_limit);
    return;
  }
  if (fs::exists(paths.train_archive()) && fs::exists(paths.test_archive())) {
    train = read_toyset(paths.train_archive());
    test = read_toyset(paths.test_archive());
  } else {
    train = synth_toyset(cfg.dataset.n_per_class, cfg.dataset.image_size, toyset_seed(cfg, 0));
    test = synth_toyset(cfg.dataset.test_per_class, cfg.dataset.image_size, toyset_seed(cfg, 1));
  }
  const std::size_t side = cfg.dataset.image_size;
  for (const auto* c : {&train, &test}) {
    if (c->empty() || c->front().height != side || c->front().width != side) {
      throw DataFormatError("toyset archive does not match the configured image size", 0);
    }
  }
}

}  // namespace

Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d;
  load_raw(cfg, d.train, d.test);
  const Corpus* both[] = {&d.train, &d.test};
  d.raw_stats = corpus_stats(both);
  normalize_corpus(d.train, d.raw_stats);
  normalize_corpus(d.test, d.raw_stats);
  return d;
}

// ---------------------------------------------------------------------------
// Utilities

void run_parallel(std::vector<std::function<void()>> tasks, int jobs) {
  if (jobs <= 1 || tasks.size() <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(jobs), tasks.size());
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

template <typename F>
auto with_precision(int precision, F&& f) {
  if (precision == 64) return f(double{});
  return f(float{});
}

std::string tag(const std::string& label, std::size_t seed_index) {
  return "[" + label + " seed" + std::to_string(seed_index) + "]";
}

nlohmann::json stats_json(const CorpusStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

// ---------------------------------------------------------------------------
// generate

nlohmann::json cmd_generate(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const RunPaths paths{cfg.out};
  fs::create_directories(paths.data_dir());
  write_json(paths.config(), cfg.to_json());
  Corpus train, test;
  nlohmann::json summary{{"kind", cfg.dataset.kind}};
  if (cfg.dataset.kind == "cifar10") {
    train = load_cifar_files(cfg.dataset.train_files, cfg.dataset.train_limit);
    test = load_cifar_files({cfg.dataset.test_file}, cfg.dataset.test_limit);
  } else {
    train = synth_toyset(cfg.dataset.n_per_class, cfg.dataset.image_size, toyset_seed(cfg, 0));
    test = synth_toyset(cfg.dataset.test_per_class, cfg.dataset.image_size, toyset_seed(cfg, 1));
    write_toyset(paths.train_archive(), train);
    write_toyset(paths.test_archive(), test);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(file_digest(paths.train_archive())));
    summary["train_digest"] = buf;
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(file_digest(paths.test_archive())));
    summary["test_digest"] = buf;
  }
  const Corpus* both[] = {&train, &test};
  const auto before = corpus_stats(both);
  normalize_corpus(train, before);
  normalize_corpus(test, before);
  const auto after = corpus_stats(both);
  summary["train_count"] = train.size();
  summary["test_count"] = test.size();
  summary["stats_before"] = stats_json(before);
  summary["stats_after"] = stats_json(after);
  write_json(paths.data_dir() / "stats.json", summary);
  char line[256];
  std::snprintf(line, sizeof(line), "%s: %zu train / %zu test images; mean %.6g std %.6g -> mean %.3g std %.6g",
                cfg.dataset.kind.c_str(), train.size(), test.size(), before.mean, before.std, after.mean, after.std);
  opts.log(line);
  return summary;
}

// ---------------------------------------------------------------------------
// train

namespace {

void truncate_log(const fs::path& path, std::uint64_t steps) {
  std::vector<TrainLogRow> rows;
  if (fs::exists(path)) rows = read_train_log(path);
  std::erase_if(rows, [steps](const TrainLogRow& r) { return r.step >= steps; });
  write_train_log(path, rows);
}

template <typename T>
nlohmann::json train_one(const ExperimentConfig& cfg, const ModelRun& run, std::size_t seed_index,
                         const Corpus& corpus, const CommandOptions& opts) {
  const RunPaths paths{cfg.out};
  const auto spec = cfg.spec_for(run);
  const auto tcfg = cfg.train_config_for(run);
  const auto ckpt_path = paths.checkpoint(run.label, seed_index);
  const auto log_path = paths.train_log(run.label, seed_index);
  fs::create_directories(paths.model_dir(run.label, seed_index));

  std::optional<Trainer<T>> trainer;
  if (fs::exists(ckpt_path)) {
    const auto ckpt = load_checkpoint(ckpt_path);
    if (ckpt.spec_hash != spec.hash()) {
      throw CheckpointError(ckpt_path.string() + " was trained with a different model spec");
    }
    trainer.emplace(ckpt, corpus, tcfg);
    truncate_log(log_path, ckpt.step());
  } else {
    trainer.emplace(spec, corpus, tcfg, cfg.run_seed(seed_index));
    write_train_log(log_path, {});
  }
  auto& tr = *trainer;
  nlohmann::json result{{"label", run.label},
                        {"seed_index", seed_index},
                        {"seed", tr.seed()},
                        {"parameter_count", tr.model().parameter_count()},
                        {"checkpoint", fs::relative(ckpt_path, cfg.out).string()}};
  opts.log(tag(run.label, seed_index) + " " + std::to_string(tr.model().parameter_count()) + " parameters");

  std::vector<TrainLogRow> pending;
  auto flush = [&] {
    save_checkpoint(ckpt_path, tr.checkpoint());
    append_train_log(log_path, pending);
    pending.clear();
  };
  std::uint64_t steps_this_run = 0;
  std::string status = "complete";
  while (!tr.finished()) {
    const auto epoch = tr.epoch();
    try {
      pending.push_back(tr.step());
    } catch (const DivergenceError&) {
      append_train_log(log_path, pending);
      opts.log(tag(run.label, seed_index) +
               (fs::exists(ckpt_path)
                    ? " diverged; keeping the checkpoint from step " + std::to_string(load_checkpoint(ckpt_path).step())
                    : std::string(" diverged before the first checkpoint")));
      throw;
    }
    ++steps_this_run;
    if (tr.epoch() != epoch) {
      double loss = 0;
      for (const auto& r : pending) loss += r.loss;
      loss /= static_cast<double>(pending.size());
      char line[160];
      std::snprintf(line, sizeof(line), " epoch %llu/%zu mean loss %.4f", static_cast<unsigned long long>(tr.epoch()),
                    tcfg.epochs, loss);
      opts.log(tag(run.label, seed_index) + line);
      flush();
    }
    if (opts.stop_after_steps && steps_this_run >= opts.stop_after_steps && !tr.finished()) {
      flush();
      status = "stopped";
      break;
    }
  }
  if (!fs::exists(ckpt_path)) flush();
  result["status"] = status;
  result["epoch"] = tr.epoch();
  result["step"] = tr.global_step();
  return result;
}

}  // namespace

nlohmann::json cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  write_json(paths.config(), cfg.to_json());
  const auto data = load_datasets(cfg);
  std::vector<nlohmann::json> results(cfg.models.size() * cfg.train.seeds);
  std::vector<std::function<void()>> tasks;
  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    for (std::size_t s = 0; s < cfg.train.seeds; ++s) {
      tasks.push_back([&, m, s] {
        results[m * cfg.train.seeds + s] = with_precision(cfg.precision, [&](auto tag_value) {
          using T = decltype(tag_value);
          return train_one<T>(cfg, cfg.models[m], s, data.train, opts);
        });
      });
    }
  }
  run_parallel(std::move(tasks), opts.jobs);
  return {{"runs", results}};
}

// ---------------------------------------------------------------------------
// eval

template <typename T>
PredictionTable evaluate_model(Model<T>& model, const Corpus& test, const TestProtocol& protocol,
                               std::uint64_t eval_seed) {
  NoGradGuard no_grad;
  const std::size_t n_img = test.size();
  const std::size_t K = model.spec().output_classes();
  auto table = PredictionTable::zeros(protocol.snrs.size() * n_img, protocol.repetitions, protocol.frames, K);
  for (std::size_t s = 0; s < protocol.snrs.size(); ++s) {
    const auto snr = protocol.snrs[s];
    for (std::size_t i = 0; i < n_img; ++i) {
      table.labels[s * n_img + i] = test[i].label;
      table.snr[s * n_img + i] = snr;
    }
    for (std::size_t r = 0; r < protocol.repetitions; ++r) {
      for (std::size_t begin = 0; begin < n_img; begin += protocol.batch_size) {
        const std::size_t end = std::min(n_img, begin + protocol.batch_size);
        std::vector<std::size_t> idx;
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = begin; i < end; ++i) {
          idx.push_back(i);
          seeds.push_back(derive_seed(eval_seed, std::bit_cast<std::uint64_t>(snr.value()), i, r));
        }
        const auto batch = make_fixed_snr_batch(test, idx, protocol.frames, snr, seeds);
        std::mt19937_64 unused(0);
        const auto out = forward_sequence(model, batch, false, unused);
        for (std::size_t b = 0; b < idx.size(); ++b) {
          for (std::size_t t = 0; t < protocol.frames; ++t) {
            auto row = table.row(s * n_img + idx[b], r, t);
            const T* src = out.probs.data() + (b * out.frames + t) * K;
            std::copy(src, src + K, row.begin());
          }
        }
      }
    }
  }
  return table;
}

template PredictionTable evaluate_model(Model<float>&, const Corpus&, const TestProtocol&, std::uint64_t);
template PredictionTable evaluate_model(Model<double>&, const Corpus&, const TestProtocol&, std::uint64_t);

nlohmann::json cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const auto data = load_datasets(cfg);
  std::vector<nlohmann::json> entries(cfg.models.size() * cfg.train.seeds);
  std::vector<std::function<void()>> tasks;
  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    for (std::size_t s = 0; s < cfg.train.seeds; ++s) {
      tasks.push_back([&, m, s] {
        const auto& run = cfg.models[m];
        const auto spec = cfg.spec_for(run);
        const auto ckpt_path = paths.checkpoint(run.label, s);
        if (!fs::exists(ckpt_path)) throw std::runtime_error("missing checkpoint " + ckpt_path.string());
        const auto ckpt = load_checkpoint(ckpt_path);
        if (ckpt.spec_hash != spec.hash()) {
          throw CheckpointError("spec/checkpoint hash mismatch for " + ckpt_path.string());
        }
        if (static_cast<int>(ckpt.precision) != cfg.precision) {
          throw CheckpointError(ckpt_path.string() + " holds " + std::to_string(ckpt.precision) +
                                "-bit values but the config asks for " + std::to_string(cfg.precision));
        }
        if (ckpt.epoch() < cfg.train.epochs) {
          opts.log(tag(run.label, s) + " warning: checkpoint has only " + std::to_string(ckpt.epoch()) + " epochs");
        }
        auto table = with_precision(cfg.precision, [&](auto tag_value) {
          using T = decltype(tag_value);
          auto model = model_from_checkpoint<T>(ckpt);
          return evaluate_model(model, data.test, cfg.test, cfg.eval_seed());
        });
        table.model = run.label;
        table.seed = ckpt.meta.at("seed").get<std::uint64_t>();
        const auto out = paths.predictions(run.label, s);
        fs::create_directories(out.parent_path());
        write_prediction_csv(out, table, cfg.precision);
        const auto acc = accuracy_curves(table, false);
        char line[160];
        std::snprintf(line, sizeof(line), " last-frame accuracy %.1f%% at SNR %s, %.1f%% at SNR %s",
                      acc.percent.front().back(), acc.snrs.front().label().c_str(), acc.percent.back().back(),
                      acc.snrs.back().label().c_str());
        opts.log(tag(run.label, s) + line);
        entries[m * cfg.train.seeds + s] = {{"label", run.label},
                                            {"seed_index", s},
                                            {"seed", table.seed},
                                            {"stateless", !spec.recurrent()},
                                            {"spec_hash", spec.hash()},
                                            {"path", fs::relative(out, paths.predictions_dir()).string()}};
      });
    }
  }
  run_parallel(std::move(tasks), opts.jobs);
  nlohmann::json manifest{{"precision", cfg.precision},
                          {"frames", cfg.test.frames},
                          {"repetitions", cfg.test.repetitions},
                          {"snrs", snr_list_json(cfg.test.snrs)},
                          {"entries", entries}};
  write_json(paths.manifest(), manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// report

namespace {

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::string& header) : os_(path, std::ios::binary | std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    os_ << header << '\n';
  }
  template <typename... Args>
  void row(const Args&... args) {
    bool first = true;
    ((os_ << (first ? "" : ",") << cell(args), first = false), ...);
    os_ << '\n';
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, r.ptr};
  }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "true" : "false"; }
  std::ofstream os_;
};

PredictionTable concat_tables(const std::vector<PredictionTable>& tables) {
  if (tables.size() == 1) return tables[0];
  std::size_t items = 0;
  for (const auto& t : tables) {
    if (t.reps != tables[0].reps || t.frames != tables[0].frames || t.classes != tables[0].classes) {
      throw std::invalid_argument("tables of one model disagree in shape");
    }
    items += t.items;
  }
  auto out = PredictionTable::zeros(items, tables[0].reps, tables[0].frames, tables[0].classes);
  out.model = tables[0].model;
  out.probs.clear();
  out.labels.clear();
  out.snr.clear();
  for (const auto& t : tables) {
    out.probs.insert(out.probs.end(), t.probs.begin(), t.probs.end());
    out.labels.insert(out.labels.end(), t.labels.begin(), t.labels.end());
    out.snr.insert(out.snr.end(), t.snr.begin(), t.snr.end());
  }
  return out;
}

nlohmann::json fit_json(const ExpFitResult& f) {
  return {{"a", f.a},
          {"c", f.c},
          {"tau", f.tau},
          {"amplitude", f.amplitude},
          {"residual_norm", f.residual_norm},
          {"converged", f.converged}};
}

nlohmann::json curves_json(const AccuracyCurves& c) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t s = 0; s < c.snrs.size(); ++s) j[c.snrs[s].label()] = c.percent[s];
  return j;
}

}  // namespace

nlohmann::json build_report(const ReportInput& in, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json report{{"code_version", kCodeVersion}};
  std::vector<std::string> gaps = in.gaps;
  nlohmann::json models = nlohmann::json::object();
  nlohmann::json accuracy = nlohmann::json::object();
  nlohmann::json fits = nlohmann::json::object();
  nlohmann::json rejection = nlohmann::json::object();
  nlohmann::json reliability = nlohmann::json::object();
  nlohmann::json calibration = nlohmann::json::object();
  nlohmann::json cdf = nlohmann::json::object();
  std::vector<AccuracyCurves> primary_curves(in.labels.size());

  CsvWriter acc_csv(dir / "accuracy.csv", "model,snr,frame,raw,bayes,primary");
  CsvWriter last_csv(dir / "last_frame.csv", "model,snr,raw,bayes,primary");
  CsvWriter fit_csv(dir / "exp_fits.csv", "model,snr,seed,a,c,tau,amplitude,residual_norm,converged");
  CsvWriter rej_csv(dir / "rejection.csv", "model,snr,frame,rate");
  CsvWriter rel_csv(dir / "reliability.csv", "model,bin,lo_percentile,hi_percentile,mean_prob,fraction_positive,count");
  CsvWriter cal_csv(dir / "calibration.csv", "model,a,c,r2,bins_used,converged");
  CsvWriter cdf_csv(dir / "cdf.csv", "model,selection,calibrated,value,cumulative");

  for (std::size_t m = 0; m < in.labels.size(); ++m) {
    const auto& label = in.labels[m];
    const auto& tables = in.tables[m];
    if (tables.empty()) {
      gaps.push_back("no prediction tables for " + label);
      continue;
    }
    const bool stateless = in.stateless[m];
    models[label] = {{"stateless", stateless}, {"primary", stateless ? "bayes" : "raw"}, {"seeds", tables.size()}};

    std::vector<PredictionTable> primary;
    for (const auto& t : tables) primary.push_back(stateless ? bayes_folded(t) : t);
    const auto raw = accuracy_curves(tables, false);
    const auto bayes = accuracy_curves(tables, true);
    const auto& prim = stateless ? bayes : raw;
    primary_curves[m] = prim;

    nlohmann::json last = nlohmann::json::object();
    for (std::size_t s = 0; s < raw.snrs.size(); ++s) {
      const auto snr = raw.snrs[s].label();
      for (std::size_t f = 0; f < raw.percent[s].size(); ++f) {
        acc_csv.row(label, snr, f, raw.percent[s][f], bayes.percent[s][f], prim.percent[s][f]);
      }
      last[snr] = {{"raw", raw.percent[s].back()}, {"bayes", bayes.percent[s].back()}, {"primary", prim.percent[s].back()}};
      last_csv.row(label, snr, raw.percent[s].back(), bayes.percent[s].back(), prim.percent[s].back());
    }
    accuracy[label] = {{"raw", curves_json(raw)}, {"bayes", curves_json(bayes)}, {"primary", curves_json(prim)}, {"last_frame", last}};

    // Integration-time fits on the primary curve, pooled and per seed.
    nlohmann::json model_fits = nlohmann::json::object();
    for (std::size_t s = 0; s < prim.snrs.size(); ++s) {
      const auto snr = prim.snrs[s].label();
      nlohmann::json entry;
      try {
        const auto pooled = fit_integration(prim.percent[s]);
        entry["pooled"] = fit_json(pooled);
        fit_csv.row(label, snr, "pooled", pooled.a, pooled.c, pooled.tau, pooled.amplitude, pooled.residual_norm,
                    pooled.converged);
        nlohmann::json per_seed = nlohmann::json::array();
        for (std::size_t k = 0; k < tables.size(); ++k) {
          const auto curve = accuracy_curves(primary[k], false).at(prim.snrs[s]);
          const auto f = fit_integration(curve);
          per_seed.push_back(fit_json(f));
          fit_csv.row(label, snr, std::to_string(k), f.a, f.c, f.tau, f.amplitude, f.residual_norm, f.converged);
        }
        entry["per_seed"] = per_seed;
        model_fits[snr] = entry;
      } catch (const std::exception& e) {
        gaps.push_back("exp fit for " + label + " at SNR " + snr + ": " + e.what());
      }
    }
    fits[label] = model_fits;

    const auto pooled_table = concat_tables(primary);
    const std::size_t last_frame = pooled_table.frames - 1;

    try {
      const auto rates = false_rejection_rates(pooled_table, 20.0);
      nlohmann::json by_snr = nlohmann::json::object();
      for (std::size_t s = 0; s < rates.snrs.size(); ++s) {
        by_snr[rates.snrs[s].label()] = rates.rate[s];
        for (std::size_t f = 0; f < rates.rate[s].size(); ++f) rej_csv.row(label, rates.snrs[s].label(), f, rates.rate[s][f]);
      }
      rejection[label] = {{"percentile", 20.0}, {"by_snr", by_snr}};
    } catch (const std::exception& e) {
      gaps.push_back("rejection rates for " + label + ": " + e.what());
    }

    std::optional<CalibrationFit> cal;
    try {
      const auto bins = reliability_bins(pooled_table, last_frame);
      nlohmann::json bins_json = nlohmann::json::array();
      for (std::size_t b = 0; b < bins.size(); ++b) {
        const auto& bin = bins[b];
        bins_json.push_back({{"lo_percentile", bin.lo_percentile},
                             {"hi_percentile", bin.hi_percentile},
                             {"mean_prob", bin.mean_prob},
                             {"fraction_positive", bin.fraction_positive},
                             {"count", bin.count}});
        rel_csv.row(label, b, bin.lo_percentile, bin.hi_percentile, bin.mean_prob, bin.fraction_positive, bin.count);
      }
      reliability[label] = {{"frame", last_frame}, {"bins", bins_json}};
      try {
        cal = fit_calibration(bins);
        calibration[label] = {{"a", cal->a}, {"c", cal->c}, {"r2", cal->r2}, {"bins_used", cal->bins_used}, {"converged", cal->converged}};
        cal_csv.row(label, cal->a, cal->c, cal->r2, cal->bins_used, cal->converged);
      } catch (const std::exception& e) {
        gaps.push_back("calibration for " + label + ": " + e.what());
      }
    } catch (const std::exception& e) {
      gaps.push_back("reliability for " + label + ": " + e.what());
    }

    const auto cdf_table = cal ? calibrate(pooled_table, *cal) : pooled_table;
    nlohmann::json model_cdf{{"frame", last_frame}, {"calibrated", cal.has_value()}};
    for (auto which : {CdfSelection::Positive, CdfSelection::Negative}) {
      const char* name = which == CdfSelection::Positive ? "positive" : "negative";
      const auto c = confidence_cdf(cdf_table, last_frame, which);
      nlohmann::json samples = nlohmann::json::array();
      for (const auto& [v, frac] : c.samples()) {
        samples.push_back({v, frac});
        cdf_csv.row(label, name, cal.has_value(), v, frac);
      }
      model_cdf[name] = {{"fraction_above_0.4", c.fraction_above(0.4)},
                         {"fraction_below_0.01", c.fraction_below(0.01)},
                         {"count", c.sorted.size()},
                         {"samples", samples}};
    }
    cdf[label] = model_cdf;
  }

  nlohmann::json differences = nlohmann::json::array();
  CsvWriter diff_csv(dir / "differences.csv", "a,b,snr,frame,difference");
  for (const auto& [a, b] : in.comparisons) {
    const auto ia = std::find(in.labels.begin(), in.labels.end(), a);
    const auto ib = std::find(in.labels.begin(), in.labels.end(), b);
    if (ia == in.labels.end() || ib == in.labels.end() || in.tables[ia - in.labels.begin()].empty() ||
        in.tables[ib - in.labels.begin()].empty()) {
      gaps.push_back("comparison " + a + " - " + b + ": missing model");
      continue;
    }
    const auto d = difference(primary_curves[ia - in.labels.begin()], primary_curves[ib - in.labels.begin()]);
    for (std::size_t s = 0; s < d.snrs.size(); ++s) {
      for (std::size_t f = 0; f < d.percent[s].size(); ++f) diff_csv.row(a, b, d.snrs[s].label(), f, d.percent[s][f]);
    }
    differences.push_back({{"a", a}, {"b", b}, {"curves", curves_json(d)}});
  }

  report["models"] = models;
  report["accuracy_curves"] = accuracy;
  report["differences"] = differences;
  report["exp_fits"] = fits;
  report["rejection_rates"] = rejection;
  report["reliability"] = reliability;
  report["calibration"] = calibration;
  report["cdf"] = cdf;
  report["gaps"] = gaps;
  return report;
}

nlohmann::json cmd_report(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const RunPaths paths{cfg.out};
  if (!fs::exists(paths.manifest())) throw std::runtime_error("no prediction manifest at " + paths.manifest().string());
  const auto manifest = read_json(paths.manifest());
  const int precision = manifest.value("precision", 64);
  ReportInput in;
  in.comparisons = cfg.comparisons;
  for (const auto& e : manifest.at("entries")) {
    if (e.is_null()) continue;
    const auto label = e.at("label").get<std::string>();
    auto it = std::find(in.labels.begin(), in.labels.end(), label);
    if (it == in.labels.end()) {
      in.labels.push_back(label);
      in.tables.emplace_back();
      in.stateless.push_back(e.at("stateless").get<bool>());
      it = in.labels.end() - 1;
    }
    const auto path = paths.predictions_dir() / e.at("path").get<std::string>();
    if (!fs::exists(path)) {
      in.gaps.push_back("missing prediction table " + path.string());
      continue;
    }
    auto table = read_prediction_csv(path, precision);
    table.model = label;
    table.seed = e.at("seed").get<std::uint64_t>();
    in.tables[static_cast<std::size_t>(it - in.labels.begin())].push_back(std::move(table));
  }
  auto report = build_report(in, paths.report_dir());
  write_json(paths.report_dir() / "report.json", report);
  opts.log("report written to " + (paths.report_dir() / "report.json").string() +
           (report["gaps"].empty() ? "" : " with " + std::to_string(report["gaps"].size()) + " gaps"));
  return report;
}

}  // namespace grucnn
