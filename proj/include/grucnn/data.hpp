#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace grucnn {

/// Malformed on-disk data. `offset` is the byte position where parsing failed.
class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr int kNumClasses = 10;

/// Channel-planar image [channels, height, width].
struct LabeledImage {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  int label = 0;

  std::size_t size() const { return channels * height * width; }
};

using Corpus = std::vector<LabeledImage>;

/// Signal-to-noise ratio as signal variance over noise variance.
class SnrLevel {
 public:
  explicit SnrLevel(double value);
  double value() const { return value_; }
  /// "64", "1/16", or a decimal for values that are not powers of two.
  std::string label() const;
  static SnrLevel parse(const std::string& text);
  bool operator==(const SnrLevel&) const = default;

 private:
  double value_;
};

std::vector<SnrLevel> default_training_snrs();  // 64, 16, 4, 1, 1/2, 1/4, 1/8
std::vector<SnrLevel> low_training_snrs();      // 16, 4, 1, 1/2, 1/4, 1/8, 1/16, 1/32

// ---------------------------------------------------------------------------
// Ingestion

/// CIFAR-10 binary batch: records of 1 label byte followed by 1024 R, 1024 G
/// and 1024 B bytes, each plane row-major. Pixels map to [0, 255].
Corpus load_cifar10(const std::filesystem::path& path);
Corpus parse_cifar10(std::span<const std::uint8_t> bytes);

struct CorpusStats {
  double mean = 0;
  double std = 1;
};

/// Global scalar mean/std over every pixel of every image in all corpora.
CorpusStats corpus_stats(std::span<const Corpus* const> corpora);

/// Subtracts `stats.mean` and divides by `stats.std` in place.
void normalize_corpus(Corpus& corpus, const CorpusStats& stats);

struct PreprocessedCorpus {
  Corpus images;
  CorpusStats stats;
};

/// Computes the global statistics of `images` and applies them.
PreprocessedCorpus preprocess_corpus(Corpus images);

/// Procedural ten-class stand-in for CIFAR-10: gratings at four orientations,
/// disks, rings, plus-crosses, X-crosses, checkerboards, and square outlines,
/// each with random position/phase/size, random tint, and mild pixel noise.
/// Deterministic in `seed`. Labels come in class order, `n_per_class` each.
Corpus synth_toyset(std::size_t n_per_class, std::size_t image_size, std::uint64_t seed);

/// Binary toyset archive; layout documented in docs/formats.md.
void write_toyset(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_toyset(const std::filesystem::path& path);

/// 64-bit FNV-1a over a file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Sequence construction

inline constexpr int kMaxJitter = 3;

/// Translates by (dx, dy); vacated pixels copy the nearest valid pixel.
LabeledImage jitter_frame(const LabeledImage& image, int dx, int dy);

struct Sequence {
  std::size_t frames = 0;
  std::vector<double> pixels;  // [frames, channels, height, width]
  std::vector<std::pair<int, int>> offsets;
};

/// T jittered, noise-corrupted copies of `image`, standardised jointly to
/// mean 0 / std 1. Noise variance is `signal_variance / snr`.
/// A pure function of its arguments.
Sequence make_sequence(const LabeledImage& image, std::size_t frames, SnrLevel snr, std::uint64_t seed,
                       double signal_variance = 1.0);

/// Stateless seed mixing (SplitMix64 finaliser over the combined words).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

struct ImageSequenceBatch {
  std::size_t batch = 0;
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // [batch, frames, channels, height, width]
  std::vector<int> labels;
  std::vector<SnrLevel> snr;
  std::uint64_t seed = 0;

  std::size_t frame_size() const { return channels * height * width; }
};

/// One sequence per listed corpus index. Item i draws its SNR uniformly from
/// `snr_set` and its noise from derive_seed(seed, i), so items can be built in
/// any order with identical results.
ImageSequenceBatch make_sequence_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                                       std::size_t frames, std::span<const SnrLevel> snr_set,
                                       std::uint64_t seed);

/// One sequence per listed corpus index, all at `snr`, item i seeded by
/// `seeds[i]`.
ImageSequenceBatch make_fixed_snr_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                                        std::size_t frames, SnrLevel snr, std::span<const std::uint64_t> seeds);

/// Batch of `batch` randomly chosen corpus images.
ImageSequenceBatch make_training_batch(const Corpus& corpus, std::size_t batch, std::size_t frames,
                                       std::span<const SnrLevel> snr_set, std::mt19937_64& rng);

}  // namespace grucnn
