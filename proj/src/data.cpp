#include "grucnn/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace grucnn {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

// ---------------------------------------------------------------------------
// SNR levels

SnrLevel::SnrLevel(double value) : value_(value) {
  if (!(value > 0) || !std::isfinite(value)) {
    throw std::invalid_argument("SNR must be positive and finite, got " + std::to_string(value));
  }
}

std::string SnrLevel::label() const {
  const double lg = std::log2(value_);
  if (std::abs(lg - std::round(lg)) < 1e-12) {
    const long e = std::lround(lg);
    if (e >= 0) return std::to_string(1L << e);
    return "1/" + std::to_string(1L << (-e));
  }
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), value_);
  return {buf, r.ptr};
}

SnrLevel SnrLevel::parse(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash == std::string::npos) return SnrLevel(std::stod(text));
    const double num = std::stod(text.substr(0, slash));
    const double den = std::stod(text.substr(slash + 1));
    return SnrLevel(num / den);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("cannot parse SNR '" + text + "'");
  }
}

std::vector<SnrLevel> default_training_snrs() {
  return {SnrLevel(64), SnrLevel(16), SnrLevel(4), SnrLevel(1), SnrLevel(0.5), SnrLevel(0.25), SnrLevel(0.125)};
}

std::vector<SnrLevel> low_training_snrs() {
  return {SnrLevel(16),   SnrLevel(4),      SnrLevel(1),       SnrLevel(0.5),
          SnrLevel(0.25), SnrLevel(0.125), SnrLevel(0.0625), SnrLevel(0.03125)};
}

// ---------------------------------------------------------------------------
// CIFAR-10

namespace {
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace

Corpus parse_cifar10(std::span<const std::uint8_t> bytes) {
  Corpus out;
  const std::size_t n = bytes.size() / kCifarRecord;
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kCifarRecord;
    const std::uint8_t label = bytes[off];
    if (label >= kNumClasses) {
      throw DataFormatError("CIFAR-10 label byte " + std::to_string(label) + " > 9", off);
    }
    LabeledImage img;
    img.channels = 3;
    img.height = kCifarSide;
    img.width = kCifarSide;
    img.label = label;
    img.pixels.resize(kCifarPixels);
    for (std::size_t i = 0; i < kCifarPixels; ++i) img.pixels[i] = bytes[off + 1 + i];
    out.push_back(std::move(img));
  }
  if (bytes.size() % kCifarRecord != 0) {
    throw DataFormatError("truncated CIFAR-10 record: " + std::to_string(bytes.size() % kCifarRecord) +
                              " trailing bytes",
                          n * kCifarRecord);
  }
  return out;
}

Corpus load_cifar10(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_cifar10(bytes);
}

// ---------------------------------------------------------------------------
// normalisation

CorpusStats corpus_stats(std::span<const Corpus* const> corpora) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto* c : corpora) {
    for (const auto& img : *c) {
      for (double v : img.pixels) sum += v;
      count += img.pixels.size();
    }
  }
  if (count == 0) throw std::invalid_argument("cannot normalise an empty corpus");
  const double mean = sum / static_cast<double>(count);
  double ss = 0;
  for (const auto* c : corpora) {
    for (const auto& img : *c) {
      for (double v : img.pixels) ss += (v - mean) * (v - mean);
    }
  }
  const double sd = std::sqrt(ss / static_cast<double>(count));
  if (!(sd > 0)) throw std::invalid_argument("corpus has zero pixel variance");
  return {mean, sd};
}

void normalize_corpus(Corpus& corpus, const CorpusStats& stats) {
  for (auto& img : corpus) {
    for (auto& v : img.pixels) v = (v - stats.mean) / stats.std;
  }
}

PreprocessedCorpus preprocess_corpus(Corpus images) {
  const Corpus* one[] = {&images};
  const auto stats = corpus_stats(one);
  normalize_corpus(images, stats);
  return {std::move(images), stats};
}

// ---------------------------------------------------------------------------
// toyset

Corpus synth_toyset(std::size_t n_per_class, std::size_t image_size, std::uint64_t seed) {
  if (image_size < 8) throw std::invalid_argument("toyset image_size must be at least 8");
  std::mt19937_64 rng(seed);
  auto uni = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::normal_distribution<double> pixel_noise(0.0, 0.05);
  const double S = static_cast<double>(image_size);
  const std::size_t plane = image_size * image_size;
  constexpr double two_pi = 2.0 * std::numbers::pi;

  Corpus out;
  out.reserve(n_per_class * kNumClasses);
  std::vector<double> mask(plane);
  for (int k = 0; k < kNumClasses; ++k) {
    for (std::size_t n = 0; n < n_per_class; ++n) {
      const double cx = uni(0.3 * S, 0.7 * S);
      const double cy = uni(0.3 * S, 0.7 * S);
      const double phase = uni(0.0, two_pi);
      const double period = uni(4.0, 6.0);
      const double radius = uni(3.0, 5.0) * S / 16.0;
      const double cell = uni(3.0, 4.5) * S / 16.0;
      const double half = uni(4.0, 6.0) * S / 16.0;
      for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
          const double xs = static_cast<double>(x);
          const double ys = static_cast<double>(y);
          const double dx = xs - cx;
          const double dy = ys - cy;
          bool on = false;
          switch (k) {
            case 0: on = std::sin(two_pi * ys / period + phase) > 0; break;
            case 1: on = std::sin(two_pi * xs / period + phase) > 0; break;
            case 2: on = std::sin(two_pi * (xs + ys) / (period * std::numbers::sqrt2) + phase) > 0; break;
            case 3: on = std::sin(two_pi * (xs - ys) / (period * std::numbers::sqrt2) + phase) > 0; break;
            case 4: on = dx * dx + dy * dy < radius * radius; break;
            case 5: {
              const double d = std::sqrt(dx * dx + dy * dy);
              const double r = radius + 1.0;
              on = d < r && d > r - 2.0;
              break;
            }
            case 6: on = std::abs(dx) < 1.2 || std::abs(dy) < 1.2; break;
            case 7: on = std::abs(dx - dy) < 1.5 || std::abs(dx + dy) < 1.5; break;
            case 8: {
              const auto cxi = static_cast<long>(std::floor((xs + phase) / cell));
              const auto cyi = static_cast<long>(std::floor((ys + 2 * phase) / cell));
              on = ((cxi + cyi) % 2) == 0;
              break;
            }
            default: {
              const bool outer = std::abs(dx) < half && std::abs(dy) < half;
              const bool inner = std::abs(dx) < half - 2.0 && std::abs(dy) < half - 2.0;
              on = outer && !inner;
              break;
            }
          }
          mask[y * image_size + x] = on ? 1.0 : 0.0;
        }
      }
      LabeledImage img;
      img.channels = 3;
      img.height = image_size;
      img.width = image_size;
      img.label = k;
      img.pixels.resize(3 * plane);
      double tint[3], bg[3];
      for (double& t : tint) t = uni(0.4, 1.0);
      for (double& b : bg) b = uni(0.0, 0.3);
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
          img.pixels[c * plane + i] = bg[c] + (tint[c] - bg[c]) * mask[i] + pixel_noise(rng);
        }
      }
      out.push_back(std::move(img));
    }
  }
  return out;
}

namespace {
constexpr char kToyMagic[8] = {'G', 'C', 'T', 'O', 'Y', 'S', 'E', 'T'};
constexpr std::uint32_t kToyVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::span<const std::uint8_t> bytes, std::size_t& off) {
  if (off + sizeof(V) > bytes.size()) throw DataFormatError("unexpected end of toyset archive", off);
  V v;
  std::memcpy(&v, bytes.data() + off, sizeof(V));
  off += sizeof(V);
  return v;
}
}  // namespace

void write_toyset(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kToyMagic, sizeof(kToyMagic));
  put<std::uint32_t>(os, kToyVersion);
  const std::uint32_t c = corpus.empty() ? 3 : static_cast<std::uint32_t>(corpus[0].channels);
  const std::uint32_t h = corpus.empty() ? 0 : static_cast<std::uint32_t>(corpus[0].height);
  const std::uint32_t w = corpus.empty() ? 0 : static_cast<std::uint32_t>(corpus[0].width);
  put(os, c);
  put(os, h);
  put(os, w);
  put<std::uint64_t>(os, corpus.size());
  for (const auto& img : corpus) {
    put<std::uint8_t>(os, static_cast<std::uint8_t>(img.label));
    for (double v : img.pixels) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Corpus read_toyset(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::span<const std::uint8_t> b(bytes);
  if (b.size() < sizeof(kToyMagic) || std::memcmp(b.data(), kToyMagic, sizeof(kToyMagic)) != 0) {
    throw DataFormatError("not a toyset archive (bad magic)", 0);
  }
  std::size_t off = sizeof(kToyMagic);
  const auto version = get<std::uint32_t>(b, off);
  if (version != kToyVersion) throw DataFormatError("unsupported toyset version " + std::to_string(version), 8);
  const auto c = get<std::uint32_t>(b, off);
  const auto h = get<std::uint32_t>(b, off);
  const auto w = get<std::uint32_t>(b, off);
  const auto count = get<std::uint64_t>(b, off);
  const std::size_t px = static_cast<std::size_t>(c) * h * w;
  Corpus out;
  out.reserve(std::min<std::uint64_t>(count, b.size() / (1 + px * sizeof(float))));
  for (std::uint64_t i = 0; i < count; ++i) {
    LabeledImage img;
    img.channels = c;
    img.height = h;
    img.width = w;
    const std::size_t rec = off;
    img.label = get<std::uint8_t>(b, off);
    if (img.label >= kNumClasses) throw DataFormatError("toyset label out of range", rec);
    if (off + px * sizeof(float) > b.size()) throw DataFormatError("truncated toyset record", rec);
    img.pixels.resize(px);
    for (std::size_t j = 0; j < px; ++j) img.pixels[j] = get<float>(b, off);
    out.push_back(std::move(img));
  }
  if (off != b.size()) throw DataFormatError("trailing bytes after toyset records", off);
  return out;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  std::uint64_t h = 14695981039346656037ULL;
  for (auto byte : read_file(path)) {
    h ^= byte;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// sequences

LabeledImage jitter_frame(const LabeledImage& image, int dx, int dy) {
  if (std::abs(dx) > kMaxJitter || std::abs(dy) > kMaxJitter) {
    throw std::out_of_range("jitter offset (" + std::to_string(dx) + ", " + std::to_string(dy) +
                            ") exceeds " + std::to_string(kMaxJitter) + " pixels");
  }
  LabeledImage out = image;
  const long H = static_cast<long>(image.height);
  const long W = static_cast<long>(image.width);
  for (std::size_t c = 0; c < image.channels; ++c) {
    const double* src = image.pixels.data() + c * image.height * image.width;
    double* dst = out.pixels.data() + c * image.height * image.width;
    for (long y = 0; y < H; ++y) {
      const long sy = std::clamp(y - dy, 0L, H - 1);
      for (long x = 0; x < W; ++x) {
        const long sx = std::clamp(x - dx, 0L, W - 1);
        dst[y * W + x] = src[sy * W + sx];
      }
    }
  }
  return out;
}

Sequence make_sequence(const LabeledImage& image, std::size_t frames, SnrLevel snr, std::uint64_t seed,
                       double signal_variance) {
  if (frames < 1) throw std::invalid_argument("a sequence needs at least one frame");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> offset(-kMaxJitter, kMaxJitter);
  std::normal_distribution<double> noise(0.0, std::sqrt(signal_variance / snr.value()));
  Sequence seq;
  seq.frames = frames;
  const std::size_t n = image.size();
  seq.pixels.resize(frames * n);
  for (std::size_t t = 0; t < frames; ++t) {
    const int dx = offset(rng);
    const int dy = offset(rng);
    seq.offsets.emplace_back(dx, dy);
    const auto shifted = jitter_frame(image, dx, dy);
    double* dst = seq.pixels.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] = shifted.pixels[i] + noise(rng);
  }
  double sum = 0;
  for (double v : seq.pixels) sum += v;
  const double mu = sum / static_cast<double>(seq.pixels.size());
  double ss = 0;
  for (double v : seq.pixels) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / static_cast<double>(seq.pixels.size()));
  for (auto& v : seq.pixels) v = sd > 0 ? (v - mu) / sd : 0.0;
  return seq;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  h = mix(h ^ a);
  h = mix(h ^ b);
  return mix(h ^ c);
}

ImageSequenceBatch make_sequence_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                                       std::size_t frames, std::span<const SnrLevel> snr_set,
                                       std::uint64_t seed) {
  if (snr_set.empty()) throw std::invalid_argument("snr_set must not be empty");
  if (indices.empty()) throw std::invalid_argument("batch must contain at least one item");
  const auto& first = corpus.at(indices[0]);
  ImageSequenceBatch out;
  out.batch = indices.size();
  out.frames = frames;
  out.channels = first.channels;
  out.height = first.height;
  out.width = first.width;
  out.seed = seed;
  const std::size_t per_item = frames * first.size();
  out.pixels.resize(out.batch * per_item);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = corpus.at(indices[i]);
    const std::uint64_t item_seed = derive_seed(seed, i);
    std::mt19937_64 pick(item_seed);
    const auto choice = std::uniform_int_distribution<std::size_t>(0, snr_set.size() - 1)(pick);
    const auto snr = snr_set[choice];
    auto seq = make_sequence(img, frames, snr, derive_seed(item_seed, 1));
    std::copy(seq.pixels.begin(), seq.pixels.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i * per_item));
    out.labels.push_back(img.label);
    out.snr.push_back(snr);
  }
  return out;
}

ImageSequenceBatch make_fixed_snr_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                                        std::size_t frames, SnrLevel snr, std::span<const std::uint64_t> seeds) {
  if (indices.empty()) throw std::invalid_argument("batch must contain at least one item");
  if (seeds.size() != indices.size()) throw std::invalid_argument("need one seed per item");
  const auto& first = corpus.at(indices[0]);
  ImageSequenceBatch out;
  out.batch = indices.size();
  out.frames = frames;
  out.channels = first.channels;
  out.height = first.height;
  out.width = first.width;
  const std::size_t per_item = frames * first.size();
  out.pixels.resize(out.batch * per_item);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = corpus.at(indices[i]);
    auto seq = make_sequence(img, frames, snr, seeds[i]);
    std::copy(seq.pixels.begin(), seq.pixels.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i * per_item));
    out.labels.push_back(img.label);
    out.snr.push_back(snr);
  }
  return out;
}

ImageSequenceBatch make_training_batch(const Corpus& corpus, std::size_t batch, std::size_t frames,
                                       std::span<const SnrLevel> snr_set, std::mt19937_64& rng) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = pick(rng);
  return make_sequence_batch(corpus, idx, frames, snr_set, rng());
}

}  // namespace grucnn
