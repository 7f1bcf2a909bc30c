#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "grucnn/data.hpp"
#include "grucnn/ops.hpp"
#include "grucnn/train.hpp"
#include "oracles.hpp"

using namespace grucnn;
using grucnn::testing::sequence_mean;
using grucnn::testing::sequence_std;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "grucnn_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> random_cifar_bytes(std::size_t records, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> b(records * 3073);
  for (std::size_t r = 0; r < records; ++r) {
    b[r * 3073] = static_cast<std::uint8_t>(rng() % 10);
    for (std::size_t i = 1; i < 3073; ++i) b[r * 3073 + i] = static_cast<std::uint8_t>(rng());
  }
  return b;
}

}  // namespace

TEST(SnrLevel, LabelsAndParsing) {
  EXPECT_EQ(SnrLevel(64).label(), "64");
  EXPECT_EQ(SnrLevel(1.0 / 16).label(), "1/16");
  EXPECT_EQ(SnrLevel(1).label(), "1");
  EXPECT_EQ(SnrLevel(3).label(), "3");
  EXPECT_EQ(SnrLevel::parse("1/32"), SnrLevel(1.0 / 32));
  EXPECT_EQ(SnrLevel::parse("0.25"), SnrLevel(0.25));
  EXPECT_THROW(SnrLevel(0), std::invalid_argument);
  EXPECT_THROW(SnrLevel(-1), std::invalid_argument);
  EXPECT_THROW(SnrLevel::parse("abc"), std::invalid_argument);
}

TEST(SnrLevel, TrainingSets) {
  std::vector<double> def, low;
  for (auto s : default_training_snrs()) def.push_back(s.value());
  for (auto s : low_training_snrs()) low.push_back(s.value());
  EXPECT_EQ(def, (std::vector<double>{64, 16, 4, 1, 0.5, 0.25, 0.125}));
  EXPECT_EQ(low, (std::vector<double>{16, 4, 1, 0.5, 0.25, 0.125, 0.0625, 0.03125}));
}

TEST(Cifar10, EmptyAndCounts) {
  EXPECT_TRUE(parse_cifar10({}).empty());
  const auto b = random_cifar_bytes(2, 1);
  const auto c = parse_cifar10(b);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].channels, 3u);
  EXPECT_EQ(c[0].height, 32u);
  EXPECT_EQ(c[0].width, 32u);
}

TEST(Cifar10, MatchesReferenceParser) {
  const auto b = random_cifar_bytes(5, 2);
  const auto p = temp_path("batch.bin");
  write_bytes(p, b);
  const auto c = load_cifar10(p);
  ASSERT_EQ(c.size(), 5u);
  // Reference: record r, channel ch, row y, column x at r*3073 + 1 + ch*1024 + y*32 + x.
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(c[r].label, b[r * 3073]);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x)
          ASSERT_EQ(c[r].pixels[(ch * 32 + y) * 32 + x], static_cast<double>(b[r * 3073 + 1 + ch * 1024 + y * 32 + x]));
  }
}

TEST(Cifar10, FormatErrorsCarryOffsets) {
  auto b = random_cifar_bytes(2, 3);
  b.resize(3073 + 100);
  try {
    parse_cifar10(b);
    FAIL();
  } catch (const DataFormatError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
  auto bad = random_cifar_bytes(3, 4);
  bad[2 * 3073] = 11;
  try {
    parse_cifar10(bad);
    FAIL();
  } catch (const DataFormatError& e) {
    EXPECT_EQ(e.offset(), 2u * 3073u);
  }
  EXPECT_THROW(load_cifar10(temp_path("does_not_exist.bin")), std::runtime_error);
}

TEST(Preprocess, HandComputedTwoPixelCorpus) {
  Corpus c{{1, 1, 1, {0.0}, 0}, {1, 1, 1, {2.0}, 1}};
  const auto out = preprocess_corpus(c);
  EXPECT_DOUBLE_EQ(out.stats.mean, 1.0);
  EXPECT_DOUBLE_EQ(out.stats.std, 1.0);
  EXPECT_DOUBLE_EQ(out.images[0].pixels[0], -1.0);
  EXPECT_DOUBLE_EQ(out.images[1].pixels[0], 1.0);
}

TEST(Preprocess, Errors) {
  EXPECT_THROW(preprocess_corpus({}), std::invalid_argument);
  Corpus flat{{1, 2, 2, {3, 3, 3, 3}, 0}, {1, 2, 2, {3, 3, 3, 3}, 1}};
  EXPECT_THROW(preprocess_corpus(flat), std::invalid_argument);
}

TEST(Preprocess, OutputIsStandardized) {
  auto pre = preprocess_corpus(synth_toyset(20, 16, 9));
  std::vector<double> all;
  for (const auto& img : pre.images) all.insert(all.end(), img.pixels.begin(), img.pixels.end());
  EXPECT_NEAR(sequence_mean(all), 0.0, 1e-6);
  EXPECT_NEAR(sequence_std(all), 1.0, 1e-6);
}

TEST(Toyset, DeterministicAndBalanced) {
  const auto a = synth_toyset(5, 16, 42);
  const auto b = synth_toyset(5, 16, 42);
  ASSERT_EQ(a.size(), 50u);
  std::map<int, int> per_class;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].pixels, b[i].pixels);
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].height, 16u);
    ++per_class[a[i].label];
  }
  EXPECT_EQ(per_class.size(), 10u);
  for (auto [k, n] : per_class) EXPECT_EQ(n, 5);
  EXPECT_NE(synth_toyset(5, 16, 43)[0].pixels, a[0].pixels);
  EXPECT_THROW(synth_toyset(5, 7, 1), std::invalid_argument);
}

TEST(Toyset, ArchiveRoundTripAndDigest) {
  const auto c = synth_toyset(3, 8, 5);
  const auto p = temp_path("toy.gcts");
  write_toyset(p, c);
  const auto d1 = file_digest(p);
  const auto back = read_toyset(p);
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back[i].label, c[i].label);
    for (std::size_t j = 0; j < c[i].pixels.size(); ++j)
      EXPECT_EQ(back[i].pixels[j], static_cast<double>(static_cast<float>(c[i].pixels[j])));
  }
  write_toyset(p, synth_toyset(3, 8, 5));
  EXPECT_EQ(file_digest(p), d1);
}

TEST(Toyset, MalformedArchives) {
  const auto p = temp_path("bad.gcts");
  write_toyset(p, synth_toyset(2, 8, 1));
  auto bytes = [&] {
    std::ifstream is(p, std::ios::binary);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
  }();
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  write_bytes(p, truncated);
  EXPECT_THROW(read_toyset(p), DataFormatError);
  auto magic = bytes;
  magic[0] = 'X';
  write_bytes(p, magic);
  try {
    read_toyset(p);
    FAIL();
  } catch (const DataFormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Jitter, Examples) {
  LabeledImage img{1, 2, 2, {1, 2, 3, 4}, 0};
  EXPECT_EQ(jitter_frame(img, 0, 0).pixels, img.pixels);
  // Content moves right by one; the vacated left column repeats its neighbour.
  EXPECT_EQ(jitter_frame(img, 1, 0).pixels, (std::vector<double>{1, 1, 3, 3}));
  LabeledImage wide{1, 1, 3, {1, 2, 3}, 0};
  const auto back = jitter_frame(jitter_frame(wide, 1, 0), -1, 0);
  EXPECT_EQ(back.pixels, (std::vector<double>{1, 2, 2}));
  EXPECT_NE(back.pixels, wide.pixels);
  EXPECT_THROW(jitter_frame(img, 4, 0), std::out_of_range);
  EXPECT_THROW(jitter_frame(img, 0, -4), std::out_of_range);
}

TEST(MakeSequence, VanishingNoiseTracksCleanFrames) {
  const auto img = grucnn::testing::unit_variance_image(3, 16, 1);
  const auto seq = make_sequence(img, 10, SnrLevel(1e9), 7);
  for (std::size_t t = 0; t < 10; ++t) {
    const auto clean = jitter_frame(img, seq.offsets[t].first, seq.offsets[t].second);
    std::span<const double> f(seq.pixels.data() + t * img.size(), img.size());
    const double ma = sequence_mean(f), mb = sequence_mean(clean.pixels);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < img.size(); ++i) {
      cov += (f[i] - ma) * (clean.pixels[i] - mb);
      va += (f[i] - ma) * (f[i] - ma);
      vb += (clean.pixels[i] - mb) * (clean.pixels[i] - mb);
    }
    EXPECT_GT(cov / std::sqrt(va * vb), 0.999);
  }
}

TEST(MakeSequence, UnitSnrVarianceRatio) {
  const auto img = grucnn::testing::unit_variance_image(3, 64, 2);
  const auto m = grucnn::testing::measure_snr(img, 100, SnrLevel(1), 3);
  EXPECT_GE(m.pixels, 1000000u);
  EXPECT_NEAR(m.ratio, 1.0, 0.05);
}

TEST(MakeSequence, DeterministicStandardizedAndJitterBounded) {
  const auto img = synth_toyset(1, 16, 3)[4];
  const auto a = make_sequence(img, 26, SnrLevel(0.25), 11);
  const auto b = make_sequence(img, 26, SnrLevel(0.25), 11);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.offsets, b.offsets);
  EXPECT_NEAR(sequence_mean(a.pixels), 0.0, 1e-6);
  EXPECT_NEAR(sequence_std(a.pixels), 1.0, 1e-6);
  for (auto [dx, dy] : a.offsets) {
    EXPECT_LE(std::abs(dx), 3);
    EXPECT_LE(std::abs(dy), 3);
  }
  EXPECT_THROW(make_sequence(img, 0, SnrLevel(1), 1), std::invalid_argument);
}

TEST(MakeSequence, NoiseIndependentAcrossFrames) {
  // A flat image isolates the noise; correlation between frame pairs averaged
  // over many pairs should vanish.
  LabeledImage flat{1, 32, 32, std::vector<double>(1024, 0.0), 0};
  const auto seq = make_sequence(flat, 400, SnrLevel(1), 5);
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t t = 0; t + 1 < 400; t += 2) {
    std::span<const double> a(seq.pixels.data() + t * 1024, 1024), b(seq.pixels.data() + (t + 1) * 1024, 1024);
    const double ma = sequence_mean(a), mb = sequence_mean(b);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < 1024; ++i) {
      cov += (a[i] - ma) * (b[i] - mb);
      va += (a[i] - ma) * (a[i] - ma);
      vb += (b[i] - mb) * (b[i] - mb);
    }
    total += cov / std::sqrt(va * vb);
    ++pairs;
  }
  EXPECT_NEAR(total / static_cast<double>(pairs), 0.0, 0.01);
}

TEST(MakeSequence, JitterUniformOverGrid) {
  LabeledImage tiny{1, 8, 8, std::vector<double>(64, 0.0), 0};
  for (std::size_t i = 0; i < 64; ++i) tiny.pixels[i] = static_cast<double>(i);
  std::vector<double> counts(49, 0.0);
  std::size_t draws = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    for (auto [dx, dy] : make_sequence(tiny, 100, SnrLevel(64), s).offsets) {
      counts[static_cast<std::size_t>((dy + 3) * 7 + dx + 3)] += 1;
      ++draws;
    }
  }
  ASSERT_EQ(draws, 100000u);
  const double expect = static_cast<double>(draws) / 49.0;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 73.683);  // 99th percentile of chi-square with 48 degrees of freedom
}

TEST(SequenceBatch, SingleSnrAndStandardized) {
  const auto corpus = preprocess_corpus(synth_toyset(2, 8, 1)).images;
  const std::vector<SnrLevel> one{SnrLevel(4)};
  std::mt19937_64 rng(3);
  const auto b = make_training_batch(corpus, 16, 5, one, rng);
  EXPECT_EQ(b.batch, 16u);
  for (auto s : b.snr) EXPECT_EQ(s, SnrLevel(4));
  const std::size_t per = b.frames * b.frame_size();
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::span<const double> item(b.pixels.data() + i * per, per);
    EXPECT_NEAR(sequence_mean(item), 0.0, 1e-6);
    EXPECT_NEAR(sequence_std(item), 1.0, 1e-6);
  }
  EXPECT_THROW(make_training_batch(corpus, 4, 5, std::span<const SnrLevel>{}, rng), std::invalid_argument);
}

TEST(SequenceBatch, SnrFrequencies) {
  LabeledImage tiny{1, 8, 8, std::vector<double>(64, 0.0), 0};
  tiny.pixels[0] = 1;
  const Corpus corpus{tiny};
  const auto set = default_training_snrs();
  std::vector<std::size_t> idx(10000, 0);
  const auto b = make_sequence_batch(corpus, idx, 1, set, 99);
  std::map<double, std::size_t> freq;
  for (auto s : b.snr) ++freq[s.value()];
  ASSERT_EQ(freq.size(), 7u);
  for (auto [v, n] : freq) EXPECT_NEAR(static_cast<double>(n) / 10000.0, 1.0 / 7.0, 0.02) << v;
}

TEST(SequenceBatch, ItemsIndependentOfBatchComposition) {
  const auto corpus = preprocess_corpus(synth_toyset(2, 8, 1)).images;
  const auto set = default_training_snrs();
  const std::vector<std::size_t> three{4, 7, 1}, two{4, 7};
  const auto a = make_sequence_batch(corpus, three, 3, set, 5);
  const auto b = make_sequence_batch(corpus, two, 3, set, 5);
  const std::size_t per = a.frames * a.frame_size();
  EXPECT_TRUE(std::equal(b.pixels.begin(), b.pixels.end(), a.pixels.begin()));
  EXPECT_EQ(a.labels[0], corpus[4].label);
  EXPECT_EQ(a.pixels.size(), 3 * per);
}

TEST(SequenceBatch, FixedSnrUsesGivenSeeds) {
  const auto corpus = preprocess_corpus(synth_toyset(1, 8, 1)).images;
  const std::vector<std::size_t> idx{2, 3};
  const std::vector<std::uint64_t> seeds{10, 20};
  const auto b = make_fixed_snr_batch(corpus, idx, 4, SnrLevel(1), seeds);
  const auto ref = make_sequence(corpus[3], 4, SnrLevel(1), 20);
  const std::size_t per = 4 * corpus[0].size();
  EXPECT_TRUE(std::equal(ref.pixels.begin(), ref.pixels.end(), b.pixels.begin() + static_cast<std::ptrdiff_t>(per)));
}

TEST(DeriveSeed, DistinctStreams) {
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
}

// Task difficulty: softmax regression on raw clean pixels stays below 100%.
TEST(Toyset, LinearBaselineIsImperfect) {
  const auto train = preprocess_corpus(synth_toyset(40, 16, 1)).images;
  const auto test = preprocess_corpus(synth_toyset(20, 16, 2)).images;
  const std::size_t n = train[0].size();
  std::mt19937_64 rng(0);
  auto w = fan_in_uniform<float>({10, n}, n, rng);
  auto b = Tensor<float>::zeros({10}, true);
  std::vector<Tensor<float>> params{w, b};
  RmsPropState<float> opt;
  auto batch_of = [&](const Corpus& c) {
    std::vector<float> x;
    std::vector<int> y;
    for (const auto& img : c) {
      x.insert(x.end(), img.pixels.begin(), img.pixels.end());
      y.push_back(img.label);
    }
    return std::pair{Tensor<float>::from_vector({c.size(), n}, std::move(x)), y};
  };
  auto [xtr, ytr] = batch_of(train);
  for (int it = 0; it < 300; ++it) {
    w.zero_grad();
    b.zero_grad();
    softmax_cross_entropy(dense(xtr, w, b), ytr).loss.backward();
    rmsprop_step<float>(params, opt, 1e-2, 0.0);
  }
  auto [xte, yte] = batch_of(test);
  NoGradGuard g;
  const auto probs = softmax(dense(xte, w, b));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 10; ++k)
      if (probs.at(i * 10 + k) > probs.at(i * 10 + best)) best = k;
    correct += static_cast<int>(best) == yte[i];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
  EXPECT_LT(acc, 1.0);
  EXPECT_GT(acc, 0.1);
}
