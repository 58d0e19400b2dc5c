// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <utility>

#include "support.hpp"

namespace revq {
namespace {

using testing::Gen;

// Exhaustive argmin: sort (distance, index) pairs so ties fall to the lowest
// index by lexicographic order.
std::pair<std::size_t, double> brute_force_nearest(std::span<const float> z, std::span<const float> book,
                                                   std::size_t dim) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < book.size() / dim; ++j) {
    double d = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double diff = static_cast<double>(z[k]) - book[j * dim + k];
      d += diff * diff;
    }
    all.emplace_back(d, j);
  }
  const auto best = *std::min_element(all.begin(), all.end());
  return {best.second, best.first};
}

class ThreadCap {
 public:
  explicit ThreadCap(const char* value) {
    if (const char* old = std::getenv("REVQ_THREADS")) saved_ = old;
    ::setenv("REVQ_THREADS", value, 1);
  }
  ~ThreadCap() {
    if (saved_) ::setenv("REVQ_THREADS", saved_->c_str(), 1);
    else ::unsetenv("REVQ_THREADS");
  }

 private:
  std::optional<std::string> saved_;
};

TEST(QuantizeVector, ExactMemberHasZeroDistance) {
  const std::vector<float> book{0, 0, 1, 1, 2, 2, 3, 3};
  const std::vector<float> z{3, 3};
  const auto a = quantize_vector<float>(z, book, 2);
  EXPECT_EQ(a.index, 3u);
  EXPECT_EQ(a.sq_dist, 0.0);
}

TEST(QuantizeVector, OneDimensionalExample) {
  const std::vector<float> book{0.0f, 1.0f};
  const std::vector<float> z{0.4f};
  const auto a = quantize_vector<float>(z, book, 1);
  EXPECT_EQ(a.index, 0u);
  EXPECT_NEAR(a.sq_dist, 0.16, 1e-7);
}

TEST(QuantizeVector, TieGoesToLowestIndex) {
  const std::vector<float> book{1.0f, -1.0f, 1.0f};
  const std::vector<float> z{0.0f};
  EXPECT_EQ(quantize_vector<float>(z, book, 1).index, 0u);
  const std::vector<float> book2{5.0f, -1.0f, 1.0f};
  EXPECT_EQ(quantize_vector<float>(z, book2, 1).index, 1u);
}

TEST(QuantizeVector, EmptyCodebookIsAConfigError) {
  const std::vector<float> z{0.0f};
  EXPECT_THROW(quantize_vector<float>(z, std::span<const float>{}, 1), ConfigError);
  const std::vector<float> book{1.0f, 2.0f};
  const std::vector<float> z2{0.0f, 1.0f, 2.0f};
  EXPECT_THROW(quantize_vector<float>(z2, book, 2), ConfigError);
}

TEST(QuantizeVectorProperty, MatchesBruteForce) {
  Gen gen(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = gen.index(1, 8), d = gen.index(1, 3);
    auto book = gen.floats(n * d);
    // Duplicate a code now and then so ties are exercised.
    if (n > 1 && gen.coin()) std::copy_n(book.begin(), d, book.begin() + static_cast<std::ptrdiff_t>(d * (n - 1)));
    const auto z = gen.coin() ? std::vector<float>(book.begin(), book.begin() + static_cast<std::ptrdiff_t>(d))
                              : gen.floats(d);
    const auto got = quantize_vector<float>(z, book, d);
    const auto want = brute_force_nearest(z, book, d);
    ASSERT_EQ(got.index, want.first);
    ASSERT_EQ(got.sq_dist, want.second);
  }
}

TEST(QuantizeBatch, ExactCodesGiveZeroError) {
  MultiCodebook cb(2, 3, 2);
  const std::vector<float> entries{0, 0, 1, 1, 2, 2, /* book 1 */ 5, 5, 6, 6, 7, 7};
  std::copy(entries.begin(), entries.end(), cb.entries().begin());
  const LatentTensor z({1, 1, 4}, 2, {1, 1, 7, 7, /**/ 2, 2, 5, 5});
  const auto res = quantize_batch(z, cb, GroupSpec::channel(z.shape(), 2));
  EXPECT_EQ(res.indices, (std::vector<std::uint32_t>{1, 2, 2, 0}));
  EXPECT_EQ(res.sq_error, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(std::vector<std::uint64_t>(cb.counts().begin(), cb.counts().end()),
            (std::vector<std::uint64_t>{0, 1, 1, 1, 0, 1}));
}

TEST(QuantizeBatch, SingleCodeTilesTheCode) {
  Gen gen(22);
  const auto z = gen.latents({2, 2, 3}, 6);
  const auto spec = GroupSpec::spatial(z.shape(), 4);
  MultiCodebook cb(4, 1, 3);
  for (auto& v : cb.entries()) v = static_cast<float>(gen.uniform(-1, 1));
  const auto res = quantize_batch(z, cb, spec);
  const auto groups = reshape_to_groups(z, spec);
  for (auto i : res.indices) EXPECT_EQ(i, 0u);
  for (std::size_t n = 0; n < z.batch(); ++n) {
    double want = 0.0;
    for (std::size_t g = 0; g < 4; ++g) {
      for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(res.quantized.token(n, g)[k], cb.code(g, 0)[k]);
        const double diff = static_cast<double>(groups.token(n, g)[k]) - cb.code(g, 0)[k];
        want += diff * diff;
      }
    }
    EXPECT_NEAR(res.sq_error[n], want, 1e-12);
  }
}

TEST(QuantizeBatch, MismatchedCodebookIsAConfigError) {
  MultiCodebook cb(3, 4, 2);
  const LatentTensor z({1, 1, 4}, 1);
  EXPECT_THROW(quantize_batch(z, cb, GroupSpec::channel(z.shape(), 2)), ConfigError);
  MultiCodebook wrong_dim(2, 4, 3);
  EXPECT_THROW(quantize_batch(z, wrong_dim, GroupSpec::channel(z.shape(), 2)), ConfigError);
}

// A shared codebook reconstructs swap(z) as swap(recon(z)): the output set
// is symmetric about y = x no matter what the data look like.
TEST(QuantizeBatch, SharedCodebookReconstructionIsSwapSymmetric) {
  const LatentTensor sym({2, 1, 1}, 2, {0, 1, 1, 0});
  MultiCodebook shared(1, 2, 1);
  shared.entries()[0] = 0.0f;
  shared.entries()[1] = 1.0f;
  const auto spec = GroupSpec::spatial(sym.shape(), 2);
  EXPECT_EQ(quantize_batch(sym, shared, spec).mean_sq_error(), 0.0);

  Gen gen(23);
  for (int trial = 0; trial < 200; ++trial) {
    MultiCodebook cb(1, gen.index(1, 5), 1);
    for (auto& v : cb.entries()) v = static_cast<float>(gen.uniform(-2, 2));
    const auto xy = gen.floats(2);
    const LatentTensor a({2, 1, 1}, 1, {xy[0], xy[1]});
    const LatentTensor b({2, 1, 1}, 1, {xy[1], xy[0]});
    const auto qa = quantize_batch(a, cb, spec).quantized;
    const auto qb = quantize_batch(b, cb, spec).quantized;
    ASSERT_EQ(qa.values[0], qb.values[1]);
    ASSERT_EQ(qa.values[1], qb.values[0]);
  }
}

TEST(QuantizeBatchProperty, MatchesPerGroupBruteForce) {
  Gen gen(24);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t b = gen.index(1, 4), d = gen.index(1, 3), n = gen.index(1, 8);
    const bool shared = gen.coin();
    const LatentShape shape{1, static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(d)};
    const auto z = gen.latents(shape, gen.index(1, 6));
    auto cb = gen.codebook(shared ? 1 : b, n, d);
    cb.clear_counts();
    const auto spec = GroupSpec::spatial(shape, b);
    const auto res = quantize_batch(z, cb, spec);
    std::vector<std::uint64_t> counts(cb.counts().size(), 0);
    for (std::size_t s = 0; s < z.batch(); ++s) {
      double err = 0.0;
      for (std::size_t g = 0; g < b; ++g) {
        const std::size_t book = shared ? 0 : g;
        const auto zg = z.sample(s).subspan(g * d, d);
        const auto want = brute_force_nearest(zg, cb.codebook(book), d);
        ASSERT_EQ(res.indices[s * b + g], want.first);
        for (std::size_t k = 0; k < d; ++k) ASSERT_EQ(res.quantized.token(s, g)[k], cb.code(book, want.first)[k]);
        ++counts[book * n + want.first];
        err += want.second;
      }
      ASSERT_NEAR(res.sq_error[s], err, 1e-12);
      ASSERT_GE(res.sq_error[s], 0.0);
    }
    ASSERT_TRUE(std::equal(counts.begin(), counts.end(), cb.counts().begin()));
  }
}

TEST(QuantizeBatchProperty, IsIdempotent) {
  Gen gen(25);
  for (int trial = 0; trial < 100; ++trial) {
    const LatentShape shape{2, 2, 4};
    const auto spec = GroupSpec::channel(shape, 4);
    auto cb = gen.codebook(4, gen.index(1, 16), spec.group_dim());
    const auto z = gen.latents(shape, 8);
    const auto first = quantize_batch(z, cb, spec);
    const auto again = quantize_groups<float>(first.quantized, cb);
    ASSERT_EQ(again.indices, first.indices);
    for (double e : again.sq_error) ASSERT_EQ(e, 0.0);
  }
}

TEST(QuantizeBatchProperty, CountsSumToAssignments) {
  Gen gen(26);
  const LatentShape shape{2, 2, 2};
  const auto spec = GroupSpec::spatial(shape, 4);
  const auto z = gen.latents(shape, 37);
  auto multi = gen.codebook(4, 5, spec.group_dim());
  multi.clear_counts();
  quantize_batch(z, multi, spec);
  for (std::size_t g = 0; g < 4; ++g) {
    const auto c = multi.counts(g);
    EXPECT_EQ(std::accumulate(c.begin(), c.end(), std::uint64_t{0}), 37u);
  }
  auto shared = gen.codebook(1, 5, spec.group_dim());
  shared.clear_counts();
  quantize_batch(z, shared, spec);
  EXPECT_EQ(std::accumulate(shared.counts().begin(), shared.counts().end(), std::uint64_t{0}), 37u * 4);
}

TEST(QuantizeBatchProperty, IndependentOfWorkerCount) {
  Gen gen(27);
  const LatentShape shape{4, 4, 4};
  const auto spec = GroupSpec::channel(shape, 8);
  const auto z = gen.latents(shape, 700);
  const auto base = gen.codebook(8, 32, spec.group_dim());
  QuantizationResult<float> one, many;
  MultiCodebook cb1 = base, cb4 = base;
  {
    ThreadCap cap("1");
    one = quantize_batch(z, cb1, spec);
  }
  {
    ThreadCap cap("4");
    many = quantize_batch(z, cb4, spec);
  }
  EXPECT_EQ(one.indices, many.indices);
  EXPECT_EQ(one.sq_error, many.sq_error);
  EXPECT_EQ(cb1, cb4);
}

TEST(Utilization, Examples) {
  const std::vector<std::uint64_t> all{3, 1, 4, 1};
  EXPECT_EQ(utilization(all, 4).overall, 1.0);
  const std::vector<std::uint64_t> half{0, 0, 1, 1};
  EXPECT_EQ(utilization(half, 4).overall, 0.5);
  const std::vector<std::uint64_t> two{1, 1, 0, 1, /**/ 0, 0, 0, 1};
  const auto u = utilization(two, 4);
  EXPECT_EQ(u.per_codebook, (std::vector<double>{0.75, 0.25}));
  EXPECT_EQ(u.overall, 0.5);
  EXPECT_EQ(u.min_group, 0.25);
}

// --- Non-activation reset -------------------------------------------------

MultiCodebook line_codebook(std::size_t n, std::vector<std::uint64_t> counts) {
  MultiCodebook cb(1, n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    cb.code(0, i)[0] = static_cast<float>(10 * i);
    cb.code(0, i)[1] = static_cast<float>(-static_cast<double>(i));
  }
  std::copy(counts.begin(), counts.end(), cb.counts().begin());
  return cb;
}

TEST(Reset, AllActiveIsANoOp) {
  auto cb = line_codebook(3, {5, 3, 7});
  const auto before = cb;
  std::mt19937_64 rng(1);
  EXPECT_EQ(reset_codebook(cb, 0, 1e-2, rng), 0u);
  EXPECT_EQ(cb, before);
}

TEST(Reset, DeadCodeMovesNextToTheActiveOne) {
  auto cb = line_codebook(2, {0, 5});
  const std::vector<float> b(cb.code(0, 1).begin(), cb.code(0, 1).end());
  std::mt19937_64 rng(2);
  EXPECT_EQ(reset_codebook(cb, 0, 1e-2, rng), 1u);
  EXPECT_LT(std::sqrt(squared_distance<float>(cb.code(0, 0), b)), 3 * 1e-2 * std::sqrt(2.0));
  EXPECT_NE(cb.code(0, 0)[0], b[0]);  // noise was added
  EXPECT_EQ(std::vector<float>(cb.code(0, 1).begin(), cb.code(0, 1).end()), b);
}

// counts [0, 0, 1, 9]: ascending ranks are (0, 1, 2, 3); rank 1 (code 0)
// takes rank N (code 3), rank 2 (code 1) takes rank N-1 (code 2).
TEST(Reset, RankPairingByHand) {
  auto cb = line_codebook(4, {0, 0, 1, 9});
  const auto before = cb;
  std::mt19937_64 rng(3);
  std::vector<std::size_t> moved;
  EXPECT_EQ(reset_codebook(cb, 0, 0.0, rng, &moved), 2u);
  EXPECT_EQ(moved, (std::vector<std::size_t>{0, 1}));
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(cb.code(0, 0)[k], before.code(0, 3)[k]);
    EXPECT_EQ(cb.code(0, 1)[k], before.code(0, 2)[k]);
    EXPECT_EQ(cb.code(0, 2)[k], before.code(0, 2)[k]);
    EXPECT_EQ(cb.code(0, 3)[k], before.code(0, 3)[k]);
  }
  EXPECT_EQ(std::vector<std::uint64_t>(cb.counts().begin(), cb.counts().end()),
            (std::vector<std::uint64_t>{0, 0, 1, 9}));
}

// Unsorted counts exercise the stable ascending sort: ranks are
// (code 3: 0), (code 1: 0), (code 4: 2), (code 0: 5), (code 2: 8).
TEST(Reset, PairingFollowsStableSortOfCounts) {
  auto cb = line_codebook(5, {5, 0, 8, 0, 2});
  const auto before = cb;
  std::mt19937_64 rng(4);
  std::vector<std::size_t> moved;
  EXPECT_EQ(reset_codebook(cb, 0, 0.0, rng, &moved), 2u);
  EXPECT_EQ(moved, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(cb.code(0, 1)[0], before.code(0, 2)[0]);
  EXPECT_EQ(cb.code(0, 3)[0], before.code(0, 0)[0]);
}

TEST(Reset, TooManyDeadCodesIsClampedToHalf) {
  auto cb = line_codebook(5, {0, 0, 0, 0, 1});
  std::mt19937_64 rng(5);
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(reset_codebook(cb, 0, 0.0, rng), 2u);
  const auto log = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(log.find("inactive"), std::string::npos);
}

TEST(Reset, OnlyTouchesTheRequestedCodebook) {
  MultiCodebook cb(2, 2, 1);
  cb.entries()[0] = 1.0f, cb.entries()[1] = 2.0f, cb.entries()[2] = 3.0f, cb.entries()[3] = 4.0f;
  cb.counts()[0] = 0, cb.counts()[1] = 1, cb.counts()[2] = 0, cb.counts()[3] = 1;
  std::mt19937_64 rng(6);
  EXPECT_EQ(reset_codebook(cb, 1, 0.0, rng), 1u);
  EXPECT_EQ(cb.entries()[0], 1.0f);
  EXPECT_EQ(cb.entries()[2], 4.0f);
}

TEST(ResetProperty, LandsNearSourceAndKeepsCounts) {
  Gen gen(28);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = gen.index(2, 16), d = gen.index(1, 4);
    MultiCodebook cb(1, n, d);
    for (auto& v : cb.entries()) v = static_cast<float>(gen.uniform(-3, 3));
    for (auto& c : cb.counts()) c = gen.coin() ? 0 : gen.index(1, 9);
    const auto before = cb;
    const double sigma = gen.uniform(1e-3, 1e-1);
    std::vector<std::size_t> moved;
    ::testing::internal::CaptureStderr();
    const auto r = reset_codebook(cb, 0, sigma, gen.engine(), &moved);
    ::testing::internal::GetCapturedStderr();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return before.counts()[a] < before.counts()[b]; });
    const auto dead = static_cast<std::size_t>(std::count(before.counts().begin(), before.counts().end(), 0u));
    ASSERT_EQ(r, std::min(dead, n / 2));
    ASSERT_TRUE(std::equal(cb.counts().begin(), cb.counts().end(), before.counts().begin()));
    for (std::size_t u = 0; u < r; ++u) {
      const auto dist = std::sqrt(squared_distance<float>(cb.code(0, order[u]), before.code(0, order[n - 1 - u])));
      ASSERT_LE(dist, 3 * sigma * std::sqrt(static_cast<double>(d)) + 1e-6) << "trial " << trial;
    }
    for (std::size_t u = r; u < n; ++u) {
      ASSERT_EQ(squared_distance<float>(cb.code(0, order[u]), before.code(0, order[u])), 0.0);
    }
  }
}

TEST(ResetProperty, NoiseIsResampledPerCode) {
  auto cb = line_codebook(4, {0, 0, 4, 4});
  // Give both sources the same value so equal noise would collide.
  cb.code(0, 2)[0] = cb.code(0, 3)[0];
  cb.code(0, 2)[1] = cb.code(0, 3)[1];
  std::mt19937_64 rng(7);
  reset_codebook(cb, 0, 1e-2, rng);
  EXPECT_GT(squared_distance<float>(cb.code(0, 0), cb.code(0, 1)), 0.0);
}

// --- Initialization -------------------------------------------------------

TEST(SampleInit, EqualSizesGiveAPermutationOfTheData) {
  Gen gen(29);
  const auto groups = gen.tokens<float>(6, 2, 3);
  MultiCodebook cb(2, 6, 3);
  sample_init<float>(cb, groups, 9);
  for (std::size_t g = 0; g < 2; ++g) {
    std::multiset<std::vector<float>> want, got;
    for (std::size_t n = 0; n < 6; ++n) {
      want.insert(std::vector<float>(groups.token(n, g).begin(), groups.token(n, g).end()));
      got.insert(std::vector<float>(cb.code(g, n).begin(), cb.code(g, n).end()));
    }
    EXPECT_EQ(want, got);
  }
}

TEST(SampleInit, SingleSampleFillsEveryCode) {
  const TokenBatch<float> one(1, 1, 2, 0.5f);
  MultiCodebook cb(1, 2, 2);
  sample_init<float>(cb, one, 1);
  for (float v : cb.entries()) EXPECT_EQ(v, 0.5f);
}

TEST(SampleInit, DeterministicUnderSeedAndRejectsEmptyData) {
  Gen gen(30);
  const auto groups = gen.tokens<float>(50, 3, 2);
  MultiCodebook a(3, 8, 2), b(3, 8, 2), c(3, 8, 2);
  sample_init<float>(a, groups, 77);
  sample_init<float>(b, groups, 77);
  sample_init<float>(c, groups, 78);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_THROW(sample_init<float>(a, TokenBatch<float>(0, 3, 2), 1), ConfigError);
}

TEST(SampleInit, SharedCodebookDrawsFromEveryGroup) {
  TokenBatch<float> groups(1, 4, 1);
  groups.values = {1, 2, 3, 4};
  MultiCodebook cb(1, 4, 1);
  sample_init<float>(cb, groups, 3);
  std::vector<float> got(cb.entries().begin(), cb.entries().end());
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, (std::vector<float>{1, 2, 3, 4}));
}

// --- RVQC format ----------------------------------------------------------

TEST(CodebookFormat, RoundTripIsByteIdentical) {
  Gen gen(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto cb = gen.codebook(gen.index(1, 4), gen.index(1, 9), gen.index(1, 5));
    const auto bytes = encode_codebook(cb);
    const auto back = decode_codebook(bytes, "mem");
    ASSERT_EQ(back, cb);
    ASSERT_EQ(encode_codebook(back), bytes);
  }
}

TEST(CodebookFormat, HeaderLayout) {
  MultiCodebook cb(2, 3, 4);
  const auto bytes = encode_codebook(cb);
  EXPECT_EQ(bytes.size(), 4u + 4 * 4 + 2 * 3 * 4 * 4 + 2 * 3 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RVQC");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 3);
  EXPECT_EQ(bytes[16], 4);
}

TEST(CodebookFormat, CorruptFilesAreRejectedByKind) {
  Gen gen(32);
  const auto bytes = encode_codebook(gen.codebook(2, 3, 2));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_codebook(bad, "c");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::BadMagic);
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    decode_codebook(bad, "c");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::UnsupportedVersion);
  }
  bad.assign(bytes.begin(), bytes.end() - 3);
  try {
    decode_codebook(bad, "c");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::Truncated);
  }
  bad = bytes;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bad.data() + 20, &nan, 4);
  try {
    decode_codebook(bad, "c");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::NonFinite);
  }
  bad = bytes;
  bad[8] = bad[9] = bad[10] = bad[11] = static_cast<char>(0xff);  // absurd B
  bad[12] = bad[13] = bad[14] = bad[15] = static_cast<char>(0xff);
  EXPECT_THROW(decode_codebook(bad, "c"), FormatError);
}

TEST(CodebookFormat, FileRoundTrip) {
  Gen gen(33);
  const auto dir = testing::temp_dir("cb");
  const auto cb = gen.codebook(3, 4, 2);
  write_codebook((dir / "a.rvqc").string(), cb);
  EXPECT_EQ(read_codebook((dir / "a.rvqc").string()), cb);
  EXPECT_THROW(read_codebook((dir / "missing.rvqc").string()), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace revq
