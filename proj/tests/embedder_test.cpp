#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ostrack;
using testutil::random_tensor;

TEST(Patchify, TokenCounts) {
  std::mt19937 rng(1);
  auto z = testutil::random_image(128, 16, rng, ImageRole::Template);
  auto x = testutil::random_image(256, 16, rng, ImageRole::Search);
  EXPECT_EQ(patchify(z).shape(), (Shape{64, 768}));
  EXPECT_EQ(patchify(x).shape(), (Shape{256, 768}));
}

TEST(Patchify, OnePixelPatchesInRasterOrder) {
  // 2×2 image, channel planes c·10 + raster index.
  std::vector<float> px(12);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i) px[c * 4 + i] = static_cast<float>(c * 10 + i);
  ImagePatchGrid<float> img(ImageRole::Search, Tensor<float>({3, 2, 2}, px), 1);
  auto p = patchify(img);
  ASSERT_EQ(p.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.at(i, c), static_cast<float>(c * 10 + i));
}

TEST(Patchify, NonDivisibleSizeThrows) {
  EXPECT_THROW(ImagePatchGrid<float>(ImageRole::Search, Tensor<float>::zeros({3, 20, 16}), 16), DimensionError);
  EXPECT_THROW(ImagePatchGrid<float>(ImageRole::Search, Tensor<float>::zeros({1, 16, 16}), 16), DimensionError);
}

TEST(Patchify, RoundTripIsExact) {
  std::mt19937 rng(2);
  for (std::size_t p : {1u, 2u, 4u}) {
    auto img = testutil::random_image(8, p, rng, ImageRole::Search);
    auto back = unpatchify(patchify(img), 8, 8, p);
    EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), img.pixels.data().begin()));
  }
}

TEST(EmbedPair, ZeroImagesAndTables) {
  const std::size_t p = 4, d = 5;
  ImagePatchGrid<float> z(ImageRole::Template, Tensor<float>::zeros({3, 8, 8}), p);
  ImagePatchGrid<float> x(ImageRole::Search, Tensor<float>::zeros({3, 16, 16}), p);
  std::mt19937 rng(3);
  EmbedderParams<float> params{random_tensor({3 * p * p, d}, rng), Tensor<float>::zeros({4, d}),
                               Tensor<float>::zeros({16, d})};
  auto s = embed_pair(z, x, params);
  EXPECT_EQ(s.tokens.shape(), (Shape{20, d}));
  for (auto v : s.tokens.data()) EXPECT_EQ(v, 0.0f);

  params.pos_template = random_tensor({4, d}, rng);
  params.pos_search = random_tensor({16, d}, rng);
  s = embed_pair(z, x, params);
  for (std::size_t i = 0; i < 4 * d; ++i) EXPECT_EQ(s.tokens[i], params.pos_template[i]);
  for (std::size_t i = 0; i < 16 * d; ++i) EXPECT_EQ(s.tokens[4 * d + i], params.pos_search[i]);
  EXPECT_EQ(s.template_count, 4u);
  EXPECT_EQ(s.search_full_count, 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(s.search_orig_index[i], i);
}

TEST(EmbedPair, BaseConfigShapes) {
  const auto cfg = ModelConfig::vit_base_256();
  EXPECT_EQ(cfg.template_tokens(), 64u);
  EXPECT_EQ(cfg.search_tokens(), 256u);
  std::mt19937 rng(4);
  const std::size_t d = 8;  // width is irrelevant to the token layout
  EmbedderParams<float> params{random_tensor({3 * 16 * 16, d}, rng), random_tensor({64, d}, rng),
                               random_tensor({256, d}, rng)};
  auto s = embed_pair(testutil::random_image(128, 16, rng, ImageRole::Template),
                      testutil::random_image(256, 16, rng, ImageRole::Search), params);
  EXPECT_EQ(s.tokens.shape(), (Shape{320, d}));
  EXPECT_EQ(s.template_count, 64u);
  EXPECT_EQ(s.search_full_count, 256u);
}

TEST(EmbedPair, TableMismatchThrows) {
  std::mt19937 rng(5);
  EmbedderParams<float> params{random_tensor({48, 4}, rng), random_tensor({4, 4}, rng), random_tensor({9, 4}, rng)};
  EXPECT_THROW(embed_pair(testutil::random_image(8, 4, rng, ImageRole::Template),
                          testutil::random_image(16, 4, rng, ImageRole::Search), params),
               DimensionError);
}

TEST(EmbedPair, LinearInPixelsWithZeroTables) {
  std::mt19937 rng(6);
  const std::size_t p = 4, d = 6;
  EmbedderParams<float> params{random_tensor({3 * p * p, d}, rng), Tensor<float>::zeros({4, d}),
                               Tensor<float>::zeros({16, d})};
  auto z = testutil::random_image(8, p, rng, ImageRole::Template);
  auto x = testutil::random_image(16, p, rng, ImageRole::Search);
  const float a = 2.5f;
  ImagePatchGrid<float> za(ImageRole::Template, scale(z.pixels, a), p), xa(ImageRole::Search, scale(x.pixels, a), p);
  auto base = embed_pair(z, x, params), scaled = embed_pair(za, xa, params);
  for (std::size_t i = 0; i < base.tokens.size(); ++i) EXPECT_NEAR(scaled.tokens[i], a * base.tokens[i], 1e-5);
}

TEST(PosEmbed, IdentityAndConstant) {
  std::mt19937 rng(7);
  auto t = random_tensor({12, 3}, rng);
  auto same = interpolate_pos_embed(t, 3, 4, 3, 4);
  EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), t.data().begin()));
  auto c = interpolate_pos_embed(Tensor<float>::full({16, 2}, 0.75f), 4, 4, 7, 5);
  EXPECT_EQ(c.shape(), (Shape{35, 2}));
  for (auto v : c.data()) EXPECT_NEAR(v, 0.75, 1e-6);
  EXPECT_THROW(interpolate_pos_embed(t, 4, 4, 8, 8), DimensionError);
}

TEST(PosEmbed, MatchesDirectBicubicSum) {
  // Direct 2-D sum over a 4×4 neighbourhood with the Keys kernel written out piecewise and the
  // table extended by linear extrapolation along each axis.
  auto keys = [](double t) {
    const double a = -0.75, x = std::abs(t);
    if (x <= 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
    if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
    return 0.0;
  };
  std::mt19937 rng(9);
  const std::size_t h1 = 3, w1 = 5, h2 = 7, w2 = 4, c = 2;
  auto t = random_tensor({h1 * w1, c}, rng);
  auto ext = [&](long y, long x, std::size_t ch) {
    auto row = [&](long yy, long xx) {
      if (xx < 0) return double(t.at(yy * w1, ch)) + xx * (t.at(yy * w1 + 1, ch) - t.at(yy * w1, ch));
      if (xx >= long(w1))
        return double(t.at(yy * w1 + w1 - 1, ch)) + (xx - long(w1) + 1) * (t.at(yy * w1 + w1 - 1, ch) - t.at(yy * w1 + w1 - 2, ch));
      return double(t.at(yy * w1 + xx, ch));
    };
    if (y < 0) return row(0, x) + y * (row(1, x) - row(0, x));
    if (y >= long(h1)) return row(h1 - 1, x) + (y - long(h1) + 1) * (row(h1 - 1, x) - row(h1 - 2, x));
    return row(y, x);
  };
  auto out = interpolate_pos_embed(t, h1, w1, h2, w2);
  for (std::size_t y = 0; y < h2; ++y)
    for (std::size_t x = 0; x < w2; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double sy = (y + 0.5) * h1 / h2 - 0.5, sx = (x + 0.5) * w1 / w2 - 0.5;
        double acc = 0;
        for (long j = long(std::floor(sy)) - 1; j <= long(std::floor(sy)) + 2; ++j)
          for (long i = long(std::floor(sx)) - 1; i <= long(std::floor(sx)) + 2; ++i)
            acc += keys(sy - j) * keys(sx - i) * ext(j, i, ch);
        EXPECT_NEAR(out.at(y * w2 + x, ch), acc, 1e-5);
      }
}

TEST(PosEmbed, KernelWeightsSumToOne) {
  // Constant tables are preserved for every size pair, including shrinking.
  for (auto [h1, w1, h2, w2] : {std::array<std::size_t, 4>{2, 2, 9, 9}, {8, 8, 3, 5}, {1, 4, 2, 6}}) {
    auto c = interpolate_pos_embed(Tensor<float>::full({h1 * w1, 1}, -1.25f), h1, w1, h2, w2);
    for (auto v : c.data()) EXPECT_NEAR(v, -1.25, 1e-6);
  }
}

TEST(TokenState, ValidateRejectsBrokenBookkeeping) {
  std::mt19937 rng(8);
  auto s = testutil::random_state(2, 4, 3, rng);
  EXPECT_NO_THROW(s.validate());
  s.search_orig_index = {0, 2, 2, 3};
  EXPECT_THROW(s.validate(), InvariantError);
  s.search_orig_index = {0, 1, 2, 9};
  EXPECT_THROW(s.validate(), InvariantError);
}
