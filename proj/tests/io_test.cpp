#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace ostrack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ostrack_io_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

template <class U>
U read_le(const std::string& bytes, std::size_t& pos) {
  U v{};
  std::memcpy(&v, bytes.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace

TEST(Config, RoundTrip) {
  Config cfg;
  cfg.model.embed_dim = 32;
  cfg.model.elimination_layers = {2, 4};
  cfg.model.keep_ratio = 0.65;
  cfg.model.scoring = ScoringStrategy::AllTemplateTokens;
  cfg.model.hanning = false;
  cfg.train.steps = 123;
  cfg.train.lr_backbone = 2.5e-4;
  cfg.train.keep_warmup_end = 0.4;
  const auto back = parse_config(to_text(cfg));
  EXPECT_EQ(back.model.embed_dim, 32u);
  EXPECT_EQ(back.model.elimination_layers, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(back.model.keep_ratio, 0.65);
  EXPECT_EQ(back.model.scoring, ScoringStrategy::AllTemplateTokens);
  EXPECT_FALSE(back.model.hanning);
  EXPECT_EQ(back.train.steps, 123u);
  EXPECT_EQ(back.train.lr_backbone, 2.5e-4);
  EXPECT_EQ(back.train.keep_warmup_end, 0.4);
  EXPECT_EQ(to_text(back), to_text(cfg));
}

TEST(Config, CommentsBlankLinesAndEmptyList) {
  const auto cfg = parse_config("# toy\n\n  depth = 4  \nelimination_layers =\nkeep_ratio = 1 # no pruning\n");
  EXPECT_EQ(cfg.model.depth, 4u);
  EXPECT_TRUE(cfg.model.elimination_layers.empty());
  EXPECT_EQ(cfg.model.keep_ratio, 1.0);
}

TEST(Config, ShippedFilesMatchDefaults) {
  const fs::path dir = OSTRACK_SOURCE_DIR "/configs";
  EXPECT_EQ(to_text(load_config((dir / "toy.cfg").string())), to_text(Config{}));
  auto full = Config{};
  full.model.keep_ratio = 1.0;
  EXPECT_EQ(to_text(load_config((dir / "toy_full.cfg").string())), to_text(full));
  std::ifstream spec(dir / "heldout.spec");
  std::stringstream ss;
  ss << spec.rdbuf();
  EXPECT_EQ(parse_synth_spec(ss.str()).seed, 100000u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("depht = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("depth = 4\ndepth = 5\n"), ConfigError);
  EXPECT_THROW(parse_config("depth 4\n"), ConfigError);
  EXPECT_THROW(parse_config("depth = four\n"), ConfigError);
  EXPECT_THROW(parse_config("keep_ratio = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("embed_dim = 30\nnum_heads = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("depth = 4\nelimination_layers = 5\n"), ConfigError);
  EXPECT_THROW(parse_config("scoring = best\n"), ConfigError);
  EXPECT_THROW(load_config(scratch("missing.cfg").string()), ConfigError);
}

TEST(Weights, ExactByteLayout) {
  std::vector<std::pair<std::string, Tensor<float>>> named{
      {"ab", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6})}, {"c", Tensor<float>({1}, {-0.5f})}};
  std::ostringstream os;
  weights::write(os, named);
  const auto bytes = os.str();
  // 12-byte header, then 2+2+1+8+24 and 2+1+1+4+4.
  ASSERT_EQ(bytes.size(), 12u + 37u + 12u);
  EXPECT_EQ(bytes.substr(0, 4), "OST1");
  std::size_t pos = 4;
  EXPECT_EQ(read_le<std::uint32_t>(bytes, pos), 1u);
  EXPECT_EQ(read_le<std::uint32_t>(bytes, pos), 2u);
  EXPECT_EQ(read_le<std::uint16_t>(bytes, pos), 2u);
  EXPECT_EQ(bytes.substr(pos, 2), "ab");
  pos += 2;
  EXPECT_EQ(read_le<std::uint8_t>(bytes, pos), 2u);
  EXPECT_EQ(read_le<std::uint32_t>(bytes, pos), 2u);
  EXPECT_EQ(read_le<std::uint32_t>(bytes, pos), 3u);
  for (int i = 1; i <= 6; ++i) EXPECT_EQ(read_le<float>(bytes, pos), static_cast<float>(i));
  EXPECT_EQ(read_le<std::uint16_t>(bytes, pos), 1u);
  EXPECT_EQ(bytes[pos++], 'c');
  EXPECT_EQ(read_le<std::uint8_t>(bytes, pos), 1u);
  EXPECT_EQ(read_le<std::uint32_t>(bytes, pos), 1u);
  EXPECT_EQ(read_le<float>(bytes, pos), -0.5f);
  EXPECT_EQ(pos, bytes.size());
  // First payload float 1.0f at offset 12 + 2 + 2 + 1 + 8, little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[25]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[26]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[27]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[28]), 0x3F);
}

TEST(Weights, RoundTripAndErrors) {
  std::mt19937 rng(1);
  std::vector<std::pair<std::string, Tensor<float>>> named{{"x", testutil::random_tensor({3, 4, 5}, rng)},
                                                           {"", Tensor<float>::zeros({0})}};
  std::stringstream ss;
  weights::write(ss, named);
  const auto back = weights::read<float>(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "x");
  EXPECT_EQ(back[0].second.shape(), (Shape{3, 4, 5}));
  EXPECT_TRUE(std::equal(back[0].second.data().begin(), back[0].second.data().end(), named[0].second.data().begin()));

  std::istringstream bad_magic("OST2xxxxxxxx");
  EXPECT_THROW(weights::read<float>(bad_magic), FormatError);
  std::ostringstream os;
  weights::write(os, named);
  std::istringstream truncated(os.str().substr(0, 30));
  EXPECT_THROW(weights::read<float>(truncated), FormatError);
  auto bumped = os.str();
  bumped[4] = 2;
  std::istringstream wrong_version(bumped);
  EXPECT_THROW(weights::read<float>(wrong_version), FormatError);
}

TEST(Weights, ModelSaveLoad) {
  const auto cfg = testutil::tiny_config();
  OSTrackModel<float> a(cfg, 11);
  const auto path = scratch("model.bin").string();
  a.save(path);
  auto b = OSTrackModel<float>::load(path, cfg);
  const auto sa = a.state_dict(), sb = b.state_dict();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].first, sb[i].first);
    EXPECT_TRUE(std::equal(sa[i].second.data().begin(), sa[i].second.data().end(), sb[i].second.data().begin()));
  }
  std::mt19937 rng(2);
  auto z = testutil::random_image(8, 4, rng, ImageRole::Template);
  auto x = testutil::random_image(16, 4, rng, ImageRole::Search);
  const auto fa = a.forward(z, x, NormMode::Eval), fb = b.forward(z, x, NormMode::Eval);
  EXPECT_TRUE(std::equal(fa.maps.score.data().begin(), fa.maps.score.data().end(), fb.maps.score.data().begin()));

  auto other = cfg;
  other.embed_dim = 16;
  EXPECT_THROW(OSTrackModel<float>::load(path, other), FormatError);
  EXPECT_THROW(OSTrackModel<float>::load(scratch("absent.bin").string(), cfg), FormatError);
}

TEST(Images, PpmRoundTrip) {
  Image img(5, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 17);
  const auto path = scratch("img.ppm").string();
  write_ppm(path, img);
  const auto back = read_ppm(path);
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.rgb, img.rgb);
  const auto t = to_tensor(img);
  EXPECT_EQ(t.shape(), (Shape{3, 3, 5}));
  EXPECT_NEAR(t[0], -1.0, 1e-6);
  EXPECT_NEAR(t[15 + 1], 4 * 17 / 127.5 - 1.0, 1e-6);  // channel 1, pixel (1, 0)
}

TEST(Images, PpmHeaderCommentsAndErrors) {
  const auto path = scratch("c.ppm").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "P6\n# made by hand\n2 1\n255\n";
    const unsigned char px[6] = {1, 2, 3, 4, 5, 6};
    os.write(reinterpret_cast<const char*>(px), 6);
  }
  const auto img = read_ppm(path);
  EXPECT_EQ(img.at(1, 0, 2), 6);
  {
    std::ofstream os(path, std::ios::binary);
    os << "P3\n2 1\n255\n";
  }
  EXPECT_THROW(read_ppm(path), ImageIoError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "P6\n2 2\n255\nabc";
  }
  EXPECT_THROW(read_ppm(path), ImageIoError);
  EXPECT_THROW(write_pgm(scratch("g.pgm").string(), 2, 2, {1, 2, 3}), ImageIoError);
}

TEST(Sequences, WriteReadRoundTrip) {
  SynthSpec spec;
  spec.width = spec.height = 48;
  spec.max_size = 12;
  spec.min_size = 6;
  spec.length = 4;
  const auto seq = synth_sequence(spec);
  const auto dir = scratch("seq").string();
  write_sequence(dir, seq);
  EXPECT_TRUE(fs::exists(dir + "/000001.ppm"));
  EXPECT_FALSE(fs::exists(dir + "/000000.ppm"));
  const auto back = read_sequence(dir);
  ASSERT_EQ(back.frames.size(), 4u);
  ASSERT_EQ(back.boxes.size(), 4u);
  EXPECT_EQ(back.frames[2].rgb, seq.frames[2].rgb);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(back.boxes[i].x0(), seq.boxes[i].x0(), 1e-3);
    EXPECT_NEAR(back.boxes[i].h, seq.boxes[i].h, 1e-3);
  }
}

TEST(Sequences, BoxFileAcceptsCommas) {
  const auto path = scratch("boxes.txt").string();
  {
    std::ofstream os(path);
    os << "1,2,3,4\n5\t6\t7\t8\n\n9 10 11 12\n";
  }
  const auto b = read_boxes(path);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[1].x0(), 5.0);
  EXPECT_EQ(b[2].h, 12.0);
}
