#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ostrack;

namespace {

Image gradient_image(std::size_t w, std::size_t h) {
  Image img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>((x * 3 + y) % 256);
      img.at(x, y, 1) = static_cast<std::uint8_t>((x * 7 + y * 5) % 256);
      img.at(x, y, 2) = static_cast<std::uint8_t>((x + y * 11) % 256);
    }
  return img;
}

ModelConfig small_tracker_config() {
  ModelConfig c;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  c.template_size = 32;
  c.search_size = 64;
  c.elimination_layers = {2};
  c.keep_ratio = 0.7;
  c.head_stages = 2;
  return c;
}

}  // namespace

TEST(Crop, SideFollowsBoxArea) {
  const auto frame = gradient_image(200, 150);
  const auto a = crop_region<float>(frame, BBox{100, 75, 32, 32, BoxFrame::FramePixels}, 4.0, 64, 8);
  EXPECT_DOUBLE_EQ(a.mapping.side, 128.0);
  const auto b = crop_region<float>(frame, BBox{100, 75, 16, 64, BoxFrame::FramePixels}, 8.0, 64, 8);
  EXPECT_DOUBLE_EQ(b.mapping.side, 256.0);
  EXPECT_EQ(b.grid.pixels.shape(), (Shape{3, 64, 64}));
  EXPECT_DOUBLE_EQ(a.mapping.x0, 36.0);
  EXPECT_DOUBLE_EQ(a.mapping.y0, 11.0);
}

TEST(Crop, UnitScaleCopiesPixels) {
  // Side equal to the output size with an integral origin samples pixel centers exactly.
  const auto frame = gradient_image(120, 100);
  const auto c = crop_region<double>(frame, BBox{50, 60, 16, 16, BoxFrame::FramePixels}, 2.0, 32, 8);
  ASSERT_DOUBLE_EQ(c.mapping.x0, 34.0);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j)
        EXPECT_DOUBLE_EQ(c.grid.pixels[(ch * 32 + i) * 32 + j], frame.at(34 + j, 44 + i, ch) / 127.5 - 1.0);
}

TEST(Crop, OutsideSamplesUseFrameMean) {
  const auto frame = gradient_image(64, 64);
  const auto mean = frame.channel_mean();
  const auto c = crop_region<double>(frame, BBox{2, 2, 10, 10, BoxFrame::FramePixels}, 4.0, 40, 8);
  // Top-left output pixel samples far outside the frame.
  for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_NEAR(c.grid.pixels[ch * 1600], mean[ch] / 127.5 - 1.0, 1e-12);
}

TEST(Crop, MappingRoundTrip) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(5.0, 150.0);
  const auto frame = gradient_image(160, 160);
  for (int trial = 0; trial < 100; ++trial) {
    const BBox box{u(rng), u(rng), 2.0 + u(rng) / 4, 2.0 + u(rng) / 4, BoxFrame::FramePixels};
    const auto c = crop_region<float>(frame, box, 4.0, 16, 4);
    const auto n = c.mapping.to_normalized(box);
    EXPECT_NEAR(n.cx, 0.5, 1e-12);
    EXPECT_NEAR(n.cy, 0.5, 1e-12);
    const auto back = c.mapping.to_frame(n);
    EXPECT_NEAR(back.cx, box.cx, 0.5);
    EXPECT_NEAR(back.cy, box.cy, 0.5);
    EXPECT_NEAR(back.w, box.w, 1e-9);
    EXPECT_NEAR(back.h, box.h, 1e-9);
  }
}

TEST(Crop, InvalidInputsThrow) {
  const auto frame = gradient_image(32, 32);
  EXPECT_THROW(crop_region<float>(frame, BBox{10, 10, 0, 5, BoxFrame::FramePixels}, 4.0, 16, 4), CropError);
  EXPECT_THROW(crop_region<float>(frame, BBox{10, 10, 5, -1, BoxFrame::FramePixels}, 4.0, 16, 4), CropError);
  EXPECT_THROW(crop_region<float>(frame, BBox{0.5, 0.5, 0.1, 0.1}, 4.0, 16, 4), BoxFrameError);
  CropMapping m;
  EXPECT_THROW(m.to_frame(BBox{1, 1, 1, 1, BoxFrame::FramePixels}), BoxFrameError);
}

TEST(Hanning, WindowValues) {
  const auto h = hanning_window(16);
  EXPECT_EQ(h.front(), 0.0);
  EXPECT_EQ(h.back(), 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(h[i], h[15 - i]);
    EXPECT_NEAR(h[i], 0.5 * (1 - std::cos(2 * M_PI * i / 15.0)), 1e-15);
  }
  EXPECT_EQ(hanning_window(1), std::vector<double>{1.0});
}

TEST(Hanning, UniformScoreLandsInCenter) {
  MapView v;
  v.gh = v.gw = 16;
  v.score.assign(256, 0.4);
  v.offset.assign(512, 0.0);
  v.size.assign(512, 0.1);
  apply_hanning(v);
  // Cells 7 and 8 tie on an even grid; the lower index wins.
  const auto c = argmax_cell(v.score, 16, 16);
  EXPECT_EQ(c.x, 7u);
  EXPECT_EQ(c.y, 7u);
}

TEST(Hanning, DeltaPeakUnchanged) {
  MapView v;
  v.gh = v.gw = 16;
  v.score.assign(256, 0.0);
  v.score[5 * 16 + 3] = 0.9;
  v.offset.assign(512, 0.25);
  v.size.assign(512, 0.2);
  const auto plain = decode_box(v);
  apply_hanning(v);
  const auto windowed = decode_box(v);
  EXPECT_EQ(plain.cx, windowed.cx);
  EXPECT_EQ(plain.cy, windowed.cy);
}

TEST(Clip, KeepsBoxInsideFrame) {
  const auto b = clip_to_frame(BBox::from_corner(-10, 90, 30, 30), 100, 100);
  EXPECT_DOUBLE_EQ(b.x0(), 0.0);
  EXPECT_DOUBLE_EQ(b.x1(), 20.0);
  EXPECT_DOUBLE_EQ(b.y0(), 90.0);
  EXPECT_DOUBLE_EQ(b.y1(), 100.0);
  const auto far = clip_to_frame(BBox::from_corner(150, 150, 5, 5), 100, 100);
  EXPECT_GE(far.w, 1.0);
  EXPECT_GE(far.h, 1.0);
  EXPECT_LE(far.x1(), 100.0);
}

TEST(Tracker, DeterministicAndIndependent) {
  OSTrackModel<float> model(small_tracker_config(), 3);
  SynthSpec spec;
  spec.width = spec.height = 96;
  spec.length = 6;
  spec.max_size = 20;
  spec.seed = 5;
  const auto seq = synth_sequence(spec);
  const auto a = run_sequence(model, seq.frames, seq.boxes[0]);
  const auto b = run_sequence(model, seq.frames, seq.boxes[0]);
  ASSERT_EQ(a.size(), seq.frames.size());
  EXPECT_EQ(a[0].cx, seq.boxes[0].cx);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].cx, b[i].cx);
    EXPECT_EQ(a[i].w, b[i].w);
    EXPECT_EQ(a[i].frame, BoxFrame::FramePixels);
  }

  // Initializing a second tracker does not disturb the first.
  auto s1 = init_tracker(model, seq.frames[0], seq.boxes[0]);
  auto s2 = init_tracker(model, seq.frames[2], seq.boxes[2]);
  track_frame(s2, seq.frames[3]);
  const auto r1 = track_frame(s1, seq.frames[1]);
  EXPECT_EQ(r1.cx, a[1].cx);
  EXPECT_EQ(r1.cy, a[1].cy);
}

TEST(Tracker, OutputsStayInFrame) {
  OSTrackModel<float> model(small_tracker_config(), 4);
  SynthSpec spec;
  spec.width = 80;
  spec.height = 64;
  spec.length = 8;
  spec.max_size = 20;
  const auto seq = synth_sequence(spec);
  for (const auto& b : run_sequence(model, seq.frames, seq.boxes[0])) {
    EXPECT_GE(b.x0(), 0.0);
    EXPECT_GE(b.y0(), 0.0);
    EXPECT_LE(b.x1(), 80.0);
    EXPECT_LE(b.y1(), 64.0);
    EXPECT_GE(b.w, 1.0);
  }
}

TEST(Tracker, UninitializedStateThrows) {
  TrackerState<float> s;
  EXPECT_THROW(track_frame(s, Image(8, 8)), StateError);
}

TEST(Training, KeepRatioWarmup) {
  TrainConfig tc;
  tc.steps = 100;
  tc.keep_warmup_start = 0.2;
  tc.keep_warmup_end = 0.5;
  EXPECT_EQ(keep_ratio_at(0, tc, 0.7), 1.0);
  EXPECT_EQ(keep_ratio_at(20, tc, 0.7), 1.0);
  EXPECT_NEAR(keep_ratio_at(35, tc, 0.7), 0.85, 1e-12);
  EXPECT_EQ(keep_ratio_at(50, tc, 0.7), 0.7);
  EXPECT_EQ(keep_ratio_at(99, tc, 0.7), 0.7);
  tc.keep_warmup_start = tc.keep_warmup_end = 0.0;
  EXPECT_EQ(keep_ratio_at(0, tc, 0.6), 0.6);
}

TEST(Training, SamplePairGeometry) {
  const auto mc = small_tracker_config();
  TrainConfig tc;
  tc.frame_size = 96;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = sample_pair<float>(mc, tc, rng);
    EXPECT_EQ(s.z.pixels.shape(), (Shape{3, 32, 32}));
    EXPECT_EQ(s.x.pixels.shape(), (Shape{3, 64, 64}));
    EXPECT_NEAR(s.z_box.cx, 0.5, 1e-12);
    EXPECT_NEAR(s.z_box.cy, 0.5, 1e-12);
    EXPECT_NEAR(s.z_box.w * s.z_box.h, 0.25, 1e-12);  // template side is 2·√(wh)
    EXPECT_GT(s.x_box.cx, 0.0);
    EXPECT_LT(s.x_box.cx, 1.0);
    for (auto v : s.x.pixels.data()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Training, FewStepsRunAndRestoreKeepRatio) {
  auto mc = small_tracker_config();
  OSTrackModel<float> model(mc, 1);
  const auto before = model.state_dict();
  TrainConfig tc;
  tc.steps = 4;
  tc.batch_size = 2;
  tc.frame_size = 96;
  tc.log_every = 2;
  std::size_t calls = 0;
  const auto hist = train_model(model, tc, [&](const TrainLog& l) {
    ++calls;
    EXPECT_TRUE(std::isfinite(l.loss.total));
  });
  EXPECT_EQ(hist.size(), 2u);
  EXPECT_EQ(calls, 2u);
  EXPECT_EQ(hist.back().step, 4u);
  EXPECT_EQ(model.config().keep_ratio, 0.7);
  const auto after = model.state_dict();
  double moved = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    moved = std::max(moved, testutil::max_abs_diff(before[i].second.data(), after[i].second.data()));
  EXPECT_GT(moved, 0.0);
}
