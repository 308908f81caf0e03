#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ostrack/ostrack.hpp"

using namespace ostrack;
namespace fs = std::filesystem;

namespace {

/// A config path, or one of the built-in presets.
ModelConfig model_config_from(const std::string& spec) {
  if (spec == "vit-base-256") return ModelConfig::vit_base_256();
  if (spec == "vit-base-384") return ModelConfig::vit_base_384();
  if (spec == "toy") return ModelConfig{};
  return load_config(spec).model;
}

/// The architecture a weight file was trained with: explicit --config, else W.cfg next to it.
ModelConfig config_for_weights(const std::string& weights, const std::string& override_path) {
  if (!override_path.empty()) return model_config_from(override_path);
  const auto side = weights + ".cfg";
  if (fs::exists(side)) return load_config(side).model;
  return ModelConfig{};
}

int cmd_train(const std::string& config_path, const std::string& out, bool quiet) {
  const auto cfg = load_config(config_path);
  OSTrackModel<float> model(cfg.model, cfg.train.seed);
  train_model(model, cfg.train, [&](const TrainLog& l) {
    if (quiet) return;
    std::fprintf(stderr, "step %zu  loss %.4f  cls %.4f  giou %.4f  l1 %.4f  rho %.2f  lr x%.2f\n", l.step,
                 l.loss.total, l.loss.cls, l.loss.giou, l.loss.l1, l.keep_ratio, l.lr_scale);
  });
  model.save(out);
  std::ofstream(out + ".cfg") << to_text(cfg);
  return 0;
}

int cmd_track(const std::string& weights_path, const std::string& config, const std::string& seq_dir,
              const std::string& out, const std::vector<double>& init, double keep_ratio) {
  auto model = OSTrackModel<float>::load(weights_path, config_for_weights(weights_path, config));
  if (keep_ratio > 0.0) model.set_keep_ratio(keep_ratio);
  const auto seq = read_sequence(seq_dir);
  BBox box;
  if (init.size() == 4) {
    box = BBox::from_corner(init[0], init[1], init[2], init[3]);
  } else if (!seq.boxes.empty()) {
    box = seq.boxes.front();
  } else {
    throw std::runtime_error("no initial box: pass --init x,y,w,h or provide groundtruth.txt");
  }
  write_boxes(out, run_sequence(model, seq.frames, box));
  return 0;
}

/// Bilinear resize through the crop sampler: the largest centered square, scaled to `size`.
ImagePatchGrid<float> load_square(const std::string& path, std::size_t size, std::size_t patch, ImageRole role) {
  const auto img = read_ppm(path);
  const double side = static_cast<double>(std::min(img.width, img.height));
  const BBox box{img.width / 2.0, img.height / 2.0, side, side, BoxFrame::FramePixels};
  return crop_region<float>(img, box, 1.0, size, patch, role).grid;
}

int cmd_dump_attn(const std::string& weights_path, const std::string& config, const std::vector<std::string>& pair,
                  const std::string& out_dir, double keep_ratio) {
  auto model = OSTrackModel<float>::load(weights_path, config_for_weights(weights_path, config));
  if (keep_ratio > 0.0) model.set_keep_ratio(keep_ratio);
  const auto& cfg = model.config();
  const auto z = load_square(pair.at(0), cfg.template_size, cfg.patch_size, ImageRole::Template);
  const auto x = load_square(pair.at(1), cfg.search_size, cfg.patch_size, ImageRole::Search);
  NoGradScope<float> no_grad;
  const auto enc = model.encode(z, x);
  fs::create_directories(out_dir);
  const auto g = cfg.search_grid(), p = cfg.patch_size;
  const auto row = center_token_index(cfg.template_grid(), cfg.template_grid());
  for (const auto& rec : enc.records) {
    // Head-averaged weights from the center template token to each surviving search token.
    std::vector<double> grid(g * g, 0.0);
    std::vector<bool> alive(g * g, false);
    const auto nz = rec.template_count;
    for (std::size_t j = 0; j < rec.search_orig_index.size(); ++j) {
      double v = 0.0;
      for (const auto& h : rec.heads) v += h.at(row, nz + j);
      grid[rec.search_orig_index[j]] = v / static_cast<double>(rec.heads.size());
      alive[rec.search_orig_index[j]] = true;
    }
    const double mx = *std::max_element(grid.begin(), grid.end());
    // Eliminated positions are black; live ones span 32..255.
    std::vector<std::uint8_t> px(g * p * g * p, 0);
    for (std::size_t y = 0; y < g * p; ++y)
      for (std::size_t xx = 0; xx < g * p; ++xx) {
        const auto cell = (y / p) * g + xx / p;
        if (!alive[cell]) continue;
        const double t = mx > 0.0 ? grid[cell] / mx : 0.0;
        px[y * g * p + xx] = static_cast<std::uint8_t>(32.0 + std::lround(223.0 * t));
      }
    char name[32];
    std::snprintf(name, sizeof(name), "layer_%02zu.pgm", rec.layer);
    write_pgm((fs::path(out_dir) / name).string(), g * p, g * p, px);
  }
  return 0;
}

std::vector<double> parse_sweep(const std::string& s) {
  // rho=a:b:step
  const auto eq = s.find('=');
  if (eq == std::string::npos || s.substr(0, eq) != "rho") throw CLI::ValidationError("--sweep", "expected rho=a:b:step");
  std::vector<double> parts;
  std::stringstream ss(s.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(std::stod(item));
  if (parts.size() != 3 || parts[2] <= 0.0 || parts[1] < parts[0]) {
    throw CLI::ValidationError("--sweep", "expected rho=a:b:step with a <= b and step > 0");
  }
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((parts[0] + parts[2] * i) * 1e9) / 1e9);
  return out;
}

int cmd_bench_macs(const std::string& config, const std::string& sweep, const std::string& csv) {
  const auto base = model_config_from(config);
  std::vector<double> rhos{base.keep_ratio};
  if (!sweep.empty()) rhos = parse_sweep(sweep);
  std::size_t stages = base.elimination_layers.size();
  std::ofstream os;
  if (!csv.empty()) {
    os.open(csv);
    if (!os) throw std::runtime_error("cannot write " + csv);
    os << "patch_size,embed_dim,num_heads,depth,mlp_ratio,template_size,search_size,elimination_layers,keep_ratio,"
          "encoder_macs,embed_macs,head_macs,total_macs,template_tokens,search_tokens";
    for (std::size_t i = 1; i <= stages; ++i) os << ",search_tokens_stage" << i;
    os << "\n";
  }
  for (const double rho : rhos) {
    auto cfg = base;
    cfg.keep_ratio = rho;
    const auto rep = macs_estimate(cfg);
    std::printf("rho %.2f  encoder %.2f GMACs  (+embed %.2f, +head %.2f)  search tokens %zu", rho, rep.encoder / 1e9,
                rep.embed / 1e9, rep.head / 1e9, cfg.search_tokens());
    for (const auto n : rep.search_counts) std::printf(" -> %zu", n);
    std::printf("\n");
    if (os.is_open()) {
      os << cfg.patch_size << "," << cfg.embed_dim << "," << cfg.num_heads << "," << cfg.depth << "," << cfg.mlp_ratio
         << "," << cfg.template_size << "," << cfg.search_size << ",";
      for (std::size_t i = 0; i < cfg.elimination_layers.size(); ++i) os << (i ? ";" : "") << cfg.elimination_layers[i];
      os.precision(12);
      os << "," << rho << "," << rep.encoder << "," << rep.embed << "," << rep.head << "," << rep.total(true) << ","
         << cfg.template_tokens() << "," << cfg.search_tokens();
      for (const auto n : rep.search_counts) os << "," << n;
      os << "\n";
    }
  }
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  std::ifstream is(spec_path);
  if (!is) throw std::runtime_error("cannot open " + spec_path);
  std::stringstream ss;
  ss << is.rdbuf();
  write_sequence(out, synth_sequence(parse_synth_spec(ss.str())));
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, bool skip_first) {
  auto p = read_boxes(pred), g = read_boxes(gt);
  if (skip_first && !p.empty() && !g.empty()) {
    p.erase(p.begin());
    g.erase(g.begin());
  }
  const auto m = evaluate_metrics(p, g);
  std::printf("frames %zu\nAO %.4f\nSR@0.5 %.4f\nSR@0.75 %.4f\n", p.size(), m.ao, m.sr50, m.sr75);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-stream tracker with early candidate elimination"};
  app.require_subcommand(1);

  std::string weights, config, seq, out, csv, sweep, spec, pred, gt;
  std::vector<std::string> pair;
  std::vector<double> init;
  double keep_ratio = 0.0;
  bool quiet = false, skip_first = false;

  auto* train = app.add_subcommand("train", "Train on synthetic sequences");
  train->add_option("--config", config, "Config file (key = value)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output weight file")->required();
  train->add_flag("--quiet", quiet, "No progress output");

  auto* track = app.add_subcommand("track", "Track a PPM frame sequence");
  track->add_option("--weights", weights, "Weight file")->required()->check(CLI::ExistingFile);
  track->add_option("--seq", seq, "Directory with 000001.ppm ... and optionally groundtruth.txt")->required();
  track->add_option("--out", out, "Output boxes (x y w h per line)")->required();
  track->add_option("--config", config, "Architecture config (default: <weights>.cfg)");
  track->add_option("--init", init, "Initial box x,y,w,h (default: first groundtruth line)")->delimiter(',')->expected(4);
  track->add_option("--keep-ratio", keep_ratio, "Override the keep ratio")->check(CLI::Range(0.0, 1.0));

  auto* dump = app.add_subcommand("dump-attn", "Write per-layer attention maps of the center template token");
  dump->add_option("--weights", weights, "Weight file")->required()->check(CLI::ExistingFile);
  dump->add_option("--pair", pair, "Template and search PPM")->required()->expected(2)->check(CLI::ExistingFile);
  dump->add_option("--out", out, "Output directory")->required();
  dump->add_option("--config", config, "Architecture config (default: <weights>.cfg)");
  dump->add_option("--keep-ratio", keep_ratio, "Override the keep ratio")->check(CLI::Range(0.0, 1.0));

  auto* bench = app.add_subcommand("bench-macs", "Closed-form MAC counts");
  bench->add_option("--config", config, "Config file or preset (vit-base-256, vit-base-384, toy)")->required();
  bench->add_option("--sweep", sweep, "Keep-ratio sweep, e.g. rho=0.5:1.0:0.1");
  bench->add_option("--csv", csv, "CSV output");

  auto* synth = app.add_subcommand("synth", "Render a synthetic sequence");
  synth->add_option("--spec", spec, "Sequence spec (key = value)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "AO and success rates");
  eval->add_option("--pred", pred, "Predicted boxes")->required()->check(CLI::ExistingFile);
  eval->add_option("--gt", gt, "Ground-truth boxes")->required()->check(CLI::ExistingFile);
  eval->add_flag("--skip-first", skip_first, "Ignore the initialization frame");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, out, quiet);
    if (*track) return cmd_track(weights, config, seq, out, init, keep_ratio);
    if (*dump) return cmd_dump_attn(weights, config, pair, out, keep_ratio);
    if (*bench) return cmd_bench_macs(config, sweep, csv);
    if (*synth) return cmd_synth(spec, out);
    if (*eval) return cmd_eval(pred, gt, skip_first);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
