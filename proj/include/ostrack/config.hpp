#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ostrack {

/// Malformed or unknown configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Which template tokens score the search candidates.
enum class ScoringStrategy { CenterToken, AllTemplateTokens, TemplateTokensInGtBox, Center4x4 };

inline std::string to_string(ScoringStrategy s) {
  switch (s) {
    case ScoringStrategy::CenterToken: return "center";
    case ScoringStrategy::AllTemplateTokens: return "all";
    case ScoringStrategy::TemplateTokensInGtBox: return "gt_box";
    case ScoringStrategy::Center4x4: return "center4x4";
  }
  return "center";
}

inline ScoringStrategy parse_scoring(const std::string& s) {
  if (s == "center") return ScoringStrategy::CenterToken;
  if (s == "all") return ScoringStrategy::AllTemplateTokens;
  if (s == "gt_box") return ScoringStrategy::TemplateTokensInGtBox;
  if (s == "center4x4") return ScoringStrategy::Center4x4;
  throw ConfigError("unknown scoring strategy '" + s + "'");
}

/// Architecture hyperparameters. Defaults are the desk-scale model.
struct ModelConfig {
  std::size_t patch_size = 16;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t depth = 8;
  std::size_t mlp_ratio = 4;
  std::size_t template_size = 64;
  std::size_t search_size = 128;
  std::vector<std::size_t> elimination_layers = {3, 5, 7};  // 1-based
  double keep_ratio = 0.7;
  ScoringStrategy scoring = ScoringStrategy::CenterToken;
  std::size_t joint_start_layer = 0;  // layers 1..j0 run with template/search separated
  std::size_t head_stages = 4;
  double template_factor = 2.0;
  double search_factor = 4.0;
  bool hanning = true;

  std::size_t template_grid() const { return template_size / patch_size; }
  std::size_t search_grid() const { return search_size / patch_size; }
  std::size_t template_tokens() const { return template_grid() * template_grid(); }
  std::size_t search_tokens() const { return search_grid() * search_grid(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }

  bool eliminates_at(std::size_t layer) const {
    return std::find(elimination_layers.begin(), elimination_layers.end(), layer) != elimination_layers.end();
  }

  /// ViT-Base with 128/256 inputs and elimination at 4, 7, 10.
  static ModelConfig vit_base_256() {
    ModelConfig c;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.num_heads = 12;
    c.depth = 12;
    c.template_size = 128;
    c.search_size = 256;
    c.elimination_layers = {4, 7, 10};
    c.keep_ratio = 0.7;
    return c;
  }

  static ModelConfig vit_base_384() {
    ModelConfig c = vit_base_256();
    c.template_size = 192;
    c.search_size = 384;
    c.search_factor = 5.0;
    return c;
  }

  void validate() const {
    if (patch_size == 0 || embed_dim == 0 || num_heads == 0 || depth == 0) throw ConfigError("zero-sized model dimension");
    if (embed_dim % num_heads != 0) throw ConfigError("embed_dim must be divisible by num_heads");
    if (template_size % patch_size != 0 || search_size % patch_size != 0)
      throw ConfigError("image sizes must be multiples of patch_size");
    for (const auto l : elimination_layers)
      if (l < 1 || l > depth) throw ConfigError("elimination layer " + std::to_string(l) + " outside [1, depth]");
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("keep_ratio must be in (0, 1]");
    if (joint_start_layer > depth) throw ConfigError("joint_start_layer must be in [0, depth]");
    if (head_stages < 1) throw ConfigError("head_stages must be at least 1");
    if (template_factor <= 0.0 || search_factor <= 0.0) throw ConfigError("crop factors must be positive");
  }
};

/// Optimization and data settings for the training driver.
struct TrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 8;
  double lr_backbone = 5e-4;  // the toy backbone starts from scratch, so it gets the full rate
  double lr_other = 5e-4;
  double weight_decay = 1e-4;
  double decay_fraction = 0.8;
  std::uint64_t seed = 1;
  std::size_t frame_size = 192;
  std::size_t distractors = 2;
  double center_jitter = 1.5;  // search-center shift range, in units of √(wh)
  double scale_jitter = 0.2;   // log-normal std of the crop box size
  double brightness_jitter = 0.2;
  std::size_t max_gap = 8;     // frames between template and search
  double keep_warmup_start = 0.2;  // keep ratio held at 1 until this fraction of steps,
  double keep_warmup_end = 0.5;    // then lowered linearly to the model's ratio by this one
  std::size_t log_every = 100;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("bad integer for " + key + ": '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw ConfigError("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_size(key, item));
  }
  return out;
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys are rejected.
inline Config parse_config(const std::string& text) {
  Config cfg;
  auto& m = cfg.model;
  auto& t = cfg.train;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto val = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("duplicate key '" + key + "'");
    using namespace detail;
    if (key == "patch_size") m.patch_size = parse_size(key, val);
    else if (key == "embed_dim") m.embed_dim = parse_size(key, val);
    else if (key == "num_heads") m.num_heads = parse_size(key, val);
    else if (key == "depth") m.depth = parse_size(key, val);
    else if (key == "mlp_ratio") m.mlp_ratio = parse_size(key, val);
    else if (key == "template_size") m.template_size = parse_size(key, val);
    else if (key == "search_size") m.search_size = parse_size(key, val);
    else if (key == "elimination_layers") m.elimination_layers = parse_list(key, val);
    else if (key == "keep_ratio") m.keep_ratio = parse_double(key, val);
    else if (key == "scoring") m.scoring = parse_scoring(val);
    else if (key == "joint_start_layer") m.joint_start_layer = parse_size(key, val);
    else if (key == "head_stages") m.head_stages = parse_size(key, val);
    else if (key == "template_factor") m.template_factor = parse_double(key, val);
    else if (key == "search_factor") m.search_factor = parse_double(key, val);
    else if (key == "hanning") m.hanning = parse_bool(key, val);
    else if (key == "steps") t.steps = parse_size(key, val);
    else if (key == "batch_size") t.batch_size = parse_size(key, val);
    else if (key == "lr_backbone") t.lr_backbone = parse_double(key, val);
    else if (key == "lr_other") t.lr_other = parse_double(key, val);
    else if (key == "weight_decay") t.weight_decay = parse_double(key, val);
    else if (key == "decay_fraction") t.decay_fraction = parse_double(key, val);
    else if (key == "seed") t.seed = parse_size(key, val);
    else if (key == "frame_size") t.frame_size = parse_size(key, val);
    else if (key == "distractors") t.distractors = parse_size(key, val);
    else if (key == "center_jitter") t.center_jitter = parse_double(key, val);
    else if (key == "scale_jitter") t.scale_jitter = parse_double(key, val);
    else if (key == "brightness_jitter") t.brightness_jitter = parse_double(key, val);
    else if (key == "max_gap") t.max_gap = parse_size(key, val);
    else if (key == "keep_warmup_start") t.keep_warmup_start = parse_double(key, val);
    else if (key == "keep_warmup_end") t.keep_warmup_end = parse_double(key, val);
    else if (key == "log_every") t.log_every = parse_size(key, val);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  m.validate();
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline std::string to_text(const Config& cfg) {
  const auto& m = cfg.model;
  const auto& t = cfg.train;
  std::ostringstream os;
  os.precision(10);
  os << "patch_size = " << m.patch_size << "\n"
     << "embed_dim = " << m.embed_dim << "\n"
     << "num_heads = " << m.num_heads << "\n"
     << "depth = " << m.depth << "\n"
     << "mlp_ratio = " << m.mlp_ratio << "\n"
     << "template_size = " << m.template_size << "\n"
     << "search_size = " << m.search_size << "\n"
     << "elimination_layers = ";
  for (std::size_t i = 0; i < m.elimination_layers.size(); ++i) os << (i ? "," : "") << m.elimination_layers[i];
  os << "\n"
     << "keep_ratio = " << m.keep_ratio << "\n"
     << "scoring = " << to_string(m.scoring) << "\n"
     << "joint_start_layer = " << m.joint_start_layer << "\n"
     << "head_stages = " << m.head_stages << "\n"
     << "template_factor = " << m.template_factor << "\n"
     << "search_factor = " << m.search_factor << "\n"
     << "hanning = " << (m.hanning ? "true" : "false") << "\n"
     << "steps = " << t.steps << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "lr_backbone = " << t.lr_backbone << "\n"
     << "lr_other = " << t.lr_other << "\n"
     << "weight_decay = " << t.weight_decay << "\n"
     << "decay_fraction = " << t.decay_fraction << "\n"
     << "seed = " << t.seed << "\n"
     << "frame_size = " << t.frame_size << "\n"
     << "distractors = " << t.distractors << "\n"
     << "center_jitter = " << t.center_jitter << "\n"
     << "scale_jitter = " << t.scale_jitter << "\n"
     << "brightness_jitter = " << t.brightness_jitter << "\n"
     << "max_gap = " << t.max_gap << "\n"
     << "keep_warmup_start = " << t.keep_warmup_start << "\n"
     << "keep_warmup_end = " << t.keep_warmup_end << "\n"
     << "log_every = " << t.log_every << "\n";
  return os.str();
}

}  // namespace ostrack
