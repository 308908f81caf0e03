#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ostrack/config.hpp"
#include "ostrack/elimination.hpp"
#include "ostrack/embedder.hpp"
#include "ostrack/encoder.hpp"
#include "ostrack/head.hpp"
#include "ostrack/optim.hpp"
#include "ostrack/serialize.hpp"

namespace ostrack {

template <class T>
struct ForwardResult {
  HeadMaps<T> maps;
  std::vector<TokenState<T>> states;                      // final backbone state per sample
  std::vector<std::vector<AttentionRecord<T>>> records;  // per sample, per layer
};

/// The full one-stream tracker network: embedder, encoder stack, head.
template <class T = float>
class OSTrackModel {
 public:
  explicit OSTrackModel(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init(seed);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Inference-time knobs that do not change parameter shapes.
  void set_keep_ratio(double rho) {
    auto c = cfg_;
    c.keep_ratio = rho;
    c.validate();
    cfg_ = c;
  }
  void set_elimination_layers(std::vector<std::size_t> layers) {
    auto c = cfg_;
    c.elimination_layers = std::move(layers);
    c.validate();
    cfg_ = c;
  }
  void set_joint_start_layer(std::size_t j0) {
    auto c = cfg_;
    c.joint_start_layer = j0;
    c.validate();
    cfg_ = c;
  }
  void set_scoring(ScoringStrategy s) { cfg_.scoring = s; }

  EmbedderParams<T> embed;
  BackboneParams<T> backbone;
  HeadParams<T> head;

  TemplateLayout template_layout(std::optional<BBox> gt = std::nullopt) const {
    return {cfg_.template_grid(), cfg_.template_grid(), gt};
  }

  /// Backbone over one pair; returns the final token state and per-layer attention.
  BackboneOutput<T> encode(const ImagePatchGrid<T>& z, const ImagePatchGrid<T>& x,
                           std::optional<BBox> template_box = std::nullopt) const {
    const auto tokens = embed_pair(z, x, embed);
    return backbone_forward(tokens, backbone, cfg_, template_layout(template_box));
  }

  /// Batched forward. Template boxes are only consulted by the gt_box scoring strategy.
  ForwardResult<T> forward(std::span<const ImagePatchGrid<T>> templates, std::span<const ImagePatchGrid<T>> searches,
                           NormMode mode, std::span<const std::optional<BBox>> template_boxes = {}) {
    if (templates.size() != searches.size() || templates.empty()) throw ContractError("forward: mismatched batch");
    ForwardResult<T> r;
    std::vector<Tensor<T>> restored;
    for (std::size_t b = 0; b < templates.size(); ++b) {
      const auto box = b < template_boxes.size() ? template_boxes[b] : std::nullopt;
      auto enc = encode(templates[b], searches[b], box);
      restored.push_back(restore_order(enc.state));
      r.states.push_back(std::move(enc.state));
      r.records.push_back(std::move(enc.records));
    }
    r.maps = head_forward<T>(restored, head, mode);
    return r;
  }

  ForwardResult<T> forward(const ImagePatchGrid<T>& z, const ImagePatchGrid<T>& x, NormMode mode,
                           std::optional<BBox> template_box = std::nullopt) {
    const std::optional<BBox> boxes[1] = {template_box};
    return forward(std::span<const ImagePatchGrid<T>>(&z, 1), std::span<const ImagePatchGrid<T>>(&x, 1), mode, boxes);
  }

  std::vector<Tensor<T>> backbone_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : named_parameters())
      if (name.rfind("head.", 0) != 0) out.push_back(t);
    return out;
  }

  std::vector<Tensor<T>> head_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : named_parameters())
      if (name.rfind("head.", 0) == 0) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }

  /// Trainable parameters in a stable order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embed.projection", embed.projection);
    out.emplace_back("embed.pos_template", embed.pos_template);
    out.emplace_back("embed.pos_search", embed.pos_search);
    for (std::size_t l = 0; l < backbone.layers.size(); ++l) {
      const auto& p = backbone.layers[l];
      const auto pre = "blocks." + std::to_string(l) + ".";
      out.emplace_back(pre + "ln1.gamma", p.ln1_gamma);
      out.emplace_back(pre + "ln1.beta", p.ln1_beta);
      out.emplace_back(pre + "attn.qkv.weight", p.attn.qkv_weight);
      out.emplace_back(pre + "attn.qkv.bias", p.attn.qkv_bias);
      out.emplace_back(pre + "attn.proj.weight", p.attn.proj_weight);
      out.emplace_back(pre + "attn.proj.bias", p.attn.proj_bias);
      out.emplace_back(pre + "ln2.gamma", p.ln2_gamma);
      out.emplace_back(pre + "ln2.beta", p.ln2_beta);
      out.emplace_back(pre + "mlp.fc1.weight", p.fc1_weight);
      out.emplace_back(pre + "mlp.fc1.bias", p.fc1_bias);
      out.emplace_back(pre + "mlp.fc2.weight", p.fc2_weight);
      out.emplace_back(pre + "mlp.fc2.bias", p.fc2_bias);
    }
    out.emplace_back("norm.gamma", backbone.norm_gamma);
    out.emplace_back("norm.beta", backbone.norm_beta);
    for (std::size_t b = 0; b < 3; ++b) {
      const auto& br = head.branches[b];
      const auto pre = std::string("head.") + kBranchNames[b] + ".";
      for (std::size_t s = 0; s < br.stages.size(); ++s) {
        const auto& st = br.stages[s];
        const auto sp = pre + std::to_string(s) + ".";
        out.emplace_back(sp + "conv.weight", st.weight);
        out.emplace_back(sp + "conv.bias", st.bias);
        out.emplace_back(sp + "bn.gamma", st.gamma);
        out.emplace_back(sp + "bn.beta", st.beta);
      }
      out.emplace_back(pre + "out.weight", br.out_weight);
      out.emplace_back(pre + "out.bias", br.out_bias);
    }
    return out;
  }

  /// Parameters plus batch-norm running statistics, as written to weight files.
  std::vector<std::pair<std::string, Tensor<T>>> state_dict() const {
    auto out = named_parameters();
    for (std::size_t b = 0; b < 3; ++b) {
      const auto& br = head.branches[b];
      for (std::size_t s = 0; s < br.stages.size(); ++s) {
        const auto& st = br.stages[s].stats;
        const auto sp = std::string("head.") + kBranchNames[b] + "." + std::to_string(s) + ".bn.";
        std::vector<T> mean = st.mean, var = st.var;
        if (!st.initialized) {
          std::fill(mean.begin(), mean.end(), T(0));
          std::fill(var.begin(), var.end(), T(1));
        }
        out.emplace_back(sp + "running_mean", Tensor<T>({mean.size()}, mean));
        out.emplace_back(sp + "running_var", Tensor<T>({var.size()}, var));
      }
    }
    return out;
  }

  void load_state_dict(const std::vector<std::pair<std::string, Tensor<T>>>& entries) {
    std::map<std::string, const Tensor<T>*> by_name;
    for (const auto& [name, t] : entries) by_name[name] = &t;
    auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("weight file is missing " + name);
      if (it->second->shape() != shape) {
        throw FormatError("weight " + name + " has shape " + to_string(it->second->shape()) + ", expected " +
                          to_string(shape));
      }
      return *it->second;
    };
    for (auto& [name, t] : named_parameters()) {
      const auto& src = fetch(name, t.shape());
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    }
    for (std::size_t b = 0; b < 3; ++b) {
      auto& br = head.branches[b];
      for (std::size_t s = 0; s < br.stages.size(); ++s) {
        auto& st = br.stages[s].stats;
        const auto sp = std::string("head.") + kBranchNames[b] + "." + std::to_string(s) + ".bn.";
        const auto& m = fetch(sp + "running_mean", {st.mean.size()});
        const auto& v = fetch(sp + "running_var", {st.var.size()});
        std::copy(m.data().begin(), m.data().end(), st.mean.begin());
        std::copy(v.data().begin(), v.data().end(), st.var.begin());
        st.initialized = true;
      }
    }
  }

  void save(const std::string& path) const { weights::save(path, state_dict()); }

  static OSTrackModel load(const std::string& path, ModelConfig cfg) {
    OSTrackModel m(std::move(cfg));
    m.load_state_dict(weights::load<T>(path));
    return m;
  }

  /// Deep copy with independent parameter storage.
  OSTrackModel clone() const {
    OSTrackModel m(cfg_);
    m.load_state_dict(state_dict());
    return m;
  }

 private:
  static constexpr const char* kBranchNames[3] = {"cls", "offset", "size"};

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto d = cfg_.embed_dim, p = cfg_.patch_size, hidden = cfg_.mlp_ratio * d;
    auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      std::vector<T> v(fan_in * fan_out);
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>({fan_in, fan_out}, std::move(v), true);
    };
    auto normal = [&](Shape shape, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      std::vector<T> v(numel(shape));
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>(std::move(shape), std::move(v), true);
    };
    auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
    auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1), true); };

    embed.projection = xavier(3 * p * p, d);
    embed.pos_template = normal({cfg_.template_tokens(), d}, 0.02);
    embed.pos_search = normal({cfg_.search_tokens(), d}, 0.02);
    backbone.layers.clear();
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      EncoderLayerParams<T> lp;
      lp.ln1_gamma = ones(d);
      lp.ln1_beta = zeros(d);
      lp.attn.qkv_weight = xavier(d, 3 * d);
      // Keys start as a copy of the queries, so q·k begins as a symmetric similarity. Without
      // that, template rows (which the loss barely touches) drift toward attending away from
      // the target, and scoring search candidates by them goes worse than random.
      {
        auto w = lp.attn.qkv_weight.mutable_data();
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t c = 0; c < d; ++c) w[i * 3 * d + d + c] = w[i * 3 * d + c];
      }
      lp.attn.qkv_bias = zeros(3 * d);
      lp.attn.proj_weight = xavier(d, d);
      lp.attn.proj_bias = zeros(d);
      lp.ln2_gamma = ones(d);
      lp.ln2_beta = zeros(d);
      lp.fc1_weight = xavier(d, hidden);
      lp.fc1_bias = zeros(hidden);
      lp.fc2_weight = xavier(hidden, d);
      lp.fc2_bias = zeros(d);
      backbone.layers.push_back(std::move(lp));
    }
    backbone.norm_gamma = ones(d);
    backbone.norm_beta = zeros(d);

    const auto channels = head_stage_channels(d, cfg_.head_stages);
    const std::size_t out_channels[3] = {1, 2, 2};
    for (std::size_t b = 0; b < 3; ++b) {
      auto& br = head.branches[b];
      br.stages.clear();
      std::size_t cin = d;
      for (const auto cout : channels) {
        ConvBnStage<T> st;
        st.weight = normal({cout, cin, 3, 3}, std::sqrt(2.0 / static_cast<double>(cin * 9)));
        st.bias = zeros(cout);
        st.gamma = ones(cout);
        st.beta = zeros(cout);
        st.stats = BatchNormStats<T>(cout);
        st.stats.reset();
        br.stages.push_back(std::move(st));
        cin = cout;
      }
      br.out_weight = normal({out_channels[b], cin, 1, 1}, std::sqrt(1.0 / static_cast<double>(cin)));
      // Score branch starts near a 0.1 prior so the focal loss is not swamped by negatives.
      br.out_bias = b == 0 ? Tensor<T>::full({1}, T(-2.19), true) : zeros(out_channels[b]);
    }
  }

  ModelConfig cfg_;
};

/// Backbone at lr_backbone, head at lr_other.
template <class T>
std::vector<ParamGroup<T>> parameter_groups(const OSTrackModel<T>& model, double lr_backbone, double lr_other) {
  return {ParamGroup<T>{model.backbone_parameters(), lr_backbone}, ParamGroup<T>{model.head_parameters(), lr_other}};
}

}  // namespace ostrack
