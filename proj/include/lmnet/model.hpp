#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmnet/attention.hpp"
#include "lmnet/json_keys.hpp"
#include "lmnet/nn_ops.hpp"
#include "lmnet/reparam.hpp"

namespace lmnet {

// ---------------------------------------------------------------------------
// Configuration

struct KernelExtent {
  std::size_t h = 3, w = 3;
  friend bool operator==(const KernelExtent&, const KernelExtent&) = default;
};

struct GftConfig {
  std::size_t stride = 16;
  std::size_t heads = 0;  // 0 = one head per 32 channels
  std::size_t mlp_ratio = 4;
  std::size_t depth = 1;
};

struct LftConfig {
  std::size_t heads = 0;
  std::size_t window = 7;
  std::size_t mlp_ratio = 4;
  std::size_t depth = 1;
};

struct LmNetConfig {
  std::size_t base_channels = 16;
  std::size_t expansion = 2;
  std::size_t se_reduction = 4;
  std::vector<KernelExtent> branch_kernels{{3, 1}, {1, 3}, {3, 3}, {5, 5}};
  bool cap_channels = true;  // C,2C,4C,8C,8C instead of ...,16C
  std::size_t num_classes = 2;
  std::size_t input_h = 256, input_w = 256;
  GftConfig gft;
  std::array<LftConfig, 4> lft{};
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static constexpr std::size_t kLevels = 5;

  /// Channels of pyramid level 0..4 (x1..x5); level l > 0 has stride 2^l.
  std::size_t level_channels(std::size_t level) const {
    std::size_t mult = std::size_t{1} << level;
    if (cap_channels) mult = std::min<std::size_t>(mult, 8);
    return base_channels * mult;
  }

  std::size_t level_stride(std::size_t level) const { return std::size_t{1} << level; }

  static std::size_t auto_heads(std::size_t channels, std::size_t requested) {
    if (requested) return requested;
    std::size_t h = std::max<std::size_t>(1, channels / 32);
    while (channels % h) --h;
    return h;
  }

  void validate() const {
    if (base_channels == 0 || expansion == 0) throw ValueError("base_channels and expansion must be positive");
    if (num_classes < 2) throw ValueError("num_classes must be at least 2");
    if (input_h == 0 || input_w == 0 || input_h % 16 || input_w % 16) {
      throw ValueError("input size must be a positive multiple of 16, got " + std::to_string(input_h) + "x" +
                       std::to_string(input_w));
    }
    if (gft.stride == 0 || (gft.stride & (gft.stride - 1)) || gft.stride > 16) {
      throw ValueError("gft stride must be a power of two no larger than 16");
    }
    if (branch_kernels.empty()) throw ValueError("at least one branch kernel is required");
    for (const auto& k : branch_kernels) {
      if (k.h % 2 == 0 || k.w % 2 == 0) throw ValueError("branch kernels must have odd extents");
    }
    for (const auto& l : lft) {
      if (l.window == 0 || l.window % 2 == 0) throw ValueError("lft window must be odd");
    }
  }
};

inline void to_json(nlohmann::json& j, const LmNetConfig& c) {
  nlohmann::json kernels = nlohmann::json::array();
  for (const auto& k : c.branch_kernels) kernels.push_back({k.h, k.w});
  nlohmann::json lft = nlohmann::json::array();
  for (const auto& l : c.lft) {
    lft.push_back({{"heads", l.heads}, {"window", l.window}, {"mlp_ratio", l.mlp_ratio}, {"depth", l.depth}});
  }
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"expansion", c.expansion},
                     {"se_reduction", c.se_reduction},
                     {"branch_kernels", kernels},
                     {"cap_channels", c.cap_channels},
                     {"num_classes", c.num_classes},
                     {"input_size", {c.input_h, c.input_w}},
                     {"gft",
                      {{"stride", c.gft.stride},
                       {"heads", c.gft.heads},
                       {"mlp_ratio", c.gft.mlp_ratio},
                       {"depth", c.gft.depth}}},
                     {"lft", lft},
                     {"bn_eps", c.bn_eps},
                     {"bn_momentum", c.bn_momentum}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, LmNetConfig& c) {
  detail::reject_unknown_keys(j,
                              {"base_channels", "expansion", "se_reduction", "branch_kernels", "cap_channels",
                               "num_classes", "input_size", "gft", "lft", "bn_eps", "bn_momentum"},
                              "model config");
  c.base_channels = j.value("base_channels", c.base_channels);
  c.expansion = j.value("expansion", c.expansion);
  c.se_reduction = j.value("se_reduction", c.se_reduction);
  if (j.contains("branch_kernels")) {
    c.branch_kernels.clear();
    for (const auto& k : j.at("branch_kernels")) c.branch_kernels.push_back({k.at(0).get<std::size_t>(), k.at(1).get<std::size_t>()});
  }
  c.cap_channels = j.value("cap_channels", c.cap_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  if (j.contains("input_size")) {
    c.input_h = j.at("input_size").at(0).get<std::size_t>();
    c.input_w = j.at("input_size").at(1).get<std::size_t>();
  }
  if (j.contains("gft")) {
    const auto& g = j.at("gft");
    detail::reject_unknown_keys(g, {"stride", "heads", "mlp_ratio", "depth"}, "gft config");
    c.gft.stride = g.value("stride", c.gft.stride);
    c.gft.heads = g.value("heads", c.gft.heads);
    c.gft.mlp_ratio = g.value("mlp_ratio", c.gft.mlp_ratio);
    c.gft.depth = g.value("depth", c.gft.depth);
  }
  if (j.contains("lft")) {
    const auto& arr = j.at("lft");
    if (!arr.is_array() || arr.size() != 4) throw ValueError("config 'lft' must list exactly 4 stages");
    for (std::size_t i = 0; i < 4; ++i) {
      auto& l = c.lft[i];
      detail::reject_unknown_keys(arr[i], {"heads", "window", "mlp_ratio", "depth"}, "lft config");
      l.heads = arr[i].value("heads", l.heads);
      l.window = arr[i].value("window", l.window);
      l.mlp_ratio = arr[i].value("mlp_ratio", l.mlp_ratio);
      l.depth = arr[i].value("depth", l.depth);
    }
  }
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
}

// ---------------------------------------------------------------------------
// Parameter visitation

/// One named tensor slot. Trainable tensors come with their Var; running
/// statistics are plain buffers.
template <class T>
struct TensorSlot {
  std::string name;
  Var<T>* param = nullptr;
  Tensor<T>* buffer = nullptr;
  bool decay = false;  // weight decay applies (conv/linear weights only)

  Tensor<T>& tensor() const { return param ? param->mutable_value() : *buffer; }
};

template <class T>
using SlotVisitor = std::function<void(const TensorSlot<T>&)>;

template <class T>
void visit_conv(const std::string& prefix, ConvParams<T>& c, const SlotVisitor<T>& f) {
  f({prefix + ".weight", &c.weight, nullptr, true});
  if (c.bias.defined()) f({prefix + ".bias", &c.bias, nullptr, false});
}

template <class T>
void visit_bn(const std::string& prefix, BnParams<T>& bn, const SlotVisitor<T>& f) {
  f({prefix + ".gamma", &bn.gamma, nullptr, false});
  f({prefix + ".beta", &bn.beta, nullptr, false});
  f({prefix + ".running_mean", nullptr, &bn.running_mean, false});
  f({prefix + ".running_var", nullptr, &bn.running_var, false});
}

template <class T>
void visit_transformer(const std::string& prefix, TransformerParams<T>& p, const SlotVisitor<T>& f) {
  f({prefix + ".ln1.gamma", &p.ln1_gamma, nullptr, false});
  f({prefix + ".ln1.beta", &p.ln1_beta, nullptr, false});
  f({prefix + ".attn.wq", &p.attn.wq, nullptr, true});
  f({prefix + ".attn.wk", &p.attn.wk, nullptr, true});
  f({prefix + ".attn.wv", &p.attn.wv, nullptr, true});
  f({prefix + ".attn.wo", &p.attn.wo, nullptr, true});
  f({prefix + ".ln2.gamma", &p.ln2_gamma, nullptr, false});
  f({prefix + ".ln2.beta", &p.ln2_beta, nullptr, false});
  f({prefix + ".mlp.fc1.weight", &p.fc1_w, nullptr, true});
  f({prefix + ".mlp.fc1.bias", &p.fc1_b, nullptr, false});
  f({prefix + ".mlp.fc2.weight", &p.fc2_w, nullptr, true});
  f({prefix + ".mlp.fc2.bias", &p.fc2_b, nullptr, false});
}

// ---------------------------------------------------------------------------
// Building blocks

/// 1x1 expansion -> parallel depthwise conv+BN branches (or their fused
/// replacement) -> SE -> 1x1 projection, plus a 1x1 conv shortcut.
template <class T>
struct MultiBranchModule {
  ConvParams<T> expand;
  BnParams<T> expand_bn;
  std::vector<BranchSpec<T>> branches;
  std::optional<FusedConv<T>> fused;
  SeParams<T> se;
  ConvParams<T> project;
  BnParams<T> project_bn;
  ConvParams<T> shortcut;
  BnParams<T> shortcut_bn;

  bool is_fused() const { return fused.has_value(); }
  std::size_t out_channels() const { return project.out_channels(); }

  void visit(const std::string& prefix, const SlotVisitor<T>& f) {
    visit_conv(prefix + ".expand", expand, f);
    visit_bn(prefix + ".expand_bn", expand_bn, f);
    if (fused) {
      visit_conv(prefix + ".fused", fused->conv, f);
    } else {
      for (std::size_t i = 0; i < branches.size(); ++i) {
        visit_conv(prefix + ".branch" + std::to_string(i) + ".conv", branches[i].conv, f);
        visit_bn(prefix + ".branch" + std::to_string(i) + ".bn", branches[i].bn, f);
      }
    }
    f({prefix + ".se.reduce", &se.reduce, nullptr, true});
    f({prefix + ".se.expand", &se.expand, nullptr, true});
    visit_conv(prefix + ".project", project, f);
    visit_bn(prefix + ".project_bn", project_bn, f);
    visit_conv(prefix + ".shortcut", shortcut, f);
    visit_bn(prefix + ".shortcut_bn", shortcut_bn, f);
  }
};

/// y = project(se(relu(sum_i bn_i(dw_i(relu(expand(x))))))) + shortcut(x).
template <class T>
Var<T> multi_branch_forward(const Var<T>& x, MultiBranchModule<T>& m, Mode mode) {
  Var<T> h = relu(batch_norm(conv2d(x, m.expand), m.expand_bn, mode));
  Var<T> spatial;
  if (m.fused) {
    if (mode == Mode::train) throw ValueError("a fused module cannot run in train mode");
    spatial = conv2d(h, m.fused->conv);
  } else {
    spatial = branches_forward(h, m.branches, mode);
  }
  Var<T> y = batch_norm(conv2d(se_block(relu(spatial), m.se), m.project), m.project_bn, mode);
  return add(y, batch_norm(conv2d(x, m.shortcut), m.shortcut_bn, mode));
}

/// Convolutional embedding followed by transformer blocks; shared by the
/// global (GFT) and local (LFT) feature transformers.
template <class T>
struct FeatureTransformer {
  AttentionConfig attention;
  std::size_t depth = 1;
  ConvParams<T> aggregate;  // 3x3, concatenated pyramid -> attention.channels
  std::vector<TransformerParams<T>> blocks;

  void visit(const std::string& prefix, const SlotVisitor<T>& f) {
    visit_conv(prefix + ".aggregate", aggregate, f);
    for (std::size_t i = 0; i < blocks.size(); ++i) visit_transformer(prefix + ".block" + std::to_string(i), blocks[i], f);
  }
};

template <class T>
struct PyramidLevel {
  std::size_t stride;
  Var<T> map;  // [N, C, H/stride, W/stride]
};

template <class T>
struct FeaturePyramid {
  std::vector<PyramidLevel<T>> levels;
};

// [N,C,H,W] <-> [N,H*W,C]
template <class T>
Var<T> to_tokens(const Var<T>& x) {
  const Shape& s = x.shape();
  return permute(reshape(x, Shape{s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

template <class T>
Var<T> from_tokens(const Var<T>& t, std::size_t h, std::size_t w) {
  const Shape& s = t.shape();
  return reshape(permute(t, {0, 2, 1}), Shape{s[0], s[2], h, w});
}

/// Resize every pyramid level to (h, w), concatenate along channels,
/// aggregate with a 3x3 conv, run the transformer blocks on the flattened
/// tokens and restore the spatial layout.
template <class T>
Var<T> feature_transformer_forward(const std::vector<Var<T>>& levels, const FeatureTransformer<T>& ft, std::size_t h,
                                   std::size_t w) {
  if (levels.empty()) throw ShapeError("feature transformer needs a non-empty pyramid");
  std::vector<Var<T>> resized;
  for (const auto& l : levels) resized.push_back(bilinear_resize(l, h, w));
  Var<T> embedded = conv2d(concat(resized, 1), ft.aggregate);
  Var<T> tokens = to_tokens(embedded);
  for (const auto& block : ft.blocks) tokens = transformer_block(tokens, block, ft.attention, h, w);
  return from_tokens(tokens, h, w);
}

// ---------------------------------------------------------------------------
// Initialization

template <class T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> normal(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    return t;
  }

  Tensor<T> uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    return t;
  }

  /// Normal init with stddev gain / sqrt(fan_in); gain sqrt(2) is He
  /// init for convolutions feeding a ReLU.
  ConvParams<T> conv(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, std::size_t groups, bool bias,
                     double gain = std::sqrt(2.0)) {
    ConvParams<T> c;
    const std::size_t fan_in = (in / groups) * kh * kw;
    c.weight = parameter(normal({out, in / groups, kh, kw}, gain / std::sqrt(static_cast<double>(fan_in))));
    if (bias) c.bias = parameter(Tensor<T>::zeros({out}));
    c.geom.pad_h = (kh - 1) / 2;
    c.geom.pad_w = (kw - 1) / 2;
    c.geom.groups = groups;
    return c;
  }

  BnParams<T> bn(std::size_t channels, const LmNetConfig& cfg) {
    BnParams<T> b = BnParams<T>::identity(channels);
    b.eps = static_cast<T>(cfg.bn_eps);
    b.momentum = static_cast<T>(cfg.bn_momentum);
    return b;
  }

  Tensor<T> xavier(std::size_t in, std::size_t out) {
    return uniform({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)));
  }

 private:
  std::mt19937_64 rng_;
};

template <class T>
MultiBranchModule<T> make_multi_branch(std::size_t in, std::size_t out, const LmNetConfig& cfg, Initializer<T>& init,
                                       bool fused) {
  const std::size_t mid = in * cfg.expansion;
  // Gains keep the eval-mode output scale of a freshly built module close
  // to its input scale (BN starts as identity): the branch sum is divided
  // among the branches, and project/shortcut share the residual sum after
  // the ReLU and the ~0.5 SE gate shrink the main path.
  const double branch_gain = 1.0 / std::sqrt(static_cast<double>(cfg.branch_kernels.size()));
  MultiBranchModule<T> m;
  m.expand = init.conv(in, mid, 1, 1, 1, false);
  m.expand_bn = init.bn(mid, cfg);
  std::size_t kh = 0, kw = 0;
  for (const auto& k : cfg.branch_kernels) {
    BranchSpec<T> b{init.conv(mid, mid, k.h, k.w, mid, false, branch_gain), init.bn(mid, cfg)};
    kh = std::max(kh, k.h);
    kw = std::max(kw, k.w);
    m.branches.push_back(std::move(b));
  }
  if (fused) {
    m.branches.clear();
    FusedConv<T> f;
    f.conv = init.conv(mid, mid, kh, kw, mid, true, 1.0);
    m.fused = std::move(f);
  }
  m.se = make_se_params<T>(mid, cfg.se_reduction);
  m.se.reduce.mutable_value() = init.normal({mid, mid / cfg.se_reduction}, std::sqrt(2.0 / static_cast<double>(mid)));
  m.se.expand.mutable_value() =
      init.normal({mid / cfg.se_reduction, mid}, std::sqrt(1.0 / static_cast<double>(mid / cfg.se_reduction)));
  m.project = init.conv(mid, out, 1, 1, 1, false, 2.0);
  m.project_bn = init.bn(out, cfg);
  m.shortcut = init.conv(in, out, 1, 1, 1, false, std::sqrt(0.5));
  m.shortcut_bn = init.bn(out, cfg);
  return m;
}

template <class T>
FeatureTransformer<T> make_feature_transformer(std::size_t in, const AttentionConfig& att, std::size_t depth,
                                               Initializer<T>& init) {
  FeatureTransformer<T> ft;
  ft.attention = att;
  ft.depth = depth;
  ft.aggregate = init.conv(in, att.channels, 3, 3, 1, true, 1.0);
  for (std::size_t i = 0; i < depth; ++i) {
    TransformerParams<T> p = make_transformer_params<T>(att);
    const std::size_t c = att.channels, hidden = att.mlp_ratio * c;
    p.attn.wq.mutable_value() = init.xavier(c, c);
    p.attn.wk.mutable_value() = init.xavier(c, c);
    p.attn.wv.mutable_value() = init.xavier(c, c);
    p.attn.wo.mutable_value() = init.xavier(c, c);
    p.fc1_w.mutable_value() = init.xavier(c, hidden);
    p.fc2_w.mutable_value() = init.xavier(hidden, c);
    ft.blocks.push_back(std::move(p));
  }
  return ft;
}

// ---------------------------------------------------------------------------
// LM-Net

/// Encoder: stride-1 stem (x1) then four stages of two multi-branch modules
/// each followed by 2x2 max pooling (x2..x5 at strides 2..16). GFT fuses all
/// five levels at stride S; the LFT of stage i fuses the outputs of stages
/// {i-1, i, i+1} (clipped to 1..4) at stage i's resolution. The decoder
/// climbs from the GFT output through the four LFT skips, each step a
/// multi-branch module over the concatenation, and a 1x1 head.
template <class T>
class LmNet {
 public:
  using value_type = T;

  static constexpr std::size_t kStages = 4;

  explicit LmNet(LmNetConfig config, std::uint64_t seed = 0, bool fused = false) : config_(std::move(config)) {
    config_.validate();
    Initializer<T> init(seed);
    const auto& c = config_;
    stem_ = init.conv(3, c.level_channels(0), 3, 3, 1, false);
    stem_bn_ = init.bn(c.level_channels(0), c);
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::size_t in = c.level_channels(s), out = c.level_channels(s + 1);
      stages_[s][0] = make_multi_branch(in, out, c, init, fused);
      stages_[s][1] = make_multi_branch(out, out, c, init, fused);
    }
    {
      std::size_t concat_ch = 0;
      for (std::size_t l = 0; l < LmNetConfig::kLevels; ++l) concat_ch += c.level_channels(l);
      AttentionConfig att;
      att.channels = c.level_channels(4);
      att.heads = LmNetConfig::auto_heads(att.channels, c.gft.heads);
      att.mlp_ratio = c.gft.mlp_ratio;
      gft_ = make_feature_transformer(concat_ch, att, c.gft.depth, init);
    }
    for (std::size_t i = 1; i <= kStages; ++i) {
      std::size_t concat_ch = 0;
      for (std::size_t j : lft_sources(i)) concat_ch += c.level_channels(j);
      AttentionConfig att;
      att.channels = c.level_channels(i);
      att.heads = LmNetConfig::auto_heads(att.channels, c.lft[i - 1].heads);
      att.mlp_ratio = c.lft[i - 1].mlp_ratio;
      att.window = c.lft[i - 1].window;
      lft_[i - 1] = make_feature_transformer(concat_ch, att, c.lft[i - 1].depth, init);
    }
    std::size_t deeper = c.level_channels(4);
    for (std::size_t i = kStages; i >= 1; --i) {
      decoder_[i - 1] = make_multi_branch(deeper + c.level_channels(i), c.level_channels(i), c, init, fused);
      deeper = c.level_channels(i);
    }
    head_ = init.conv(c.level_channels(1), c.num_classes, 1, 1, 1, true, 1.0);
  }

  const LmNetConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) {
    if (m == Mode::train && is_fused()) throw ValueError("a fused model cannot be put in train mode");
    mode_ = m;
  }

  bool is_fused() const { return stages_[0][0].is_fused(); }

  /// Deep copy; the copy shares no parameter storage with this model.
  LmNet clone() const {
    LmNet c = *this;
    c.visit([](const TensorSlot<T>& s) {
      if (s.param) *s.param = parameter(s.param->value());
    });
    return c;
  }

  /// Pyramid levels (indices into x1..x5) feeding the LFT of stage i.
  static std::vector<std::size_t> lft_sources(std::size_t stage) {
    if (stage < 1 || stage > kStages) throw ValueError("LFT stage index must be in 1..4, got " + std::to_string(stage));
    std::vector<std::size_t> out;
    for (std::size_t j = stage - 1; j <= stage + 1; ++j)
      if (j >= 1 && j <= kStages) out.push_back(j);
    return out;
  }

  FeaturePyramid<T> encode(const Var<T>& image) {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("expected image batch [N,3,H,W], got " + shape_string(s));
    if (s[2] % 16 || s[3] % 16) throw ShapeError("input extents must be divisible by 16, got " + shape_string(s));
    FeaturePyramid<T> pyr;
    Var<T> x = relu(batch_norm(conv2d(image, stem_), stem_bn_, mode_));
    pyr.levels.push_back({1, x});
    for (std::size_t st = 0; st < kStages; ++st) {
      x = multi_branch_forward(x, stages_[st][0], mode_);
      x = multi_branch_forward(x, stages_[st][1], mode_);
      x = max_pool2(x);
      pyr.levels.push_back({config_.level_stride(st + 1), x});
    }
    return pyr;
  }

  Var<T> gft_forward(const FeaturePyramid<T>& pyr) {
    if (pyr.levels.size() < 2) throw ShapeError("GFT needs at least two pyramid levels");
    const auto& base = pyr.levels.front().map.shape();
    const std::size_t h = base[2] * pyr.levels.front().stride / config_.gft.stride;
    const std::size_t w = base[3] * pyr.levels.front().stride / config_.gft.stride;
    std::vector<Var<T>> maps;
    for (const auto& l : pyr.levels) maps.push_back(l.map);
    return feature_transformer_forward(maps, gft_, h, w);
  }

  Var<T> lft_forward(std::size_t stage, const FeaturePyramid<T>& pyr) {
    const auto sources = lft_sources(stage);
    if (pyr.levels.size() != LmNetConfig::kLevels) throw ShapeError("LFT expects a five-level pyramid");
    const auto& target = pyr.levels[stage].map.shape();
    std::vector<Var<T>> maps;
    for (std::size_t j : sources) maps.push_back(pyr.levels[j].map);
    return feature_transformer_forward(maps, lft_[stage - 1], target[2], target[3]);
  }

  /// lfts[i-1] is the LFT output of stage i.
  Var<T> decode(const Var<T>& gft_out, const std::vector<Var<T>>& lfts, std::size_t out_h, std::size_t out_w) {
    if (lfts.size() != kStages) throw ShapeError("decoder expects four LFT outputs");
    Var<T> d = gft_out;
    for (std::size_t i = kStages; i >= 1; --i) {
      const Shape& skip = lfts[i - 1].shape();
      if (skip[0] != d.shape()[0]) throw ShapeError("decoder batch mismatch between skip and upsampled path");
      Var<T> up = bilinear_resize(d, skip[2], skip[3]);
      d = multi_branch_forward(concat(std::vector<Var<T>>{up, lfts[i - 1]}, 1), decoder_[i - 1], mode_);
    }
    return bilinear_resize(conv2d(d, head_), out_h, out_w);
  }

  /// Logits [N, num_classes, H, W].
  Var<T> forward(const Var<T>& image) {
    FeaturePyramid<T> pyr = encode(image);
    Var<T> g = gft_forward(pyr);
    std::vector<Var<T>> lfts;
    for (std::size_t i = 1; i <= kStages; ++i) lfts.push_back(lft_forward(i, pyr));
    return decode(g, lfts, image.shape()[2], image.shape()[3]);
  }

  Tensor<T> predict_logits(const Tensor<T>& image) {
    NoGradGuard guard;
    return forward(constant(image)).value();
  }

  void visit(const SlotVisitor<T>& f) {
    visit_conv("stem.conv", stem_, f);
    visit_bn("stem.bn", stem_bn_, f);
    for (std::size_t s = 0; s < kStages; ++s)
      for (std::size_t b = 0; b < 2; ++b)
        stages_[s][b].visit("encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b), f);
    gft_.visit("gft", f);
    for (std::size_t i = 0; i < kStages; ++i) lft_[i].visit("lft" + std::to_string(i + 1), f);
    for (std::size_t i = kStages; i >= 1; --i) decoder_[i - 1].visit("decoder.level" + std::to_string(i), f);
    visit_conv("head", head_, f);
  }

  std::vector<Var<T>> parameters() {
    std::vector<Var<T>> out;
    visit([&](const TensorSlot<T>& s) {
      if (s.param) out.push_back(*s.param);
    });
    return out;
  }

  void zero_grad() {
    visit([](const TensorSlot<T>& s) {
      if (s.param) s.param->zero_grad();
    });
  }

  // Module access for re-parameterization and tests.
  std::array<std::array<MultiBranchModule<T>, 2>, kStages>& stages() { return stages_; }
  std::array<MultiBranchModule<T>, kStages>& decoder() { return decoder_; }
  FeatureTransformer<T>& gft() { return gft_; }
  std::array<FeatureTransformer<T>, kStages>& lfts() { return lft_; }

  template <class F>
  void for_each_multi_branch(F&& f) {
    for (auto& st : stages_)
      for (auto& m : st) f(m);
    for (auto& m : decoder_) f(m);
  }

 private:
  LmNetConfig config_;
  Mode mode_ = Mode::train;
  ConvParams<T> stem_;
  BnParams<T> stem_bn_;
  std::array<std::array<MultiBranchModule<T>, 2>, kStages> stages_;
  FeatureTransformer<T> gft_;
  std::array<FeatureTransformer<T>, kStages> lft_;
  std::array<MultiBranchModule<T>, kStages> decoder_;
  ConvParams<T> head_;
};

}  // namespace lmnet
