#include "saan/model.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "saan/pnm.hpp"
#include "saan/rng.hpp"
#include "saan/similarity.hpp"

namespace saan {

// ---------------------------------------------------------------------------
// Configs

EncoderConfig EncoderConfig::resnet18() {
  EncoderConfig c;
  c.stage_channels = {64, 128, 256, 512};
  c.variant = EncoderVariant::resnet18;
  return c;
}

void EncoderConfig::validate() const {
  if (stage_channels.size() < 2) throw ValueError("encoder needs at least 2 stages");
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] <= 0) throw ValueError("stage channels must be positive");
    if (i > 0 && stage_channels[i] <= stage_channels[i - 1])
      throw ValueError("stage channels must be strictly increasing");
  }
  if (blocks_per_stage < 1) throw ValueError("blocks_per_stage must be >= 1");
  if (input_channels < 1) throw ValueError("input_channels must be >= 1");
}

void AblationFlags::validate() const {
  if (flow && !sca && !ssa) throw ValueError("attention flow requires sca or ssa");
}

const std::vector<std::string>& AblationFlags::preset_names() {
  static const std::vector<std::string> names{"opt-a",          "opt-b",     "opt-c",          "opt-d",
                                              "opt-d+sca",      "opt-d+sca+flow", "opt-d+ssa", "opt-d+ssa+flow",
                                              "opt-d+sca+ssa",  "full"};
  return names;
}

AblationFlags AblationFlags::preset(const std::string& name) {
  AblationFlags f{false, false, false, false, false};
  if (name == "opt-a") return f;
  if (name == "opt-b") return f.sim_loss = true, f;
  if (name == "opt-c") return f.deep_supervision = true, f;
  f.sim_loss = f.deep_supervision = true;
  if (name == "opt-d") return f;
  if (name == "opt-d+sca") return f.sca = true, f;
  if (name == "opt-d+sca+flow") return f.sca = f.flow = true, f;
  if (name == "opt-d+ssa") return f.ssa = true, f;
  if (name == "opt-d+ssa+flow") return f.ssa = f.flow = true, f;
  if (name == "opt-d+sca+ssa") return f.sca = f.ssa = true, f;
  if (name == "full") return AblationFlags{};
  throw ValueError("unknown ablation preset '" + name + "'");
}

void ModelConfig::validate() const {
  encoder.validate();
  flags.validate();
  if (mlp_reduction < 1 || mlp_min_hidden < 1) throw ValueError("MLP width settings must be positive");
}

// ---------------------------------------------------------------------------
// Layer layout (indices into the parameter / buffer lists)

namespace {

struct ConvLayer {
  Index weight = -1, bias = -1;
  int stride = 1, pad = 0;
  bool valid() const { return weight >= 0; }
};

struct BnLayer {
  Index gamma = -1, beta = -1, buffer = -1;
};

struct ConvBn {
  ConvLayer conv;
  BnLayer bn;
};

struct ResidualBlock {
  ConvBn first, second;
  std::optional<ConvBn> shortcut;
};

struct DecoderStage {
  Index encoder_stage = 0;
  Index width = 0;   // output channels
  Index concat = 0;  // channels entering the fusion convs
  bool has_prev = false;
  bool dsa_flow_in = false;
  bool spatial_flow_in = false;
  ConvLayer dsa_conv;
  Index fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
  ConvBn fuse1, fuse2;
  ConvLayer ssa_conv;
  ConvLayer aux_head;
};

}  // namespace

template <typename S>
struct SaanModel<S>::Layers {
  ConvBn stem;
  std::vector<std::vector<ResidualBlock>> stages;
  std::vector<DecoderStage> decoder;  // deepest first
  ConvLayer head;
};

namespace {

template <typename S>
class Builder {
 public:
  Builder(std::vector<Parameter<S>>& params, std::vector<NamedBuffer<S>>& buffers, std::uint64_t seed)
      : params_(params), buffers_(buffers), rng_(seed) {}

  Index kaiming(const std::string& name, Component comp, Shape shape, Index fan_in) {
    Tensor<S> w(shape);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<S>(rng_.normal() * std);
    return push(name, comp, std::move(w));
  }

  Index constant(const std::string& name, Component comp, Shape shape, S value) {
    return push(name, comp, Tensor<S>(std::move(shape), value));
  }

  ConvLayer conv(const std::string& name, Component comp, Index cin, Index cout, Index k, int stride, bool bias) {
    ConvLayer c;
    c.weight = kaiming(name + ".weight", comp, {cout, cin, k, k}, cin * k * k);
    if (bias) c.bias = constant(name + ".bias", comp, {cout}, S(0));
    c.stride = stride;
    c.pad = static_cast<int>(k / 2);
    return c;
  }

  BnLayer bn(const std::string& name, Component comp, Index channels) {
    BnLayer b;
    b.gamma = constant(name + ".gamma", comp, {channels}, S(1));
    b.beta = constant(name + ".beta", comp, {channels}, S(0));
    buffers_.push_back({name, BatchNormState<S>(channels)});
    b.buffer = static_cast<Index>(buffers_.size()) - 1;
    return b;
  }

  ConvBn conv_bn(const std::string& name, Component comp, Index cin, Index cout, Index k, int stride) {
    return {conv(name + ".conv", comp, cin, cout, k, stride, false), bn(name + ".bn", comp, cout)};
  }

 private:
  Index push(const std::string& name, Component comp, Tensor<S> value) {
    Tensor<S> grad(value.shape());
    params_.push_back({name, comp, std::move(value), std::move(grad)});
    return static_cast<Index>(params_.size()) - 1;
  }

  std::vector<Parameter<S>>& params_;
  std::vector<NamedBuffer<S>>& buffers_;
  Xoshiro256pp rng_;
};

Index mlp_hidden(const ModelConfig& cfg, Index channels) {
  return std::max(channels / cfg.mlp_reduction, cfg.mlp_min_hidden);
}

}  // namespace

template <typename S>
SaanModel<S>::SaanModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  auto layers = std::make_shared<Layers>();
  Builder<S> b(params_, buffers_, seed);
  const auto& enc = config_.encoder;
  const auto& flags = config_.flags;
  const Index stages = enc.stages();
  const Index stem_k = enc.variant == EncoderVariant::resnet18 ? 7 : 3;

  layers->stem = b.conv_bn("encoder.stem", Component::encoder, enc.input_channels, enc.stage_channels[0], stem_k, 2);
  Index cin = enc.stage_channels[0];
  for (Index s = 0; s < stages; ++s) {
    const Index c = enc.stage_channels[static_cast<std::size_t>(s)];
    std::vector<ResidualBlock> blocks;
    for (int k = 0; k < enc.blocks_per_stage; ++k) {
      const std::string name = "encoder.stage" + std::to_string(s) + ".block" + std::to_string(k);
      const int stride = (s > 0 && k == 0) ? 2 : 1;
      ResidualBlock blk;
      blk.first = b.conv_bn(name + ".conv1", Component::encoder, cin, c, 3, stride);
      blk.second = b.conv_bn(name + ".conv2", Component::encoder, c, c, 3, 1);
      if (stride != 1 || cin != c) blk.shortcut = b.conv_bn(name + ".shortcut", Component::encoder, cin, c, 1, stride);
      blocks.push_back(blk);
      cin = c;
    }
    layers->stages.push_back(std::move(blocks));
  }

  for (Index i = 0; i < stages; ++i) {
    DecoderStage st;
    st.encoder_stage = stages - 1 - i;
    st.width = enc.stage_channels[static_cast<std::size_t>(st.encoder_stage)];
    st.has_prev = i > 0;
    const Index prev_width = st.has_prev ? enc.stage_channels[static_cast<std::size_t>(st.encoder_stage + 1)] : 0;
    st.concat = 2 * st.width + prev_width;
    const bool flow_in = flags.flow && (i > 0 || config_.constant_first_flow);
    st.dsa_flow_in = flow_in && flags.sca;
    st.spatial_flow_in = flow_in && flags.ssa;
    const std::string name = "decoder.stage" + std::to_string(i);
    if (flags.sca) {
      st.dsa_conv = b.conv(name + ".sca.dsa_conv", Component::sca, st.dsa_flow_in ? 2 : 1, 1, 7, 1, true);
      const Index hidden = mlp_hidden(config_, st.concat);
      st.fc1_w = b.kaiming(name + ".sca.mlp.fc1.weight", Component::sca, {hidden, st.concat}, st.concat);
      st.fc1_b = b.constant(name + ".sca.mlp.fc1.bias", Component::sca, {hidden}, S(0));
      st.fc2_w = b.kaiming(name + ".sca.mlp.fc2.weight", Component::sca, {st.concat, hidden}, hidden);
      st.fc2_b = b.constant(name + ".sca.mlp.fc2.bias", Component::sca, {st.concat}, S(0));
    }
    st.fuse1 = b.conv_bn(name + ".fuse1", Component::fusion, st.concat, st.width, 3, 1);
    st.fuse2 = b.conv_bn(name + ".fuse2", Component::fusion, st.width, st.width, 3, 1);
    if (flags.ssa) {
      const Index in = 2 + (st.spatial_flow_in ? 1 : 0) + (flags.sca ? 1 : 0);
      st.ssa_conv = b.conv(name + ".ssa.conv", Component::ssa, in, 1, 7, 1, true);
    }
    if (flags.deep_supervision) st.aux_head = b.conv(name + ".aux_head", Component::aux_heads, st.width, 1, 1, 1, true);
    layers->decoder.push_back(st);
  }
  layers->head = b.conv("head", Component::head, enc.stage_channels[0], 1, 1, 1, true);
  layers_ = std::move(layers);
}

template <typename S>
typename SaanModel<S>::Bound SaanModel<S>::bind(Tape<S>& tape, bool requires_grad) const {
  Bound bound;
  bound.params.reserve(params_.size());
  for (const auto& p : params_) bound.params.push_back(tape.leaf(p.value, requires_grad));
  return bound;
}

template <typename S>
void SaanModel<S>::accumulate_gradients(const Bound& bound) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& rec = bound.params[i].tape()->at(bound.params[i].id());
    if (!rec.grad.empty()) params_[i].grad.values() += rec.grad.values();
  }
}

template <typename S>
void SaanModel<S>::zero_grad() {
  for (auto& p : params_) p.grad.values().setZero();
}

template <typename S>
Parameter<S>* SaanModel<S>::find_parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename S>
NamedBuffer<S>* SaanModel<S>::find_buffer(const std::string& name) {
  for (auto& b : buffers_)
    if (b.name == name) return &b;
  return nullptr;
}

template <typename S>
ParamCounts SaanModel<S>::param_count() const {
  ParamCounts c;
  for (const auto& p : params_) {
    const Index n = p.value.size();
    switch (p.component) {
      case Component::encoder: c.encoder += n; break;
      case Component::sca: c.sca += n; break;
      case Component::fusion: c.fusion += n; break;
      case Component::ssa: c.ssa += n; break;
      case Component::aux_heads: c.aux_heads += n; break;
      case Component::head: c.head += n; break;
    }
  }
  return c;
}

ParamCounts param_count(const ModelConfig& config) { return SaanModel<float>(config).param_count(); }

// ---------------------------------------------------------------------------
// Blocks

namespace {

template <typename S>
Var<S> constant_map(Tape<S>& tape, const Shape& like, S value) {
  return tape.constant(Tensor<S>(Shape{like[0], 1, like[2], like[3]}, value));
}

template <typename S>
Var<S> mlp(const Var<S>& v, const ScaParams<S>& p) {
  return linear(relu(linear(v, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias);
}

}  // namespace

template <typename S>
ScaOutput<S> sca_block(const Var<S>& f1, const Var<S>& f2, const std::optional<Var<S>>& f_prev,
                       const std::optional<Var<S>>& dsa_prev, const ScaParams<S>& params, bool attend_raw) {
  if (f1.shape() != f2.shape()) throw DimensionError("sca_block: bi-temporal features differ in shape");
  const Dims4 d = as_nchw(f1.shape(), "sca_block features");
  if (f_prev) {
    const Dims4 p = as_nchw(f_prev->shape(), "sca_block previous features");
    if (p.n != d.n || p.h != d.h || p.w != d.w)
      throw DimensionError("sca_block: previous features " + to_string(f_prev->shape()) + " not at stage resolution " +
                           to_string(f1.shape()));
  }
  if (dsa_prev && dsa_prev->shape() != Shape{d.n, 1, d.h, d.w})
    throw DimensionError("sca_block: incoming DSA map " + to_string(dsa_prev->shape()) + " not at stage resolution");

  ScaOutput<S> out;
  out.sim = cosine_similarity_map(f1, f2);
  const Var<S> dsa_in = dsa_prev ? concat<S>({out.sim, *dsa_prev}, 1) : out.sim;
  out.dsa = sigmoid(conv2d(dsa_in, params.dsa_weight, std::optional<Var<S>>(params.dsa_bias), 1,
                           static_cast<int>(params.dsa_weight.shape()[2] / 2)));

  std::vector<Var<S>> raw{f1, f2};
  if (f_prev) raw.push_back(*f_prev);
  std::vector<Var<S>> weighted;
  for (const auto& f : raw) weighted.push_back(mul(f, out.dsa));
  const Var<S> guided = concat(weighted, 1);
  const Index channels = guided.shape()[1];

  const Var<S> avg = reshape(global_pool(guided, PoolMode::avg), Shape{d.n, channels});
  const Var<S> mx = reshape(global_pool(guided, PoolMode::max), Shape{d.n, channels});
  out.channel_attention = reshape(sigmoid(add(mlp(avg, params), mlp(mx, params))), Shape{d.n, channels, 1, 1});
  out.attended = mul(attend_raw ? concat(raw, 1) : guided, out.channel_attention);
  return out;
}

template <typename S>
SsaOutput<S> ssa_block(const Var<S>& fused, const std::optional<Var<S>>& spatial_prev,
                       const std::optional<Var<S>>& dsa, const SsaParams<S>& params) {
  const Dims4 d = as_nchw(fused.shape(), "ssa_block features");
  const Shape map_shape{d.n, 1, d.h, d.w};
  if (spatial_prev && spatial_prev->shape() != map_shape)
    throw DimensionError("ssa_block: incoming spatial map " + to_string(spatial_prev->shape()) +
                         " not at stage resolution " + to_string(map_shape));
  if (dsa && dsa->shape() != map_shape)
    throw DimensionError("ssa_block: DSA map " + to_string(dsa->shape()) + " not at stage resolution");
  std::vector<Var<S>> parts{channel_reduce(fused, ChannelReduce::mean), channel_reduce(fused, ChannelReduce::max)};
  if (spatial_prev) parts.push_back(*spatial_prev);
  if (dsa) parts.push_back(*dsa);
  SsaOutput<S> out;
  out.spatial_attention =
      sigmoid(conv2d(concat(parts, 1), params.weight, std::optional<Var<S>>(params.bias), 1,
                     static_cast<int>(params.weight.shape()[2] / 2)));
  out.features = mul(fused, out.spatial_attention);
  return out;
}

// ---------------------------------------------------------------------------
// Forward machinery shared by the training and eval entry points

template <typename S>
struct SaanModel<S>::Impl {
  const SaanModel& model;
  const Bound& bound;
  std::vector<NamedBuffer<S>>* update;  // non-null in training mode

  const Var<S>& p(Index i) const { return bound.params[static_cast<std::size_t>(i)]; }

  Var<S> conv(const Var<S>& x, const ConvLayer& c) const {
    std::optional<Var<S>> bias;
    if (c.bias >= 0) bias = p(c.bias);
    return conv2d(x, p(c.weight), bias, c.stride, c.pad);
  }

  Var<S> bn(const Var<S>& x, const BnLayer& b) const {
    if (update) return batchnorm2d(x, p(b.gamma), p(b.beta), (*update)[static_cast<std::size_t>(b.buffer)].state, true);
    return batchnorm2d(x, p(b.gamma), p(b.beta), model.buffers_[static_cast<std::size_t>(b.buffer)].state);
  }

  Var<S> conv_bn(const Var<S>& x, const ConvBn& c) const { return bn(conv(x, c.conv), c.bn); }

  FeaturePyramid<S> encode_one(const Var<S>& image) const {
    const auto& L = *model.layers_;
    FeaturePyramid<S> pyramid;
    Var<S> x = relu(conv_bn(image, L.stem));
    for (const auto& stage : L.stages) {
      for (const auto& blk : stage) {
        Var<S> y = relu(conv_bn(x, blk.first));
        y = conv_bn(y, blk.second);
        x = relu(add(y, blk.shortcut ? conv_bn(x, *blk.shortcut) : x));
      }
      pyramid.push_back(x);
    }
    return pyramid;
  }

  void check_images(const Var<S>& t1, const Var<S>& t2) const {
    if (t1.shape() != t2.shape())
      throw DimensionError("bi-temporal images differ in shape: " + to_string(t1.shape()) + " vs " +
                           to_string(t2.shape()));
    const Dims4 d = as_nchw(t1.shape(), "input images");
    if (d.c != model.config_.encoder.input_channels)
      throw DimensionError("images have " + std::to_string(d.c) + " channels, model expects " +
                           std::to_string(model.config_.encoder.input_channels));
  }

  std::pair<FeaturePyramid<S>, FeaturePyramid<S>> encode(const Var<S>& t1, const Var<S>& t2) const {
    check_images(t1, t2);
    return {encode_one(t1), encode_one(t2)};
  }

  StageOutput<S> decode_stage(Index i, const FeaturePyramid<S>& p1, const FeaturePyramid<S>& p2,
                              const std::optional<Var<S>>& f_prev, const StageFlow<S>& flow) const {
    const auto& L = *model.layers_;
    const auto& flags = model.config_.flags;
    if (i < 0 || i >= static_cast<Index>(L.decoder.size())) throw DimensionError("decoder stage out of range");
    const DecoderStage& st = L.decoder[static_cast<std::size_t>(i)];
    const Var<S>& f1 = p1.at(static_cast<std::size_t>(st.encoder_stage));
    const Var<S>& f2 = p2.at(static_cast<std::size_t>(st.encoder_stage));
    if (st.has_prev != f_prev.has_value())
      throw DimensionError("decoder stage " + std::to_string(i) + (st.has_prev ? " requires" : " takes no") +
                           " previous-stage features");

    StageOutput<S> out;
    Var<S> attended;
    if (flags.sca) {
      ScaParams<S> sp{p(st.dsa_conv.weight), p(st.dsa_conv.bias), p(st.fc1_w), p(st.fc1_b), p(st.fc2_w), p(st.fc2_b)};
      std::optional<Var<S>> dsa_in;
      if (st.dsa_flow_in) {
        if (!flow.dsa) throw DimensionError("decoder stage " + std::to_string(i) + " expects an incoming DSA map");
        dsa_in = flow.dsa;
      }
      ScaOutput<S> sca = sca_block(f1, f2, f_prev, dsa_in, sp, model.config_.channel_attention_on_raw);
      attended = sca.attended;
      out.sim = sca.sim;
      out.dsa = sca.dsa;
      out.attention.dsa = sca.dsa.value();
      out.attention.channel = sca.channel_attention.value();
    } else {
      out.sim = cosine_similarity_map(f1, f2);
      std::vector<Var<S>> raw{f1, f2};
      if (f_prev) raw.push_back(*f_prev);
      attended = concat(raw, 1);
    }
    out.attention.sim = out.sim.value();

    Var<S> fused = relu(conv_bn(relu(conv_bn(attended, st.fuse1)), st.fuse2));
    if (flags.ssa) {
      std::optional<Var<S>> spatial_in;
      if (st.spatial_flow_in) {
        if (!flow.spatial) throw DimensionError("decoder stage " + std::to_string(i) + " expects an incoming spatial map");
        spatial_in = flow.spatial;
      }
      std::optional<Var<S>> dsa;
      if (flags.sca) dsa = out.dsa;
      SsaOutput<S> ssa = ssa_block(fused, spatial_in, dsa, SsaParams<S>{p(st.ssa_conv.weight), p(st.ssa_conv.bias)});
      out.features = ssa.features;
      out.spatial = ssa.spatial_attention;
      out.attention.spatial = ssa.spatial_attention.value();
    } else {
      out.features = fused;
    }
    if (flags.deep_supervision) out.aux_logits = conv(out.features, st.aux_head);
    return out;
  }

  ForwardResult<S> forward(Tape<S>& tape, const Tensor<S>& t1, const Tensor<S>& t2) const {
    const auto& L = *model.layers_;
    const Index stages = model.config_.encoder.stages();
    const Dims4 d = as_nchw(t1.shape(), "input images");
    const Index unit = Index{1} << (stages + 1);
    if (d.h % unit != 0 || d.w % unit != 0)
      throw DimensionError("input size " + std::to_string(d.h) + "x" + std::to_string(d.w) + " not divisible by " +
                           std::to_string(unit));
    const Var<S> x1 = tape.constant(t1), x2 = tape.constant(t2);
    auto [p1, p2] = encode(x1, x2);

    ForwardResult<S> result;
    result.deep_t1 = p1.back();
    result.deep_t2 = p2.back();
    result.deep_features_used = model.config_.flags.sim_loss;

    std::optional<Var<S>> f_prev;
    StageOutput<S> prev;
    for (Index i = 0; i < stages; ++i) {
      const DecoderStage& st = L.decoder[static_cast<std::size_t>(i)];
      const Shape& stage_shape = p1[static_cast<std::size_t>(st.encoder_stage)].shape();
      StageFlow<S> flow;
      if (i == 0) {
        if (st.dsa_flow_in) flow.dsa = constant_map(tape, stage_shape, S(0.5));
        if (st.spatial_flow_in) flow.spatial = constant_map(tape, stage_shape, S(0.5));
      } else {
        f_prev = upsample2x_bilinear(prev.features);
        if (st.dsa_flow_in) flow.dsa = upsample2x_bilinear(prev.dsa);
        if (st.spatial_flow_in) flow.spatial = upsample2x_bilinear(prev.spatial);
      }
      prev = decode_stage(i, p1, p2, f_prev, flow);
      if (prev.aux_logits.valid()) result.aux_logits.push_back(prev.aux_logits);
      result.attention.stages.push_back(prev.attention);
    }
    Var<S> top = prev.features;
    while (top.shape()[2] < d.h) top = upsample2x_bilinear(top);
    result.logits = conv(top, L.head);
    return result;
  }
};

template <typename S>
std::pair<FeaturePyramid<S>, FeaturePyramid<S>> SaanModel<S>::encode(const Bound& bound, const Var<S>& t1,
                                                                     const Var<S>& t2, bool training) {
  return Impl{*this, bound, training ? &buffers_ : nullptr}.encode(t1, t2);
}

template <typename S>
std::pair<FeaturePyramid<S>, FeaturePyramid<S>> SaanModel<S>::encode(const Bound& bound, const Var<S>& t1,
                                                                     const Var<S>& t2) const {
  return Impl{*this, bound, nullptr}.encode(t1, t2);
}

template <typename S>
StageOutput<S> SaanModel<S>::decode_stage(const Bound& bound, Index stage, const FeaturePyramid<S>& p1,
                                          const FeaturePyramid<S>& p2, const std::optional<Var<S>>& f_prev,
                                          const StageFlow<S>& flow, bool training) {
  return Impl{*this, bound, training ? &buffers_ : nullptr}.decode_stage(stage, p1, p2, f_prev, flow);
}

template <typename S>
StageOutput<S> SaanModel<S>::decode_stage(const Bound& bound, Index stage, const FeaturePyramid<S>& p1,
                                          const FeaturePyramid<S>& p2, const std::optional<Var<S>>& f_prev,
                                          const StageFlow<S>& flow) const {
  return Impl{*this, bound, nullptr}.decode_stage(stage, p1, p2, f_prev, flow);
}

template <typename S>
ForwardResult<S> SaanModel<S>::forward(Tape<S>& tape, const Bound& bound, const Tensor<S>& t1, const Tensor<S>& t2,
                                       bool training) {
  return Impl{*this, bound, training ? &buffers_ : nullptr}.forward(tape, t1, t2);
}

template <typename S>
ForwardResult<S> SaanModel<S>::forward(Tape<S>& tape, const Bound& bound, const Tensor<S>& t1,
                                       const Tensor<S>& t2) const {
  return Impl{*this, bound, nullptr}.forward(tape, t1, t2);
}

template <typename S>
Tensor<S> SaanModel<S>::predict_logits(const Tensor<S>& t1, const Tensor<S>& t2) const {
  Tape<S> tape;
  const Bound bound = bind(tape, false);
  return forward(tape, bound, t1, t2).logits.value();
}

// ---------------------------------------------------------------------------
// Attention export

template <typename S>
std::vector<std::filesystem::path> export_attention_maps(const AttentionState<S>& state,
                                                         const std::filesystem::path& directory, Index sample) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw FormatError("cannot create " + directory.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;
  std::ostringstream manifest;
  manifest << std::setprecision(9);
  for (std::size_t i = 0; i < state.stages.size(); ++i) {
    const auto& st = state.stages[i];
    const std::pair<const char*, const Tensor<S>*> kinds[] = {{"sim", &st.sim}, {"dsa", &st.dsa}, {"as", &st.spatial}};
    for (const auto& [kind, map] : kinds) {
      if (map->empty()) continue;
      const Dims4 d = as_nchw(map->shape(), "attention map");
      if (sample < 0 || sample >= d.n) throw DimensionError("attention export: sample index out of range");
      const double lo = std::string(kind) == "sim" ? -1.0 : 0.0, hi = 1.0;
      Tensor<float> image(Shape{1, d.h, d.w});
      for (Index k = 0; k < d.h * d.w; ++k)
        image[k] = static_cast<float>((static_cast<double>((*map)[sample * d.h * d.w + k]) - lo) / (hi - lo));
      const std::string name = "stage" + std::to_string(i) + "_" + kind + ".pgm";
      write_image(directory / name, image);
      files.push_back(directory / name);
      manifest << "stage=" << i << " kind=" << kind << " min=" << lo << " max=" << hi << " file=" << name << "\n";
    }
  }
  std::ofstream out(directory / "manifest.txt", std::ios::binary);
  out << manifest.str();
  if (!out) throw FormatError("cannot write attention manifest in " + directory.string());
  return files;
}

#define SAAN_INSTANTIATE_MODEL(S)                                                                              \
  template class SaanModel<S>;                                                                                \
  template ScaOutput<S> sca_block(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&,                   \
                                  const std::optional<Var<S>>&, const ScaParams<S>&, bool);                   \
  template SsaOutput<S> ssa_block(const Var<S>&, const std::optional<Var<S>>&, const std::optional<Var<S>>&,    \
                                  const SsaParams<S>&);                                                       \
  template std::vector<std::filesystem::path> export_attention_maps(const AttentionState<S>&,                   \
                                                                    const std::filesystem::path&, Index);

SAAN_INSTANTIATE_MODEL(float)
SAAN_INSTANTIATE_MODEL(double)

}  // namespace saan
