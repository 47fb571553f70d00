#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "saan/ops.hpp"

namespace saan {

enum class EncoderVariant { mini, resnet18 };

struct EncoderConfig {
  std::vector<Index> stage_channels{16, 32, 64, 128};
  int blocks_per_stage = 2;  // residual basic blocks per stage
  Index input_channels = 3;
  EncoderVariant variant = EncoderVariant::mini;

  /// Channel widths of a ResNet18 trunk: [64, 128, 256, 512], 7x7 stem.
  static EncoderConfig resnet18();
  Index stages() const { return static_cast<Index>(stage_channels.size()); }
  void validate() const;
};

/// Switches for the optimization strategies and decoder components that the
/// ablation grid toggles.
struct AblationFlags {
  bool sim_loss = true;
  bool deep_supervision = true;
  bool sca = true;
  bool ssa = true;
  bool flow = true;

  void validate() const;
  bool operator==(const AblationFlags&) const = default;

  /// Named presets: opt-a, opt-b, opt-c, opt-d, opt-d+sca, opt-d+sca+flow,
  /// opt-d+ssa, opt-d+ssa+flow, opt-d+sca+ssa, full.
  static AblationFlags preset(const std::string& name);
  static const std::vector<std::string>& preset_names();
};

struct ModelConfig {
  EncoderConfig encoder;
  AblationFlags flags;
  /// Feed constant 0.5 maps as the incoming flow at the deepest decoder
  /// stage; false drops the flow channel there instead.
  bool constant_first_flow = true;
  /// Apply the channel attention to the raw concatenation rather than the
  /// DSA-weighted one.
  bool channel_attention_on_raw = false;
  Index mlp_reduction = 4;
  Index mlp_min_hidden = 8;

  void validate() const;
};

enum class Component { encoder, sca, fusion, ssa, aux_heads, head };

template <typename S>
struct Parameter {
  std::string name;
  Component component = Component::encoder;
  Tensor<S> value;
  Tensor<S> grad;
};

template <typename S>
struct NamedBuffer {
  std::string name;  // batchnorm prefix; stats serialize as <name>.running_mean / .running_var
  BatchNormState<S> state;
};

/// Per-stage encoder outputs for one time point, finest first, deepest last.
template <typename S>
using FeaturePyramid = std::vector<Var<S>>;

/// Maps recorded at one decoder stage. Absent maps (component disabled) are empty tensors.
template <typename S>
struct StageAttention {
  Tensor<S> sim;      // [N,1,h,w] cosine similarity of the stage's encoder features
  Tensor<S> dsa;      // [N,1,h,w]
  Tensor<S> channel;  // [N,Ccat,1,1]
  Tensor<S> spatial;  // [N,1,h,w]
};

/// Decoder stages ordered deepest first.
template <typename S>
struct AttentionState {
  std::vector<StageAttention<S>> stages;
};

template <typename S>
struct ScaParams {
  Var<S> dsa_weight, dsa_bias;
  Var<S> fc1_weight, fc1_bias, fc2_weight, fc2_bias;  // shared two-layer MLP
};

template <typename S>
struct ScaOutput {
  Var<S> attended;  // [N,Ccat,h,w]
  Var<S> sim;
  Var<S> dsa;
  Var<S> channel_attention;  // [N,Ccat,1,1]
};

/// Similarity-guided channel attention. `f_prev` and `dsa_prev` must already
/// be at the stage resolution; an absent `dsa_prev` means the DSA conv sees
/// only the similarity map.
template <typename S>
ScaOutput<S> sca_block(const Var<S>& f1, const Var<S>& f2, const std::optional<Var<S>>& f_prev,
                       const std::optional<Var<S>>& dsa_prev, const ScaParams<S>& params,
                       bool attend_raw = false);

template <typename S>
struct SsaParams {
  Var<S> weight, bias;
};

template <typename S>
struct SsaOutput {
  Var<S> features;
  Var<S> spatial_attention;
};

/// Similarity-guided spatial attention over [mean_c, max_c, A_s_prev, DSA].
/// Absent optional maps are left out of the conv input.
template <typename S>
SsaOutput<S> ssa_block(const Var<S>& fused, const std::optional<Var<S>>& spatial_prev,
                       const std::optional<Var<S>>& dsa, const SsaParams<S>& params);

/// Attention maps flowing into a decoder stage, already at its resolution.
template <typename S>
struct StageFlow {
  std::optional<Var<S>> dsa;
  std::optional<Var<S>> spatial;
};

template <typename S>
struct StageOutput {
  Var<S> features;
  Var<S> aux_logits;  // invalid without deep supervision
  Var<S> sim, dsa, spatial;
  StageAttention<S> attention;
};

template <typename S>
struct ForwardResult {
  Var<S> logits;                 // [N,1,H,W]
  std::vector<Var<S>> aux_logits;  // one per decoder stage, deepest first
  Var<S> deep_t1, deep_t2;       // deepest encoder features
  bool deep_features_used = true;
  AttentionState<S> attention;
};

struct ParamCounts {
  Index encoder = 0, sca = 0, fusion = 0, ssa = 0, aux_heads = 0, head = 0;
  Index total() const { return encoder + sca + fusion + ssa + aux_heads + head; }
};

/// Siamese encoder plus similarity-guided decoder with deep-supervision heads.
template <typename S>
class SaanModel {
 public:
  /// Parameters as tape leaves for one forward pass.
  struct Bound {
    std::vector<Var<S>> params;
  };

  explicit SaanModel(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<S>>& parameters() { return params_; }
  const std::vector<Parameter<S>>& parameters() const { return params_; }
  std::vector<NamedBuffer<S>>& buffers() { return buffers_; }
  const std::vector<NamedBuffer<S>>& buffers() const { return buffers_; }

  Bound bind(Tape<S>& tape, bool requires_grad) const;
  /// Adds each bound leaf's tape gradient into Parameter::grad.
  void accumulate_gradients(const Bound& bound);
  void zero_grad();

  /// Runs the shared encoder on each time point. Training mode uses batch
  /// statistics and updates the running stats.
  std::pair<FeaturePyramid<S>, FeaturePyramid<S>> encode(const Bound& bound, const Var<S>& t1, const Var<S>& t2,
                                                         bool training);
  std::pair<FeaturePyramid<S>, FeaturePyramid<S>> encode(const Bound& bound, const Var<S>& t1,
                                                         const Var<S>& t2) const;

  /// Decoder stage `stage` (0 = deepest). `f_prev` and `flow` must already be
  /// upsampled to this stage's resolution; f_prev is absent at stage 0.
  StageOutput<S> decode_stage(const Bound& bound, Index stage, const FeaturePyramid<S>& p1,
                              const FeaturePyramid<S>& p2, const std::optional<Var<S>>& f_prev,
                              const StageFlow<S>& flow, bool training);
  StageOutput<S> decode_stage(const Bound& bound, Index stage, const FeaturePyramid<S>& p1,
                              const FeaturePyramid<S>& p2, const std::optional<Var<S>>& f_prev,
                              const StageFlow<S>& flow) const;

  /// Full pipeline on NCHW image batches.
  ForwardResult<S> forward(Tape<S>& tape, const Bound& bound, const Tensor<S>& t1, const Tensor<S>& t2,
                           bool training);
  ForwardResult<S> forward(Tape<S>& tape, const Bound& bound, const Tensor<S>& t1, const Tensor<S>& t2) const;
  /// Eval-mode logits without keeping the tape.
  Tensor<S> predict_logits(const Tensor<S>& t1, const Tensor<S>& t2) const;

  ParamCounts param_count() const;

  Parameter<S>* find_parameter(const std::string& name);
  NamedBuffer<S>* find_buffer(const std::string& name);

  struct Layers;

 private:
  struct Impl;
  ModelConfig config_;
  std::vector<Parameter<S>> params_;
  std::vector<NamedBuffer<S>> buffers_;
  std::shared_ptr<const Layers> layers_;
};

/// Exact parameter totals for a configuration, by constructing and enumerating.
ParamCounts param_count(const ModelConfig& config);

/// Writes one 8-bit PGM per stage and map kind (sim, dsa, as) present in the
/// state, for batch element `sample`, plus manifest.txt with one line per
/// file: `stage=<i> kind=<k> min=<f> max=<f> file=<name>`. Values map
/// linearly from [min, max] to [0, 255] (sim uses [-1, 1], the sigmoid maps
/// [0, 1]). Returns the written image paths.
template <typename S>
std::vector<std::filesystem::path> export_attention_maps(const AttentionState<S>& state,
                                                         const std::filesystem::path& directory, Index sample = 0);

}  // namespace saan
