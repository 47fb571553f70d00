#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "saan/losses.hpp"
#include "saan/metrics.hpp"
#include "saan/model.hpp"
#include "saan/synth.hpp"

namespace saan {

enum class ValidationMetric { f1, accuracy };

struct AdamOptions {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  /// false: L2 term added to the gradient; true: AdamW-style shrinkage.
  bool decoupled_weight_decay = false;
};

struct TrainConfig {
  double lr0 = 5e-4;
  double weight_decay = 1e-5;
  int batch_size = 8;
  int plateau_patience = 5;
  double plateau_factor = 1.0 / 3.0;
  double min_lr = 1e-7;
  double improvement_tol = 1e-6;
  int max_epochs = 200;
  double max_seconds = 0;     // wall-clock budget, 0 = none
  double target_metric = 0;   // stop once validation reaches this, 0 = never
  bool augment = true;
  ValidationMetric validation_metric = ValidationMetric::f1;
  std::uint64_t seed = 0;
  AdamOptions adam;
  LossConfig loss;
  ContrastiveConfig contrastive;
  ModelConfig model;  // carries the ablation flags

  void validate() const;
};

template <typename S>
struct AdamState {
  std::vector<Tensor<S>> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam step over every parameter, reading Parameter::grad.
/// Throws NumericalError naming the parameter if a gradient is not finite.
template <typename S>
void adam_step(std::vector<Parameter<S>>& params, AdamState<S>& state, double lr, double weight_decay,
               const AdamOptions& options = {});

struct PlateauDecision {
  double lr = 0;
  bool stop = false;
  bool reduced = false;
  int stale_epochs = 0;  // trailing epochs without strict improvement
};

/// Learning-rate decision after the last entry of `history` (validation scores,
/// higher is better). Reduces by `factor` each time the stale count reaches a
/// multiple of `patience`; stop once the rate falls below `min_lr`.
PlateauDecision plateau_schedule(const std::vector<double>& history, double current_lr, int patience,
                                 double factor, double min_lr, double tol = 1e-6);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0, l_seg = 0, l_con = 0, l_aux = 0;  // means over the epoch's steps
  double val_f1 = 0, val_iou = 0, val_accuracy = 0;
  double seconds = 0;
};

/// `epoch,lr,loss,l_seg,l_con,l_aux,val_f1,val_iou` with one row per epoch.
std::string epoch_log_csv(const std::vector<EpochLog>& log);

struct StepRecord {
  std::int64_t step = 0;
  double total = 0, seg = 0, con = 0, aux = 0;
};

struct CheckpointMeta {
  std::uint32_t version = 1;
  ModelConfig model;
  std::string train_config;  // JSON echo
  int epoch = -1;
  double best_val_metric = 0;
  std::array<std::uint64_t, 4> rng_state{};
  std::int64_t adam_step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const SaanModel<float>& model,
                     const CheckpointMeta& meta, const AdamState<float>* adam = nullptr);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  SaanModel<float> model;
  std::optional<AdamState<float>> adam;
};

/// Reads a checkpoint and rebuilds the model from its stored configuration.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
/// Loads weights into an existing model. Names and shapes must match exactly;
/// the error lists unexpected and missing names.
CheckpointMeta load_checkpoint_into(const std::filesystem::path& path, SaanModel<float>& model,
                                    AdamState<float>* adam = nullptr);

std::string to_json(const TrainConfig& config);
std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

struct TrainResult {
  SaanModel<float> best;
  CheckpointMeta best_meta;
  std::vector<EpochLog> log;
  std::vector<StepRecord> steps;
  std::string stop_reason;
  double seconds = 0;  // wall clock for the whole run
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const StepRecord&)> on_step;
  /// Stop after this many optimizer steps (0 = no limit); used for short traces.
  std::int64_t max_steps = 0;
};

/// Runs the optimization loop. When `checkpoint` is non-empty the best model is
/// written there on every improvement.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& val_set,
                  const std::filesystem::path& checkpoint = {}, const TrainHooks& hooks = {});

struct EvalResult {
  MetricsReport aggregate;
  std::vector<MetricsReport> tiles;
};

/// Eval-mode inference over a whole split.
EvalResult evaluate(const SaanModel<float>& model, const Dataset& data, int batch_size = 16,
                    double threshold = 0.5);

/// Eval-mode logits for every pair of a split, [1,H,W] each.
std::vector<Tensor<float>> predict_split(const SaanModel<float>& model, const Dataset& data, int batch_size);

struct DistanceSeparation {
  double changed_mean = 0, unchanged_mean = 0;
  Index changed_pixels = 0, unchanged_pixels = 0;
  double gap() const { return changed_mean - unchanged_mean; }
};

/// Mean cosine distance of the deepest encoder features over changed and
/// unchanged coarse pixels (labels downsampled to the deepest resolution).
DistanceSeparation distance_separation(const SaanModel<float>& model, const Dataset& data, int batch_size = 16);

}  // namespace saan
