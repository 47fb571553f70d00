#include "saan/trainer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace saan {

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ValueError("lr0 must be positive");
  if (weight_decay < 0) throw ValueError("weight_decay must be nonnegative");
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  if (plateau_patience < 1) throw ValueError("plateau_patience must be >= 1");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ValueError("plateau_factor must lie in (0, 1)");
  if (!(min_lr < lr0)) throw ValueError("min_lr must be below lr0");
  if (improvement_tol < 0) throw ValueError("improvement_tol must be nonnegative");
  if (max_epochs < 1) throw ValueError("max_epochs must be >= 1");
  if (max_seconds < 0) throw ValueError("max_seconds must be nonnegative");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0))
    throw ValueError("Adam constants out of range");
  loss.validate();
  contrastive.validate();
  model.validate();
}

template <typename S>
void adam_step(std::vector<Parameter<S>>& params, AdamState<S>& state, double lr, double weight_decay,
               const AdamOptions& options) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("Adam state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].grad.shape() != params[i].value.shape() || state.m[i].shape() != params[i].value.shape())
      throw DimensionError("Adam: shape mismatch for parameter '" + params[i].name + "'");
    if (!params[i].grad.all_finite())
      throw NumericalError("non-finite gradient in parameter '" + params[i].name + "' at Adam step " +
                           std::to_string(state.step + 1));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const S b1 = static_cast<S>(options.beta1), b2 = static_cast<S>(options.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(options.beta1, t));
  const S c2 = static_cast<S>(1.0 - std::pow(options.beta2, t));
  const S step = static_cast<S>(lr), eps = static_cast<S>(options.eps), wd = static_cast<S>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value.values();
    auto& m = state.m[i].values();
    auto& v = state.v[i].values();
    typename Tensor<S>::Array g = params[i].grad.values();
    if (!options.decoupled_weight_decay && wd != S(0)) g += wd * w;
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    if (options.decoupled_weight_decay && wd != S(0)) w -= step * wd * w;
    w -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

PlateauDecision plateau_schedule(const std::vector<double>& history, double current_lr, int patience, double factor,
                                 double min_lr, double tol) {
  if (history.empty()) throw ValueError("plateau_schedule needs at least one epoch of history");
  if (patience < 1) throw ValueError("patience must be >= 1");
  double best = history.front();
  int stale = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > best + tol) {
      best = history[i];
      stale = 0;
    } else {
      ++stale;
    }
  }
  PlateauDecision d;
  d.stale_epochs = stale;
  d.lr = current_lr;
  if (stale > 0 && stale % patience == 0) {
    d.lr = current_lr * factor;
    d.reduced = true;
  }
  d.stop = d.lr < min_lr;
  return d;
}

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,lr,loss,l_seg,l_con,l_aux,val_f1,val_iou\n" << std::setprecision(9);
  for (const auto& e : log)
    out << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.l_seg << ',' << e.l_con << ',' << e.l_aux << ','
        << e.val_f1 << ',' << e.val_iou << '\n';
  return out.str();
}

namespace {

std::vector<std::vector<Index>> batches_in_order(Index count, int batch_size) {
  std::vector<std::vector<Index>> out;
  for (Index first = 0; first < count; first += batch_size) {
    std::vector<Index> b;
    for (Index k = first; k < std::min<Index>(count, first + batch_size); ++k) b.push_back(k);
    out.push_back(std::move(b));
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::vector<Tensor<float>> predict_split(const SaanModel<float>& model, const Dataset& data, int batch_size) {
  if (batch_size < 1) throw ValueError("batch size must be >= 1");
  std::vector<Tensor<float>> out;
  for (const auto& positions : batches_in_order(static_cast<Index>(data.samples.size()), batch_size)) {
    const Batch b = make_batch(data, positions);
    const Tensor<float> logits = model.predict_logits(b.t1, b.t2);
    for (Index k = 0; k < static_cast<Index>(positions.size()); ++k) {
      Tensor<float> one = slice_leading(logits, k, 1);
      out.push_back(one.reshaped(Shape{1, one.dim(2), one.dim(3)}));
    }
  }
  return out;
}

EvalResult evaluate(const SaanModel<float>& model, const Dataset& data, int batch_size, double threshold) {
  EvalResult result;
  const auto logits = predict_split(model, data, batch_size);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const MetricsReport tile = compute_metrics(logits[i], data.samples[i].mask, threshold);
    result.tiles.push_back(tile);
    result.aggregate += tile;
  }
  return result;
}

DistanceSeparation distance_separation(const SaanModel<float>& model, const Dataset& data, int batch_size) {
  DistanceSeparation sep;
  double changed = 0, unchanged = 0;
  for (const auto& positions : batches_in_order(static_cast<Index>(data.samples.size()), batch_size)) {
    const Batch b = make_batch(data, positions);
    Tape<float> tape;
    const auto bound = model.bind(tape, false);
    const auto [p1, p2] = model.encode(bound, tape.constant(b.t1), tape.constant(b.t2));
    const Tensor<float>& d = cosine_distance_map(p1.back(), p2.back()).value();
    const Tensor<float> labels = downsample_labels(b.mask, b.mask.dim(2) / d.dim(2));
    for (Index i = 0; i < d.size(); ++i) {
      if (labels[i] > 0.5f) {
        changed += d[i];
        ++sep.changed_pixels;
      } else {
        unchanged += d[i];
        ++sep.unchanged_pixels;
      }
    }
  }
  if (sep.changed_pixels > 0) sep.changed_mean = changed / static_cast<double>(sep.changed_pixels);
  if (sep.unchanged_pixels > 0) sep.unchanged_mean = unchanged / static_cast<double>(sep.unchanged_pixels);
  return sep;
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& val_set,
                  const std::filesystem::path& checkpoint, const TrainHooks& hooks) {
  config.validate();
  if (train_set.samples.empty() || val_set.samples.empty()) throw ValueError("train and validation splits must be nonempty");
  const auto start = std::chrono::steady_clock::now();
  SplitMix64 seeds(config.seed);
  SaanModel<float> model(config.model, seeds.next());
  AdamState<float> adam;
  Xoshiro256pp rng = Xoshiro256pp::stream(config.seed, seeds.next());
  const std::string config_json = to_json(config);

  TrainResult result{model, CheckpointMeta{}, {}, {}, "max_epochs reached", 0};
  result.best_meta.model = config.model;
  result.best_meta.train_config = config_json;
  std::vector<double> history;
  double lr = config.lr0;
  double best = -1;
  bool done = false;
  const Index n = static_cast<Index>(train_set.samples.size());

  for (int epoch = 0; epoch < config.max_epochs && !done; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    Index steps = 0;
    for (Index first = 0; first < n; first += config.batch_size) {
      std::vector<Index> positions(order.begin() + first, order.begin() + std::min<Index>(n, first + config.batch_size));
      std::vector<AugmentOp> ops;
      if (config.augment)
        for (std::size_t k = 0; k < positions.size(); ++k) ops.push_back(draw_augment(rng));
      const Batch batch = make_batch(train_set, positions, ops);

      Tape<float> tape;
      const auto bound = model.bind(tape, true);
      const auto fwd = model.forward(tape, bound, batch.t1, batch.t2, true);
      const auto loss = total_loss(fwd.logits, fwd.aux_logits, fwd.deep_t1, fwd.deep_t2, batch.mask,
                                   config.model.flags, config.loss, config.contrastive);
      if (!std::isfinite(loss.total_value))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(adam.step + 1) +
                             (checkpoint.empty() ? std::string()
                                                 : "; last good checkpoint: " + checkpoint.string()));
      tape.backward(loss.total);
      model.zero_grad();
      model.accumulate_gradients(bound);
      adam_step(model.parameters(), adam, lr, config.weight_decay, config.adam);

      const StepRecord rec{adam.step, loss.total_value, loss.seg_value, loss.con_value, loss.aux_value};
      result.steps.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      log.loss += rec.total;
      log.l_seg += rec.seg;
      log.l_con += rec.con;
      log.l_aux += rec.aux;
      ++steps;
      if (hooks.max_steps > 0 && adam.step >= hooks.max_steps) {
        done = true;
        result.stop_reason = "max_steps reached";
        break;
      }
    }
    if (steps > 0) {
      log.loss /= static_cast<double>(steps);
      log.l_seg /= static_cast<double>(steps);
      log.l_con /= static_cast<double>(steps);
      log.l_aux /= static_cast<double>(steps);
    }

    const MetricsReport val = evaluate(model, val_set).aggregate;
    log.val_f1 = val.f1;
    log.val_iou = val.iou;
    log.val_accuracy = val.accuracy();
    log.seconds = seconds_since(epoch_start);
    result.log.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);

    const double score = config.validation_metric == ValidationMetric::f1 ? val.f1 : val.accuracy();
    history.push_back(score);
    if (history.size() == 1 || score > best + config.improvement_tol) {
      best = score;
      result.best = model;
      result.best_meta.epoch = epoch;
      result.best_meta.best_val_metric = score;
      result.best_meta.rng_state = rng.state();
      result.best_meta.adam_step = adam.step;
      if (!checkpoint.empty()) save_checkpoint(checkpoint, model, result.best_meta, &adam);
    }

    const PlateauDecision decision = plateau_schedule(history, lr, config.plateau_patience, config.plateau_factor,
                                                      config.min_lr, config.improvement_tol);
    lr = decision.lr;
    if (done) break;
    if (decision.stop) {
      result.stop_reason = "learning rate below min_lr";
      break;
    }
    if (config.target_metric > 0 && score >= config.target_metric) {
      result.stop_reason = "target validation metric reached";
      break;
    }
    // stop early rather than overrun the budget with one more epoch
    const double elapsed = seconds_since(start);
    if (config.max_seconds > 0 && elapsed + log.seconds > config.max_seconds) {
      result.stop_reason = "time budget exhausted";
      break;
    }
  }
  result.seconds = seconds_since(start);
  return result;
}

template void adam_step(std::vector<Parameter<float>>&, AdamState<float>&, double, double, const AdamOptions&);
template void adam_step(std::vector<Parameter<double>>&, AdamState<double>&, double, double, const AdamOptions&);

}  // namespace saan
