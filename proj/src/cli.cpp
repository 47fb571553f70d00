#include "saan/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "saan/pnm.hpp"
#include "saan/trainer.hpp"

namespace saan {

std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(what + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw UsageError(what + ":" + std::to_string(lineno) + ": empty key or value");
    if (!kv.emplace(key, value).second) throw UsageError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

namespace {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Typed settings

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("setting '" + key + "': expected a number, got '" + v + "'");
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw UsageError("setting '" + key + "': expected an integer, got '" + v + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const unsigned long long i = std::stoull(v, &used);
      if (used == v.size()) return i;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("setting '" + key + "': expected a nonnegative integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw UsageError("setting '" + key + "': expected true or false, got '" + v + "'");
}

struct Settings {
  TrainConfig train;
  SceneSpec scene;
  SplitCounts counts;
};

using Setter = std::function<void(Settings&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& scene_keys() {
  static const std::map<std::string, Setter> keys = {
      {"size", [](Settings& s, auto& k, auto& v) { s.scene.size = to_int(k, v); }},
      {"channels", [](Settings& s, auto& k, auto& v) { s.scene.channels = to_int(k, v); }},
      {"min_objects", [](Settings& s, auto& k, auto& v) { s.scene.min_objects = static_cast<int>(to_int(k, v)); }},
      {"max_objects", [](Settings& s, auto& k, auto& v) { s.scene.max_objects = static_cast<int>(to_int(k, v)); }},
      {"min_extent", [](Settings& s, auto& k, auto& v) { s.scene.min_extent = to_int(k, v); }},
      {"max_extent", [](Settings& s, auto& k, auto& v) { s.scene.max_extent = to_int(k, v); }},
      {"rectangles", [](Settings& s, auto& k, auto& v) { s.scene.rectangles = to_bool(k, v); }},
      {"ellipses", [](Settings& s, auto& k, auto& v) { s.scene.ellipses = to_bool(k, v); }},
      {"p_add", [](Settings& s, auto& k, auto& v) { s.scene.p_add = to_double(k, v); }},
      {"p_remove", [](Settings& s, auto& k, auto& v) { s.scene.p_remove = to_double(k, v); }},
      {"p_keep", [](Settings& s, auto& k, auto& v) { s.scene.p_keep = to_double(k, v); }},
      {"min_contrast", [](Settings& s, auto& k, auto& v) { s.scene.min_contrast = to_double(k, v); }},
      {"brightness_jitter", [](Settings& s, auto& k, auto& v) { s.scene.brightness_jitter = to_double(k, v); }},
      {"gain_jitter", [](Settings& s, auto& k, auto& v) { s.scene.gain_jitter = to_double(k, v); }},
      {"noise_sigma", [](Settings& s, auto& k, auto& v) { s.scene.noise_sigma = to_double(k, v); }},
      {"seed", [](Settings& s, auto& k, auto& v) { s.scene.seed = to_u64(k, v); }},
      {"train", [](Settings& s, auto& k, auto& v) { s.counts.train = to_int(k, v); }},
      {"val", [](Settings& s, auto& k, auto& v) { s.counts.val = to_int(k, v); }},
      {"test", [](Settings& s, auto& k, auto& v) { s.counts.test = to_int(k, v); }},
  };
  return keys;
}

std::vector<Index> to_channels(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, item));
  return out;
}

const std::map<std::string, Setter>& train_keys() {
  static const std::map<std::string, Setter> keys = {
      {"lr0", [](Settings& s, auto& k, auto& v) { s.train.lr0 = to_double(k, v); }},
      {"weight_decay", [](Settings& s, auto& k, auto& v) { s.train.weight_decay = to_double(k, v); }},
      {"decoupled_weight_decay",
       [](Settings& s, auto& k, auto& v) { s.train.adam.decoupled_weight_decay = to_bool(k, v); }},
      {"beta1", [](Settings& s, auto& k, auto& v) { s.train.adam.beta1 = to_double(k, v); }},
      {"beta2", [](Settings& s, auto& k, auto& v) { s.train.adam.beta2 = to_double(k, v); }},
      {"adam_eps", [](Settings& s, auto& k, auto& v) { s.train.adam.eps = to_double(k, v); }},
      {"batch_size", [](Settings& s, auto& k, auto& v) { s.train.batch_size = static_cast<int>(to_int(k, v)); }},
      {"plateau_patience",
       [](Settings& s, auto& k, auto& v) { s.train.plateau_patience = static_cast<int>(to_int(k, v)); }},
      {"plateau_factor", [](Settings& s, auto& k, auto& v) { s.train.plateau_factor = to_double(k, v); }},
      {"min_lr", [](Settings& s, auto& k, auto& v) { s.train.min_lr = to_double(k, v); }},
      {"improvement_tol", [](Settings& s, auto& k, auto& v) { s.train.improvement_tol = to_double(k, v); }},
      {"max_epochs", [](Settings& s, auto& k, auto& v) { s.train.max_epochs = static_cast<int>(to_int(k, v)); }},
      {"max_seconds", [](Settings& s, auto& k, auto& v) { s.train.max_seconds = to_double(k, v); }},
      {"target_metric", [](Settings& s, auto& k, auto& v) { s.train.target_metric = to_double(k, v); }},
      {"augment", [](Settings& s, auto& k, auto& v) { s.train.augment = to_bool(k, v); }},
      {"validation_metric",
       [](Settings& s, auto& k, auto& v) {
         if (v != "f1" && v != "accuracy") throw UsageError("setting '" + k + "': expected f1 or accuracy");
         s.train.validation_metric = v == "f1" ? ValidationMetric::f1 : ValidationMetric::accuracy;
       }},
      {"seed", [](Settings& s, auto& k, auto& v) { s.train.seed = to_u64(k, v); }},
      {"w", [](Settings& s, auto& k, auto& v) { s.train.loss.w = to_double(k, v); }},
      {"dice_smooth", [](Settings& s, auto& k, auto& v) { s.train.loss.dice_smooth = to_double(k, v); }},
      {"prediction_threshold",
       [](Settings& s, auto& k, auto& v) { s.train.loss.prediction_threshold = to_double(k, v); }},
      {"margin", [](Settings& s, auto& k, auto& v) { s.train.contrastive.margin = to_double(k, v); }},
      {"sqrt_eps", [](Settings& s, auto& k, auto& v) { s.train.contrastive.sqrt_eps = to_double(k, v); }},
      {"preset",
       [](Settings& s, auto&, auto& v) {
         try {
           s.train.model.flags = AblationFlags::preset(v);
         } catch (const ValueError& e) {
           throw UsageError(e.what());
         }
       }},
      {"sim_loss", [](Settings& s, auto& k, auto& v) { s.train.model.flags.sim_loss = to_bool(k, v); }},
      {"deep_supervision", [](Settings& s, auto& k, auto& v) { s.train.model.flags.deep_supervision = to_bool(k, v); }},
      {"sca", [](Settings& s, auto& k, auto& v) { s.train.model.flags.sca = to_bool(k, v); }},
      {"ssa", [](Settings& s, auto& k, auto& v) { s.train.model.flags.ssa = to_bool(k, v); }},
      {"flow", [](Settings& s, auto& k, auto& v) { s.train.model.flags.flow = to_bool(k, v); }},
      {"stage_channels",
       [](Settings& s, auto& k, auto& v) { s.train.model.encoder.stage_channels = to_channels(k, v); }},
      {"blocks_per_stage",
       [](Settings& s, auto& k, auto& v) { s.train.model.encoder.blocks_per_stage = static_cast<int>(to_int(k, v)); }},
      {"input_channels", [](Settings& s, auto& k, auto& v) { s.train.model.encoder.input_channels = to_int(k, v); }},
      {"variant",
       [](Settings& s, auto& k, auto& v) {
         if (v == "resnet18") {
           const auto channels = s.train.model.encoder.input_channels;
           s.train.model.encoder = EncoderConfig::resnet18();
           s.train.model.encoder.input_channels = channels;
         } else if (v != "mini") {
           throw UsageError("setting '" + k + "': expected mini or resnet18");
         }
       }},
      {"constant_first_flow", [](Settings& s, auto& k, auto& v) { s.train.model.constant_first_flow = to_bool(k, v); }},
      {"channel_attention_on_raw",
       [](Settings& s, auto& k, auto& v) { s.train.model.channel_attention_on_raw = to_bool(k, v); }},
      {"mlp_reduction", [](Settings& s, auto& k, auto& v) { s.train.model.mlp_reduction = to_int(k, v); }},
      {"mlp_min_hidden", [](Settings& s, auto& k, auto& v) { s.train.model.mlp_min_hidden = to_int(k, v); }},
  };
  return keys;
}

/// Applies config-file values, then command-line overrides, in a fixed key
/// order so `preset` lands before individual flag keys and `variant` before
/// channel lists.
void apply_settings(Settings& s, const std::map<std::string, Setter>& keys,
                    const std::vector<std::map<std::string, std::string>>& layers) {
  std::map<std::string, std::string> merged;
  for (const auto& layer : layers)
    for (const auto& [k, v] : layer) {
      if (!keys.count(k)) {
        std::string valid;
        for (const auto& [name, _] : keys) valid += (valid.empty() ? "" : ", ") + name;
        throw UsageError("unknown setting '" + k + "' (valid: " + valid + ")");
      }
      merged[k] = v;
    }
  for (const char* first : {"variant", "preset"})
    if (merged.count(first)) keys.at(first)(s, first, merged.at(first));
  for (const auto& [k, v] : merged)
    if (k != "variant" && k != "preset") keys.at(k)(s, k, v);
}

std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& items) {
  std::map<std::string, std::string> kv;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size())
      throw UsageError("--set expects key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

template <typename Fn>
void validated(Fn&& fn) {
  try {
    fn();
  } catch (const ValueError& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
}

std::string scene_json(const SceneSpec& s, const SplitCounts& c) {
  ordered_json j{{"size", s.size},
                 {"channels", s.channels},
                 {"min_objects", s.min_objects},
                 {"max_objects", s.max_objects},
                 {"min_extent", s.min_extent},
                 {"max_extent", s.max_extent},
                 {"rectangles", s.rectangles},
                 {"ellipses", s.ellipses},
                 {"p_add", s.p_add},
                 {"p_remove", s.p_remove},
                 {"p_keep", s.p_keep},
                 {"min_contrast", s.min_contrast},
                 {"brightness_jitter", s.brightness_jitter},
                 {"gain_jitter", s.gain_jitter},
                 {"noise_sigma", s.noise_sigma},
                 {"seed", s.seed},
                 {"train", c.train},
                 {"val", c.val},
                 {"test", c.test}};
  return j.dump();
}

/// Written to stderr (and the run log when there is one) before any result.
std::string repro_header(const std::string& command, std::uint64_t seed, const std::string& config_json) {
  std::ostringstream h;
  h << "# saan " << kVersion << "\n# command: " << command << "\n# seed: " << seed << "\n# config: " << config_json
    << "\n";
  return h.str();
}

std::string flags_string(const AblationFlags& f) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (on) s += (s.empty() ? "" : "+") + std::string(name);
  };
  add(f.sim_loss, "sim");
  add(f.deep_supervision, "ds");
  add(f.sca, "sca");
  add(f.ssa, "ssa");
  add(f.flow, "flow");
  return s.empty() ? "none" : s;
}

Tensor<float> as_batch(const Tensor<float>& image) { return image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}); }

Tensor<float> change_map(const Tensor<float>& logits_chw, double threshold, bool probabilities) {
  Tensor<float> out(logits_chw.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits_chw[i])));
    out[i] = probabilities ? static_cast<float>(p) : (p >= threshold ? 1.0f : 0.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
};

std::vector<std::map<std::string, std::string>> setting_layers(const CommonArgs& a,
                                                               const std::map<std::string, std::string>& flags) {
  std::vector<std::map<std::string, std::string>> layers;
  if (!a.config.empty()) layers.push_back(parse_config_text(read_file(a.config), a.config));
  layers.push_back(flags);
  layers.push_back(parse_overrides(a.sets));
  return layers;
}

struct GenDataArgs {
  CommonArgs common;
  std::string out;
  std::map<std::string, std::string> flags;
};

int run_gen_data(const GenDataArgs& a, Streams io) {
  Settings s;
  apply_settings(s, scene_keys(), setting_layers(a.common, a.flags));
  validated([&] {
    s.scene.validate(0);
    if (s.counts.train < 1 || s.counts.val < 1 || s.counts.test < 1)
      throw ValueError("every split needs at least one pair");
  });
  const std::string json = scene_json(s.scene, s.counts);
  io.err << repro_header("gen-data", s.scene.seed, json);
  const auto entries = write_dataset(s.scene, s.counts, a.out);
  ordered_json result{{"root", a.out},
                      {"manifest", (std::filesystem::path(a.out) / "manifest.txt").string()},
                      {"pairs", entries.size()},
                      {"train", s.counts.train},
                      {"val", s.counts.val},
                      {"test", s.counts.test}};
  io.out << result.dump() << "\n";
  return kExitOk;
}

struct TrainArgs {
  CommonArgs common;
  std::string manifest, out_dir;
  std::map<std::string, std::string> flags;
};

int run_train(const TrainArgs& a, Streams io) {
  Settings s;
  apply_settings(s, train_keys(), setting_layers(a.common, a.flags));
  validated([&] { s.train.validate(); });
  const Dataset train_set = load_split(a.manifest, "train");
  const Dataset val_set = load_split(a.manifest, "val");

  const std::filesystem::path dir(a.out_dir);
  std::filesystem::create_directories(dir);
  const std::string header = repro_header("train", s.train.seed, to_json(s.train));
  io.err << header;
  std::ofstream run_log(dir / "run.log", std::ios::trunc);
  run_log << header << std::flush;

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    std::ostringstream line;
    line << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.loss << " l_seg " << e.l_seg << " l_con " << e.l_con
         << " l_aux " << e.l_aux << " val_f1 " << e.val_f1 << " val_iou " << e.val_iou << " (" << std::fixed
         << std::setprecision(1) << e.seconds << " s)\n";
    io.err << line.str() << std::flush;
    run_log << line.str() << std::flush;
  };
  const auto checkpoint = dir / "best.ckpt";
  TrainResult result = [&] {
    try {
      return train(s.train, train_set, val_set, checkpoint, hooks);
    } catch (const NumericalError& e) {
      run_log << "aborted: " << e.what() << "\n";
      throw;
    }
  }();
  write_file(dir / "log.csv", epoch_log_csv(result.log));
  run_log << "stop: " << result.stop_reason << "\n";

  const EpochLog& best = result.log.at(static_cast<std::size_t>(result.best_meta.epoch));
  ordered_json summary{{"checkpoint", checkpoint.string()},
                       {"log", (dir / "log.csv").string()},
                       {"epochs", result.log.size()},
                       {"steps", result.steps.size()},
                       {"best_epoch", result.best_meta.epoch},
                       {"best_val_metric", result.best_meta.best_val_metric},
                       {"best_val_f1", best.val_f1},
                       {"best_val_iou", best.val_iou},
                       {"seconds", result.seconds},
                       {"stop_reason", result.stop_reason}};
  io.out << summary.dump() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, manifest, split = "test", pred_dir, tiles;
  double threshold = 0.5;
  int batch_size = 16;
};

int run_eval(const EvalArgs& a, Streams io) {
  if (a.checkpoint.empty() == a.pred_dir.empty()) throw UsageError("eval needs exactly one of --checkpoint or --pred-dir");
  if (!(a.threshold > 0 && a.threshold < 1)) throw UsageError("--threshold must lie in (0, 1)");
  const Dataset data = load_split(a.manifest, a.split);
  EvalResult result;
  if (!a.pred_dir.empty()) {
    io.err << repro_header("eval", 0,
                           ordered_json{{"pred_dir", a.pred_dir}, {"manifest", a.manifest}, {"split", a.split},
                                        {"threshold", a.threshold}}
                               .dump());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const auto path = std::filesystem::path(a.pred_dir) / (std::to_string(data.indices[i]) + ".pgm");
      const Tensor<float> pred = read_image(path);
      if (pred.shape() != data.samples[i].mask.shape())
        throw FormatError(path.string() + ": prediction size " + to_string(pred.shape()) + " differs from the mask");
      result.tiles.push_back(compute_metrics_from_probabilities(pred, data.samples[i].mask, a.threshold));
      result.aggregate += result.tiles.back();
    }
  } else {
    const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
    io.err << repro_header("eval", 0,
                           ordered_json{{"checkpoint", a.checkpoint}, {"manifest", a.manifest}, {"split", a.split},
                                        {"threshold", a.threshold}, {"epoch", ck.meta.epoch},
                                        {"model", nlohmann::json::parse(to_json(ck.meta.model))}}
                               .dump());
    result = evaluate(ck.model, data, a.batch_size, a.threshold);
  }
  if (!a.tiles.empty()) {
    std::ostringstream csv;
    csv << "index,tp,fp,fn,tn,precision,recall,f1,iou\n" << std::setprecision(9);
    for (std::size_t i = 0; i < result.tiles.size(); ++i) {
      const auto& t = result.tiles[i];
      csv << data.indices[i] << ',' << t.tp << ',' << t.fp << ',' << t.fn << ',' << t.tn << ',' << t.precision << ','
          << t.recall << ',' << t.f1 << ',' << t.iou << '\n';
    }
    write_file(a.tiles, csv.str());
  }
  io.out << result.aggregate.to_json() << "\n";
  return kExitOk;
}

struct PredictArgs {
  std::string checkpoint, t1, t2, out, manifest, split = "test", out_dir;
  double threshold = 0.5;
  int batch_size = 1;
  bool probabilities = false;
};

int run_predict(const PredictArgs& a, Streams io) {
  if (!(a.threshold > 0 && a.threshold < 1)) throw UsageError("--threshold must lie in (0, 1)");
  if (a.batch_size < 1) throw UsageError("--batch-size must be >= 1");
  const bool single = !a.t1.empty() || !a.t2.empty() || !a.out.empty();
  const bool split = !a.manifest.empty() || !a.out_dir.empty();
  if (single == split) throw UsageError("predict needs either --t1/--t2/--out or --manifest/--out-dir");
  if (single && (a.t1.empty() || a.t2.empty() || a.out.empty())) throw UsageError("predict needs --t1, --t2 and --out");
  if (split && (a.manifest.empty() || a.out_dir.empty())) throw UsageError("predict needs --manifest and --out-dir");

  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  io.err << repro_header("predict", 0,
                         ordered_json{{"checkpoint", a.checkpoint}, {"threshold", a.threshold},
                                      {"batch_size", a.batch_size}, {"probabilities", a.probabilities},
                                      {"model", nlohmann::json::parse(to_json(ck.meta.model))}}
                             .dump());
  ordered_json result;
  if (single) {
    const Tensor<float> t1 = read_image(a.t1), t2 = read_image(a.t2);
    if (t1.shape() != t2.shape()) throw FormatError("--t1 and --t2 differ in size");
    const Tensor<float> logits = ck.model.predict_logits(as_batch(t1), as_batch(t2));
    const Tensor<float> map = change_map(logits.reshaped(Shape{1, t1.dim(1), t1.dim(2)}), a.threshold, a.probabilities);
    write_image(a.out, map);
    Index changed = 0;
    for (Index i = 0; i < map.size(); ++i) changed += map[i] >= a.threshold;
    result = {{"out", a.out}, {"pixels", map.size()}, {"changed", changed}};
  } else {
    const Dataset data = load_split(a.manifest, a.split);
    const auto logits = predict_split(ck.model, data, a.batch_size);
    for (std::size_t i = 0; i < logits.size(); ++i)
      write_image(std::filesystem::path(a.out_dir) / (std::to_string(data.indices[i]) + ".pgm"),
                  change_map(logits[i], a.threshold, a.probabilities));
    result = {{"out_dir", a.out_dir}, {"split", a.split}, {"pairs", logits.size()}};
  }
  io.out << result.dump() << "\n";
  return kExitOk;
}

struct InspectArgs {
  std::string checkpoint, t1, t2, out_dir;
};

int run_inspect(const InspectArgs& a, Streams io) {
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  io.err << repro_header("inspect-attn", 0,
                         ordered_json{{"checkpoint", a.checkpoint}, {"t1", a.t1}, {"t2", a.t2},
                                      {"model", nlohmann::json::parse(to_json(ck.meta.model))}}
                             .dump());
  const Tensor<float> t1 = read_image(a.t1), t2 = read_image(a.t2);
  if (t1.shape() != t2.shape()) throw FormatError("--t1 and --t2 differ in size");
  Tape<float> tape;
  const auto bound = ck.model.bind(tape, false);
  const auto fwd = ck.model.forward(tape, bound, as_batch(t1), as_batch(t2));
  const auto files = export_attention_maps(fwd.attention, a.out_dir);
  ordered_json result{{"out_dir", a.out_dir},
                      {"images", files.size()},
                      {"manifest", (std::filesystem::path(a.out_dir) / "manifest.txt").string()}};
  io.out << result.dump() << "\n";
  return kExitOk;
}

struct AblateArgs {
  CommonArgs common;
  std::string manifest, out_dir, presets = "opt-a,opt-d,full";
  std::map<std::string, std::string> flags;
};

int run_ablate(const AblateArgs& a, Streams io) {
  Settings base;
  apply_settings(base, train_keys(), setting_layers(a.common, a.flags));
  validated([&] { base.train.validate(); });
  std::vector<std::string> presets;
  {
    std::stringstream ss(a.presets);
    std::string p;
    while (std::getline(ss, p, ','))
      if (p == "all")
        for (const auto& name : AblationFlags::preset_names()) presets.push_back(name);
      else
        presets.push_back(p);
  }
  for (const auto& p : presets) validated([&] { AblationFlags::preset(p); });
  if (presets.empty()) throw UsageError("--presets is empty");

  const Dataset train_set = load_split(a.manifest, "train");
  const Dataset val_set = load_split(a.manifest, "val");
  const Dataset test_set = load_split(a.manifest, "test");
  ordered_json echo{{"presets", presets}, {"base", nlohmann::json::parse(to_json(base.train))}};
  io.err << repro_header("ablate", base.train.seed, echo.dump());

  std::ostringstream csv;
  csv << "variant,flags,f1,iou,params,sec_per_iter,delta_f1,delta_iou,delta_params\n" << std::setprecision(9);
  double f1_0 = 0, iou_0 = 0;
  Index params_0 = 0;
  for (std::size_t k = 0; k < presets.size(); ++k) {
    TrainConfig cfg = base.train;
    cfg.model.flags = AblationFlags::preset(presets[k]);
    std::filesystem::path ckpt;
    if (!a.out_dir.empty()) ckpt = std::filesystem::path(a.out_dir) / (presets[k] + ".ckpt");
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochLog& e) {
      io.err << presets[k] << " epoch " << e.epoch << " loss " << e.loss << " val_f1 " << e.val_f1 << "\n"
             << std::flush;
    };
    const TrainResult r = train(cfg, train_set, val_set, ckpt, hooks);
    const auto t0 = std::chrono::steady_clock::now();
    const EvalResult ev = evaluate(r.best, test_set, 1);
    const double sec_per_iter =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / static_cast<double>(test_set.samples.size());
    const Index params = r.best.param_count().total();
    if (k == 0) {
      f1_0 = ev.aggregate.f1;
      iou_0 = ev.aggregate.iou;
      params_0 = params;
    }
    csv << presets[k] << ',' << flags_string(cfg.model.flags) << ',' << ev.aggregate.f1 << ',' << ev.aggregate.iou
        << ',' << params << ',' << sec_per_iter << ',' << ev.aggregate.f1 - f1_0 << ',' << ev.aggregate.iou - iou_0
        << ',' << params - params_0 << '\n';
  }
  if (!a.out_dir.empty()) write_file(std::filesystem::path(a.out_dir) / "ablation.csv", csv.str());
  io.out << csv.str();
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonArgs& c) {
  cmd->add_option("--config", c.config, "key = value settings file");
  cmd->add_option("--set", c.sets, "override one setting, key=value (repeatable)");
}

/// Registers `--name` as a shortcut for setting `key`.
void add_setting_flag(CLI::App* cmd, std::map<std::string, std::string>& flags, const std::string& name,
                      const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>("--" + name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SAAN change detection: synthetic data, training, evaluation and attention inspection", "saan"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic bi-temporal dataset and manifest");
  gen_cmd->add_option("--out", gen.out, "dataset root directory")->required();
  add_common(gen_cmd, gen.common);
  add_setting_flag(gen_cmd, gen.flags, "seed", "seed", "generator seed");
  add_setting_flag(gen_cmd, gen.flags, "size", "size", "image side in pixels");
  add_setting_flag(gen_cmd, gen.flags, "train", "train", "train pairs");
  add_setting_flag(gen_cmd, gen.flags, "val", "val", "validation pairs");
  add_setting_flag(gen_cmd, gen.flags, "test", "test", "test pairs");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest's train split");
  train_cmd->add_option("--manifest", tr.manifest, "dataset manifest")->required();
  train_cmd->add_option("--out-dir", tr.out_dir, "directory for best.ckpt, log.csv and run.log")->required();
  add_common(train_cmd, tr.common);
  add_setting_flag(train_cmd, tr.flags, "seed", "seed", "training seed");
  add_setting_flag(train_cmd, tr.flags, "epochs", "max_epochs", "epoch cap");
  add_setting_flag(train_cmd, tr.flags, "batch-size", "batch_size", "minibatch size");
  add_setting_flag(train_cmd, tr.flags, "lr", "lr0", "initial learning rate");
  add_setting_flag(train_cmd, tr.flags, "max-seconds", "max_seconds", "wall-clock budget");
  add_setting_flag(train_cmd, tr.flags, "target", "target_metric", "stop once validation reaches this");
  add_setting_flag(train_cmd, tr.flags, "preset", "preset", "ablation preset (opt-a ... full)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint (or saved predictions) on a split; JSON to stdout");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file");
  eval_cmd->add_option("--pred-dir", ev.pred_dir, "directory of <index>.pgm predictions to score instead");
  eval_cmd->add_option("--manifest", ev.manifest, "dataset manifest")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--threshold", ev.threshold, "probability cut")->capture_default_str();
  eval_cmd->add_option("--batch-size", ev.batch_size, "inference batch size")->capture_default_str();
  eval_cmd->add_option("--tiles", ev.tiles, "write per-tile metrics CSV here");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "write change maps as PGM");
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "checkpoint file")->required();
  predict_cmd->add_option("--t1", pr.t1, "first image (PPM/PGM)");
  predict_cmd->add_option("--t2", pr.t2, "second image (PPM/PGM)");
  predict_cmd->add_option("--out", pr.out, "output PGM");
  predict_cmd->add_option("--manifest", pr.manifest, "predict a whole split instead");
  predict_cmd->add_option("--split", pr.split, "split for --manifest")->capture_default_str();
  predict_cmd->add_option("--out-dir", pr.out_dir, "output directory for --manifest");
  predict_cmd->add_option("--threshold", pr.threshold, "probability cut")->capture_default_str();
  predict_cmd->add_option("--batch-size", pr.batch_size, "inference batch size")->capture_default_str();
  predict_cmd->add_flag("--probabilities", pr.probabilities, "write sigmoid probabilities instead of a binary map");

  InspectArgs in;
  auto* inspect_cmd = app.add_subcommand("inspect-attn", "export per-stage Sim, DSA and spatial attention maps");
  inspect_cmd->add_option("--checkpoint", in.checkpoint, "checkpoint file")->required();
  inspect_cmd->add_option("--t1", in.t1, "first image")->required();
  inspect_cmd->add_option("--t2", in.t2, "second image")->required();
  inspect_cmd->add_option("--out-dir", in.out_dir, "output directory")->required();

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and score a list of ablation presets; CSV to stdout");
  ablate_cmd->add_option("--manifest", ab.manifest, "dataset manifest")->required();
  ablate_cmd->add_option("--out-dir", ab.out_dir, "keep per-variant checkpoints and ablation.csv here");
  ablate_cmd->add_option("--presets", ab.presets, "comma-separated presets, or 'all'")->capture_default_str();
  add_common(ablate_cmd, ab.common);
  add_setting_flag(ablate_cmd, ab.flags, "seed", "seed", "training seed");
  add_setting_flag(ablate_cmd, ab.flags, "epochs", "max_epochs", "epoch cap per variant");
  add_setting_flag(ablate_cmd, ab.flags, "max-seconds", "max_seconds", "wall-clock budget per variant");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const Streams io{out, err};
  try {
    if (*gen_cmd) return run_gen_data(gen, io);
    if (*train_cmd) return run_train(tr, io);
    if (*eval_cmd) return run_eval(ev, io);
    if (*predict_cmd) return run_predict(pr, io);
    if (*inspect_cmd) return run_inspect(in, io);
    if (*ablate_cmd) return run_ablate(ab, io);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace saan
