#include <json.hpp>

#include <cstring>
#include <map>
#include <set>

#include "saan/pnm.hpp"
#include "saan/trainer.hpp"

namespace saan {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'A', 'A', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr const char* kMetaName = "meta.json";

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001B3ull;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

struct Named {
  std::string name;
  Tensor<float> value;
};

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (Index d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    const float v = t[i];
    std::memcpy(&bits, &v, 4);
    put<std::uint32_t>(out, bits);
  }
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& what) : bytes_(bytes), end_(end), what_(what) {}

  bool has(std::size_t n) const { return pos_ + n <= end_; }
  std::size_t remaining() const { return end_ - pos_; }

  template <typename T>
  T get() {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  /// nullopt on truncation; `partial` holds the name if it was readable.
  std::optional<Named> tensor(std::string& partial) {
    partial.clear();
    if (!has(2)) return std::nullopt;
    const auto len = get<std::uint16_t>();
    if (!has(len)) return std::nullopt;
    partial = bytes_.substr(pos_, len);
    pos_ += len;
    if (!has(1)) return std::nullopt;
    const auto ndim = get<std::uint8_t>();
    if (!has(4u * ndim)) return std::nullopt;
    Shape shape;
    for (int d = 0; d < ndim; ++d) {
      const auto v = get<std::uint32_t>();
      if (v == 0) throw FormatError(what_ + ": tensor '" + partial + "' has a zero dimension");
      shape.push_back(static_cast<Index>(v));
    }
    const Index n = numel(shape);
    if (!has(4 * static_cast<std::size_t>(n))) return std::nullopt;
    Tensor<float> t(shape);
    for (Index i = 0; i < n; ++i) {
      const auto bits = get<std::uint32_t>();
      float v;
      std::memcpy(&v, &bits, 4);
      t[i] = v;
    }
    return Named{partial, std::move(t)};
  }

  std::size_t pos_ = 0;

 private:
  const std::string& bytes_;
  std::size_t end_;
  const std::string& what_;
};

Tensor<float> bytes_tensor(const std::string& text) {
  Tensor<float> t(Shape{static_cast<Index>(std::max<std::size_t>(text.size(), 1))});
  for (std::size_t i = 0; i < text.size(); ++i) t[static_cast<Index>(i)] = static_cast<unsigned char>(text[i]);
  return t;
}

std::string tensor_bytes(const Tensor<float>& t) {
  std::string s;
  for (Index i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (!(v >= 0 && v <= 255) || v != std::floor(v)) throw FormatError("checkpoint metadata is not a byte string");
    if (v != 0 || i + 1 < t.size()) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

/// Expected tensor names for a model, in file order (metadata excluded).
std::vector<std::string> state_names(const SaanModel<float>& model) {
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) names.push_back(p.name);
  for (const auto& b : model.buffers()) {
    names.push_back(b.name + ".running_mean");
    names.push_back(b.name + ".running_var");
  }
  return names;
}

json model_json(const ModelConfig& c) {
  return json{{"encoder",
               {{"stage_channels", c.encoder.stage_channels},
                {"blocks_per_stage", c.encoder.blocks_per_stage},
                {"input_channels", c.encoder.input_channels},
                {"variant", c.encoder.variant == EncoderVariant::mini ? "mini" : "resnet18"}}},
              {"flags",
               {{"sim_loss", c.flags.sim_loss},
                {"deep_supervision", c.flags.deep_supervision},
                {"sca", c.flags.sca},
                {"ssa", c.flags.ssa},
                {"flow", c.flags.flow}}},
              {"constant_first_flow", c.constant_first_flow},
              {"channel_attention_on_raw", c.channel_attention_on_raw},
              {"mlp_reduction", c.mlp_reduction},
              {"mlp_min_hidden", c.mlp_min_hidden}};
}

ModelConfig model_from(const json& j) {
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.encoder.stage_channels = e.at("stage_channels").get<std::vector<Index>>();
  c.encoder.blocks_per_stage = e.at("blocks_per_stage").get<int>();
  c.encoder.input_channels = e.at("input_channels").get<Index>();
  const auto variant = e.at("variant").get<std::string>();
  if (variant != "mini" && variant != "resnet18") throw FormatError("unknown encoder variant '" + variant + "'");
  c.encoder.variant = variant == "mini" ? EncoderVariant::mini : EncoderVariant::resnet18;
  const auto& f = j.at("flags");
  c.flags = {f.at("sim_loss").get<bool>(), f.at("deep_supervision").get<bool>(), f.at("sca").get<bool>(),
             f.at("ssa").get<bool>(), f.at("flow").get<bool>()};
  c.constant_first_flow = j.at("constant_first_flow").get<bool>();
  c.channel_attention_on_raw = j.at("channel_attention_on_raw").get<bool>();
  c.mlp_reduction = j.at("mlp_reduction").get<Index>();
  c.mlp_min_hidden = j.at("mlp_min_hidden").get<Index>();
  c.validate();
  return c;
}

struct ParsedFile {
  CheckpointMeta meta;
  std::map<std::string, Tensor<float>> tensors;
};

ParsedFile parse(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError(what + ": bad magic (not a SAANCKPT checkpoint)");
  Reader r(bytes, bytes.size(), what);
  r.pos_ = 8;
  if (!r.has(8)) throw FormatError(what + ": truncated header");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw FormatError(what + ": checkpoint format version " + std::to_string(version) + ", expected " +
                      std::to_string(kFormatVersion));
  const auto count = r.get<std::uint32_t>();

  ParsedFile out;
  std::vector<std::string> expected;  // known once the metadata is read
  std::string partial;
  for (std::uint32_t k = 0; k < count; ++k) {
    auto t = r.tensor(partial);
    if (!t) {
      std::string name = !partial.empty()                ? partial
                         : k == 0                        ? std::string(kMetaName)
                         : k - 1 < expected.size()       ? expected[k - 1]
                                                         : "#" + std::to_string(k);
      throw FormatError(what + ": truncated; tensor '" + name + "' missing or incomplete (" + std::to_string(k) +
                        " of " + std::to_string(count) + " tensors read)");
    }
    if (k == 0) {
      if (t->name != kMetaName) throw FormatError(what + ": first tensor must be " + kMetaName);
      try {
        const json j = json::parse(tensor_bytes(t->value));
        out.meta.version = version;
        out.meta.model = model_from(j.at("model"));
        out.meta.train_config = j.at("train_config").dump();
        out.meta.epoch = j.at("epoch").get<int>();
        out.meta.best_val_metric = j.at("best_val_metric").get<double>();
        out.meta.rng_state = j.at("rng_state").get<std::array<std::uint64_t, 4>>();
        out.meta.adam_step = j.at("adam_step").get<std::int64_t>();
      } catch (const json::exception& e) {
        throw FormatError(what + ": bad metadata: " + e.what());
      }
      expected = state_names(SaanModel<float>(out.meta.model));
      continue;
    }
    if (!out.tensors.emplace(t->name, std::move(t->value)).second)
      throw FormatError(what + ": duplicate tensor '" + t->name + "'");
  }
  if (r.remaining() != 8)
    throw FormatError(what + (r.remaining() < 8 ? ": truncated; checksum missing" : ": trailing bytes after checksum"));
  const std::size_t body = r.pos_;
  if (r.get<std::uint64_t>() != fnv1a(bytes.data(), body)) throw FormatError(what + ": checksum mismatch");
  return out;
}

std::string join(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

}  // namespace

std::string to_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad model config JSON: ") + e.what());
  }
}

std::string to_json(const TrainConfig& c) {
  json j{{"lr0", c.lr0},
         {"weight_decay", c.weight_decay},
         {"decoupled_weight_decay", c.adam.decoupled_weight_decay},
         {"beta1", c.adam.beta1},
         {"beta2", c.adam.beta2},
         {"adam_eps", c.adam.eps},
         {"batch_size", c.batch_size},
         {"plateau_patience", c.plateau_patience},
         {"plateau_factor", c.plateau_factor},
         {"min_lr", c.min_lr},
         {"improvement_tol", c.improvement_tol},
         {"max_epochs", c.max_epochs},
         {"max_seconds", c.max_seconds},
         {"target_metric", c.target_metric},
         {"augment", c.augment},
         {"validation_metric", c.validation_metric == ValidationMetric::f1 ? "f1" : "accuracy"},
         {"seed", c.seed},
         {"w", c.loss.w},
         {"dice_smooth", c.loss.dice_smooth},
         {"threshold", c.loss.prediction_threshold},
         {"margin", c.contrastive.margin},
         {"sqrt_eps", c.contrastive.sqrt_eps},
         {"model", model_json(c.model)}};
  return j.dump();
}

void save_checkpoint(const std::filesystem::path& path, const SaanModel<float>& model, const CheckpointMeta& meta,
                     const AdamState<float>* adam) {
  json train_config = meta.train_config.empty() ? json::object() : json::parse(meta.train_config);
  const json j{{"model", model_json(model.config())},
               {"train_config", train_config},
               {"epoch", meta.epoch},
               {"best_val_metric", meta.best_val_metric},
               {"rng_state", meta.rng_state},
               {"adam_step", adam ? adam->step : meta.adam_step}};

  std::vector<std::pair<std::string, const Tensor<float>*>> items;
  const Tensor<float> meta_tensor = bytes_tensor(j.dump());
  items.emplace_back(kMetaName, &meta_tensor);
  for (const auto& p : model.parameters()) items.emplace_back(p.name, &p.value);
  for (const auto& b : model.buffers()) {
    items.emplace_back(b.name + ".running_mean", &b.state.running_mean);
    items.emplace_back(b.name + ".running_var", &b.state.running_var);
  }
  if (adam && !adam->m.empty()) {
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      items.emplace_back("adam.m." + model.parameters()[i].name, &adam->m[i]);
      items.emplace_back("adam.v." + model.parameters()[i].name, &adam->v[i]);
    }
  }

  std::string out(kMagic, 8);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) put_tensor(out, name, *t);
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
  // write-then-rename so a crash never leaves a half-written best checkpoint
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, out);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

namespace {

CheckpointMeta install(const ParsedFile& file, const std::string& what, SaanModel<float>& model,
                       AdamState<float>* adam) {
  const auto names = state_names(model);
  std::set<std::string> wanted(names.begin(), names.end()), found;
  std::vector<std::string> unexpected, missing;
  for (const auto& [name, t] : file.tensors) {
    if (name.rfind("adam.", 0) == 0) continue;
    if (wanted.count(name))
      found.insert(name);
    else
      unexpected.push_back(name);
  }
  for (const auto& n : names)
    if (!found.count(n)) missing.push_back(n);
  if (!unexpected.empty() || !missing.empty()) {
    std::string msg = what + ": checkpoint does not match the model configuration";
    if (!unexpected.empty()) msg += "; unexpected parameters: " + join(unexpected);
    if (!missing.empty()) msg += "; missing parameters: " + join(missing);
    throw FormatError(msg);
  }
  auto assign = [&](const std::string& name, Tensor<float>& dst) {
    const Tensor<float>& src = file.tensors.at(name);
    if (src.shape() != dst.shape())
      throw FormatError(what + ": tensor '" + name + "' has shape " + to_string(src.shape()) + ", model expects " +
                        to_string(dst.shape()));
    dst = src;
  };
  for (auto& p : model.parameters()) assign(p.name, p.value);
  for (auto& b : model.buffers()) {
    assign(b.name + ".running_mean", b.state.running_mean);
    assign(b.name + ".running_var", b.state.running_var);
  }
  if (adam) {
    adam->m.clear();
    adam->v.clear();
    adam->step = 0;
    if (file.tensors.count("adam.m." + model.parameters().front().name)) {
      for (const auto& p : model.parameters()) {
        adam->m.emplace_back(p.value.shape());
        adam->v.emplace_back(p.value.shape());
        assign("adam.m." + p.name, adam->m.back());
        assign("adam.v." + p.name, adam->v.back());
      }
      adam->step = file.meta.adam_step;
    }
  }
  return file.meta;
}

}  // namespace

CheckpointMeta load_checkpoint_into(const std::filesystem::path& path, SaanModel<float>& model,
                                    AdamState<float>* adam) {
  return install(parse(path), path.string(), model, adam);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const ParsedFile file = parse(path);
  LoadedCheckpoint out{file.meta, SaanModel<float>(file.meta.model), std::nullopt};
  AdamState<float> adam;
  install(file, path.string(), out.model, &adam);
  if (!adam.m.empty()) out.adam = std::move(adam);
  return out;
}

}  // namespace saan
