#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "saan/pnm.hpp"
#include "saan/trainer.hpp"
#include "test_util.hpp"

using namespace saan;

namespace {

Dataset synthetic(std::uint64_t seed, Index count, Index first = 0) {
  SceneSpec spec;
  spec.size = 32;
  spec.min_extent = 6;
  spec.max_extent = 12;
  spec.seed = seed;
  Dataset d;
  for (Index i = 0; i < count; ++i) {
    d.samples.push_back(generate_pair(spec, static_cast<std::uint64_t>(first + i)));
    d.indices.push_back(first + i);
  }
  return d;
}

TrainConfig small_config(const std::string& preset = "full") {
  TrainConfig cfg;
  cfg.model.encoder.stage_channels = {8, 16};
  cfg.model.encoder.blocks_per_stage = 1;
  cfg.model.flags = AblationFlags::preset(preset);
  cfg.batch_size = 4;
  cfg.seed = 17;
  return cfg;
}

Parameter<double> scalar(double value, double grad) {
  return {"w", Component::head, Tensor<double>(Shape{1}, value), Tensor<double>(Shape{1}, grad)};
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "saan_test_trainer";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (Index i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

/// Batch of the first `n` samples as model input.
Batch first_batch(const Dataset& d, Index n) {
  std::vector<Index> pos;
  for (Index i = 0; i < n; ++i) pos.push_back(i);
  return make_batch(d, pos);
}

}  // namespace

TEST_CASE("adam_step examples") {
  std::vector<Parameter<double>> still{scalar(0.7, 0.0)};
  AdamState<double> state;
  for (int k = 0; k < 3; ++k) adam_step(still, state, 1e-3, 0.0);
  CHECK(still[0].value[0] == 0.7);
  CHECK(state.step == 3);

  for (double g : {1e-6, 0.3, -4.0, 250.0}) {
    std::vector<Parameter<double>> p{scalar(1.0, g)};
    AdamState<double> s;
    adam_step(p, s, 1e-3, 0.0);
    CHECK(std::abs(std::abs(p[0].value[0] - 1.0) - 1e-3) < 1e-5 * (1 + 1e-2 / std::abs(g)));
    CHECK((p[0].value[0] - 1.0) * g < 0);
  }

  // three steps against the textbook recursion
  const double grads[] = {0.5, -0.2, 0.8}, lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<Parameter<double>> p{scalar(0.3, 0.0)};
  AdamState<double> s;
  double w = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    p[0].grad[0] = grads[t - 1];
    adam_step(p, s, lr, wd);
    const double g = grads[t - 1] + wd * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(std::abs(p[0].value[0] - w) < 1e-10);
  }

  // decoupled variant shrinks the weight directly
  std::vector<Parameter<double>> d{scalar(2.0, 0.0)};
  AdamState<double> ds;
  AdamOptions decoupled;
  decoupled.decoupled_weight_decay = true;
  adam_step(d, ds, 0.1, 0.5, decoupled);
  CHECK(d[0].value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-14));

  std::vector<Parameter<double>> bad{scalar(1.0, std::nan(""))};
  bad[0].name = "decoder.stage0.head.weight";
  AdamState<double> bs;
  try {
    adam_step(bad, bs, 1e-3, 0.0);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("decoder.stage0.head.weight") != std::string::npos);
  }
  CHECK(bs.step == 0);
}

TEST_CASE("plateau_schedule examples and properties") {
  const auto rising = plateau_schedule({0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7}, 5e-4, 5, 1.0 / 3, 1e-7);
  CHECK(rising.lr == 5e-4);
  CHECK_FALSE(rising.stop);
  CHECK(rising.stale_epochs == 0);

  const auto flat = plateau_schedule({0.5, 0.5, 0.4, 0.5, 0.45, 0.5}, 5e-4, 5, 1.0 / 3, 1e-7);
  CHECK(flat.reduced);
  CHECK(flat.lr == doctest::Approx(1.6667e-4).epsilon(1e-4));
  CHECK_FALSE(flat.stop);
  // four stale epochs: not yet
  CHECK_FALSE(plateau_schedule({0.5, 0.5, 0.5, 0.5, 0.5}, 5e-4, 5, 1.0 / 3, 1e-7).reduced);
  // gains within the tolerance do not count as improvement
  CHECK(plateau_schedule({0.5, 0.5000005, 0.5000009, 0.5, 0.5, 0.5}, 5e-4, 5, 1.0 / 3, 1e-7).reduced);
  CHECK(plateau_schedule({0.5, 0.6}, 5e-4, 5, 1.0 / 3, 1e-7).stale_epochs == 0);

  // drive the rate below the floor
  double lr = 5e-4;
  std::vector<double> history{0.5};
  int reductions = 0;
  bool stopped = false;
  while (!stopped && history.size() < 200) {
    history.push_back(0.4);
    const auto d = plateau_schedule(history, lr, 5, 1.0 / 3, 1e-7);
    CHECK(d.lr <= lr);
    reductions += d.reduced;
    lr = d.lr;
    stopped = d.stop;
  }
  CHECK(stopped);
  CHECK(lr < 1e-7);
  CHECK(reductions == 8);  // 5e-4 / 3^8 < 1e-7 < 5e-4 / 3^7

  // random histories: rate never increases, stop implies below the floor
  Xoshiro256pp rng(3);
  for (int run = 0; run < 50; ++run) {
    std::vector<double> h;
    double rate = 1e-3;
    for (int e = 0; e < 60; ++e) {
      h.push_back(rng.uniform());
      const auto d = plateau_schedule(h, rate, 1 + run % 5, 0.5, 1e-5);
      CHECK(d.lr <= rate);
      if (d.stop) CHECK(d.lr < 1e-5);
      rate = d.lr;
    }
  }
  CHECK_THROWS_AS(plateau_schedule({}, 1e-3, 5, 0.5, 1e-7), ValueError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.plateau_factor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = TrainConfig{};
  cfg.min_lr = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = TrainConfig{};
  cfg.plateau_patience = 0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
}

TEST_CASE("fixed seed gives a bit-identical 10-step loss trace") {
  const auto train_set = synthetic(1, 24), val = synthetic(1, 4, 100);
  TrainHooks hooks;
  hooks.max_steps = 10;
  const auto a = train(small_config(), train_set, val, {}, hooks);
  const auto b = train(small_config(), train_set, val, {}, hooks);
  REQUIRE(a.steps.size() == 10);
  REQUIRE(b.steps.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(a.steps[i].total == b.steps[i].total);
    CHECK(a.steps[i].con == b.steps[i].con);
  }
  CHECK(a.log.at(0).loss == b.log.at(0).loss);
  CHECK(a.stop_reason == "max_steps reached");

  auto other = small_config();
  other.seed = 18;
  const auto c = train(other, train_set, val, {}, hooks);
  CHECK(c.steps[0].total != a.steps[0].total);
}

TEST_CASE("loss breakdown: Opt-A vs Opt-D and the weighted-sum identity") {
  const auto train_set = synthetic(2, 16), val = synthetic(2, 4, 100);
  TrainHooks hooks;
  hooks.max_steps = 4;
  const auto a = train(small_config("opt-a"), train_set, val, {}, hooks);
  const auto d = train(small_config("opt-d"), train_set, val, {}, hooks);
  for (const auto& s : a.steps) {
    CHECK(s.con == 0.0);
    CHECK(s.aux == 0.0);
    CHECK(s.total == s.seg);
  }
  for (const auto& s : d.steps) {
    CHECK(s.con > 0.0);
    CHECK(s.aux > 0.0);
    CHECK(std::abs(s.total - (s.seg + 0.3 * s.con + 0.3 * s.aux)) <= 1e-6);
  }
  CHECK(a.log[0].l_con == 0.0);
  CHECK(d.log[0].l_con > 0.0);
  CHECK(d.log[0].l_aux > 0.0);

  const std::string csv = epoch_log_csv(d.log);
  CHECK(csv.substr(0, csv.find('\n')) == "epoch,lr,loss,l_seg,l_con,l_aux,val_f1,val_iou");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(d.log.size()) + 1);
}

TEST_CASE("short training runs improve and keep a best checkpoint") {
  const auto train_set = synthetic(3, 32), val = synthetic(3, 8, 100);
  auto cfg = small_config();
  cfg.max_epochs = 4;
  cfg.lr0 = 2e-3;
  const auto path = temp_path("short.ckpt");
  std::filesystem::remove(path);
  const auto r = train(cfg, train_set, val, path);
  CHECK(r.log.size() == 4);
  CHECK(r.stop_reason == "max_epochs reached");
  CHECK(std::filesystem::exists(path));
  CHECK(r.log.back().loss < r.log.front().loss);
  double best = 0;
  for (const auto& e : r.log) best = std::max(best, e.val_f1);
  CHECK(r.best_meta.best_val_metric == best);
  for (std::size_t i = 1; i < r.log.size(); ++i) CHECK(r.log[i].lr <= r.log[i - 1].lr);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.meta.epoch == r.best_meta.epoch);
  CHECK(loaded.meta.best_val_metric == doctest::Approx(best));
  CHECK(evaluate(loaded.model, val).aggregate.f1 == doctest::Approx(best).epsilon(1e-12));

  auto target = cfg;
  target.target_metric = 1e-9;
  CHECK(train(target, train_set, val).stop_reason == "target validation metric reached");
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto data = synthetic(4, 8);
  TrainHooks hooks;
  hooks.max_steps = 2;
  auto r = train(small_config(), data, data, {}, hooks);

  SaanModel<float> model = r.best;
  AdamState<float> adam;
  for (auto& p : model.parameters()) p.grad.values() = p.value.values() * 0.01f;
  adam_step(model.parameters(), adam, 1e-3, 1e-5);
  for (auto& b : model.buffers()) b.state.running_mean.values() += 0.25f;

  CheckpointMeta meta;
  meta.model = model.config();
  meta.epoch = 3;
  meta.best_val_metric = 0.625;
  meta.rng_state = {1, 2, 3, 0xFFFFFFFFFFFFFFFFull};
  meta.adam_step = adam.step;
  meta.train_config = to_json(small_config());
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, model, meta, &adam);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.meta.epoch == 3);
  CHECK(loaded.meta.best_val_metric == 0.625);
  CHECK(loaded.meta.rng_state == meta.rng_state);
  CHECK(loaded.meta.train_config == meta.train_config);
  REQUIRE(loaded.adam.has_value());
  CHECK(loaded.adam->step == adam.step);
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    CHECK(bit_equal(loaded.adam->m[i], adam.m[i]));
    CHECK(bit_equal(loaded.adam->v[i], adam.v[i]));
  }
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    CHECK(bit_equal(loaded.model.parameters()[i].value, model.parameters()[i].value));
  const auto batch = first_batch(data, 4);
  CHECK(bit_equal(loaded.model.predict_logits(batch.t1, batch.t2), model.predict_logits(batch.t1, batch.t2)));

  // header layout
  const std::string bytes = read_file(path);
  CHECK(bytes.substr(0, 8) == "SAANCKPT");
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);
  CHECK(bytes[9] == 0);
  CHECK(bytes[10] == 0);
  CHECK(bytes[11] == 0);

  // into an existing model of the same config
  SaanModel<float> fresh(model.config(), 999);
  AdamState<float> fresh_adam;
  load_checkpoint_into(path, fresh, &fresh_adam);
  CHECK(bit_equal(fresh.predict_logits(batch.t1, batch.t2), model.predict_logits(batch.t1, batch.t2)));
  CHECK(fresh_adam.step == adam.step);
}

TEST_CASE("checkpoint errors") {
  const auto cfg = small_config();
  SaanModel<float> model(cfg.model, 5);
  CheckpointMeta meta;
  meta.model = cfg.model;
  const auto path = temp_path("errors.ckpt");
  save_checkpoint(path, model, meta);
  const std::string bytes = read_file(path);

  const auto cut = temp_path("cut.ckpt");
  write_file(cut, bytes.substr(0, bytes.size() / 2));
  try {
    load_checkpoint(cut);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("tensor '") != std::string::npos);
    MESSAGE(msg);
  }
  write_file(cut, bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(cut), FormatError);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x10);
  write_file(cut, flipped);
  CHECK_THROWS_WITH_AS(load_checkpoint(cut), doctest::Contains("checksum"), FormatError);

  std::string magic = bytes;
  magic[0] = 'X';
  write_file(cut, magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(cut), doctest::Contains("magic"), FormatError);

  std::string version = bytes;
  version[8] = 7;
  write_file(cut, version);
  CHECK_THROWS_WITH_AS(load_checkpoint(cut), doctest::Contains("version"), FormatError);

  // SCA checkpoint into a model without SCA
  ModelConfig no_sca = cfg.model;
  no_sca.flags.sca = false;
  SaanModel<float> other(no_sca, 5);
  try {
    load_checkpoint_into(path, other);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("unexpected parameters") != std::string::npos);
    CHECK(msg.find("decoder.stage0.sca.dsa_conv.weight") != std::string::npos);
  }

  ModelConfig wider = cfg.model;
  wider.encoder.stage_channels = {8, 32};
  SaanModel<float> mismatched(wider, 5);
  CHECK_THROWS_WITH_AS(load_checkpoint_into(path, mismatched), doctest::Contains("shape"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("absent.ckpt")), FormatError);
}

TEST_CASE("evaluate: per-tile counts sum to the aggregate and repeat exactly") {
  const auto data = synthetic(6, 10);
  SaanModel<float> model(small_config().model, 8);
  const auto r = evaluate(model, data, 3);
  REQUIRE(r.tiles.size() == 10);
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& t : r.tiles) {
    tp += t.tp;
    fp += t.fp;
    fn += t.fn;
    tn += t.tn;
    CHECK(t.total() == 32 * 32);
  }
  CHECK(tp == r.aggregate.tp);
  CHECK(fp == r.aggregate.fp);
  CHECK(fn == r.aggregate.fn);
  CHECK(tn == r.aggregate.tn);
  CHECK(r.aggregate.f1 >= 0.0);
  CHECK(r.aggregate.f1 <= 1.0);
  const auto again = evaluate(model, data, 7);
  CHECK(again.aggregate.tp == r.aggregate.tp);
  CHECK(again.aggregate.fp == r.aggregate.fp);

  const auto logits = predict_split(model, data, 4);
  REQUIRE(logits.size() == 10);
  CHECK(logits[0].shape() == Shape{1, 32, 32});
  const auto sep = distance_separation(model, data, 4);
  CHECK(sep.changed_pixels + sep.unchanged_pixels == 10 * 8 * 8);
}

TEST_CASE("margin dead zone: changed pixels beyond the margin pass no gradient") {
  const auto data = synthetic(7, 8);
  TrainHooks hooks;
  hooks.max_steps = 3;
  const auto r = train(small_config(), data, data, {}, hooks);
  const auto batch = first_batch(data, 8);

  ContrastiveConfig cfg;
  cfg.margin = 0.3;  // small margin so that some changed pixels sit beyond it
  Tape<float> tape;
  const auto bound = r.best.bind(tape, true);
  const auto fwd = r.best.forward(tape, bound, batch.t1, batch.t2);
  const Index factor = batch.t1.dim(2) / fwd.deep_t1.shape()[2];
  const auto coarse = downsample_labels(batch.mask, factor);
  const auto loss = contrastive_loss(fwd.deep_t1, fwd.deep_t2, coarse, cfg);
  tape.backward(loss);
  const auto d = cosine_distance_map(fwd.deep_t1, fwd.deep_t2).value();
  const auto g1 = fwd.deep_t1.grad(), g2 = fwd.deep_t2.grad();
  const Index n = d.dim(0), c = fwd.deep_t1.shape()[1], hw = d.dim(2) * d.dim(3);
  Index dead = 0, live = 0;
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < hw; ++p) {
      double mag = 0;
      for (Index k = 0; k < c; ++k)
        mag += std::abs(g1[(i * c + k) * hw + p]) + std::abs(g2[(i * c + k) * hw + p]);
      if (coarse[i * hw + p] > 0.5 && d[i * hw + p] >= cfg.margin) {
        ++dead;
        CHECK(mag == 0.0);
      } else if (coarse[i * hw + p] < 0.5 && d[i * hw + p] > 1e-3) {
        live += mag > 0 ? 1 : 0;
      }
    }
  MESSAGE("dead-zone pixels checked: " << dead << ", live unchanged pixels: " << live);
  CHECK(dead > 0);
  CHECK(live > 0);
}
