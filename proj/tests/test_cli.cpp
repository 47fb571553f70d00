#include <doctest.h>

#include <filesystem>
#include <json.hpp>
#include <sstream>

#include "saan/cli.hpp"
#include "saan/common.hpp"
#include "saan/pnm.hpp"

using namespace saan;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = dispatch(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "saan_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Small dataset shared by the tests that need one.
const fs::path& dataset() {
  static const fs::path root = [] {
    const auto dir = scratch("data");
    const auto r = run({"gen-data", "--out", dir.string(), "--seed", "3", "--size", "32", "--train", "12", "--val",
                        "4", "--test", "4"});
    REQUIRE(r.code == 0);
    return dir;
  }();
  return root;
}

const std::vector<std::string> kTiny{"--set", "stage_channels=8,16", "--set", "blocks_per_stage=1", "--batch-size",
                                     "4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run({}).code == 1);
  const auto bogus = run({"frobnicate"});
  CHECK(bogus.code == 1);
  CHECK(bogus.out.empty());
  CHECK_FALSE(bogus.err.empty());
  CHECK(run({"gen-data", "--out", "/tmp/x", "--colour", "red"}).code == 1);
  CHECK(run({"gen-data"}).code == 1);
  const auto key = run({"gen-data", "--out", scratch("badkey").string(), "--set", "sizes=32"});
  CHECK(key.code == 1);
  CHECK(key.err.find("unknown setting 'sizes'") != std::string::npos);
  CHECK(key.err.find("size") != std::string::npos);
  CHECK(run({"gen-data", "--out", scratch("badval").string(), "--set", "size=abc"}).code == 1);
  CHECK(run({"gen-data", "--out", scratch("badset").string(), "--set", "size"}).code == 1);
  CHECK(run({"train", "--manifest", "m", "--out-dir", "o", "--preset", "opt-q"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("config files: parsing, unknown keys, command-line precedence") {
  const auto cfg = parse_config_text("# comment\nsize = 32\n\n seed=9 \n");
  CHECK(cfg.at("size") == "32");
  CHECK(cfg.at("seed") == "9");
  CHECK_THROWS_AS(parse_config_text("size 32\n"), UsageError);
  CHECK_THROWS_AS(parse_config_text("size = 32\nsize = 64\n"), UsageError);

  const auto dir = scratch("config");
  write_file(dir / "bad.cfg", "size = 32\nbrightnes_jitter = 0.1\n");
  const auto bad = run({"gen-data", "--out", (dir / "a").string(), "--config", (dir / "bad.cfg").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("brightnes_jitter") != std::string::npos);

  write_file(dir / "good.cfg", "size = 64\ntrain = 2\nval = 1\ntest = 1\nseed = 5\n");
  const auto good = run({"gen-data", "--out", (dir / "b").string(), "--config", (dir / "good.cfg").string(), "--size",
                         "32"});
  REQUIRE(good.code == 0);
  CHECK(read_image(dir / "b" / "t1" / "0.ppm").shape() == Shape{3, 32, 32});
  // reproducibility header precedes the result and echoes the effective config
  CHECK(good.err.rfind("# saan", 0) == 0);
  CHECK(good.err.find("\"size\":32") != std::string::npos);
  const auto summary = nlohmann::json::parse(good.out);
  CHECK(summary.at("pairs") == 4);
  CHECK(run({"gen-data", "--out", (dir / "c").string(), "--config", (dir / "missing.cfg").string()}).code == 2);
}

TEST_CASE("gen-data is byte-reproducible") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  for (const auto& dir : {a, b})
    REQUIRE(run({"gen-data", "--out", dir.string(), "--seed", "7", "--size", "32", "--train", "4", "--val", "2",
                 "--test", "2"})
                .code == 0);
  Index files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    CHECK(read_file(e.path()) == read_file(b / fs::relative(e.path(), a)));
  }
  CHECK(files == 8 * 3 + 1);
}

TEST_CASE("eval on the perfect-oracle fixture reports f1 = 1") {
  const auto pred = scratch("oracle");
  const auto manifest = dataset() / "manifest.txt";
  for (const auto& e : fs::directory_iterator(dataset() / "mask")) fs::copy_file(e.path(), pred / e.path().filename());
  const auto r = run({"eval", "--manifest", manifest.string(), "--pred-dir", pred.string(), "--split", "test"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("f1").get<double>() == 1.0);
  CHECK(j.at("iou").get<double>() == 1.0);
  CHECK(j.at("tp").get<std::int64_t>() + j.at("fp").get<std::int64_t>() + j.at("fn").get<std::int64_t>() +
            j.at("tn").get<std::int64_t>() ==
        4 * 32 * 32);
  CHECK(run({"eval", "--manifest", manifest.string()}).code == 1);
  CHECK(run({"eval", "--manifest", (pred / "none.txt").string(), "--pred-dir", pred.string()}).code == 2);
}

TEST_CASE("train, eval, predict, inspect-attn on a tiny model") {
  const auto manifest = (dataset() / "manifest.txt").string();
  const auto out = scratch("train");
  const auto tr = run(with({"train", "--manifest", manifest, "--out-dir", out.string(), "--epochs", "2", "--seed", "4"},
                           kTiny));
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(out / "best.ckpt"));
  CHECK(fs::exists(out / "run.log"));
  const std::string log = read_file(out / "log.csv");
  CHECK(log.rfind("epoch,lr,loss,l_seg,l_con,l_aux,val_f1,val_iou\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
  CHECK(read_file(out / "run.log").rfind("# saan", 0) == 0);
  CHECK(nlohmann::json::parse(tr.out).contains("best_val_f1"));
  const auto ckpt = (out / "best.ckpt").string();

  const auto ev = run({"eval", "--manifest", manifest, "--checkpoint", ckpt, "--split", "val", "--tiles",
                       (out / "tiles.csv").string()});
  REQUIRE(ev.code == 0);
  const auto report = nlohmann::json::parse(ev.out);
  CHECK(report.at("f1").get<double>() >= 0.0);
  const std::string tiles = read_file(out / "tiles.csv");
  CHECK(std::count(tiles.begin(), tiles.end(), '\n') == 5);

  // whole-split prediction does not depend on the batch size
  const auto p1 = out / "pred1", p3 = out / "pred3";
  REQUIRE(run({"predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "test", "--out-dir", p1.string(),
               "--batch-size", "1", "--probabilities"})
              .code == 0);
  REQUIRE(run({"predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "test", "--out-dir", p3.string(),
               "--batch-size", "3", "--probabilities"})
              .code == 0);
  Index compared = 0;
  for (const auto& e : fs::directory_iterator(p1)) {
    CHECK(read_file(e.path()) == read_file(p3 / e.path().filename()));
    ++compared;
  }
  CHECK(compared == 4);

  // binary maps scored through --pred-dir agree with checkpoint evaluation
  const auto pb = out / "pred_bin";
  REQUIRE(run({"predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "test", "--out-dir", pb.string()})
              .code == 0);
  const auto via_files = nlohmann::json::parse(
      run({"eval", "--manifest", manifest, "--pred-dir", pb.string(), "--split", "test"}).out);
  const auto via_model = nlohmann::json::parse(run({"eval", "--manifest", manifest, "--checkpoint", ckpt}).out);
  CHECK(via_files.at("tp") == via_model.at("tp"));
  CHECK(via_files.at("fp") == via_model.at("fp"));

  // single pair
  const auto t1 = (dataset() / "t1" / "16.ppm").string(), t2 = (dataset() / "t2" / "16.ppm").string();
  const auto single = out / "single.pgm";
  REQUIRE(run({"predict", "--checkpoint", ckpt, "--t1", t1, "--t2", t2, "--out", single.string()}).code == 0);
  CHECK(read_file(single) == read_file(pb / "16.pgm"));
  CHECK(run({"predict", "--checkpoint", ckpt, "--t1", t1}).code == 1);

  const auto attn = out / "attn";
  REQUIRE(run({"inspect-attn", "--checkpoint", ckpt, "--t1", t1, "--t2", t2, "--out-dir", attn.string()}).code == 0);
  Index images = 0;
  for (const auto& e : fs::directory_iterator(attn)) images += e.path().extension() == ".pgm";
  CHECK(images == 2 * 3);
  CHECK(fs::exists(attn / "manifest.txt"));

  write_file(out / "broken.ckpt", "SAANCKPT");
  CHECK(run({"eval", "--manifest", manifest, "--checkpoint", (out / "broken.ckpt").string()}).code == 2);
}

TEST_CASE("ablate reports one row per preset") {
  const auto manifest = (dataset() / "manifest.txt").string();
  const auto out = scratch("ablate");
  const auto r = run({"ablate", "--manifest", manifest, "--out-dir", out.string(), "--presets", "opt-a,opt-d,full",
                      "--epochs", "1", "--set", "stage_channels=8,16", "--set", "blocks_per_stage=1"});
  REQUIRE(r.code == 0);
  std::istringstream csv(r.out);
  std::string header, line;
  std::getline(csv, header);
  CHECK(header == "variant,flags,f1,iou,params,sec_per_iter,delta_f1,delta_iou,delta_params");
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].rfind("opt-a,", 0) == 0);
  CHECK(rows[1].rfind("opt-d,", 0) == 0);
  CHECK(rows[2].rfind("full,", 0) == 0);
  CHECK(read_file(out / "ablation.csv") == r.out);
  CHECK(run({"ablate", "--manifest", manifest, "--presets", "opt-a,bogus"}).code == 1);
}
