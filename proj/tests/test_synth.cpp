#include <doctest.h>

#include <filesystem>
#include <set>

#include "saan/pnm.hpp"
#include "saan/synth.hpp"

using namespace saan;

namespace {

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (Index i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

SceneSpec still_spec() {
  SceneSpec spec;
  spec.brightness_jitter = spec.gain_jitter = spec.noise_sigma = 0;
  spec.p_add = spec.p_remove = 0;
  spec.p_keep = 1;
  return spec;
}

/// Independent re-rasterization: pixel centers inside the shape.
bool covers(const SceneObject& o, Index r, Index c) {
  const double px = static_cast<double>(c) + 0.5, py = static_cast<double>(r) + 0.5;
  if (o.kind == ObjectKind::rectangle)
    return px > static_cast<double>(o.x) && px < static_cast<double>(o.x + o.width) && py > static_cast<double>(o.y) &&
           py < static_cast<double>(o.y + o.height);
  const double cx = static_cast<double>(o.x) + static_cast<double>(o.width) / 2;
  const double cy = static_cast<double>(o.y) + static_cast<double>(o.height) / 2;
  const double ax = static_cast<double>(o.width) / 2, ay = static_cast<double>(o.height) / 2;
  const double u = (px - cx) / ax, v = (py - cy) / ay;
  return u * u + v * v <= 1.0;
}

std::string temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("generate_pair is deterministic and shaped") {
  SceneSpec spec;
  spec.seed = 42;
  const auto a = generate_pair(spec, 7), b = generate_pair(spec, 7);
  CHECK(bit_equal(a.t1, b.t1));
  CHECK(bit_equal(a.t2, b.t2));
  CHECK(bit_equal(a.mask, b.mask));
  CHECK(a.t1.shape() == Shape{3, 64, 64});
  CHECK(a.mask.shape() == Shape{1, 64, 64});
  CHECK((a.t1.values() >= 0.0f).all());
  CHECK((a.t2.values() <= 1.0f).all());
  CHECK(((a.mask.values() == 0.0f) || (a.mask.values() == 1.0f)).all());
  CHECK_FALSE(bit_equal(generate_pair(spec, 8).t1, a.t1));
  spec.seed = 43;
  CHECK_FALSE(bit_equal(generate_pair(spec, 7).t1, a.t1));
}

TEST_CASE("no jitter and no change gives identical images and an empty mask") {
  auto spec = still_spec();
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto p = generate_pair(spec, i);
    CHECK(bit_equal(p.t1, p.t2));
    CHECK((p.mask.values() == 0.0f).all());
  }
}

TEST_CASE("single added rectangle: mask is its raster") {
  auto spec = still_spec();
  spec.min_objects = spec.max_objects = 1;
  spec.ellipses = false;
  spec.p_keep = 0;
  spec.p_add = 1;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto scene = draw_scene(spec, i);
    REQUIRE(scene.objects.size() == 1);
    CHECK(scene.objects[0].change == ChangeKind::add);
    const auto p = render_scene(spec, scene);
    CHECK(bit_equal(p.mask, rasterize(scene.objects[0], 64)));
    Index count = 0;
    for (Index k = 0; k < p.mask.size(); ++k) count += p.mask[k] > 0 ? 1 : 0;
    CHECK(count == scene.objects[0].width * scene.objects[0].height);
  }
}

TEST_CASE("oracle: mask is the symmetric difference of the coverage maps") {
  SceneSpec spec;
  spec.seed = 5;
  for (std::uint64_t i = 0; i < 40; ++i) {
    const auto scene = draw_scene(spec, i);
    const auto p = generate_pair(spec, i);
    for (Index r = 0; r < 64; ++r)
      for (Index c = 0; c < 64; ++c) {
        bool in1 = false, in2 = false;
        for (const auto& o : scene.objects) {
          if (!covers(o, r, c)) continue;
          in1 = in1 || o.change != ChangeKind::add;
          in2 = in2 || o.change != ChangeKind::remove;
        }
        REQUIRE(p.mask[r * 64 + c] == ((in1 != in2) ? 1.0f : 0.0f));
      }
  }
}

TEST_CASE("photometric-only pairs have empty masks under heavy jitter") {
  auto spec = still_spec();
  spec.brightness_jitter = 0.5;
  spec.gain_jitter = 0.3;
  spec.noise_sigma = 0.2;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto p = generate_pair(spec, i);
    CHECK((p.mask.values() == 0.0f).all());
    CHECK_FALSE(bit_equal(p.t1, p.t2));
  }
}

TEST_CASE("spec validation") {
  SceneSpec spec;
  spec.size = 48;
  CHECK_THROWS_AS(spec.validate(4), ValueError);
  spec.size = 64;
  spec.p_add = 0.5;
  CHECK_THROWS_AS(spec.validate(4), ValueError);
  spec = SceneSpec{};
  spec.noise_sigma = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(spec.validate(4), ValueError);
  spec = SceneSpec{};
  spec.rectangles = spec.ellipses = false;
  CHECK_THROWS_AS(spec.validate(4), ValueError);
  CHECK_NOTHROW(SceneSpec{}.validate(4));
}

TEST_CASE("augment is exact and invertible") {
  SceneSpec spec;
  spec.seed = 3;
  const auto p = generate_pair(spec, 1);
  auto twice = augment(augment(p, AugmentOp::hflip), AugmentOp::hflip);
  CHECK(bit_equal(twice.t1, p.t1));
  CHECK(bit_equal(twice.mask, p.mask));
  CHECK(bit_equal(augment(augment(p, AugmentOp::vflip), AugmentOp::vflip).t2, p.t2));
  auto r = p;
  for (int k = 0; k < 4; ++k) r = augment(r, AugmentOp::rot90);
  CHECK(bit_equal(r.t1, p.t1));
  CHECK(bit_equal(r.t2, p.t2));
  CHECK(bit_equal(r.mask, p.mask));
  CHECK(bit_equal(augment(augment(p, AugmentOp::rot90), AugmentOp::rot270).t1, p.t1));
  CHECK(bit_equal(augment(augment(p, AugmentOp::rot90), AugmentOp::rot90).mask, augment(p, AugmentOp::rot180).mask));

  const double positives = p.mask.values().sum();
  for (auto op : {AugmentOp::none, AugmentOp::rot90, AugmentOp::rot180, AugmentOp::rot270, AugmentOp::hflip,
                  AugmentOp::vflip}) {
    CAPTURE(to_string(op));
    const auto a = augment(p, op);
    CHECK(a.mask.values().sum() == positives);
    // one transform for all three tensors: the pixel that lands at (0,0)
    // carries its t1, t2 and mask values together
    Index src = -1;
    for (Index k = 0; k < 64 * 64 && src < 0; ++k)
      if (p.t1[k] == a.t1[0] && p.t2[k] == a.t2[0]) src = k;
    REQUIRE(src >= 0);
    CHECK(p.mask[src] == a.mask[0]);
  }
  // hflip moves column 0 to column 63
  CHECK(augment(p, AugmentOp::hflip).t1[63] == p.t1[0]);
  CHECK(augment(p, AugmentOp::vflip).t1[63 * 64] == p.t1[0]);

  SamplePair wide{Tensor<float>(Shape{3, 4, 8}), Tensor<float>(Shape{3, 4, 8}), Tensor<float>(Shape{1, 4, 8})};
  CHECK_THROWS_AS(augment(wide, AugmentOp::rot90), DimensionError);
  CHECK_NOTHROW(augment(wide, AugmentOp::hflip));

  Xoshiro256pp rng(9);
  std::set<int> seen;
  for (int k = 0; k < 200; ++k) seen.insert(static_cast<int>(draw_augment(rng)));
  CHECK(seen.size() == 6);
}

TEST_CASE("PNM round trip, header and errors") {
  SceneSpec spec;
  const auto p = generate_pair(spec, 2);
  const auto back = decode_pnm(encode_pnm(p.t1));
  CHECK(back.shape() == p.t1.shape());
  CHECK(((back.values() - p.t1.values()).abs() <= 1.0f / 510 + 1e-6f).all());
  CHECK(encode_pnm(p.t1).substr(0, 3) == "P6\n");
  CHECK(bit_equal(decode_pnm(encode_pnm(back)), back));

  const std::string zero = encode_pnm(Tensor<float>(Shape{1, 3, 5}));
  CHECK(zero.substr(0, 11) == "P5\n5 3\n255\n");
  CHECK(zero.size() == 11 + 15);
  for (std::size_t i = 11; i < zero.size(); ++i) CHECK(zero[i] == '\0');

  CHECK(quantize_unit(0.5) == 128);
  CHECK(quantize_unit(-1) == 0);
  CHECK(quantize_unit(2) == 255);
  CHECK(quantize_unit(1.5 / 255) == 2);

  std::string bad = zero;
  bad[0] = 'Q';
  try {
    decode_pnm(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_pnm(zero.substr(0, zero.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_pnm("P5\n5 3\n65535\n"), FormatError);
  CHECK_THROWS_AS(decode_pnm("P5\n5"), FormatError);
  const auto commented = decode_pnm("P5\n# note\n2 1\n255\n\x01\xff");
  CHECK(commented.shape() == Shape{1, 1, 2});
  CHECK(commented[1] == 1.0f);

  const auto file = std::filesystem::path(temp_dir("saan_test_pnm")) / "a" / "x.ppm";
  write_image(file, p.t1);
  CHECK(bit_equal(read_image(file), back));
  CHECK_THROWS_AS(read_image(file.parent_path() / "missing.ppm"), FormatError);
}

TEST_CASE("manifest format and splits") {
  const auto entries = build_manifest({8, 2, 2});
  CHECK(entries.size() == 12);
  std::set<Index> train, val, test;
  for (const auto& e : entries) (e.split == "train" ? train : e.split == "val" ? val : test).insert(e.index);
  CHECK(train.size() == 8);
  CHECK(val.size() == 2);
  CHECK(test.size() == 2);
  for (Index v : val) CHECK(train.count(v) == 0);
  for (Index v : test) CHECK((train.count(v) == 0 && val.count(v) == 0));
  const std::string text = format_manifest(entries);
  CHECK(std::count(text.begin(), text.end(), '\n') == 12);
  CHECK(text.substr(0, text.find('\n')) == "split=train index=0 t1=t1/0.ppm t2=t2/0.ppm mask=mask/0.pgm");
  const auto parsed = parse_manifest(text);
  REQUIRE(parsed.size() == 12);
  CHECK(parsed[9].split == "val");
  CHECK(parsed[9].mask == entries[9].mask);
  CHECK_THROWS_AS(parse_manifest("split=train index=x t1=a t2=b mask=c\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest("split=train index=0 t1=a\n"), FormatError);
  CHECK_THROWS_AS(build_manifest({0, 1, 1}), ValueError);
}

TEST_CASE("write_dataset regenerates byte-identical trees and loads back") {
  SceneSpec spec;
  spec.seed = 11;
  const auto a = temp_dir("saan_test_ds_a"), b = temp_dir("saan_test_ds_b");
  write_dataset(spec, {8, 2, 2}, a);
  write_dataset(spec, {8, 2, 2}, b);
  Index files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = std::filesystem::relative(e.path(), a);
    CHECK(read_file(e.path()) == read_file(std::filesystem::path(b) / rel));
  }
  CHECK(files == 12 * 3 + 1);

  const auto val = load_split(std::filesystem::path(a) / "manifest.txt", "val");
  REQUIRE(val.samples.size() == 2);
  CHECK(val.indices == std::vector<Index>{8, 9});
  const auto direct = generate_pair(spec, 8);
  CHECK(bit_equal(val.samples[0].mask, direct.mask));
  CHECK(((val.samples[0].t1.values() - direct.t1.values()).abs() <= 1.0f / 510 + 1e-6f).all());

  const auto batch = make_batch(val, {1, 0}, {AugmentOp::none, AugmentOp::hflip});
  CHECK(batch.t1.shape() == Shape{2, 3, 64, 64});
  CHECK(batch.mask.shape() == Shape{2, 1, 64, 64});
  CHECK(batch.t1[0] == val.samples[1].t1[0]);
  CHECK(batch.t1[3 * 64 * 64 + 63] == val.samples[0].t1[0]);
  CHECK_THROWS_AS(load_split(std::filesystem::path(a) / "manifest.txt", "dev"), FormatError);
  CHECK_THROWS_AS(load_split(std::filesystem::path(a) / "nope.txt", "val"), FormatError);
}
