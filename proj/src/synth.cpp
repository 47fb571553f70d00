#include "saan/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "saan/pnm.hpp"

namespace saan {

void SceneSpec::validate(Index stages) const {
  if (size <= 0 || (size & (size - 1)) != 0) throw ValueError("scene size must be a power of two");
  if (size % (Index{1} << (stages + 1)) != 0)
    throw ValueError("scene size " + std::to_string(size) + " not divisible by 2^" + std::to_string(stages + 1));
  if (channels != 1 && channels != 3) throw ValueError("scene channels must be 1 or 3");
  if (min_objects < 0 || max_objects < min_objects) throw ValueError("bad object count range");
  if (min_extent < 1 || max_extent < min_extent || max_extent > size) throw ValueError("bad object extent range");
  if (!rectangles && !ellipses) throw ValueError("no object kind enabled");
  if (p_add < 0 || p_remove < 0 || p_keep < 0 || std::abs(p_add + p_remove + p_keep - 1.0) > 1e-9)
    throw ValueError("change probabilities must be nonnegative and sum to 1");
  for (double v : {brightness_jitter, gain_jitter, noise_sigma, min_contrast})
    if (!std::isfinite(v) || v < 0) throw ValueError("jitter ranges must be finite and nonnegative");
  if (brightness_jitter >= 1 || gain_jitter >= 1) throw ValueError("brightness and gain jitter must be below 1");
}

namespace {

bool boxes_clear(const SceneObject& a, const SceneObject& b) {
  // one pixel of background between boxes
  return a.x + a.width + 1 <= b.x || b.x + b.width + 1 <= a.x || a.y + a.height + 1 <= b.y ||
         b.y + b.height + 1 <= a.y;
}

std::array<float, 3> contrasting_color(Xoshiro256pp& rng, const std::array<float, 3>& base, Index channels,
                                       double min_contrast) {
  std::array<float, 3> c{};
  for (int attempt = 0; attempt < 100; ++attempt) {
    double best = 0;
    for (Index k = 0; k < 3; ++k) {
      c[k] = static_cast<float>(rng.uniform());
      if (k < channels) best = std::max(best, std::abs(static_cast<double>(c[k]) - base[k]));
    }
    if (channels == 1) c[1] = c[2] = c[0];
    if (best >= min_contrast) return c;
  }
  for (Index k = 0; k < 3; ++k) c[k] = 1.0f - base[k];
  return c;
}

}  // namespace

SceneRecord draw_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate(0);
  Xoshiro256pp rng = Xoshiro256pp::stream(spec.seed, 2 * index);
  SceneRecord scene;
  for (Index k = 0; k < 3; ++k) {
    scene.base[k] = static_cast<float>(rng.uniform(0.2, 0.8));
    scene.gradient[k] = static_cast<float>(rng.uniform(-0.1, 0.1));
  }
  if (spec.channels == 1) {
    scene.base[1] = scene.base[2] = scene.base[0];
    scene.gradient[1] = scene.gradient[2] = scene.gradient[0];
  }
  scene.angle = rng.uniform(0, 6.283185307179586);
  scene.texture_freq = rng.uniform(0.3, 0.9);
  scene.texture_phase = rng.uniform(0, 6.283185307179586);

  const auto count = rng.uniform_int(spec.min_objects, spec.max_objects);
  for (int attempt = 0; attempt < 200 && static_cast<std::int64_t>(scene.objects.size()) < count; ++attempt) {
    SceneObject o;
    o.kind = !spec.ellipses ? ObjectKind::rectangle
             : !spec.rectangles ? ObjectKind::ellipse
             : rng.uniform() < 0.5 ? ObjectKind::rectangle
                                : ObjectKind::ellipse;
    o.width = rng.uniform_int(spec.min_extent, spec.max_extent);
    o.height = rng.uniform_int(spec.min_extent, spec.max_extent);
    o.x = rng.uniform_int(0, spec.size - o.width);
    o.y = rng.uniform_int(0, spec.size - o.height);
    const double u = rng.uniform();
    o.change = u < spec.p_add ? ChangeKind::add : u < spec.p_add + spec.p_remove ? ChangeKind::remove : ChangeKind::keep;
    o.color = contrasting_color(rng, scene.base, spec.channels, spec.min_contrast);
    if (std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& p) { return boxes_clear(o, p); }))
      scene.objects.push_back(o);
  }

  scene.brightness = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter);
  for (Index k = 0; k < 3; ++k) scene.gain[k] = static_cast<float>(1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter));
  if (spec.channels == 1) scene.gain[1] = scene.gain[2] = scene.gain[0];
  scene.noise_stream = 2 * index + 1;
  return scene;
}

Tensor<float> rasterize(const SceneObject& o, Index size) {
  Tensor<float> m(Shape{1, size, size});
  const double cx = o.x + o.width / 2.0, cy = o.y + o.height / 2.0;
  const double rx = o.width / 2.0, ry = o.height / 2.0;
  for (Index y = o.y; y < std::min(o.y + o.height, size); ++y)
    for (Index x = o.x; x < std::min(o.x + o.width, size); ++x) {
      bool inside = true;
      if (o.kind == ObjectKind::ellipse) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        inside = dx * dx + dy * dy <= 1.0;
      }
      if (inside) m[y * size + x] = 1.0f;
    }
  return m;
}

SamplePair render_scene(const SceneSpec& spec, const SceneRecord& scene) {
  const Index n = spec.size, c = spec.channels, hw = n * n;
  std::vector<double> bg(static_cast<std::size_t>(c * hw)), texture(static_cast<std::size_t>(hw));
  const double ca = std::cos(scene.angle), sa = std::sin(scene.angle);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const double u = ((x + 0.5) * ca + (y + 0.5) * sa) / static_cast<double>(n);
      const double tex = 0.03 * std::sin(scene.texture_freq * (x + 0.7 * y) + scene.texture_phase) *
                         std::cos(scene.texture_freq * (0.6 * x - y));
      texture[static_cast<std::size_t>(y * n + x)] = tex;
      for (Index k = 0; k < c; ++k) bg[static_cast<std::size_t>(k * hw + y * n + x)] = scene.base[k] + scene.gradient[k] * u + tex;
    }

  std::vector<double> img1 = bg, img2 = bg;
  Tensor<float> cover1(Shape{1, n, n}), cover2(Shape{1, n, n});
  for (const auto& o : scene.objects) {
    const Tensor<float> r = rasterize(o, n);
    const bool in1 = o.change != ChangeKind::add, in2 = o.change != ChangeKind::remove;
    for (Index p = 0; p < hw; ++p) {
      if (r[p] == 0.0f) continue;
      // object fill keeps the scene texture so only color carries the edit
      const double tex = texture[static_cast<std::size_t>(p)];
      for (Index k = 0; k < c; ++k) {
        const auto i = static_cast<std::size_t>(k * hw + p);
        if (in1) img1[i] = o.color[k] + tex;
        if (in2) img2[i] = o.color[k] + tex;
      }
      if (in1) cover1[p] = 1.0f;
      if (in2) cover2[p] = 1.0f;
    }
  }

  Xoshiro256pp noise = Xoshiro256pp::stream(spec.seed, scene.noise_stream);
  SamplePair out{Tensor<float>(Shape{c, n, n}), Tensor<float>(Shape{c, n, n}), Tensor<float>(Shape{1, n, n})};
  for (Index k = 0; k < c; ++k)
    for (Index p = 0; p < hw; ++p) {
      const auto i = static_cast<std::size_t>(k * hw + p);
      double v2 = img2[i] * scene.brightness * scene.gain[k];
      if (spec.noise_sigma > 0) v2 += spec.noise_sigma * noise.normal();
      out.t1[k * hw + p] = static_cast<float>(std::clamp(img1[i], 0.0, 1.0));
      out.t2[k * hw + p] = static_cast<float>(std::clamp(v2, 0.0, 1.0));
    }
  for (Index p = 0; p < hw; ++p) out.mask[p] = cover1[p] != cover2[p] ? 1.0f : 0.0f;
  return out;
}

SamplePair generate_pair(const SceneSpec& spec, std::uint64_t index) {
  return render_scene(spec, draw_scene(spec, index));
}

const char* to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::none: return "none";
    case AugmentOp::rot90: return "rot90";
    case AugmentOp::rot180: return "rot180";
    case AugmentOp::rot270: return "rot270";
    case AugmentOp::hflip: return "hflip";
    case AugmentOp::vflip: return "vflip";
  }
  return "?";
}

namespace {

Tensor<float> apply(const Tensor<float>& t, AugmentOp op) {
  switch (op) {
    case AugmentOp::none: return t;
    case AugmentOp::rot90: return rotate90(t, 1);
    case AugmentOp::rot180: return rotate90(t, 2);
    case AugmentOp::rot270: return rotate90(t, 3);
    case AugmentOp::hflip: return flip_horizontal(t);
    case AugmentOp::vflip: return flip_vertical(t);
  }
  return t;
}

}  // namespace

SamplePair augment(const SamplePair& s, AugmentOp op) {
  return {apply(s.t1, op), apply(s.t2, op), apply(s.mask, op)};
}

AugmentOp draw_augment(Xoshiro256pp& rng) { return static_cast<AugmentOp>(rng.uniform_int(0, 5)); }

std::vector<ManifestEntry> build_manifest(const SplitCounts& counts) {
  if (counts.train < 1 || counts.val < 1 || counts.test < 1) throw ValueError("every split needs at least one pair");
  std::vector<ManifestEntry> entries;
  Index next = 0;
  for (const auto& [split, count] : {std::pair<const char*, Index>{"train", counts.train}, {"val", counts.val},
                                     {"test", counts.test}})
    for (Index k = 0; k < count; ++k, ++next) {
      const std::string id = std::to_string(next);
      entries.push_back({split, next, "t1/" + id + ".ppm", "t2/" + id + ".ppm", "mask/" + id + ".pgm"});
    }
  return entries;
}

std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  for (const auto& e : entries)
    out << "split=" << e.split << " index=" << e.index << " t1=" << e.t1 << " t2=" << e.t2 << " mask=" << e.mask
        << "\n";
  return out.str();
}

std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& what) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::map<std::string, std::string> kv;
    std::istringstream tokens(line);
    std::string tok;
    while (tokens >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError(what + ":" + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    ManifestEntry e;
    for (const char* key : {"split", "index", "t1", "t2", "mask"})
      if (!kv.count(key)) throw FormatError(what + ":" + std::to_string(lineno) + ": missing '" + key + "'");
    e.split = kv["split"];
    try {
      e.index = std::stoll(kv["index"]);
    } catch (const std::exception&) {
      throw FormatError(what + ":" + std::to_string(lineno) + ": bad index '" + kv["index"] + "'");
    }
    e.t1 = kv["t1"];
    e.t2 = kv["t2"];
    e.mask = kv["mask"];
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> write_dataset(const SceneSpec& spec, const SplitCounts& counts,
                                         const std::filesystem::path& root) {
  spec.validate(0);
  auto entries = build_manifest(counts);
  for (auto& e : entries) {
    if (spec.channels == 1) {
      e.t1.replace(e.t1.size() - 3, 3, "pgm");
      e.t2.replace(e.t2.size() - 3, 3, "pgm");
    }
    const SamplePair s = generate_pair(spec, static_cast<std::uint64_t>(e.index));
    write_image(root / e.t1, s.t1);
    write_image(root / e.t2, s.t2);
    write_image(root / e.mask, s.mask);
  }
  write_file(root / "manifest.txt", format_manifest(entries));
  return entries;
}

Dataset load_split(const std::filesystem::path& manifest, const std::string& split) {
  const auto entries = parse_manifest(read_file(manifest), manifest.string());
  const auto root = manifest.parent_path();
  Dataset data;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    SamplePair s{read_image(root / e.t1), read_image(root / e.t2), read_image(root / e.mask)};
    if (s.t1.shape() != s.t2.shape() || s.mask.dim(0) != 1 || s.mask.dim(1) != s.t1.dim(1) ||
        s.mask.dim(2) != s.t1.dim(2))
      throw FormatError("pair " + std::to_string(e.index) + ": image and mask sizes disagree");
    for (Index i = 0; i < s.mask.size(); ++i)
      if (s.mask[i] != 0.0f && s.mask[i] != 1.0f)
        throw FormatError("mask " + e.mask + " is not binary (values 0 or 255 expected)");
    if (!data.samples.empty() && s.t1.shape() != data.samples.front().t1.shape())
      throw FormatError("pair " + std::to_string(e.index) + " differs in size from the rest of the split");
    data.samples.push_back(std::move(s));
    data.indices.push_back(e.index);
  }
  if (data.samples.empty()) throw FormatError(manifest.string() + ": no entries for split '" + split + "'");
  return data;
}

Batch make_batch(const Dataset& data, const std::vector<Index>& positions, const std::vector<AugmentOp>& ops) {
  if (positions.empty()) throw ValueError("empty batch");
  if (!ops.empty() && ops.size() != positions.size()) throw ValueError("one augment op per batch element expected");
  std::vector<Tensor<float>> t1, t2, mask;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const SamplePair& s = data.samples.at(static_cast<std::size_t>(positions[k]));
    if (ops.empty() || ops[k] == AugmentOp::none) {
      t1.push_back(s.t1);
      t2.push_back(s.t2);
      mask.push_back(s.mask);
    } else {
      SamplePair a = augment(s, ops[k]);
      t1.push_back(std::move(a.t1));
      t2.push_back(std::move(a.t2));
      mask.push_back(std::move(a.mask));
    }
  }
  return {stack<float>(t1), stack<float>(t2), stack<float>(mask)};
}

}  // namespace saan
