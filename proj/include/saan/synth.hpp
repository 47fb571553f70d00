#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saan/rng.hpp"
#include "saan/tensor.hpp"

namespace saan {

enum class ObjectKind { rectangle, ellipse };
enum class ChangeKind { add, remove, keep };

/// Generator parameters. Every pair is a pure function of (seed, index).
struct SceneSpec {
  Index size = 64;  // square images
  Index channels = 3;
  int min_objects = 3, max_objects = 6;
  Index min_extent = 8, max_extent = 20;  // object bounding-box side, pixels
  bool rectangles = true, ellipses = true;
  double p_add = 0.3, p_remove = 0.3, p_keep = 0.4;
  double min_contrast = 0.3;  // max-channel distance between object and background colors
  // Photometric jitter on t2: brightness scale in [1-b, 1+b], per-channel
  // gain in [1-g, 1+g], additive Gaussian noise with this sigma.
  double brightness_jitter = 0.2;
  double gain_jitter = 0.05;
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;

  /// `stages` is the encoder depth the images must be divisible for.
  void validate(Index stages = 4) const;
};

struct SceneObject {
  ObjectKind kind = ObjectKind::rectangle;
  ChangeKind change = ChangeKind::keep;
  Index x = 0, y = 0, width = 0, height = 0;  // bounding box
  std::array<float, 3> color{};
};

/// Everything needed to render one pair.
struct SceneRecord {
  std::array<float, 3> base{};       // background color
  std::array<float, 3> gradient{};   // per-channel ramp amplitude along `angle`
  double angle = 0;
  double texture_freq = 0, texture_phase = 0;
  std::vector<SceneObject> objects;
  double brightness = 1;
  std::array<float, 3> gain{1, 1, 1};
  std::uint64_t noise_stream = 0;
};

struct SamplePair {
  Tensor<float> t1, t2;  // [C,H,W] in [0,1]
  Tensor<float> mask;    // [1,H,W] in {0,1}
};

SceneRecord draw_scene(const SceneSpec& spec, std::uint64_t index);
SamplePair render_scene(const SceneSpec& spec, const SceneRecord& scene);
SamplePair generate_pair(const SceneSpec& spec, std::uint64_t index);

/// [1,H,W] coverage raster of one object: pixel centers inside the shape.
Tensor<float> rasterize(const SceneObject& object, Index size);

enum class AugmentOp { none, rot90, rot180, rot270, hflip, vflip };

const char* to_string(AugmentOp op);
/// Same exact transform on t1, t2 and mask.
SamplePair augment(const SamplePair& sample, AugmentOp op);
AugmentOp draw_augment(Xoshiro256pp& rng);

struct SplitCounts {
  Index train = 512, val = 128, test = 128;
};

struct ManifestEntry {
  std::string split;
  Index index = 0;
  std::string t1, t2, mask;  // relative to the dataset root
};

/// Indices are contiguous per split in the order train, val, test.
std::vector<ManifestEntry> build_manifest(const SplitCounts& counts);
std::string format_manifest(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& what = "manifest");

/// Writes `<root>/{t1,t2,mask}/<index>.p?m` and `<root>/manifest.txt`.
std::vector<ManifestEntry> write_dataset(const SceneSpec& spec, const SplitCounts& counts,
                                         const std::filesystem::path& root);

struct Dataset {
  std::vector<SamplePair> samples;
  std::vector<Index> indices;
};

/// Loads the pairs listed for `split`; the manifest path's directory is the root.
Dataset load_split(const std::filesystem::path& manifest, const std::string& split);

struct Batch {
  Tensor<float> t1, t2, mask;  // [N,C,H,W], [N,C,H,W], [N,1,H,W]
};

Batch make_batch(const Dataset& data, const std::vector<Index>& positions,
                 const std::vector<AugmentOp>& ops = {});

}  // namespace saan
