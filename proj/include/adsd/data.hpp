#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "adsd/rng.hpp"
#include "adsd/tensor.hpp"

namespace adsd {

// ---------------------------------------------------------------------------
// TNSR binary tensor container
//
//   bytes 0..3   magic "TNSR"
//   byte  4      version (1)
//   byte  5      dtype: 0 = f32, 1 = f64, 2 = i32
//   byte  6      ndim
//   then         ndim x u64 little-endian extents
//   then         row-major payload, little-endian
//
// Round trips are bit-exact.
// ---------------------------------------------------------------------------

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, I32 = 2 };

struct TensorFileData {
  Dtype dtype = Dtype::F32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::int32_t> i32;
};

void write_tensor_file(const std::string& path, const Shape& shape, const float* data);
void write_tensor_file(const std::string& path, const Shape& shape, const double* data);
void write_tensor_file(const std::string& path, const Shape& shape, const std::int32_t* data);
TensorFileData read_tensor_file(const std::string& path);

template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  write_tensor_file(path, t.shape(), t.data());
}

void write_tensor(const std::string& path, const IntTensor& t);

template <typename T>
Tensor<T> read_tensor(const std::string& path);
IntTensor read_int_tensor(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic RGBD scenes
// ---------------------------------------------------------------------------

// One captured record: aligned color, metric depth, labels and unit normals.
struct RgbdSample {
  std::size_t height = 0, width = 0;
  std::vector<float> rgb;                // [H,W,3] in [0,1]
  std::vector<float> depth;              // [H,W] meters, 0 marks invalid
  std::vector<std::int32_t> labels;      // [H,W] in [0,C) or the ignore index
  std::vector<float> normals;            // [H,W,3], unit length where defined
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_objects = 3;
  int num_classes = 4;  // including background (class 0)
  std::size_t height = 64, width = 64;
  bool ignore_border = true;  // outermost ring labeled ignore with invalid depth
};

// Planar patch placed in front of the background plane. Depth varies
// linearly across the patch so normals carry real signal.
struct SceneObject {
  int cls = 0;
  bool is_disk = false;
  double cx = 0, cy = 0;   // center, pixel coordinates
  double ax = 0, ay = 0;   // half extents
  double depth_base = 0;   // depth at the center
  double gx = 0, gy = 0;   // depth gradient per pixel
};

struct ScenePalette {
  std::vector<std::string> names;               // size C
  std::vector<std::array<double, 3>> colors;    // size C
  std::vector<std::pair<double, double>> depth_bands;  // size C; [0] is background
};

// Deterministic palette for a class count. When there are at least two
// object classes the final two share an identical color and differ only by
// depth band, so segmentation of that pair requires the depth modality.
ScenePalette make_palette(int num_classes);

constexpr double kBackgroundDepth = 3.2;

struct SceneRecord {
  RgbdSample sample;
  std::vector<SceneObject> objects;
};

// Pure function of the spec: same spec -> bit-identical sample.
SceneRecord generate_scene_record(const SceneSpec& spec);
RgbdSample generate_scene(const SceneSpec& spec);

// ---------------------------------------------------------------------------
// Augmentation: random scale in [0.8,1.4], horizontal flip, random crop back
// to the source extent. Parameters are resampled until the crop fits, so
// with output size == source size the effective scale range is [1.0, 1.4].
// ---------------------------------------------------------------------------

struct AugmentParams {
  double scale = 1.0;
  bool flip = false;
  std::size_t crop_y = 0, crop_x = 0;
  std::size_t scaled_h = 0, scaled_w = 0;
};

AugmentParams draw_augment_params(std::size_t height, std::size_t width, SplitMix64& rng);

// Deterministic transform: bilinear for rgb/depth, nearest for labels and
// normals; depth is divided by the scale factor; a flip negates normal x.
RgbdSample augment_apply(const RgbdSample& sample, const AugmentParams& params);
RgbdSample augment(const RgbdSample& sample, SplitMix64& rng);

// ---------------------------------------------------------------------------
// Dataset directory: manifest + one TNSR file quadruple per sample
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string rgb, depth, labels, normals;  // paths relative to the dataset dir
};

struct DatasetManifest {
  std::size_t height = 0, width = 0;
  std::vector<std::string> class_names;
  std::vector<std::uint64_t> class_pixels;  // dataset-level label histogram
  std::vector<ManifestEntry> samples;
};

void write_manifest(const std::string& dir, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& dir);

// Generates `count` scenes under `dir` (created if needed) and writes the
// manifest. Per-sample seeds derive from `seed`; object counts are drawn
// from [2,5].
DatasetManifest generate_dataset(const std::string& dir, std::uint64_t seed, std::size_t count,
                                 std::size_t height, std::size_t width, int num_classes);

// Loads every sample referenced by the manifest.
std::vector<RgbdSample> load_dataset(const std::string& dir, const DatasetManifest& manifest);

}  // namespace adsd
