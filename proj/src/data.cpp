#include "adsd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "adsd/errors.hpp"
#include "adsd/ops.hpp"

namespace fs = std::filesystem;

namespace adsd {

// ---------------------------------------------------------------------------
// TNSR container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::I32: return 4;
  }
  throw DataError("TNSR: unknown dtype");
}

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is, const std::string& path, const char* field) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw DataError(path + ": truncated TNSR " + field);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_header(std::ostream& os, Dtype dtype, const Shape& shape) {
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(shape.size()));
  for (std::size_t d : shape) put_u64_le(os, d);
}

template <typename T>
void write_payload_le(std::ostream& os, const T* data, std::size_t n) {
  // Little-endian host assumed for the fast path; byte-swapping fallback
  // kept trivial because every supported element is 4 or 8 bytes.
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void write_file(const std::string& path, Dtype dtype, const Shape& shape, const T* data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for write: " + path);
  write_header(os, dtype, shape);
  write_payload_le(os, data, shape_numel(shape));
  if (!os) throw DataError("write failed: " + path);
}

}  // namespace

void write_tensor_file(const std::string& path, const Shape& shape, const float* data) {
  write_file(path, Dtype::F32, shape, data);
}
void write_tensor_file(const std::string& path, const Shape& shape, const double* data) {
  write_file(path, Dtype::F64, shape, data);
}
void write_tensor_file(const std::string& path, const Shape& shape, const std::int32_t* data) {
  write_file(path, Dtype::I32, shape, data);
}

void write_tensor(const std::string& path, const IntTensor& t) {
  write_tensor_file(path, t.shape(), t.data());
}

TensorFileData read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError(path + ": bad TNSR magic");
  const int version = is.get();
  if (version != kVersion)
    throw DataError(path + ": unsupported TNSR version " + std::to_string(version));
  const int dt = is.get();
  if (dt < 0 || dt > 2) throw DataError(path + ": bad TNSR dtype code " + std::to_string(dt));
  const int ndim = is.get();
  if (ndim < 0 || ndim > 8) throw DataError(path + ": bad TNSR ndim");

  TensorFileData out;
  out.dtype = static_cast<Dtype>(dt);
  for (int i = 0; i < ndim; ++i) {
    const std::uint64_t d = get_u64_le(is, path, "dims");
    if (d == 0) throw DataError(path + ": zero extent in TNSR dims");
    out.shape.push_back(static_cast<std::size_t>(d));
  }
  const std::size_t n = shape_numel(out.shape);
  const std::size_t bytes = n * dtype_size(out.dtype);
  std::vector<char> buf(bytes);
  is.read(buf.data(), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes)
    throw DataError(path + ": truncated TNSR payload (expected " + std::to_string(bytes) +
                    " bytes)");
  switch (out.dtype) {
    case Dtype::F32:
      out.f32.resize(n);
      std::memcpy(out.f32.data(), buf.data(), bytes);
      break;
    case Dtype::F64:
      out.f64.resize(n);
      std::memcpy(out.f64.data(), buf.data(), bytes);
      break;
    case Dtype::I32:
      out.i32.resize(n);
      std::memcpy(out.i32.data(), buf.data(), bytes);
      break;
  }
  return out;
}

template <>
Tensor<float> read_tensor<float>(const std::string& path) {
  TensorFileData d = read_tensor_file(path);
  if (d.dtype != Dtype::F32) throw DataError(path + ": expected f32 tensor");
  return Tensor<float>::from_data(d.shape, std::move(d.f32));
}

template <>
Tensor<double> read_tensor<double>(const std::string& path) {
  TensorFileData d = read_tensor_file(path);
  if (d.dtype != Dtype::F64) throw DataError(path + ": expected f64 tensor");
  return Tensor<double>::from_data(d.shape, std::move(d.f64));
}

IntTensor read_int_tensor(const std::string& path) {
  TensorFileData d = read_tensor_file(path);
  if (d.dtype != Dtype::I32) throw DataError(path + ": expected i32 tensor");
  return IntTensor::from_data(d.shape, std::move(d.i32));
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

ScenePalette make_palette(int num_classes) {
  if (num_classes < 2) throw ConfigError("make_palette: need at least 2 classes");
  ScenePalette pal;
  pal.names.resize(num_classes);
  pal.colors.resize(num_classes);
  pal.depth_bands.resize(num_classes);

  pal.names[0] = "background";
  pal.colors[0] = {0.55, 0.55, 0.55};
  pal.depth_bands[0] = {kBackgroundDepth, kBackgroundDepth};

  const int objects = num_classes - 1;
  const double lo = 1.1, hi = 2.9;
  const double band = (hi - lo) / objects;
  for (int c = 1; c < num_classes; ++c) {
    const double b0 = lo + (c - 1) * band;
    pal.depth_bands[c] = {b0, b0 + 0.7 * band};
    pal.names[c] = "c" + std::to_string(c);
    // Evenly spread hues via a fixed 6-entry wheel.
    static const std::array<std::array<double, 3>, 6> wheel = {{{0.75, 0.30, 0.22},
                                                                {0.22, 0.38, 0.72},
                                                                {0.28, 0.62, 0.30},
                                                                {0.78, 0.68, 0.25},
                                                                {0.58, 0.30, 0.65},
                                                                {0.25, 0.62, 0.62}}};
    pal.colors[c] = wheel[(c - 1) % wheel.size()];
  }
  // The last two object classes become a color twin pair: identical color,
  // disjoint depth bands. Only the depth modality can separate them.
  if (objects >= 2) {
    pal.colors[num_classes - 1] = pal.colors[num_classes - 2];
    pal.names[num_classes - 2] += "_near";
    pal.names[num_classes - 1] = pal.names[num_classes - 2];
    pal.names[num_classes - 1].replace(pal.names[num_classes - 1].size() - 5, 5, "_far");
  }
  return pal;
}

SceneRecord generate_scene_record(const SceneSpec& spec) {
  if (spec.num_objects < 0) throw ConfigError("generate_scene: negative object count");
  if (spec.height < 8 || spec.width < 8)
    throw ConfigError("generate_scene: image must be at least 8x8");
  const ScenePalette pal = make_palette(spec.num_classes);
  const std::size_t H = spec.height, W = spec.width;

  SplitMix64 rng(stream_seed(spec.seed, 0x5CE11Eull));
  SceneRecord rec;
  rec.objects.reserve(spec.num_objects);
  for (int i = 0; i < spec.num_objects; ++i) {
    SceneObject o;
    o.cls = 1 + static_cast<int>(rng.uniform_index(spec.num_classes - 1));
    o.is_disk = rng.bernoulli(0.5);
    o.ax = rng.uniform(W / 8.0, W / 4.0);
    o.ay = rng.uniform(H / 8.0, H / 4.0);
    o.cx = rng.uniform(o.ax, W - 1 - o.ax);
    o.cy = rng.uniform(o.ay, H - 1 - o.ay);
    const auto [blo, bhi] = pal.depth_bands[o.cls];
    o.depth_base = rng.uniform(blo + 0.15 * (bhi - blo), bhi - 0.15 * (bhi - blo));
    o.gx = rng.uniform(-0.004, 0.004);
    o.gy = rng.uniform(-0.004, 0.004);
    rec.objects.push_back(o);
  }

  RgbdSample& s = rec.sample;
  s.height = H;
  s.width = W;
  s.rgb.resize(H * W * 3);
  s.depth.resize(H * W);
  s.labels.resize(H * W);
  s.normals.resize(H * W * 3);

  SplitMix64 noise(stream_seed(spec.seed, 0x2015Eull));
  std::size_t background_pixels = 0;
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double x = static_cast<double>(j), y = static_cast<double>(i);
      int cls = 0;
      double depth = kBackgroundDepth;
      double nx = 0, ny = 0, nz = 1;
      for (const SceneObject& o : rec.objects) {
        const double dx = x - o.cx, dy = y - o.cy;
        bool covered;
        if (o.is_disk)
          covered = (dx / o.ax) * (dx / o.ax) + (dy / o.ay) * (dy / o.ay) <= 1.0;
        else
          covered = std::abs(dx) <= o.ax && std::abs(dy) <= o.ay;
        if (!covered) continue;
        const double z = o.depth_base + o.gx * dx + o.gy * dy;
        if (z < depth) {
          depth = z;
          cls = o.cls;
          const double inv = 1.0 / std::sqrt(o.gx * o.gx + o.gy * o.gy + 1.0);
          nx = -o.gx * inv;
          ny = -o.gy * inv;
          nz = inv;
        }
      }
      if (cls == 0) ++background_pixels;

      const std::size_t p = i * W + j;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = pal.colors[cls][ch] + noise.uniform(-0.02, 0.02);
        s.rgb[p * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      s.depth[p] = static_cast<float>(depth);
      s.labels[p] = cls;
      s.normals[p * 3 + 0] = static_cast<float>(nx);
      s.normals[p * 3 + 1] = static_cast<float>(ny);
      s.normals[p * 3 + 2] = static_cast<float>(nz);
    }
  }
  if (background_pixels == 0)
    throw ConfigError("generate_scene: objects leave zero background pixels");

  if (spec.ignore_border) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        if (i == 0 || j == 0 || i + 1 == H || j + 1 == W) {
          const std::size_t p = i * W + j;
          s.labels[p] = ops::kIgnoreIndex;
          s.depth[p] = 0.0f;  // invalid
        }
      }
    }
  }
  return rec;
}

RgbdSample generate_scene(const SceneSpec& spec) { return generate_scene_record(spec).sample; }

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

// Bilinear resize of an interleaved [H,W,C] float image.
std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t H, std::size_t W,
                                   std::size_t C, std::size_t OH, std::size_t OW) {
  std::vector<float> out(OH * OW * C);
  const double ry = static_cast<double>(H) / OH, rx = static_cast<double>(W) / OW;
  for (std::size_t i = 0; i < OH; ++i) {
    double sy = (i + 0.5) * ry - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - y0;
    for (std::size_t j = 0; j < OW; ++j) {
      double sx = (j + 0.5) * rx - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - x0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v00 = src[(y0 * W + x0) * C + c], v01 = src[(y0 * W + x1) * C + c];
        const double v10 = src[(y1 * W + x0) * C + c], v11 = src[(y1 * W + x1) * C + c];
        const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        out[(i * OW + j) * C + c] = static_cast<float>(v);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> resize_nearest(const std::vector<T>& src, std::size_t H, std::size_t W,
                              std::size_t C, std::size_t OH, std::size_t OW) {
  std::vector<T> out(OH * OW * C);
  const double ry = static_cast<double>(H) / OH, rx = static_cast<double>(W) / OW;
  for (std::size_t i = 0; i < OH; ++i) {
    std::size_t y = static_cast<std::size_t>((i + 0.5) * ry);
    y = std::min(y, H - 1);
    for (std::size_t j = 0; j < OW; ++j) {
      std::size_t x = static_cast<std::size_t>((j + 0.5) * rx);
      x = std::min(x, W - 1);
      for (std::size_t c = 0; c < C; ++c) out[(i * OW + j) * C + c] = src[(y * W + x) * C + c];
    }
  }
  return out;
}

}  // namespace

AugmentParams draw_augment_params(std::size_t height, std::size_t width, SplitMix64& rng) {
  AugmentParams p;
  for (int attempt = 0; attempt < 64; ++attempt) {
    p.scale = rng.uniform(0.8, 1.4);
    p.flip = rng.bernoulli(0.5);
    p.scaled_h = static_cast<std::size_t>(std::lround(height * p.scale));
    p.scaled_w = static_cast<std::size_t>(std::lround(width * p.scale));
    if (p.scaled_h < height || p.scaled_w < width) continue;  // crop would not fit
    p.crop_y = p.scaled_h == height ? 0 : rng.uniform_index(p.scaled_h - height + 1);
    p.crop_x = p.scaled_w == width ? 0 : rng.uniform_index(p.scaled_w - width + 1);
    return p;
  }
  throw DataError("augment: could not draw a valid transform");
}

RgbdSample augment_apply(const RgbdSample& s, const AugmentParams& p) {
  const std::size_t H = s.height, W = s.width;
  const std::size_t SH = p.scaled_h ? p.scaled_h : H, SW = p.scaled_w ? p.scaled_w : W;
  if (p.crop_y + H > SH || p.crop_x + W > SW)
    throw DataError("augment_apply: crop outside the scaled image");

  std::vector<float> rgb_s = resize_bilinear(s.rgb, H, W, 3, SH, SW);
  std::vector<float> depth_s = resize_bilinear(s.depth, H, W, 1, SH, SW);
  std::vector<std::int32_t> labels_s = resize_nearest(s.labels, H, W, 1, SH, SW);
  std::vector<float> normals_s = resize_nearest(s.normals, H, W, 3, SH, SW);

  RgbdSample out;
  out.height = H;
  out.width = W;
  out.rgb.resize(H * W * 3);
  out.depth.resize(H * W);
  out.labels.resize(H * W);
  out.normals.resize(H * W * 3);

  const float inv_scale = static_cast<float>(1.0 / p.scale);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t sj = p.flip ? (W - 1 - j) : j;
      const std::size_t src = (p.crop_y + i) * SW + (p.crop_x + sj);
      const std::size_t dst = i * W + j;
      for (int c = 0; c < 3; ++c) out.rgb[dst * 3 + c] = rgb_s[src * 3 + c];
      // zoom changes apparent size; depth shrinks accordingly (0 stays invalid)
      out.depth[dst] = depth_s[src] * inv_scale;
      out.labels[dst] = labels_s[src];
      out.normals[dst * 3 + 0] = p.flip ? -normals_s[src * 3 + 0] : normals_s[src * 3 + 0];
      out.normals[dst * 3 + 1] = normals_s[src * 3 + 1];
      out.normals[dst * 3 + 2] = normals_s[src * 3 + 2];
    }
  }
  return out;
}

RgbdSample augment(const RgbdSample& sample, SplitMix64& rng) {
  return augment_apply(sample, draw_augment_params(sample.height, sample.width, rng));
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

void write_manifest(const std::string& dir, const DatasetManifest& m) {
  if (m.class_names.size() != m.class_pixels.size())
    throw DataError("write_manifest: class name/pixel count mismatch");
  std::ofstream os(fs::path(dir) / "manifest.txt");
  if (!os) throw DataError("cannot write manifest in " + dir);
  os << "adsd-dataset v1\n";
  os << "size " << m.height << " " << m.width << "\n";
  os << "classes " << m.class_names.size() << "\n";
  for (std::size_t c = 0; c < m.class_names.size(); ++c)
    os << "class " << c << " " << m.class_names[c] << " " << m.class_pixels[c] << "\n";
  os << "samples " << m.samples.size() << "\n";
  for (const auto& e : m.samples)
    os << "sample " << e.rgb << " " << e.depth << " " << e.labels << " " << e.normals << "\n";
  if (!os) throw DataError("manifest write failed in " + dir);
}

DatasetManifest read_manifest(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.txt");
  if (!is) throw DataError("cannot open manifest in " + dir);
  DatasetManifest m;
  std::string line;
  auto fail = [&](const std::string& why) -> void {
    throw DataError(dir + "/manifest.txt: " + why);
  };
  if (!std::getline(is, line) || line != "adsd-dataset v1") fail("bad header line");
  std::size_t classes = 0, samples = 0;
  {
    std::getline(is, line);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag >> m.height >> m.width) || tag != "size") fail("bad size line");
  }
  {
    std::getline(is, line);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag >> classes) || tag != "classes" || classes < 2) fail("bad classes line");
  }
  m.class_names.resize(classes);
  m.class_pixels.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    std::getline(is, line);
    std::istringstream ss(line);
    std::string tag;
    std::size_t id;
    if (!(ss >> tag >> id >> m.class_names[c] >> m.class_pixels[c]) || tag != "class" || id != c)
      fail("bad class line " + std::to_string(c));
  }
  {
    std::getline(is, line);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag >> samples) || tag != "samples") fail("bad samples line");
  }
  for (std::size_t i = 0; i < samples; ++i) {
    std::getline(is, line);
    std::istringstream ss(line);
    std::string tag;
    ManifestEntry e;
    if (!(ss >> tag >> e.rgb >> e.depth >> e.labels >> e.normals) || tag != "sample")
      fail("bad sample line " + std::to_string(i));
    m.samples.push_back(e);
  }
  return m;
}

DatasetManifest generate_dataset(const std::string& dir, std::uint64_t seed, std::size_t count,
                                 std::size_t height, std::size_t width, int num_classes) {
  if (num_classes < 2) throw ConfigError("generate_dataset: need at least 2 classes");
  fs::create_directories(dir);
  const ScenePalette pal = make_palette(num_classes);

  DatasetManifest m;
  m.height = height;
  m.width = width;
  m.class_names = pal.names;
  m.class_pixels.assign(num_classes, 0);

  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec;
    spec.seed = stream_seed(seed, 0xDA7Aull, i);
    SplitMix64 meta(stream_seed(spec.seed, 0x0B7Ec75ull));
    spec.num_objects = 2 + static_cast<int>(meta.uniform_index(4));
    spec.num_classes = num_classes;
    spec.height = height;
    spec.width = width;
    const RgbdSample s = generate_scene(spec);

    char base[32];
    std::snprintf(base, sizeof(base), "s%05zu", i);
    ManifestEntry e;
    e.rgb = std::string(base) + "_rgb.tnsr";
    e.depth = std::string(base) + "_depth.tnsr";
    e.labels = std::string(base) + "_labels.tnsr";
    e.normals = std::string(base) + "_normals.tnsr";
    write_tensor_file((fs::path(dir) / e.rgb).string(), {height, width, 3}, s.rgb.data());
    write_tensor_file((fs::path(dir) / e.depth).string(), {height, width}, s.depth.data());
    write_tensor_file((fs::path(dir) / e.labels).string(), {height, width}, s.labels.data());
    write_tensor_file((fs::path(dir) / e.normals).string(), {height, width, 3}, s.normals.data());
    m.samples.push_back(e);

    for (std::int32_t lab : s.labels)
      if (lab != ops::kIgnoreIndex) ++m.class_pixels[lab];
  }
  write_manifest(dir, m);
  return m;
}

std::vector<RgbdSample> load_dataset(const std::string& dir, const DatasetManifest& manifest) {
  std::vector<RgbdSample> out;
  out.reserve(manifest.samples.size());
  for (const auto& e : manifest.samples) {
    RgbdSample s;
    s.height = manifest.height;
    s.width = manifest.width;
    TensorFileData rgb = read_tensor_file((fs::path(dir) / e.rgb).string());
    TensorFileData depth = read_tensor_file((fs::path(dir) / e.depth).string());
    TensorFileData labels = read_tensor_file((fs::path(dir) / e.labels).string());
    TensorFileData normals = read_tensor_file((fs::path(dir) / e.normals).string());
    if (rgb.dtype != Dtype::F32 || rgb.shape != Shape{s.height, s.width, 3})
      throw DataError(e.rgb + ": unexpected shape or dtype");
    if (depth.dtype != Dtype::F32 || depth.shape != Shape{s.height, s.width})
      throw DataError(e.depth + ": unexpected shape or dtype");
    if (labels.dtype != Dtype::I32 || labels.shape != Shape{s.height, s.width})
      throw DataError(e.labels + ": unexpected shape or dtype");
    if (normals.dtype != Dtype::F32 || normals.shape != Shape{s.height, s.width, 3})
      throw DataError(e.normals + ": unexpected shape or dtype");
    s.rgb = std::move(rgb.f32);
    s.depth = std::move(depth.f32);
    s.labels = std::move(labels.i32);
    s.normals = std::move(normals.f32);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace adsd
