#pragma once

// Scene ingestion and generation: JSON Lines annotations, 8-bit PGM/PPM
// images, the shorter-side resize cap, crop/flip augmentation, synthetic
// blob scenes, Gaussian splatting and the DMF1 density raster format.
//
// Pixel (i, j) has its center at continuous coordinates (j + 0.5, i + 0.5),
// matching the stride-8 density grid (cell centers at 8j + 4).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pscnet/checkpoint.hpp"
#include "pscnet/supervision.hpp"
#include "pscnet/tensor.hpp"

#include "json.hpp"

namespace pscnet {

struct AnnotatedScene {
  Tensor<float> image;        // 3 x H x W, values in [0, 1]
  std::vector<Point> points;  // (x, y), 0 <= x < W, 0 <= y < H
  std::string id;

  int height() const { return image.extent(1); }
  int width() const { return image.extent(2); }
};

// Annotation line as stored on disk; the image is loaded separately so a
// missing file only fails the scene that references it.
struct SceneRecord {
  std::string id;          // the image path as written in the file
  std::string image_path;  // resolved against the annotation file's directory
  std::vector<Point> points;
};

namespace detail {

inline double clamp_coord(double v, int extent) {
  return std::min(std::max(v, 0.0), std::nextafter(static_cast<double>(extent), 0.0));
}

}  // namespace detail

inline std::vector<SceneRecord> load_annotations(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("annotations: cannot open " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<SceneRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw Error("annotations line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("image") || !j["image"].is_string() || !j.contains("points") ||
        !j["points"].is_array())
      throw Error("annotations line " + std::to_string(line_no) +
                  ": expected {\"image\": string, \"points\": [[x,y], ...]}");
    SceneRecord rec;
    rec.id = j["image"].get<std::string>();
    rec.image_path = (dir / rec.id).string();
    for (const auto& p : j["points"]) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        throw Error("annotations line " + std::to_string(line_no) + ": each point must be [x, y]");
      rec.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_annotations(const std::string& path, const std::vector<SceneRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("annotations: cannot open " + path + " for writing");
  for (const auto& rec : records) {
    nlohmann::json j;
    j["image"] = rec.id;
    auto& pts = j["points"] = nlohmann::json::array();
    for (const auto& p : rec.points) pts.push_back({p[0], p[1]});
    f << j.dump() << '\n';
  }
  if (!f) throw Error("annotations: short write to " + path);
}

// --- 8-bit PGM (P5) / PPM (P6) ---

namespace detail {

inline std::string next_pnm_token(ByteReader& r) {
  std::string tok;
  for (;;) {
    uint8_t c = r.u8();
    if (c == '#') {
      while (r.pos < r.buf.size() && r.buf[r.pos] != '\n') ++r.pos;
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
    if (r.pos >= r.buf.size()) return tok;
  }
}

}  // namespace detail

// Loads a binary PGM or PPM; grayscale is replicated to three channels.
inline Tensor<float> read_image(const std::string& path) {
  const auto buf = detail::read_file_bytes(path, "image");
  detail::ByteReader r{buf, 0, "image"};
  const std::string magic = detail::next_pnm_token(r);
  if (magic != "P5" && magic != "P6") throw Error("image: " + path + " is not a binary PGM/PPM (magic " + magic + ")");
  const int w = std::stoi(detail::next_pnm_token(r));
  const int h = std::stoi(detail::next_pnm_token(r));
  const int maxval = std::stoi(detail::next_pnm_token(r));
  if (w <= 0 || h <= 0) throw Error("image: " + path + " has invalid extents");
  if (maxval != 255) throw Error("image: " + path + " must be 8-bit (maxval 255), got " + std::to_string(maxval));
  const int file_channels = magic == "P6" ? 3 : 1;
  const size_t need = static_cast<size_t>(file_channels) * h * w;
  if (r.pos + need > buf.size()) throw Error("image: " + path + " truncated pixel data");

  Tensor<float> img({3, h, w});
  auto& v = img.raw();
  const unsigned char* px = buf.data() + r.pos;
  for (int i = 0; i < h * w; ++i)
    for (int c = 0; c < 3; ++c)
      v[static_cast<size_t>(c) * h * w + i] = static_cast<float>(px[i * file_channels + (c % file_channels)]) / 255.0f;
  return img;
}

// Writes channel 0 as binary PGM; values are clamped to [0, 1].
inline void write_pgm(const std::string& path, const Tensor<float>& img) {
  detail::require(img.rank() == 3 && (img.extent(0) == 1 || img.extent(0) == 3),
                  "write_pgm: expected a 1- or 3-channel CHW raster");
  const int h = img.extent(1), w = img.extent(2);
  std::ostringstream header;
  header << "P5\n" << w << ' ' << h << "\n255\n";
  const std::string hs = header.str();
  std::vector<unsigned char> buf(hs.begin(), hs.end());
  buf.reserve(buf.size() + static_cast<size_t>(h) * w);
  for (int i = 0; i < h * w; ++i) {
    const float x = std::min(std::max(img.raw()[static_cast<size_t>(i)], 0.0f), 1.0f);
    buf.push_back(static_cast<unsigned char>(std::lround(x * 255.0f)));
  }
  detail::write_file_bytes(path, buf, "image");
}

inline AnnotatedScene load_scene(const SceneRecord& rec, int* clamped_points = nullptr) {
  AnnotatedScene scene;
  scene.image = read_image(rec.image_path);
  scene.id = rec.id;
  scene.points = rec.points;
  int clamped = 0;
  for (auto& p : scene.points) {
    const double x = detail::clamp_coord(p[0], scene.width());
    const double y = detail::clamp_coord(p[1], scene.height());
    if (x != p[0] || y != p[1]) ++clamped;
    p = {x, y};
  }
  if (clamped_points) *clamped_points += clamped;
  return scene;
}

// Caps the shorter image side at max_side, downscaling bilinearly and
// scaling the point coordinates by the same ratio. Never upscales.
inline AnnotatedScene limit_shorter_side(AnnotatedScene scene, int max_side = 2048) {
  detail::require(max_side > 0, "limit_shorter_side: max_side must be positive");
  const int h = scene.height(), w = scene.width();
  if (std::min(h, w) <= max_side) return scene;
  const double r = static_cast<double>(max_side) / std::min(h, w);
  const int oh = static_cast<int>(std::llround(h * r));
  const int ow = static_cast<int>(std::llround(w * r));
  scene.image = bilinear_resize(scene.image, oh, ow);
  for (auto& p : scene.points)
    p = {detail::clamp_coord(p[0] * r, ow), detail::clamp_coord(p[1] * r, oh)};
  return scene;
}

// Deterministic core of augment: crop window at (top, left), optional
// horizontal flip. Points are kept on the half-open window [left, left+crop)
// x [top, top+crop); the flip maps x to crop_size - x.
inline AnnotatedScene augment_at(const AnnotatedScene& scene, int crop_size, int top, int left, bool flip) {
  const int h = scene.height(), w = scene.width();
  detail::require(crop_size > 0 && crop_size <= std::min(h, w), "augment: crop size must fit inside the image");
  detail::require(top >= 0 && top + crop_size <= h && left >= 0 && left + crop_size <= w,
                  "augment: crop window out of bounds");
  AnnotatedScene out;
  out.id = scene.id;
  out.image = Tensor<float>({3, crop_size, crop_size});
  const auto& src = scene.image.raw();
  auto& dst = out.image.raw();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < crop_size; ++i)
      for (int j = 0; j < crop_size; ++j) {
        const int sj = flip ? left + crop_size - 1 - j : left + j;
        dst[(static_cast<size_t>(c) * crop_size + i) * crop_size + j] =
            src[(static_cast<size_t>(c) * h + (top + i)) * w + sj];
      }
  for (const auto& p : scene.points) {
    double x = p[0] - left, y = p[1] - top;
    if (x < 0.0 || x >= crop_size || y < 0.0 || y >= crop_size) continue;
    if (flip) x = detail::clamp_coord(crop_size - x, crop_size);
    out.points.push_back({x, y});
  }
  return out;
}

inline AnnotatedScene augment(const AnnotatedScene& scene, int crop_size, std::mt19937& rng) {
  const int h = scene.height(), w = scene.width();
  detail::require(crop_size > 0 && crop_size <= std::min(h, w), "augment: crop size must fit inside the image");
  const int top = std::uniform_int_distribution<int>(0, h - crop_size)(rng);
  const int left = std::uniform_int_distribution<int>(0, w - crop_size)(rng);
  const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  return augment_at(scene, crop_size, top, left, flip);
}

// Synthetic scene: amplitude-1 Gaussian blobs at uniformly sampled points
// plus per-pixel uniform noise, grayscale replicated to three channels.
inline AnnotatedScene synth_scene(std::mt19937& rng, int size, int n_points, double blob_sigma, double noise) {
  detail::require(size > 0, "synth_scene: size must be positive");
  detail::require(n_points >= 0, "synth_scene: n_points must be nonnegative");
  detail::require(blob_sigma > 0.0, "synth_scene: blob sigma must be positive");
  AnnotatedScene scene;
  std::uniform_real_distribution<double> coord(0.0, static_cast<double>(size));
  for (int n = 0; n < n_points; ++n) {
    const double x = coord(rng), y = coord(rng);
    scene.points.push_back({detail::clamp_coord(x, size), detail::clamp_coord(y, size)});
  }
  std::vector<double> field(static_cast<size_t>(size) * size, 0.0);
  const int radius = static_cast<int>(std::ceil(4.0 * blob_sigma));
  for (const auto& p : scene.points) {
    const int ci = static_cast<int>(std::floor(p[1])), cj = static_cast<int>(std::floor(p[0]));
    for (int i = std::max(0, ci - radius); i <= std::min(size - 1, ci + radius); ++i)
      for (int j = std::max(0, cj - radius); j <= std::min(size - 1, cj + radius); ++j) {
        const double dx = j + 0.5 - p[0], dy = i + 0.5 - p[1];
        field[static_cast<size_t>(i) * size + j] += std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
      }
  }
  if (noise > 0.0) {
    std::uniform_real_distribution<double> u(0.0, noise);
    for (auto& v : field) v += u(rng);
  }
  scene.image = Tensor<float>({3, size, size});
  auto& v = scene.image.raw();
  for (int i = 0; i < size * size; ++i) {
    const float x = static_cast<float>(std::min(std::max(field[static_cast<size_t>(i)], 0.0), 1.0));
    v[static_cast<size_t>(i)] = v[static_cast<size_t>(i) + static_cast<size_t>(size) * size] =
        v[static_cast<size_t>(i) + 2 * static_cast<size_t>(size) * size] = x;
  }
  return scene;
}

// --- density rasters ---

struct DensityRaster {
  int height = 0, width = 0;
  std::vector<float> values;  // row-major
};

struct SplatResult {
  DensityRaster raster;
  double total_mass = 0.0;  // mass kept inside the image after edge truncation
};

// Each point contributes a discretized Gaussian normalized to unit mass over
// its full stencil before out-of-image cells are discarded.
inline SplatResult gaussian_splat(const std::vector<Point>& points, int h, int w, double sigma) {
  detail::require(h > 0 && w > 0, "gaussian_splat: extents must be positive");
  detail::require(sigma > 0.0, "gaussian_splat: sigma must be positive");
  SplatResult res;
  res.raster = {h, w, std::vector<float>(static_cast<size_t>(h) * w, 0.0f)};
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> acc(static_cast<size_t>(h) * w, 0.0);
  for (const auto& p : points) {
    const int ci = static_cast<int>(std::floor(p[1])), cj = static_cast<int>(std::floor(p[0]));
    double total = 0.0;
    for (int i = ci - radius; i <= ci + radius; ++i)
      for (int j = cj - radius; j <= cj + radius; ++j) {
        const double dx = j + 0.5 - p[0], dy = i + 0.5 - p[1];
        total += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
    for (int i = std::max(0, ci - radius); i <= std::min(h - 1, ci + radius); ++i)
      for (int j = std::max(0, cj - radius); j <= std::min(w - 1, cj + radius); ++j) {
        const double dx = j + 0.5 - p[0], dy = i + 0.5 - p[1];
        const double m = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) / total;
        acc[static_cast<size_t>(i) * w + j] += m;
        res.total_mass += m;
      }
  }
  for (size_t i = 0; i < acc.size(); ++i) res.raster.values[i] = static_cast<float>(acc[i]);
  return res;
}

// DMF1 file: "DMF1", u32le height, u32le width, then height*width f32le
// values in row-major order. Bit-exact round trip.
inline void write_raster(const std::string& path, const DensityRaster& r) {
  detail::require(r.height > 0 && r.width > 0, "raster: extents must be positive");
  detail::require(r.values.size() == static_cast<size_t>(r.height) * r.width,
                  "raster: value count does not match extents");
  std::vector<unsigned char> buf;
  buf.reserve(12 + 4 * r.values.size());
  for (char c : {'D', 'M', 'F', '1'}) buf.push_back(static_cast<unsigned char>(c));
  detail::put_u32le(buf, static_cast<uint32_t>(r.height));
  detail::put_u32le(buf, static_cast<uint32_t>(r.width));
  for (float v : r.values) detail::put_f32le(buf, v);
  detail::write_file_bytes(path, buf, "raster");
}

inline DensityRaster read_raster(const std::string& path) {
  const auto buf = detail::read_file_bytes(path, "raster");
  detail::ByteReader r{buf, 0, "raster"};
  if (r.bytes(4) != "DMF1") throw Error("raster: " + path + " has bad magic (expected DMF1)");
  const uint32_t h = r.u32le(), w = r.u32le();
  if (h == 0 || w == 0 || static_cast<uint64_t>(h) * w > (1u << 28))
    throw Error("raster: " + path + " has invalid extents " + std::to_string(h) + "x" + std::to_string(w));
  if (buf.size() - r.pos != static_cast<uint64_t>(h) * w * 4)
    throw Error("raster: " + path + " payload size does not match extents");
  DensityRaster out{static_cast<int>(h), static_cast<int>(w), {}};
  out.values.resize(static_cast<size_t>(h) * w);
  for (auto& v : out.values) v = r.f32le();
  return out;
}

}  // namespace pscnet
