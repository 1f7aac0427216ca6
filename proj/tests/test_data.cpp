#include <catch2/catch_amalgamated.hpp>

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "pscnet/data.hpp"
#include "pscnet/params.hpp"
#include "test_util.hpp"

using namespace pscnet;

namespace {

std::string tmp_path(const std::string& name) {
  static const auto dir = [] {
    auto d = std::filesystem::temp_directory_path() / "pscnet_data_tests";
    std::filesystem::create_directories(d);
    return d;
  }();
  return (dir / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

AnnotatedScene ramp_scene(int h, int w, std::vector<Point> points) {
  AnnotatedScene s;
  s.id = "ramp";
  s.image = Tensor<float>({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        s.image.raw()[(static_cast<size_t>(c) * h + i) * w + j] =
            static_cast<float>(c + 1) * static_cast<float>(i * w + j) / static_cast<float>(3 * h * w);
  s.points = std::move(points);
  return s;
}

}  // namespace

TEST_CASE("annotations parse, tolerate empty point lists and report bad lines") {
  const auto path = tmp_path("scenes.jsonl");
  write_text(path,
             "{\"image\": \"a.pgm\", \"points\": [[1.5, 2.25], [3.0, 4.0]]}\n"
             "\n"
             "{\"image\": \"b.pgm\", \"points\": []}\n");
  auto recs = load_annotations(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].id == "a.pgm");
  CHECK(recs[0].image_path == (std::filesystem::path(path).parent_path() / "a.pgm").string());
  REQUIRE(recs[0].points.size() == 2);
  CHECK(recs[0].points[0] == Point{1.5, 2.25});
  CHECK(recs[1].points.empty());

  write_text(path, "{\"image\": \"a.pgm\", \"points\": []}\nnot json\n");
  CHECK_THROWS_WITH(load_annotations(path), Catch::Matchers::ContainsSubstring("line 2"));
  write_text(path, "{\"image\": \"a.pgm\", \"points\": [[1.0]]}\n");
  CHECK_THROWS_WITH(load_annotations(path), Catch::Matchers::ContainsSubstring("[x, y]"));
  write_text(path, "{\"points\": []}\n");
  CHECK_THROWS_AS(load_annotations(path), Error);
}

TEST_CASE("annotation round trip preserves coordinates") {
  const auto path = tmp_path("roundtrip.jsonl");
  std::vector<SceneRecord> recs(2);
  recs[0].id = "x.pgm";
  recs[0].points = {{12.345678, 0.000001}, {511.999999, 3.141592}};
  recs[1].id = "y.pgm";
  write_annotations(path, recs);
  auto back = load_annotations(path);
  REQUIRE(back.size() == 2);
  REQUIRE(back[0].points.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(std::abs(back[0].points[i][0] - recs[0].points[i][0]) < 1e-6);
    CHECK(std::abs(back[0].points[i][1] - recs[0].points[i][1]) < 1e-6);
  }
  CHECK(back[1].points.empty());
}

TEST_CASE("pgm round trip is exact on the 8-bit lattice") {
  Tensor<float> img({1, 3, 5});
  for (int i = 0; i < 15; ++i) img.raw()[static_cast<size_t>(i)] = static_cast<float>((i * 17) % 256) / 255.0f;
  const auto path = tmp_path("gray.pgm");
  write_pgm(path, img);
  auto back = read_image(path);
  REQUIRE(back.shape() == Shape{3, 3, 5});
  for (int c = 0; c < 3; ++c)  // grayscale replicates across channels
    for (int i = 0; i < 15; ++i)
      CHECK(back.raw()[static_cast<size_t>(c) * 15 + i] == img.raw()[static_cast<size_t>(i)]);
}

TEST_CASE("ppm decodes interleaved rgb into planes and headers allow comments") {
  const auto path = tmp_path("color.ppm");
  std::string bytes = "P6\n# a comment\n2 1\n255\n";
  const unsigned char px[6] = {255, 0, 0, 0, 128, 255};
  bytes.append(reinterpret_cast<const char*>(px), 6);
  write_text(path, bytes);
  auto img = read_image(path);
  REQUIRE(img.shape() == Shape{3, 1, 2});
  CHECK(img.raw()[0] == 1.0f);          // r of pixel 0
  CHECK(img.raw()[1] == 0.0f);          // r of pixel 1
  CHECK(img.raw()[3] == 128.0f / 255);  // g of pixel 1
  CHECK(img.raw()[5] == 1.0f);          // b of pixel 1

  write_text(tmp_path("bad.pgm"), "P5\n2 2\n127\n0000");
  CHECK_THROWS_WITH(read_image(tmp_path("bad.pgm")), Catch::Matchers::ContainsSubstring("maxval"));
  write_text(tmp_path("short.pgm"), "P5\n4 4\n255\nxy");
  CHECK_THROWS_WITH(read_image(tmp_path("short.pgm")), Catch::Matchers::ContainsSubstring("truncated"));
  write_text(tmp_path("text.pgm"), "P2\n1 1\n255\n7");
  CHECK_THROWS_AS(read_image(tmp_path("text.pgm")), Error);
}

TEST_CASE("scene loading clamps out-of-bounds points and counts them") {
  auto scene = ramp_scene(4, 6, {});
  const auto img_path = tmp_path("clamp.pgm");
  write_pgm(img_path, scene.image);
  SceneRecord rec;
  rec.id = "clamp.pgm";
  rec.image_path = img_path;
  rec.points = {{6.0, 2.0}, {3.0, -1.0}, {1.0, 1.0}};
  int clamped = 0;
  auto loaded = load_scene(rec, &clamped);
  CHECK(clamped == 2);
  CHECK(loaded.points[0][0] < 6.0);
  CHECK(loaded.points[0][0] > 5.999999);
  CHECK(loaded.points[1][1] == 0.0);
  CHECK(loaded.points[2] == Point{1.0, 1.0});

  rec.image_path = tmp_path("does_not_exist.pgm");
  CHECK_THROWS_WITH(load_scene(rec), Catch::Matchers::ContainsSubstring("does_not_exist"));
}

TEST_CASE("shorter side cap downscales image and points together") {
  auto scene = ramp_scene(64, 32, {{10.0, 20.0}, {31.0, 63.0}});
  auto capped = limit_shorter_side(scene, 16);
  CHECK(capped.height() == 32);
  CHECK(capped.width() == 16);
  REQUIRE(capped.points.size() == 2);  // rescaling never drops points
  CHECK(capped.points[0] == Point{5.0, 10.0});
  CHECK(capped.points[1][0] < 16.0);
  CHECK(capped.points[1][1] == 31.5);

  auto again = limit_shorter_side(capped, 16);
  CHECK(again.image.raw() == capped.image.raw());
  CHECK(again.points == capped.points);

  auto small = ramp_scene(8, 32, {{1.0, 2.0}});
  auto kept = limit_shorter_side(small, 16);
  CHECK(kept.image.storage_id() == small.image.storage_id());
  CHECK(kept.points == small.points);
}

TEST_CASE("deterministic crop window keeps half-open membership") {
  auto scene = ramp_scene(16, 16, {{4.0, 6.0}, {12.0, 6.0}, {11.999, 7.0}, {3.999, 5.0}});
  auto out = augment_at(scene, 8, 2, 4, /*flip=*/false);
  CHECK(out.height() == 8);
  CHECK(out.width() == 8);
  // window x in [4, 12), y in [2, 10): x=12 dropped, x=11.999 kept, x=3.999 dropped
  REQUIRE(out.points.size() == 2);
  CHECK(out.points[0] == Point{0.0, 4.0});
  CHECK(std::abs(out.points[1][0] - 7.999) < 1e-12);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(out.image.raw()[static_cast<size_t>(i) * 8 + j] ==
            scene.image.raw()[static_cast<size_t>(i + 2) * 16 + (j + 4)]);

  auto ident = augment_at(scene, 16, 0, 0, false);
  CHECK(ident.image.raw() == scene.image.raw());
  CHECK(ident.points == scene.points);
}

TEST_CASE("horizontal flip mirrors image and coordinates and is an involution") {
  auto scene = ramp_scene(8, 8, {{1.25, 3.0}, {0.0, 2.0}});
  auto flipped = augment_at(scene, 8, 0, 0, true);
  REQUIRE(flipped.points.size() == 2);
  CHECK(flipped.points[0] == Point{6.75, 3.0});
  CHECK(flipped.points[1][0] < 8.0);  // x=0 maps to the far edge, clamped in bounds
  CHECK(flipped.points[1][0] > 7.999999);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(flipped.image.raw()[static_cast<size_t>(i) * 8 + j] ==
            scene.image.raw()[static_cast<size_t>(i) * 8 + (7 - j)]);

  auto twice = augment_at(flipped, 8, 0, 0, true);
  CHECK(twice.image.raw() == scene.image.raw());
  CHECK(twice.points[0] == scene.points[0]);

  CHECK_THROWS_AS(augment_at(scene, 9, 0, 0, false), Error);
  CHECK_THROWS_AS(augment_at(scene, 4, 5, 0, false), Error);
}

TEST_CASE("randomized augmentation is seeded and explores both flip outcomes") {
  auto scene = ramp_scene(24, 24, {{5.5, 5.5}, {20.0, 12.0}});
  std::mt19937 a(7), b(7);
  auto outA = augment(scene, 8, a), outB = augment(scene, 8, b);
  CHECK(outA.image.raw() == outB.image.raw());
  CHECK(outA.points == outB.points);

  // Marker pixel reveals the flip: with a crop at (0,0) the corner value
  // lands at column 0 unflipped and column crop-1 flipped.
  int flips = 0, keeps = 0;
  for (int seed = 0; seed < 40; ++seed) {
    std::mt19937 rng(static_cast<unsigned>(seed));
    auto out = augment(scene, 8, rng);
    CHECK(out.height() == 8);
    for (const auto& p : out.points) {
      CHECK(p[0] >= 0.0);
      CHECK(p[0] < 8.0);
      CHECK(p[1] >= 0.0);
      CHECK(p[1] < 8.0);
    }
    std::mt19937 replay(static_cast<unsigned>(seed));
    const int top = std::uniform_int_distribution<int>(0, 16)(replay);
    const int left = std::uniform_int_distribution<int>(0, 16)(replay);
    const bool flip = std::uniform_int_distribution<int>(0, 1)(replay) == 1;
    (flip ? flips : keeps) += 1;
    auto direct = augment_at(scene, 8, top, left, flip);
    CHECK(direct.image.raw() == out.image.raw());
    CHECK(direct.points == out.points);
  }
  CHECK(flips > 0);
  CHECK(keeps > 0);
}

TEST_CASE("synthetic scenes are reproducible and zero without points or noise") {
  std::mt19937 a(11), b(11), c(12);
  auto s1 = synth_scene(a, 32, 5, 2.0, 0.05);
  auto s2 = synth_scene(b, 32, 5, 2.0, 0.05);
  auto s3 = synth_scene(c, 32, 5, 2.0, 0.05);
  CHECK(s1.image.raw() == s2.image.raw());
  CHECK(s1.points == s2.points);
  CHECK(s1.image.raw() != s3.image.raw());
  CHECK(s1.points.size() == 5);
  for (const auto& p : s1.points) {
    CHECK(p[0] >= 0.0);
    CHECK(p[0] < 32.0);
  }
  for (float v : s1.image.raw()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  std::mt19937 z(1);
  auto blank = synth_scene(z, 16, 0, 2.0, 0.0);
  CHECK(blank.points.empty());
  for (float v : blank.image.raw()) CHECK(v == 0.0f);
}

TEST_CASE("blob integral matches the gaussian area formula") {
  const double sigma = 3.0;
  const double expect = 2.0 * M_PI * sigma * sigma;
  int checked = 0;
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937 rng(static_cast<unsigned>(seed));
    auto s = synth_scene(rng, 64, 1, sigma, 0.0);
    const auto& p = s.points[0];
    if (p[0] < 3 * sigma || p[0] > 64 - 3 * sigma || p[1] < 3 * sigma || p[1] > 64 - 3 * sigma) continue;
    double total = 0.0;
    for (int i = 0; i < 64 * 64; ++i) total += s.image.raw()[static_cast<size_t>(i)];
    CHECK(std::abs(total - expect) < 0.02 * expect);
    ++checked;
  }
  CHECK(checked >= 3);
}

TEST_CASE("splat mass is unit per interior point and truncated at edges") {
  auto centered = gaussian_splat({{32.0, 32.0}}, 64, 64, 2.0);
  CHECK(std::abs(centered.total_mass - 1.0) < 1e-3);
  double sum = 0.0;
  for (float v : centered.raster.values) {
    CHECK(v >= 0.0f);
    sum += v;
  }
  CHECK(std::abs(sum - centered.total_mass) < 1e-6);

  auto two = gaussian_splat({{16.0, 16.0}, {48.0, 48.0}}, 64, 64, 2.0);
  CHECK(std::abs(two.total_mass - 2.0) < 2e-3);

  auto corner = gaussian_splat({{0.0, 0.0}}, 64, 64, 2.0);
  CHECK(corner.total_mass < 0.5);
  CHECK(corner.total_mass > 0.1);

  auto empty = gaussian_splat({}, 8, 8, 2.0);
  CHECK(empty.total_mass == 0.0);
  for (float v : empty.raster.values) CHECK(v == 0.0f);
}

TEST_CASE("density raster file layout is 12 header bytes plus packed floats") {
  const auto path = tmp_path("one.dmf");
  write_raster(path, {1, 1, {0.5f}});
  auto bytes = slurp(path);
  REQUIRE(bytes.size() == 16);
  CHECK(std::memcmp(bytes.data(), "DMF1", 4) == 0);
  CHECK(bytes[4] == 1);  // height u32le
  CHECK(bytes[8] == 1);  // width u32le
  float v;
  std::memcpy(&v, bytes.data() + 12, 4);
  CHECK(v == 0.5f);
}

TEST_CASE("raster round trip is bit exact and corrupt files are rejected") {
  std::mt19937 rng(5);
  DensityRaster r{32, 32, {}};
  std::uniform_real_distribution<float> d(-10.0f, 10.0f);
  for (int i = 0; i < 32 * 32; ++i) r.values.push_back(d(rng));
  const auto path = tmp_path("grid.dmf");
  write_raster(path, r);
  auto back = read_raster(path);
  CHECK(back.height == 32);
  CHECK(back.width == 32);
  CHECK(std::memcmp(back.values.data(), r.values.data(), 4 * r.values.size()) == 0);

  auto bytes = slurp(path);
  auto bad = bytes;
  std::memcpy(bad.data(), "XXXX", 4);
  spit(tmp_path("badmagic.dmf"), bad);
  CHECK_THROWS_WITH(read_raster(tmp_path("badmagic.dmf")), Catch::Matchers::ContainsSubstring("magic"));

  auto cut = bytes;
  cut.resize(cut.size() - 3);
  spit(tmp_path("cut.dmf"), cut);
  CHECK_THROWS_AS(read_raster(tmp_path("cut.dmf")), Error);

  auto extra = bytes;
  extra.push_back(0);
  spit(tmp_path("extra.dmf"), extra);
  CHECK_THROWS_WITH(read_raster(tmp_path("extra.dmf")), Catch::Matchers::ContainsSubstring("payload"));

  auto huge = bytes;
  huge[7] = 0x7f;  // height high byte -> extent overflow
  spit(tmp_path("huge.dmf"), huge);
  CHECK_THROWS_WITH(read_raster(tmp_path("huge.dmf")), Catch::Matchers::ContainsSubstring("extents"));
}

TEST_CASE("checkpoint loader rejects tampered files") {
  ModelParams<float> params;
  auto t = params.add_parameter("a", Tensor<float>({2}, {1.0f, 2.0f}));
  const auto path = tmp_path("small.ckpt");
  save_checkpoint(path, params);
  const auto bytes = slurp(path);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  spit(tmp_path("badmagic.ckpt"), bad_magic);
  CHECK_THROWS_WITH(read_checkpoint(tmp_path("badmagic.ckpt")), Catch::Matchers::ContainsSubstring("magic"));

  auto cut = bytes;
  cut.resize(cut.size() - 5);
  spit(tmp_path("cut.ckpt"), cut);
  CHECK_THROWS_AS(read_checkpoint(tmp_path("cut.ckpt")), Error);

  auto flipped = bytes;
  flipped[10] ^= 0x40;  // payload bit flip breaks the checksum
  spit(tmp_path("flip.ckpt"), flipped);
  CHECK_THROWS_WITH(read_checkpoint(tmp_path("flip.ckpt")), Catch::Matchers::ContainsSubstring("checksum"));

  // Rebuild the file with the single record repeated: duplicate names are
  // rejected even when the checksum is valid.
  std::vector<unsigned char> record(bytes.begin() + 8, bytes.end() - 4);
  std::vector<unsigned char> payload;
  pscnet::detail::put_u32le(payload, 2);
  payload.insert(payload.end(), record.begin(), record.end());
  payload.insert(payload.end(), record.begin(), record.end());
  std::vector<unsigned char> dup = {'P', 'S', 'C', 'K'};
  dup.insert(dup.end(), payload.begin(), payload.end());
  pscnet::detail::put_u32le(dup, static_cast<uint32_t>(::crc32(0L, payload.data(), static_cast<uInt>(payload.size()))));
  spit(tmp_path("dup.ckpt"), dup);
  CHECK_THROWS_WITH(read_checkpoint(tmp_path("dup.ckpt")), Catch::Matchers::ContainsSubstring("duplicate"));

  ModelParams<float> bigger;
  bigger.add_parameter("a", Tensor<float>({2}));
  bigger.add_parameter("b", Tensor<float>({3}));
  CHECK_THROWS_WITH(load_checkpoint(path, bigger), Catch::Matchers::ContainsSubstring("b missing"));
  apply_checkpoint(read_checkpoint(path), bigger, /*require_complete=*/false);
  CHECK(bigger.find("a")->raw() == t.raw());
}
