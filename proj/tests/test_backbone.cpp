#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "pscnet/backbone.hpp"
#include "test_util.hpp"

using namespace pscnet;
using test_util::rand_tensor;

namespace {

// Conv parameter count computed independently of the layer code.
long long vgg_param_count(double ws) {
  const int blocks[5] = {2, 2, 4, 4, 4};
  const int widths[5] = {64, 128, 256, 512, 512};
  long long total = 0;
  int in_ch = 3;
  for (int b = 0; b < 5; ++b) {
    const int out_ch = round_channels(widths[b], ws);
    for (int i = 0; i < blocks[b]; ++i) {
      total += static_cast<long long>(out_ch) * in_ch * 9 + out_ch;
      in_ch = out_ch;
    }
  }
  return total;
}

std::string temp_path(const char* name) { return std::string("pscnet_test_") + name; }

}  // namespace

TEST_CASE("round_channels scales widths to multiples of 16 with a floor") {
  CHECK(round_channels(64, 1.0) == 64);
  CHECK(round_channels(512, 1.0) == 512);
  CHECK(round_channels(64, 0.125) == 16);   // 8 rounds up to the floor
  CHECK(round_channels(128, 0.125) == 16);
  CHECK(round_channels(256, 0.125) == 32);
  CHECK(round_channels(512, 0.125) == 64);
  CHECK(round_channels(512, 0.25) == 128);
  CHECK(round_channels(64, 0.01) == 16);
}

TEST_CASE("backbone output follows the stride-16 shape law") {
  ModelParams<float> params;
  std::mt19937 rng(1);
  Backbone<float> net(params, {0.125}, rng);
  CHECK(net.out_channels() == 64);

  std::mt19937 data_rng(2);
  auto y = net.forward(rand_tensor<float>({3, 64, 64}, data_rng));
  CHECK(y.shape() == Shape{64, 4, 4});
  auto y2 = net.forward(rand_tensor<float>({3, 96, 160}, data_rng));
  CHECK(y2.shape() == Shape{64, 6, 10});
}

TEST_CASE("full-width backbone maps 3x256x256 to 512x16x16") {
  ModelParams<float> params;
  std::mt19937 rng(3);
  Backbone<float> net(params, {1.0}, rng);
  CHECK(net.out_channels() == 512);
  std::mt19937 data_rng(4);
  auto y = net.forward(rand_tensor<float>({3, 256, 256}, data_rng, 0.0f, 1.0f));
  CHECK(y.shape() == Shape{512, 16, 16});
}

TEST_CASE("backbone rejects extents that are not multiples of 16") {
  ModelParams<float> params;
  std::mt19937 rng(5);
  Backbone<float> net(params, {0.125}, rng);
  try {
    net.forward(Tensor<float>({3, 100, 120}));
    FAIL("expected rejection");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("112x128") != std::string::npos);
  }
  CHECK_THROWS_AS(net.forward(Tensor<float>({1, 64, 64})), Error);
}

TEST_CASE("backbone forward is deterministic and zero input hits the bias fixed point") {
  ModelParams<float> params;
  std::mt19937 rng(6);
  Backbone<float> net(params, {0.125}, rng);
  Tensor<float> zero({3, 32, 32});
  auto a = net.forward(zero);
  auto b = net.forward(zero);
  CHECK(a.raw() == b.raw());
  // Bias starts at zero, so the zero image propagates to exactly zero.
  for (float v : a.raw()) CHECK(v == 0.0f);

  ModelParams<float> params2;
  std::mt19937 rng2(6);
  Backbone<float> twin(params2, {0.125}, rng2);
  CHECK(twin.forward(zero).raw() == a.raw());
}

TEST_CASE("backbone parameter count matches the layout formula and scales ~4x") {
  ModelParams<float> p8, p4;
  std::mt19937 rng(7);
  Backbone<float> n8(p8, {0.125}, rng);
  Backbone<float> n4(p4, {0.25}, rng);
  CHECK(p8.scalar_count() == vgg_param_count(0.125));
  CHECK(p4.scalar_count() == vgg_param_count(0.25));
  const double ratio = static_cast<double>(p4.scalar_count()) / static_cast<double>(p8.scalar_count());
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

TEST_CASE("external weights round-trip through the checkpoint file") {
  const std::string path = temp_path("backbone.ckpt");
  ModelParams<float> src_params;
  std::mt19937 rng(8);
  Backbone<float> src(src_params, {0.125}, rng);
  save_checkpoint(path, src_params);

  ModelParams<float> dst_params;
  std::mt19937 rng2(999);
  Backbone<float> dst(dst_params, {0.125}, rng2);
  std::mt19937 data_rng(9);
  auto x = rand_tensor<float>({3, 32, 32}, data_rng);
  REQUIRE(dst.forward(x).raw() != src.forward(x).raw());

  load_external_weights(path, dst_params);
  CHECK(dst.forward(x).raw() == src.forward(x).raw());

  // Round-trip bit exactness: saving the loaded model reproduces the file.
  const std::string path2 = temp_path("backbone2.ckpt");
  save_checkpoint(path2, dst_params);
  CHECK(detail::read_file_bytes(path, "test") == detail::read_file_bytes(path2, "test"));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("loading a narrower checkpoint into a wider model names the first mismatch") {
  const std::string path = temp_path("backbone_narrow.ckpt");
  ModelParams<float> narrow_params;
  std::mt19937 rng(10);
  Backbone<float> narrow(narrow_params, {0.125}, rng);
  save_checkpoint(path, narrow_params);

  ModelParams<float> wide_params;
  std::mt19937 rng2(11);
  Backbone<float> wide(wide_params, {0.25}, rng2);
  try {
    load_external_weights(path, wide_params);
    FAIL("expected shape mismatch");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("shape mismatch") != std::string::npos);
    CHECK(msg.find("backbone.block") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint records load by name, not position") {
  // Two registries hold the same tensors registered in different orders.
  ModelParams<float> a_params;
  std::mt19937 rng(12);
  Tensor<float> w1({2, 3});
  Tensor<float> w2({4});
  fill_uniform(w1, 1.0f, rng);
  fill_uniform(w2, 1.0f, rng);
  a_params.add_parameter("alpha", w1);
  a_params.add_parameter("beta", w2);

  const std::string path = temp_path("reorder.ckpt");
  save_checkpoint(path, a_params);

  ModelParams<float> b_params;
  b_params.add_parameter("beta", Tensor<float>({4}));
  b_params.add_parameter("alpha", Tensor<float>({2, 3}));
  load_checkpoint(path, b_params);
  CHECK(b_params.find("alpha")->raw() == w1.raw());
  CHECK(b_params.find("beta")->raw() == w2.raw());
  std::remove(path.c_str());
}
