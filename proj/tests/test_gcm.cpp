#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "pscnet/gcm.hpp"
#include "pscnet/grad_check.hpp"
#include "test_util.hpp"

using namespace pscnet;
using test_util::rand_tensor;

namespace {

std::vector<double> embed_oracle(const std::vector<double>& x, int C, int H, int W, const std::vector<double>& alpha,
                                 double eps) {
  std::vector<double> s(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = x[static_cast<size_t>((c * H + i) * W + j)];
        acc += v * v;
      }
    s[static_cast<size_t>(c)] = alpha[static_cast<size_t>(c)] * std::sqrt(acc + eps);
  }
  return s;
}

struct FaultGuard {
  ~FaultGuard() { test_hooks::channel_norm_scale_fault() = false; }
};

}  // namespace

TEST_CASE("embedding of zeros is alpha times sqrt(eps)") {
  auto x = Tensor<double>({3, 4, 4});
  auto alpha = Tensor<double>::full({3}, 1.0);
  auto s = gcm_embed(x, alpha, 1e-4);
  for (double v : s.raw()) CHECK(v == Catch::Approx(0.01).margin(1e-12));
}

TEST_CASE("embedding of a 3-4-5 channel is exact") {
  Tensor<double> x({1, 1, 2}, {3.0, 4.0});
  auto s = gcm_embed(x, Tensor<double>::full({1}, 2.0), 0.0);
  CHECK(s.raw()[0] == 10.0);
}

TEST_CASE("embedding matches the double-loop evaluation") {
  std::mt19937 rng(1);
  auto x = rand_tensor({8, 5, 5}, rng);
  auto alpha = rand_tensor({8}, rng, 0.5, 2.0);
  auto s = gcm_embed(x, alpha, 1e-4);
  auto ref = embed_oracle(x.raw(), 8, 5, 5, alpha.raw(), 1e-4);
  for (int c = 0; c < 8; ++c) CHECK(std::abs(s.raw()[static_cast<size_t>(c)] - ref[static_cast<size_t>(c)]) < 1e-7);
}

TEST_CASE("embedding is scale covariant at eps=0") {
  std::mt19937 rng(2);
  auto x = rand_tensor({4, 3, 3}, rng);
  auto alpha = rand_tensor({4}, rng, 0.5, 2.0);
  const double lambda = 3.7;
  auto s1 = gcm_embed(mul(x, lambda), alpha, 0.0);
  auto s2 = mul(gcm_embed(x, alpha, 0.0), lambda);
  for (int c = 0; c < 4; ++c)
    CHECK(s1.raw()[static_cast<size_t>(c)] == Catch::Approx(s2.raw()[static_cast<size_t>(c)]).epsilon(1e-12));
}

TEST_CASE("channel normalization hand cases") {
  // Dirac kernel keeps s; equal entries of either sign normalize to sign(v).
  for (double v : {2.5, -2.5}) {
    auto s = Tensor<double>::full({6}, v);
    auto st = gcm_transform(s, Tensor<double>({3}, {0.0, 1.0, 0.0}), 0.0);
    for (double u : st.raw()) CHECK(u == Catch::Approx(v > 0 ? 1.0 : -1.0).epsilon(1e-12));
  }

  Tensor<double> shat({4}, {3.0, 4.0, 0.0, 0.0});
  auto st = channel_norm(shat, 0.0);
  CHECK(st.raw()[0] == Catch::Approx(1.2).epsilon(1e-12));
  CHECK(st.raw()[1] == Catch::Approx(1.6).epsilon(1e-12));
  CHECK(st.raw()[2] == 0.0);
  CHECK(st.raw()[3] == 0.0);
}

TEST_CASE("normalized energy satisfies sum st^2 == C*S/(S+eps)") {
  std::mt19937 rng(3);
  const int C = 32;
  auto s = rand_tensor({C}, rng, -2.0, 2.0);
  auto kernel = rand_tensor({3}, rng);
  const double eps = 1e-4;

  auto shat = conv1d_channel(s, kernel);
  double S = 0;
  for (double v : shat.raw()) S += v * v;
  auto st = gcm_transform(s, kernel, eps);
  double energy = 0;
  for (double v : st.raw()) energy += v * v;
  CHECK(std::abs(energy - C * S / (S + eps)) < 1e-6);
}

TEST_CASE("scale fault hook breaks only the energy identity") {
  FaultGuard reset;
  std::mt19937 rng(4);
  const int C = 16;
  auto shat = rand_tensor({C}, rng, -2.0, 2.0);
  const double eps = 1e-4;
  double S = 0;
  for (double v : shat.raw()) S += v * v;

  test_hooks::channel_norm_scale_fault() = true;
  auto st = channel_norm(shat, eps);
  double energy = 0;
  for (double v : st.raw()) energy += v * v;
  CHECK(std::abs(energy - C * S / (S + eps)) > 1.0);                    // the identity now fails
  CHECK(energy == Catch::Approx(C * C * S / (S + eps)).epsilon(1e-9));  // by exactly the flipped factor

  // Forward and backward flip together, so gradients stay consistent.
  std::vector<Tensor<double>> inputs = {shat};
  auto probe = rand_tensor({C}, rng);
  auto res = grad_check(
      [&probe, eps](const std::vector<Tensor<double>>& in) { return sum_all(mul(channel_norm(in[0], eps), probe)); },
      inputs);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("conv1d excitation is shift equivariant away from the zero-padded ends") {
  std::mt19937 rng(5);
  const int C = 16;
  auto s = rand_tensor({C}, rng);
  auto k = rand_tensor({3}, rng);
  Tensor<double> shifted({C});
  for (int c = 0; c < C; ++c) shifted.raw()[static_cast<size_t>((c + 1) % C)] = s.raw()[static_cast<size_t>(c)];
  auto a = conv1d_channel(s, k);
  auto b = conv1d_channel(shifted, k);
  for (int c = 1; c <= C - 3; ++c)
    CHECK(b.raw()[static_cast<size_t>(c + 1)] == a.raw()[static_cast<size_t>(c)]);
}

TEST_CASE("zero-initialized gate is a bit-exact identity") {
  ModelParams<float> params;
  std::mt19937 rng(6);
  Gcm<float> gcm(params, "gcm", 8, rng);
  std::mt19937 data_rng(7);
  auto x = rand_tensor<float>({8, 6, 6}, data_rng, -3.0f, 3.0f);
  CHECK(gcm.forward(x).raw() == x.raw());
  CHECK(params.find("gcm.alpha") != nullptr);
  CHECK(params.find("gcm.kernel")->numel() == 3);
  CHECK(params.find("gcm.gate_w")->numel() == 8);
  CHECK(params.find("gcm.gate_beta")->numel() == 8);
}

TEST_CASE("gate attention stays inside (0,2) and saturating beta suppresses a channel") {
  std::mt19937 rng(8);
  const int C = 12;
  ModelParams<double> params;
  Gcm<double> gcm(params, "gcm", C, rng);
  gcm.gate_w.raw() = rand_tensor({C}, rng, -1.0, 1.0).raw();
  gcm.gate_beta.raw() = rand_tensor({C}, rng, -1.0, 1.0).raw();
  auto x = rand_tensor({C, 4, 4}, rng);
  auto y = gcm.forward(x);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 16; ++i) {
      const double xi = x.raw()[static_cast<size_t>(c * 16 + i)];
      if (xi == 0.0) continue;
      const double a = y.raw()[static_cast<size_t>(c * 16 + i)] / xi;
      CHECK(a > 0.0);
      CHECK(a < 2.0);
    }

  for (auto& v : gcm.gate_w.raw()) v = 0.0;
  for (auto& v : gcm.gate_beta.raw()) v = -20.0;
  auto suppressed = gcm.forward(x);
  for (size_t i = 0; i < x.raw().size(); ++i) CHECK(std::abs(suppressed.raw()[i]) <= 1e-8 * std::abs(x.raw()[i]));
}

TEST_CASE("literal gate form multiplies by tanh alone") {
  ModelParams<double> params;
  std::mt19937 rng(9);
  Gcm<double> gcm(params, "gcm", 4, rng, 1e-4, GcmGate::kLiteral);
  auto x = rand_tensor({4, 3, 3}, rng);
  auto y = gcm.forward(x);
  for (double v : y.raw()) CHECK(v == 0.0);  // tanh(0) = 0 kills the zero-initialized gate

  gcm.gate_w.raw() = {0.0, 0.0, 0.0, 0.0};
  gcm.gate_beta.raw() = {100.0, 100.0, 100.0, 100.0};
  auto y2 = gcm.forward(x);
  for (size_t i = 0; i < x.raw().size(); ++i)
    CHECK(y2.raw()[i] == Catch::Approx(x.raw()[i]).margin(1e-12));  // tanh saturates to 1
}

TEST_CASE("gcm gradients match finite differences through embed, transform and gate") {
  ModelParams<double> params;
  std::mt19937 rng(10);
  Gcm<double> gcm(params, "gcm", 4, rng);
  gcm.gate_w.raw() = {0.3, -0.2, 0.1, 0.4};
  gcm.gate_beta.raw() = {-0.1, 0.2, 0.0, -0.3};
  std::mt19937 data_rng(11);
  std::vector<Tensor<double>> inputs;
  inputs.push_back(rand_tensor({4, 6, 6}, data_rng));
  for (const auto& e : params.entries()) inputs.push_back(e.tensor);

  auto probe = rand_tensor({4, 6, 6}, data_rng);
  auto res = grad_check(
      [&gcm, &probe](const std::vector<Tensor<double>>& in) { return sum_all(mul(gcm.forward(in[0]), probe)); },
      inputs);
  INFO("max rel error " << res.max_rel_error << " at input " << res.worst_input);
  CHECK(res.max_rel_error < 1e-6);
}
