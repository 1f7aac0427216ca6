#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "pscnet/data.hpp"
#include "pscnet/train.hpp"
#include "test_util.hpp"

using namespace pscnet;

namespace {

std::string tmp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "pscnet_train_tests" / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d.string();
}

// Scene built from a mirror-symmetric pair of blobs so that crops of the
// full extent look identical with and without the horizontal flip; every
// training step then sees the same input and plain descent applies.
AnnotatedScene symmetric_scene(int size) {
  AnnotatedScene s;
  s.id = "sym";
  s.points = {{size * 0.375, size * 0.5}, {size * 0.625, size * 0.5}};
  auto splat = gaussian_splat(s.points, size, size, 3.0);
  s.image = Tensor<float>({3, size, size});
  float mx = 0.0f;
  for (float v : splat.raster.values) mx = std::max(mx, v);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < size * size; ++i)
      s.image.raw()[static_cast<size_t>(c) * size * size + i] = splat.raster.values[static_cast<size_t>(i)] / mx;
  return s;
}

}  // namespace

TEST_CASE("adam single step reproduces the textbook recurrence") {
  ModelParams<double> params;
  auto w = params.add_parameter("w", Tensor<double>({2}, {1.0, -2.0}));
  w.ensure_grad();
  AdamState<double> state;

  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> p = {1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  const std::vector<std::vector<double>> grads = {{0.5, -1.5}, {-0.25, 1.0}};
  for (int t = 1; t <= 2; ++t) {
    w.grad_raw() = grads[static_cast<size_t>(t - 1)];
    adam_step(state, params, lr);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[static_cast<size_t>(t - 1)][static_cast<size_t>(i)];
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (1 - b1) * g;
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] + (1 - b2) * g * g;
      const double mhat = m[static_cast<size_t>(i)] / (1 - std::pow(b1, t));
      const double vhat = v[static_cast<size_t>(i)] / (1 - std::pow(b2, t));
      p[static_cast<size_t>(i)] -= lr * mhat / (std::sqrt(vhat) + eps);
      CHECK(std::abs(w.raw()[static_cast<size_t>(i)] - p[static_cast<size_t>(i)]) < 1e-10);
    }
  }
  CHECK(state.step == 2);
}

TEST_CASE("zero gradients leave parameters unchanged while moments decay") {
  ModelParams<double> params;
  auto w = params.add_parameter("w", Tensor<double>({3}, {0.5, -0.5, 2.0}));
  w.ensure_grad();
  AdamState<double> state;
  w.grad_raw() = {1.0, 1.0, 1.0};
  adam_step(state, params, 0.0);  // lr 0: seed the moments without moving
  const double m_after_first = state.m[0][0];
  w.grad_raw() = {0.0, 0.0, 0.0};
  const auto before = w.raw();
  adam_step(state, params, 0.0);
  CHECK(w.raw() == before);
  CHECK(state.m[0][0] == 0.9 * m_after_first);
  CHECK(state.v[0][0] < 0.001);
}

TEST_CASE("constant gradient drives the update magnitude toward lr") {
  ModelParams<double> params;
  auto w = params.add_parameter("w", Tensor<double>({1}, {0.0}));
  w.ensure_grad();
  AdamState<double> state;
  const double lr = 0.01;
  double prev = 0.0, delta = 0.0;
  for (int t = 0; t < 500; ++t) {
    w.grad_raw() = {2.5};
    prev = w.raw()[0];
    adam_step(state, params, lr);
    delta = prev - w.raw()[0];
  }
  CHECK(std::abs(delta - lr) < 0.05 * lr);
}

TEST_CASE("adam rejects a moment/parameter mismatch") {
  ModelParams<double> a;
  auto w = a.add_parameter("w", Tensor<double>({2}));
  w.ensure_grad();
  AdamState<double> state;
  adam_step(state, a, 0.01);

  ModelParams<double> two;
  two.add_parameter("w", Tensor<double>({2})).ensure_grad();
  two.add_parameter("u", Tensor<double>({2})).ensure_grad();
  CHECK_THROWS_WITH(adam_step(state, two, 0.01), Catch::Matchers::ContainsSubstring("moment"));

  ModelParams<double> wide;
  wide.add_parameter("w", Tensor<double>({5})).ensure_grad();
  CHECK_THROWS_WITH(adam_step(state, wide, 0.01), Catch::Matchers::ContainsSubstring("moment"));
}

TEST_CASE("mae and rmse follow their definitions") {
  EvalReport r;
  r.images.resize(2);
  r.images[0].predicted = 10.0;
  r.images[0].ground_truth = 12.0;
  r.images[1].predicted = 20.0;
  r.images[1].ground_truth = 16.0;
  pscnet::detail::finalize_report(r);
  CHECK(r.mae == Catch::Approx(3.0).epsilon(1e-12));
  CHECK(r.rmse == Catch::Approx(std::sqrt(10.0)).epsilon(1e-12));
  CHECK(r.images[0].abs_error == 2.0);

  EvalReport single;
  single.images.resize(1);
  single.images[0].predicted = 7.5;
  single.images[0].ground_truth = 9.0;
  pscnet::detail::finalize_report(single);
  CHECK(single.mae == single.rmse);

  EvalReport perfect;
  perfect.images.resize(3);
  for (auto& row : perfect.images) row.predicted = row.ground_truth = 4.0;
  pscnet::detail::finalize_report(perfect);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);

  EvalReport empty;
  CHECK_THROWS_WITH(pscnet::detail::finalize_report(empty), Catch::Matchers::ContainsSubstring("no scenes"));
}

TEST_CASE("evaluation is order-independent, thread-invariant and bounded by jensen") {
  ModelParams<float> params;
  PscnetModel<float> model(params, {.width_scale = 0.125}, 31);
  std::mt19937 rng(9);
  std::vector<AnnotatedScene> scenes;
  for (int i = 0; i < 5; ++i) scenes.push_back(synth_scene(rng, 32, 3 + i, 2.0, 0.1));

  auto base = evaluate(scenes, model);
  CHECK(base.k() == 5);
  CHECK(base.mae <= base.rmse + 1e-12);
  for (const auto& row : base.images) CHECK(row.abs_error == std::abs(row.predicted - row.ground_truth));

  auto reversed = std::vector<AnnotatedScene>(scenes.rbegin(), scenes.rend());
  auto rev = evaluate(reversed, model);
  CHECK(std::abs(rev.mae - base.mae) < 1e-9);
  CHECK(std::abs(rev.rmse - base.rmse) < 1e-9);

  auto threaded = evaluate(scenes, model, 2048, 3);
  CHECK(threaded.mae == base.mae);
  CHECK(threaded.rmse == base.rmse);
  for (int i = 0; i < 5; ++i) CHECK(threaded.images[static_cast<size_t>(i)].predicted == base.images[static_cast<size_t>(i)].predicted);

  CHECK_THROWS_WITH(evaluate({}, model), Catch::Matchers::ContainsSubstring("no scenes"));
}

TEST_CASE("descent strictly decreases the bayesian loss from a conditioned start") {
  // At the stock initialization the deep trunk leaves batch-norm sigma near
  // sqrt(eps), a cliff where even 1e-6-sized steps swing the loss; rescaling
  // the trunk weights moves the start to a conditioned point so the descent
  // property itself is visible. Fixed input, no background, pure Bayesian
  // term, the default lr.
  ModelParams<float> params;
  PscnetModel<float> model(params, {.width_scale = 0.125}, 5);
  for (const auto& e : params.entries())
    if (e.name.rfind("backbone.", 0) == 0 && e.name.size() > 7 &&
        e.name.compare(e.name.size() - 7, 7, ".weight") == 0) {
      Tensor<float> w = e.tensor;
      for (auto& v : w.raw()) v *= 2.4f;
    }
  std::mt19937 rng(3);
  auto scene = synth_scene(rng, 64, 6, 3.0, 0.05);
  SupervisionConfig sup;
  sup.use_background = false;
  auto post = build_posterior<float>(scene.points, grid_coordinates(8, 8), sup);
  AdamState<float> adam;
  std::vector<double> losses;
  for (int step = 0; step < 10; ++step) {
    TapeScope<float> scope;
    auto d = model.forward(scene.image, Mode::kTrain);
    auto loss = bayesian_loss(d, post);
    losses.push_back(static_cast<double>(loss.item()));
    backward(loss);
    adam_step(adam, params, 1e-5f);
    params.zero_grads();
  }
  for (size_t i = 1; i < losses.size(); ++i) {
    INFO("step " << i << ": " << losses[i - 1] << " -> " << losses[i]);
    CHECK(losses[i] < losses[i - 1]);
  }
}

TEST_CASE("training declines the bayesian loss and is seed-reproducible") {
  std::vector<AnnotatedScene> data(3, symmetric_scene(64));
  RunConfig cfg;
  cfg.width_scale = 0.125;
  cfg.crop_size = 64;
  cfg.lr = 1e-4;
  cfg.epochs = 5;
  cfg.seed = 5;
  cfg.lambda = 0.0;
  cfg.use_background = false;
  cfg.val_fraction = 0.1;

  const auto out1 = tmp_dir("declining_a");
  auto res = train(data, cfg, out1);
  REQUIRE(res.steps == 10);  // 2 train scenes x 5 epochs after the 1-scene validation split
  CHECK(res.bayes_history.back() < 0.5 * res.bayes_history.front());
  CHECK(res.total_history == res.bayes_history);  // lambda 0 trains on the bayesian term alone
  CHECK(res.best_step >= 1);
  CHECK(std::filesystem::exists(std::filesystem::path(out1) / "best.ckpt"));

  const auto out2 = tmp_dir("declining_b");
  auto res2 = train(data, cfg, out2);
  CHECK(res2.bayes_history == res.bayes_history);
  CHECK(res2.count_history == res.count_history);
  auto a = read_checkpoint((std::filesystem::path(out1) / "last.ckpt").string());
  auto b = read_checkpoint((std::filesystem::path(out2) / "last.ckpt").string());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.raw() == b[i].tensor.raw());
  }

  std::ifstream log(std::filesystem::path(out1) / "train.log");
  std::string line, last;
  int lines = 0;
  bool saw_val = false;
  while (std::getline(log, line)) {
    ++lines;
    CHECK(line.rfind("step=", 0) == 0);
    CHECK(line.find("bayes=") != std::string::npos);
    CHECK(line.find("count=") != std::string::npos);
    CHECK(line.find("total=") != std::string::npos);
    if (line.find("val_mae=") != std::string::npos) {
      saw_val = true;
      CHECK(line.find("val_rmse=") != std::string::npos);
    }
    last = line;
  }
  CHECK(lines == 10);
  CHECK(saw_val);
  CHECK(last.find("val_mae=") != std::string::npos);  // validation rides the epoch's final step

  CHECK_THROWS_WITH(train({data[0]}, cfg, tmp_dir("too_small")), Catch::Matchers::ContainsSubstring("2 scenes"));
  RunConfig bad = cfg;
  bad.crop_size = 50;
  CHECK_THROWS_WITH(train(data, bad, tmp_dir("bad_crop")), Catch::Matchers::ContainsSubstring("multiple of 16"));
}
