#pragma once

// Bias-corrected Adam, the batch-size-1 training loop and MAE/RMSE
// evaluation. Every run is a pure function of its config seed: shuffles,
// crops and the validation split all draw from one seeded generator.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "pscnet/config.hpp"
#include "pscnet/data.hpp"
#include "pscnet/model.hpp"
#include "pscnet/params.hpp"
#include "pscnet/supervision.hpp"

namespace pscnet {

template <typename T>
struct AdamState {
  long long step = 0;
  std::vector<std::vector<T>> m, v;  // first and second moments, one slot per trainable entry
};

template <typename T>
inline void adam_step(AdamState<T>& state, ModelParams<T>& params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
                      T eps = T(1e-8)) {
  std::vector<const typename ModelParams<T>::Entry*> trainable;
  for (const auto& e : params.entries())
    if (e.trainable) trainable.push_back(&e);
  if (state.m.empty()) {
    state.m.resize(trainable.size());
    state.v.resize(trainable.size());
    for (size_t k = 0; k < trainable.size(); ++k) {
      state.m[k].assign(trainable[k]->tensor.numel(), T(0));
      state.v[k].assign(trainable[k]->tensor.numel(), T(0));
    }
  }
  detail::require(state.m.size() == trainable.size(), "adam_step: moment count does not match trainable parameters");
  ++state.step;
  const T c1 = T(1) - std::pow(beta1, static_cast<T>(state.step));
  const T c2 = T(1) - std::pow(beta2, static_cast<T>(state.step));
  for (size_t k = 0; k < trainable.size(); ++k) {
    Tensor<T> t = trainable[k]->tensor;
    detail::require(state.m[k].size() == static_cast<size_t>(t.numel()),
                    "adam_step: moment shape does not match parameter " + trainable[k]->name);
    t.ensure_grad();
    T* p = t.raw().data();
    const T* g = t.grad_raw().data();
    T* m = state.m[k].data();
    T* v = state.v[k].data();
    for (size_t i = 0; i < state.m[k].size(); ++i) {
      m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
      v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

struct EvalReport {
  struct PerImage {
    std::string id;
    double predicted = 0.0;
    double ground_truth = 0.0;
    double abs_error = 0.0;
  };
  std::vector<PerImage> images;
  double mae = 0.0;
  double rmse = 0.0;
  int k() const { return static_cast<int>(images.size()); }
};

namespace detail {

inline void finalize_report(EvalReport& report) {
  require(!report.images.empty(), "evaluate: no scenes");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (auto& row : report.images) {
    row.abs_error = std::abs(row.predicted - row.ground_truth);
    abs_sum += row.abs_error;
    sq_sum += row.abs_error * row.abs_error;
  }
  report.mae = abs_sum / static_cast<double>(report.images.size());
  report.rmse = std::sqrt(sq_sum / static_cast<double>(report.images.size()));
}

}  // namespace detail

// Full-image evaluation: shorter-side cap, stride padding, forward in eval
// mode, density cropped back to the image extent. Images may be processed by
// several workers; the aggregation order is the input order regardless of
// thread count.
inline EvalReport evaluate(const std::vector<AnnotatedScene>& scenes, PscnetModel<float>& model,
                           int max_shorter_side = 2048, int threads = 1) {
  detail::require(!scenes.empty(), "evaluate: no scenes");
  EvalReport report;
  report.images.resize(scenes.size());
  std::atomic<size_t> cursor{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = cursor.fetch_add(1);
      if (i >= scenes.size()) return;
      auto scene = limit_shorter_side(scenes[i], max_shorter_side);
      auto padded = pad_to_stride(scene.image);
      auto density = model.forward(padded.image, Mode::kEval);
      auto cropped = crop_density(density, padded.orig_h, padded.orig_w);
      auto& row = report.images[i];
      row.id = scene.id;
      row.predicted = static_cast<double>(predicted_count(cropped));
      row.ground_truth = static_cast<double>(scene.points.size());
    }
  };
  const int extra = std::max(0, std::min<int>(threads, static_cast<int>(scenes.size())) - 1);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(extra));
  for (int t = 0; t < extra; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  detail::finalize_report(report);
  return report;
}

struct TrainResult {
  long long steps = 0;
  double best_val_mae = std::numeric_limits<double>::quiet_NaN();
  long long best_step = -1;
  std::vector<double> bayes_history, count_history, total_history;  // one entry per step
};

namespace detail {

inline AnnotatedScene pad_scene_to(const AnnotatedScene& scene, int min_h, int min_w) {
  if (scene.height() >= min_h && scene.width() >= min_w) return scene;
  AnnotatedScene out;
  out.id = scene.id;
  out.points = scene.points;
  out.image = pad2d_br(scene.image, std::max(scene.height(), min_h), std::max(scene.width(), min_w));
  return out;
}

inline std::string format_step_line(long long step, double bayes, double count, double total) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "step=%lld bayes=%.9g count=%.9g total=%.9g", step, bayes, count, total);
  return buf;
}

}  // namespace detail

// Batch-size-1 loop over seeded epochs. Writes train.log, best.ckpt (lowest
// validation MAE) and last.ckpt under out_dir. Validation runs after every
// epoch and its metrics are appended to that epoch's final step line.
inline TrainResult train(const std::vector<AnnotatedScene>& dataset, const RunConfig& cfg, const std::string& out_dir,
                         std::ostream* echo = nullptr, int threads = 1) {
  detail::require(dataset.size() >= 2, "train: need at least 2 scenes, got " + std::to_string(dataset.size()));
  detail::require(cfg.crop_size > 0 && cfg.crop_size % 16 == 0, "train: crop_size must be a positive multiple of 16");
  detail::require(cfg.epochs > 0, "train: epochs must be positive");
  detail::require(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0, "train: val_fraction must be in [0, 1)");
  std::filesystem::create_directories(out_dir);

  std::mt19937 rng(static_cast<uint32_t>(cfg.seed * 2654435761u + 12345u));

  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  size_t n_val = cfg.val_fraction > 0.0
                     ? std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.val_fraction * dataset.size())))
                     : 0;
  n_val = std::min(n_val, dataset.size() - 1);

  std::vector<AnnotatedScene> train_scenes, val_scenes;
  for (size_t i = 0; i < order.size(); ++i) {
    auto scene = limit_shorter_side(dataset[order[i]], cfg.max_shorter_side);
    (i < n_val ? val_scenes : train_scenes).push_back(std::move(scene));
  }

  ModelParams<float> params;
  PscnetModel<float> model(params,
                           {.width_scale = cfg.width_scale, .use_gcm = true, .gcm_gate = cfg.gcm_gate},
                           cfg.seed);
  AdamState<float> adam;

  std::ofstream log(std::filesystem::path(out_dir) / "train.log", std::ios::trunc);
  if (!log) throw Error("train: cannot open train.log under " + out_dir);
  const std::string best_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
  const std::string last_path = (std::filesystem::path(out_dir) / "last.ckpt").string();

  SupervisionConfig sup;
  sup.sigma = cfg.sigma;
  sup.background_margin = background_margin_for_crop(cfg.crop_size, cfg.crop_size, cfg.bg_margin_ratio);
  sup.use_background = cfg.use_background;

  TrainResult result;
  const auto grid = grid_coordinates(cfg.crop_size / 8, cfg.crop_size / 8);
  std::vector<size_t> epoch_order(train_scenes.size());
  for (size_t i = 0; i < epoch_order.size(); ++i) epoch_order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(epoch_order.begin(), epoch_order.end(), rng);
    for (size_t s = 0; s < epoch_order.size(); ++s) {
      const auto& scene = train_scenes[epoch_order[s]];
      double bayes_val = 0.0, count_val = 0.0, total_val = 0.0;
      try {
        auto crop = augment(detail::pad_scene_to(scene, cfg.crop_size, cfg.crop_size), cfg.crop_size, rng);
        auto post = build_posterior<float>(crop.points, grid, sup);
        TapeScope<float> scope;
        auto density = model.forward(crop.image, Mode::kTrain);
        auto bayes = bayesian_loss(density, post);
        auto count = counting_loss(sum_all(density), static_cast<float>(crop.points.size()));
        auto total = cfg.lambda == 0.0 ? bayes : add(bayes, mul(count, static_cast<float>(cfg.lambda)));
        bayes_val = bayes.item();
        count_val = count.item();
        total_val = total.item();
        if (!std::isfinite(total_val)) throw Error("non-finite loss");
        backward(total);
      } catch (const Error& e) {
        throw Error("train: step " + std::to_string(adam.step + 1) + " on scene " + scene.id + ": " + e.what());
      }
      adam_step(adam, params, static_cast<float>(cfg.lr));
      params.zero_grads();
      result.bayes_history.push_back(bayes_val);
      result.count_history.push_back(count_val);
      result.total_history.push_back(total_val);

      std::string line = detail::format_step_line(adam.step, bayes_val, count_val, total_val);
      if (s + 1 == epoch_order.size() && !val_scenes.empty()) {
        auto report = evaluate(val_scenes, model, cfg.max_shorter_side, threads);
        char buf[96];
        std::snprintf(buf, sizeof(buf), " val_mae=%.9g val_rmse=%.9g", report.mae, report.rmse);
        line += buf;
        if (!(result.best_step >= 0) || report.mae < result.best_val_mae) {
          result.best_val_mae = report.mae;
          result.best_step = adam.step;
          save_checkpoint(best_path, params);
        }
      }
      log << line << '\n';
      log.flush();
      if (echo) *echo << line << '\n';
    }
  }
  save_checkpoint(last_path, params);
  if (result.best_step < 0) save_checkpoint(best_path, params);  // no validation split: best == last
  result.steps = adam.step;
  return result;
}

}  // namespace pscnet
