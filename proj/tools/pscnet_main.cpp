// pscnet command-line tool: train, eval, predict, synth, verify.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pscnet/config.hpp"
#include "pscnet/data.hpp"
#include "pscnet/model.hpp"
#include "pscnet/train.hpp"
#include "pscnet/verify.hpp"

namespace {

using pscnet::AnnotatedScene;
using pscnet::RunConfig;

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("PSCNET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0)
      throw pscnet::Error("PSCNET_THREADS must be a positive integer, got \"" + std::string(env) + "\"");
    return static_cast<int>(v);
  }
  return 1;
}

RunConfig config_or_defaults(const std::string& path, bool warn_on_missing) {
  if (path.empty()) {
    if (warn_on_missing) std::cerr << "warning: no --config given; using built-in defaults\n";
    return RunConfig{};
  }
  return pscnet::load_config(path);
}

std::vector<AnnotatedScene> load_dataset(const std::string& data_dir) {
  const auto ann = std::filesystem::path(data_dir) / "annotations.jsonl";
  const auto records = pscnet::load_annotations(ann.string());
  std::vector<AnnotatedScene> scenes;
  scenes.reserve(records.size());
  int clamped = 0;
  for (const auto& rec : records) scenes.push_back(pscnet::load_scene(rec, &clamped));
  if (clamped > 0)
    std::cerr << "warning: clamped " << clamped << " out-of-bounds annotation points onto the image\n";
  return scenes;
}

struct LoadedModel {
  pscnet::ModelParams<float> params;
  pscnet::PscnetModel<float> model;

  LoadedModel(const RunConfig& cfg, const std::string& ckpt_path)
      : model(params,
              {.width_scale = cfg.width_scale, .use_gcm = true, .gcm_gate = cfg.gcm_gate},
              cfg.seed) {
    pscnet::load_checkpoint(ckpt_path, params);
  }
};

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              int threads) {
  const auto cfg = config_or_defaults(config_path, /*warn_on_missing=*/true);
  const auto scenes = load_dataset(data_dir);
  pscnet::train(scenes, cfg, out_dir, &std::cout, resolve_threads(threads));
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& model_path, const std::string& data_dir,
             int threads) {
  const auto cfg = config_or_defaults(config_path, /*warn_on_missing=*/false);
  const auto scenes = load_dataset(data_dir);
  LoadedModel lm(cfg, model_path);
  const auto report = pscnet::evaluate(scenes, lm.model, cfg.max_shorter_side, resolve_threads(threads));
  std::printf("%-24s %12s %12s %10s\n", "id", "predicted", "ground_truth", "abs_error");
  for (const auto& im : report.images)
    std::printf("%-24s %12.3f %12.3f %10.3f\n", im.id.c_str(), im.predicted, im.ground_truth, im.abs_error);
  std::printf("K=%d MAE=%.4f RMSE=%.4f\n", report.k(), report.mae, report.rmse);
  nlohmann::json j;
  j["k"] = report.k();
  j["mae"] = report.mae;
  j["rmse"] = report.rmse;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_predict(const std::string& config_path, const std::string& model_path, const std::string& image_path,
                const std::string& out_path, const std::string& viz_path) {
  const auto cfg = config_or_defaults(config_path, /*warn_on_missing=*/false);
  LoadedModel lm(cfg, model_path);
  AnnotatedScene scene;
  scene.image = pscnet::read_image(image_path);
  scene.id = image_path;
  scene = pscnet::limit_shorter_side(scene, cfg.max_shorter_side);
  const auto padded = pscnet::pad_to_stride(scene.image);
  auto density = lm.model.forward(padded.image, pscnet::Mode::kEval);
  density = pscnet::crop_density(density, padded.orig_h, padded.orig_w);

  pscnet::DensityRaster raster;
  raster.height = density.extent(1);
  raster.width = density.extent(2);
  raster.values.assign(density.raw().begin(), density.raw().end());
  pscnet::write_raster(out_path, raster);

  if (!viz_path.empty()) {
    float peak = 0.0f;
    for (float v : raster.values) peak = std::max(peak, v);
    pscnet::Tensor<float> viz({1, raster.height, raster.width});
    if (peak > 0.0f)
      for (size_t i = 0; i < raster.values.size(); ++i) viz.raw()[i] = raster.values[i] / peak;
    pscnet::write_pgm(viz_path, viz);
  }

  std::printf("count %.9g\n", static_cast<double>(pscnet::predicted_count(density)));
  return 0;
}

int cmd_synth(int n, int size, const std::string& out_dir, uint32_t seed, bool force, int min_points,
              int max_points, double blob_sigma, double noise) {
  pscnet::detail::require(n >= 1, "synth: --n must be at least 1");
  pscnet::detail::require(size >= 16, "synth: --size must be at least 16");
  pscnet::detail::require(min_points >= 0 && max_points >= min_points,
                          "synth: need 0 <= --min-points <= --max-points");
  const std::filesystem::path out(out_dir);
  if (std::filesystem::exists(out) && !std::filesystem::is_empty(out) && !force)
    throw pscnet::Error("synth: output directory " + out_dir + " is not empty (use --force to write anyway)");
  std::filesystem::create_directories(out);

  std::mt19937 rng(seed);
  std::vector<pscnet::SceneRecord> records;
  for (int i = 0; i < n; ++i) {
    const int points = std::uniform_int_distribution<int>(min_points, max_points)(rng);
    const auto scene = pscnet::synth_scene(rng, size, points, blob_sigma, noise);
    char name[32];
    std::snprintf(name, sizeof(name), "scene%04d.pgm", i);
    pscnet::write_pgm((out / name).string(), scene.image);
    pscnet::SceneRecord rec;
    rec.id = name;
    rec.points = scene.points;
    records.push_back(std::move(rec));
  }
  pscnet::write_annotations((out / "annotations.jsonl").string(), records);
  std::printf("wrote %d scenes to %s\n", n, out_dir.c_str());
  return 0;
}

int cmd_verify(const std::string& filter, bool inject_fault) {
  if (inject_fault) pscnet::test_hooks::channel_norm_scale_fault() = true;
  const auto results = pscnet::verify::run_suites(filter, std::cout);
  if (results.empty()) throw pscnet::Error("verify: no suite matches filter \"" + filter + "\"");
  int failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  std::printf("%zu/%zu suites passed\n", results.size() - static_cast<size_t>(failed), results.size());
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pscnet: pyramidal-scale crowd counting"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (default: PSCNET_THREADS or 1)");

  std::string config_path, data_dir, out_dir, model_path, image_path, viz_path;

  auto* train = app.add_subcommand("train", "train a model on an annotated dataset");
  train->add_option("--config", config_path, "run configuration file");
  train->add_option("--data", data_dir, "dataset directory with annotations.jsonl")->required();
  train->add_option("--out", out_dir, "output directory for checkpoints and log")->required();
  train->add_option("--threads", threads, "worker thread cap");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on an annotated dataset");
  eval->add_option("--config", config_path, "run configuration file");
  eval->add_option("--model", model_path, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory with annotations.jsonl")->required();
  eval->add_option("--threads", threads, "worker thread cap");

  auto* predict = app.add_subcommand("predict", "predict a density map for one image");
  predict->add_option("--config", config_path, "run configuration file");
  predict->add_option("--model", model_path, "checkpoint file")->required();
  predict->add_option("--image", image_path, "input image (PGM or PPM)")->required();
  predict->add_option("--out", out_dir, "output density raster path")->required();
  predict->add_option("--viz", viz_path, "also write a max-normalized PGM visualization here");

  int n = 0, size = 128, min_points = 5, max_points = 20;
  uint32_t seed = 0;
  double blob_sigma = 3.0, noise = 0.05;
  bool force = false;
  auto* synth = app.add_subcommand("synth", "generate a synthetic annotated dataset");
  synth->add_option("--n", n, "number of scenes")->required();
  synth->add_option("--size", size, "square scene size in pixels");
  synth->add_option("--out", out_dir, "output dataset directory")->required();
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--min-points", min_points, "minimum points per scene");
  synth->add_option("--max-points", max_points, "maximum points per scene");
  synth->add_option("--blob-sigma", blob_sigma, "gaussian blob width");
  synth->add_option("--noise", noise, "uniform noise amplitude");
  synth->add_flag("--force", force, "write into a non-empty directory");

  std::string filter;
  bool inject_fault = false;
  auto* verify = app.add_subcommand("verify", "run the verification suites");
  verify->add_option("--filter", filter, "run only suites whose name contains this substring");
  verify->add_flag("--inject-fault", inject_fault,
                   "flip the channel normalization scale from sqrt(C) to C (fault-isolation demo)");

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_dir, threads);
    if (eval->parsed()) return cmd_eval(config_path, model_path, data_dir, threads);
    if (predict->parsed()) return cmd_predict(config_path, model_path, image_path, out_dir, viz_path);
    if (synth->parsed())
      return cmd_synth(n, size, out_dir, seed, force, min_points, max_points, blob_sigma, noise);
    if (verify->parsed()) return cmd_verify(filter, inject_fault);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
