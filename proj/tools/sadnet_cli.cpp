// Command-line front end: training, inference, evaluation and diagnostics.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (missing/unreadable/malformed files), 3 numeric failure (non-finite loss,
// failed gradient check).

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include "sadnet/sadnet.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int run_train(const std::string& config_path) {
  const auto cfg = sadnet::load_train_config(config_path);
  sadnet::TrainHooks hooks;
  hooks.log = &std::cout;
  const auto result = sadnet::train_from_config(cfg, hooks);
  std::cerr << "trained to iteration " << result.checkpoint.iteration << "; checkpoint "
            << sadnet::checkpoint_path(cfg, "final").string() << "\n";
  return kExitOk;
}

int run_eval(const std::string& ckpt, const std::string& manifest, const std::string& format) {
  const auto report = sadnet::evaluate(sadnet::load_checkpoint(ckpt), sadnet::read_manifest(manifest));
  std::cout << (format == "tsv" ? report.tsv() : report.table());
  return kExitOk;
}

int run_gradcheck(const std::string& scope) {
  std::vector<sadnet::GradCheckResult> results;
  if (scope == "ops" || scope == "all") {
    auto r = sadnet::gradcheck_ops();
    results.insert(results.end(), r.begin(), r.end());
  }
  if (scope == "model" || scope == "all") {
    auto r = sadnet::gradcheck_model();
    results.insert(results.end(), r.begin(), r.end());
  }
  const auto failed = sadnet::report_gradchecks(results, std::cout);
  if (failed.empty()) {
    std::cout << "all " << results.size() << " gradient checks passed\n";
    return kExitOk;
  }
  std::cout << failed.size() << " gradient check(s) failed:";
  for (const auto& f : failed) std::cout << ' ' << f;
  std::cout << '\n';
  return kExitNumeric;
}

int run_inspect(const std::string& config_path, std::size_t height, std::size_t width) {
  const auto cfg = config_path.empty() ? sadnet::TrainConfig{} : sadnet::load_train_config(config_path);
  std::cout << sadnet::inspect_report(cfg.model, height, width);
  return kExitOk;
}

int run_make_synthetic(const std::string& out_dir, std::size_t count, std::size_t width, std::size_t height,
                       std::size_t channels, std::uint64_t seed) {
  if (channels != 1 && channels != 3) throw sadnet::UsageError("--channels must be 1 or 3");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw sadnet::DataError("cannot create '" + out_dir + "': " + ec.message());
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.%s", i, channels == 1 ? "pgm" : "ppm");
    sadnet::save_image(sadnet::synthetic_scene(width, height, channels, seed + i), std::filesystem::path(out_dir) / name);
  }
  std::cerr << "wrote " << count << " images to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-adaptive denoising network: train, denoise, evaluate"};
  app.require_subcommand(1);

  std::string config_path, ckpt, in_path, out_path, manifest, scope = "all", format = "table";
  std::string in_dir, out_dir;
  double sigma = 25.0;
  std::uint64_t seed = 0;
  std::size_t height = 320, width = 480, grid = 8, count = 20, channels = 1;
  int threads = 0;

  auto* train = app.add_subcommand("train", "Train from a key=value config file");
  train->add_option("--config", config_path, "Training config")->required();

  auto* denoise = app.add_subcommand("denoise", "Denoise one PGM/PPM image");
  denoise->add_option("--ckpt", ckpt, "Checkpoint")->required();
  denoise->add_option("--in", in_path, "Noisy input image")->required();
  denoise->add_option("--out", out_path, "Output image")->required();

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a clean/noisy manifest");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--manifest", manifest, "Manifest (clean<TAB>noisy<TAB>sigma<TAB>seed)")->required();
  eval->add_option("--format", format, "Report format")->check(CLI::IsMember({"table", "tsv"}));

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--scope", scope, "ops, model or all")->check(CLI::IsMember({"ops", "model", "all"}));

  auto* inspect = app.add_subcommand("inspect", "Print architecture, parameter count and FLOPs");
  inspect->add_option("--config", config_path, "Config file (defaults when omitted)");
  inspect->add_option("--height", height, "Input height for the FLOP count");
  inspect->add_option("--width", width, "Input width for the FLOP count");

  auto* make_noisy = app.add_subcommand("make-noisy", "Add AWGN to every image of a directory");
  make_noisy->add_option("--in-dir", in_dir, "Clean images (.pgm/.ppm)")->required();
  make_noisy->add_option("--sigma", sigma, "Noise level on the [0, 255] scale")->required();
  make_noisy->add_option("--seed", seed, "Base noise seed")->required();
  make_noisy->add_option("--out-dir", out_dir, "Output directory (noisy images + manifest.tsv)")->required();

  auto* export_offsets = app.add_subcommand("export-offsets", "Dump learned sampling positions as CSV");
  export_offsets->add_option("--ckpt", ckpt, "Checkpoint")->required();
  export_offsets->add_option("--in", in_path, "Input image")->required();
  export_offsets->add_option("--out", out_path, "Output CSV")->required();
  export_offsets->add_option("--grid", grid, "Grid step in full-resolution pixels");

  auto* make_synthetic = app.add_subcommand("make-synthetic", "Write piecewise-smooth synthetic clean images");
  make_synthetic->add_option("--out-dir", out_dir, "Output directory")->required();
  make_synthetic->add_option("--count", count, "Number of images");
  make_synthetic->add_option("--width", width, "Image width");
  make_synthetic->add_option("--height", height, "Image height");
  make_synthetic->add_option("--channels", channels, "1 (PGM) or 3 (PPM)");
  make_synthetic->add_option("--seed", seed, "Seed of the first image");

  app.add_option("--threads", threads, "Worker threads (0: runtime default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    sadnet::set_thread_count(threads);
    if (*train) return run_train(config_path);
    if (*denoise) {
      sadnet::denoise_file(ckpt, in_path, out_path);
      return kExitOk;
    }
    if (*eval) return run_eval(ckpt, manifest, format);
    if (*gradcheck) return run_gradcheck(scope);
    if (*inspect) return run_inspect(config_path, height, width);
    if (*make_noisy) {
      const auto entries = sadnet::make_noisy_corpus(in_dir, sigma, seed, out_dir);
      std::cerr << "wrote " << entries.size() << " noisy images and "
                << (std::filesystem::path(out_dir) / "manifest.tsv").string() << "\n";
      return kExitOk;
    }
    if (*export_offsets) {
      sadnet::export_offsets(ckpt, in_path, out_path, grid);
      return kExitOk;
    }
    if (*make_synthetic) {
      if (!make_synthetic->count("--width")) width = 64;
      if (!make_synthetic->count("--height")) height = 64;
      return run_make_synthetic(out_dir, count, width, height, channels, seed);
    }
  } catch (const sadnet::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const sadnet::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const sadnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const sadnet::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
