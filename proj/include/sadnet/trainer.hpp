#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/checkpoint.hpp"
#include "sadnet/config.hpp"
#include "sadnet/data.hpp"
#include "sadnet/error.hpp"
#include "sadnet/image.hpp"
#include "sadnet/metrics.hpp"
#include "sadnet/model.hpp"
#include "sadnet/parallel.hpp"

namespace sadnet {

// Clean training images with the noise level to synthesise for each.
struct TrainingSet {
  std::vector<Tensor4<float>> images;
  std::vector<double> sigmas;
};

inline TrainingSet load_training_set(const std::vector<ManifestEntry>& entries, std::optional<double> sigma) {
  if (entries.empty()) throw DataError("training manifest is empty");
  std::vector<std::string> missing;
  for (const auto& e : entries) {
    if (!std::filesystem::exists(e.clean)) missing.push_back(e.clean.string());
  }
  if (!missing.empty()) {
    std::string msg = "missing training images:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  TrainingSet set;
  for (const auto& e : entries) {
    set.images.push_back(image_to_tensor<float>(load_image(e.clean)));
    set.sigmas.push_back(sigma ? *sigma : e.sigma);
  }
  return set;
}

struct TrainHooks {
  std::ostream* log = nullptr;  // one "iter<TAB>loss<TAB>lr<TAB>wall_s" record per log interval
  bool write_checkpoints = true;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per iteration run
};

inline std::filesystem::path checkpoint_path(const TrainConfig& cfg, const std::string& tag) {
  return cfg.checkpoint_dir / (tag + ".sadn");
}

namespace detail {

struct Batch {
  Tensor4<float> clean;
  Tensor4<float> noisy;
};

// Draws one minibatch. Per sample: image index, patch corner, augmentation
// code and a fresh noise seed, all from the training RNG in that order.
inline Batch sample_batch(const TrainingSet& set, const TrainConfig& cfg, Xoshiro256& rng) {
  const std::size_t P = cfg.patch_size;
  const std::size_t C = cfg.model.in_channels;
  Batch b{Tensor4<float>(Shape4{cfg.batch_size, C, P, P}), Tensor4<float>(Shape4{cfg.batch_size, C, P, P})};
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const std::size_t idx = rng.below(set.images.size());
    const auto& img = set.images[idx];
    const auto& s = img.shape();
    if (s.c != C) {
      throw DataError("training image " + std::to_string(idx) + " has " + std::to_string(s.c) +
                      " channels, model expects " + std::to_string(C));
    }
    if (s.h < P || s.w < P) {
      throw DataError("training image " + std::to_string(idx) + " (" + std::to_string(s.w) + "x" +
                      std::to_string(s.h) + ") is smaller than patch_size " + std::to_string(P));
    }
    const std::size_t top = rng.below(s.h - P + 1);
    const std::size_t left = rng.below(s.w - P + 1);
    const auto code = static_cast<unsigned>(rng.below(8));
    const std::uint64_t noise_seed = rng.next();
    const auto clean = augment(crop(img, top, left, P, P), code);
    const auto noisy = add_awgn(clean, NoiseSpec{set.sigmas[idx], noise_seed});
    std::copy(clean.data(), clean.data() + clean.size(), b.clean.data() + i * clean.size());
    std::copy(noisy.data(), noisy.data() + noisy.size(), b.noisy.data() + i * noisy.size());
  }
  return b;
}

}  // namespace detail

// Runs iterations until the checkpoint's iteration count reaches max_iters.
// Starts from `start` (fresh or resumed state).
inline TrainResult train(const TrainConfig& cfg, const TrainingSet& set, Checkpoint start, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (!cfg.max_iters) throw ConfigError("max_iters is required for training");
  require_matching_config(cfg.model, start.model, "resume checkpoint");
  if (cfg.threads > 0) set_thread_count(cfg.threads);

  TrainResult result{std::move(start), {}};
  auto& ck = result.checkpoint;
  Xoshiro256 rng;
  rng.set_state(ck.rng);
  const auto t0 = std::chrono::steady_clock::now();

  while (ck.iteration < *cfg.max_iters) {
    const auto batch = detail::sample_batch(set, cfg, rng);
    Tape<float> tape;
    BoundParams<float> bound(tape, ck.params);
    auto x = tape.constant(batch.noisy);
    auto y = tape.constant(batch.clean);
    auto out = sadnet_forward(x, cfg.model, bound).output;
    auto L = loss(cfg.loss_kind, out, y);
    const double loss_value = static_cast<double>(L.value()[0]);
    if (!std::isfinite(loss_value)) {
      const auto diag = checkpoint_path(cfg, "diverged");
      ck.rng = rng.state();
      save_checkpoint(ck, diag);
      throw NumericError("non-finite loss at iteration " + std::to_string(ck.iteration + 1) +
                         "; diagnostic checkpoint written to " + diag.string());
    }
    const auto grads = named_gradients(backward(L), bound);
    const double lr = lr_schedule(ck.iteration, cfg);
    adam_step(ck.params, grads, ck.adam, lr);
    ck.iteration += 1;
    ck.rng = rng.state();
    result.losses.push_back(loss_value);

    if (hooks.log && ck.iteration % cfg.log_interval == 0) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *hooks.log << ck.iteration << '\t' << std::setprecision(8) << loss_value << '\t' << lr << '\t'
                 << std::fixed << std::setprecision(3) << wall << std::defaultfloat << '\n'
                 << std::flush;
    }
    if (hooks.write_checkpoints && ck.iteration % cfg.checkpoint_interval == 0) {
      save_checkpoint(ck, checkpoint_path(cfg, "latest"));
    }
  }
  if (hooks.write_checkpoints) save_checkpoint(ck, checkpoint_path(cfg, "final"));
  return result;
}

// Fresh or resumed start, as selected by the config.
inline Checkpoint starting_checkpoint(const TrainConfig& cfg) {
  if (!cfg.resume.empty()) {
    auto ck = load_checkpoint(cfg.resume);
    require_matching_config(cfg.model, ck.model, cfg.resume.string());
    return ck;
  }
  return initial_checkpoint(cfg.model, cfg.adam(), cfg.seed);
}

inline TrainResult train_from_config(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.manifest.empty()) throw ConfigError("manifest is required for training");
  const auto set = load_training_set(read_manifest(cfg.manifest), cfg.sigma);
  return train(cfg, set, starting_checkpoint(cfg), hooks);
}

// ---------------------------------------------------------------------------
// Inference

// Reflect-pads to the size divisor, runs the network and crops back.
inline Tensor4<float> denoise_tensor(const Tensor4<float>& noisy, const ModelConfig& cfg,
                                     const ParamStore<float>& params) {
  const auto& s = noisy.shape();
  const std::size_t d = cfg.size_divisor();
  const std::size_t H = (s.h + d - 1) / d * d;
  const std::size_t W = (s.w + d - 1) / d * d;
  const auto padded = (H == s.h && W == s.w) ? noisy : reflect_pad(noisy, H, W);
  const auto out = sadnet_infer(padded, cfg, params);
  return (H == s.h && W == s.w) ? out : crop(out, 0, 0, s.h, s.w);
}

inline ImageBuffer denoise_image(const ImageBuffer& noisy, const Checkpoint& ck) {
  if (noisy.channels != ck.model.in_channels) {
    throw ConfigError("image has " + std::to_string(noisy.channels) + " channels, checkpoint model expects " +
                      std::to_string(ck.model.in_channels));
  }
  return tensor_to_image(denoise_tensor(image_to_tensor<float>(noisy), ck.model, ck.params));
}

inline void denoise_file(const std::filesystem::path& ckpt, const std::filesystem::path& in,
                         const std::filesystem::path& out) {
  const auto ck = load_checkpoint(ckpt);
  save_image(denoise_image(load_image(in), ck), out);
}

// PSNR/SSIM of the denoised noisy image against its clean reference, for
// every manifest entry. Missing files are all listed before aborting.
inline MetricReport evaluate(const Checkpoint& ck, const std::vector<ManifestEntry>& entries) {
  std::vector<std::string> missing;
  for (const auto& e : entries) {
    for (const auto& p : {e.clean, e.noisy}) {
      if (!std::filesystem::exists(p)) missing.push_back(p.string());
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing files in manifest:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  MetricReport report;
  for (const auto& e : entries) {
    const auto clean = load_image(e.clean);
    const auto denoised = denoise_image(load_image(e.noisy), ck);
    report.add(e.noisy.filename().string(), psnr(denoised, clean), ssim(denoised, clean));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Offset export

// CSV with one row per (scale, grid point, kernel tap). (py, px) is the grid
// point at full resolution; the sampling position (sample_y, sample_x) is
// p_s + p_k + offset in pixels of scale s, where p_s = (py, px) / 2^s and p_k
// the regular kernel tap. Multiply by 2^s to map it to full resolution.
inline std::string offsets_csv(const ImageBuffer& image, const Checkpoint& ck, std::size_t grid_step) {
  if (grid_step == 0) throw UsageError("export-offsets: grid step must be positive");
  const auto& cfg = ck.model;
  if (image.channels != cfg.in_channels) {
    throw ConfigError("image has " + std::to_string(image.channels) + " channels, checkpoint model expects " +
                      std::to_string(cfg.in_channels));
  }
  auto x = image_to_tensor<float>(image);
  const std::size_t d = cfg.size_divisor();
  const std::size_t H = (image.height + d - 1) / d * d;
  const std::size_t W = (image.width + d - 1) / d * d;
  if (H != image.height || W != image.width) x = reflect_pad(x, H, W);

  Tape<float> tape;
  BoundParams<float> bound(tape, ck.params, false);
  const auto fwd = sadnet_forward(tape.constant(x), cfg, bound);

  const std::size_t k = cfg.kernel_size;
  const std::size_t K = cfg.taps();
  const auto r = static_cast<double>(k / 2);
  std::ostringstream os;
  os << "scale,py,px,k,sample_y,sample_x,modulation\n";
  os << std::setprecision(9);
  for (std::size_t s = 0; s < cfg.scales; ++s) {
    const auto& off = fwd.scales[s].field.offsets.value();
    const auto& msk = fwd.scales[s].field.masks.value();
    for (std::size_t py = 0; py < image.height; py += grid_step) {
      for (std::size_t px = 0; px < image.width; px += grid_step) {
        const std::size_t sy = py >> s;
        const std::size_t sx = px >> s;
        for (std::size_t t = 0; t < K; ++t) {
          const double ky = static_cast<double>(t / k) - r;
          const double kx = static_cast<double>(t % k) - r;
          const double y = static_cast<double>(sy) + ky + static_cast<double>(off.at(0, 2 * t, sy, sx));
          const double xx = static_cast<double>(sx) + kx + static_cast<double>(off.at(0, 2 * t + 1, sy, sx));
          os << s << ',' << py << ',' << px << ',' << t << ',' << y << ',' << xx << ','
             << static_cast<double>(msk.at(0, t, sy, sx)) << '\n';
        }
      }
    }
  }
  return os.str();
}

inline void export_offsets(const std::filesystem::path& ckpt, const std::filesystem::path& in,
                           const std::filesystem::path& out, std::size_t grid_step) {
  const auto csv = offsets_csv(load_image(in), load_checkpoint(ckpt), grid_step);
  write_file_bytes(out, std::vector<std::uint8_t>(csv.begin(), csv.end()));
}

// ---------------------------------------------------------------------------
// Corpus generation

// Adds AWGN to every .pgm/.ppm in `in_dir` (sorted by name), writes the noisy
// images to `out_dir` and a manifest.tsv next to them. Image i gets the noise
// seed seed ^ i.
inline std::vector<ManifestEntry> make_noisy_corpus(const std::filesystem::path& in_dir, double sigma,
                                                    std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (!std::filesystem::is_directory(in_dir)) throw DataError("input directory '" + in_dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(in_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .pgm/.ppm images in '" + in_dir.string() + "'");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create '" + out_dir.string() + "': " + ec.message());

  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto clean = load_image(files[i]);
    const std::uint64_t s = seed ^ static_cast<std::uint64_t>(i);
    const auto noisy = add_awgn(image_to_tensor<double>(clean), NoiseSpec{sigma, s});
    const auto noisy_path = out_dir / files[i].filename();
    save_image(tensor_to_image(noisy), noisy_path);
    entries.push_back(ManifestEntry{std::filesystem::absolute(files[i]), std::filesystem::absolute(noisy_path), sigma, s});
  }
  write_manifest(out_dir / "manifest.tsv", entries);
  return entries;
}

}  // namespace sadnet
