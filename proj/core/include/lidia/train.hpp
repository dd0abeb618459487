#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lidia/image_io.hpp"
#include "lidia/net.hpp"

namespace lidia {

// Supervised training recipe: MSE on random crops, fresh noise per crop per
// epoch, Adam then SGD for the tail of the run. sigma_min == sigma_max is
// the fixed-noise case; a proper range trains a blind denoiser.
struct TrainConfig {
    int epochs = 100;
    int batch_images = 4;  // distinct images (one crop each) per step
    int crop_size = 64;
    double sigma_min = 25.0;
    double sigma_max = 25.0;
    double adam_lr = 1e-2;
    double sgd_lr = 1e-3;
    double switch_fraction = 0.8;  // fraction of epochs run with Adam
    std::uint64_t seed = 0;
    int threads = 1;
    std::vector<std::string> dataset;     // training image paths
    std::vector<std::string> validation;  // optional, PSNR logged per epoch
    int checkpoint_every = 0;             // epochs between checkpoints, 0 = off
    std::string checkpoint_prefix;        // model files <prefix>_epochN.mdl

    void validate(const ArchDescriptor& arch) const;
};

struct AdaptConfig {
    int epochs = 5;       // the text-image experiment in the writeups used 20
    double sigma = 25.0;
    double learning_rate = 1e-3;  // Adam
    int crop_size = 64;
    std::uint64_t seed = 0;
    int threads = 1;
    std::vector<std::string> related_images;  // external mode only
};

struct TrainLogRow {
    int epoch = 0;
    int step = 0;  // global step index
    double loss = 0.0;
    std::optional<double> val_psnr;  // present on the last step of an epoch
};

using TrainLogFn = std::function<void(const TrainLogRow&)>;

struct TrainResult {
    Model<float> model;
    std::vector<TrainLogRow> log;
};

// The sigma used for (epoch, step, slot) under this config; uniform over
// [sigma_min, sigma_max]. Exposed so the sampling contract is testable.
double draw_sigma(const TrainConfig& cfg, int epoch, int step, int slot);

// Trains a fresh model on the configured dataset. Deterministic given
// (cfg, seed, dataset). Non-finite loss aborts with NumericError after
// writing a last-good checkpoint when a checkpoint prefix is set.
TrainResult train_universal(const TrainConfig& cfg, const ArchDescriptor& arch,
                            const TrainLogFn& log_fn = {});

// Same recipe over preloaded images (test and adaptation entry point).
TrainResult train_universal_images(const TrainConfig& cfg, const ArchDescriptor& arch,
                                   const std::vector<ImagePlane>& images,
                                   const std::vector<ImagePlane>& validation,
                                   const TrainLogFn& log_fn = {});

// Fine-tunes a copy of the model on clean related images with fresh noise at
// cfg.sigma each crop. The input model is never mutated; 0 epochs returns it
// bit-exactly.
Model<float> adapt_external(const Model<float>& model, const AdaptConfig& cfg,
                            const TrainLogFn& log_fn = {});
Model<float> adapt_external_images(const Model<float>& model, const AdaptConfig& cfg,
                                   const std::vector<ImagePlane>& related,
                                   const TrainLogFn& log_fn = {});

struct InternalAdaptResult {
    Model<float> model;
    ImagePlane denoised_before;  // the frozen self-supervision target
    ImagePlane denoised_after;
};

// Self-supervision on the model's own output: the input is denoised once,
// that result is frozen as the regression target, and training minimizes
// || f(target + fresh noise) - target ||^2 on random crops. Concludes by
// re-denoising the input with the adapted weights.
InternalAdaptResult adapt_internal(const Model<float>& model, const ImagePlane& noisy,
                                   double sigma, const AdaptConfig& cfg,
                                   const TrainLogFn& log_fn = {});

struct EvalRow {
    std::string path;
    double psnr = 0.0;
    double noisy_psnr = 0.0;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    std::vector<std::string> warnings;  // unreadable/skipped inputs
    double mean_psnr = 0.0;
    double runtime_seconds = 0.0;  // reported to stdout, never logged to CSV
};

// Denoises every image at the given sigma with per-image deterministic noise
// derived from (seed, index). Unreadable files are skipped with a warning.
EvalResult evaluate(const Model<float>& model, const std::vector<std::string>& paths,
                    double sigma, std::uint64_t seed, int threads);

}  // namespace lidia
