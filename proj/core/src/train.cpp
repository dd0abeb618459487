#include "lidia/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "lidia/errors.hpp"
#include "lidia/rng.hpp"

namespace lidia {

namespace {

// Stream tags for the seed-derivation tree; one branch per randomness role.
constexpr std::uint64_t kTagInit = 0x01;
constexpr std::uint64_t kTagShuffle = 0x02;
constexpr std::uint64_t kTagCrop = 0x03;
constexpr std::uint64_t kTagNoise = 0x04;
constexpr std::uint64_t kTagSigma = 0x05;
constexpr std::uint64_t kTagValNoise = 0x06;
constexpr std::uint64_t kTagEvalNoise = 0x07;

std::uint64_t stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a, std::uint64_t b = 0) {
    return derive_seed(derive_seed(derive_seed(seed, tag), a), b);
}

ImagePlane random_crop(const ImagePlane& img, int crop, Xoshiro256pp& rng) {
    const int ch = std::min(crop, img.height);
    const int cw = std::min(crop, img.width);
    const int r0 = img.height > ch ? int(rng.next_below(std::uint64_t(img.height - ch + 1))) : 0;
    const int c0 = img.width > cw ? int(rng.next_below(std::uint64_t(img.width - cw + 1))) : 0;
    ImagePlane out(ch, cw, img.channels);
    for (int r = 0; r < ch; ++r)
        for (int c = 0; c < cw; ++c)
            for (int k = 0; k < img.channels; ++k) out.at(r, c, k) = img.at(r0 + r, c0 + c, k);
    return out;
}

std::uint64_t plane_checksum(const ImagePlane& img) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const float v : img.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        h = (h ^ bits) * 0x100000001b3ULL;
    }
    return h;
}

struct StepOutcome {
    double loss = 0.0;
};

// One optimizer step on a batch of (clean, noisy) crop pairs.
StepOutcome train_step(Model<float>& model, std::vector<NamedTensor<float>>& trainables,
                       OptimizerState<float>& opt, const std::vector<ImagePlane>& clean,
                       const std::vector<ImagePlane>& noisy, int threads) {
    BatchWorkspace<float> ws;
    ws.train_mode = true;
    ws.threads = threads;
    ws.images.resize(noisy.size());
    for (std::size_t i = 0; i < noisy.size(); ++i)
        ws.images[i].prep = prepare_image(noisy[i], model.arch, threads);
    forward_batch(model, ws);

    std::int64_t total_samples = 0;
    for (const auto& img : clean) total_samples += img.samples();
    double sse = 0.0;
    std::vector<Plane<float>> douts(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const auto& out = ws.images[i].output;
        const auto& ref = clean[i];
        douts[i] = Plane<float>(out.height, out.width, out.channels);
        for (std::int64_t j = 0; j < out.samples(); ++j) {
            const double d = double(out.data[j]) - double(ref.data[j]);
            sse += d * d;
            douts[i].data[j] = float(2.0 * d / double(total_samples));
        }
    }
    const double loss = sse / double(total_samples);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");

    for (auto& nt : trainables) {
        nt.tensor->ensure_grad();
        nt.tensor->zero_grad();
    }
    backward_batch(model, ws, douts);
    optimizer_step(std::span<NamedTensor<float>>(trainables), opt);
    update_running_stats(model, ws);
    return {loss};
}

std::vector<std::int64_t> tensor_sizes(std::vector<NamedTensor<float>>& trainables) {
    std::vector<std::int64_t> sizes;
    sizes.reserve(trainables.size());
    for (auto& nt : trainables) sizes.push_back(nt.tensor->count());
    return sizes;
}

// Shared epoch loop for universal training and both adaptation modes.
TrainResult run_training(Model<float> model, const std::vector<ImagePlane>& images,
                         const std::vector<ImagePlane>& validation, const TrainConfig& cfg,
                         const TrainLogFn& log_fn) {
    if (images.empty()) throw ConfigError("training requires a non-empty dataset");

    TrainResult result{std::move(model), {}};
    auto trainables = trainable_tensors(result.model);
    const auto sizes = tensor_sizes(trainables);

    OptimizerState<float> opt;
    OptimizerConfig<float> adam_cfg;
    adam_cfg.kind = OptKind::Adam;
    adam_cfg.learning_rate = float(cfg.adam_lr);
    opt.reset(adam_cfg, sizes);
    const int switch_epoch = int(std::llround(cfg.switch_fraction * cfg.epochs));
    bool on_sgd = false;

    Model<float> last_good = result.model;
    int global_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (!on_sgd && epoch >= switch_epoch && switch_epoch < cfg.epochs) {
            OptimizerConfig<float> sgd_cfg;
            sgd_cfg.kind = OptKind::Sgd;
            sgd_cfg.learning_rate = float(cfg.sgd_lr);
            sgd_cfg.momentum = 0.9f;
            opt.reset(sgd_cfg, sizes);
            on_sgd = true;
        }

        std::vector<std::size_t> order(images.size());
        std::iota(order.begin(), order.end(), 0);
        {
            Xoshiro256pp rng(stream(cfg.seed, kTagShuffle, std::uint64_t(epoch)));
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.next_below(i)]);
        }

        const int nbatches = int((order.size() + cfg.batch_images - 1) / cfg.batch_images);
        double epoch_loss = 0.0;
        for (int b = 0; b < nbatches; ++b) {
            std::vector<ImagePlane> clean, noisy;
            const std::size_t lo = std::size_t(b) * cfg.batch_images;
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_images);
            for (std::size_t s = lo; s < hi; ++s) {
                const int slot = int(s - lo);
                Xoshiro256pp crop_rng(
                    stream(cfg.seed, kTagCrop, std::uint64_t(epoch) << 20 | std::uint64_t(b), slot));
                ImagePlane crop = random_crop(images[order[s]], cfg.crop_size, crop_rng);
                const double sigma = draw_sigma(cfg, epoch, b, slot);
                NoiseSpec spec{sigma,
                               stream(cfg.seed, kTagNoise, std::uint64_t(epoch) << 20 | std::uint64_t(b), slot)};
                noisy.push_back(add_awgn(crop, spec));
                clean.push_back(std::move(crop));
            }

            StepOutcome out;
            try {
                out = train_step(result.model, trainables, opt, clean, noisy, cfg.threads);
            } catch (const NumericError& e) {
                if (!cfg.checkpoint_prefix.empty()) {
                    const std::string path = cfg.checkpoint_prefix + "_lastgood.mdl";
                    save_model(last_good, path);
                    throw NumericError(std::string(e.what()) + "; last good checkpoint written to " + path);
                }
                throw;
            }
            last_good = result.model;
            epoch_loss += out.loss;

            TrainLogRow row{epoch, global_step++, out.loss, std::nullopt};
            const bool epoch_end = b == nbatches - 1;
            if (epoch_end && !validation.empty()) {
                double acc = 0.0;
                for (std::size_t vi = 0; vi < validation.size(); ++vi) {
                    const double vsigma = (cfg.sigma_min + cfg.sigma_max) / 2.0;
                    NoiseSpec spec{vsigma, stream(cfg.seed, kTagValNoise, vi)};
                    ImagePlane vnoisy = add_awgn(validation[vi], spec);
                    DenoiseOptions<float> dopt;
                    dopt.threads = cfg.threads;
                    acc += psnr(denoise(vnoisy, result.model, dopt).image, validation[vi]);
                }
                row.val_psnr = acc / double(validation.size());
            }
            result.log.push_back(row);
            if (log_fn) log_fn(row);
        }

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_prefix.empty() &&
            (epoch + 1) % cfg.checkpoint_every == 0)
            save_model(result.model,
                       cfg.checkpoint_prefix + "_epoch" + std::to_string(epoch + 1) + ".mdl");
    }
    return result;
}

}  // namespace

void TrainConfig::validate(const ArchDescriptor& arch) const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_images < 1) throw ConfigError("batch_images must be >= 1");
    if (adam_lr <= 0 || sgd_lr <= 0) throw ConfigError("learning rates must be positive");
    if (sigma_min < 0 || sigma_max < sigma_min) throw ConfigError("bad sigma range");
    if (switch_fraction < 0 || switch_fraction > 1)
        throw ConfigError("switch_fraction must be in [0,1]");
    if (crop_size < 2 * arch.patch_side)
        throw ConfigError("crop_size must be >= 2 * patch_side");
}

double draw_sigma(const TrainConfig& cfg, int epoch, int step, int slot) {
    if (cfg.sigma_max == cfg.sigma_min) return cfg.sigma_min;
    Xoshiro256pp rng(stream(cfg.seed, kTagSigma, std::uint64_t(epoch) << 20 | std::uint64_t(step), slot));
    return cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * rng.next_unit();
}

TrainResult train_universal(const TrainConfig& cfg, const ArchDescriptor& arch,
                            const TrainLogFn& log_fn) {
    std::vector<ImagePlane> images, validation;
    for (const auto& p : cfg.dataset) images.push_back(load_image(p));
    for (const auto& p : cfg.validation) validation.push_back(load_image(p));
    return train_universal_images(cfg, arch, images, validation, log_fn);
}

TrainResult train_universal_images(const TrainConfig& cfg, const ArchDescriptor& arch,
                                   const std::vector<ImagePlane>& images,
                                   const std::vector<ImagePlane>& validation,
                                   const TrainLogFn& log_fn) {
    cfg.validate(arch);
    Model<float> model = init_model<float>(arch, derive_seed(cfg.seed, kTagInit));
    return run_training(std::move(model), images, validation, cfg, log_fn);
}

Model<float> adapt_external(const Model<float>& model, const AdaptConfig& cfg,
                            const TrainLogFn& log_fn) {
    std::vector<ImagePlane> related;
    for (const auto& p : cfg.related_images) related.push_back(load_image(p));
    return adapt_external_images(model, cfg, related, log_fn);
}

namespace {

TrainConfig adapt_train_config(const AdaptConfig& cfg) {
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_images = 4;
    tc.crop_size = cfg.crop_size;
    tc.sigma_min = tc.sigma_max = cfg.sigma;
    tc.adam_lr = cfg.learning_rate;
    tc.switch_fraction = 1.0;  // adaptation stays on Adam
    tc.seed = cfg.seed;
    tc.threads = cfg.threads;
    return tc;
}

}  // namespace

Model<float> adapt_external_images(const Model<float>& model, const AdaptConfig& cfg,
                                   const std::vector<ImagePlane>& related,
                                   const TrainLogFn& log_fn) {
    if (related.empty()) throw ConfigError("external adaptation requires at least one related image");
    TrainConfig tc = adapt_train_config(cfg);
    tc.validate(model.arch);
    if (tc.epochs == 0) return model;
    return run_training(model, related, {}, tc, log_fn).model;
}

InternalAdaptResult adapt_internal(const Model<float>& model, const ImagePlane& noisy,
                                   double sigma, const AdaptConfig& cfg, const TrainLogFn& log_fn) {
    DenoiseOptions<float> dopt;
    dopt.threads = cfg.threads;

    InternalAdaptResult result;
    result.denoised_before = denoise(noisy, model, dopt).image;
    const std::uint64_t target_checksum = plane_checksum(result.denoised_before);

    AdaptConfig icfg = cfg;
    icfg.sigma = sigma;
    TrainConfig tc = adapt_train_config(icfg);
    // an "epoch" approximates one coverage pass of the image in crops
    const std::int64_t crop_area =
        std::int64_t(std::min(tc.crop_size, noisy.height)) * std::min(tc.crop_size, noisy.width);
    const int steps_per_epoch = int((noisy.pixels() + crop_area - 1) / crop_area);
    tc.batch_images = 1;
    tc.epochs = cfg.epochs * steps_per_epoch;
    tc.validate(model.arch);

    if (tc.epochs == 0) {
        result.model = model;
        result.denoised_after = result.denoised_before;
        return result;
    }

    // Every "image" the loop sees is the frozen target; fresh noise is drawn
    // per crop per epoch, giving exactly the self-supervision loss.
    std::vector<ImagePlane> dataset{result.denoised_before};
    TrainResult tr = run_training(model, dataset, {}, tc, log_fn);
    if (plane_checksum(result.denoised_before) != target_checksum)
        throw NumericError("internal adaptation target changed during training");
    result.model = std::move(tr.model);
    result.denoised_after = denoise(noisy, result.model, dopt).image;
    return result;
}

EvalResult evaluate(const Model<float>& model, const std::vector<std::string>& paths, double sigma,
                    std::uint64_t seed, int threads) {
    if (paths.empty()) throw ConfigError("evaluate: empty image set");
    EvalResult result;
    const auto t0 = std::chrono::steady_clock::now();
    double acc = 0.0;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        ImagePlane clean;
        try {
            clean = load_image(paths[i]);
        } catch (const Error& e) {
            result.warnings.push_back(paths[i] + ": " + e.what());
            continue;
        }
        if (clean.channels != model.arch.channels) {
            result.warnings.push_back(paths[i] + ": channel count does not match the model");
            continue;
        }
        NoiseSpec spec{sigma, derive_seed(derive_seed(seed, kTagEvalNoise), i)};
        const ImagePlane noisy = add_awgn(clean, spec);
        DenoiseOptions<float> dopt;
        dopt.threads = threads;
        const ImagePlane denoised = denoise(noisy, model, dopt).image;
        EvalRow row{paths[i], psnr(denoised, clean), psnr(noisy, clean)};
        acc += row.psnr;
        result.rows.push_back(std::move(row));
    }
    result.mean_psnr = result.rows.empty() ? 0.0 : acc / double(result.rows.size());
    result.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace lidia
