// lidia command line: denoise, train, adapt-external, adapt-internal, eval,
// selftest. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lidia/errors.hpp"
#include "lidia/image_io.hpp"
#include "lidia/net.hpp"
#include "lidia/nn.hpp"
#include "lidia/patch.hpp"
#include "lidia/rng.hpp"
#include "lidia/train.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

// --- JSON config overlay ----------------------------------------------------
// Resolution order: built-in default < config file value < command line flag.

struct ConfigOverlay {
    json values = json::object();

    void load(const std::string& path, const std::set<std::string>& known) {
        std::ifstream f(path);
        if (!f) throw lidia::IoError("cannot open config file '" + path + "'");
        try {
            values = json::parse(f);
        } catch (const json::parse_error& e) {
            throw lidia::ConfigError("config file '" + path + "': " + e.what());
        }
        if (!values.is_object()) throw lidia::ConfigError("config file must hold a JSON object");
        for (auto& [key, _] : values.items())
            if (!known.count(key))
                throw lidia::ConfigError("config file key '" + key + "' is not a known option");
    }

    template <typename T>
    void apply(const std::string& key, const std::optional<T>& flag, T& out) const {
        if (flag) {
            out = *flag;
        } else if (values.contains(key)) {
            try {
                out = values.at(key).get<T>();
            } catch (const json::exception&) {
                throw lidia::ConfigError("config key '" + key + "' has the wrong type");
            }
        }
    }
};

// Canonical resolved-config echo for CSV headers. Deliberately excludes the
// thread count: scheduling never changes results, and logs must be
// bit-identical across --threads settings.
std::string config_echo(const json& resolved) {
    json sorted = json::object();
    std::vector<std::string> keys;
    for (auto& [k, _] : resolved.items()) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    std::string out = "# config:";
    for (const auto& k : keys) {
        if (k == "threads") continue;
        out += " " + k + "=" + resolved.at(k).dump();
    }
    return out;
}

std::vector<std::string> expand_image_args(const std::vector<std::string>& args) {
    std::vector<std::string> out;
    for (const auto& a : args) {
        if (std::filesystem::is_directory(a)) {
            std::vector<std::string> found;
            for (const auto& e : std::filesystem::directory_iterator(a)) {
                if (!e.is_regular_file()) continue;
                const auto ext = e.path().extension().string();
                if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")
                    found.push_back(e.path().string());
            }
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else {
            out.push_back(a);
        }
    }
    return out;
}

lidia::ArchDescriptor arch_from(const std::string& variant, bool color, int patch_side,
                                int group_size, int features, int window, bool share_wnet) {
    lidia::ArchDescriptor a;
    if (variant == "lidia") {
        a.variant = lidia::ArchVariant::Full;
    } else if (variant == "lidia-s") {
        a.variant = lidia::ArchVariant::Small;
    } else {
        throw lidia::ConfigError("unknown arch variant '" + variant + "' (use lidia or lidia-s)");
    }
    a.channels = color ? 3 : 1;
    a.patch_side = patch_side > 0 ? patch_side : (color ? 5 : 7);
    a.feature_dim = features > 0 ? features : (color ? 80 : 64);
    a.group_size = group_size;
    a.search_window = window;
    a.share_weight_net = share_wnet;
    a.validate();
    return a;
}

struct CsvWriter {
    std::string path;
    std::string buffer;
    void line(const std::string& s) {
        buffer += s;
        buffer += "\n";
        std::cout << s << "\n";
    }
    void flush() {
        if (path.empty()) return;
        const std::string tmp = path + ".tmp";
        {
            std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
            if (!f) throw lidia::IoError("cannot open '" + tmp + "' for writing");
            f.write(buffer.data(), std::streamsize(buffer.size()));
            if (!f) throw lidia::IoError("short write to '" + tmp + "'");
        }
        std::filesystem::rename(tmp, path);
    }
};

std::string fmt(double v, int digits = 9) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// --- selftest ----------------------------------------------------------------

struct SelfTest {
    bool inject_bug = false;
    int failures = 0;

    void report(const std::string& name, bool pass, const std::string& detail) {
        std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
        if (!pass) ++failures;
    }

    void run_kronecker() {
        lidia::Xoshiro256pp rng(1001);
        double worst = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const int ro = 1 + int(rng.next_below(8)), ri = 1 + int(rng.next_below(8));
            const int ci = 1 + int(rng.next_below(8)), co = 1 + int(rng.next_below(8));
            auto p = lidia::SLParams<double>::sized(ro, ri, ci, co);
            for (auto* t : {&p.w1, &p.w2, &p.bias})
                for (auto& v : t->data) v = 2 * rng.next_unit() - 1;
            std::vector<double> z(std::size_t(ri) * ci);
            for (auto& v : z) v = 2 * rng.next_unit() - 1;
            std::vector<double> a(std::size_t(ro) * ci), y(std::size_t(ro) * co);
            lidia::sl_forward(z.data(), p, a.data(), y.data());
            // explicit big-matrix construction
            const int od = ro * co, id = ri * ci;
            for (int c = 0; c < co; ++c)
                for (int o = 0; o < ro; ++o) {
                    double acc = p.bias.data[std::size_t(o) * co + c];
                    for (int b = 0; b < ci; ++b)
                        for (int aa = 0; aa < ri; ++aa)
                            acc += p.w2.data[std::size_t(b) * co + c] *
                                   p.w1.data[std::size_t(o) * ri + aa] * z[b * ri + aa];
                    worst = std::max(worst, std::abs(acc - y[std::size_t(c) * ro + o]));
                }
            (void)od;
            (void)id;
        }
        report("separable-linear-kronecker", worst < 1e-12,
               "max |SL - (W2^T kron W1)vec| = " + std::to_string(worst) + " over 100 shapes");
    }

    void run_layer_gradients() {
        lidia::Xoshiro256pp rng(1002);
        auto p = lidia::SLParams<double>::sized(5, 4, 3, 4);
        for (auto* t : {&p.w1, &p.w2, &p.bias}) {
            for (auto& v : t->data) v = 2 * rng.next_unit() - 1;
            t->ensure_grad();
        }
        lidia::Tensor<double> z = lidia::Tensor<double>::zeros({4, 3});
        for (auto& v : z.data) v = 2 * rng.next_unit() - 1;
        z.ensure_grad();
        std::vector<double> up(std::size_t(5) * 4);
        for (auto& v : up) v = 2 * rng.next_unit() - 1;

        auto loss = [&]() {
            std::vector<double> a(std::size_t(5) * 3), y(std::size_t(5) * 4);
            lidia::sl_forward(z.data.data(), p, a.data(), y.data());
            double acc = 0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += up[i] * y[i];
            return acc;
        };
        lidia::SLGradSink<double> sink{p.w1.grad.data(), p.w2.grad.data(), p.bias.grad.data()};
        std::vector<double> a(std::size_t(5) * 3), da(std::size_t(5) * 3);
        lidia::sl_backward<double>(z.data.data(), up.data(), p, sink, a.data(), da.data(),
                                   z.grad.data());
        if (inject_bug) p.w1.grad[0] += 0.25;  // negative-control hook
        std::vector<lidia::NamedTensor<double>> params = {
            {"sl.w1", &p.w1}, {"sl.w2", &p.w2}, {"sl.bias", &p.bias}, {"sl.z", &z}};
        const auto rep = lidia::grad_check<double>(loss, params, 1e-5, 0, 0);
        report("gradient-separable-linear", rep.max_rel_err < 1e-6,
               "max rel err " + std::to_string(rep.max_rel_err) +
                   (rep.worst.empty() ? "" : " (worst " + rep.worst + ")"));

        // batch norm layer
        const int C = 4;
        const std::int64_t N = 6;
        lidia::BatchNormState<double> st = lidia::BatchNormState<double>::sized(C);
        for (auto& v : st.scale.data) v = 0.5 + rng.next_unit();
        for (auto& v : st.shift.data) v = rng.next_unit() - 0.5;
        st.scale.ensure_grad();
        st.shift.ensure_grad();
        lidia::Tensor<double> x = lidia::Tensor<double>::zeros({C, int(N)});
        for (auto& v : x.data) v = 2 * rng.next_unit() - 1;
        x.ensure_grad();
        std::vector<double> ub(C * N);
        for (auto& v : ub) v = 2 * rng.next_unit() - 1;
        auto bn_loss = [&]() {
            std::vector<double> y = x.data, xhat(C * N);
            lidia::BatchNormStats<double> stats;
            lidia::bn_forward_train(y.data(), C, N, st, xhat.data(), stats);
            double acc = 0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += ub[i] * y[i];
            return acc;
        };
        {
            std::vector<double> y = x.data, xhat(C * N);
            lidia::BatchNormStats<double> stats;
            lidia::bn_forward_train(y.data(), C, N, st, xhat.data(), stats);
            std::vector<double> dy = ub;
            lidia::bn_backward(xhat.data(), dy.data(), C, N, st, stats, st.scale.grad.data(),
                               st.shift.grad.data());
            x.grad = dy;
        }
        std::vector<lidia::NamedTensor<double>> bnp = {
            {"bn.x", &x}, {"bn.scale", &st.scale}, {"bn.shift", &st.shift}};
        const auto bnrep = lidia::grad_check<double>(bn_loss, bnp, 1e-5, 0, 0);
        report("gradient-batch-norm", bnrep.max_rel_err < 1e-5,
               "max rel err " + std::to_string(bnrep.max_rel_err));
    }

    void run_network_gradient() {
        lidia::ArchDescriptor arch;
        arch.channels = 1;
        arch.patch_side = 3;
        arch.group_size = 3;
        arch.feature_dim = 8;
        arch.search_window = 5;
        lidia::Model<double> m = lidia::init_model<double>(arch, 1003);
        lidia::Plane<double> clean(8, 8, 1);
        lidia::Xoshiro256pp rng(1004);
        for (auto& v : clean.data) v = rng.next_unit();
        lidia::Plane<double> noisy = clean;
        for (auto& v : noisy.data) v += 0.1 * rng.next_gaussian();

        lidia::BatchWorkspace<double> ws;
        ws.train_mode = true;
        ws.threads = 1;
        ws.images.resize(1);
        ws.images[0].prep = lidia::prepare_image(noisy, arch, 1);
        auto loss = [&]() {
            lidia::forward_batch(m, ws);
            double acc = 0;
            for (std::int64_t i = 0; i < 64; ++i) {
                const double d = ws.images[0].output.data[i] - clean.data[i];
                acc += d * d;
            }
            return acc / 64.0;
        };
        auto tr = lidia::trainable_tensors(m);
        for (auto& nt : tr) {
            nt.tensor->ensure_grad();
            nt.tensor->zero_grad();
        }
        lidia::forward_batch(m, ws);
        std::vector<lidia::Plane<double>> douts(1);
        douts[0] = lidia::Plane<double>(8, 8, 1);
        for (std::int64_t i = 0; i < 64; ++i)
            douts[0].data[i] = 2.0 * (ws.images[0].output.data[i] - clean.data[i]) / 64.0;
        lidia::backward_batch(m, ws, douts);
        const auto rep = lidia::grad_check<double>(loss, tr, 1e-6, 4, 1005);
        report("gradient-full-network", rep.max_rel_err < 1e-4,
               "max rel err " + std::to_string(rep.max_rel_err) + " (worst " + rep.worst + ")");
    }

    void run_aggregation() {
        lidia::Xoshiro256pp rng(1006);
        lidia::Plane<double> img(10, 10, 1);
        for (auto& v : img.data) v = rng.next_unit();
        const int mg = 1, side = 3;
        lidia::Plane<double> padded = lidia::mirror_pad(img, mg);
        std::vector<std::vector<double>> patches(img.pixels(), std::vector<double>(9));
        std::vector<double> weights(img.pixels());
        std::vector<lidia::PatchRef<double>> refs;
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c) {
                auto& p = patches[r * 10 + c];
                for (auto& v : p) v = rng.next_unit();
                weights[r * 10 + c] = 0.1 + rng.next_unit();
                refs.push_back({r + mg, c + mg, p.data()});
            }
        lidia::Plane<double> out = lidia::aggregate<double>(
            refs, std::span<const double>(weights), 12, 12, 1, side, false);
        // dense diagonal system, solved directly
        double worst = 0;
        {
            std::vector<double> num(144, 0.0), den(144, 0.0);
            for (std::size_t i = 0; i < refs.size(); ++i) {
                int idx = 0;
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc, ++idx) {
                        const int px = (refs[i].row + dr) * 12 + refs[i].col + dc;
                        num[px] += weights[i] * patches[i][idx];
                        den[px] += weights[i];
                    }
            }
            for (int p = 0; p < 144; ++p)
                if (den[p] > 0) worst = std::max(worst, std::abs(out.data[p] - num[p] / den[p]));
        }
        bool pass = worst < 1e-9;

        // left inverse of extraction
        std::vector<std::vector<double>> exact(img.pixels(), std::vector<double>(9));
        std::vector<lidia::PatchRef<double>> refs2;
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c) {
                lidia::extract_patch(padded, r + mg, c + mg, side, exact[r * 10 + c].data());
                refs2.push_back({r + mg, c + mg, exact[r * 10 + c].data()});
            }
        lidia::Plane<double> rec = lidia::aggregate<double>(refs2, {}, 12, 12, 1, side, false);
        double worst2 = 0;
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c)
                worst2 = std::max(worst2, std::abs(rec.at(r + mg, c + mg) - img.at(r, c)));
        pass = pass && worst2 < 1e-12;
        report("aggregation-oracle", pass,
               "dense err " + std::to_string(worst) + ", left-inverse err " +
                   std::to_string(worst2));
    }

    void run_knn() {
        lidia::PatchConfig cfg{3, 1, 5, 9};
        lidia::Xoshiro256pp rng(1007);
        bool pass = true;
        for (int imgno = 0; imgno < 10 && pass; ++imgno) {
            lidia::Plane<double> img(16, 16, 1);
            for (auto& v : img.data) v = rng.next_unit();
            lidia::Plane<double> padded = lidia::mirror_pad(img, 1);
            for (int trial = 0; trial < 8 && pass; ++trial) {
                const int r = 1 + int(rng.next_below(16)), c = 1 + int(rng.next_below(16));
                auto g = lidia::knn_group<double>(padded, nullptr, cfg, r, c);
                // exhaustive scan
                struct E {
                    double d;
                    int r, c;
                };
                std::vector<E> all;
                std::vector<double> seed(9), cand(9);
                lidia::extract_patch(padded, r, c, 3, seed.data());
                for (int rr = std::max(1, r - 4); rr <= std::min(16, r + 4); ++rr)
                    for (int cc = std::max(1, c - 4); cc <= std::min(16, c + 4); ++cc) {
                        if (rr == r && cc == c) continue;
                        lidia::extract_patch(padded, rr, cc, 3, cand.data());
                        double d = 0;
                        for (int i = 0; i < 9; ++i) d += (cand[i] - seed[i]) * (cand[i] - seed[i]);
                        all.push_back({d, rr, cc});
                    }
                std::stable_sort(all.begin(), all.end(),
                                 [](const E& a, const E& b) { return a.d < b.d; });
                for (int j = 0; j < 4; ++j)
                    if (g.rows[j + 1] != all[j].r || g.cols[j + 1] != all[j].c) pass = false;
            }
        }
        report("knn-brute-force", pass, pass ? "windowed search equals exhaustive scan"
                                             : "neighbor mismatch vs exhaustive scan");
    }

    void run_pyramid() {
        lidia::Plane<double> impulse(7, 7, 1, 0.0);
        impulse.at(3, 3) = 1.0;
        lidia::Plane<double> resp = lidia::conv3x3_mirror(impulse, lidia::low_pass_kernel<double>());
        const double want[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
        bool pass = true;
        for (int a = -1; a <= 1; ++a)
            for (int b = -1; b <= 1; ++b)
                if (resp.at(3 + a, 3 + b) != want[a + 1][b + 1] / 16.0) pass = false;

        lidia::PatchConfig cfg{3, 1, 3, 5};
        lidia::Xoshiro256pp rng(1008);
        lidia::Plane<double> img(12, 13, 1);
        for (auto& v : img.data) v = rng.next_unit();
        auto pyr = lidia::build_pyramid(img, cfg);
        auto filtered = lidia::conv3x3_mirror(img, lidia::low_pass_kernel<double>());
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width; ++c) {
                const int ph = (r & 1) * 2 + (c & 1);
                if (pyr.phases[ph].at(r / 2 + 1, c / 2 + 1) != filtered.at(r, c)) pass = false;
            }
        report("pyramid-phases", pass,
               pass ? "impulse response exact; phases re-interleave to the filtered image"
                    : "kernel or phase mismatch");
    }

    void run_param_count() {
        const std::int64_t full = lidia::count_params(lidia::ArchDescriptor::full_gray());
        const std::int64_t small = lidia::count_params(lidia::ArchDescriptor::small_gray());
        auto m = lidia::make_model<float>(lidia::ArchDescriptor::full_gray());
        const std::int64_t removed =
            m.scale1.tbr1.w1.count() + m.scale1.tbr1.w2.count() + m.scale1.tbr1.bias.count() +
            m.scale1.bn1.scale.count() + m.scale1.bn1.shift.count() + m.scale2.tbr1.w1.count() +
            m.scale2.tbr1.w2.count() + m.scale2.tbr1.bias.count() + m.scale2.bn1.scale.count() +
            m.scale2.bn1.shift.count() + m.tbr3.w1.count() + m.tbr3.w2.count() +
            m.tbr3.bias.count() + m.bn3.scale.count() + m.bn3.shift.count();
        const bool pass = std::abs(double(full) - 61600.0) / 61600.0 < 0.02 &&
                          std::abs(double(small) - 40200.0) / 40200.0 < 0.02 &&
                          (full - small) == removed;
        report("parameter-count", pass,
               std::to_string(full) + " / " + std::to_string(small) + " (difference " +
                   std::to_string(full - small) + ")");
    }

    int run() {
        run_kronecker();
        run_layer_gradients();
        run_network_gradient();
        run_aggregation();
        run_knn();
        run_pyramid();
        run_param_count();
        std::printf("%s: %d suite(s) failed\n", failures ? "FAILURE" : "OK", failures);
        return failures ? kExitNumeric : kExitOk;
    }
};

// --- subcommands -------------------------------------------------------------

int cmd_denoise(const std::string& input, const std::string& output, const std::string& model_path,
                const std::string& reference, int threads) {
    lidia::Model<float> model = lidia::load_model(model_path);
    lidia::ImagePlane noisy = lidia::load_image(input);
    if (noisy.channels != model.arch.channels)
        throw lidia::ShapeError("image has " + std::to_string(noisy.channels) +
                                " channel(s) but the model expects " +
                                std::to_string(model.arch.channels));
    lidia::DenoiseOptions<float> opt;
    opt.threads = threads;
    lidia::DenoiseResult<float> res = lidia::denoise(noisy, model, opt);
    lidia::save_image(res.image, output);
    if (!reference.empty()) {
        lidia::ImagePlane ref = lidia::load_image(reference);
        std::cout << "psnr_db=" << fmt(lidia::psnr(res.image, ref)) << "\n";
    }
    return kExitOk;
}

int cmd_train(const lidia::TrainConfig& cfg, const lidia::ArchDescriptor& arch,
              const std::string& output, const std::string& log_path, const json& resolved) {
    CsvWriter csv;
    csv.path = log_path;
    csv.line("# lidia train log");
    csv.line(config_echo(resolved));
    csv.line("epoch,step,loss,val_psnr");
    lidia::TrainResult result = lidia::train_universal(cfg, arch, [&](const lidia::TrainLogRow& r) {
        csv.line(std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt(r.loss) + "," +
                 (r.val_psnr ? fmt(*r.val_psnr) : ""));
    });
    lidia::save_model(result.model, output);
    csv.flush();
    std::cout << "model written to " << output << "\n";
    return kExitOk;
}

int cmd_adapt_external(const std::string& model_path, const lidia::AdaptConfig& cfg,
                       const std::string& output, const std::string& log_path,
                       const json& resolved) {
    lidia::Model<float> model = lidia::load_model(model_path);
    CsvWriter csv;
    csv.path = log_path;
    csv.line("# lidia adapt-external log");
    csv.line(config_echo(resolved));
    csv.line("epoch,step,loss,val_psnr");
    lidia::Model<float> adapted =
        lidia::adapt_external(model, cfg, [&](const lidia::TrainLogRow& r) {
            csv.line(std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt(r.loss) +
                     ",");
        });
    lidia::save_model(adapted, output);
    csv.flush();
    std::cout << "adapted model written to " << output << "\n";
    return kExitOk;
}

int cmd_adapt_internal(const std::string& model_path, const std::string& input,
                       const std::string& output_image, const std::string& output_model,
                       double sigma, const lidia::AdaptConfig& cfg, const std::string& log_path,
                       const json& resolved) {
    lidia::Model<float> model = lidia::load_model(model_path);
    lidia::ImagePlane noisy = lidia::load_image(input);
    if (noisy.channels != model.arch.channels)
        throw lidia::ShapeError("image channels do not match the model");
    CsvWriter csv;
    csv.path = log_path;
    csv.line("# lidia adapt-internal log");
    csv.line(config_echo(resolved));
    csv.line("epoch,step,loss,val_psnr");
    lidia::InternalAdaptResult res =
        lidia::adapt_internal(model, noisy, sigma, cfg, [&](const lidia::TrainLogRow& r) {
            csv.line(std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt(r.loss) +
                     ",");
        });
    if (!output_image.empty()) lidia::save_image(res.denoised_after, output_image);
    if (!output_model.empty()) lidia::save_model(res.model, output_model);
    csv.flush();
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::vector<std::string>& images, double sigma,
             std::uint64_t seed, int threads, const std::string& csv_path, const json& resolved) {
    lidia::Model<float> model = lidia::load_model(model_path);
    const std::vector<std::string> paths = expand_image_args(images);
    lidia::EvalResult res = lidia::evaluate(model, paths, sigma, seed, threads);
    CsvWriter csv;
    csv.path = csv_path;
    csv.line("# lidia eval log");
    csv.line(config_echo(resolved));
    for (const auto& w : res.warnings) csv.line("# warning: " + w);
    csv.line("image,psnr,noisy_psnr");
    for (const auto& row : res.rows)
        csv.line(row.path + "," + fmt(row.psnr) + "," + fmt(row.noisy_psnr));
    csv.line("mean," + fmt(res.mean_psnr) + ",");
    csv.flush();
    // runtime is reported here only; it would break log determinism
    std::cout << "runtime_seconds=" << res.runtime_seconds << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lidia: lightweight non-local image denoising"};
    app.require_subcommand(1);

    // shared option state (std::optional distinguishes "flag given" from default)
    std::optional<std::string> config_path;
    std::optional<int> threads_opt;
    std::optional<std::uint64_t> seed_opt;
    std::optional<double> sigma_opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file; flags override its values");
        sub->add_option("--threads", threads_opt, "worker threads (results are identical for any value) [1]");
    };

    // denoise
    auto* cd = app.add_subcommand("denoise", "denoise one PGM/PPM image with a trained model");
    std::optional<std::string> d_input, d_output, d_model, d_reference;
    cd->add_option("--input", d_input, "noisy input image (PGM/PPM)");
    cd->add_option("--output", d_output, "output image path");
    cd->add_option("--model", d_model, "model file (LIDIAMDL container)");
    cd->add_option("--reference", d_reference, "clean reference; prints PSNR when given");
    add_common(cd);

    // train
    auto* ct = app.add_subcommand("train", "train a universal denoiser");
    std::optional<std::string> t_output, t_log, t_arch, t_ckpt_prefix;
    std::optional<std::vector<std::string>> t_dataset, t_val;
    std::optional<int> t_epochs, t_batch, t_crop, t_patch, t_group, t_features, t_window, t_ckpt_every;
    std::optional<double> t_sigma_min, t_sigma_max, t_adam_lr, t_sgd_lr, t_switch;
    std::optional<bool> t_color, t_share;
    ct->add_option("--dataset", t_dataset, "training images or directories");
    ct->add_option("--val", t_val, "validation images or directories");
    ct->add_option("--output", t_output, "output model path");
    ct->add_option("--log", t_log, "CSV log path (epoch,step,loss,val_psnr)");
    ct->add_option("--arch", t_arch, "architecture variant: lidia | lidia-s [lidia]");
    ct->add_flag("--color", t_color, "train the 3-channel color variant");
    ct->add_option("--patch-side", t_patch, "patch side in pixels [7 gray / 5 color]");
    ct->add_option("--group-size", t_group, "patches per group (seed + neighbors) [14]");
    ct->add_option("--features", t_features, "feature rows in the transform stacks [64 gray / 80 color]");
    ct->add_option("--window", t_window, "neighbor search window side [37]");
    ct->add_flag("--share-weight-net", t_share, "share one weight net across scales");
    ct->add_option("--epochs", t_epochs, "training epochs [100]");
    ct->add_option("--batch-images", t_batch, "distinct images (one crop each) per step [4]");
    ct->add_option("--crop", t_crop, "training crop side [64]");
    ct->add_option("--sigma", sigma_opt, "noise sigma on the 8-bit scale [25]");
    ct->add_option("--sigma-min", t_sigma_min, "blind training: lower sigma bound");
    ct->add_option("--sigma-max", t_sigma_max, "blind training: upper sigma bound");
    ct->add_option("--adam-lr", t_adam_lr, "Adam learning rate [0.01]");
    ct->add_option("--sgd-lr", t_sgd_lr, "SGD learning rate for the tail phase [0.001]");
    ct->add_option("--switch-fraction", t_switch, "fraction of epochs on Adam before SGD [0.8]");
    ct->add_option("--seed", seed_opt, "PRNG seed [0]");
    ct->add_option("--checkpoint-every", t_ckpt_every, "epochs between checkpoints (0 = off) [0]");
    ct->add_option("--checkpoint-prefix", t_ckpt_prefix, "checkpoint path prefix");
    add_common(ct);

    // adapt-external
    auto* cae = app.add_subcommand("adapt-external",
                                   "fine-tune a model on clean images related to the input");
    std::optional<std::string> ae_model, ae_output, ae_log;
    std::optional<std::vector<std::string>> ae_related;
    std::optional<int> ae_epochs, ae_crop;
    std::optional<double> ae_lr;
    cae->add_option("--model", ae_model, "input model file");
    cae->add_option("--related", ae_related, "clean related images or directories");
    cae->add_option("--output", ae_output, "adapted model path");
    cae->add_option("--log", ae_log, "CSV log path");
    cae->add_option("--epochs", ae_epochs, "adaptation epochs [5]");
    cae->add_option("--sigma", sigma_opt, "noise sigma on the 8-bit scale [25]");
    cae->add_option("--lr", ae_lr, "Adam learning rate [0.001]");
    cae->add_option("--crop", ae_crop, "adaptation crop side [64]");
    cae->add_option("--seed", seed_opt, "PRNG seed [0]");
    add_common(cae);

    // adapt-internal
    auto* cai = app.add_subcommand("adapt-internal",
                                   "fine-tune a model on its own denoised output, then re-denoise");
    std::optional<std::string> ai_model, ai_input, ai_output, ai_output_model, ai_log;
    std::optional<int> ai_epochs, ai_crop;
    std::optional<double> ai_lr;
    cai->add_option("--model", ai_model, "input model file");
    cai->add_option("--input", ai_input, "noisy input image");
    cai->add_option("--output", ai_output, "re-denoised output image path");
    cai->add_option("--output-model", ai_output_model, "adapted model path (optional)");
    cai->add_option("--log", ai_log, "CSV log path");
    cai->add_option("--epochs", ai_epochs, "adaptation epochs [5]");
    cai->add_option("--sigma", sigma_opt, "noise sigma on the 8-bit scale [25]");
    cai->add_option("--lr", ai_lr, "Adam learning rate [0.001]");
    cai->add_option("--crop", ai_crop, "adaptation crop side [64]");
    cai->add_option("--seed", seed_opt, "PRNG seed [0]");
    add_common(cai);

    // eval
    auto* ce = app.add_subcommand("eval", "denoise an image set at a given sigma and report PSNR");
    std::optional<std::string> e_model, e_csv;
    std::optional<std::vector<std::string>> e_images;
    ce->add_option("--model", e_model, "model file");
    ce->add_option("--images", e_images, "evaluation images or directories");
    ce->add_option("--csv", e_csv, "CSV output path");
    ce->add_option("--sigma", sigma_opt, "noise sigma on the 8-bit scale [25]");
    ce->add_option("--seed", seed_opt, "PRNG seed; noise is deterministic per (image, seed) [0]");
    add_common(ce);

    // selftest
    auto* cs = app.add_subcommand("selftest", "run the built-in numerical verification suites");
    bool inject_bug = false;
    cs->add_flag("--inject-gradient-bug", inject_bug,
                 "corrupt one analytic gradient (verifies that the check catches it)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        ConfigOverlay overlay;
        auto load_overlay = [&](std::initializer_list<const char*> keys) {
            if (config_path) overlay.load(*config_path, std::set<std::string>(keys.begin(), keys.end()));
        };

        int threads = 1;
        std::uint64_t seed = 0;
        double sigma = 25.0;

        if (cd->parsed()) {
            load_overlay({"input", "output", "model", "reference", "threads"});
            std::string input, output, model, reference;
            overlay.apply("input", d_input, input);
            overlay.apply("output", d_output, output);
            overlay.apply("model", d_model, model);
            overlay.apply("reference", d_reference, reference);
            overlay.apply("threads", threads_opt, threads);
            if (input.empty() || output.empty() || model.empty())
                throw lidia::ConfigError("denoise requires --input, --output and --model");
            return cmd_denoise(input, output, model, reference, threads);
        }

        if (ct->parsed()) {
            load_overlay({"dataset", "val", "output", "log", "arch", "color", "patch-side",
                          "group-size", "features", "window", "share-weight-net", "epochs",
                          "batch-images", "crop", "sigma", "sigma-min", "sigma-max", "adam-lr",
                          "sgd-lr", "switch-fraction", "seed", "checkpoint-every",
                          "checkpoint-prefix", "threads"});
            lidia::TrainConfig cfg;
            std::string output, log, arch_name = "lidia", ckpt_prefix;
            std::vector<std::string> dataset, val;
            bool color = false, share = false;
            int patch = 0, group = 14, features = 0, window = 37;
            double sig = 25.0, sig_min = -1, sig_max = -1;
            overlay.apply("dataset", t_dataset, dataset);
            overlay.apply("val", t_val, val);
            overlay.apply("output", t_output, output);
            overlay.apply("log", t_log, log);
            overlay.apply("arch", t_arch, arch_name);
            overlay.apply("color", t_color, color);
            overlay.apply("patch-side", t_patch, patch);
            overlay.apply("group-size", t_group, group);
            overlay.apply("features", t_features, features);
            overlay.apply("window", t_window, window);
            overlay.apply("share-weight-net", t_share, share);
            overlay.apply("epochs", t_epochs, cfg.epochs);
            overlay.apply("batch-images", t_batch, cfg.batch_images);
            overlay.apply("crop", t_crop, cfg.crop_size);
            overlay.apply("sigma", sigma_opt, sig);
            overlay.apply("sigma-min", t_sigma_min, sig_min);
            overlay.apply("sigma-max", t_sigma_max, sig_max);
            overlay.apply("adam-lr", t_adam_lr, cfg.adam_lr);
            overlay.apply("sgd-lr", t_sgd_lr, cfg.sgd_lr);
            overlay.apply("switch-fraction", t_switch, cfg.switch_fraction);
            overlay.apply("seed", seed_opt, cfg.seed);
            overlay.apply("checkpoint-every", t_ckpt_every, cfg.checkpoint_every);
            overlay.apply("checkpoint-prefix", t_ckpt_prefix, ckpt_prefix);
            overlay.apply("threads", threads_opt, cfg.threads);
            cfg.checkpoint_prefix = ckpt_prefix;
            cfg.sigma_min = sig_min >= 0 ? sig_min : sig;
            cfg.sigma_max = sig_max >= 0 ? sig_max : sig;
            cfg.dataset = expand_image_args(dataset);
            cfg.validation = expand_image_args(val);
            if (cfg.dataset.empty()) throw lidia::ConfigError("train requires a non-empty --dataset");
            if (output.empty()) throw lidia::ConfigError("train requires --output");
            lidia::ArchDescriptor arch =
                arch_from(arch_name, color, patch, group, features, window, share);
            json resolved = {{"command", "train"},
                             {"arch", arch_name},
                             {"color", color},
                             {"patch_side", arch.patch_side},
                             {"group_size", arch.group_size},
                             {"features", arch.feature_dim},
                             {"window", arch.search_window},
                             {"share_weight_net", share},
                             {"epochs", cfg.epochs},
                             {"batch_images", cfg.batch_images},
                             {"crop", cfg.crop_size},
                             {"sigma_min", cfg.sigma_min},
                             {"sigma_max", cfg.sigma_max},
                             {"adam_lr", cfg.adam_lr},
                             {"sgd_lr", cfg.sgd_lr},
                             {"switch_fraction", cfg.switch_fraction},
                             {"seed", cfg.seed},
                             {"dataset", cfg.dataset},
                             {"validation", cfg.validation}};
            return cmd_train(cfg, arch, output, log, resolved);
        }

        if (cae->parsed()) {
            load_overlay({"model", "related", "output", "log", "epochs", "sigma", "lr", "crop",
                          "seed", "threads"});
            lidia::AdaptConfig cfg;
            std::string model, output, log;
            std::vector<std::string> related;
            overlay.apply("model", ae_model, model);
            overlay.apply("related", ae_related, related);
            overlay.apply("output", ae_output, output);
            overlay.apply("log", ae_log, log);
            overlay.apply("epochs", ae_epochs, cfg.epochs);
            overlay.apply("sigma", sigma_opt, cfg.sigma);
            overlay.apply("lr", ae_lr, cfg.learning_rate);
            overlay.apply("crop", ae_crop, cfg.crop_size);
            overlay.apply("seed", seed_opt, cfg.seed);
            overlay.apply("threads", threads_opt, cfg.threads);
            cfg.related_images = expand_image_args(related);
            if (model.empty() || output.empty())
                throw lidia::ConfigError("adapt-external requires --model and --output");
            if (cfg.related_images.empty())
                throw lidia::ConfigError("adapt-external requires at least one --related image");
            json resolved = {{"command", "adapt-external"}, {"epochs", cfg.epochs},
                             {"sigma", cfg.sigma},          {"lr", cfg.learning_rate},
                             {"crop", cfg.crop_size},       {"seed", cfg.seed},
                             {"related", cfg.related_images}};
            return cmd_adapt_external(model, cfg, output, log, resolved);
        }

        if (cai->parsed()) {
            load_overlay({"model", "input", "output", "output-model", "log", "epochs", "sigma",
                          "lr", "crop", "seed", "threads"});
            lidia::AdaptConfig cfg;
            std::string model, input, output, output_model, log;
            overlay.apply("model", ai_model, model);
            overlay.apply("input", ai_input, input);
            overlay.apply("output", ai_output, output);
            overlay.apply("output-model", ai_output_model, output_model);
            overlay.apply("log", ai_log, log);
            overlay.apply("epochs", ai_epochs, cfg.epochs);
            overlay.apply("sigma", sigma_opt, sigma);
            overlay.apply("lr", ai_lr, cfg.learning_rate);
            overlay.apply("crop", ai_crop, cfg.crop_size);
            overlay.apply("seed", seed_opt, cfg.seed);
            overlay.apply("threads", threads_opt, cfg.threads);
            if (model.empty() || input.empty())
                throw lidia::ConfigError("adapt-internal requires --model and --input");
            if (output.empty() && output_model.empty())
                throw lidia::ConfigError(
                    "adapt-internal requires --output and/or --output-model");
            json resolved = {{"command", "adapt-internal"}, {"epochs", cfg.epochs},
                             {"sigma", sigma},              {"lr", cfg.learning_rate},
                             {"crop", cfg.crop_size},       {"seed", cfg.seed},
                             {"input", input}};
            return cmd_adapt_internal(model, input, output, output_model, sigma, cfg, log,
                                      resolved);
        }

        if (ce->parsed()) {
            load_overlay({"model", "images", "csv", "sigma", "seed", "threads"});
            std::string model, csv;
            std::vector<std::string> images;
            overlay.apply("model", e_model, model);
            overlay.apply("images", e_images, images);
            overlay.apply("csv", e_csv, csv);
            overlay.apply("sigma", sigma_opt, sigma);
            overlay.apply("seed", seed_opt, seed);
            overlay.apply("threads", threads_opt, threads);
            if (model.empty() || images.empty())
                throw lidia::ConfigError("eval requires --model and --images");
            json resolved = {{"command", "eval"},
                             {"sigma", sigma},
                             {"seed", seed},
                             {"images", expand_image_args(images)}};
            return cmd_eval(model, images, sigma, seed, threads, csv, resolved);
        }

        if (cs->parsed()) {
            SelfTest st;
            st.inject_bug = inject_bug;
            return st.run();
        }
        return kExitUsage;
    } catch (const lidia::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const lidia::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const lidia::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
