#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <set>
#include <vector>

#include "lidia/errors.hpp"
#include "lidia/image_io.hpp"
#include "lidia/net.hpp"
#include "lidia/patch.hpp"
#include "test_util.hpp"

using namespace lidia;

namespace {

ArchDescriptor tiny_arch(ArchVariant variant = ArchVariant::Full) {
    ArchDescriptor a;
    a.variant = variant;
    a.channels = 1;
    a.patch_side = 3;
    a.group_size = 3;
    a.feature_dim = 8;
    a.search_window = 5;
    return a;
}

template <typename T>
std::vector<NamedTensor<T>> all_tensors(Model<T>& m) {
    std::vector<NamedTensor<T>> out;
    visit_model<T>(m, [&](const std::string& name, Tensor<T>& t, TensorKind) {
        out.push_back({name, &t});
    });
    return out;
}

// Reference denoiser: per-location loops over the public kernels, aggregation
// through patch_engine. Independent of the batched workspace and streaming
// orchestration in the library.
template <typename T>
Plane<T> reference_denoise(const Plane<T>& noisy, const Model<T>& model) {
    const ArchDescriptor& arch = model.arch;
    const bool full = arch.variant == ArchVariant::Full;
    const int n = arch.patch_len(), k = arch.group_size, f = arch.feature_dim;
    const int fc = arch.fused_cols(), side = arch.patch_side;
    const PatchConfig cfg = arch.patch_config();
    ScalePyramid<T> pyr = build_pyramid(noisy, cfg);
    const int m = pyr.margin;
    const std::int64_t L = std::int64_t(noisy.height) * noisy.width;

    auto run_weight_net = [&](const WeightNet<T>& net, const std::vector<T>& dist) {
        std::vector<T> x = dist;
        for (int layer = 0; layer < WeightNet<T>::kLayers; ++layer) {
            std::vector<T> y(k, T(0));
            for (int o = 0; o < k; ++o) {
                T acc = net.fc_b[layer].data[o];
                for (int i = 0; i < k; ++i) acc += net.fc_w[layer].data[o * k + i] * x[i];
                y[o] = acc;
            }
            if (layer < WeightNet<T>::kLayers - 1) {
                const auto& bn = net.bn[layer];
                for (int c = 0; c < k; ++c) {
                    const T inv = T(1) / std::sqrt(bn.running_var.data[c] + bn.epsilon);
                    y[c] = bn.scale.data[c] * (y[c] - bn.running_mean.data[c]) * inv +
                           bn.shift.data[c];
                    if (y[c] < T(0)) y[c] = T(0);
                }
            }
            x = y;
        }
        return x;
    };

    auto run_sl = [&](const SLParams<T>& p, const std::vector<T>& z) {
        std::vector<T> a(std::size_t(p.rows_out()) * p.cols_in());
        std::vector<T> y(std::size_t(p.rows_out()) * p.cols_out());
        sl_forward(z.data(), p, a.data(), y.data());
        return y;
    };
    auto bn_eval_vec = [&](std::vector<T>& x, const BatchNormState<T>& bn, int channels) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const int c = int(i % channels);
            const T inv = T(1) / std::sqrt(bn.running_var.data[c] + bn.epsilon);
            x[i] = bn.scale.data[c] * (x[i] - bn.running_mean.data[c]) * inv + bn.shift.data[c];
        }
    };
    auto relu_vec = [](std::vector<T>& x) {
        for (auto& v : x)
            if (v < T(0)) v = T(0);
    };

    std::vector<PatchGroup<T>> groups[2];
    std::vector<std::vector<T>> f1_store[2], p_store[2];
    for (std::int64_t l = 0; l < L; ++l) {
        const int r = int(l / noisy.width), c = int(l % noisy.width);
        for (int s = 0; s < 2; ++s) {
            PatchGroup<T> g =
                s == 0 ? knn_group<T>(pyr.full, arch.channels == 3 ? &pyr.full_lum : nullptr, cfg,
                                      r + m, c + m)
                       : second_scale_group<T>(pyr, r, c, cfg);
            const WeightNet<T>& wnet =
                (s == 0 || arch.share_weight_net) ? model.wnet1 : model.wnet2;
            const std::vector<T> w = run_weight_net(wnet, g.dists);
            std::vector<T> zt(std::size_t(n) * k);
            apply_column_weights(g.values.data(), w.data(), n, k, zt.data());
            const ScaleStack<T>& stack = s == 0 ? model.scale1 : model.scale2;
            std::vector<T> f0 = run_sl(stack.tr0, zt);
            relu_vec(f0);
            std::vector<T> f1 = f0;
            if (full) {
                f1 = run_sl(stack.tbr1, f0);
                bn_eval_vec(f1, stack.bn1, f);
                relu_vec(f1);
            }
            p_store[s].push_back(run_sl(stack.t_pre, f1));
            f1_store[s].push_back(std::move(f1));
            groups[s].push_back(std::move(g));
        }
    }

    std::vector<std::vector<T>> ptilde[2];
    for (int s = 0; s < 2; ++s) ptilde[s].assign(L, std::vector<T>(n));
    {
        std::vector<PatchRef<T>> refs(L);
        for (std::int64_t l = 0; l < L; ++l)
            refs[l] = {groups[0][l].seed_row, groups[0][l].seed_col, p_store[0][l].data()};
        Plane<T> temp = aggregate<T>(refs, {}, pyr.full.height, pyr.full.width, arch.channels,
                                     side, false);
        for (std::int64_t l = 0; l < L; ++l)
            extract_patch(temp, groups[0][l].seed_row, groups[0][l].seed_col, side,
                          ptilde[0][l].data());
    }
    for (int ph = 0; ph < 4; ++ph) {
        std::vector<PatchRef<T>> refs;
        std::vector<std::int64_t> members;
        for (std::int64_t l = 0; l < L; ++l) {
            const int r = int(l / noisy.width), c = int(l % noisy.width);
            if ((r & 1) * 2 + (c & 1) != ph) continue;
            refs.push_back({groups[1][l].seed_row, groups[1][l].seed_col, p_store[1][l].data()});
            members.push_back(l);
        }
        Plane<T> temp = aggregate<T>(refs, {}, pyr.phases[ph].height, pyr.phases[ph].width,
                                     arch.channels, side, true);
        for (const std::int64_t l : members)
            extract_patch(temp, groups[1][l].seed_row, groups[1][l].seed_col, side,
                          ptilde[1][l].data());
    }

    std::vector<std::vector<T>> zhat(L, std::vector<T>(n));
    std::vector<T> wfin(L);
    const T beta = model.agg_beta.data[0];
    for (std::int64_t l = 0; l < L; ++l) {
        std::vector<T> fused(std::size_t(fc) * f);
        for (int s = 0; s < 2; ++s) {
            const ScaleStack<T>& stack = s == 0 ? model.scale1 : model.scale2;
            std::vector<T> fagg = run_sl(stack.tr_post, ptilde[s][l]);
            relu_vec(fagg);
            std::copy(f1_store[s][l].begin(), f1_store[s][l].end(),
                      fused.begin() + std::size_t(2 * s) * k * f);
            std::copy(fagg.begin(), fagg.end(), fused.begin() + std::size_t(2 * s + 1) * k * f);
        }
        std::vector<T> g1 = run_sl(model.tbr2, fused);
        bn_eval_vec(g1, model.bn2, f);
        relu_vec(g1);
        std::vector<T> g2 = g1;
        if (full) {
            g2 = run_sl(model.tbr3, g1);
            bn_eval_vec(g2, model.bn3, f);
            relu_vec(g2);
        }
        const std::vector<T> r = run_sl(model.t4, g2);
        T mean = T(0);
        for (int i = 0; i < n; ++i) {
            zhat[l][i] = groups[0][l].values[i] - r[i];
            mean += zhat[l][i];
        }
        mean /= T(n);
        T var = T(0);
        for (int i = 0; i < n; ++i) var += (zhat[l][i] - mean) * (zhat[l][i] - mean);
        var /= T(n - 1);
        wfin[l] = std::exp(-beta * var);
    }
    std::vector<PatchRef<T>> refs(L);
    for (std::int64_t l = 0; l < L; ++l)
        refs[l] = {groups[0][l].seed_row, groups[0][l].seed_col, zhat[l].data()};
    Plane<T> ypad = aggregate<T>(refs, std::span<const T>(wfin), pyr.full.height, pyr.full.width,
                                 arch.channels, side, false);
    Plane<T> out(noisy.height, noisy.width, arch.channels);
    for (int r = 0; r < noisy.height; ++r)
        for (int c = 0; c < noisy.width; ++c)
            for (int ch = 0; ch < arch.channels; ++ch) out.at(r, c, ch) = ypad.at(r + m, c + m, ch);
    return out;
}

}  // namespace

TEST_CASE("parameter counts match the published sizes within 2%") {
    const std::int64_t full_gray = count_params(ArchDescriptor::full_gray());
    const std::int64_t small_gray = count_params(ArchDescriptor::small_gray());
    const std::int64_t full_color = count_params(ArchDescriptor::full_color());

    CHECK(std::abs(double(full_gray) - 61600.0) / 61600.0 < 0.02);
    CHECK(std::abs(double(small_gray) - 40200.0) / 40200.0 < 0.02);
    CHECK(std::abs(double(full_color) - 94000.0) / 94000.0 < 0.02);

    SUBCASE("the difference is exactly the removed transform blocks") {
        Model<float> m = make_model<float>(ArchDescriptor::full_gray());
        const std::int64_t removed =
            m.scale1.tbr1.w1.count() + m.scale1.tbr1.w2.count() + m.scale1.tbr1.bias.count() +
            m.scale1.bn1.scale.count() + m.scale1.bn1.shift.count() + m.scale2.tbr1.w1.count() +
            m.scale2.tbr1.w2.count() + m.scale2.tbr1.bias.count() + m.scale2.bn1.scale.count() +
            m.scale2.bn1.shift.count() + m.tbr3.w1.count() + m.tbr3.w2.count() +
            m.tbr3.bias.count() + m.bn3.scale.count() + m.bn3.shift.count();
        CHECK(full_gray - small_gray == removed);
    }
}

TEST_CASE("model registry names are unique and count trainables") {
    for (auto arch : {ArchDescriptor::full_gray(), ArchDescriptor::small_gray(),
                      ArchDescriptor::full_color(), tiny_arch()}) {
        Model<float> m = make_model<float>(arch);
        std::set<std::string> names;
        std::int64_t trainable = 0;
        visit_model<float>(m, [&](const std::string& name, Tensor<float>& t, TensorKind kind) {
            CHECK(names.insert(name).second);  // resolved exactly once
            if (kind == TensorKind::Trainable) trainable += t.count();
        });
        CHECK(trainable == count_params(arch));
    }
}

TEST_CASE("model serialization round-trips bit-exactly and validates") {
    ArchDescriptor arch = tiny_arch();
    Model<float> m = init_model<float>(arch, 7);
    m.agg_beta.data[0] = 0.25f;
    const std::string path = testutil::tmp_path("model.mdl");
    save_model(m, path);

    SUBCASE("round trip") {
        Model<float> back = load_model(path);
        CHECK(back.arch == arch);
        auto ta = all_tensors(m), tb = all_tensors(back);
        REQUIRE(ta.size() == tb.size());
        for (std::size_t i = 0; i < ta.size(); ++i) {
            CHECK(ta[i].name == tb[i].name);
            CHECK(ta[i].tensor->data == tb[i].tensor->data);
        }
        const std::string path2 = testutil::tmp_path("model2.mdl");
        save_model(back, path2);
        CHECK(testutil::read_bytes(path) == testutil::read_bytes(path2));
    }
    SUBCASE("corrupt magic") {
        std::string bytes = testutil::read_bytes(path);
        bytes[0] = 'X';
        const std::string bad = testutil::tmp_path("bad_magic.mdl");
        testutil::write_bytes(bad, bytes);
        try {
            load_model(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("magic") != std::string::npos);
        }
    }
    SUBCASE("truncation") {
        std::string bytes = testutil::read_bytes(path);
        bytes.resize(bytes.size() / 2);
        const std::string bad = testutil::tmp_path("trunc.mdl");
        testutil::write_bytes(bad, bytes);
        try {
            load_model(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
        }
    }
    SUBCASE("tensor count mismatch") {
        std::string bytes = testutil::read_bytes(path);
        bytes[12] = char(std::uint8_t(bytes[12]) + 1);  // little-endian count field
        const std::string bad = testutil::tmp_path("count.mdl");
        testutil::write_bytes(bad, bytes);
        try {
            load_model(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("count") != std::string::npos);
        }
    }
}

TEST_CASE("weight net: zero head, gradient check, permutation sensitivity") {
    const int k = 3;
    const std::int64_t L = 5;
    ArchDescriptor arch = tiny_arch();

    SUBCASE("all-zero layers give a zero weight vector") {
        Model<double> m = make_model<double>(arch);
        std::vector<double> dists(L * k, 0.7);
        std::vector<double> w(L * k, 1.0);
        WeightNetCache<double> cache;
        weight_net_forward(m.wnet1, dists.data(), L, k, false, cache, w.data(), 1);
        for (double v : w) CHECK(v == 0.0);
    }

    SUBCASE("finite differences through the 7-layer stack") {
        Model<double> m = init_model<double>(arch, 3);
        Xoshiro256pp rng(4);
        std::vector<double> dists(L * k);
        for (auto& v : dists) v = rng.next_unit();
        std::vector<double> upstream(L * k);
        for (auto& v : upstream) v = 2.0 * rng.next_unit() - 1.0;

        auto loss = [&]() {
            WeightNetCache<double> cache;
            std::vector<double> w(L * k);
            weight_net_forward(m.wnet1, dists.data(), L, k, true, cache, w.data(), 1);
            double acc = 0;
            for (std::size_t i = 0; i < w.size(); ++i) acc += upstream[i] * w[i];
            return acc;
        };

        std::vector<NamedTensor<double>> params;
        visit_model<double>(m, [&](const std::string& name, Tensor<double>& t, TensorKind kind) {
            if (kind == TensorKind::Trainable && name.rfind("wnet1", 0) == 0) {
                t.ensure_grad();
                t.zero_grad();
                params.push_back({name, &t});
            }
        });
        WeightNetCache<double> cache;
        std::vector<double> w(L * k);
        weight_net_forward(m.wnet1, dists.data(), L, k, true, cache, w.data(), 1);
        weight_net_backward(m.wnet1, dists.data(), L, k, cache, upstream.data(), 1);
        CHECK(grad_check<double>(loss, params, 1e-5, 0, 0).max_rel_err < 1e-5);
    }

    SUBCASE("permuting neighbor distances changes the output (locked values)") {
        Model<double> m = init_model<double>(arch, 9);
        // columns 0 and 1 carry the same entries with the tail swapped; the
        // rest pad the batch so train-mode statistics are non-degenerate
        std::vector<double> dists = {0.5, 0.1, 0.9, 0.5, 0.9, 0.1,
                                     0.2, 0.4, 0.3, 0.8, 0.6, 0.7,
                                     0.1, 0.3, 0.2, 0.9, 0.5, 0.4};
        const std::int64_t cols = 6;
        std::vector<double> w(cols * k);
        WeightNetCache<double> cache;
        weight_net_forward(m.wnet1, dists.data(), cols, k, true, cache, w.data(), 1);
        bool differs = false;
        for (int i = 0; i < k; ++i)
            if (w[i] != w[k + i]) differs = true;
        CHECK(differs);
        if (std::getenv("LIDIA_REGEN_GOLDEN")) {
            std::printf("wnet golden: %.17g %.17g %.17g | %.17g %.17g %.17g\n", w[0], w[1], w[2],
                        w[3], w[4], w[5]);
            return;
        }
        CHECK(w[0] == doctest::Approx(0.26342341975376016).epsilon(1e-12));
        CHECK(w[1] == doctest::Approx(0.58787073933747247).epsilon(1e-12));
        CHECK(w[2] == doctest::Approx(0.27396907312123076).epsilon(1e-12));
        CHECK(w[3] == doctest::Approx(-0.39517715620823968).epsilon(1e-12));
        CHECK(w[4] == doctest::Approx(-0.60727291094624081).epsilon(1e-12));
        CHECK(w[5] == doctest::Approx(0.44395493643193257).epsilon(1e-12));
    }
}

TEST_CASE("apply_column_weights scales columns") {
    const int n = 4, k = 3;
    std::vector<double> z(n * k);
    Xoshiro256pp rng(11);
    for (auto& v : z) v = rng.next_unit();
    std::vector<double> out(n * k);

    SUBCASE("unit weights leave Z unchanged") {
        std::vector<double> w(k, 1.0);
        apply_column_weights(z.data(), w.data(), n, k, out.data());
        CHECK(out == z);
    }
    SUBCASE("zero weights zero the matrix") {
        std::vector<double> w(k, 0.0);
        apply_column_weights(z.data(), w.data(), n, k, out.data());
        for (double v : out) CHECK(v == 0.0);
    }
    SUBCASE("random case equals the explicit diagonal multiply") {
        std::vector<double> w = {0.3, -1.2, 2.5};
        apply_column_weights(z.data(), w.data(), n, k, out.data());
        for (int j = 0; j < k; ++j)
            for (int i = 0; i < n; ++i) {
                double acc = 0;
                for (int jj = 0; jj < k; ++jj) acc += z[jj * n + i] * (jj == j ? w[j] : 0.0);
                CHECK(out[j * n + i] == doctest::Approx(acc).epsilon(1e-15));
            }
    }
}

TEST_CASE("full-size forward trace has the documented dimensions") {
    // full gray: 49x14 groups -> 64x14 features -> 49x1 patches -> 64x14 -> 64x56 -> 49x1
    ArchDescriptor arch = ArchDescriptor::full_gray();
    Model<float> m = init_model<float>(arch, 1);
    ImagePlane img = testutil::random_grid_plane(16, 16, 1, 2);

    BatchWorkspace<float> ws;
    ws.train_mode = false;
    ws.threads = 2;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(img, arch, 2);
    forward_batch(m, ws);

    const std::int64_t L = 256;
    CHECK(ws.L == L);
    CHECK(ws.scale[0].z.size() == std::size_t(L) * 14 * 49);
    CHECK(ws.scale[0].f0.size() == std::size_t(L) * 14 * 64);
    CHECK(ws.scale[0].p.size() == std::size_t(L) * 49);
    CHECK(ws.scale[0].fagg.size() == std::size_t(L) * 14 * 64);
    CHECK(ws.fused.size() == std::size_t(L) * 56 * 64);
    CHECK(ws.residual.size() == std::size_t(L) * 49);
    CHECK(ws.images[0].output.height == 16);
    CHECK(ws.images[0].output.width == 16);
}

TEST_CASE("constant bias field is a fixed point of the aggregation blocks") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 5);
    std::fill(m.scale1.t_pre.w1.data.begin(), m.scale1.t_pre.w1.data.end(), 0.0);
    std::fill(m.scale1.t_pre.w2.data.begin(), m.scale1.t_pre.w2.data.end(), 0.0);
    std::fill(m.scale1.t_pre.bias.data.begin(), m.scale1.t_pre.bias.data.end(), 0.4);
    m.scale2.t_pre = m.scale1.t_pre;

    Plane<double> img = testutil::random_plane<double>(10, 10, 1, 6);
    BatchWorkspace<double> ws;
    ws.train_mode = false;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(img, arch, 1);
    forward_batch(m, ws);

    for (int s = 0; s < 2; ++s) {
        REQUIRE(ws.scale[s].p.size() == ws.scale[s].ptilde.size());
        for (std::size_t i = 0; i < ws.scale[s].p.size(); ++i) {
            CHECK(ws.scale[s].p[i] == doctest::Approx(0.4).epsilon(1e-12));
            CHECK(ws.scale[s].ptilde[i] == doctest::Approx(0.4).epsilon(1e-12));
        }
    }
}

TEST_CASE("second-scale aggregation equals a naive per-phase reimplementation") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 15);
    Plane<double> img = testutil::random_plane<double>(12, 11, 1, 16);

    BatchWorkspace<double> ws;
    ws.train_mode = false;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(img, arch, 1);
    forward_batch(m, ws);

    const auto& prep = ws.images[0].prep;
    const int n = arch.patch_len(), side = arch.patch_side, mg = prep.pyr.margin;
    const std::int64_t L = prep.locations;
    for (int ph = 0; ph < 4; ++ph) {
        const Plane<double>& plane = prep.pyr.phases[ph];
        Plane<double> acc(plane.height, plane.width, 1, 0.0);
        Plane<double> cnt(plane.height, plane.width, 1, 0.0);
        for (std::int64_t l = 0; l < L; ++l) {
            const int r = int(l / img.width), c = int(l % img.width);
            if ((r & 1) * 2 + (c & 1) != ph) continue;
            const int pr = r / 2 + mg, pc = c / 2 + mg;
            int idx = 0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc, ++idx) {
                    acc.at(pr + dr, pc + dc) += ws.scale[1].p[l * n + idx];
                    cnt.at(pr + dr, pc + dc) += 1.0;
                }
        }
        for (std::int64_t i = 0; i < acc.samples(); ++i) acc.data[i] /= cnt.data[i];
        Plane<double> filtered = conv3x3_mirror(acc, low_pass_kernel<double>());
        for (std::int64_t l = 0; l < L; ++l) {
            const int r = int(l / img.width), c = int(l % img.width);
            if ((r & 1) * 2 + (c & 1) != ph) continue;
            const int pr = r / 2 + mg, pc = c / 2 + mg;
            std::vector<double> want(n);
            extract_patch(filtered, pr, pc, side, want.data());
            for (int i = 0; i < n; ++i)
                CHECK(ws.scale[1].ptilde[l * n + i] == doctest::Approx(want[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("fusion concatenates [s1-direct | s1-agg | s2-direct | s2-agg]") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 25);
    Plane<double> img = testutil::random_plane<double>(8, 8, 1, 26);
    BatchWorkspace<double> ws;
    ws.train_mode = false;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(img, arch, 1);
    forward_batch(m, ws);

    const int k = arch.group_size, f = arch.feature_dim;
    const std::size_t blk = std::size_t(k) * f;
    const double* parts[4] = {ws.scale[0].f1.data(), ws.scale[0].fagg.data(),
                              ws.scale[1].f1.data(), ws.scale[1].fagg.data()};
    for (std::int64_t l = 0; l < ws.L; ++l)
        for (int q = 0; q < 4; ++q)
            for (std::size_t i = 0; i < blk; ++i)
                CHECK(ws.fused[(std::size_t(l) * 4 + q) * blk + i] == parts[q][l * blk + i]);
}

TEST_CASE("zero input propagates only the head bias into the residual") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = make_model<double>(arch);  // every weight zero
    Xoshiro256pp rng(31);
    for (auto& v : m.t4.bias.data) v = rng.next_unit() - 0.5;

    Plane<double> img(8, 8, 1, 0.0);
    BatchWorkspace<double> ws;
    ws.train_mode = false;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(img, arch, 1);
    forward_batch(m, ws);

    const int n = arch.patch_len();
    for (std::int64_t l = 0; l < ws.L; ++l)
        for (int i = 0; i < n; ++i)
            CHECK(ws.residual[l * n + i] == doctest::Approx(m.t4.bias.data[i]).epsilon(1e-12));
}

TEST_CASE("zero residual head makes denoise the identity") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 41);
    std::fill(m.t4.w1.data.begin(), m.t4.w1.data.end(), 0.0);
    std::fill(m.t4.w2.data.begin(), m.t4.w2.data.end(), 0.0);
    std::fill(m.t4.bias.data.begin(), m.t4.bias.data.end(), 0.0);
    m.agg_beta.data[0] = 0.8;  // weighting must cancel on consistent patches

    Plane<double> img = testutil::random_plane<double>(10, 12, 1, 42);
    DenoiseOptions<double> opt;
    DenoiseResult<double> res = denoise(img, m, opt);
    for (std::int64_t i = 0; i < img.samples(); ++i)
        CHECK(res.image.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));
}

TEST_CASE("beta = 0 reduces the final combination to plain averaging") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 51);
    m.agg_beta.data[0] = 1.7;  // overridden below

    Plane<double> img = testutil::random_plane<double>(9, 10, 1, 52);
    DenoiseOptions<double> opt;
    opt.keep_patch_outputs = true;
    opt.override_beta = true;
    opt.beta_value = 0.0;
    DenoiseResult<double> res = denoise(img, m, opt);

    const PatchConfig cfg = arch.patch_config();
    const int mg = cfg.margin(), n = arch.patch_len();
    const std::int64_t L = img.pixels();
    std::vector<PatchRef<double>> refs(L);
    for (std::int64_t l = 0; l < L; ++l)
        refs[l] = {int(l / img.width) + mg, int(l % img.width) + mg,
                   &res.patch_outputs[std::size_t(l) * n]};
    Plane<double> ypad = aggregate<double>(refs, {}, img.height + 2 * mg, img.width + 2 * mg, 1,
                                           cfg.patch_side, false);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            CHECK(std::abs(res.image.at(r, c) - ypad.at(r + mg, c + mg)) < 1e-9);
    for (std::int64_t l = 0; l < L; ++l) CHECK(res.patch_weights[l] == 1.0);
}

TEST_CASE("streaming inference equals the batched eval path bitwise") {
    for (auto variant : {ArchVariant::Full, ArchVariant::Small}) {
        ArchDescriptor arch = tiny_arch(variant);
        Model<float> m = init_model<float>(arch, 61);
        Xoshiro256pp rng(62);
        visit_model<float>(m, [&](const std::string& name, Tensor<float>& t, TensorKind kind) {
            if (kind == TensorKind::State) {
                for (auto& v : t.data)
                    v = name.find("var") != std::string::npos ? 0.5f + float(rng.next_unit())
                                                              : float(rng.next_unit()) - 0.5f;
            }
        });
        ImagePlane img = testutil::random_grid_plane(11, 13, 1, 63);

        BatchWorkspace<float> ws;
        ws.train_mode = false;
        ws.threads = 2;
        ws.images.resize(1);
        ws.images[0].prep = prepare_image(img, arch, 2);
        forward_batch(m, ws);

        DenoiseOptions<float> opt;
        opt.threads = 2;
        DenoiseResult<float> res = denoise(img, m, opt);
        CHECK(res.image.data == ws.images[0].output.data);
    }
}

TEST_CASE("denoise matches the naive reference path") {
    for (auto variant : {ArchVariant::Full, ArchVariant::Small}) {
        ArchDescriptor arch = tiny_arch(variant);
        Model<double> m = init_model<double>(arch, 71);
        m.agg_beta.data[0] = 0.3;
        Xoshiro256pp rng(72);
        visit_model<double>(m, [&](const std::string& name, Tensor<double>& t, TensorKind kind) {
            if (kind == TensorKind::State) {
                for (auto& v : t.data)
                    v = name.find("var") != std::string::npos ? 0.5 + rng.next_unit()
                                                              : rng.next_unit() - 0.5;
            }
        });
        Plane<double> img = testutil::random_plane<double>(10, 9, 1, 73);
        DenoiseOptions<double> opt;
        DenoiseResult<double> got = denoise(img, m, opt);
        Plane<double> want = reference_denoise(img, m);
        for (std::int64_t i = 0; i < img.samples(); ++i)
            CHECK(got.image.data[i] == doctest::Approx(want.data[i]).epsilon(1e-11));
    }
}

TEST_CASE("denoise on color images matches the reference path") {
    ArchDescriptor arch = tiny_arch();
    arch.channels = 3;
    arch.feature_dim = 10;
    Model<double> m = init_model<double>(arch, 81);
    Plane<double> img = testutil::random_plane<double>(9, 9, 3, 82);
    DenoiseOptions<double> opt;
    DenoiseResult<double> got = denoise(img, m, opt);
    CHECK(got.image.channels == 3);
    Plane<double> want = reference_denoise(img, m);
    for (std::int64_t i = 0; i < img.samples(); ++i)
        CHECK(got.image.data[i] == doctest::Approx(want.data[i]).epsilon(1e-11));
}

TEST_CASE("denoise is deterministic and thread-count invariant") {
    ArchDescriptor arch = tiny_arch();
    Model<float> m = init_model<float>(arch, 91);
    ImagePlane img = testutil::random_grid_plane(16, 16, 1, 92);
    DenoiseOptions<float> o1, o4;
    o1.threads = 1;
    o4.threads = 4;
    const auto a = denoise(img, m, o1).image.data;
    const auto b = denoise(img, m, o4).image.data;
    const auto c = denoise(img, m, o1).image.data;
    CHECK(a == b);
    CHECK(a == c);
}

TEST_CASE("denoising a shifted image shifts the interior result") {
    ArchDescriptor arch = tiny_arch();
    Model<float> m = init_model<float>(arch, 95);
    const int side = 36;
    ImagePlane big = testutil::random_grid_plane(side + 6, side + 6, 1, 96);
    auto crop = [&](int r0, int c0) {
        ImagePlane out(side, side, 1);
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) out.at(r, c) = big.at(r0 + r, c0 + c);
        return out;
    };
    DenoiseOptions<float> opt;
    ImagePlane da = denoise(crop(0, 0), m, opt).image;
    ImagePlane db = denoise(crop(2, 2), m, opt).image;
    // guard band: the stride-2 branch searches the half-resolution phase
    // planes, so its window reaches twice as far in full-resolution pixels
    const int guard = (arch.patch_side + 2 * arch.search_window) / 2 + 4;
    REQUIRE(side - 2 * guard - 2 >= 4);
    for (int r = guard; r < side - guard - 2; ++r)
        for (int c = guard; c < side - guard - 2; ++c)
            CHECK(da.at(r + 2, c + 2) == doctest::Approx(db.at(r, c)).epsilon(1e-5));
}

TEST_CASE("full-size color configuration denoises a small image") {
    Model<float> m = init_model<float>(ArchDescriptor::full_color(), 88);
    ImagePlane img = testutil::random_grid_plane(24, 24, 3, 89);
    DenoiseOptions<float> opt;
    opt.threads = 2;
    DenoiseResult<float> res = denoise(img, m, opt);
    CHECK(res.image.height == 24);
    CHECK(res.image.channels == 3);
    for (float v : res.image.data) CHECK(std::isfinite(v));
}

TEST_CASE("a corrupt architecture descriptor is a parse error, not a usage error") {
    Model<float> m = init_model<float>(tiny_arch(), 87);
    const std::string path = testutil::tmp_path("bad_arch.mdl");
    save_model(m, path);
    std::string bytes = testutil::read_bytes(path);
    // the descriptor payload starts after magic(8) + version(4) + count(4) +
    // name len(2) + "arch"(4) + rank(1) + dim(4); zero out patch_side
    const std::size_t payload = 8 + 4 + 4 + 2 + 4 + 1 + 4;
    for (int b = 0; b < 4; ++b) bytes[payload + 2 * 4 + b] = 0;
    const std::string bad = testutil::tmp_path("bad_arch2.mdl");
    testutil::write_bytes(bad, bytes);
    CHECK_THROWS_AS(load_model(bad), ParseError);
}

TEST_CASE("shared weight net drops the second net and still runs") {
    ArchDescriptor arch = tiny_arch();
    arch.share_weight_net = true;
    CHECK(count_params(tiny_arch()) - count_params(arch) > 0);
    Model<float> m = init_model<float>(arch, 99);
    ImagePlane img = testutil::random_grid_plane(8, 8, 1, 98);
    DenoiseOptions<float> opt;
    CHECK_NOTHROW(denoise(img, m, opt));
}

TEST_CASE("end-to-end gradient check on a shrunken network (subsampled)") {
    ArchDescriptor arch = tiny_arch();  // 3x3 patches, k=3, b=5, 8 features
    Model<double> m = init_model<double>(arch, 101);
    Plane<double> clean = testutil::random_plane<double>(8, 8, 1, 102);
    Plane<double> noisy = clean;
    Xoshiro256pp nrng(103);
    for (auto& v : noisy.data) v += 0.1 * nrng.next_gaussian();

    BatchWorkspace<double> ws;
    ws.train_mode = true;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(noisy, arch, 1);

    auto loss = [&]() {
        forward_batch(m, ws);
        double acc = 0;
        const auto& out = ws.images[0].output;
        for (std::int64_t i = 0; i < out.samples(); ++i) {
            const double d = out.data[i] - clean.data[i];
            acc += d * d;
        }
        return acc / double(out.samples());
    };

    auto trainables = trainable_tensors(m);
    for (auto& nt : trainables) {
        nt.tensor->ensure_grad();
        nt.tensor->zero_grad();
    }
    forward_batch(m, ws);
    std::vector<Plane<double>> douts(1);
    douts[0] = Plane<double>(8, 8, 1);
    for (std::int64_t i = 0; i < douts[0].samples(); ++i)
        douts[0].data[i] =
            2.0 * (ws.images[0].output.data[i] - clean.data[i]) / double(douts[0].samples());
    backward_batch(m, ws, douts);

    // h = 1e-6: small enough that no probe drags a pre-activation across a
    // ReLU kink, still far above the double-precision noise floor
    const auto report =
        grad_check<double>(loss, trainables, 1e-6, /*max_coords_per_tensor=*/6, 104);
    INFO("worst tensor: ", report.worst, " rel err ", report.max_rel_err);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("reduced variant end-to-end gradient check (skip-connection backward)") {
    ArchDescriptor arch = tiny_arch(ArchVariant::Small);
    Model<double> m = init_model<double>(arch, 121);
    Plane<double> clean = testutil::random_plane<double>(8, 8, 1, 122);
    Plane<double> noisy = clean;
    Xoshiro256pp nrng(123);
    for (auto& v : noisy.data) v += 0.1 * nrng.next_gaussian();

    BatchWorkspace<double> ws;
    ws.train_mode = true;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(noisy, arch, 1);

    auto loss = [&]() {
        forward_batch(m, ws);
        double acc = 0;
        for (std::int64_t i = 0; i < 64; ++i) {
            const double d = ws.images[0].output.data[i] - clean.data[i];
            acc += d * d;
        }
        return acc / 64.0;
    };
    auto trainables = trainable_tensors(m);
    for (auto& nt : trainables) {
        nt.tensor->ensure_grad();
        nt.tensor->zero_grad();
    }
    forward_batch(m, ws);
    std::vector<Plane<double>> douts(1);
    douts[0] = Plane<double>(8, 8, 1);
    for (std::int64_t i = 0; i < 64; ++i)
        douts[0].data[i] = 2.0 * (ws.images[0].output.data[i] - clean.data[i]) / 64.0;
    backward_batch(m, ws, douts);

    const auto report = grad_check<double>(loss, trainables, 1e-6, 6, 124);
    INFO("worst tensor: ", report.worst, " rel err ", report.max_rel_err);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("shared weight net accumulates gradients from both scales correctly") {
    ArchDescriptor arch = tiny_arch();
    arch.share_weight_net = true;
    Model<double> m = init_model<double>(arch, 111);
    Plane<double> clean = testutil::random_plane<double>(8, 8, 1, 112);
    Plane<double> noisy = clean;
    Xoshiro256pp nrng(113);
    for (auto& v : noisy.data) v += 0.1 * nrng.next_gaussian();

    BatchWorkspace<double> ws;
    ws.train_mode = true;
    ws.threads = 1;
    ws.images.resize(1);
    ws.images[0].prep = prepare_image(noisy, arch, 1);

    auto loss = [&]() {
        forward_batch(m, ws);
        double acc = 0;
        for (std::int64_t i = 0; i < 64; ++i) {
            const double d = ws.images[0].output.data[i] - clean.data[i];
            acc += d * d;
        }
        return acc / 64.0;
    };
    auto trainables = trainable_tensors(m);
    for (auto& nt : trainables) {
        nt.tensor->ensure_grad();
        nt.tensor->zero_grad();
    }
    forward_batch(m, ws);
    std::vector<Plane<double>> douts(1);
    douts[0] = Plane<double>(8, 8, 1);
    for (std::int64_t i = 0; i < 64; ++i)
        douts[0].data[i] = 2.0 * (ws.images[0].output.data[i] - clean.data[i]) / 64.0;
    backward_batch(m, ws, douts);

    // focus the probes on the shared net, where both scales accumulate
    std::vector<NamedTensor<double>> wnet_params;
    for (auto& nt : trainables)
        if (nt.name.rfind("wnet1", 0) == 0) wnet_params.push_back(nt);
    const auto report = grad_check<double>(loss, wnet_params, 1e-6, 8, 114);
    INFO("worst tensor: ", report.worst, " rel err ", report.max_rel_err);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("golden snapshot: fixed seed, fixed input, locked outputs") {
    ArchDescriptor arch = tiny_arch();
    Model<double> m = init_model<double>(arch, 777);
    m.agg_beta.data[0] = 0.2;
    Plane<double> img = testutil::random_plane<double>(8, 8, 1, 778);
    DenoiseOptions<double> opt;
    DenoiseResult<double> res = denoise(img, m, opt);

    double sum = 0.0;
    for (double v : res.image.data) sum += v;

    if (std::getenv("LIDIA_REGEN_GOLDEN")) {
        std::printf("golden: out[0]=%.17g out[13]=%.17g out[37]=%.17g sum=%.17g\n",
                    res.image.data[0], res.image.data[13], res.image.data[37], sum);
        return;
    }
    // frozen after the first verified build; the naive reference path above
    // cross-checks the same pipeline
    CHECK(res.image.data[0] == doctest::Approx(0.30624126315063649).epsilon(1e-12));
    CHECK(res.image.data[13] == doctest::Approx(0.66752765136947745).epsilon(1e-12));
    CHECK(res.image.data[37] == doctest::Approx(0.67930937387007961).epsilon(1e-12));
    CHECK(sum == doctest::Approx(29.819310196899842).epsilon(1e-12));
}
