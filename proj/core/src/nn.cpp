#include "lidia/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lidia/rng.hpp"

namespace lidia {

template <typename T>
void sl_forward(const T* z, const SLParams<T>& p, T* a_scratch, T* y) {
    const int r_out = p.rows_out(), r_in = p.rows_in();
    const int c_in = p.cols_in(), c_out = p.cols_out();
    const T* w1 = p.w1.data.data();
    const T* w2 = p.w2.data.data();
    const T* bias = p.bias.data.data();

    // a = W1 * z
    for (int b = 0; b < c_in; ++b) {
        const T* zc = z + std::size_t(b) * r_in;
        T* ac = a_scratch + std::size_t(b) * r_out;
        for (int o = 0; o < r_out; ++o) {
            const T* w1r = w1 + std::size_t(o) * r_in;
            T acc = T(0);
            for (int i = 0; i < r_in; ++i) acc += w1r[i] * zc[i];
            ac[o] = acc;
        }
    }
    // y = a * W2 + B
    for (int c = 0; c < c_out; ++c) {
        T* yc = y + std::size_t(c) * r_out;
        for (int o = 0; o < r_out; ++o) yc[o] = bias[std::size_t(o) * c_out + c];
        for (int b = 0; b < c_in; ++b) {
            const T w = w2[std::size_t(b) * c_out + c];
            if (w == T(0)) continue;
            const T* ac = a_scratch + std::size_t(b) * r_out;
            for (int o = 0; o < r_out; ++o) yc[o] += w * ac[o];
        }
    }
}

template <typename T>
void sl_backward(const T* z, const T* dy, const SLParams<T>& p, const SLGradSink<T>& sink,
                 T* a_scratch, T* da_scratch, T* dz) {
    const int r_out = p.rows_out(), r_in = p.rows_in();
    const int c_in = p.cols_in(), c_out = p.cols_out();
    const T* w1 = p.w1.data.data();
    const T* w2 = p.w2.data.data();

    // recompute a = W1 * z (needed for dW2)
    T* a_cached = a_scratch;
    for (int b = 0; b < c_in; ++b) {
        const T* zc = z + std::size_t(b) * r_in;
        T* ac = a_cached + std::size_t(b) * r_out;
        for (int o = 0; o < r_out; ++o) {
            const T* w1r = w1 + std::size_t(o) * r_in;
            T acc = T(0);
            for (int i = 0; i < r_in; ++i) acc += w1r[i] * zc[i];
            ac[o] = acc;
        }
    }

    // dB += dY ; dW2[b,c] += <a_b, dy_c> ; da_b = sum_c W2[b,c] dy_c
    for (int b = 0; b < c_in; ++b) std::fill(da_scratch + std::size_t(b) * r_out,
                                             da_scratch + std::size_t(b + 1) * r_out, T(0));
    for (int c = 0; c < c_out; ++c) {
        const T* dyc = dy + std::size_t(c) * r_out;
        if (sink.bias)
            for (int o = 0; o < r_out; ++o) sink.bias[std::size_t(o) * c_out + c] += dyc[o];
        for (int b = 0; b < c_in; ++b) {
            const T* ac = a_cached + std::size_t(b) * r_out;
            const T w = w2[std::size_t(b) * c_out + c];
            T* dac = da_scratch + std::size_t(b) * r_out;
            T dot = T(0);
            for (int o = 0; o < r_out; ++o) {
                dot += ac[o] * dyc[o];
                dac[o] += w * dyc[o];
            }
            if (sink.w2) sink.w2[std::size_t(b) * c_out + c] += dot;
        }
    }
    // dW1 += da * Z^T ; dZ = W1^T * da
    for (int b = 0; b < c_in; ++b) {
        const T* dac = da_scratch + std::size_t(b) * r_out;
        const T* zc = z + std::size_t(b) * r_in;
        if (sink.w1) {
            for (int o = 0; o < r_out; ++o) {
                const T g = dac[o];
                if (g == T(0)) continue;
                T* w1g = sink.w1 + std::size_t(o) * r_in;
                for (int i = 0; i < r_in; ++i) w1g[i] += g * zc[i];
            }
        }
        if (dz) {
            T* dzc = dz + std::size_t(b) * r_in;
            std::fill(dzc, dzc + r_in, T(0));
            for (int o = 0; o < r_out; ++o) {
                const T g = dac[o];
                if (g == T(0)) continue;
                const T* w1r = w1 + std::size_t(o) * r_in;
                for (int i = 0; i < r_in; ++i) dzc[i] += g * w1r[i];
            }
        }
    }
}

template <typename T>
void relu_forward(T* x, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T* y, T* dy, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i)
        if (y[i] <= T(0)) dy[i] = T(0);
}

template <typename T>
void bn_forward_train(T* x, int channels, std::int64_t ncols, const BatchNormState<T>& state,
                      T* xhat_out, BatchNormStats<T>& stats) {
    if (ncols < 2) throw ShapeError("batch norm in train mode needs at least 2 columns");
    stats.mean.assign(channels, T(0));
    stats.var.assign(channels, T(0));
    stats.inv_std.assign(channels, T(0));

    for (std::int64_t col = 0; col < ncols; ++col) {
        const T* xc = x + col * channels;
        for (int c = 0; c < channels; ++c) stats.mean[c] += xc[c];
    }
    for (int c = 0; c < channels; ++c) stats.mean[c] /= T(ncols);
    for (std::int64_t col = 0; col < ncols; ++col) {
        const T* xc = x + col * channels;
        for (int c = 0; c < channels; ++c) {
            const T d = xc[c] - stats.mean[c];
            stats.var[c] += d * d;
        }
    }
    for (int c = 0; c < channels; ++c) {
        stats.var[c] /= T(ncols);
        stats.inv_std[c] = T(1) / std::sqrt(stats.var[c] + state.epsilon);
    }

    const T* scale = state.scale.data.data();
    const T* shift = state.shift.data.data();
    for (std::int64_t col = 0; col < ncols; ++col) {
        T* xc = x + col * channels;
        T* hc = xhat_out + col * channels;
        for (int c = 0; c < channels; ++c) {
            const T h = (xc[c] - stats.mean[c]) * stats.inv_std[c];
            hc[c] = h;
            xc[c] = scale[c] * h + shift[c];
        }
    }
}

template <typename T>
void bn_forward_eval(T* x, int channels, std::int64_t ncols, const BatchNormState<T>& state) {
    const T* scale = state.scale.data.data();
    const T* shift = state.shift.data.data();
    const T* rm = state.running_mean.data.data();
    const T* rv = state.running_var.data.data();
    std::vector<T> mul(channels), add(channels);
    for (int c = 0; c < channels; ++c) {
        mul[c] = scale[c] / std::sqrt(rv[c] + state.epsilon);
        add[c] = shift[c] - rm[c] * mul[c];
    }
    for (std::int64_t col = 0; col < ncols; ++col) {
        T* xc = x + col * channels;
        for (int c = 0; c < channels; ++c) xc[c] = mul[c] * xc[c] + add[c];
    }
}

template <typename T>
void bn_backward(const T* xhat, T* dy, int channels, std::int64_t ncols,
                 const BatchNormState<T>& state, const BatchNormStats<T>& stats, T* dscale,
                 T* dshift) {
    std::vector<T> sum_dy(channels, T(0)), sum_dy_x(channels, T(0));
    for (std::int64_t col = 0; col < ncols; ++col) {
        const T* dc = dy + col * channels;
        const T* hc = xhat + col * channels;
        for (int c = 0; c < channels; ++c) {
            sum_dy[c] += dc[c];
            sum_dy_x[c] += dc[c] * hc[c];
        }
    }
    if (dscale)
        for (int c = 0; c < channels; ++c) dscale[c] += sum_dy_x[c];
    if (dshift)
        for (int c = 0; c < channels; ++c) dshift[c] += sum_dy[c];

    const T* scale = state.scale.data.data();
    const T inv_n = T(1) / T(ncols);
    for (std::int64_t col = 0; col < ncols; ++col) {
        T* dc = dy + col * channels;
        const T* hc = xhat + col * channels;
        for (int c = 0; c < channels; ++c) {
            dc[c] = scale[c] * stats.inv_std[c] *
                    (dc[c] - sum_dy[c] * inv_n - hc[c] * sum_dy_x[c] * inv_n);
        }
    }
}

template <typename T>
void bn_update_running(BatchNormState<T>& state, const BatchNormStats<T>& stats) {
    const T m = state.momentum;
    for (int c = 0; c < state.channels(); ++c) {
        state.running_mean.data[c] = (T(1) - m) * state.running_mean.data[c] + m * stats.mean[c];
        state.running_var.data[c] = (T(1) - m) * state.running_var.data[c] + m * stats.var[c];
    }
}

template <typename T>
void fc_forward(const T* x, int in_dim, std::int64_t ncols, const Tensor<T>& weight,
                const Tensor<T>& bias, T* y) {
    const int out_dim = weight.dims[0];
    const T* w = weight.data.data();
    const T* b = bias.data.data();
    for (std::int64_t col = 0; col < ncols; ++col) {
        const T* xc = x + col * in_dim;
        T* yc = y + col * out_dim;
        for (int o = 0; o < out_dim; ++o) {
            const T* wr = w + std::size_t(o) * in_dim;
            T acc = b[o];
            for (int i = 0; i < in_dim; ++i) acc += wr[i] * xc[i];
            yc[o] = acc;
        }
    }
}

template <typename T>
void fc_backward(const T* x, int in_dim, std::int64_t ncols, const Tensor<T>& weight,
                 const T* dy, T* dx, T* dweight, T* dbias) {
    const int out_dim = weight.dims[0];
    const T* w = weight.data.data();
    for (std::int64_t col = 0; col < ncols; ++col) {
        const T* xc = x + col * in_dim;
        const T* dyc = dy + col * out_dim;
        T* dxc = dx ? dx + col * in_dim : nullptr;
        if (dxc) std::fill(dxc, dxc + in_dim, T(0));
        for (int o = 0; o < out_dim; ++o) {
            const T g = dyc[o];
            if (dbias) dbias[o] += g;
            if (g == T(0)) continue;
            const T* wr = w + std::size_t(o) * in_dim;
            if (dweight) {
                T* dwr = dweight + std::size_t(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) dwr[i] += g * xc[i];
            }
            if (dxc)
                for (int i = 0; i < in_dim; ++i) dxc[i] += g * wr[i];
        }
    }
}

template <typename T>
void check_finite(std::span<const T> values, const std::string& what) {
    for (const T v : values)
        if (!std::isfinite(double(v))) throw NumericError("non-finite value in " + what);
}

template <typename T>
void optimizer_step(std::span<NamedTensor<T>> params, OptimizerState<T>& state) {
    if (state.m.size() != params.size())
        throw ShapeError("optimizer_step: state has " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " tensors");
    for (auto& nt : params) check_finite<T>(nt.tensor->grad, "gradient of " + nt.name);

    state.step += 1;
    const auto& cfg = state.config;
    if (cfg.kind == OptKind::Adam) {
        const T bc1 = T(1) - std::pow(cfg.beta1, T(state.step));
        const T bc2 = T(1) - std::pow(cfg.beta2, T(state.step));
        for (std::size_t t = 0; t < params.size(); ++t) {
            Tensor<T>& p = *params[t].tensor;
            auto& m = state.m[t];
            auto& v = state.v[t];
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                const T g = p.grad[i];
                m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g * g;
                const T mh = m[i] / bc1;
                const T vh = v[i] / bc2;
                p.data[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
            }
        }
    } else {
        for (std::size_t t = 0; t < params.size(); ++t) {
            Tensor<T>& p = *params[t].tensor;
            auto& vel = state.m[t];
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                vel[i] = cfg.momentum * vel[i] + p.grad[i];
                p.data[i] -= cfg.learning_rate * vel[i];
            }
        }
    }
}

template <typename T>
GradCheckReport<T> grad_check(const std::function<T()>& loss, std::span<NamedTensor<T>> params,
                              T h, std::int64_t max_coords_per_tensor, std::uint64_t subsample_seed) {
    GradCheckReport<T> report;
    // Central differences cannot resolve gradients below the roundoff of the
    // loss divided by h; when both sides sit under that floor (e.g. a bias
    // that batch norm's mean subtraction provably cancels), they agree.
    const T base = loss();
    const T zero_tol =
        std::max(T(1e-10), T(200) * std::numeric_limits<T>::epsilon() *
                               std::max(T(1), std::abs(base)) / h);

    // A probe whose +-h interval straddles a ReLU kink measures the kink, not
    // the derivative. Such probes are detected by halving h: a valid central
    // difference is stable under refinement, a kink-straddling one is not.
    // Unstable probes retry at h/16; the rare coordinate that stays unstable
    // is skipped (and counted) rather than reported as a gradient error.
    auto stable_fd = [&](T& slot, T step, T& fd_out) -> bool {
        auto central = [&](T hh) {
            const T saved = slot;
            slot = saved + hh;
            const T up = loss();
            slot = saved - hh;
            const T down = loss();
            slot = saved;
            return (up - down) / (2 * hh);
        };
        for (int attempt = 0; attempt < 2; ++attempt) {
            const T fd1 = central(step);
            const T fd2 = central(step / 2);
            const T noise = T(64) * std::numeric_limits<T>::epsilon() *
                            std::max(T(1), std::abs(base)) / step;
            if (std::abs(fd1 - fd2) <=
                T(0.02) * std::max(std::abs(fd1), std::abs(fd2)) + T(8) * noise) {
                fd_out = fd2;
                return true;
            }
            step /= 16;
        }
        return false;
    };

    for (auto& nt : params) {
        Tensor<T>& tensor = *nt.tensor;
        const std::int64_t n = std::int64_t(tensor.data.size());
        std::vector<std::int64_t> coords;
        if (max_coords_per_tensor > 0 && n > max_coords_per_tensor) {
            Xoshiro256pp rng(derive_seed(subsample_seed, std::hash<std::string>{}(nt.name)));
            coords.resize(max_coords_per_tensor);
            for (auto& c : coords) c = std::int64_t(rng.next_below(std::uint64_t(n)));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        } else {
            coords.resize(n);
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
        }

        typename GradCheckReport<T>::Entry entry{nt.name, T(0), std::int64_t(coords.size())};
        for (const std::int64_t i : coords) {
            T fd = T(0);
            if (!stable_fd(tensor.data[i], h, fd)) {
                ++report.unstable_probes;
                continue;
            }
            const T an = tensor.grad[i];
            // differences at the probe's own noise scale cannot distinguish a
            // correct gradient from a wrong one; only larger gaps count
            if (std::abs(fd - an) < zero_tol) continue;
            if (std::abs(fd) < zero_tol && std::abs(an) < zero_tol) continue;
            const T denom = std::max(std::abs(fd) + std::abs(an), T(1e-8));
            const T rel = std::abs(fd - an) / denom;
            if (rel > entry.max_rel_err) entry.max_rel_err = rel;
        }
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst = nt.name;
        }
        report.per_tensor.push_back(std::move(entry));
    }
    return report;
}

#define LIDIA_NN_INST(T)                                                                       \
    template void sl_forward<T>(const T*, const SLParams<T>&, T*, T*);                         \
    template void sl_backward<T>(const T*, const T*, const SLParams<T>&, const SLGradSink<T>&, \
                                 T*, T*, T*);                                                  \
    template void relu_forward<T>(T*, std::int64_t);                                           \
    template void relu_backward<T>(const T*, T*, std::int64_t);                                \
    template void bn_forward_train<T>(T*, int, std::int64_t, const BatchNormState<T>&, T*,     \
                                      BatchNormStats<T>&);                                     \
    template void bn_forward_eval<T>(T*, int, std::int64_t, const BatchNormState<T>&);         \
    template void bn_backward<T>(const T*, T*, int, std::int64_t, const BatchNormState<T>&,    \
                                 const BatchNormStats<T>&, T*, T*);                            \
    template void bn_update_running<T>(BatchNormState<T>&, const BatchNormStats<T>&);          \
    template void fc_forward<T>(const T*, int, std::int64_t, const Tensor<T>&,                 \
                                const Tensor<T>&, T*);                                         \
    template void fc_backward<T>(const T*, int, std::int64_t, const Tensor<T>&, const T*, T*,  \
                                 T*, T*);                                                      \
    template void optimizer_step<T>(std::span<NamedTensor<T>>, OptimizerState<T>&);            \
    template GradCheckReport<T> grad_check<T>(const std::function<T()>&,                       \
                                              std::span<NamedTensor<T>>, T, std::int64_t,      \
                                              std::uint64_t);                                  \
    template void check_finite<T>(std::span<const T>, const std::string&);

LIDIA_NN_INST(float)
LIDIA_NN_INST(double)
#undef LIDIA_NN_INST

}  // namespace lidia
