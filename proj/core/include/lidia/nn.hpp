#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lidia/errors.hpp"

namespace lidia {

// Dense rank <= 3 array with an optional same-shape gradient buffer. This is
// the currency of every layer; 32-bit in production, 64-bit when gradients
// are being checked against finite differences.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad()

    Tensor() = default;
    static Tensor zeros(std::vector<int> d) {
        Tensor t;
        t.dims = std::move(d);
        t.data.assign(t.count(), T(0));
        return t;
    }

    std::int64_t count() const {
        std::int64_t n = 1;
        for (int d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
    int rank() const { return int(dims.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

// Parameters of one separable linear layer Y = W1 * Z * W2 + B. W1 acts on
// the spatial/feature axis (rows), W2 on the similarity axis (columns).
// Storage: w1 is (rows_out x rows_in) row-major, w2 (cols_in x cols_out)
// row-major, bias (rows_out x cols_out) row-major.
template <typename T>
struct SLParams {
    Tensor<T> w1, w2, bias;

    int rows_out() const { return w1.dims[0]; }
    int rows_in() const { return w1.dims[1]; }
    int cols_in() const { return w2.dims[0]; }
    int cols_out() const { return w2.dims[1]; }

    static SLParams sized(int r_out, int r_in, int c_in, int c_out) {
        SLParams p;
        p.w1 = Tensor<T>::zeros({r_out, r_in});
        p.w2 = Tensor<T>::zeros({c_in, c_out});
        p.bias = Tensor<T>::zeros({r_out, c_out});
        return p;
    }
    bool empty() const { return w1.dims.empty(); }
};

// Destinations for accumulated parameter gradients. They may point at the
// tensors' own grad buffers or at per-chunk scratch when running threaded.
template <typename T>
struct SLGradSink {
    T* w1 = nullptr;
    T* w2 = nullptr;
    T* bias = nullptr;
};

// Matrices below are column-major with contiguous columns: element (r,c) of
// an (R x C) matrix lives at data[c*R + r]. A patch group stored column-by-
// column is exactly such a matrix.

// Y = W1 * Z * W2 + B. `a_scratch` receives the intermediate W1*Z
// (rows_out x cols_in); callers keep it for the backward pass.
template <typename T>
void sl_forward(const T* z, const SLParams<T>& p, T* a_scratch, T* y);

// Gradients of the separable layer: dZ = W1^T dY W2^T, dW1 = (dY W2^T) Z^T,
// dW2 = (W1 Z)^T dY, dB = dY. Only the layer input Z needs to be cached;
// W1*Z is recomputed into `a_scratch` (rows_out x cols_in) and `da_scratch`
// receives dY*W2^T. `dz` may be null when the input gradient is not needed.
template <typename T>
void sl_backward(const T* z, const T* dy, const SLParams<T>& p, const SLGradSink<T>& sink,
                 T* a_scratch, T* da_scratch, T* dz);

// Elementwise max(x, 0); backward masks by output > 0, so the subgradient at
// exactly zero is zero.
template <typename T>
void relu_forward(T* x, std::int64_t n);
template <typename T>
void relu_backward(const T* y, T* dy, std::int64_t n);

// Per-channel batch normalization over all columns of a (C x N) matrix.
template <typename T>
struct BatchNormState {
    Tensor<T> scale, shift;              // trainable
    Tensor<T> running_mean, running_var; // tracked with momentum, used in eval
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    static BatchNormState sized(int channels) {
        BatchNormState s;
        s.scale = Tensor<T>::zeros({channels});
        std::fill(s.scale.data.begin(), s.scale.data.end(), T(1));
        s.shift = Tensor<T>::zeros({channels});
        s.running_mean = Tensor<T>::zeros({channels});
        s.running_var = Tensor<T>::zeros({channels});
        std::fill(s.running_var.data.begin(), s.running_var.data.end(), T(1));
        return s;
    }
    int channels() const { return scale.dims.empty() ? 0 : scale.dims[0]; }
    bool empty() const { return scale.dims.empty(); }
};

// Batch statistics captured by a train-mode forward; the training loop feeds
// them back into the running estimates after the step (forward itself never
// mutates state, which keeps finite-difference probes clean).
template <typename T>
struct BatchNormStats {
    std::vector<T> mean, var, inv_std;
};

// Train mode: normalize by batch statistics (biased variance), then affine.
// x is (C x N) column-major and is overwritten by the output; `xhat_out`
// (same shape) receives the pre-affine normalized values for the backward.
// Requires N >= 2.
template <typename T>
void bn_forward_train(T* x, int channels, std::int64_t ncols, const BatchNormState<T>& state,
                      T* xhat_out, BatchNormStats<T>& stats);

// Eval mode: normalize by running statistics.
template <typename T>
void bn_forward_eval(T* x, int channels, std::int64_t ncols, const BatchNormState<T>& state);

// Standard coupled train-mode gradient. `dy` is overwritten with dX.
// `dscale`/`dshift` accumulate.
template <typename T>
void bn_backward(const T* xhat, T* dy, int channels, std::int64_t ncols,
                 const BatchNormState<T>& state, const BatchNormStats<T>& stats, T* dscale,
                 T* dshift);

template <typename T>
void bn_update_running(BatchNormState<T>& state, const BatchNormStats<T>& stats);

// Fully connected y = W x + b applied to every column of a (C x N) matrix.
// W is (out x in) row-major.
template <typename T>
void fc_forward(const T* x, int in_dim, std::int64_t ncols, const Tensor<T>& weight,
                const Tensor<T>& bias, T* y);
template <typename T>
void fc_backward(const T* x, int in_dim, std::int64_t ncols, const Tensor<T>& weight,
                 const T* dy, T* dx, T* dweight, T* dbias);

// --- Optimizers ---------------------------------------------------------

enum class OptKind { Adam, Sgd };

template <typename T>
struct OptimizerConfig {
    OptKind kind = OptKind::Adam;
    T learning_rate = T(1e-2);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);
    T momentum = T(0.9);  // SGD only
};

// One slot per trainable tensor, in registry order.
template <typename T>
struct OptimizerState {
    OptimizerConfig<T> config;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;  // Adam first moment / SGD velocity
    std::vector<std::vector<T>> v;  // Adam second moment

    void reset(const OptimizerConfig<T>& cfg, std::span<const std::int64_t> sizes) {
        config = cfg;
        step = 0;
        m.assign(sizes.size(), {});
        v.assign(sizes.size(), {});
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            m[i].assign(sizes[i], T(0));
            if (cfg.kind == OptKind::Adam) v[i].assign(sizes[i], T(0));
        }
    }
};

// A named view of one trainable tensor for the optimizer and grad checking.
template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor = nullptr;
};

// Applies one update to every tensor from its .grad. Throws NumericError
// naming the tensor if any gradient is non-finite. Pure in (params, grads,
// state): identical inputs give bit-identical results.
template <typename T>
void optimizer_step(std::span<NamedTensor<T>> params, OptimizerState<T>& state);

// --- Gradient checking ---------------------------------------------------

template <typename T>
struct GradCheckReport {
    struct Entry {
        std::string name;
        T max_rel_err = T(0);
        std::int64_t coords = 0;
    };
    std::vector<Entry> per_tensor;
    T max_rel_err = T(0);
    std::string worst;
    std::int64_t unstable_probes = 0;  // probes straddling a ReLU kink, skipped
    bool pass(T tol) const { return max_rel_err < tol; }
};

// Central finite differences, h per coordinate, against the analytic grads
// already stored in each tensor's .grad. `loss` must recompute the forward
// pass from the tensors' current values. Tensors larger than
// `max_coords_per_tensor` are probed on a seeded random subsample.
template <typename T>
GradCheckReport<T> grad_check(const std::function<T()>& loss, std::span<NamedTensor<T>> params,
                              T h, std::int64_t max_coords_per_tensor, std::uint64_t subsample_seed);

// Throws NumericError naming `what` if any value is non-finite.
template <typename T>
void check_finite(std::span<const T> values, const std::string& what);

#define LIDIA_NN_EXTERN(T)                                                                        \
    extern template void sl_forward<T>(const T*, const SLParams<T>&, T*, T*);                     \
    extern template void sl_backward<T>(const T*, const T*, const SLParams<T>&,                   \
                                        const SLGradSink<T>&, T*, T*, T*);                        \
    extern template void relu_forward<T>(T*, std::int64_t);                                       \
    extern template void relu_backward<T>(const T*, T*, std::int64_t);                            \
    extern template void bn_forward_train<T>(T*, int, std::int64_t, const BatchNormState<T>&, T*, \
                                             BatchNormStats<T>&);                                 \
    extern template void bn_forward_eval<T>(T*, int, std::int64_t, const BatchNormState<T>&);     \
    extern template void bn_backward<T>(const T*, T*, int, std::int64_t, const BatchNormState<T>&,\
                                        const BatchNormStats<T>&, T*, T*);                        \
    extern template void bn_update_running<T>(BatchNormState<T>&, const BatchNormStats<T>&);      \
    extern template void fc_forward<T>(const T*, int, std::int64_t, const Tensor<T>&,             \
                                       const Tensor<T>&, T*);                                     \
    extern template void fc_backward<T>(const T*, int, std::int64_t, const Tensor<T>&, const T*,  \
                                        T*, T*, T*);                                              \
    extern template void optimizer_step<T>(std::span<NamedTensor<T>>, OptimizerState<T>&);        \
    extern template GradCheckReport<T> grad_check<T>(const std::function<T()>&,                   \
                                                     std::span<NamedTensor<T>>, T, std::int64_t,  \
                                                     std::uint64_t);                              \
    extern template void check_finite<T>(std::span<const T>, const std::string&);

LIDIA_NN_EXTERN(float)
LIDIA_NN_EXTERN(double)
#undef LIDIA_NN_EXTERN

}  // namespace lidia
