#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lidia/nn.hpp"
#include "lidia/patch.hpp"
#include "lidia/plane.hpp"

namespace lidia {

enum class ArchVariant { Full, Small };

// Everything that determines the network's shapes. The full-size presets
// are full_gray (7x7 patches, 64 features), full_color (5x5x3, 80 features)
// and their reduced variants; tests shrink all fields freely.
struct ArchDescriptor {
    ArchVariant variant = ArchVariant::Full;
    int channels = 1;
    int patch_side = 7;
    int group_size = 14;   // patches per group (seed + neighbors)
    int feature_dim = 64;  // feature rows inside the transform stacks
    int search_window = 37;
    bool share_weight_net = false;  // one weight net for both scales

    int patch_len() const { return patch_side * patch_side * channels; }
    int fused_cols() const { return 4 * group_size; }
    PatchConfig patch_config() const {
        return PatchConfig{patch_side, channels, group_size, search_window};
    }
    void validate() const;
    bool operator==(const ArchDescriptor&) const = default;

    static ArchDescriptor full_gray() { return {}; }
    static ArchDescriptor small_gray() {
        ArchDescriptor a;
        a.variant = ArchVariant::Small;
        return a;
    }
    static ArchDescriptor full_color() {
        ArchDescriptor a;
        a.channels = 3;
        a.patch_side = 5;
        a.feature_dim = 80;
        return a;
    }
    static ArchDescriptor small_color() {
        ArchDescriptor a = full_color();
        a.variant = ArchVariant::Small;
        return a;
    }
};

// The auxiliary net mapping (seed variance, k-1 squared neighbor distances)
// to per-column relevance weights: seven k x k fully connected layers with
// batch norm + ReLU between consecutive pairs; the head stays linear.
template <typename T>
struct WeightNet {
    static constexpr int kLayers = 7;
    std::array<Tensor<T>, kLayers> fc_w;
    std::array<Tensor<T>, kLayers> fc_b;
    std::array<BatchNormState<T>, kLayers - 1> bn;
    bool empty() const { return fc_w[0].dims.empty(); }
};

// One scale's transform stack around the aggregation block.
template <typename T>
struct ScaleStack {
    SLParams<T> tr0;      // patch_len -> features, k -> k     (transform + ReLU)
    SLParams<T> tbr1;     // features -> features, k -> k      (absent in Small)
    BatchNormState<T> bn1;
    SLParams<T> t_pre;    // features -> patch_len, k -> 1     (to image domain)
    SLParams<T> tr_post;  // patch_len -> features, 1 -> k     (back to features)
};

template <typename T>
struct Model {
    ArchDescriptor arch;
    WeightNet<T> wnet1, wnet2;  // wnet2 unused when arch.share_weight_net
    ScaleStack<T> scale1, scale2;
    SLParams<T> tbr2;
    BatchNormState<T> bn2;
    SLParams<T> tbr3;  // absent in Small
    BatchNormState<T> bn3;
    SLParams<T> t4;       // features -> patch_len, 4k -> 1 (residual head)
    Tensor<T> agg_beta;   // scalar of the final variance-driven weights
};

enum class TensorKind { Trainable, State };

// Enumerates every named tensor in a fixed order; this order defines the
// optimizer slots and the serialized layout.
template <typename T>
void visit_model(Model<T>& m,
                 const std::function<void(const std::string&, Tensor<T>&, TensorKind)>& fn);

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(Model<T>& m);

template <typename T>
Model<T> make_model(const ArchDescriptor& arch);  // zero weights, default BN

template <typename T>
Model<T> init_model(const ArchDescriptor& arch, std::uint64_t seed);  // Glorot factors

std::int64_t count_params(const ArchDescriptor& arch);

template <typename To, typename From>
Model<To> convert_model(const Model<From>& src);

// Model container: "LIDIAMDL" magic, little-endian u32 version and tensor
// count, then {u16 name length, name, u8 rank, u32 dims, f32 payload} per
// tensor, with the architecture serialized as the leading "arch" entry.
void save_model(const Model<float>& m, const std::string& path);
Model<float> load_model(const std::string& path);

// --- Prepared inputs -----------------------------------------------------

// Grouping output for a whole image: pyramid planes plus per-location
// neighbor tables for both scales. Locations are original pixels in
// row-major order. Grouping happens once, before any filtering.
template <typename T>
struct PreparedImage {
    ScalePyramid<T> pyr;
    int height = 0, width = 0;
    std::int64_t locations = 0;
    std::vector<std::int32_t> nbr_rows[2], nbr_cols[2];  // [scale], L*k
    std::vector<T> dists[2];                             // [scale], L*k
};

template <typename T>
PreparedImage<T> prepare_image(const Plane<T>& img, const ArchDescriptor& arch, int threads);

// Column scaling by the weight-net output: out = Z * diag(w), the only
// dimensionally consistent reading of weighting an n x k group by k weights.
template <typename T>
void apply_column_weights(const T* z, const T* w, int n, int k, T* out);
extern template void apply_column_weights<float>(const float*, const float*, int, int, float*);
extern template void apply_column_weights<double>(const double*, const double*, int, int, double*);

// --- Batched training-path forward/backward ------------------------------

template <typename T>
struct WeightNetCache {
    std::array<std::vector<T>, WeightNet<T>::kLayers> act;     // post-layer values
    std::array<std::vector<T>, WeightNet<T>::kLayers - 1> xhat;
    std::array<BatchNormStats<T>, WeightNet<T>::kLayers - 1> stats;
};

// Runs the weight net over L stacked distance vectors ((k x L) column-major).
template <typename T>
void weight_net_forward(const WeightNet<T>& net, const T* dists, std::int64_t L, int k, bool train,
                        WeightNetCache<T>& cache, T* w_out, int threads);

// Accumulates parameter gradients (and nothing else: the distance inputs are
// data). `dw` is the gradient at the net output.
template <typename T>
void weight_net_backward(WeightNet<T>& net, const T* dists, std::int64_t L, int k,
                         const WeightNetCache<T>& cache, const T* dw, int threads);

// Per-scale activation caches for one batch (all images concatenated).
template <typename T>
struct ScaleActivations {
    std::vector<T> z;      // L*k*n gathered groups
    std::vector<T> w;      // L*k weight-net outputs
    std::vector<T> zt;     // L*k*n weighted columns
    std::vector<T> f0;     // L*k*f
    std::vector<T> xhat1;  // L*k*f (Full only)
    std::vector<T> f1;     // L*k*f (Full; aliases f0 in Small)
    std::vector<T> p;      // L*n patches in image domain
    std::vector<T> ptilde; // L*n after aggregation consistency
    std::vector<T> fagg;   // L*k*f
    WeightNetCache<T> wn_cache;
    BatchNormStats<T> bn1_stats;
};

template <typename T>
struct ImageSlot {
    PreparedImage<T> prep;
    std::int64_t loc_begin = 0;
    // aggregation caches
    Plane<T> cov1;
    std::array<Plane<T>, 4> cov2;
    // final weighted-average caches
    Plane<T> den, yhat_pad;
    Plane<T> output;  // cropped result
};

template <typename T>
struct BatchWorkspace {
    bool train_mode = true;
    int threads = 1;
    std::int64_t L = 0;
    std::vector<ImageSlot<T>> images;
    ScaleActivations<T> scale[2];
    std::vector<T> fused;      // L*4k*f concatenation [s1-direct|s1-agg|s2-direct|s2-agg]
    std::vector<T> xhat2, g1;  // L*4k*f
    std::vector<T> xhat3, g2;  // L*4k*f (Full only; g2 aliases g1 in Small)
    std::vector<T> residual;   // L*n
    std::vector<T> zhat;       // L*n restored patches
    std::vector<T> zhat_mean, zhat_var, w_final;  // L
    BatchNormStats<T> bn2_stats, bn3_stats;
};

// Runs the full network over every prepared image in the workspace and fills
// each slot's cropped output plane. Train mode uses batch statistics in all
// batch-norm layers (pooled over every location of every image in the
// batch); eval mode uses running statistics. Never mutates the model.
template <typename T>
void forward_batch(const Model<T>& model, BatchWorkspace<T>& ws);

// Reverse pass from per-image output gradients (cropped planes, dL/dY).
// Accumulates into every trainable tensor's .grad, which must be allocated
// and zeroed by the caller.
template <typename T>
void backward_batch(Model<T>& model, BatchWorkspace<T>& ws,
                    const std::vector<Plane<T>>& output_grads);

// Feeds the batch statistics captured by the last train-mode forward into
// the running estimates (one momentum update per batch-norm layer).
template <typename T>
void update_running_stats(Model<T>& model, const BatchWorkspace<T>& ws);

// --- Inference ------------------------------------------------------------

template <typename T>
struct DenoiseOptions {
    int threads = 1;
    bool keep_patch_outputs = false;  // retain the L*n restored patches
    // Overrides the learned weighting exponent when set (beta = 0 turns the
    // final combination into plain averaging).
    bool override_beta = false;
    T beta_value = T(0);
};

template <typename T>
struct DenoiseResult {
    Plane<T> image;
    std::vector<T> patch_outputs;  // L*n when requested
    std::vector<T> patch_weights;  // L when requested
};

// Full pipeline at eval settings: pad, pyramid, group, filter, weighted
// re-aggregation, crop. Streams the two transform passes in fixed-size
// location blocks so memory stays modest on large images; bitwise equal to
// the batched training path run in eval mode.
template <typename T>
DenoiseResult<T> denoise(const Plane<T>& noisy, const Model<T>& model,
                         const DenoiseOptions<T>& opt = {});

#define LIDIA_NET_EXTERN(T)                                                                       \
    extern template void visit_model<T>(                                                          \
        Model<T>&, const std::function<void(const std::string&, Tensor<T>&, TensorKind)>&);       \
    extern template std::vector<NamedTensor<T>> trainable_tensors<T>(Model<T>&);                  \
    extern template Model<T> make_model<T>(const ArchDescriptor&);                                \
    extern template Model<T> init_model<T>(const ArchDescriptor&, std::uint64_t);                 \
    extern template PreparedImage<T> prepare_image<T>(const Plane<T>&, const ArchDescriptor&,     \
                                                      int);                                       \
    extern template void weight_net_forward<T>(const WeightNet<T>&, const T*, std::int64_t, int,  \
                                               bool, WeightNetCache<T>&, T*, int);                \
    extern template void weight_net_backward<T>(WeightNet<T>&, const T*, std::int64_t, int,       \
                                                const WeightNetCache<T>&, const T*, int);         \
    extern template void forward_batch<T>(const Model<T>&, BatchWorkspace<T>&);                   \
    extern template void backward_batch<T>(Model<T>&, BatchWorkspace<T>&,                         \
                                           const std::vector<Plane<T>>&);                         \
    extern template void update_running_stats<T>(Model<T>&, const BatchWorkspace<T>&);            \
    extern template DenoiseResult<T> denoise<T>(const Plane<T>&, const Model<T>&,                 \
                                                const DenoiseOptions<T>&);

LIDIA_NET_EXTERN(float)
LIDIA_NET_EXTERN(double)
#undef LIDIA_NET_EXTERN

extern template Model<double> convert_model<double, float>(const Model<float>&);
extern template Model<float> convert_model<float, double>(const Model<double>&);
extern template Model<float> convert_model<float, float>(const Model<float>&);

}  // namespace lidia
