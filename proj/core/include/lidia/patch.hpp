#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lidia/plane.hpp"

namespace lidia {

// Geometry of patch processing. `patch_side` is the square patch edge (odd),
// `group_size` the number of stacked patches per group (seed + nearest
// neighbors), `search_window` the odd side of the window the neighbor search
// scans. The flattened patch length is side*side*channels.
struct PatchConfig {
    int patch_side = 7;
    int channels = 1;
    int group_size = 14;
    int search_window = 37;

    int patch_len() const { return patch_side * patch_side * channels; }
    int margin() const { return patch_side / 2; }
    void validate() const;
};

// A seed patch stacked with its nearest neighbors. Column 0 is the seed
// itself; columns 1..k-1 are neighbors in ascending squared-distance order
// (ties resolved by row-major scan order of the window). dists[0] is the
// unbiased sample variance of the seed patch; dists[1..] the squared
// Euclidean distances; on color inputs both are measured on luminance.
template <typename T>
struct PatchGroup {
    int seed_row = 0, seed_col = 0;  // padded-plane coordinates
    int patch_len = 0, group_size = 0;
    std::vector<T> values;                 // patch_len * group_size, column j at j*patch_len
    std::vector<T> dists;                  // group_size entries
    std::vector<std::int32_t> rows, cols;  // group_size centers, [0] = seed
};

// Scale-1 padded plane plus the four half-resolution phase planes obtained by
// low-pass filtering and parity sampling. Phase index = (row&1)*2 + (col&1).
// Planes are padded independently so windows never read across phases.
// Luminance caches are populated for 3-channel inputs only.
template <typename T>
struct ScalePyramid {
    Plane<T> full;
    Plane<T> full_lum;
    std::array<Plane<T>, 4> phases;
    std::array<Plane<T>, 4> phase_lum;
    int margin = 0;
    int orig_height = 0, orig_width = 0;
};

// The 3x3 binomial low-pass kernel, rows-major, sums to 1.
template <typename T>
constexpr std::array<T, 9> low_pass_kernel() {
    return {T(1) / 16, T(2) / 16, T(1) / 16, T(2) / 16, T(4) / 16,
            T(2) / 16, T(1) / 16, T(2) / 16, T(1) / 16};
}

// Reflection that excludes the border pixel: padding [a,b,c] by one on the
// left yields b. Valid for margin < dim.
inline int mirror_index(int i, int dim) {
    if (i < 0) return -i;
    if (i >= dim) return 2 * dim - 2 - i;
    return i;
}

template <typename T>
Plane<T> mirror_pad(const Plane<T>& img, int margin);

// 3x3 convolution with mirrored boundary, and its exact adjoint.
template <typename T>
Plane<T> conv3x3_mirror(const Plane<T>& img, const std::array<T, 9>& kernel);
template <typename T>
Plane<T> conv3x3_mirror_adjoint(const Plane<T>& grad, const std::array<T, 9>& kernel);

// Reads the side x side window centered at (r,c) into `out`, row-major and
// channel-interleaved. The window must lie inside the plane.
template <typename T>
void extract_patch(const Plane<T>& plane, int r, int c, int patch_side, T* out);

// Adjoint of extract_patch: adds w * patch into the plane window.
template <typename T>
void scatter_patch_add(Plane<T>& plane, int r, int c, int patch_side, const T* patch, T w);

// Unbiased (n-1) sample variance.
template <typename T>
T sample_variance(const T* v, int n);

// Neighbor search core. `padded` is the mirror-padded plane; `lum` its padded
// luminance (null for single-channel planes, distances then use the plane
// itself). Writes group_size centers and distances; entry 0 is the seed with
// its variance. Throws ConfigError when the window holds fewer than
// group_size valid candidates.
template <typename T>
void knn_search(const Plane<T>& padded, const Plane<T>* lum, const PatchConfig& cfg, int seed_r,
                int seed_c, std::int32_t* out_rows, std::int32_t* out_cols, T* out_dists);

// knn_search plus materialized patch columns from `padded`.
template <typename T>
PatchGroup<T> knn_group(const Plane<T>& padded, const Plane<T>* lum, const PatchConfig& cfg,
                        int seed_r, int seed_c);

// Low-pass filter, four-phase downsample, pad every plane.
template <typename T>
ScalePyramid<T> build_pyramid(const Plane<T>& img, const PatchConfig& cfg);

// Scale-2 grouping for the full-resolution pixel (r,c) of the *original*
// (unpadded) image: picks the phase plane by parity, maps the center to
// (r/2 + margin, c/2 + margin) and searches within that plane alone.
template <typename T>
PatchGroup<T> second_scale_group(const ScalePyramid<T>& pyr, int r, int c, const PatchConfig& cfg);

// One patch to be placed at a plane location during aggregation.
template <typename T>
struct PatchRef {
    int row = 0, col = 0;  // center in output-plane coordinates
    const T* values = nullptr;
};

// Weighted overlap-average: out = (sum_i w_i R_i^T R_i)^-1 sum_i w_i R_i^T z_i,
// computed as accumulate-and-normalize (the system matrix is the diagonal of
// per-pixel weighted coverage). Empty `weights` means unit weights. Every
// output pixel must be covered. `post_filter` applies the low-pass kernel to
// the averaged plane (the second-scale aggregation variant). `coverage_out`,
// when non-null, receives the per-pixel weighted coverage.
template <typename T>
Plane<T> aggregate(std::span<const PatchRef<T>> patches, std::span<const T> weights, int out_height,
                   int out_width, int channels, int patch_side, bool post_filter,
                   Plane<T>* coverage_out = nullptr);

#define LIDIA_PATCH_EXTERN(T)                                                                     \
    extern template Plane<T> mirror_pad<T>(const Plane<T>&, int);                                 \
    extern template Plane<T> conv3x3_mirror<T>(const Plane<T>&, const std::array<T, 9>&);         \
    extern template Plane<T> conv3x3_mirror_adjoint<T>(const Plane<T>&, const std::array<T, 9>&); \
    extern template void extract_patch<T>(const Plane<T>&, int, int, int, T*);                    \
    extern template void scatter_patch_add<T>(Plane<T>&, int, int, int, const T*, T);             \
    extern template T sample_variance<T>(const T*, int);                                          \
    extern template void knn_search<T>(const Plane<T>&, const Plane<T>*, const PatchConfig&, int, \
                                       int, std::int32_t*, std::int32_t*, T*);                    \
    extern template PatchGroup<T> knn_group<T>(const Plane<T>&, const Plane<T>*,                  \
                                               const PatchConfig&, int, int);                     \
    extern template ScalePyramid<T> build_pyramid<T>(const Plane<T>&, const PatchConfig&);        \
    extern template PatchGroup<T> second_scale_group<T>(const ScalePyramid<T>&, int, int,         \
                                                        const PatchConfig&);                      \
    extern template Plane<T> aggregate<T>(std::span<const PatchRef<T>>, std::span<const T>, int,  \
                                          int, int, int, bool, Plane<T>*);

LIDIA_PATCH_EXTERN(float)
LIDIA_PATCH_EXTERN(double)
#undef LIDIA_PATCH_EXTERN

}  // namespace lidia
