#include "lidia/patch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lidia/errors.hpp"
#include "lidia/image_io.hpp"

namespace lidia {

void PatchConfig::validate() const {
    if (patch_side < 3 || patch_side % 2 == 0)
        throw ConfigError("patch_side must be odd and >= 3");
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
    if (search_window % 2 == 0) throw ConfigError("search_window must be odd");
    if (search_window < patch_side) throw ConfigError("search_window must be >= patch_side");
    if (group_size < 1) throw ConfigError("group_size must be >= 1");
}

template <typename T>
Plane<T> mirror_pad(const Plane<T>& img, int margin) {
    if (margin < 0 || margin >= img.height || margin >= img.width)
        throw ConfigError("mirror_pad: margin must be < min(height, width)");
    Plane<T> out(img.height + 2 * margin, img.width + 2 * margin, img.channels);
    for (int r = 0; r < out.height; ++r) {
        const int sr = mirror_index(r - margin, img.height);
        for (int c = 0; c < out.width; ++c) {
            const int sc = mirror_index(c - margin, img.width);
            for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
        }
    }
    return out;
}

template <typename T>
Plane<T> conv3x3_mirror(const Plane<T>& img, const std::array<T, 9>& kernel) {
    Plane<T> out(img.height, img.width, img.channels);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            for (int ch = 0; ch < img.channels; ++ch) {
                T acc = T(0);
                for (int a = -1; a <= 1; ++a) {
                    const int sr = mirror_index(r + a, img.height);
                    for (int b = -1; b <= 1; ++b) {
                        const int sc = mirror_index(c + b, img.width);
                        acc += kernel[(a + 1) * 3 + (b + 1)] * img.at(sr, sc, ch);
                    }
                }
                out.at(r, c, ch) = acc;
            }
        }
    }
    return out;
}

template <typename T>
Plane<T> conv3x3_mirror_adjoint(const Plane<T>& grad, const std::array<T, 9>& kernel) {
    Plane<T> out(grad.height, grad.width, grad.channels, T(0));
    for (int r = 0; r < grad.height; ++r) {
        for (int c = 0; c < grad.width; ++c) {
            for (int ch = 0; ch < grad.channels; ++ch) {
                const T g = grad.at(r, c, ch);
                for (int a = -1; a <= 1; ++a) {
                    const int sr = mirror_index(r + a, grad.height);
                    for (int b = -1; b <= 1; ++b) {
                        const int sc = mirror_index(c + b, grad.width);
                        out.at(sr, sc, ch) += kernel[(a + 1) * 3 + (b + 1)] * g;
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void extract_patch(const Plane<T>& plane, int r, int c, int patch_side, T* out) {
    const int rad = patch_side / 2;
    if (r - rad < 0 || c - rad < 0 || r + rad >= plane.height || c + rad >= plane.width)
        throw ShapeError("extract_patch: window out of bounds");
    int idx = 0;
    for (int dr = -rad; dr <= rad; ++dr)
        for (int dc = -rad; dc <= rad; ++dc)
            for (int ch = 0; ch < plane.channels; ++ch) out[idx++] = plane.at(r + dr, c + dc, ch);
}

template <typename T>
void scatter_patch_add(Plane<T>& plane, int r, int c, int patch_side, const T* patch, T w) {
    const int rad = patch_side / 2;
    int idx = 0;
    for (int dr = -rad; dr <= rad; ++dr)
        for (int dc = -rad; dc <= rad; ++dc)
            for (int ch = 0; ch < plane.channels; ++ch)
                plane.at(r + dr, c + dc, ch) += w * patch[idx++];
}

template <typename T>
T sample_variance(const T* v, int n) {
    T mean = T(0);
    for (int i = 0; i < n; ++i) mean += v[i];
    mean /= T(n);
    T acc = T(0);
    for (int i = 0; i < n; ++i) {
        const T d = v[i] - mean;
        acc += d * d;
    }
    return acc / T(n - 1);
}

namespace {

// Keeps the m smallest (distance, scan-order) candidates. Equal distances
// keep the earlier-scanned candidate ahead, which fixes the documented
// row-major tie-breaking.
template <typename T>
struct BestList {
    int m;
    std::vector<T> dist;
    std::vector<std::int32_t> row, col;

    explicit BestList(int m_) : m(m_) {
        dist.reserve(m);
        row.reserve(m);
        col.reserve(m);
    }
    bool full() const { return int(dist.size()) == m; }
    T worst() const { return dist.back(); }

    void offer(T d, std::int32_t r, std::int32_t c) {
        if (full() && d >= worst()) return;
        // insertion point: after all entries with dist <= d
        int pos = int(std::upper_bound(dist.begin(), dist.end(), d) - dist.begin());
        dist.insert(dist.begin() + pos, d);
        row.insert(row.begin() + pos, r);
        col.insert(col.begin() + pos, c);
        if (int(dist.size()) > m) {
            dist.pop_back();
            row.pop_back();
            col.pop_back();
        }
    }
};

// Squared L2 distance between the seed patch (pre-extracted into `seed`) and
// the candidate centered at (r,c), with early exit once `bound` is reached.
template <typename T>
T patch_distance(const Plane<T>& plane, const T* seed, int r, int c, int patch_side, T bound) {
    const int rad = patch_side / 2;
    T acc = T(0);
    int idx = 0;
    for (int dr = -rad; dr <= rad; ++dr) {
        const T* rowp = &plane.data[(std::size_t(r + dr) * plane.width + (c - rad)) * plane.channels];
        for (int i = 0; i < patch_side * plane.channels; ++i) {
            const T d = rowp[i] - seed[idx++];
            acc += d * d;
        }
        if (acc >= bound) return acc;
    }
    return acc;
}

}  // namespace

template <typename T>
void knn_search(const Plane<T>& padded, const Plane<T>* lum, const PatchConfig& cfg, int seed_r,
                int seed_c, std::int32_t* out_rows, std::int32_t* out_cols, T* out_dists) {
    cfg.validate();
    const Plane<T>& search = (cfg.channels == 3) ? *lum : padded;
    const int margin = cfg.margin();
    const int orig_h = padded.height - 2 * margin;
    const int orig_w = padded.width - 2 * margin;
    if (seed_r < margin || seed_c < margin || seed_r >= margin + orig_h || seed_c >= margin + orig_w)
        throw ShapeError("knn_search: seed outside the valid center region");

    const int half = (cfg.search_window - 1) / 2;
    const int r0 = std::max(margin, seed_r - half);
    const int r1 = std::min(margin + orig_h - 1, seed_r + half);
    const int c0 = std::max(margin, seed_c - half);
    const int c1 = std::min(margin + orig_w - 1, seed_c + half);
    const std::int64_t candidates = std::int64_t(r1 - r0 + 1) * (c1 - c0 + 1);
    if (candidates < cfg.group_size)
        throw ConfigError("knn_search: window holds " + std::to_string(candidates) +
                          " candidates, need " + std::to_string(cfg.group_size));

    const int lum_len = cfg.patch_side * cfg.patch_side * search.channels;
    std::vector<T> seed_patch(lum_len);
    extract_patch(search, seed_r, seed_c, cfg.patch_side, seed_patch.data());

    BestList<T> best(cfg.group_size - 1);
    const T inf = std::numeric_limits<T>::max();
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            if (r == seed_r && c == seed_c) continue;
            const T bound = best.full() ? best.worst() : inf;
            const T d = patch_distance(search, seed_patch.data(), r, c, cfg.patch_side, bound);
            best.offer(d, r, c);
        }
    }

    out_rows[0] = seed_r;
    out_cols[0] = seed_c;
    out_dists[0] = sample_variance(seed_patch.data(), lum_len);
    for (int j = 0; j < cfg.group_size - 1; ++j) {
        out_rows[j + 1] = best.row[j];
        out_cols[j + 1] = best.col[j];
        out_dists[j + 1] = best.dist[j];
    }
}

template <typename T>
PatchGroup<T> knn_group(const Plane<T>& padded, const Plane<T>* lum, const PatchConfig& cfg,
                        int seed_r, int seed_c) {
    PatchGroup<T> g;
    g.seed_row = seed_r;
    g.seed_col = seed_c;
    g.patch_len = cfg.patch_len();
    g.group_size = cfg.group_size;
    g.rows.resize(cfg.group_size);
    g.cols.resize(cfg.group_size);
    g.dists.resize(cfg.group_size);
    knn_search(padded, lum, cfg, seed_r, seed_c, g.rows.data(), g.cols.data(), g.dists.data());
    g.values.resize(std::size_t(g.patch_len) * cfg.group_size);
    for (int j = 0; j < cfg.group_size; ++j)
        extract_patch(padded, g.rows[j], g.cols[j], cfg.patch_side, &g.values[std::size_t(j) * g.patch_len]);
    return g;
}

template <typename T>
ScalePyramid<T> build_pyramid(const Plane<T>& img, const PatchConfig& cfg) {
    cfg.validate();
    if (img.height < 2 * cfg.patch_side || img.width < 2 * cfg.patch_side)
        throw ShapeError("build_pyramid: image smaller than 2 * patch_side");
    if (img.channels != cfg.channels) throw ShapeError("build_pyramid: channel mismatch");

    ScalePyramid<T> pyr;
    pyr.margin = cfg.margin();
    pyr.orig_height = img.height;
    pyr.orig_width = img.width;
    pyr.full = mirror_pad(img, pyr.margin);

    const Plane<T> filtered = conv3x3_mirror(img, low_pass_kernel<T>());
    for (int pr = 0; pr < 2; ++pr) {
        for (int pc = 0; pc < 2; ++pc) {
            const int ph = (img.height - pr + 1) / 2;
            const int pw = (img.width - pc + 1) / 2;
            Plane<T> phase(ph, pw, img.channels);
            for (int r = 0; r < ph; ++r)
                for (int c = 0; c < pw; ++c)
                    for (int ch = 0; ch < img.channels; ++ch)
                        phase.at(r, c, ch) = filtered.at(2 * r + pr, 2 * c + pc, ch);
            pyr.phases[pr * 2 + pc] = mirror_pad(phase, pyr.margin);
        }
    }
    if (img.channels == 3) {
        pyr.full_lum = luminance(pyr.full);
        for (int p = 0; p < 4; ++p) pyr.phase_lum[p] = luminance(pyr.phases[p]);
    }
    return pyr;
}

template <typename T>
PatchGroup<T> second_scale_group(const ScalePyramid<T>& pyr, int r, int c, const PatchConfig& cfg) {
    if (r < 0 || c < 0 || r >= pyr.orig_height || c >= pyr.orig_width)
        throw ShapeError("second_scale_group: center outside the original image");
    const int phase = (r & 1) * 2 + (c & 1);
    const Plane<T>& plane = pyr.phases[phase];
    const Plane<T>* lum = cfg.channels == 3 ? &pyr.phase_lum[phase] : nullptr;
    return knn_group(plane, lum, cfg, r / 2 + pyr.margin, c / 2 + pyr.margin);
}

template <typename T>
Plane<T> aggregate(std::span<const PatchRef<T>> patches, std::span<const T> weights, int out_height,
                   int out_width, int channels, int patch_side, bool post_filter,
                   Plane<T>* coverage_out) {
    if (!weights.empty() && weights.size() != patches.size())
        throw ShapeError("aggregate: weights/patches size mismatch");
    Plane<T> acc(out_height, out_width, channels, T(0));
    Plane<T> cov(out_height, out_width, 1, T(0));
    const int rad = patch_side / 2;
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& p = patches[i];
        if (p.row - rad < 0 || p.col - rad < 0 || p.row + rad >= out_height ||
            p.col + rad >= out_width)
            throw ShapeError("aggregate: patch outside the output plane");
        const T w = weights.empty() ? T(1) : weights[i];
        scatter_patch_add(acc, p.row, p.col, patch_side, p.values, w);
        for (int dr = -rad; dr <= rad; ++dr)
            for (int dc = -rad; dc <= rad; ++dc) cov.at(p.row + dr, p.col + dc) += w;
    }
    for (int r = 0; r < out_height; ++r) {
        for (int c = 0; c < out_width; ++c) {
            const T d = cov.at(r, c);
            if (d == T(0)) throw NumericError("aggregate: uncovered pixel — incomplete patch grid");
            for (int ch = 0; ch < channels; ++ch) acc.at(r, c, ch) /= d;
        }
    }
    if (coverage_out) *coverage_out = cov;
    if (post_filter) return conv3x3_mirror(acc, low_pass_kernel<T>());
    return acc;
}

#define LIDIA_PATCH_INST(T)                                                                \
    template Plane<T> mirror_pad<T>(const Plane<T>&, int);                                 \
    template Plane<T> conv3x3_mirror<T>(const Plane<T>&, const std::array<T, 9>&);         \
    template Plane<T> conv3x3_mirror_adjoint<T>(const Plane<T>&, const std::array<T, 9>&); \
    template void extract_patch<T>(const Plane<T>&, int, int, int, T*);                    \
    template void scatter_patch_add<T>(Plane<T>&, int, int, int, const T*, T);             \
    template T sample_variance<T>(const T*, int);                                          \
    template void knn_search<T>(const Plane<T>&, const Plane<T>*, const PatchConfig&, int, \
                                int, std::int32_t*, std::int32_t*, T*);                    \
    template PatchGroup<T> knn_group<T>(const Plane<T>&, const Plane<T>*, const PatchConfig&, \
                                        int, int);                                         \
    template ScalePyramid<T> build_pyramid<T>(const Plane<T>&, const PatchConfig&);        \
    template PatchGroup<T> second_scale_group<T>(const ScalePyramid<T>&, int, int,         \
                                                 const PatchConfig&);                      \
    template Plane<T> aggregate<T>(std::span<const PatchRef<T>>, std::span<const T>, int,  \
                                   int, int, int, bool, Plane<T>*);

LIDIA_PATCH_INST(float)
LIDIA_PATCH_INST(double)
#undef LIDIA_PATCH_INST

}  // namespace lidia
