#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lidia/errors.hpp"
#include "lidia/image_io.hpp"
#include "lidia/patch.hpp"
#include "test_util.hpp"

using namespace lidia;

namespace {

// Exhaustive neighbor search, written independently of knn_search: collects
// every candidate in row-major window order and stable-sorts by distance.
template <typename T>
void brute_force_knn(const Plane<T>& search, const PatchConfig& cfg, int seed_r, int seed_c,
                     std::vector<std::int32_t>& rows, std::vector<std::int32_t>& cols,
                     std::vector<T>& dists) {
    const int m = cfg.margin();
    const int oh = search.height - 2 * m, ow = search.width - 2 * m;
    const int half = (cfg.search_window - 1) / 2;
    const int len = cfg.patch_side * cfg.patch_side * search.channels;
    std::vector<T> seed(len), cand(len);
    extract_patch(search, seed_r, seed_c, cfg.patch_side, seed.data());

    struct Entry {
        T d;
        int r, c;
    };
    std::vector<Entry> entries;
    for (int r = std::max(m, seed_r - half); r <= std::min(m + oh - 1, seed_r + half); ++r) {
        for (int c = std::max(m, seed_c - half); c <= std::min(m + ow - 1, seed_c + half); ++c) {
            if (r == seed_r && c == seed_c) continue;
            extract_patch(search, r, c, cfg.patch_side, cand.data());
            T d = T(0);
            for (int i = 0; i < len; ++i) d += (cand[i] - seed[i]) * (cand[i] - seed[i]);
            entries.push_back({d, r, c});
        }
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.d < b.d; });
    rows = {seed_r};
    cols = {seed_c};
    dists = {sample_variance(seed.data(), len)};
    for (int j = 0; j < cfg.group_size - 1; ++j) {
        rows.push_back(entries[j].r);
        cols.push_back(entries[j].c);
        dists.push_back(entries[j].d);
    }
}

// Dense Gaussian elimination with partial pivoting.
std::vector<double> dense_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
    const int n = int(b.size());
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        std::swap(b[col], b[piv]);
        for (int r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (int r = n - 1; r >= 0; --r) {
        double acc = b[r];
        for (int c = r + 1; c < n; ++c) acc -= a[r][c] * x[c];
        x[r] = acc / a[r][r];
    }
    return x;
}

}  // namespace

TEST_CASE("mirror_pad reflects without the border pixel") {
    Plane<double> img(3, 3, 1);
    img.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    Plane<double> padded = mirror_pad(img, 1);
    REQUIRE(padded.width == 5);
    REQUIRE(padded.height == 5);
    // the row [1,2,3] pads to [2,1,2,3,2]
    const double want_row[5] = {2, 1, 2, 3, 2};
    for (int c = 0; c < 5; ++c) CHECK(padded.at(1, c) == want_row[c]);
    // and the same reflection acts on rows: row -1 mirrors row 1
    CHECK(padded.at(0, 1) == 4);
    CHECK(padded.at(4, 1) == 4);
    CHECK(padded.at(0, 0) == 5);  // corner reflects both ways

    SUBCASE("margin 0 is the identity") {
        Plane<double> same = mirror_pad(img, 0);
        CHECK(same.data == img.data);
    }
    SUBCASE("margin too large") { CHECK_THROWS_AS(mirror_pad(img, 3), ConfigError); }
}

TEST_CASE("padding by patch radius gives one patch per original pixel") {
    PatchConfig cfg{7, 1, 2, 7};
    Plane<double> img = testutil::random_plane<double>(7, 7, 1, 21);
    Plane<double> padded = mirror_pad(img, cfg.margin());
    int count = 0;
    const int rad = cfg.patch_side / 2;
    for (int r = 0; r < padded.height; ++r)
        for (int c = 0; c < padded.width; ++c)
            if (r - rad >= 0 && c - rad >= 0 && r + rad < padded.height && c + rad < padded.width)
                ++count;
    CHECK(count == img.height * img.width);  // 7x7 = every pixel has a full patch
}

TEST_CASE("extract_patch layout and adjoint") {
    SUBCASE("constant image gives a constant vector") {
        Plane<double> img(5, 5, 1, 0.7);
        std::vector<double> patch(9);
        extract_patch(img, 2, 2, 3, patch.data());
        for (double v : patch) CHECK(v == 0.7);
    }
    SUBCASE("matches index arithmetic on an arange image") {
        Plane<double> img(6, 7, 1);
        std::iota(img.data.begin(), img.data.end(), 0.0);
        std::vector<double> patch(9);
        for (int r = 1; r <= 4; ++r) {
            for (int c = 1; c <= 5; ++c) {
                extract_patch(img, r, c, 3, patch.data());
                int idx = 0;
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc, ++idx)
                        CHECK(patch[idx] == double((r + dr) * 7 + (c + dc)));
            }
        }
    }
    SUBCASE("out of bounds center throws") {
        Plane<double> img(5, 5, 1);
        std::vector<double> patch(9);
        CHECK_THROWS_AS(extract_patch(img, 0, 0, 3, patch.data()), ShapeError);
    }
    SUBCASE("adjoint identity <R y, p> == <y, R^T p>") {
        Plane<double> y = testutil::random_plane<double>(8, 9, 1, 31);
        Xoshiro256pp rng(32);
        std::vector<double> p(9);
        for (auto& v : p) v = rng.next_unit() - 0.5;
        for (int trial = 0; trial < 10; ++trial) {
            const int r = 1 + int(rng.next_below(6));
            const int c = 1 + int(rng.next_below(7));
            std::vector<double> ry(9);
            extract_patch(y, r, c, 3, ry.data());
            double lhs = 0;
            for (int i = 0; i < 9; ++i) lhs += ry[i] * p[i];
            Plane<double> rtp(8, 9, 1, 0.0);
            scatter_patch_add(rtp, r, c, 3, p.data(), 1.0);
            double rhs = 0;
            for (std::int64_t i = 0; i < y.samples(); ++i) rhs += y.data[i] * rtp.data[i];
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        }
    }
}

TEST_CASE("knn_group ties break in row-major scan order") {
    PatchConfig cfg{3, 1, 4, 5};
    Plane<double> img(8, 8, 1, 0.5);  // constant: every distance is zero
    Plane<double> padded = mirror_pad(img, cfg.margin());
    PatchGroup<double> g = knn_group<double>(padded, nullptr, cfg, 5, 5);
    // candidates scanned row-major around (5,5): window rows 3..7, cols 3..7
    CHECK(g.rows[0] == 5);
    CHECK(g.cols[0] == 5);
    CHECK(g.rows[1] == 3);
    CHECK(g.cols[1] == 3);
    CHECK(g.rows[2] == 3);
    CHECK(g.cols[2] == 4);
    CHECK(g.rows[3] == 3);
    CHECK(g.cols[3] == 5);
    for (int j = 1; j < 4; ++j) CHECK(g.dists[j] == 0.0);
    CHECK(g.dists[0] == 0.0);  // constant patch has zero variance
    // column 0 must be the seed patch exactly
    std::vector<double> seed(9);
    extract_patch(padded, 5, 5, 3, seed.data());
    for (int i = 0; i < 9; ++i) CHECK(g.values[i] == seed[i]);
}

TEST_CASE("knn_group equals exhaustive search on random images") {
    PatchConfig cfg{3, 1, 5, 9};
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Plane<double> img = testutil::random_plane<double>(16, 16, 1, 500 + seed);
        Plane<double> padded = mirror_pad(img, cfg.margin());
        Xoshiro256pp rng(600 + seed);
        for (int trial = 0; trial < 20; ++trial) {
            const int r = cfg.margin() + int(rng.next_below(16));
            const int c = cfg.margin() + int(rng.next_below(16));
            PatchGroup<double> g = knn_group<double>(padded, nullptr, cfg, r, c);
            std::vector<std::int32_t> rows, cols;
            std::vector<double> dists;
            brute_force_knn(padded, cfg, r, c, rows, cols, dists);
            CHECK(g.rows == rows);
            CHECK(g.cols == cols);
            for (int j = 0; j < cfg.group_size; ++j)
                CHECK(g.dists[j] == doctest::Approx(dists[j]).epsilon(1e-12));
            // neighbor distances are non-decreasing
            for (int j = 2; j < cfg.group_size; ++j) CHECK(g.dists[j] >= g.dists[j - 1]);
        }
    }
}

TEST_CASE("knn seed entry carries the unbiased sample variance") {
    PatchConfig cfg{3, 1, 3, 5};
    Plane<double> img = testutil::random_plane<double>(8, 8, 1, 77);
    Plane<double> padded = mirror_pad(img, 1);
    PatchGroup<double> g = knn_group<double>(padded, nullptr, cfg, 4, 4);
    std::vector<double> seed(9);
    extract_patch(padded, 4, 4, 3, seed.data());
    double mean = 0;
    for (double v : seed) mean += v;
    mean /= 9;
    double var = 0;
    for (double v : seed) var += (v - mean) * (v - mean);
    var /= 8;  // n - 1
    CHECK(g.dists[0] == doctest::Approx(var).epsilon(1e-12));
}

TEST_CASE("knn on color planes measures distance on luminance") {
    PatchConfig cfg{3, 3, 3, 5};
    Plane<double> img = testutil::random_plane<double>(10, 10, 3, 88);
    Plane<double> padded = mirror_pad(img, 1);
    Plane<double> lum = luminance(padded);
    PatchGroup<double> g = knn_group<double>(padded, &lum, cfg, 5, 5);
    std::vector<std::int32_t> rows, cols;
    std::vector<double> dists;
    brute_force_knn(lum, cfg, 5, 5, rows, cols, dists);  // oracle searches the luminance plane
    CHECK(g.rows == rows);
    CHECK(g.cols == cols);
    // columns carry the full 3-channel patches
    CHECK(g.patch_len == 27);
    std::vector<double> nb(27);
    extract_patch(padded, g.rows[1], g.cols[1], 3, nb.data());
    for (int i = 0; i < 27; ++i) CHECK(g.values[27 + i] == nb[i]);
}

TEST_CASE("knn window too small for the group size") {
    PatchConfig cfg{3, 1, 26, 5};  // 5x5 window has at most 25 candidates
    Plane<double> img = testutil::random_plane<double>(12, 12, 1, 5);
    Plane<double> padded = mirror_pad(img, 1);
    CHECK_THROWS_AS((knn_group<double>(padded, nullptr, cfg, 6, 6)), ConfigError);
}

TEST_CASE("low-pass kernel: impulse response, DC gain, Nyquist null") {
    SUBCASE("impulse response equals the kernel exactly") {
        Plane<double> img(7, 7, 1, 0.0);
        img.at(3, 3) = 1.0;
        Plane<double> out = conv3x3_mirror(img, low_pass_kernel<double>());
        const double expect[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
        for (int a = -1; a <= 1; ++a)
            for (int b = -1; b <= 1; ++b)
                CHECK(out.at(3 + a, 3 + b) == expect[a + 1][b + 1] / 16.0);
        CHECK(out.at(0, 0) == 0.0);
        CHECK(out.at(3, 1) == 0.0);
    }
    SUBCASE("constant image is preserved (DC gain 1)") {
        Plane<double> img(6, 6, 1, 0.37);
        Plane<double> out = conv3x3_mirror(img, low_pass_kernel<double>());
        for (double v : out.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
    }
    SUBCASE("checkerboard interior is nulled") {
        Plane<double> img(6, 6, 1);
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 6; ++c) img.at(r, c) = ((r + c) % 2 == 0) ? 1.0 : -1.0;
        Plane<double> out = conv3x3_mirror(img, low_pass_kernel<double>());
        for (int r = 1; r < 5; ++r)
            for (int c = 1; c < 5; ++c) CHECK(out.at(r, c) == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("adjoint identity") {
        Plane<double> x = testutil::random_plane<double>(9, 8, 1, 12);
        Plane<double> y = testutil::random_plane<double>(9, 8, 1, 13);
        Plane<double> ax = conv3x3_mirror(x, low_pass_kernel<double>());
        Plane<double> aty = conv3x3_mirror_adjoint(y, low_pass_kernel<double>());
        double lhs = 0, rhs = 0;
        for (std::int64_t i = 0; i < x.samples(); ++i) {
            lhs += ax.data[i] * y.data[i];
            rhs += x.data[i] * aty.data[i];
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("pyramid phases re-interleave to the filtered image and align by parity") {
    PatchConfig cfg{3, 1, 4, 5};
    Plane<double> img = testutil::random_plane<double>(11, 13, 1, 41);
    ScalePyramid<double> pyr = build_pyramid(img, cfg);
    Plane<double> filtered = conv3x3_mirror(img, low_pass_kernel<double>());

    const int m = cfg.margin();
    Plane<double> rebuilt(img.height, img.width, 1, -1.0);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const int ph = (r & 1) * 2 + (c & 1);
            rebuilt.at(r, c) = pyr.phases[ph].at(r / 2 + m, c / 2 + m);
        }
    }
    CHECK(rebuilt.data == filtered.data);  // bitwise: sampling then re-interleaving

    SUBCASE("constant image gives constant phases") {
        Plane<double> flat(8, 8, 1, 0.25);
        ScalePyramid<double> p2 = build_pyramid(flat, cfg);
        for (const auto& phase : p2.phases)
            for (double v : phase.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
    SUBCASE("too small an image throws") {
        Plane<double> small(5, 9, 1);
        CHECK_THROWS_AS(build_pyramid(small, cfg), ShapeError);
    }
}

TEST_CASE("second_scale_group picks the parity phase and maps the center") {
    PatchConfig cfg{3, 1, 3, 5};
    Plane<double> img = testutil::random_plane<double>(12, 12, 1, 51);
    ScalePyramid<double> pyr = build_pyramid(img, cfg);
    Plane<double> filtered = conv3x3_mirror(img, low_pass_kernel<double>());
    const int m = cfg.margin();

    for (int r : {4, 5}) {
        for (int c : {6, 7}) {
            PatchGroup<double> g = second_scale_group(pyr, r, c, cfg);
            CHECK(g.seed_row == r / 2 + m);
            CHECK(g.seed_col == c / 2 + m);
            // the center sample of the scale-2 seed patch is the filtered
            // image at the original pixel
            const int center_idx = (g.patch_len - 1) / 2;
            CHECK(g.values[center_idx] == filtered.at(r, c));
        }
    }

    SUBCASE("constant image gives identical columns") {
        Plane<double> flat(10, 10, 1, 0.6);
        ScalePyramid<double> p2 = build_pyramid(flat, cfg);
        PatchGroup<double> g = second_scale_group(p2, 3, 3, cfg);
        for (int j = 0; j < g.group_size; ++j)
            for (int i = 0; i < g.patch_len; ++i)
                CHECK(g.values[j * g.patch_len + i] == doctest::Approx(0.6).epsilon(1e-15));
    }
}

TEST_CASE("aggregate with unit weights inverts extraction on full grids") {
    PatchConfig cfg{3, 1, 2, 3};
    Plane<double> img = testutil::random_plane<double>(10, 11, 1, 61);
    Plane<double> padded = mirror_pad(img, cfg.margin());
    const int m = cfg.margin();

    std::vector<std::vector<double>> patches(img.pixels(), std::vector<double>(9));
    std::vector<PatchRef<double>> refs;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            auto& p = patches[r * img.width + c];
            extract_patch(padded, r + m, c + m, 3, p.data());
            refs.push_back({r + m, c + m, p.data()});
        }
    Plane<double> out = aggregate<double>(refs, {}, padded.height, padded.width, 1, 3, false);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            CHECK(out.at(r + m, c + m) == doctest::Approx(img.at(r, c)).epsilon(1e-12));
}

TEST_CASE("single-patch aggregation ignores the weight value") {
    std::vector<double> patch(9);
    std::iota(patch.begin(), patch.end(), 1.0);
    std::vector<PatchRef<double>> refs{{1, 1, patch.data()}};
    const double w = 0.37;
    Plane<double> out =
        aggregate<double>(refs, std::span<const double>(&w, 1), 3, 3, 1, 3, false);
    for (int i = 0; i < 9; ++i) CHECK(out.data[i] == doctest::Approx(patch[i]).epsilon(1e-12));
}

TEST_CASE("aggregate matches the dense weighted linear-algebra oracle") {
    PatchConfig cfg{3, 1, 2, 3};
    Plane<double> img = testutil::random_plane<double>(10, 10, 1, 71);
    const int m = cfg.margin();
    const int ph = img.height + 2 * m, pw = img.width + 2 * m;
    const int npix = ph * pw;

    Xoshiro256pp rng(72);
    std::vector<std::vector<double>> patches(img.pixels(), std::vector<double>(9));
    std::vector<double> weights(img.pixels());
    std::vector<PatchRef<double>> refs;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            auto& p = patches[r * img.width + c];
            for (auto& v : p) v = rng.next_unit();
            weights[r * img.width + c] = 0.1 + rng.next_unit();
            refs.push_back({r + m, c + m, p.data()});
        }

    // oracle: assemble sum w_i R_i^T R_i and sum w_i R_i^T z_i densely, solve
    std::vector<std::vector<double>> A(npix, std::vector<double>(npix, 0.0));
    std::vector<double> b(npix, 0.0);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        int idx = 0;
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc, ++idx) {
                const int px = (refs[i].row + dr) * pw + (refs[i].col + dc);
                A[px][px] += weights[i];
                b[px] += weights[i] * patches[i][idx];
            }
    }
    // pixels never covered would make the system singular; pin them to zero
    for (int p = 0; p < npix; ++p)
        if (A[p][p] == 0.0) A[p][p] = 1.0;
    const std::vector<double> solved = dense_solve(A, b);

    Plane<double> out = aggregate<double>(refs, std::span<const double>(weights), ph, pw, 1, 3,
                                          false);
    for (int p = 0; p < npix; ++p) CHECK(std::abs(out.data[p] - solved[p]) < 1e-9);
}

TEST_CASE("aggregate reports uncovered pixels") {
    std::vector<double> patch(9, 1.0);
    std::vector<PatchRef<double>> refs{{1, 1, patch.data()}};
    CHECK_THROWS_AS((aggregate<double>(refs, {}, 8, 8, 1, 3, false)), NumericError);
}

TEST_CASE("grouping is translation equivariant away from borders") {
    PatchConfig cfg{3, 1, 4, 5};
    Plane<double> big = testutil::random_plane<double>(20, 20, 1, 91);
    // two views of the same content shifted by (2,2)
    Plane<double> a(12, 12, 1), b(12, 12, 1);
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c) {
            a.at(r, c) = big.at(r + 2, c + 2);
            b.at(r, c) = big.at(r + 4, c + 4);
        }
    Plane<double> pa = mirror_pad(a, 1), pb = mirror_pad(b, 1);
    // interior seeds where both windows avoid the padded borders entirely
    for (int r = 5; r <= 6; ++r)
        for (int c = 5; c <= 6; ++c) {
            PatchGroup<double> ga = knn_group<double>(pa, nullptr, cfg, r + 2, c + 2);
            PatchGroup<double> gb = knn_group<double>(pb, nullptr, cfg, r, c);
            REQUIRE(ga.group_size == gb.group_size);
            for (int j = 0; j < ga.group_size; ++j) {
                CHECK(ga.rows[j] - 2 == gb.rows[j]);
                CHECK(ga.cols[j] - 2 == gb.cols[j]);
                CHECK(ga.dists[j] == doctest::Approx(gb.dists[j]).epsilon(1e-12));
            }
        }
}
