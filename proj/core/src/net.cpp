#include "lidia/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

#include "lidia/errors.hpp"
#include "lidia/image_io.hpp"
#include "lidia/parallel.hpp"
#include "lidia/rng.hpp"

namespace lidia {

void ArchDescriptor::validate() const {
    patch_config().validate();
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (group_size < 2) throw ConfigError("group_size must be >= 2");
}

namespace {

constexpr std::int64_t kStreamBlock = 512;  // locations per inference block

inline int phase_of(int r, int c) { return (r & 1) * 2 + (c & 1); }

template <typename T>
WeightNet<T> make_weight_net(int k) {
    WeightNet<T> net;
    for (int i = 0; i < WeightNet<T>::kLayers; ++i) {
        net.fc_w[i] = Tensor<T>::zeros({k, k});
        net.fc_b[i] = Tensor<T>::zeros({k});
    }
    for (int i = 0; i < WeightNet<T>::kLayers - 1; ++i)
        net.bn[i] = BatchNormState<T>::sized(k);
    return net;
}

template <typename T>
ScaleStack<T> make_scale_stack(const ArchDescriptor& a) {
    const int n = a.patch_len(), f = a.feature_dim, k = a.group_size;
    ScaleStack<T> s;
    s.tr0 = SLParams<T>::sized(f, n, k, k);
    if (a.variant == ArchVariant::Full) {
        s.tbr1 = SLParams<T>::sized(f, f, k, k);
        s.bn1 = BatchNormState<T>::sized(f);
    }
    s.t_pre = SLParams<T>::sized(n, f, k, 1);
    s.tr_post = SLParams<T>::sized(f, n, 1, k);
    return s;
}

}  // namespace

template <typename T>
Model<T> make_model(const ArchDescriptor& arch) {
    arch.validate();
    Model<T> m;
    m.arch = arch;
    m.wnet1 = make_weight_net<T>(arch.group_size);
    if (!arch.share_weight_net) m.wnet2 = make_weight_net<T>(arch.group_size);
    m.scale1 = make_scale_stack<T>(arch);
    m.scale2 = make_scale_stack<T>(arch);
    const int f = arch.feature_dim, fc = arch.fused_cols(), n = arch.patch_len();
    m.tbr2 = SLParams<T>::sized(f, f, fc, fc);
    m.bn2 = BatchNormState<T>::sized(f);
    if (arch.variant == ArchVariant::Full) {
        m.tbr3 = SLParams<T>::sized(f, f, fc, fc);
        m.bn3 = BatchNormState<T>::sized(f);
    }
    m.t4 = SLParams<T>::sized(n, f, fc, 1);
    m.agg_beta = Tensor<T>::zeros({1});
    return m;
}

namespace {

template <typename T, typename Fn>
void visit_bn(const std::string& prefix, BatchNormState<T>& bn, Fn&& fn) {
    fn(prefix + ".scale", bn.scale, TensorKind::Trainable);
    fn(prefix + ".shift", bn.shift, TensorKind::Trainable);
    fn(prefix + ".mean", bn.running_mean, TensorKind::State);
    fn(prefix + ".var", bn.running_var, TensorKind::State);
}

template <typename T, typename Fn>
void visit_sl(const std::string& prefix, SLParams<T>& p, Fn&& fn) {
    fn(prefix + ".w1", p.w1, TensorKind::Trainable);
    fn(prefix + ".w2", p.w2, TensorKind::Trainable);
    fn(prefix + ".bias", p.bias, TensorKind::Trainable);
}

template <typename T, typename Fn>
void visit_weight_net(const std::string& prefix, WeightNet<T>& net, Fn&& fn) {
    for (int i = 0; i < WeightNet<T>::kLayers; ++i) {
        fn(prefix + ".fc" + std::to_string(i) + ".weight", net.fc_w[i], TensorKind::Trainable);
        fn(prefix + ".fc" + std::to_string(i) + ".bias", net.fc_b[i], TensorKind::Trainable);
        if (i < WeightNet<T>::kLayers - 1)
            visit_bn(prefix + ".bn" + std::to_string(i), net.bn[i], fn);
    }
}

template <typename T, typename Fn>
void visit_scale(const std::string& prefix, ScaleStack<T>& s, bool full, Fn&& fn) {
    visit_sl(prefix + ".tr0", s.tr0, fn);
    if (full) {
        visit_sl(prefix + ".tbr1", s.tbr1, fn);
        visit_bn(prefix + ".tbr1.bn", s.bn1, fn);
    }
    visit_sl(prefix + ".tpre", s.t_pre, fn);
    visit_sl(prefix + ".trpost", s.tr_post, fn);
}

}  // namespace

template <typename T>
void visit_model(Model<T>& m,
                 const std::function<void(const std::string&, Tensor<T>&, TensorKind)>& fn) {
    const bool full = m.arch.variant == ArchVariant::Full;
    fn("agg.beta", m.agg_beta, TensorKind::Trainable);
    visit_weight_net<T>("wnet1", m.wnet1, fn);
    if (!m.arch.share_weight_net) visit_weight_net<T>("wnet2", m.wnet2, fn);
    visit_scale<T>("scale1", m.scale1, full, fn);
    visit_scale<T>("scale2", m.scale2, full, fn);
    visit_sl<T>("fuse.tbr2", m.tbr2, fn);
    visit_bn<T>("fuse.tbr2.bn", m.bn2, fn);
    if (full) {
        visit_sl<T>("fuse.tbr3", m.tbr3, fn);
        visit_bn<T>("fuse.tbr3.bn", m.bn3, fn);
    }
    visit_sl<T>("fuse.t4", m.t4, fn);
}

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(Model<T>& m) {
    std::vector<NamedTensor<T>> out;
    visit_model<T>(m, [&](const std::string& name, Tensor<T>& t, TensorKind kind) {
        if (kind == TensorKind::Trainable) out.push_back({name, &t});
    });
    return out;
}

std::int64_t count_params(const ArchDescriptor& arch) {
    Model<float> m = make_model<float>(arch);
    std::int64_t total = 0;
    visit_model<float>(m, [&](const std::string&, Tensor<float>& t, TensorKind kind) {
        if (kind == TensorKind::Trainable) total += t.count();
    });
    return total;
}

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, T limit, Xoshiro256pp& rng) {
    for (auto& v : t.data) v = T((2.0 * rng.next_unit() - 1.0) * double(limit));
}

// Biases start small but non-zero: exact zeros would leave dead ReLU columns
// whose pre-activations sit exactly on the kink.
template <typename T>
void init_sl(SLParams<T>& p, Xoshiro256pp& rng) {
    fill_uniform(p.w1, T(std::sqrt(6.0 / (p.rows_in() + p.rows_out()))), rng);
    fill_uniform(p.w2, T(std::sqrt(6.0 / (p.cols_in() + p.cols_out()))), rng);
    fill_uniform(p.bias, T(0.05), rng);
}

template <typename T>
void init_weight_net(WeightNet<T>& net, int k, Xoshiro256pp& rng) {
    for (auto& w : net.fc_w) fill_uniform(w, T(std::sqrt(6.0 / (k + k))), rng);
    for (auto& b : net.fc_b) fill_uniform(b, T(0.05), rng);
}

}  // namespace

template <typename T>
Model<T> init_model(const ArchDescriptor& arch, std::uint64_t seed) {
    Model<T> m = make_model<T>(arch);
    Xoshiro256pp rng(derive_seed(seed, 0x6d6f64656cULL));
    init_weight_net(m.wnet1, arch.group_size, rng);
    if (!arch.share_weight_net) init_weight_net(m.wnet2, arch.group_size, rng);
    for (ScaleStack<T>* s : {&m.scale1, &m.scale2}) {
        init_sl(s->tr0, rng);
        if (arch.variant == ArchVariant::Full) init_sl(s->tbr1, rng);
        init_sl(s->t_pre, rng);
        init_sl(s->tr_post, rng);
    }
    init_sl(m.tbr2, rng);
    if (arch.variant == ArchVariant::Full) init_sl(m.tbr3, rng);
    init_sl(m.t4, rng);
    return m;
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
    Model<To> dst = make_model<To>(src.arch);
    auto& mutable_src = const_cast<Model<From>&>(src);
    std::vector<std::pair<std::string, Tensor<From>*>> src_tensors;
    visit_model<From>(mutable_src, [&](const std::string& name, Tensor<From>& t, TensorKind) {
        src_tensors.emplace_back(name, &t);
    });
    std::size_t idx = 0;
    visit_model<To>(dst, [&](const std::string& name, Tensor<To>& t, TensorKind) {
        if (src_tensors[idx].first != name) throw ShapeError("convert_model: registry mismatch");
        const auto& s = *src_tensors[idx].second;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = To(s.data[i]);
        ++idx;
    });
    return dst;
}

// --- serialization --------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'L', 'I', 'D', 'I', 'A', 'M', 'D', 'L'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char(v >> 8));
}
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;
    void need(std::size_t n, const char* what) const {
        if (bytes.size() - pos < n)
            throw ParseError(std::string("model file truncated while reading ") + what, pos);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = std::uint16_t(std::uint8_t(bytes[pos])) |
                          std::uint16_t(std::uint8_t(bytes[pos + 1])) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

void append_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
    put_u16(out, std::uint16_t(name.size()));
    out += name;
    out.push_back(char(t.rank()));
    for (int d : t.dims) put_u32(out, std::uint32_t(d));
    for (float v : t.data) put_f32(out, v);
}

std::vector<float> arch_fields(const ArchDescriptor& a) {
    return {float(a.variant == ArchVariant::Small ? 1 : 0),
            float(a.channels),
            float(a.patch_side),
            float(a.group_size),
            float(a.feature_dim),
            float(a.search_window),
            float(a.share_weight_net ? 1 : 0)};
}

}  // namespace

void save_model(const Model<float>& m, const std::string& path) {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, kFormatVersion);

    std::vector<std::pair<std::string, const Tensor<float>*>> entries;
    auto& mm = const_cast<Model<float>&>(m);
    visit_model<float>(mm, [&](const std::string& name, Tensor<float>& t, TensorKind) {
        entries.emplace_back(name, &t);
    });
    put_u32(out, std::uint32_t(entries.size() + 1));

    Tensor<float> arch_tensor;
    arch_tensor.dims = {7};
    arch_tensor.data = arch_fields(m.arch);
    append_tensor(out, "arch", arch_tensor);
    for (auto& [name, t] : entries) append_tensor(out, name, *t);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + tmp + "' for writing");
        f.write(out.data(), std::streamsize(out.size()));
        if (!f) throw IoError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

Model<float> load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader rd{bytes};

    rd.need(8, "magic");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw ParseError("bad magic: not a LIDIAMDL model file", 0);
    rd.pos = 8;
    const std::uint32_t version = rd.u32("version");
    if (version != kFormatVersion)
        throw ParseError("unsupported model format version " + std::to_string(version), 8);
    const std::uint32_t count = rd.u32("tensor count");

    auto read_entry = [&](std::string& name, Tensor<float>& t) {
        const std::uint16_t len = rd.u16("name length");
        rd.need(len, "name");
        name.assign(bytes, rd.pos, len);
        rd.pos += len;
        rd.need(1, "rank");
        const int rank = std::uint8_t(bytes[rd.pos++]);
        if (rank > 3) throw ParseError("tensor '" + name + "' has rank > 3", rd.pos - 1);
        t.dims.clear();
        std::int64_t total = 1;
        for (int i = 0; i < rank; ++i) {
            const std::uint32_t d = rd.u32("dimension");
            t.dims.push_back(int(d));
            total *= d;
        }
        rd.need(std::size_t(total) * 4, ("payload of '" + name + "'").c_str());
        t.data.resize(total);
        for (std::int64_t i = 0; i < total; ++i) t.data[i] = rd.f32("payload");
    };

    if (count < 1) throw ParseError("model file has no tensors", rd.pos);
    std::string name;
    Tensor<float> arch_tensor;
    read_entry(name, arch_tensor);
    if (name != "arch" || arch_tensor.data.size() != 7)
        throw ParseError("first entry must be the 7-field 'arch' descriptor", rd.pos);

    ArchDescriptor arch;
    arch.variant = arch_tensor.data[0] != 0.0f ? ArchVariant::Small : ArchVariant::Full;
    arch.channels = int(arch_tensor.data[1]);
    arch.patch_side = int(arch_tensor.data[2]);
    arch.group_size = int(arch_tensor.data[3]);
    arch.feature_dim = int(arch_tensor.data[4]);
    arch.search_window = int(arch_tensor.data[5]);
    arch.share_weight_net = arch_tensor.data[6] != 0.0f;
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        // an invalid descriptor is a malformed file, not a caller mistake
        throw ParseError(std::string("model file carries an invalid descriptor: ") + e.what(),
                         12);
    }

    Model<float> m = make_model<float>(arch);
    std::vector<std::pair<std::string, Tensor<float>*>> expected;
    visit_model<float>(m, [&](const std::string& n, Tensor<float>& t, TensorKind) {
        expected.emplace_back(n, &t);
    });
    if (count - 1 != expected.size())
        throw ParseError("tensor count mismatch: file has " + std::to_string(count - 1) +
                             ", descriptor needs " + std::to_string(expected.size()),
                         12);

    for (auto& [want_name, slot] : expected) {
        Tensor<float> t;
        read_entry(name, t);
        if (name != want_name)
            throw ParseError("tensor name mismatch: expected '" + want_name + "', found '" +
                                 name + "'",
                             rd.pos);
        if (t.dims != slot->dims)
            throw ParseError("shape mismatch for tensor '" + name + "'", rd.pos);
        slot->data = std::move(t.data);
    }
    return m;
}

// --- prepared inputs ------------------------------------------------------

template <typename T>
PreparedImage<T> prepare_image(const Plane<T>& img, const ArchDescriptor& arch, int threads) {
    arch.validate();
    if (img.channels != arch.channels)
        throw ShapeError("prepare_image: image channels do not match the architecture");
    const PatchConfig cfg = arch.patch_config();
    PreparedImage<T> prep;
    prep.pyr = build_pyramid(img, cfg);
    prep.height = img.height;
    prep.width = img.width;
    prep.locations = std::int64_t(img.height) * img.width;

    const int k = arch.group_size;
    const int m = cfg.margin();
    for (int s = 0; s < 2; ++s) {
        prep.nbr_rows[s].resize(prep.locations * k);
        prep.nbr_cols[s].resize(prep.locations * k);
        prep.dists[s].resize(prep.locations * k);
    }
    const Plane<T>* full_lum = arch.channels == 3 ? &prep.pyr.full_lum : nullptr;
    parallel_chunks(prep.locations, kLocationChunk, threads,
                    [&](int, std::int64_t begin, std::int64_t end) {
                        for (std::int64_t loc = begin; loc < end; ++loc) {
                            const int r = int(loc / img.width), c = int(loc % img.width);
                            knn_search(prep.pyr.full, full_lum, cfg, r + m, c + m,
                                       &prep.nbr_rows[0][loc * k], &prep.nbr_cols[0][loc * k],
                                       &prep.dists[0][loc * k]);
                            const int ph = phase_of(r, c);
                            const Plane<T>* ph_lum =
                                arch.channels == 3 ? &prep.pyr.phase_lum[ph] : nullptr;
                            knn_search(prep.pyr.phases[ph], ph_lum, cfg, r / 2 + m, c / 2 + m,
                                       &prep.nbr_rows[1][loc * k], &prep.nbr_cols[1][loc * k],
                                       &prep.dists[1][loc * k]);
                        }
                    });
    return prep;
}

// --- weight net -----------------------------------------------------------

template <typename T>
void weight_net_forward(const WeightNet<T>& net, const T* dists, std::int64_t L, int k, bool train,
                        WeightNetCache<T>& cache, T* w_out, int threads) {
    constexpr int layers = WeightNet<T>::kLayers;
    for (int i = 0; i < layers - 1; ++i) cache.act[i].assign(std::size_t(L) * k, T(0));
    const T* cur = dists;
    for (int i = 0; i < layers; ++i) {
        T* out = i == layers - 1 ? w_out : cache.act[i].data();
        parallel_chunks(L, kLocationChunk, threads, [&](int, std::int64_t b, std::int64_t e) {
            fc_forward(cur + b * k, k, e - b, net.fc_w[i], net.fc_b[i], out + b * k);
        });
        if (i < layers - 1) {
            if (train) {
                cache.xhat[i].assign(std::size_t(L) * k, T(0));
                bn_forward_train(out, k, L, net.bn[i], cache.xhat[i].data(), cache.stats[i]);
            } else {
                bn_forward_eval(out, k, L, net.bn[i]);
            }
            relu_forward(out, L * k);
            cur = out;
        }
    }
}

template <typename T>
void weight_net_backward(WeightNet<T>& net, const T* dists, std::int64_t L, int k,
                         const WeightNetCache<T>& cache, const T* dw, int /*threads*/) {
    constexpr int layers = WeightNet<T>::kLayers;
    std::vector<T> dcur(dw, dw + L * k), dprev(std::size_t(L) * k);
    for (int i = layers - 1; i >= 0; --i) {
        const T* input = i == 0 ? dists : cache.act[i - 1].data();
        fc_backward(input, k, L, net.fc_w[i], dcur.data(), i == 0 ? nullptr : dprev.data(),
                    net.fc_w[i].grad.data(), net.fc_b[i].grad.data());
        if (i > 0) {
            std::swap(dcur, dprev);
            relu_backward(cache.act[i - 1].data(), dcur.data(), L * k);
            bn_backward(cache.xhat[i - 1].data(), dcur.data(), k, L, net.bn[i - 1],
                        cache.stats[i - 1], net.bn[i - 1].scale.grad.data(),
                        net.bn[i - 1].shift.grad.data());
        }
    }
}

// --- batched forward ------------------------------------------------------

namespace {

// Per-chunk scratch for the separable layers.
template <typename T>
struct SLScratch {
    std::vector<T> a, da, dz;
    void size_for(const SLParams<T>& p) {
        const std::size_t an = std::size_t(p.rows_out()) * p.cols_in();
        if (a.size() < an) a.resize(an);
        if (da.size() < an) da.resize(an);
        const std::size_t zn = std::size_t(p.rows_in()) * p.cols_in();
        if (dz.size() < zn) dz.resize(zn);
    }
};

// Applies one SL layer (+ optional ReLU) per location over a whole buffer.
template <typename T>
void sl_apply_all(const T* in, T* out, const SLParams<T>& p, bool relu, std::int64_t L,
                  int threads) {
    const std::int64_t in_stride = std::int64_t(p.rows_in()) * p.cols_in();
    const std::int64_t out_stride = std::int64_t(p.rows_out()) * p.cols_out();
    parallel_chunks(L, kLocationChunk, threads, [&](int, std::int64_t b, std::int64_t e) {
        SLScratch<T> scratch;
        scratch.size_for(p);
        for (std::int64_t l = b; l < e; ++l) {
            sl_forward(in + l * in_stride, p, scratch.a.data(), out + l * out_stride);
            if (relu) relu_forward(out + l * out_stride, out_stride);
        }
    });
}

// Sequential reverse of sl_apply_all: accumulates parameter grads in location
// order (deterministic regardless of the forward thread count) and fills the
// per-location input gradient.
template <typename T>
void sl_backward_all(const T* in, const T* dout, T* din, SLParams<T>& p, std::int64_t L) {
    SLScratch<T> scratch;
    scratch.size_for(p);
    SLGradSink<T> sink{p.w1.grad.data(), p.w2.grad.data(), p.bias.grad.data()};
    const std::int64_t in_stride = std::int64_t(p.rows_in()) * p.cols_in();
    const std::int64_t out_stride = std::int64_t(p.rows_out()) * p.cols_out();
    for (std::int64_t l = 0; l < L; ++l)
        sl_backward(in + l * in_stride, dout + l * out_stride, p, sink, scratch.a.data(),
                    scratch.da.data(), din ? din + l * in_stride : nullptr);
}

template <typename T>
const WeightNet<T>& weight_net_of(const Model<T>& m, int scale) {
    return (scale == 0 || m.arch.share_weight_net) ? m.wnet1 : m.wnet2;
}
template <typename T>
WeightNet<T>& weight_net_of(Model<T>& m, int scale) {
    return (scale == 0 || m.arch.share_weight_net) ? m.wnet1 : m.wnet2;
}

template <typename T>
const ScaleStack<T>& stack_of(const Model<T>& m, int scale) {
    return scale == 0 ? m.scale1 : m.scale2;
}
template <typename T>
ScaleStack<T>& stack_of(Model<T>& m, int scale) {
    return scale == 0 ? m.scale1 : m.scale2;
}

// The plane a location's scale-s patches live in.
template <typename T>
const Plane<T>& plane_of(const PreparedImage<T>& prep, int scale, std::int64_t loc) {
    if (scale == 0) return prep.pyr.full;
    const int r = int(loc / prep.width), c = int(loc % prep.width);
    return prep.pyr.phases[phase_of(r, c)];
}

// Center of a location's patch in its plane's padded coordinates.
template <typename T>
void center_of(const PreparedImage<T>& prep, int scale, std::int64_t loc, int& row, int& col) {
    const int r = int(loc / prep.width), c = int(loc % prep.width);
    const int m = prep.pyr.margin;
    if (scale == 0) {
        row = r + m;
        col = c + m;
    } else {
        row = r / 2 + m;
        col = c / 2 + m;
    }
}

}  // namespace

template <typename T>
void apply_column_weights(const T* z, const T* w, int n, int k, T* out) {
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < n; ++i) out[std::size_t(j) * n + i] = z[std::size_t(j) * n + i] * w[j];
}

template <typename T>
void forward_batch(const Model<T>& model, BatchWorkspace<T>& ws) {
    const ArchDescriptor& arch = model.arch;
    const bool full = arch.variant == ArchVariant::Full;
    const int n = arch.patch_len(), k = arch.group_size, f = arch.feature_dim;
    const int fc = arch.fused_cols();
    const int side = arch.patch_side;
    const int threads = ws.threads;

    ws.L = 0;
    for (auto& img : ws.images) {
        img.loc_begin = ws.L;
        ws.L += img.prep.locations;
    }
    const std::int64_t L = ws.L;
    if (L == 0) throw ShapeError("forward_batch: empty batch");

    std::vector<T> dists_all[2];
    for (int s = 0; s < 2; ++s) {
        auto& sc = ws.scale[s];
        sc.z.assign(std::size_t(L) * k * n, T(0));
        sc.w.assign(std::size_t(L) * k, T(0));
        sc.zt.assign(std::size_t(L) * k * n, T(0));
        sc.f0.assign(std::size_t(L) * k * f, T(0));
        if (full) {
            sc.xhat1.assign(std::size_t(L) * k * f, T(0));
            sc.f1.assign(std::size_t(L) * k * f, T(0));
        }
        sc.p.assign(std::size_t(L) * n, T(0));
        sc.ptilde.assign(std::size_t(L) * n, T(0));
        sc.fagg.assign(std::size_t(L) * k * f, T(0));
        dists_all[s].assign(std::size_t(L) * k, T(0));
    }

    // gather groups and distance vectors
    for (auto& img : ws.images) {
        const auto& prep = img.prep;
        parallel_chunks(prep.locations, kLocationChunk, threads,
                        [&](int, std::int64_t b, std::int64_t e) {
                            for (std::int64_t li = b; li < e; ++li) {
                                const std::int64_t g = img.loc_begin + li;
                                for (int s = 0; s < 2; ++s) {
                                    const Plane<T>& plane = plane_of(prep, s, li);
                                    auto& sc = ws.scale[s];
                                    for (int j = 0; j < k; ++j) {
                                        extract_patch(plane, prep.nbr_rows[s][li * k + j],
                                                      prep.nbr_cols[s][li * k + j], side,
                                                      &sc.z[(std::size_t(g) * k + j) * n]);
                                        dists_all[s][g * k + j] = prep.dists[s][li * k + j];
                                    }
                                }
                            }
                        });
    }

    // per-scale branches
    for (int s = 0; s < 2; ++s) {
        auto& sc = ws.scale[s];
        const ScaleStack<T>& stack = stack_of(model, s);

        weight_net_forward(weight_net_of(model, s), dists_all[s].data(), L, k, ws.train_mode,
                           sc.wn_cache, sc.w.data(), threads);

        parallel_chunks(L, kLocationChunk, threads, [&](int, std::int64_t b, std::int64_t e) {
            for (std::int64_t l = b; l < e; ++l)
                apply_column_weights(&sc.z[std::size_t(l) * k * n], &sc.w[std::size_t(l) * k], n, k,
                                     &sc.zt[std::size_t(l) * k * n]);
        });

        sl_apply_all(sc.zt.data(), sc.f0.data(), stack.tr0, /*relu=*/true, L, threads);

        T* f1 = sc.f0.data();
        if (full) {
            sl_apply_all(sc.f0.data(), sc.f1.data(), stack.tbr1, /*relu=*/false, L, threads);
            if (ws.train_mode)
                bn_forward_train(sc.f1.data(), f, L * k, stack.bn1, sc.xhat1.data(), sc.bn1_stats);
            else
                bn_forward_eval(sc.f1.data(), f, L * k, stack.bn1);
            relu_forward(sc.f1.data(), L * k * f);
            f1 = sc.f1.data();
        }

        sl_apply_all(f1, sc.p.data(), stack.t_pre, /*relu=*/false, L, threads);

        // aggregation: average overlapping patches into a temporary plane and
        // read them back, enforcing consistency
        for (auto& img : ws.images) {
            const auto& prep = img.prep;
            if (s == 0) {
                std::vector<PatchRef<T>> refs(prep.locations);
                for (std::int64_t li = 0; li < prep.locations; ++li) {
                    int row, col;
                    center_of(prep, 0, li, row, col);
                    refs[li] = {row, col, &sc.p[std::size_t(img.loc_begin + li) * n]};
                }
                Plane<T> temp =
                    aggregate<T>(refs, {}, prep.pyr.full.height, prep.pyr.full.width,
                                 arch.channels, side, /*post_filter=*/false, &img.cov1);
                parallel_chunks(prep.locations, kLocationChunk, threads,
                                [&](int, std::int64_t b, std::int64_t e) {
                                    for (std::int64_t li = b; li < e; ++li) {
                                        int row, col;
                                        center_of(prep, 0, li, row, col);
                                        extract_patch(temp, row, col, side,
                                                      &sc.ptilde[std::size_t(img.loc_begin + li) * n]);
                                    }
                                });
            } else {
                // one temporary plane per parity phase, each low-pass filtered
                std::array<std::vector<PatchRef<T>>, 4> refs;
                std::array<std::vector<std::int64_t>, 4> members;
                for (std::int64_t li = 0; li < prep.locations; ++li) {
                    const int r = int(li / prep.width), c = int(li % prep.width);
                    const int ph = phase_of(r, c);
                    int row, col;
                    center_of(prep, 1, li, row, col);
                    refs[ph].push_back({row, col, &sc.p[std::size_t(img.loc_begin + li) * n]});
                    members[ph].push_back(li);
                }
                for (int ph = 0; ph < 4; ++ph) {
                    const Plane<T>& phase_plane = prep.pyr.phases[ph];
                    Plane<T> temp = aggregate<T>(refs[ph], {}, phase_plane.height,
                                                 phase_plane.width, arch.channels, side,
                                                 /*post_filter=*/true, &img.cov2[ph]);
                    const auto& locs = members[ph];
                    parallel_chunks(std::int64_t(locs.size()), kLocationChunk, threads,
                                    [&](int, std::int64_t b, std::int64_t e) {
                                        for (std::int64_t i = b; i < e; ++i) {
                                            const std::int64_t li = locs[i];
                                            int row, col;
                                            center_of(prep, 1, li, row, col);
                                            extract_patch(temp, row, col, side,
                                                          &sc.ptilde[std::size_t(img.loc_begin + li) * n]);
                                        }
                                    });
                }
            }
        }

        sl_apply_all(sc.ptilde.data(), sc.fagg.data(), stack.tr_post, /*relu=*/true, L, threads);
    }

    // fuse the four origins: [s1-direct | s1-agg | s2-direct | s2-agg]
    ws.fused.assign(std::size_t(L) * fc * f, T(0));
    {
        const T* parts[4] = {full ? ws.scale[0].f1.data() : ws.scale[0].f0.data(),
                             ws.scale[0].fagg.data(),
                             full ? ws.scale[1].f1.data() : ws.scale[1].f0.data(),
                             ws.scale[1].fagg.data()};
        const std::size_t blk = std::size_t(k) * f;
        parallel_chunks(L, kLocationChunk, threads, [&](int, std::int64_t b, std::int64_t e) {
            for (std::int64_t l = b; l < e; ++l)
                for (int q = 0; q < 4; ++q)
                    std::copy(parts[q] + l * blk, parts[q] + (l + 1) * blk,
                              ws.fused.data() + (std::size_t(l) * 4 + q) * blk);
        });
    }

    ws.g1.assign(std::size_t(L) * fc * f, T(0));
    sl_apply_all(ws.fused.data(), ws.g1.data(), model.tbr2, /*relu=*/false, L, threads);
    if (ws.train_mode) {
        ws.xhat2.assign(std::size_t(L) * fc * f, T(0));
        bn_forward_train(ws.g1.data(), f, L * fc, model.bn2, ws.xhat2.data(), ws.bn2_stats);
    } else {
        bn_forward_eval(ws.g1.data(), f, L * fc, model.bn2);
    }
    relu_forward(ws.g1.data(), L * fc * f);

    T* g2 = ws.g1.data();
    if (full) {
        ws.g2.assign(std::size_t(L) * fc * f, T(0));
        sl_apply_all(ws.g1.data(), ws.g2.data(), model.tbr3, /*relu=*/false, L, threads);
        if (ws.train_mode) {
            ws.xhat3.assign(std::size_t(L) * fc * f, T(0));
            bn_forward_train(ws.g2.data(), f, L * fc, model.bn3, ws.xhat3.data(), ws.bn3_stats);
        } else {
            bn_forward_eval(ws.g2.data(), f, L * fc, model.bn3);
        }
        relu_forward(ws.g2.data(), L * fc * f);
        g2 = ws.g2.data();
    }

    ws.residual.assign(std::size_t(L) * n, T(0));
    sl_apply_all(g2, ws.residual.data(), model.t4, /*relu=*/false, L, threads);

    // restored patches and their variance-driven combination weights
    ws.zhat.assign(std::size_t(L) * n, T(0));
    ws.zhat_mean.assign(L, T(0));
    ws.zhat_var.assign(L, T(0));
    ws.w_final.assign(L, T(0));
    const T beta = model.agg_beta.data[0];
    parallel_chunks(L, kLocationChunk, threads, [&](int, std::int64_t b, std::int64_t e) {
        for (std::int64_t l = b; l < e; ++l) {
            const T* seed = &ws.scale[0].z[std::size_t(l) * k * n];  // column 0
            const T* res = &ws.residual[std::size_t(l) * n];
            T* out = &ws.zhat[std::size_t(l) * n];
            T mean = T(0);
            for (int i = 0; i < n; ++i) {
                out[i] = seed[i] - res[i];
                mean += out[i];
            }
            mean /= T(n);
            T var = T(0);
            for (int i = 0; i < n; ++i) {
                const T d = out[i] - mean;
                var += d * d;
            }
            var /= T(n - 1);
            ws.zhat_mean[l] = mean;
            ws.zhat_var[l] = var;
            ws.w_final[l] = std::exp(-beta * var);
        }
    });

    // weighted re-aggregation into the output image
    for (auto& img : ws.images) {
        const auto& prep = img.prep;
        std::vector<PatchRef<T>> refs(prep.locations);
        for (std::int64_t li = 0; li < prep.locations; ++li) {
            int row, col;
            center_of(prep, 0, li, row, col);
            refs[li] = {row, col, &ws.zhat[std::size_t(img.loc_begin + li) * n]};
        }
        img.yhat_pad = aggregate<T>(
            refs, std::span<const T>(ws.w_final.data() + img.loc_begin, prep.locations),
            prep.pyr.full.height, prep.pyr.full.width, arch.channels, side,
            /*post_filter=*/false, &img.den);
        const int m = prep.pyr.margin;
        img.output = Plane<T>(prep.height, prep.width, arch.channels);
        for (int r = 0; r < prep.height; ++r)
            for (int c = 0; c < prep.width; ++c)
                for (int ch = 0; ch < arch.channels; ++ch)
                    img.output.at(r, c, ch) = img.yhat_pad.at(r + m, c + m, ch);
    }
}

template <typename T>
void backward_batch(Model<T>& model, BatchWorkspace<T>& ws,
                    const std::vector<Plane<T>>& output_grads) {
    const ArchDescriptor& arch = model.arch;
    const bool full = arch.variant == ArchVariant::Full;
    const int n = arch.patch_len(), k = arch.group_size, f = arch.feature_dim;
    const int fc = arch.fused_cols();
    const int side = arch.patch_side;
    const int rad = side / 2;
    const std::int64_t L = ws.L;
    if (output_grads.size() != ws.images.size())
        throw ShapeError("backward_batch: one output gradient per image required");

    const T beta = model.agg_beta.data[0];
    std::vector<T> dzhat(std::size_t(L) * n, T(0));
    T dbeta = T(0);

    // back through the weighted average: for pixel p with stacked weight den,
    // d/dzhat and d/dw of sum_l w_l zhat_l / den
    for (std::size_t ii = 0; ii < ws.images.size(); ++ii) {
        auto& img = ws.images[ii];
        const auto& prep = img.prep;
        const auto& gout = output_grads[ii];
        if (gout.height != prep.height || gout.width != prep.width)
            throw ShapeError("backward_batch: output gradient shape mismatch");
        const int m = prep.pyr.margin;
        Plane<T> gpad(prep.pyr.full.height, prep.pyr.full.width, arch.channels, T(0));
        for (int r = 0; r < prep.height; ++r)
            for (int c = 0; c < prep.width; ++c)
                for (int ch = 0; ch < arch.channels; ++ch)
                    gpad.at(r + m, c + m, ch) = gout.at(r, c, ch);

        for (std::int64_t li = 0; li < prep.locations; ++li) {
            const std::int64_t l = img.loc_begin + li;
            int row, col;
            center_of(prep, 0, li, row, col);
            const T* zh = &ws.zhat[std::size_t(l) * n];
            T* dz = &dzhat[std::size_t(l) * n];
            const T wl = ws.w_final[l];
            T dwl = T(0);
            int idx = 0;
            for (int dr = -rad; dr <= rad; ++dr) {
                for (int dc = -rad; dc <= rad; ++dc) {
                    const T den = img.den.at(row + dr, col + dc);
                    for (int ch = 0; ch < arch.channels; ++ch, ++idx) {
                        const T g = gpad.at(row + dr, col + dc, ch);
                        if (g == T(0)) continue;
                        const T gd = g / den;
                        dz[idx] += wl * gd;
                        dwl += gd * (zh[idx] - img.yhat_pad.at(row + dr, col + dc, ch));
                    }
                }
            }
            // w = exp(-beta var): chain into the variance and the scalar beta
            const T dvar = -beta * wl * dwl;
            dbeta += -ws.zhat_var[l] * wl * dwl;
            if (dvar != T(0)) {
                const T scale2 = dvar * T(2) / T(n - 1);
                const T mean = ws.zhat_mean[l];
                for (int i = 0; i < n; ++i) dz[i] += scale2 * (zh[i] - mean);
            }
        }
    }
    model.agg_beta.grad[0] += dbeta;

    // residual head: zhat = seed - residual
    std::vector<T>& dresidual = dzhat;
    for (auto& v : dresidual) v = -v;

    const T* g2 = full ? ws.g2.data() : ws.g1.data();
    std::vector<T> dg2(std::size_t(L) * fc * f, T(0));
    sl_backward_all(g2, dresidual.data(), dg2.data(), model.t4, L);

    if (full) {
        relu_backward(ws.g2.data(), dg2.data(), L * fc * f);
        bn_backward(ws.xhat3.data(), dg2.data(), f, L * fc, model.bn3, ws.bn3_stats,
                    model.bn3.scale.grad.data(), model.bn3.shift.grad.data());
        std::vector<T> dg1(std::size_t(L) * fc * f, T(0));
        sl_backward_all(ws.g1.data(), dg2.data(), dg1.data(), model.tbr3, L);
        dg2.swap(dg1);
    }

    relu_backward(ws.g1.data(), dg2.data(), L * fc * f);
    bn_backward(ws.xhat2.data(), dg2.data(), f, L * fc, model.bn2, ws.bn2_stats,
                model.bn2.scale.grad.data(), model.bn2.shift.grad.data());
    std::vector<T> dfused(std::size_t(L) * fc * f, T(0));
    sl_backward_all(ws.fused.data(), dg2.data(), dfused.data(), model.tbr2, L);
    dg2.clear();
    dg2.shrink_to_fit();

    for (int s = 0; s < 2; ++s) {
        auto& sc = ws.scale[s];
        ScaleStack<T>& stack = stack_of(model, s);
        const std::size_t blk = std::size_t(k) * f;

        // split the fused gradient back into direct/aggregated parts
        std::vector<T> df1(std::size_t(L) * k * f), dfagg(std::size_t(L) * k * f);
        for (std::int64_t l = 0; l < L; ++l) {
            std::copy(dfused.data() + (std::size_t(l) * 4 + 2 * s) * blk,
                      dfused.data() + (std::size_t(l) * 4 + 2 * s + 1) * blk, df1.data() + l * blk);
            std::copy(dfused.data() + (std::size_t(l) * 4 + 2 * s + 1) * blk,
                      dfused.data() + (std::size_t(l) * 4 + 2 * s + 2) * blk,
                      dfagg.data() + l * blk);
        }

        // aggregated branch
        relu_backward(sc.fagg.data(), dfagg.data(), L * k * f);
        std::vector<T> dptilde(std::size_t(L) * n, T(0));
        sl_backward_all(sc.ptilde.data(), dfagg.data(), dptilde.data(), stack.tr_post, L);
        dfagg.clear();
        dfagg.shrink_to_fit();

        // back through the aggregation blocks
        std::vector<T> dp(std::size_t(L) * n, T(0));
        for (auto& img : ws.images) {
            const auto& prep = img.prep;
            if (s == 0) {
                Plane<T> dtemp(prep.pyr.full.height, prep.pyr.full.width, arch.channels, T(0));
                for (std::int64_t li = 0; li < prep.locations; ++li) {
                    int row, col;
                    center_of(prep, 0, li, row, col);
                    scatter_patch_add(dtemp, row, col, side,
                                      &dptilde[std::size_t(img.loc_begin + li) * n], T(1));
                }
                for (std::int64_t li = 0; li < prep.locations; ++li) {
                    int row, col;
                    center_of(prep, 0, li, row, col);
                    T* dpl = &dp[std::size_t(img.loc_begin + li) * n];
                    int idx = 0;
                    for (int dr = -rad; dr <= rad; ++dr)
                        for (int dc = -rad; dc <= rad; ++dc) {
                            const T cov = img.cov1.at(row + dr, col + dc);
                            for (int ch = 0; ch < arch.channels; ++ch, ++idx)
                                dpl[idx] = dtemp.at(row + dr, col + dc, ch) / cov;
                        }
                }
            } else {
                std::array<std::vector<std::int64_t>, 4> members;
                for (std::int64_t li = 0; li < prep.locations; ++li)
                    members[phase_of(int(li / prep.width), int(li % prep.width))].push_back(li);
                for (int ph = 0; ph < 4; ++ph) {
                    const Plane<T>& phase_plane = prep.pyr.phases[ph];
                    Plane<T> dtemp(phase_plane.height, phase_plane.width, arch.channels, T(0));
                    for (const std::int64_t li : members[ph]) {
                        int row, col;
                        center_of(prep, 1, li, row, col);
                        scatter_patch_add(dtemp, row, col, side,
                                          &dptilde[std::size_t(img.loc_begin + li) * n], T(1));
                    }
                    Plane<T> davg = conv3x3_mirror_adjoint(dtemp, low_pass_kernel<T>());
                    for (const std::int64_t li : members[ph]) {
                        int row, col;
                        center_of(prep, 1, li, row, col);
                        T* dpl = &dp[std::size_t(img.loc_begin + li) * n];
                        int idx = 0;
                        for (int dr = -rad; dr <= rad; ++dr)
                            for (int dc = -rad; dc <= rad; ++dc) {
                                const T cov = img.cov2[ph].at(row + dr, col + dc);
                                for (int ch = 0; ch < arch.channels; ++ch, ++idx)
                                    dpl[idx] = davg.at(row + dr, col + dc, ch) / cov;
                            }
                    }
                }
            }
        }
        dptilde.clear();
        dptilde.shrink_to_fit();

        // image-domain projection feeds from both branches
        const T* f1 = full ? sc.f1.data() : sc.f0.data();
        {
            std::vector<T> df1_agg(std::size_t(L) * k * f, T(0));
            sl_backward_all(f1, dp.data(), df1_agg.data(), stack.t_pre, L);
            for (std::size_t i = 0; i < df1.size(); ++i) df1[i] += df1_agg[i];
        }
        dp.clear();
        dp.shrink_to_fit();

        std::vector<T> df0;
        if (full) {
            relu_backward(sc.f1.data(), df1.data(), L * k * f);
            bn_backward(sc.xhat1.data(), df1.data(), f, L * k, stack.bn1, sc.bn1_stats,
                        stack.bn1.scale.grad.data(), stack.bn1.shift.grad.data());
            df0.assign(std::size_t(L) * k * f, T(0));
            sl_backward_all(sc.f0.data(), df1.data(), df0.data(), stack.tbr1, L);
        } else {
            df0 = std::move(df1);
        }

        relu_backward(sc.f0.data(), df0.data(), L * k * f);
        std::vector<T> dzt(std::size_t(L) * k * n, T(0));
        sl_backward_all(sc.zt.data(), df0.data(), dzt.data(), stack.tr0, L);
        df0.clear();
        df0.shrink_to_fit();

        // columns were scaled by the weight-net output: dw_j = <z_j, dzt_j>
        std::vector<T> dw(std::size_t(L) * k, T(0));
        for (std::int64_t l = 0; l < L; ++l) {
            for (int j = 0; j < k; ++j) {
                const T* zc = &sc.z[(std::size_t(l) * k + j) * n];
                const T* dc = &dzt[(std::size_t(l) * k + j) * n];
                T acc = T(0);
                for (int i = 0; i < n; ++i) acc += zc[i] * dc[i];
                dw[l * k + j] = acc;
            }
        }
        dzt.clear();
        dzt.shrink_to_fit();

        // distance vectors are data; only parameter grads flow
        std::vector<T> dists_all(std::size_t(L) * k);
        for (auto& img : ws.images)
            std::copy(img.prep.dists[s].begin(), img.prep.dists[s].end(),
                      dists_all.begin() + img.loc_begin * k);
        weight_net_backward(weight_net_of(model, s), dists_all.data(), L, k, sc.wn_cache,
                            dw.data(), 1);
    }
}

template <typename T>
void update_running_stats(Model<T>& model, const BatchWorkspace<T>& ws) {
    const bool full = model.arch.variant == ArchVariant::Full;
    for (int s = 0; s < 2; ++s) {
        WeightNet<T>& net = weight_net_of(model, s);
        for (int i = 0; i < WeightNet<T>::kLayers - 1; ++i)
            bn_update_running(net.bn[i], ws.scale[s].wn_cache.stats[i]);
        if (full) bn_update_running(stack_of(model, s).bn1, ws.scale[s].bn1_stats);
    }
    bn_update_running(model.bn2, ws.bn2_stats);
    if (full) bn_update_running(model.bn3, ws.bn3_stats);
}

// --- streaming inference ---------------------------------------------------

template <typename T>
DenoiseResult<T> denoise(const Plane<T>& noisy, const Model<T>& model_in,
                         const DenoiseOptions<T>& opt) {
    const Model<T>* model = &model_in;
    Model<T> override_copy;
    if (opt.override_beta) {
        override_copy = model_in;
        override_copy.agg_beta.data[0] = opt.beta_value;
        model = &override_copy;
    }
    const ArchDescriptor& arch = model->arch;
    const bool full = arch.variant == ArchVariant::Full;
    const int n = arch.patch_len(), k = arch.group_size, f = arch.feature_dim;
    const int fc = arch.fused_cols();
    const int side = arch.patch_side;
    const int threads = std::max(1, opt.threads);

    PreparedImage<T> prep = prepare_image(noisy, arch, threads);
    const std::int64_t L = prep.locations;

    std::vector<T> w[2], p[2], ptilde[2];
    for (int s = 0; s < 2; ++s) {
        w[s].assign(std::size_t(L) * k, T(0));
        p[s].assign(std::size_t(L) * n, T(0));
        ptilde[s].assign(std::size_t(L) * n, T(0));
    }

    // pass A: weight nets, first transforms, projection to the image domain
    for (int s = 0; s < 2; ++s) {
        const ScaleStack<T>& stack = stack_of(*model, s);
        WeightNetCache<T> wn_cache;
        weight_net_forward(weight_net_of(*model, s), prep.dists[s].data(), L, k,
                           /*train=*/false, wn_cache, w[s].data(), threads);

        parallel_chunks(L, kStreamBlock, threads, [&](int, std::int64_t b, std::int64_t e) {
            const std::int64_t bl = e - b;
            std::vector<T> z(std::size_t(bl) * k * n), zt(std::size_t(bl) * k * n);
            std::vector<T> f0(std::size_t(bl) * k * f), f1buf;
            SLScratch<T> scratch;
            for (std::int64_t l = b; l < e; ++l) {
                const Plane<T>& plane = plane_of(prep, s, l);
                for (int j = 0; j < k; ++j)
                    extract_patch(plane, prep.nbr_rows[s][l * k + j], prep.nbr_cols[s][l * k + j],
                                  side, &z[(std::size_t(l - b) * k + j) * n]);
                apply_column_weights(&z[std::size_t(l - b) * k * n], &w[s][std::size_t(l) * k], n,
                                     k, &zt[std::size_t(l - b) * k * n]);
            }
            scratch.size_for(stack.tr0);
            for (std::int64_t i = 0; i < bl; ++i) {
                sl_forward(&zt[std::size_t(i) * k * n], stack.tr0, scratch.a.data(),
                           &f0[std::size_t(i) * k * f]);
                relu_forward(&f0[std::size_t(i) * k * f], std::int64_t(k) * f);
            }
            T* f1 = f0.data();
            if (full) {
                f1buf.assign(std::size_t(bl) * k * f, T(0));
                scratch.size_for(stack.tbr1);
                for (std::int64_t i = 0; i < bl; ++i)
                    sl_forward(&f0[std::size_t(i) * k * f], stack.tbr1, scratch.a.data(),
                               &f1buf[std::size_t(i) * k * f]);
                bn_forward_eval(f1buf.data(), f, bl * k, stack.bn1);
                relu_forward(f1buf.data(), bl * k * f);
                f1 = f1buf.data();
            }
            scratch.size_for(stack.t_pre);
            for (std::int64_t i = 0; i < bl; ++i)
                sl_forward(f1 + std::size_t(i) * k * f, stack.t_pre, scratch.a.data(),
                           &p[s][std::size_t(b + i) * n]);
        });

        // aggregation consistency
        if (s == 0) {
            std::vector<PatchRef<T>> refs(L);
            for (std::int64_t l = 0; l < L; ++l) {
                int row, col;
                center_of(prep, 0, l, row, col);
                refs[l] = {row, col, &p[0][std::size_t(l) * n]};
            }
            Plane<T> temp = aggregate<T>(refs, {}, prep.pyr.full.height, prep.pyr.full.width,
                                         arch.channels, side, /*post_filter=*/false);
            parallel_chunks(L, kStreamBlock, threads, [&](int, std::int64_t b, std::int64_t e) {
                for (std::int64_t l = b; l < e; ++l) {
                    int row, col;
                    center_of(prep, 0, l, row, col);
                    extract_patch(temp, row, col, side, &ptilde[0][std::size_t(l) * n]);
                }
            });
        } else {
            std::array<std::vector<PatchRef<T>>, 4> refs;
            std::array<std::vector<std::int64_t>, 4> members;
            for (std::int64_t l = 0; l < L; ++l) {
                const int ph = phase_of(int(l / prep.width), int(l % prep.width));
                int row, col;
                center_of(prep, 1, l, row, col);
                refs[ph].push_back({row, col, &p[1][std::size_t(l) * n]});
                members[ph].push_back(l);
            }
            for (int ph = 0; ph < 4; ++ph) {
                const Plane<T>& phase_plane = prep.pyr.phases[ph];
                Plane<T> temp = aggregate<T>(refs[ph], {}, phase_plane.height, phase_plane.width,
                                             arch.channels, side, /*post_filter=*/true);
                const auto& locs = members[ph];
                parallel_chunks(std::int64_t(locs.size()), kStreamBlock, threads,
                                [&](int, std::int64_t b, std::int64_t e) {
                                    for (std::int64_t i = b; i < e; ++i) {
                                        int row, col;
                                        center_of(prep, 1, locs[i], row, col);
                                        extract_patch(temp, row, col, side,
                                                      &ptilde[1][std::size_t(locs[i]) * n]);
                                    }
                                });
            }
        }
    }

    // pass B: recompute the direct branch, fuse, head, restore patches
    std::vector<T> zhat(std::size_t(L) * n), wfin(L);
    const T beta = model->agg_beta.data[0];
    parallel_chunks(L, kStreamBlock, threads, [&](int, std::int64_t b, std::int64_t e) {
        const std::int64_t bl = e - b;
        std::vector<T> seed(std::size_t(bl) * n);
        std::vector<T> fusebuf(std::size_t(bl) * fc * f);
        std::vector<T> z(std::size_t(k) * n), zt(std::size_t(k) * n);
        std::vector<T> f0(std::size_t(k) * f), f1buf(std::size_t(k) * f);
        std::vector<T> g1(std::size_t(fc) * f), g2buf(std::size_t(fc) * f);
        SLScratch<T> scratch;
        scratch.size_for(stack_of(*model, 0).tr0);
        if (full) scratch.size_for(stack_of(*model, 0).tbr1);
        scratch.size_for(stack_of(*model, 0).tr_post);
        scratch.size_for(model->tbr2);
        if (full) scratch.size_for(model->tbr3);
        scratch.size_for(model->t4);

        for (std::int64_t l = b; l < e; ++l) {
            T* fuse_loc = &fusebuf[std::size_t(l - b) * fc * f];
            for (int s = 0; s < 2; ++s) {
                const ScaleStack<T>& stack = stack_of(*model, s);
                const Plane<T>& plane = plane_of(prep, s, l);
                for (int j = 0; j < k; ++j)
                    extract_patch(plane, prep.nbr_rows[s][l * k + j], prep.nbr_cols[s][l * k + j],
                                  side, &z[std::size_t(j) * n]);
                if (s == 0)
                    std::copy(z.begin(), z.begin() + n, seed.begin() + std::size_t(l - b) * n);
                apply_column_weights(z.data(), &w[s][std::size_t(l) * k], n, k, zt.data());
                sl_forward(zt.data(), stack.tr0, scratch.a.data(), f0.data());
                relu_forward(f0.data(), std::int64_t(k) * f);
                T* f1 = f0.data();
                if (full) {
                    sl_forward(f0.data(), stack.tbr1, scratch.a.data(), f1buf.data());
                    bn_forward_eval(f1buf.data(), f, k, stack.bn1);
                    relu_forward(f1buf.data(), std::int64_t(k) * f);
                    f1 = f1buf.data();
                }
                // fused layout: [s1-direct | s1-agg | s2-direct | s2-agg]
                std::copy(f1, f1 + std::size_t(k) * f, fuse_loc + std::size_t(2 * s) * k * f);
                sl_forward(&ptilde[s][std::size_t(l) * n], stack.tr_post, scratch.a.data(),
                           fuse_loc + std::size_t(2 * s + 1) * k * f);
                relu_forward(fuse_loc + std::size_t(2 * s + 1) * k * f, std::int64_t(k) * f);
            }
            sl_forward(fuse_loc, model->tbr2, scratch.a.data(), g1.data());
            bn_forward_eval(g1.data(), f, fc, model->bn2);
            relu_forward(g1.data(), std::int64_t(fc) * f);
            T* g2 = g1.data();
            if (full) {
                sl_forward(g1.data(), model->tbr3, scratch.a.data(), g2buf.data());
                bn_forward_eval(g2buf.data(), f, fc, model->bn3);
                relu_forward(g2buf.data(), std::int64_t(fc) * f);
                g2 = g2buf.data();
            }
            T* zh = &zhat[std::size_t(l) * n];
            sl_forward(g2, model->t4, scratch.a.data(), zh);  // residual estimate
            const T* sd = &seed[std::size_t(l - b) * n];
            T mean = T(0);
            for (int i = 0; i < n; ++i) {
                zh[i] = sd[i] - zh[i];
                mean += zh[i];
            }
            mean /= T(n);
            T var = T(0);
            for (int i = 0; i < n; ++i) {
                const T d = zh[i] - mean;
                var += d * d;
            }
            var /= T(n - 1);
            wfin[l] = std::exp(-beta * var);
        }
    });

    std::vector<PatchRef<T>> refs(L);
    for (std::int64_t l = 0; l < L; ++l) {
        int row, col;
        center_of(prep, 0, l, row, col);
        refs[l] = {row, col, &zhat[std::size_t(l) * n]};
    }
    Plane<T> ypad = aggregate<T>(refs, std::span<const T>(wfin.data(), wfin.size()),
                                 prep.pyr.full.height, prep.pyr.full.width, arch.channels, side,
                                 /*post_filter=*/false);

    DenoiseResult<T> result;
    result.image = Plane<T>(prep.height, prep.width, arch.channels);
    const int m = prep.pyr.margin;
    for (int r = 0; r < prep.height; ++r)
        for (int c = 0; c < prep.width; ++c)
            for (int ch = 0; ch < arch.channels; ++ch)
                result.image.at(r, c, ch) = ypad.at(r + m, c + m, ch);
    if (opt.keep_patch_outputs) {
        result.patch_outputs = std::move(zhat);
        result.patch_weights = std::move(wfin);
    }
    return result;
}

// --- explicit instantiations -----------------------------------------------

template void apply_column_weights<float>(const float*, const float*, int, int, float*);
template void apply_column_weights<double>(const double*, const double*, int, int, double*);

#define LIDIA_NET_INST(T)                                                                      \
    template void visit_model<T>(                                                              \
        Model<T>&, const std::function<void(const std::string&, Tensor<T>&, TensorKind)>&);    \
    template std::vector<NamedTensor<T>> trainable_tensors<T>(Model<T>&);                      \
    template Model<T> make_model<T>(const ArchDescriptor&);                                    \
    template Model<T> init_model<T>(const ArchDescriptor&, std::uint64_t);                     \
    template PreparedImage<T> prepare_image<T>(const Plane<T>&, const ArchDescriptor&, int);   \
    template void weight_net_forward<T>(const WeightNet<T>&, const T*, std::int64_t, int,      \
                                        bool, WeightNetCache<T>&, T*, int);                    \
    template void weight_net_backward<T>(WeightNet<T>&, const T*, std::int64_t, int,           \
                                         const WeightNetCache<T>&, const T*, int);             \
    template void forward_batch<T>(const Model<T>&, BatchWorkspace<T>&);                       \
    template void backward_batch<T>(Model<T>&, BatchWorkspace<T>&,                             \
                                    const std::vector<Plane<T>>&);                             \
    template void update_running_stats<T>(Model<T>&, const BatchWorkspace<T>&);                \
    template DenoiseResult<T> denoise<T>(const Plane<T>&, const Model<T>&,                     \
                                         const DenoiseOptions<T>&);

LIDIA_NET_INST(float)
LIDIA_NET_INST(double)
#undef LIDIA_NET_INST

template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);

}  // namespace lidia
