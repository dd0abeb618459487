#pragma once

#include <cstdint>
#include <vector>

#include "lidia/errors.hpp"

namespace lidia {

// Dense H x W x C raster, row-major, channel-interleaved. Values are nominally
// in [0,1]; intermediates (noisy images, unclamped network output) may leave
// that range and are only clamped when quantized to 8 bits.
template <typename T>
struct Plane {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<T> data;

    Plane() = default;
    Plane(int h, int w, int c, T fill = T(0))
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::int64_t pixels() const { return std::int64_t(height) * width; }
    std::int64_t samples() const { return pixels() * channels; }

    T& at(int r, int c, int ch = 0) {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }
    T at(int r, int c, int ch = 0) const {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }

    bool same_shape(const Plane& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

using ImagePlane = Plane<float>;

template <typename To, typename From>
Plane<To> convert_plane(const Plane<From>& src) {
    Plane<To> dst(src.height, src.width, src.channels);
    for (std::size_t i = 0; i < src.data.size(); ++i) dst.data[i] = static_cast<To>(src.data[i]);
    return dst;
}

}  // namespace lidia
