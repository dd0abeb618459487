#include "lidia/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "lidia/errors.hpp"
#include "lidia/rng.hpp"

namespace lidia {

namespace {

struct ByteCursor {
    const std::string& bytes;
    std::size_t pos = 0;

    bool eof() const { return pos >= bytes.size(); }
    unsigned char peek() const { return static_cast<unsigned char>(bytes[pos]); }

    static bool is_space(unsigned char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    }

    // Whitespace and '#' comment lines are allowed between header tokens.
    void skip_separators() {
        while (!eof()) {
            if (is_space(peek())) {
                ++pos;
            } else if (peek() == '#') {
                while (!eof() && peek() != '\n') ++pos;
            } else {
                break;
            }
        }
    }

    int read_number(const char* what) {
        skip_separators();
        if (eof() || peek() < '0' || peek() > '9')
            throw ParseError(std::string("expected ") + what, pos);
        long v = 0;
        while (!eof() && peek() >= '0' && peek() <= '9') {
            v = v * 10 + (peek() - '0');
            if (v > 1 << 24) throw ParseError(std::string(what) + " out of range", pos);
            ++pos;
        }
        return static_cast<int>(v);
    }
};

std::string read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

ImagePlane load_image(const std::string& path) {
    const std::string bytes = read_all(path);
    ByteCursor cur{bytes};

    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw ParseError("not a binary PGM/PPM (need P5 or P6 magic)", 0);
    const int channels = bytes[1] == '5' ? 1 : 3;
    cur.pos = 2;

    const int width = cur.read_number("width");
    const int height = cur.read_number("height");
    const int maxval = cur.read_number("maxval");
    if (width <= 0 || height <= 0) throw ParseError("zero image dimension", cur.pos);
    if (maxval != 255) throw ParseError("unsupported maxval " + std::to_string(maxval), cur.pos);
    if (cur.eof() || !ByteCursor::is_space(cur.peek()))
        throw ParseError("expected single whitespace after maxval", cur.pos);
    ++cur.pos;  // exactly one separator byte before the payload

    const std::size_t need = std::size_t(width) * height * channels;
    if (bytes.size() - cur.pos < need)
        throw ParseError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                             std::to_string(bytes.size() - cur.pos),
                         cur.pos);

    ImagePlane img(height, width, channels);
    for (std::size_t i = 0; i < need; ++i)
        img.data[i] = float(static_cast<unsigned char>(bytes[cur.pos + i])) / 255.0f;
    return img;
}

std::uint8_t quantize_sample(float v) {
    float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::floor(double(c) * 255.0 + 0.5));
}

void save_image(const ImagePlane& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        throw ShapeError("save_image: channels must be 1 or 3");
    std::string out;
    out.reserve(32 + img.samples());
    out += img.channels == 1 ? "P5" : "P6";
    out += "\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    for (std::int64_t i = 0; i < img.samples(); ++i)
        out.push_back(static_cast<char>(quantize_sample(img.data[i])));

    // Write to a sibling temp file and rename, so failures never leave a
    // partial image behind.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + tmp + "' for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
    }
}

ImagePlane add_awgn(const ImagePlane& img, const NoiseSpec& spec) {
    Xoshiro256pp rng(spec.seed);
    const double scale = spec.sigma / 255.0;
    ImagePlane out(img.height, img.width, img.channels);
    for (std::int64_t i = 0; i < img.samples(); ++i)
        out.data[i] = static_cast<float>(double(img.data[i]) + scale * rng.next_gaussian());
    return out;
}

double psnr(const ImagePlane& a, const ImagePlane& b) {
    if (!a.same_shape(b)) throw ShapeError("psnr: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.samples(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        acc += d * d;
    }
    const double mse = acc / double(a.samples());
    if (mse == 0.0) return 99.0;
    const double db = 10.0 * std::log10(1.0 / mse);
    return db > 99.0 ? 99.0 : db;
}

template <typename T>
Plane<T> luminance(const Plane<T>& img) {
    if (img.channels != 3) throw ShapeError("luminance: input must have 3 channels");
    Plane<T> out(img.height, img.width, 1);
    for (std::int64_t p = 0; p < img.pixels(); ++p) {
        const double r = img.data[p * 3 + 0];
        const double g = img.data[p * 3 + 1];
        const double b = img.data[p * 3 + 2];
        out.data[p] = static_cast<T>(0.2989 * r + 0.5870 * g + 0.1140 * b);
    }
    return out;
}

template Plane<float> luminance<float>(const Plane<float>&);
template Plane<double> luminance<double>(const Plane<double>&);

}  // namespace lidia
