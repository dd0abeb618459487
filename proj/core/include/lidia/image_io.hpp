#pragma once

#include <cstdint>
#include <string>

#include "lidia/plane.hpp"

namespace lidia {

// Additive white Gaussian noise, sigma on the usual 8-bit scale (15/25/50...).
// Internally everything lives in [0,1], so sigma/255 is what actually gets added.
struct NoiseSpec {
    double sigma = 25.0;
    std::uint64_t seed = 0;
};

// Binary PGM (P5) / PPM (P6), maxval 255. Returns samples mapped by v/255;
// channels = 1 for P5, 3 for P6. Malformed headers, short payloads and
// unsupported maxval raise ParseError naming the byte offset.
ImagePlane load_image(const std::string& path);

// Writes round(clamp(v,0,1)*255) as binary PGM/PPM with round-half-up, so
// save -> load -> save is byte-identical after the first quantization.
void save_image(const ImagePlane& img, const std::string& path);

// The quantization used by save_image, exposed for round-trip reasoning.
std::uint8_t quantize_sample(float v);

// out = img + (sigma/255) * g with g i.i.d. standard normal from xoshiro256++
// (Box-Muller). Output is intentionally not clamped; identical (img, seed)
// pairs produce bit-identical outputs.
ImagePlane add_awgn(const ImagePlane& img, const NoiseSpec& spec);

// 10*log10(1/MSE) on the [0,1] scale, equal to the 255-peak formula on 8-bit
// data. Zero MSE returns the 99 dB sentinel; values are capped there.
double psnr(const ImagePlane& a, const ImagePlane& b);

// Rec. 601 luma: Y = 0.2989 R + 0.5870 G + 0.1140 B. Requires 3 channels.
template <typename T>
Plane<T> luminance(const Plane<T>& img);

extern template Plane<float> luminance<float>(const Plane<float>&);
extern template Plane<double> luminance<double>(const Plane<double>&);

}  // namespace lidia
