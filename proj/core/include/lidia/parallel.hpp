#pragma once

#include <cstdint>
#include <functional>

namespace lidia {

// Work is split into fixed-size chunks whose boundaries depend only on `n`
// and `chunk`, never on the thread count. Each chunk is processed entirely by
// one worker, so any reduction that (a) accumulates into per-chunk buffers and
// (b) merges them in chunk order afterwards is bit-identical for every value
// of `threads`. This is what makes --threads 1 and --threads 4 agree exactly.
void parallel_chunks(std::int64_t n, std::int64_t chunk, int threads,
                     const std::function<void(int chunk_index, std::int64_t begin, std::int64_t end)>& fn);

inline std::int64_t chunk_count(std::int64_t n, std::int64_t chunk) {
    return (n + chunk - 1) / chunk;
}

// Chunk sizes used across the library. Constants, so results never depend on
// machine topology.
inline constexpr std::int64_t kLocationChunk = 64;   // patch locations
inline constexpr std::int64_t kPixelChunk = 4096;    // raster pixels

}  // namespace lidia
