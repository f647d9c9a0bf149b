#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace distillfss {

// 8-bit raster as stored on disk: channels is 1 (index/gray), 3 (RGB) or 4.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& raster);

}  // namespace distillfss
