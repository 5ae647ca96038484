#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace unetsharp {

struct Image8 {
    std::int64_t width = 0;
    std::int64_t height = 0;
    int channels = 1; ///< 1 gray, 3 RGB
    std::vector<std::uint8_t> pixels; ///< row-major, interleaved
};

/// Reads any PNG converted to `channels` (1 or 3). Throws DataError.
Image8 read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Image8& image);

} // namespace unetsharp
