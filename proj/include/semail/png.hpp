#pragma once

#include <array>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace semail {

// Minimal 8-bit RGB PNG writer (one IDAT chunk, filter 0 rows).
inline void write_png(const std::string& path, const std::uint8_t* rgb, int width, int height) {
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0); // filter: none
        const std::uint8_t* row = rgb + static_cast<std::size_t>(y) * width * 3;
        raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png deflate failed");
    comp.resize(comp_len);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write png: " + path);
    const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.write(reinterpret_cast<const char*>(sig), 8);

    auto be32 = [](std::uint32_t v) {
        return std::array<std::uint8_t, 4>{static_cast<std::uint8_t>(v >> 24),
                                           static_cast<std::uint8_t>(v >> 16),
                                           static_cast<std::uint8_t>(v >> 8),
                                           static_cast<std::uint8_t>(v)};
    };
    auto chunk = [&](const char* type, const std::uint8_t* data, std::size_t n) {
        const auto len = be32(static_cast<std::uint32_t>(n));
        out.write(reinterpret_cast<const char*>(len.data()), 4);
        std::vector<std::uint8_t> body(4 + n);
        std::copy(type, type + 4, body.begin());
        if (n) std::copy(data, data + n, body.begin() + 4);
        out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
        const std::uint32_t c =
            static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size())));
        const auto cb = be32(c);
        out.write(reinterpret_cast<const char*>(cb.data()), 4);
    };

    std::uint8_t ihdr[13];
    const auto w = be32(static_cast<std::uint32_t>(width));
    const auto h = be32(static_cast<std::uint32_t>(height));
    std::copy(w.begin(), w.end(), ihdr);
    std::copy(h.begin(), h.end(), ihdr + 4);
    ihdr[8] = 8;  // bit depth
    ihdr[9] = 2;  // color type RGB
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    chunk("IHDR", ihdr, 13);
    chunk("IDAT", comp.data(), comp.size());
    chunk("IEND", nullptr, 0);
}

} // namespace semail
