#pragma once

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace vardeblur {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
    FilePtr f(std::fopen(p.string().c_str(), mode));
    if (!f) throw IoError("cannot open " + p.string());
    return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PNG (8-bit, gray or RGB; values mapped linearly to [0,1])

inline Image read_png(const std::filesystem::path& path) {
    auto file = detail::open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG channel layout in " + path.string());
    }
    buf.resize(static_cast<std::size_t>(w) * h * channels);
    rows.resize(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(w, h, channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(x, y, c) = buf[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0;
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels() != 1 && img.channels() != 3) throw IoError("write_png: only 1 or 3 channels supported");
    const int w = img.width(), h = img.height(), channels = img.channels();
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
                buf[(static_cast<std::size_t>(y) * w + x) * channels + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }

    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * channels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, w, h, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Middlebury .flo: "PIEH", int32 width, int32 height, interleaved float32 u,v.

inline constexpr char kFloMagic[4] = {'P', 'I', 'E', 'H'};

inline void write_flo(const std::filesystem::path& path, const FlowField& flow) {
    auto f = detail::open_file(path, "wb");
    const std::int32_t w = flow.width, h = flow.height;
    std::vector<float> data(static_cast<std::size_t>(w) * h * 2);
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        data[2 * i] = static_cast<float>(flow.u[i]);
        data[2 * i + 1] = static_cast<float>(flow.v[i]);
    }
    bool ok = std::fwrite(kFloMagic, 1, 4, f.get()) == 4;
    ok = ok && std::fwrite(&w, 4, 1, f.get()) == 1 && std::fwrite(&h, 4, 1, f.get()) == 1;
    ok = ok && std::fwrite(data.data(), sizeof(float), data.size(), f.get()) == data.size();
    if (!ok) throw IoError("short write to " + path.string());
}

inline FlowField read_flo(const std::filesystem::path& path) {
    auto f = detail::open_file(path, "rb");
    char magic[4];
    std::int32_t w = 0, h = 0;
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kFloMagic, 4) != 0)
        throw IoError("bad .flo magic in " + path.string());
    if (std::fread(&w, 4, 1, f.get()) != 1 || std::fread(&h, 4, 1, f.get()) != 1 || w <= 0 || h <= 0 ||
        w > (1 << 16) || h > (1 << 16))
        throw IoError("bad .flo header in " + path.string());
    std::vector<float> data(static_cast<std::size_t>(w) * h * 2);
    if (std::fread(data.data(), sizeof(float), data.size(), f.get()) != data.size())
        throw IoError("truncated .flo payload in " + path.string());
    FlowField flow(w, h);
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        flow.u[i] = data[2 * i];
        flow.v[i] = data[2 * i + 1];
    }
    return flow;
}

// ---------------------------------------------------------------------------
// Single-channel little-endian PFM ("Pf", negative scale, rows bottom-to-top).

inline void write_pfm(const std::filesystem::path& path, const SigmaMap& map) {
    auto f = detail::open_file(path, "wb");
    const std::string header = "Pf\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n-1.0\n";
    bool ok = std::fwrite(header.data(), 1, header.size(), f.get()) == header.size();
    std::vector<float> row(map.width);
    for (int y = map.height - 1; y >= 0 && ok; --y) {
        for (int x = 0; x < map.width; ++x) row[x] = static_cast<float>(map.sigma[map.index(x, y)]);
        ok = std::fwrite(row.data(), sizeof(float), row.size(), f.get()) == row.size();
    }
    if (!ok) throw IoError("short write to " + path.string());
}

inline SigmaMap read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0) throw IoError("unsupported PFM header in " + path.string());
    in.get();  // single whitespace after the scale
    SigmaMap map(w, h);
    std::vector<float> row(w);
    for (int y = h - 1; y >= 0; --y) {
        if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float))))
            throw IoError("truncated PFM payload in " + path.string());
        for (int x = 0; x < w; ++x) map.sigma[map.index(x, y)] = std::max(0.0, static_cast<double>(row[x]));
    }
    return map;
}

}  // namespace vardeblur
