#pragma once

// PNG image IO and frame-directory video handling. Desk-scale media is
// images as PNG and videos as directories of numbered PNG frames, which
// keeps every test bit-exact.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "lynx/common.hpp"

namespace lynx {

struct Image {
    int64_t w = 0, h = 0, c = 0;
    std::vector<uint8_t> px;  // row-major (h, w, c)

    uint8_t at(int64_t y, int64_t x, int64_t ch) const {
        return px[size_t((y * w + x) * c + ch)];
    }
    uint8_t& at(int64_t y, int64_t x, int64_t ch) { return px[size_t((y * w + x) * c + ch)]; }

    static Image filled(int64_t w, int64_t h, int64_t c, uint8_t v) {
        return Image{w, h, c, std::vector<uint8_t>(size_t(w * h * c), v)};
    }
};

inline Image load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw runtime_error("load_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw runtime_error("load_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw runtime_error("load_png: failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);

    const int64_t channels = png_get_channels(png, info);
    Image img{int64_t(w), int64_t(h), channels,
              std::vector<uint8_t>(size_t(w) * h * size_t(channels))};
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.px.data() + size_t(y) * w * size_t(channels);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline void save_png(const std::string& path, const Image& img) {
    int color;
    switch (img.c) {
        case 1: color = PNG_COLOR_TYPE_GRAY; break;
        case 3: color = PNG_COLOR_TYPE_RGB; break;
        case 4: color = PNG_COLOR_TYPE_RGBA; break;
        default:
            throw runtime_error("save_png: unsupported channel count " + std::to_string(img.c));
    }
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw runtime_error("save_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw runtime_error("save_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw runtime_error("save_png: failed to encode " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_const_bytep> rows(size_t(img.h));
    for (int64_t y = 0; y < img.h; ++y)
        rows[size_t(y)] = img.px.data() + size_t(y * img.w * img.c);
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// A media path is either a single PNG (one frame) or a directory whose *.png
// files, sorted by name, are the frames.
inline std::vector<std::string> list_frame_paths(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::exists(path)) throw runtime_error("media: path does not exist: " + path);
    std::vector<std::string> out;
    if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".png")
                out.push_back(e.path().string());
        std::sort(out.begin(), out.end());
        if (out.empty()) throw runtime_error("media: no PNG frames in " + path);
    } else {
        out.push_back(path);
    }
    return out;
}

inline std::vector<Image> load_frames(const std::string& path) {
    std::vector<Image> frames;
    for (const auto& p : list_frame_paths(path)) frames.push_back(load_png(p));
    return frames;
}

}  // namespace lynx
