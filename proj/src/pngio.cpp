#include "pano/pngio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "pano/errors.hpp"

namespace pano {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_impl(const std::string& path, int h, int w, int channels,
                    const std::vector<unsigned char>& bytes) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failure writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (int i = 0; i < h; ++i)
        rows[i] = const_cast<png_bytep>(&bytes[static_cast<std::size_t>(i) * w * channels]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void read_png_impl(const std::string& path, int& h, int& w, int& channels,
                   std::vector<unsigned char>& bytes) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng failure reading " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    channels = static_cast<int>(png_get_channels(png, info));
    bytes.assign(static_cast<std::size_t>(h) * w * channels, 0);
    std::vector<png_bytep> rows(h);
    for (int i = 0; i < h; ++i) rows[i] = &bytes[static_cast<std::size_t>(i) * w * channels];
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
}

}  // namespace

void write_rgb_png(const std::string& path, const Tensor& pixels) {
    if (!pixels.defined() || pixels.rank() != 3 || pixels.dim(0) != 3)
        throw DimensionError("write_rgb_png: pixels must be [3,H,W]");
    const int H = pixels.dim(1), W = pixels.dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    auto d = pixels.data();
    std::vector<unsigned char> bytes(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(d[c * plane + p], 0.0f, 1.0f);
            bytes[p * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
    write_png_impl(path, H, W, 3, bytes);
}

Tensor read_rgb_png(const std::string& path) {
    int h, w, channels;
    std::vector<unsigned char> bytes;
    read_png_impl(path, h, w, channels, bytes);
    if (channels != 3 && channels != 1) throw DataError(path + ": expected RGB or gray PNG");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<float> data(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const unsigned char b = channels == 3 ? bytes[p * 3 + c] : bytes[p];
            data[c * plane + p] = static_cast<float>(b) / 255.0f;
        }
    return Tensor::from_data({3, h, w}, std::move(data));
}

void write_gray_png(const std::string& path, const LabelMap& labels) {
    std::vector<unsigned char> bytes(labels.ids.begin(), labels.ids.end());
    write_png_impl(path, labels.h, labels.w, 1, bytes);
}

LabelMap read_gray_png(const std::string& path) {
    int h, w, channels;
    std::vector<unsigned char> bytes;
    read_png_impl(path, h, w, channels, bytes);
    if (channels != 1) throw DataError(path + ": expected single-channel PNG");
    LabelMap out;
    out.h = h;
    out.w = w;
    out.ids.assign(bytes.begin(), bytes.end());
    return out;
}

void write_heatmap_png(const std::string& path, const Tensor& values) {
    if (!values.defined() || values.rank() != 2)
        throw DimensionError("write_heatmap_png: rank-2 tensor required");
    auto d = values.data();
    float lo = d[0], hi = d[0];
    for (float v : d) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float span = hi - lo > 1e-12f ? hi - lo : 1.0f;
    LabelMap gray;
    gray.h = values.dim(0);
    gray.w = values.dim(1);
    gray.ids.resize(values.numel());
    for (std::size_t i = 0; i < values.numel(); ++i)
        gray.ids[i] = static_cast<std::uint8_t>(std::lround((d[i] - lo) / span * 255.0f));
    write_gray_png(path, gray);
}

}  // namespace pano
