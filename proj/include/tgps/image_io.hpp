#pragma once

/// \file image_io.hpp
/// \brief PNG decode/encode, bilinear resize, and the [0,1] <-> [-1,1] range maps.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "tgps/errors.hpp"
#include "tgps/types.hpp"

namespace tgps {

/// Interleaved RGB pixels in [0,1], row-major HWC.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    RgbImage() = default;
    RgbImage(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (bytes.empty() || !png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw FormatError(std::string("undecodable image: ") + (bytes.empty() ? "empty input" : img.message));
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("undecodable image: " + msg);
    }
    RgbImage out(static_cast<int>(img.height), static_cast<int>(img.width));
    for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
    return out;
}

inline std::vector<std::uint8_t> encode_png(const RgbImage& im) {
    std::vector<std::uint8_t> px(im.data.size());
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(im.data[i], 0.0, 1.0) * 255.0));
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(im.width);
    img.height = static_cast<png_uint_32>(im.height);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr))
        throw FormatError(std::string("png encode failed: ") + img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr))
        throw FormatError(std::string("png encode failed: ") + img.message);
    out.resize(size);
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Bilinear resize with half-pixel centres and edge clamping, then v -> 2v - 1.
inline ImageTensor resize_image(const RgbImage& src, int H, int W) {
    if (src.height <= 0 || src.width <= 0) throw FormatError("empty image");
    if (H <= 0 || W <= 0) throw ConfigError("target size must be positive");
    Tensor out({3, H, W});
    const double sy = static_cast<double>(src.height) / H, sx = static_cast<double>(src.width) / W;
    for (int y = 0; y < H; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < W; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                double v = src.at(y0, x0, c);
                if (wy != 0.0 || wx != 0.0)
                    v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                        wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
                out.at(c, y, x) = 2.0 * v - 1.0;
            }
        }
    }
    return ImageTensor(std::move(out));
}

inline ImageTensor resize_image(std::span<const std::uint8_t> bytes, int H, int W) {
    return resize_image(decode_png(bytes), H, W);
}

/// [-1,1] tensor back to [0,1] pixels (values clamped).
inline RgbImage to_rgb(const ImageTensor& img) {
    RgbImage out(img.height(), img.width());
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp((img.data.at(c, y, x) + 1.0) * 0.5, 0.0, 1.0);
    return out;
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) { return encode_png(to_rgb(img)); }

}  // namespace tgps
