#include "kpdet/overlay.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace kpdet::overlay {

namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>(v & 0xff));
}

void put_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + data.size()));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

} // namespace

void write_png(const std::string& path, const std::vector<unsigned char>& pixels,
               std::size_t width, std::size_t height, std::size_t channels) {
    if (channels != 1 && channels != 3) throw ParameterError("png: channels must be 1 or 3");
    if (pixels.size() != width * height * channels) {
        throw DimensionError("png: pixel buffer size mismatch");
    }
    std::vector<unsigned char> raw;
    raw.reserve(height * (1 + width * channels));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * width * channels),
                   pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * width * channels));
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK) {
        throw IoError("png: zlib compression failed");
    }
    comp.resize(comp_size);

    std::vector<unsigned char> out;
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.insert(out.end(), sig, sig + 8);
    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);                // gray / rgb
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write png: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("png write failed: " + path);
}

namespace {

void draw_dot(std::vector<unsigned char>& rgb, std::size_t w, std::size_t h, double nx,
              double ny, unsigned char r, unsigned char g, unsigned char b) {
    const long cx = std::lround(nx * static_cast<double>(w) - 0.5);
    const long cy = std::lround(ny * static_cast<double>(h) - 0.5);
    for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
            const long x = cx + dx, y = cy + dy;
            if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) {
                continue;
            }
            const std::size_t at = (static_cast<std::size_t>(y) * w +
                                    static_cast<std::size_t>(x)) * 3;
            rgb[at] = r;
            rgb[at + 1] = g;
            rgb[at + 2] = b;
        }
    }
}

} // namespace

void write_overlay(const std::string& path, const Tensor& image,
                   const std::vector<Keypoint>& gts, const std::vector<dec::Detection>& dets) {
    if (image.rank() != 3) throw DimensionError("overlay: image must be [c,h,w]");
    const std::size_t h = image.extent(1), w = image.extent(2);
    std::vector<unsigned char> rgb(w * h * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double v = std::min(1.0, std::max(0.0, image.at(0, y, x)));
            const auto g8 = static_cast<unsigned char>(std::lround(v * 255.0));
            const std::size_t at = (y * w + x) * 3;
            rgb[at] = rgb[at + 1] = rgb[at + 2] = g8;
        }
    }
    for (const Keypoint& gt : gts) draw_dot(rgb, w, h, gt.x, gt.y, 0, 200, 0);
    for (const dec::Detection& d : dets) draw_dot(rgb, w, h, d.x, d.y, 220, 0, 0);
    write_png(path, rgb, w, h, 3);
}

} // namespace kpdet::overlay
