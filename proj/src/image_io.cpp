#include "fourdgs/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "fourdgs/common.hpp"

namespace fourdgs {

namespace {

void put_u32_be(std::vector<unsigned char>& out, uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

uint32_t get_u32_be(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void write_chunk(std::vector<unsigned char>& out, const char type[4],
                 const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<uint32_t>(payload.size()));
    const size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + payload.size()));
    put_u32_be(out, static_cast<uint32_t>(crc));
}

unsigned char quantize(double x) {
    const double q = std::floor(255.0 * x + 0.5);
    if (q <= 0.0) return 0;
    if (q >= 255.0) return 255;
    return static_cast<unsigned char>(q);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

std::vector<unsigned char> read_file(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (f == nullptr) throw InvalidInput("cannot open file: " + path);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> buf(static_cast<size_t>(size));
    if (size > 0 && std::fread(buf.data(), 1, buf.size(), f) != buf.size()) {
        std::fclose(f);
        throw FormatError("short read: " + path);
    }
    std::fclose(f);
    return buf;
}

const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

}  // namespace

void write_png(const std::string& path, const Image& image) {
    if (image.height <= 0 || image.width <= 0) throw InvalidInput("empty image");
    const size_t stride = static_cast<size_t>(image.width) * 3;
    std::vector<unsigned char> scanlines;
    scanlines.reserve(static_cast<size_t>(image.height) * (stride + 1));
    for (int v = 0; v < image.height; ++v) {
        scanlines.push_back(0);  // filter: none
        for (int u = 0; u < image.width; ++u)
            for (int c = 0; c < 3; ++c) scanlines.push_back(quantize(image.at(v, u, c)));
    }

    uLongf comp_size = compressBound(static_cast<uLong>(scanlines.size()));
    std::vector<unsigned char> compressed(comp_size);
    if (compress2(compressed.data(), &comp_size, scanlines.data(),
                  static_cast<uLong>(scanlines.size()), 9) != Z_OK)
        throw FormatError("zlib compression failed");
    compressed.resize(comp_size);

    std::vector<unsigned char> out(kPngSig, kPngSig + 8);
    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(image.width));
    put_u32_be(ihdr, static_cast<uint32_t>(image.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    write_chunk(out, "IHDR", ihdr);
    write_chunk(out, "IDAT", compressed);
    write_chunk(out, "IEND", {});

    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw InvalidInput("cannot open file for writing: " + path);
    std::fwrite(out.data(), 1, out.size(), f);
    std::fclose(f);
}

Image read_png(const std::string& path) {
    const std::vector<unsigned char> buf = read_file(path);
    if (buf.size() < 8 || std::memcmp(buf.data(), kPngSig, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    uint32_t width = 0, height = 0;
    int channels = 0;
    std::vector<unsigned char> idat;
    size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        const uint32_t len = get_u32_be(&buf[pos]);
        if (pos + 12 + len > buf.size()) throw FormatError("truncated PNG chunk");
        const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
        const unsigned char* payload = &buf[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw FormatError("bad IHDR");
            width = get_u32_be(payload);
            height = get_u32_be(payload + 4);
            const int depth = payload[8];
            const int color = payload[9];
            if (depth != 8 || (color != 2 && color != 6))
                throw FormatError("unsupported PNG format (need 8-bit RGB/RGBA)");
            if (payload[12] != 0) throw FormatError("interlaced PNG unsupported");
            channels = color == 2 ? 3 : 4;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (width == 0 || height == 0 || channels == 0 || idat.empty())
        throw FormatError("PNG missing IHDR/IDAT");

    const size_t stride = static_cast<size_t>(width) * channels;
    std::vector<unsigned char> raw(static_cast<size_t>(height) * (stride + 1));
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_size != raw.size())
        throw FormatError("PNG inflate failed");

    // Undo per-scanline filters in place.
    std::vector<unsigned char> pixels(static_cast<size_t>(height) * stride);
    for (uint32_t v = 0; v < height; ++v) {
        const unsigned char filter = raw[v * (stride + 1)];
        const unsigned char* src = &raw[v * (stride + 1) + 1];
        unsigned char* cur = &pixels[v * stride];
        const unsigned char* up = v > 0 ? &pixels[(v - 1) * stride] : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
            const int b = up != nullptr ? up[i] : 0;
            const int c = (up != nullptr && i >= static_cast<size_t>(channels))
                              ? up[i - channels]
                              : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw FormatError("unknown PNG filter");
            }
            cur[i] = static_cast<unsigned char>(x & 0xff);
        }
    }

    Image img(static_cast<int>(height), static_cast<int>(width));
    for (uint32_t v = 0; v < height; ++v)
        for (uint32_t u = 0; u < width; ++u)
            for (int c = 0; c < 3; ++c)
                img.at(static_cast<int>(v), static_cast<int>(u), c) =
                    pixels[v * stride + u * channels + c] / 255.0;
    return img;
}

void write_raw(const std::string& path, const Image& image) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw InvalidInput("cannot open file for writing: " + path);
    std::fwrite("4DIM", 1, 4, f);
    const uint32_t h = static_cast<uint32_t>(image.height);
    const uint32_t w = static_cast<uint32_t>(image.width);
    std::fwrite(&h, 4, 1, f);
    std::fwrite(&w, 4, 1, f);
    std::vector<float> buf(image.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(image.data[i]);
    std::fwrite(buf.data(), 4, buf.size(), f);
    std::fclose(f);
}

Image read_raw(const std::string& path) {
    const std::vector<unsigned char> buf = read_file(path);
    if (buf.size() < 12 || std::memcmp(buf.data(), "4DIM", 4) != 0)
        throw FormatError("not a raw image file: " + path);
    uint32_t h, w;
    std::memcpy(&h, &buf[4], 4);
    std::memcpy(&w, &buf[8], 4);
    const size_t n = static_cast<size_t>(h) * w * 3;
    if (buf.size() != 12 + 4 * n) throw FormatError("raw image size mismatch: " + path);
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (size_t i = 0; i < n; ++i) {
        float x;
        std::memcpy(&x, &buf[12 + 4 * i], 4);
        img.data[i] = static_cast<double>(x);
    }
    return img;
}

}  // namespace fourdgs
