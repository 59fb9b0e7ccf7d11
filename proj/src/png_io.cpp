#include "sgdfuse/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

namespace {

struct MemReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;
};

void mem_read(png_structp png, png_bytep out, png_size_t n) {
    auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
    if (r->pos + n > r->size) png_error(png, "png: truncated stream");
    std::memcpy(out, r->data + r->pos, n);
    r->pos += n;
}

void mem_write(png_structp png, png_bytep data, png_size_t n) {
    auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    v->insert(v->end(), data, data + n);
}

void mem_flush(png_structp) {}

Image decode_common(png_structp png, png_infop info) {
    png_read_info(png, info);
    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
    if (bit_depth == 16) throw IoError("16-bit PNG not supported");

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) throw IoError("unsupported PNG channel count");

    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * channels);
    Tensor t(std::vector<int>{channels, static_cast<int>(h), static_cast<int>(w)});
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                t[c * hw + static_cast<std::int64_t>(y) * w + x] =
                    row[x * channels + c] / 255.0;
    }
    png_read_end(png, nullptr);
    return Image(std::move(t), ValueRange::Unit);
}

} // namespace

Image read_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open '" + path.string() + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("failed to decode '" + path.string() + "'");
    }
    png_init_io(png, fp);
    Image img = decode_common(png, info);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
    MemReader reader{bytes.data(), bytes.size()};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode in-memory PNG");
    }
    png_set_read_fn(png, &reader, mem_read);
    Image img = decode_common(png, info);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

namespace {

void encode_common(png_structp png, png_infop info, const Image& img) {
    int c = img.channels(), h = img.height(), w = img.width();
    png_set_IHDR(png, info, w, h, 8,
                 c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * c);
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const Image unit = (img.range == ValueRange::Unit) ? img : normalize(img, ValueRange::Unit);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) {
                double v = unit.data[ci * hw + static_cast<std::int64_t>(y) * w + x];
                int byte = static_cast<int>(std::lround(v * 255.0));
                row[static_cast<std::size_t>(x) * c + ci] =
                    static_cast<std::uint8_t>(byte < 0 ? 0 : (byte > 255 ? 255 : byte));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
}

} // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write '" + path.string() + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("failed to encode '" + path.string() + "'");
    }
    png_init_io(png, fp);
    encode_common(png, info, img);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode in-memory PNG");
    }
    png_set_write_fn(png, &out, mem_write, mem_flush);
    encode_common(png, info, img);
    png_destroy_write_struct(&png, &info);
    return out;
}

void png_size(const std::filesystem::path& path, int& height, int& width) {
    Image img = read_png(path);
    height = img.height();
    width = img.width();
}

} // namespace sgdfuse
