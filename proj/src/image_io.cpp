#include "samseg/image_io.hpp"

#include <png.h>

#include <cstring>

namespace samseg {

namespace {

struct PngImage {
    png_image image{};
    PngImage() {
        std::memset(&image, 0, sizeof(image));
        image.version = PNG_IMAGE_VERSION;
    }
    ~PngImage() { png_image_free(&image); }
    PngImage(const PngImage&) = delete;
    PngImage& operator=(const PngImage&) = delete;
};

std::vector<std::uint8_t> finish_read(PngImage& png, std::uint32_t format, const std::string& what) {
    png.image.format = format;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png.image));
    if (!png_image_finish_read(&png.image, nullptr, buf.data(), 0, nullptr))
        throw ImageIoError(what + ": " + png.image.message);
    return buf;
}

Grid<std::uint8_t> gray_from_buffer(const std::vector<std::uint8_t>& buf, Index h, Index w) {
    Grid<std::uint8_t> g(h, w);
    std::memcpy(g.data(), buf.data(), static_cast<std::size_t>(h * w));
    return g;
}

RgbImage rgb_from_buffer(const std::vector<std::uint8_t>& buf, Index h, Index w) {
    RgbImage img(h, w);
    for (Index i = 0; i < h * w; ++i)
        for (int c = 0; c < 3; ++c) img.channels[c].data()[i] = buf[static_cast<std::size_t>(3 * i + c)];
    return img;
}

std::vector<std::uint8_t> interleave(const RgbImage& rgb) {
    const Index n = rgb.height() * rgb.width();
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(3 * n));
    for (Index i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) buf[static_cast<std::size_t>(3 * i + c)] = rgb.channels[c].data()[i];
    return buf;
}

void write_file(const std::filesystem::path& path, const void* data, Index h, Index w, std::uint32_t format) {
    PngImage png;
    png.image.width = static_cast<png_uint_32>(w);
    png.image.height = static_cast<png_uint_32>(h);
    png.image.format = format;
    if (!png_image_write_to_file(&png.image, path.c_str(), 0, data, 0, nullptr))
        throw ImageIoError("write " + path.string() + ": " + png.image.message);
}

Bytes write_memory(const void* data, Index h, Index w, std::uint32_t format) {
    PngImage png;
    png.image.width = static_cast<png_uint_32>(w);
    png.image.height = static_cast<png_uint_32>(h);
    png.image.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, data, 0, nullptr))
        throw ImageIoError(std::string("encode png: ") + png.image.message);
    Bytes out(size);
    if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, data, 0, nullptr))
        throw ImageIoError(std::string("encode png: ") + png.image.message);
    out.resize(size);
    return out;
}

}  // namespace

Grid<std::uint8_t> read_png_gray(const std::filesystem::path& path) {
    PngImage png;
    if (!png_image_begin_read_from_file(&png.image, path.c_str()))
        throw ImageIoError("read " + path.string() + ": " + png.image.message);
    const auto buf = finish_read(png, PNG_FORMAT_GRAY, "read " + path.string());
    return gray_from_buffer(buf, png.image.height, png.image.width);
}

Grid<std::uint8_t> decode_png_gray(std::span<const std::uint8_t> bytes) {
    PngImage png;
    if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
        throw ImageIoError(std::string("decode png: ") + png.image.message);
    const auto buf = finish_read(png, PNG_FORMAT_GRAY, "decode png");
    return gray_from_buffer(buf, png.image.height, png.image.width);
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
    PngImage png;
    if (!png_image_begin_read_from_file(&png.image, path.c_str()))
        throw ImageIoError("read " + path.string() + ": " + png.image.message);
    const auto buf = finish_read(png, PNG_FORMAT_RGB, "read " + path.string());
    return rgb_from_buffer(buf, png.image.height, png.image.width);
}

RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes) {
    PngImage png;
    if (bytes.empty() || !png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
        throw ImageIoError(std::string("decode png: ") + (bytes.empty() ? "empty input" : png.image.message));
    const auto buf = finish_read(png, PNG_FORMAT_RGB, "decode png");
    return rgb_from_buffer(buf, png.image.height, png.image.width);
}

void write_png(const std::filesystem::path& path, const Grid<std::uint8_t>& gray) {
    write_file(path, gray.data(), gray.rows(), gray.cols(), PNG_FORMAT_GRAY);
}

void write_png(const std::filesystem::path& path, const RgbImage& rgb) {
    const auto buf = interleave(rgb);
    write_file(path, buf.data(), rgb.height(), rgb.width(), PNG_FORMAT_RGB);
}

Bytes encode_png(const Grid<std::uint8_t>& gray) {
    return write_memory(gray.data(), gray.rows(), gray.cols(), PNG_FORMAT_GRAY);
}

Bytes encode_png(const RgbImage& rgb) {
    const auto buf = interleave(rgb);
    return write_memory(buf.data(), rgb.height(), rgb.width(), PNG_FORMAT_RGB);
}

Grid<std::uint8_t> mask_to_gray(const Mask& mask) { return (mask != 0).select(Grid<std::uint8_t>::Constant(mask.rows(), mask.cols(), 255), 0); }

Mask mask_from_gray(const Grid<std::uint8_t>& gray) {
    for (Index i = 0; i < gray.size(); ++i) {
        const auto v = gray.data()[i];
        if (v != 0 && v != 255)
            throw ImageIoError("mask value " + std::to_string(v) + " at pixel " + std::to_string(i) +
                               " is not binary (expected 0 or 255)");
    }
    return (gray != 0).cast<std::uint8_t>();
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) { write_png(path, mask_to_gray(mask)); }

Mask read_mask_png(const std::filesystem::path& path) { return mask_from_gray(read_png_gray(path)); }

}  // namespace samseg
