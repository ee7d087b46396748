#pragma once

#include "samseg/grid.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace samseg {

struct ImageIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

/// 8-bit single-channel raster (any PNG is converted to gray).
Grid<std::uint8_t> read_png_gray(const std::filesystem::path& path);
Grid<std::uint8_t> decode_png_gray(std::span<const std::uint8_t> bytes);
/// Any PNG is converted to 8-bit RGB.
RgbImage read_png_rgb(const std::filesystem::path& path);
RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const Grid<std::uint8_t>& gray);
void write_png(const std::filesystem::path& path, const RgbImage& rgb);
Bytes encode_png(const Grid<std::uint8_t>& gray);
Bytes encode_png(const RgbImage& rgb);

/// Binary mask <-> 0/255 gray. `mask_from_gray` throws ImageIoError on any
/// value other than 0 or 255.
Grid<std::uint8_t> mask_to_gray(const Mask& mask);
Mask mask_from_gray(const Grid<std::uint8_t>& gray);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Mask read_mask_png(const std::filesystem::path& path);

}  // namespace samseg
