#pragma once

#include "samseg/grid.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace samseg {

/// Row-major run-length encoding of a binary mask.
///
/// `pairs` is a flat sequence v0, n0, v1, n1, ... where each v is 0 or 1,
/// each n >= 1, consecutive values alternate, and the runs sum to
/// height * width. An all-zero 2x3 mask encodes as [0, 6].
struct RleMask {
    Index height = 0;
    Index width = 0;
    std::vector<std::uint32_t> pairs;

    bool operator==(const RleMask&) const = default;
};

RleMask rle_encode(const Mask& mask);
/// Throws ArgumentError on malformed input.
Mask rle_decode(const RleMask& rle);

nlohmann::json to_json(const RleMask& rle);
RleMask rle_from_json(const nlohmann::json& j);

}  // namespace samseg
