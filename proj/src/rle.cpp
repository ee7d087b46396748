#include "samseg/rle.hpp"

#include <limits>

namespace samseg {

RleMask rle_encode(const Mask& mask) {
    RleMask rle;
    rle.height = mask.rows();
    rle.width = mask.cols();
    const auto* p = mask.data();
    const Index n = mask.size();
    Index i = 0;
    while (i < n) {
        const std::uint8_t v = p[i] != 0 ? 1 : 0;
        Index j = i + 1;
        while (j < n && (p[j] != 0 ? 1 : 0) == v) ++j;
        rle.pairs.push_back(v);
        rle.pairs.push_back(static_cast<std::uint32_t>(j - i));
        i = j;
    }
    return rle;
}

Mask rle_decode(const RleMask& rle) {
    if (rle.height <= 0 || rle.width <= 0) throw ArgumentError("rle: non-positive shape");
    if (rle.pairs.size() % 2 != 0) throw ArgumentError("rle: odd number of entries");
    Mask m(rle.height, rle.width);
    auto* out = m.data();
    const Index n = m.size();
    Index pos = 0;
    int prev = -1;
    for (std::size_t k = 0; k < rle.pairs.size(); k += 2) {
        const auto v = rle.pairs[k];
        const auto len = static_cast<Index>(rle.pairs[k + 1]);
        if (v > 1) throw ArgumentError("rle: value must be 0 or 1");
        if (len < 1) throw ArgumentError("rle: run length must be positive");
        if (static_cast<int>(v) == prev) throw ArgumentError("rle: consecutive runs must alternate");
        if (pos + len > n) throw ArgumentError("rle: runs exceed mask size");
        std::fill(out + pos, out + pos + len, static_cast<std::uint8_t>(v));
        pos += len;
        prev = static_cast<int>(v);
    }
    if (pos != n) throw ArgumentError("rle: runs do not cover the mask");
    return m;
}

nlohmann::json to_json(const RleMask& rle) {
    return {{"height", rle.height}, {"width", rle.width}, {"rle", rle.pairs}};
}

RleMask rle_from_json(const nlohmann::json& j) {
    RleMask r;
    r.height = j.at("height").get<Index>();
    r.width = j.at("width").get<Index>();
    r.pairs = j.at("rle").get<std::vector<std::uint32_t>>();
    return r;
}

}  // namespace samseg
