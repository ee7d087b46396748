#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace samseg {

using Index = Eigen::Index;

/// Row-major dense 2-D grid. Every raster in the project (masks, logit maps,
/// image channels, distance maps) is one of these.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary mask, 0 = background, 1 = foreground.
using Mask = Grid<std::uint8_t>;
/// Real-valued per-pixel logits.
using Logits = Grid<double>;

/// 8-bit RGB image stored planar (one grid per channel).
struct RgbImage {
    std::array<Grid<std::uint8_t>, 3> channels;

    RgbImage() = default;
    RgbImage(Index height, Index width) {
        for (auto& c : channels) c = Grid<std::uint8_t>::Zero(height, width);
    }
    Index height() const { return channels[0].rows(); }
    Index width() const { return channels[0].cols(); }
    bool operator==(const RgbImage& other) const {
        for (int c = 0; c < 3; ++c) {
            if (channels[c].rows() != other.channels[c].rows() ||
                channels[c].cols() != other.channels[c].cols() ||
                !(channels[c] == other.channels[c]).all())
                return false;
        }
        return true;
    }
};

// Error taxonomy shared by all modules.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct CoordinateError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct EmptyRegionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
    }
}

/// Bilinear resampling with half-pixel centers (source coordinate
/// (dst + 0.5) * scale - 0.5, clamped at the border). Resampling to the
/// source size is the identity.
template <typename Derived>
Grid<double> resize_bilinear(const Eigen::ArrayBase<Derived>& src, Index out_rows, Index out_cols) {
    const Index in_rows = src.rows();
    const Index in_cols = src.cols();
    if (in_rows <= 0 || in_cols <= 0 || out_rows <= 0 || out_cols <= 0)
        throw DimensionError("resize_bilinear: empty grid");
    Grid<double> out(out_rows, out_cols);
    const double sy = static_cast<double>(in_rows) / static_cast<double>(out_rows);
    const double sx = static_cast<double>(in_cols) / static_cast<double>(out_cols);

    auto axis = [](Index dst, double scale, Index n, Index& i0, Index& i1, double& w1) {
        double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        i0 = static_cast<Index>(std::floor(s));
        if (i0 > n - 1) i0 = n - 1;
        i1 = i0 + 1 < n ? i0 + 1 : n - 1;
        w1 = s - static_cast<double>(i0);
        if (w1 < 0.0) w1 = 0.0;
    };

    for (Index r = 0; r < out_rows; ++r) {
        Index r0, r1;
        double wr;
        axis(r, sy, in_rows, r0, r1, wr);
        for (Index c = 0; c < out_cols; ++c) {
            Index c0, c1;
            double wc;
            axis(c, sx, in_cols, c0, c1, wc);
            const double top = (1.0 - wc) * static_cast<double>(src(r0, c0)) + wc * static_cast<double>(src(r0, c1));
            const double bot = (1.0 - wc) * static_cast<double>(src(r1, c0)) + wc * static_cast<double>(src(r1, c1));
            out(r, c) = (1.0 - wr) * top + wr * bot;
        }
    }
    return out;
}

/// Nearest-neighbour resampling (pixel-center sampling).
template <typename Scalar>
Grid<Scalar> resize_nearest(const Grid<Scalar>& src, Index out_rows, Index out_cols) {
    Grid<Scalar> out(out_rows, out_cols);
    for (Index r = 0; r < out_rows; ++r) {
        const Index sr = std::min<Index>(src.rows() - 1, (2 * r + 1) * src.rows() / (2 * out_rows));
        for (Index c = 0; c < out_cols; ++c) {
            const Index sc = std::min<Index>(src.cols() - 1, (2 * c + 1) * src.cols() / (2 * out_cols));
            out(r, c) = src(sr, sc);
        }
    }
    return out;
}

}  // namespace samseg
