#pragma once

#include "samseg/grid.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace samseg {

enum class Polarity : std::uint8_t { negative = 0, positive = 1 };

std::string to_string(Polarity p);
Polarity polarity_from_string(const std::string& s);

/// A point prompt. Coordinates are pixel indices in the patch the click
/// belongs to; ordinal is 1-based within its session.
struct Click {
    Index row = 0;
    Index col = 0;
    Polarity polarity = Polarity::positive;
    int ordinal = 1;

    bool operator==(const Click&) const = default;
};

struct ErrorRegions {
    Mask false_negative;
    Mask false_positive;
};

/// Evolving record of one interactive session.
///
/// `prev_logits` holds whatever the segmenter asked to be fed back as the
/// mask prompt on the next click (for the SAM-style model this is the
/// low-resolution decoder output). `prev_prediction` is the binarized mask at
/// patch resolution.
struct InteractionState {
    std::string patch_id;
    std::vector<Click> clicks;
    std::optional<Mask> prev_prediction;
    std::optional<Logits> prev_logits;

    std::size_t click_budget_used() const { return clicks.size(); }
    bool has_prediction() const { return prev_prediction.has_value(); }

    /// Appends a click with the next ordinal and returns it.
    Click& push_click(Index row, Index col, Polarity polarity);
    /// Throws ArgumentError when an invariant is broken.
    void check_invariants() const;
};

bool is_binary(const Mask& m);
std::int64_t count(const Mask& m);
double tumor_fraction(const Mask& m);

/// |a AND b| / |a OR b|; 1.0 when both are empty.
double iou(const Mask& a, const Mask& b);

ErrorRegions error_regions(const Mask& pred, const Mask& gt);

/// pixel = 1 iff logit > threshold (strict).
template <typename Derived>
Mask binarize(const Eigen::ArrayBase<Derived>& logits, double threshold = 0.0) {
    return (logits.template cast<double>() > threshold).template cast<std::uint8_t>();
}

/// Checks that (row, col) lies inside a rows x cols raster.
void require_in_bounds(Index row, Index col, Index rows, Index cols);

// JSON forms. Masks inside JSON use the run-length encoding from rle.hpp.
nlohmann::json to_json(const Click& c);
Click click_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InteractionState& s);
InteractionState interaction_state_from_json(const nlohmann::json& j);

/// FNV-1a over shape and bytes; stable across platforms.
std::uint64_t checksum(const Mask& m);
std::uint64_t checksum(const Logits& l);

}  // namespace samseg
