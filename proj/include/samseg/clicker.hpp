#pragma once

#include "samseg/core.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

namespace samseg {

enum class ClickMode { eval_deterministic, train_stochastic };
enum class FirstClickRule { center_of_gt, random_in_gt };

struct ClickPolicy {
    ClickMode mode = ClickMode::eval_deterministic;
    std::uint64_t rng_seed = 0;  // train_stochastic only
    FirstClickRule first_click_rule = FirstClickRule::center_of_gt;

    static ClickPolicy eval() { return {}; }
    static ClickPolicy train(std::uint64_t seed) {
        return {ClickMode::train_stochastic, seed, FirstClickRule::random_in_gt};
    }
};

/// Exact Euclidean distance from every region pixel to the nearest pixel
/// outside the region; pixels beyond the grid border count as outside.
/// Zero outside the region. Throws EmptyRegionError on an empty region.
Grid<double> distance_to_complement(const Mask& region);

/// Squared variant of distance_to_complement; values are exact integers.
Grid<double> squared_distance_to_complement(const Mask& region);

/// Largest 4-connected component. Ties go to the component whose first
/// pixel comes first in row-major scan order. Empty in, empty out.
Mask largest_connected_component(const Mask& region);

/// Interior-most pixel of a nonempty region: argmax of the distance map,
/// ties broken by lowest row then lowest column.
std::pair<Index, Index> interior_point(const Mask& region);

/// Generates the next click for `state` against `gt`.
///
/// Returns std::nullopt when a prediction exists and matches gt exactly (the
/// caller must stop). Throws ArgumentError when the first click is requested
/// on an empty ground truth.
std::optional<Click> next_click(const InteractionState& state, const Mask& gt, const ClickPolicy& policy,
                                std::mt19937_64& rng);

/// Stateless convenience overload; train mode seeds from
/// (policy.rng_seed, clicks already placed).
std::optional<Click> next_click(const InteractionState& state, const Mask& gt, const ClickPolicy& policy);

/// One line of a click trajectory file.
/// `iou` is absent when the session has no ground truth.
struct TrajectoryEntry {
    Click click;
    std::optional<double> iou;
};

nlohmann::json to_json(const TrajectoryEntry& e);
TrajectoryEntry trajectory_entry_from_json(const nlohmann::json& j);
void write_trajectory(std::ostream& os, const std::vector<TrajectoryEntry>& entries);
std::vector<TrajectoryEntry> read_trajectory(std::istream& is);

}  // namespace samseg
