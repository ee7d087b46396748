#include "samseg/clicker.hpp"

#include <istream>
#include <limits>
#include <ostream>
#include <string>

namespace samseg {

namespace {

constexpr double kInf = 1e20;

// One-dimensional squared distance transform of a sampled function
// (lower envelope of parabolas). Entries >= kInf are treated as +infinity
// and never enter the envelope; at least one entry must be finite.
void distance_1d(const double* f, double* d, Index n, std::vector<Index>& v, std::vector<double>& z) {
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    auto intersect = [f](Index q, Index p) {
        return ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) /
               (2.0 * static_cast<double>(q - p));
    };
    std::ptrdiff_t k = -1;
    for (Index q = 0; q < n; ++q) {
        if (f[q] >= kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s = intersect(q, v[static_cast<std::size_t>(k)]);
        while (s <= z[static_cast<std::size_t>(k)]) {
            --k;
            s = intersect(q, v[static_cast<std::size_t>(k)]);
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    k = 0;
    for (Index q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
        const Index p = v[static_cast<std::size_t>(k)];
        d[q] = static_cast<double>((q - p) * (q - p)) + f[p];
    }
}

Index uniform_index(std::mt19937_64& rng, Index n) {
    std::uniform_int_distribution<Index> dist(0, n - 1);
    return dist(rng);
}

std::pair<Index, Index> sample_uniform(const Mask& region, std::mt19937_64& rng) {
    const auto total = count(region);
    if (total == 0) throw EmptyRegionError("sample_uniform: empty region");
    Index target = uniform_index(rng, static_cast<Index>(total));
    const auto* p = region.data();
    for (Index i = 0; i < region.size(); ++i) {
        if (p[i] && target-- == 0) return {i / region.cols(), i % region.cols()};
    }
    throw EmptyRegionError("sample_uniform: unreachable");
}

}  // namespace

Grid<double> squared_distance_to_complement(const Mask& region) {
    if (count(region) == 0) throw EmptyRegionError("distance_to_complement: empty region");
    const Index rows = region.rows() + 2;
    const Index cols = region.cols() + 2;
    Grid<double> f = Grid<double>::Zero(rows, cols);
    for (Index r = 0; r < region.rows(); ++r)
        for (Index c = 0; c < region.cols(); ++c)
            if (region(r, c)) f(r + 1, c + 1) = kInf;

    std::vector<Index> v;
    std::vector<double> z;
    std::vector<double> in(static_cast<std::size_t>(std::max(rows, cols)));
    std::vector<double> out(in.size());
    for (Index c = 0; c < cols; ++c) {
        for (Index r = 0; r < rows; ++r) in[static_cast<std::size_t>(r)] = f(r, c);
        distance_1d(in.data(), out.data(), rows, v, z);
        for (Index r = 0; r < rows; ++r) f(r, c) = out[static_cast<std::size_t>(r)];
    }
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) in[static_cast<std::size_t>(c)] = f(r, c);
        distance_1d(in.data(), out.data(), cols, v, z);
        for (Index c = 0; c < cols; ++c) f(r, c) = out[static_cast<std::size_t>(c)];
    }
    Grid<double> d = f.block(1, 1, region.rows(), region.cols());
    d = (region != 0).select(d, 0.0);
    return d;
}

Grid<double> distance_to_complement(const Mask& region) { return squared_distance_to_complement(region).sqrt(); }

Mask largest_connected_component(const Mask& region) {
    const Index rows = region.rows();
    const Index cols = region.cols();
    Grid<std::int32_t> label = Grid<std::int32_t>::Zero(rows, cols);
    std::vector<Index> stack;
    std::int32_t next = 0;
    std::int32_t best = 0;
    Index best_size = 0;
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
            if (!region(r, c) || label(r, c)) continue;
            ++next;
            Index size = 0;
            stack.assign(1, r * cols + c);
            label(r, c) = next;
            while (!stack.empty()) {
                const Index i = stack.back();
                stack.pop_back();
                ++size;
                const Index y = i / cols;
                const Index x = i % cols;
                const Index ny[4] = {y - 1, y + 1, y, y};
                const Index nx[4] = {x, x, x - 1, x + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || nx[k] < 0 || ny[k] >= rows || nx[k] >= cols) continue;
                    if (!region(ny[k], nx[k]) || label(ny[k], nx[k])) continue;
                    label(ny[k], nx[k]) = next;
                    stack.push_back(ny[k] * cols + nx[k]);
                }
            }
            if (size > best_size) {
                best_size = size;
                best = next;
            }
        }
    }
    if (best == 0) return Mask::Zero(rows, cols);
    return (label == best).cast<std::uint8_t>();
}

std::pair<Index, Index> interior_point(const Mask& region) {
    const auto d = squared_distance_to_complement(region);
    Index best_r = -1;
    Index best_c = -1;
    double best = -1.0;
    for (Index r = 0; r < d.rows(); ++r) {
        for (Index c = 0; c < d.cols(); ++c) {
            if (region(r, c) && d(r, c) > best) {
                best = d(r, c);
                best_r = r;
                best_c = c;
            }
        }
    }
    return {best_r, best_c};
}

std::optional<Click> next_click(const InteractionState& state, const Mask& gt, const ClickPolicy& policy,
                                std::mt19937_64& rng) {
    const bool eval = policy.mode == ClickMode::eval_deterministic;
    Click click;
    click.ordinal = static_cast<int>(state.clicks.size()) + 1;

    if (!state.prev_prediction) {
        if (count(gt) == 0) throw ArgumentError("next_click: first click needs a nonempty ground truth");
        std::pair<Index, Index> at;
        if (policy.first_click_rule == FirstClickRule::center_of_gt || eval)
            at = interior_point(largest_connected_component(gt));
        else
            at = sample_uniform(gt, rng);
        click.row = at.first;
        click.col = at.second;
        click.polarity = Polarity::positive;
        return click;
    }

    const auto err = error_regions(*state.prev_prediction, gt);
    const auto fn = count(err.false_negative);
    const auto fp = count(err.false_positive);
    if (fn == 0 && fp == 0) return std::nullopt;

    const bool positive = fn >= fp;
    const Mask& region = positive ? err.false_negative : err.false_positive;
    const auto at = eval ? interior_point(largest_connected_component(region)) : sample_uniform(region, rng);
    click.row = at.first;
    click.col = at.second;
    click.polarity = positive ? Polarity::positive : Polarity::negative;
    return click;
}

std::optional<Click> next_click(const InteractionState& state, const Mask& gt, const ClickPolicy& policy) {
    std::seed_seq seq{static_cast<std::uint32_t>(policy.rng_seed), static_cast<std::uint32_t>(policy.rng_seed >> 32),
                      static_cast<std::uint32_t>(state.clicks.size())};
    std::mt19937_64 rng(seq);
    return next_click(state, gt, policy, rng);
}

nlohmann::json to_json(const TrajectoryEntry& e) {
    auto j = to_json(e.click);
    j["iou"] = e.iou ? nlohmann::json(*e.iou) : nlohmann::json(nullptr);
    return j;
}

TrajectoryEntry trajectory_entry_from_json(const nlohmann::json& j) {
    TrajectoryEntry e{click_from_json(j), std::nullopt};
    if (j.contains("iou") && !j.at("iou").is_null()) e.iou = j.at("iou").get<double>();
    return e;
}

void write_trajectory(std::ostream& os, const std::vector<TrajectoryEntry>& entries) {
    for (const auto& e : entries) os << to_json(e).dump() << '\n';
}

std::vector<TrajectoryEntry> read_trajectory(std::istream& is) {
    std::vector<TrajectoryEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(trajectory_entry_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace samseg
