#pragma once

// Independent brute-force reference implementations used to check the
// library in unit tests and in the acceptance runner.

#include "samseg/bench.hpp"
#include "samseg/clicker.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace samseg::oracles {

// O(N^2) distance to the nearest outside pixel; a one-pixel ring of
// outside pixels stands in for everything beyond the border.
inline Grid<double> brute_distance(const Mask& region) {
    const Index h = region.rows(), w = region.cols();
    Grid<double> d = Grid<double>::Zero(h, w);
    for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) {
            if (!region(r, c)) continue;
            double best = std::numeric_limits<double>::infinity();
            for (Index y = -1; y <= h; ++y) {
                for (Index x = -1; x <= w; ++x) {
                    const bool outside = y < 0 || x < 0 || y >= h || x >= w || !region(y, x);
                    if (!outside) continue;
                    const double dy = static_cast<double>(y - r), dx = static_cast<double>(x - c);
                    best = std::min(best, std::sqrt(dy * dy + dx * dx));
                }
            }
            d(r, c) = best;
        }
    }
    return d;
}

// Components by repeated label propagation, kept deliberately naive.
inline Mask brute_largest_component(const Mask& m) {
    const Index h = m.rows(), w = m.cols();
    Grid<int> label(h, w);
    for (Index i = 0; i < m.size(); ++i) label.data()[i] = m.data()[i] ? static_cast<int>(i) + 1 : 0;
    bool changed = true;
    while (changed) {
        changed = false;
        for (Index r = 0; r < h; ++r) {
            for (Index c = 0; c < w; ++c) {
                if (!label(r, c)) continue;
                const Index nr[4] = {r - 1, r + 1, r, r}, nc[4] = {c, c, c - 1, c + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nr[k] < 0 || nc[k] < 0 || nr[k] >= h || nc[k] >= w || !label(nr[k], nc[k])) continue;
                    if (label(nr[k], nc[k]) < label(r, c)) {
                        label(r, c) = label(nr[k], nc[k]);
                        changed = true;
                    }
                }
            }
        }
    }
    // The minimum label of a component is its first pixel in scan order.
    int best = 0;
    Index best_size = 0;
    for (Index i = 0; i < label.size(); ++i) {
        const int l = label.data()[i];
        if (!l || l != static_cast<int>(i) + 1) continue;
        const Index size = (label == l).count();
        if (size > best_size) {
            best_size = size;
            best = l;
        }
    }
    if (best == 0) return Mask::Zero(h, w);
    return (label == best).cast<std::uint8_t>();
}

inline std::pair<Index, Index> brute_argmax(const Grid<double>& d) {
    Index br = 0, bc = 0;
    double best = -1.0;
    for (Index r = 0; r < d.rows(); ++r)
        for (Index c = 0; c < d.cols(); ++c)
            if (d(r, c) > best) {
                best = d(r, c);
                br = r;
                bc = c;
            }
    return {br, bc};
}

inline Click oracle_eval_click(const InteractionState& s, const Mask& gt) {
    if (!s.prev_prediction) {
        const auto [r, c] = brute_argmax(brute_distance(brute_largest_component(gt)));
        return {r, c, Polarity::positive, 1};
    }
    const auto regions = error_regions(*s.prev_prediction, gt);
    const bool fn = count(regions.false_negative) >= count(regions.false_positive);
    const Mask& region = fn ? regions.false_negative : regions.false_positive;
    const auto [r, c] = brute_argmax(brute_distance(brute_largest_component(region)));
    return {r, c, fn ? Polarity::positive : Polarity::negative, static_cast<int>(s.clicks.size()) + 1};
}

inline Mask random_blobby(std::mt19937_64& rng, Index h, Index w) {
    Mask m = Mask::Zero(h, w);
    std::uniform_int_distribution<Index> rr(0, h - 1), cc(0, w - 1);
    const int rects = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < rects; ++i) {
        const Index r0 = rr(rng), c0 = cc(rng);
        const Index r1 = std::min<Index>(h, r0 + 1 + rr(rng) / 2), c1 = std::min<Index>(w, c0 + 1 + cc(rng) / 2);
        m.block(r0, c0, r1 - r0, c1 - c0) = 1;
    }
    std::bernoulli_distribution flip(0.05);
    for (Index i = 0; i < m.size(); ++i)
        if (flip(rng)) m.data()[i] ^= 1;
    return m;
}


inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

// Focal loss written out directly: p_t from the sigmoid, w = (1 - p_t)^gamma.
inline double nfl(const Logits& x, const Mask& y, double gamma) {
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        const double z = y.data()[i] ? x.data()[i] : -x.data()[i];
        const double log_pt = log_sigmoid(z);
        const double w = std::pow(1.0 - std::exp(log_pt), gamma);
        num += -w * log_pt;
        den += w;
    }
    return den > 0 ? num / den : 0.0;
}

inline double mean_bce(const Logits& x, const Mask& y) {
    double s = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        s += y.data()[i] ? -log_sigmoid(v) : -log_sigmoid(-v);
    }
    return s / static_cast<double>(x.size());
}

struct NocRecount {
    std::vector<double> noc;
    std::vector<int> nof;
};

// Scans every IoU log for its first crossing of each target.
inline NocRecount recount(const std::vector<std::vector<double>>& logs, const std::vector<double>& targets,
                          int max_clicks) {
    NocRecount out;
    for (double t : targets) {
        double total = 0.0;
        int fails = 0;
        for (const auto& log : logs) {
            int hit = 0;
            for (std::size_t k = 0; k < log.size() && hit == 0; ++k)
                if (log[k] >= t) hit = static_cast<int>(k) + 1;
            total += hit ? hit : max_clicks;
            fails += hit ? 0 : 1;
        }
        out.noc.push_back(total / static_cast<double>(logs.size()));
        out.nof.push_back(fails);
    }
    return out;
}

}  // namespace samseg::oracles
