#include <doctest.h>

#include "samseg/clicker.hpp"
#include "oracles.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

using namespace samseg;
using namespace samseg::oracles;

TEST_CASE("single pixel region has distance one") {
    Mask m = Mask::Zero(5, 5);
    m(2, 3) = 1;
    const auto d = distance_to_complement(m);
    CHECK(d(2, 3) == 1.0);
    CHECK(d.sum() == 1.0);
}

TEST_CASE("3x3 square has a strict maximum at its centre") {
    Mask m = Mask::Zero(7, 7);
    m.block(2, 2, 3, 3) = 1;
    const auto d = distance_to_complement(m);
    for (Index r = 2; r < 5; ++r)
        for (Index c = 2; c < 5; ++c)
            if (r != 3 || c != 3) CHECK(d(r, c) < d(3, 3));
}

TEST_CASE("full grid distances are measured to the virtual border") {
    const Mask m = Mask::Ones(5, 5);
    const auto d = distance_to_complement(m);
    const auto oracle = brute_distance(m);
    CHECK((d - oracle).abs().maxCoeff() < 1e-12);
    CHECK(d(2, 2) == 3.0);
    CHECK(interior_point(m) == std::pair<Index, Index>{2, 2});
}

TEST_CASE("empty region is rejected by the distance transform") {
    CHECK_THROWS_AS(distance_to_complement(Mask::Zero(3, 3)), EmptyRegionError);
}

TEST_CASE("distance transform equals brute force on random masks") {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 60; ++t) {
        const Index h = 1 + static_cast<Index>(rng() % 24), w = 1 + static_cast<Index>(rng() % 24);
        Mask m = random_blobby(rng, h, w);
        if (count(m) == 0) m(0, 0) = 1;
        const auto d = squared_distance_to_complement(m);
        const auto o = brute_distance(m);
        CHECK(((d.sqrt() - o).abs() < 1e-9).all());
    }
}

TEST_CASE("largest connected component picks the 6-pixel component") {
    Mask m = Mask::Zero(4, 4);
    m.block(0, 0, 2, 3) = 1;  // 6 pixels
    m(3, 1) = m(3, 2) = m(3, 3) = 1;  // 3 pixels
    Mask expected = Mask::Zero(4, 4);
    expected.block(0, 0, 2, 3) = 1;
    CHECK((largest_connected_component(m) == expected).all());
}

TEST_CASE("largest connected component edge cases") {
    Mask single = Mask::Zero(3, 3);
    single.col(1) = 1;
    CHECK((largest_connected_component(single) == single).all());
    CHECK(count(largest_connected_component(Mask::Zero(3, 3))) == 0);
    // Diagonal neighbours are separate components; ties go to scan order.
    Mask diag = Mask::Zero(2, 2);
    diag(0, 0) = diag(1, 1) = 1;
    const Mask lcc = largest_connected_component(diag);
    CHECK(lcc(0, 0) == 1);
    CHECK(lcc(1, 1) == 0);
}

TEST_CASE("largest connected component matches the naive oracle") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 100; ++t) {
        const Mask m = random_blobby(rng, 1 + static_cast<Index>(rng() % 20), 1 + static_cast<Index>(rng() % 20));
        CHECK((largest_connected_component(m) == brute_largest_component(m)).all());
    }
}

TEST_CASE("singleton false negative yields a positive click on it") {
    Mask gt = Mask::Zero(8, 10);
    gt.block(1, 1, 5, 8) = 1;
    InteractionState s;
    s.push_click(2, 2, Polarity::positive);
    Mask pred = gt;
    pred(3, 7) = 0;
    s.prev_prediction = pred;
    const auto c = next_click(s, gt, ClickPolicy::eval());
    REQUIRE(c.has_value());
    CHECK(c->row == 3);
    CHECK(c->col == 7);
    CHECK(c->polarity == Polarity::positive);
    CHECK(c->ordinal == 2);
}

TEST_CASE("false positive 5x5 square yields a negative click at its centre") {
    const Mask gt = Mask::Zero(20, 20);
    Mask pred = Mask::Zero(20, 20);
    pred.block(10, 10, 5, 5) = 1;
    InteractionState s;
    s.push_click(0, 0, Polarity::positive);
    s.prev_prediction = pred;
    const auto c = next_click(s, gt, ClickPolicy::eval());
    REQUIRE(c.has_value());
    CHECK(c->row == 12);
    CHECK(c->col == 12);
    CHECK(c->polarity == Polarity::negative);
}

TEST_CASE("eval clicks are deterministic and perfect predictions stop the loop") {
    std::mt19937_64 rng(8);
    const Mask gt = random_blobby(rng, 16, 16);
    InteractionState s;
    s.prev_prediction = Mask::Zero(16, 16);
    s.push_click(0, 0, Polarity::positive);
    std::mt19937_64 a(1), b(999);
    CHECK(next_click(s, gt, ClickPolicy::eval(), a) == next_click(s, gt, ClickPolicy::eval(), b));
    s.prev_prediction = gt;
    CHECK_FALSE(next_click(s, gt, ClickPolicy::eval()).has_value());
}

TEST_CASE("first click on an empty ground truth is an error") {
    InteractionState s;
    CHECK_THROWS_AS(next_click(s, Mask::Zero(4, 4), ClickPolicy::eval()), ArgumentError);
}

TEST_CASE("eval clicks equal the brute-force oracle") {
    std::mt19937_64 rng(31);
    int checked = 0;
    for (int t = 0; t < 200; ++t) {
        const Index h = 2 + static_cast<Index>(rng() % 31), w = 2 + static_cast<Index>(rng() % 31);
        Mask gt = random_blobby(rng, h, w);
        if (count(gt) == 0) gt(h / 2, w / 2) = 1;
        const Mask pred = random_blobby(rng, h, w);
        InteractionState s;
        if (t % 5 != 0) {
            s.push_click(0, 0, Polarity::positive);
            s.prev_prediction = pred;
        }
        if (s.prev_prediction && (pred == gt).all()) continue;
        const auto c = next_click(s, gt, ClickPolicy::eval());
        REQUIRE(c.has_value());
        CHECK(*c == oracle_eval_click(s, gt));
        ++checked;
    }
    CHECK(checked > 150);
}

TEST_CASE("polarity and membership hold on randomized grids in both modes") {
    std::mt19937_64 rng(77);
    for (int t = 0; t < 300; ++t) {
        const Index h = 2 + static_cast<Index>(rng() % 12), w = 2 + static_cast<Index>(rng() % 12);
        Mask gt = random_blobby(rng, h, w);
        if (count(gt) == 0) gt(0, 0) = 1;
        const Mask pred = random_blobby(rng, h, w);
        if ((pred == gt).all()) continue;
        InteractionState s;
        s.push_click(0, 0, Polarity::positive);
        s.prev_prediction = pred;
        const auto regions = error_regions(pred, gt);
        for (const auto& policy : {ClickPolicy::eval(), ClickPolicy::train(static_cast<std::uint64_t>(t))}) {
            const auto c = next_click(s, gt, policy);
            REQUIRE(c.has_value());
            if (c->polarity == Polarity::positive)
                CHECK(regions.false_negative(c->row, c->col) == 1);
            else
                CHECK(regions.false_positive(c->row, c->col) == 1);
        }
    }
}

TEST_CASE("train clicks are reproducible for a fixed seed") {
    std::mt19937_64 rng(12);
    const Mask gt = random_blobby(rng, 20, 20) .max(Mask(Mask::Zero(20, 20)));
    InteractionState s;
    if (count(gt) == 0) return;
    std::mt19937_64 a(5), b(5);
    for (int i = 0; i < 20; ++i) CHECK(next_click(s, gt, ClickPolicy::train(5), a) == next_click(s, gt, ClickPolicy::train(5), b));
    CHECK(next_click(s, gt, ClickPolicy::train(5)) == next_click(s, gt, ClickPolicy::train(5)));
}

TEST_CASE("train clicks are uniform over the region (chi-square)") {
    // 100-cell region, 10^4 draws; chi-square critical value for 99 degrees
    // of freedom at p = 0.01 is 134.64.
    const double critical = 134.64;
    Mask gt = Mask::Zero(16, 16);
    gt.block(3, 4, 10, 10) = 1;

    auto chi_square = [&](const InteractionState& s) {
        std::mt19937_64 rng(2024);
        Grid<double> hits = Grid<double>::Zero(16, 16);
        for (int i = 0; i < 10000; ++i) {
            const auto c = next_click(s, gt, ClickPolicy::train(1), rng);
            hits(c->row, c->col) += 1.0;
        }
        CHECK((hits * (1 - gt.cast<double>())).sum() == 0.0);
        const double expected = 100.0;
        double chi = 0.0;
        for (Index i = 0; i < gt.size(); ++i)
            if (gt.data()[i]) chi += (hits.data()[i] - expected) * (hits.data()[i] - expected) / expected;
        return chi;
    };

    InteractionState first;
    CHECK(chi_square(first) < critical);

    InteractionState later;
    later.push_click(0, 0, Polarity::positive);
    later.prev_prediction = Mask::Zero(16, 16);
    CHECK(chi_square(later) < critical);
}

TEST_CASE("trajectory jsonl round trip") {
    std::vector<TrajectoryEntry> entries{{{1, 2, Polarity::positive, 1}, 0.5},
                                         {{3, 4, Polarity::negative, 2}, 0.75},
                                         {{5, 6, Polarity::positive, 3}, std::nullopt}};
    std::stringstream ss;
    write_trajectory(ss, entries);
    const auto back = read_trajectory(ss);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].click == entries[i].click);
        CHECK(back[i].iou == entries[i].iou);
    }
}
