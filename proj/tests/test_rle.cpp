#include <doctest.h>

#include "samseg/rle.hpp"

#include <fstream>
#include <random>

using namespace samseg;

namespace {

nlohmann::json vectors() {
    std::ifstream is(std::string(SAMSEG_TEST_DATA) + "/rle_vectors.json");
    REQUIRE(is.good());
    return nlohmann::json::parse(is);
}

Mask from_rows(const nlohmann::json& rows, Index h, Index w) {
    Mask m(h, w);
    for (Index r = 0; r < h; ++r) {
        const auto row = rows.at(static_cast<std::size_t>(r)).get<std::string>();
        REQUIRE(static_cast<Index>(row.size()) == w);
        for (Index c = 0; c < w; ++c) m(r, c) = row[static_cast<std::size_t>(c)] == '1' ? 1 : 0;
    }
    return m;
}

}  // namespace

TEST_CASE("shared valid vectors encode and decode exactly") {
    for (const auto& v : vectors().at("valid")) {
        CAPTURE(v.at("name").get<std::string>());
        const Index h = v.at("height"), w = v.at("width");
        const Mask m = from_rows(v.at("rows"), h, w);
        const RleMask expected{h, w, v.at("rle").get<std::vector<std::uint32_t>>()};
        CHECK(rle_encode(m) == expected);
        CHECK((rle_decode(expected) == m).all());
        CHECK(to_json(expected) == nlohmann::json{{"height", h}, {"width", w}, {"rle", v.at("rle")}});
    }
}

TEST_CASE("shared invalid vectors are rejected") {
    for (const auto& v : vectors().at("invalid")) {
        CAPTURE(v.at("name").get<std::string>());
        const RleMask rle{v.at("height"), v.at("width"), v.at("rle").get<std::vector<std::uint32_t>>()};
        CHECK_THROWS_AS(rle_decode(rle), ArgumentError);
    }
}

TEST_CASE("random masks round trip through rle and json") {
    std::mt19937_64 rng(17);
    for (int t = 0; t < 100; ++t) {
        const Index h = 1 + static_cast<Index>(rng() % 20), w = 1 + static_cast<Index>(rng() % 20);
        std::bernoulli_distribution coin(0.1 + 0.8 * static_cast<double>(t) / 100.0);
        Mask m(h, w);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng);
        const RleMask rle = rle_encode(m);
        CHECK((rle_decode(rle) == m).all());
        CHECK(rle_from_json(nlohmann::json::parse(to_json(rle).dump())) == rle);
    }
}
