#include "samseg/core.hpp"

#include "samseg/rle.hpp"

#include <cstring>

namespace samseg {

std::string to_string(Polarity p) { return p == Polarity::positive ? "positive" : "negative"; }

Polarity polarity_from_string(const std::string& s) {
    if (s == "positive" || s == "pos" || s == "+") return Polarity::positive;
    if (s == "negative" || s == "neg" || s == "-") return Polarity::negative;
    throw ArgumentError("unknown polarity '" + s + "'");
}

Click& InteractionState::push_click(Index row, Index col, Polarity polarity) {
    Click c;
    c.row = row;
    c.col = col;
    c.polarity = polarity;
    c.ordinal = static_cast<int>(clicks.size()) + 1;
    clicks.push_back(c);
    return clicks.back();
}

void InteractionState::check_invariants() const {
    for (std::size_t i = 0; i < clicks.size(); ++i) {
        if (clicks[i].ordinal != static_cast<int>(i) + 1)
            throw ArgumentError("click ordinals must be consecutive from 1");
    }
    if (prev_prediction.has_value() != !clicks.empty())
        throw ArgumentError("prev_prediction must be present iff at least one click was made");
}

bool is_binary(const Mask& m) { return (m <= 1).all(); }

std::int64_t count(const Mask& m) { return m.cast<std::int64_t>().sum(); }

double tumor_fraction(const Mask& m) {
    if (m.size() == 0) throw DimensionError("tumor_fraction: empty mask");
    return static_cast<double>(count(m)) / static_cast<double>(m.size());
}

double iou(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "iou");
    std::int64_t inter = 0;
    std::int64_t uni = 0;
    const auto* pa = a.data();
    const auto* pb = b.data();
    for (Index i = 0; i < a.size(); ++i) {
        const bool x = pa[i] != 0;
        const bool y = pb[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

ErrorRegions error_regions(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "error_regions");
    ErrorRegions e;
    const auto p = pred != 0;
    const auto g = gt != 0;
    e.false_negative = (g && !p).cast<std::uint8_t>();
    e.false_positive = (p && !g).cast<std::uint8_t>();
    return e;
}

void require_in_bounds(Index row, Index col, Index rows, Index cols) {
    if (row < 0 || col < 0 || row >= rows || col >= cols) {
        throw CoordinateError("click (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                              std::to_string(rows) + "x" + std::to_string(cols));
    }
}

nlohmann::json to_json(const Click& c) {
    return {{"ordinal", c.ordinal}, {"row", c.row}, {"col", c.col}, {"polarity", to_string(c.polarity)}};
}

Click click_from_json(const nlohmann::json& j) {
    Click c;
    c.row = j.at("row").get<Index>();
    c.col = j.at("col").get<Index>();
    c.polarity = polarity_from_string(j.at("polarity").get<std::string>());
    c.ordinal = j.value("ordinal", 1);
    return c;
}

namespace {

nlohmann::json logits_to_json(const Logits& l) {
    std::vector<double> values(l.data(), l.data() + l.size());
    return {{"rows", l.rows()}, {"cols", l.cols()}, {"values", values}};
}

Logits logits_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (static_cast<Index>(values.size()) != rows * cols) throw ArgumentError("logits: value count mismatch");
    Logits l(rows, cols);
    std::copy(values.begin(), values.end(), l.data());
    return l;
}

template <typename T>
std::uint64_t fnv1a(const Grid<T>& g) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    const std::int64_t dims[2] = {static_cast<std::int64_t>(g.rows()), static_cast<std::int64_t>(g.cols())};
    mix(reinterpret_cast<const unsigned char*>(dims), sizeof(dims));
    mix(reinterpret_cast<const unsigned char*>(g.data()), static_cast<std::size_t>(g.size()) * sizeof(T));
    return h;
}

}  // namespace

nlohmann::json to_json(const InteractionState& s) {
    nlohmann::json clicks = nlohmann::json::array();
    for (const auto& c : s.clicks) clicks.push_back(to_json(c));
    nlohmann::json j = {{"patch_id", s.patch_id}, {"clicks", clicks}, {"click_budget_used", s.click_budget_used()}};
    j["prev_prediction"] = s.prev_prediction ? to_json(rle_encode(*s.prev_prediction)) : nlohmann::json(nullptr);
    j["prev_logits"] = s.prev_logits ? logits_to_json(*s.prev_logits) : nlohmann::json(nullptr);
    return j;
}

InteractionState interaction_state_from_json(const nlohmann::json& j) {
    InteractionState s;
    s.patch_id = j.at("patch_id").get<std::string>();
    for (const auto& c : j.at("clicks")) s.clicks.push_back(click_from_json(c));
    if (j.contains("prev_prediction") && !j["prev_prediction"].is_null())
        s.prev_prediction = rle_decode(rle_from_json(j["prev_prediction"]));
    if (j.contains("prev_logits") && !j["prev_logits"].is_null()) s.prev_logits = logits_from_json(j["prev_logits"]);
    if (j.contains("click_budget_used") && j["click_budget_used"].get<std::size_t>() != s.clicks.size())
        throw ArgumentError("click_budget_used does not match click count");
    s.check_invariants();
    return s;
}

std::uint64_t checksum(const Mask& m) { return fnv1a(m); }
std::uint64_t checksum(const Logits& l) { return fnv1a(l); }

}  // namespace samseg
