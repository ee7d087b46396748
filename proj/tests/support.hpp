#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include "samseg/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace samseg::testing {

inline RgbImage random_image(std::mt19937_64& rng, Index side) {
    RgbImage img(side, side);
    for (auto& ch : img.channels)
        for (Index i = 0; i < ch.size(); ++i) ch.data()[i] = static_cast<std::uint8_t>(rng() & 0xff);
    return img;
}

inline ag::Vector random_vector(std::mt19937_64& rng, Index n) {
    std::normal_distribution<double> g;
    ag::Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = g(rng);
    return v;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
    std::string worst_param;
};

/// Compares reverse-mode gradients of a scalar projection of the decoder
/// output against central differences, for up to `per_param` random entries
/// of every trainable decoder and prompt-encoder parameter.
inline GradCheck check_decoder_gradients(SamModel& model, const ImageEmbedding& embedding,
                                         std::span<const Click> clicks, const Logits* feedback, std::uint64_t seed,
                                         int per_param = 3, double h = 1e-5) {
    std::mt19937_64 rng(seed);
    std::vector<NamedParameter> params;
    for (auto& p : model.parameters()) {
        const bool fixed = p.name == "prompt_encoder.pe_gaussian";
        const bool in_scope = p.component != Component::image_encoder;
        p.var.set_requires_grad(in_scope && !fixed);
        p.var.mutable_grad().resize(0);
        if (in_scope && !fixed) params.push_back(p);
    }
    ag::Var probe;
    {
        ag::NoGradGuard guard;
        probe = model.decode(embedding, clicks, feedback);
    }
    const ag::Vector weights = random_vector(rng, probe.numel());
    auto loss = [&] { return ag::weighted_sum(model.decode(embedding, clicks, feedback), weights); };
    ag::backward(loss());

    GradCheck out;
    ag::NoGradGuard guard;
    for (auto& p : params) {
        const ag::Vector analytic = p.var.grad().size() ? p.var.grad() : ag::Vector::Zero(p.var.numel());
        std::uniform_int_distribution<Index> pick(0, p.var.numel() - 1);
        for (int k = 0; k < std::min<Index>(per_param, p.var.numel()); ++k) {
            const Index i = pick(rng);
            const double keep = p.var.value()(i);
            p.var.mutable_value()(i) = keep + h;
            const double up = loss().item();
            p.var.mutable_value()(i) = keep - h;
            const double down = loss().item();
            p.var.mutable_value()(i) = keep;
            const double numeric = (up - down) / (2 * h);
            const double err =
                std::abs(numeric - analytic(i)) / std::max({std::abs(numeric), std::abs(analytic(i)), 1e-3});
            if (err > out.max_rel_error) {
                out.max_rel_error = err;
                out.worst_param = p.name;
            }
            ++out.entries;
        }
    }
    for (auto& p : model.parameters()) {
        p.var.set_requires_grad(false);
        p.var.mutable_grad().resize(0);
    }
    return out;
}

}  // namespace samseg::testing
