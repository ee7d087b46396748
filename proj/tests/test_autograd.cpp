#include <doctest.h>

#include "samseg/autograd.hpp"

#include <random>

using namespace samseg;
using namespace samseg::ag;

namespace {

Var random_param(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Vector v(numel(shape));
    for (Index i = 0; i < v.size(); ++i) v(i) = g(rng);
    return Var::parameter(std::move(shape), v);
}

// Projects the output onto fixed random weights and compares the analytic
// gradient of every input against central differences.
double max_gradient_error(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> inputs,
                          std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Var probe = f(inputs);
    Vector weights(probe.numel());
    for (Index i = 0; i < weights.size(); ++i) weights(i) = g(rng);
    auto loss_of = [&] { return weighted_sum(f(inputs), weights); };

    for (auto& in : inputs) in.mutable_grad().resize(0);
    backward(loss_of());

    double worst = 0.0;
    const double h = 1e-6;
    for (auto& in : inputs) {
        const Vector analytic = in.grad().size() ? in.grad() : Vector::Zero(in.numel());
        for (Index i = 0; i < in.numel(); ++i) {
            const double keep = in.value()(i);
            in.mutable_value()(i) = keep + h;
            const double up = loss_of().item();
            in.mutable_value()(i) = keep - h;
            const double down = loss_of().item();
            in.mutable_value()(i) = keep;
            const double numeric = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(numeric - analytic(i)) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise ops") {
    std::mt19937_64 rng(1);
    const auto a = random_param(rng, {3, 4}), b = random_param(rng, {3, 4});
    CHECK(max_gradient_error([](auto& v) { return add(v[0], v[1]); }, {a, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return sub(v[0], v[1]); }, {a, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return mul(v[0], v[1]); }, {a, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return scale(v[0], -2.5); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return gelu(v[0]); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return sum(v[0]); }, {a}) < kTol);
}

TEST_CASE("relu gradient away from the kink") {
    Vector v(4);
    v << -1.0, -0.3, 0.4, 2.0;
    const auto x = Var::parameter({4}, v);
    CHECK(max_gradient_error([](auto& in) { return relu(in[0]); }, {x}) < kTol);
}

TEST_CASE("structural ops") {
    std::mt19937_64 rng(2);
    const auto a = random_param(rng, {3, 4}), b = random_param(rng, {2, 4}), c = random_param(rng, {3, 2});
    CHECK(max_gradient_error([](auto& v) { return reshape(v[0], {4, 3}); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return transpose(v[0]); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return slice_rows(v[0], 1, 2); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return slice_cols(v[0], 1, 2); }, {a}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return concat_rows({v[0], v[1]}); }, {a, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return concat_cols({v[0], v[1]}); }, {a, c}) < kTol);
}

TEST_CASE("matrix ops") {
    std::mt19937_64 rng(3);
    const auto x = random_param(rng, {5, 4}), w = random_param(rng, {3, 4}), bias = random_param(rng, {3});
    const auto m = random_param(rng, {4, 2}), row = random_param(rng, {4});
    const auto gamma = random_param(rng, {4}), beta = random_param(rng, {4});
    CHECK(max_gradient_error([](auto& v) { return matmul(v[0], v[1]); }, {x, m}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return linear(v[0], v[1], v[2]); }, {x, w, bias}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return add_row_vector(v[0], v[1]); }, {x, row}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return softmax_rows(v[0]); }, {x}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return layer_norm_rows(v[0], v[1], v[2]); }, {x, gamma, beta}) < kTol);
}

TEST_CASE("image ops") {
    std::mt19937_64 rng(4);
    const auto x = random_param(rng, {2, 5, 5});
    const auto w = random_param(rng, {3, 2, 3, 3}), b = random_param(rng, {3});
    const auto tw = random_param(rng, {2, 3, 2, 2});
    const auto cb = random_param(rng, {2});
    const auto seq = random_param(rng, {6, 2});
    CHECK(max_gradient_error([](auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); }, {x, w, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return conv2d(v[0], v[1], v[2], 2, 0); }, {x, w, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return conv_transpose2x2(v[0], v[1], v[2]); }, {x, tw, b}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return instance_norm(v[0]); }, {x}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return upsample_nearest2x(v[0]); }, {x}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return add_channel_bias(v[0], v[1]); }, {x, cb}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return broadcast_channels(v[0], 3, 4); }, {cb}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return image_to_sequence(v[0]); }, {x}) < kTol);
    CHECK(max_gradient_error([](auto& v) { return sequence_to_image(v[0], 2, 3); }, {seq}) < kTol);
}

TEST_CASE("conv2d matches a direct loop") {
    std::mt19937_64 rng(5);
    const auto x = random_param(rng, {2, 4, 5}), w = random_param(rng, {3, 2, 3, 3}), b = random_param(rng, {3});
    const auto y = conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == Shape{3, 4, 5});
    auto X = [&](Index c, Index r, Index col) { return x.value()((c * 4 + r) * 5 + col); };
    auto W = [&](Index o, Index c, Index i, Index j) { return w.value()(((o * 2 + c) * 3 + i) * 3 + j); };
    double worst = 0.0;
    for (Index o = 0; o < 3; ++o)
        for (Index r = 0; r < 4; ++r)
            for (Index col = 0; col < 5; ++col) {
                double acc = b.value()(o);
                for (Index c = 0; c < 2; ++c)
                    for (Index i = 0; i < 3; ++i)
                        for (Index j = 0; j < 3; ++j) {
                            const Index rr = r + i - 1, cc = col + j - 1;
                            if (rr >= 0 && rr < 4 && cc >= 0 && cc < 5) acc += W(o, c, i, j) * X(c, rr, cc);
                        }
                worst = std::max(worst, std::abs(acc - y.value()((o * 4 + r) * 5 + col)));
            }
    CHECK(worst < 1e-12);
}

TEST_CASE("composite graph with shared inputs accumulates gradients") {
    std::mt19937_64 rng(6);
    const auto a = random_param(rng, {4, 3});
    CHECK(max_gradient_error(
              [](auto& v) {
                  const auto s = softmax_rows(matmul(v[0], transpose(v[0])));
                  return add(matmul(s, v[0]), gelu(v[0]));
              },
              {a}) < kTol);
}

TEST_CASE("no-grad mode records no graph") {
    std::mt19937_64 rng(7);
    const auto a = random_param(rng, {2, 2});
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        const auto y = mul(a, a);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node()->parents.empty());
    }
    CHECK(grad_enabled());
    CHECK(mul(a, a).requires_grad());
}

TEST_CASE("constants receive no gradient") {
    const auto c = Var::constant({2}, Vector::Ones(2));
    std::mt19937_64 rng(8);
    const auto p = random_param(rng, {2});
    backward(sum(mul(c, p)));
    CHECK(c.grad().size() == 0);
    CHECK((p.grad() - Vector::Ones(2)).norm() < 1e-15);
}

TEST_CASE("shape mismatches throw") {
    const auto a = Var::zeros({2, 3}), b = Var::zeros({3, 2});
    CHECK_THROWS(add(a, b));
    CHECK_THROWS(matmul(a, a));
    CHECK_THROWS(reshape(a, {4}));
}
