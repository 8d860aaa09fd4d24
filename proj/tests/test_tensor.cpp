#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "udavt/gradcheck.hpp"
#include "udavt/tensor.hpp"

using namespace udavt;

namespace {

Tensor seeded(std::vector<int> shape, uint64_t seed, double sd = 1.0) {
    return randn_tensor<double>(std::move(shape), Rng(seed), sd);
}

// Backward vs central differences for a scalar-valued graph builder.
double grad_vs_fd(const std::function<Tensor(Tensor)>& build, Tensor x, double step = 1e-5) {
    Tensor leaf = x.detached();
    leaf.set_requires_grad(true);
    Tensor loss = build(leaf);
    backward(loss);
    auto fd = finite_difference_grad<double>(
        [&](const Tensor& probe) { return build(probe).value(); }, x, step);
    return max_rel_err(leaf.grad(), fd.data());
}

}  // namespace

TEST_CASE("softmax basics") {
    auto y = softmax(Tensor::from_data({3}, {0.0, 0.0, 0.0}));
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    // shift invariance of the argmax
    for (uint64_t s = 0; s < 20; ++s) {
        Rng rng(s);
        std::vector<double> x(7);
        for (auto& v : x) v = rng.normal(0, 3);
        double c = rng.normal(0, 10);
        std::vector<double> shifted(x);
        for (auto& v : shifted) v += c;
        auto a = softmax(Tensor::from_data({7}, x)).data();
        auto b = softmax(Tensor::from_data({7}, shifted)).data();
        auto argmax = [](const std::vector<double>& v) {
            return std::max_element(v.begin(), v.end()) - v.begin();
        };
        CHECK(argmax(a) == argmax(b));
    }
}

TEST_CASE("softmax rows sum to one") {
    auto x = seeded({5, 9}, 11, 4.0);
    auto y = softmax(x);
    for (int i = 0; i < 5; ++i) {
        double sum = 0;
        for (int j = 0; j < 9; ++j) sum += y.data()[i * 9 + j];
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("matmul matches double-loop oracle") {
    auto a = seeded({3, 4}, 1);
    auto b = seeded({4, 2}, 2);
    auto c = matmul(a, b);
    auto ref = oracle::matmul(a.data(), b.data(), 3, 4, 2);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("shape mismatch reports both shapes") {
    auto a = Tensor::zeros({3, 4});
    auto b = Tensor::zeros({5, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3,4]"), PreconditionError);
    try {
        matmul(a, b);
    } catch (const PreconditionError& e) {
        CHECK(std::string(e.what()).find("[5,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, b), PreconditionError);
}

TEST_CASE("backward trivial cases") {
    auto x = seeded({4, 3}, 3);
    x.set_requires_grad(true);

    SUBCASE("sum gives ones") {
        backward(sum_all(x));
        for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    SUBCASE("sum of squares gives 2x") {
        backward(sum_all(mul(x, x)));
        for (size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));
    }
    SUBCASE("repeated backward accumulates") {
        auto loss = sum_all(x);
        backward(loss);
        backward(loss);
        for (double g : x.grad()) CHECK(g == doctest::Approx(2.0));
    }
    SUBCASE("non-scalar loss refused") {
        CHECK_THROWS_AS(backward(mul(x, x)), PreconditionError);
    }
}

TEST_CASE("finite difference oracle basics") {
    auto x = seeded({6}, 5);
    auto ones = finite_difference_grad<double>([](const Tensor& t) {
        double s = 0;
        for (double v : t.data()) s += v;
        return s;
    }, x, 1e-5);
    for (double g : ones.data()) CHECK(g == doctest::Approx(1.0).epsilon(1e-8));

    auto zero = finite_difference_grad<double>([](const Tensor&) { return 3.14; }, x, 1e-5);
    for (double g : zero.data()) CHECK(g == 0.0);

    CHECK_THROWS_AS(finite_difference_grad<double>([](const Tensor&) { return 0.0; }, x, 0.0),
                    PreconditionError);
}

TEST_CASE("layer-norm -> gelu -> matmul chain matches finite differences") {
    auto w = seeded({3, 2}, 21);
    auto gamma = Tensor::ones({3});
    auto beta = Tensor::zeros({3});
    auto x = seeded({4, 3}, 22);
    double err = grad_vs_fd(
        [&](Tensor leaf) { return sum_all(matmul(gelu(layer_norm(leaf, gamma, beta)), w)); }, x);
    CHECK(err < 1e-4);
}

TEST_CASE("every kernel matches finite differences on 20 seeded inputs") {
    struct Kernel {
        const char* name;
        std::function<Tensor(Tensor)> build;
        std::vector<int> shape;
        double sd;
    };
    auto w47 = seeded({4, 7}, 100);
    auto w74 = seeded({7, 4}, 101);
    auto gamma = seeded({7}, 102, 0.5);
    auto beta = seeded({7}, 103, 0.5);
    std::vector<Kernel> kernels = {
        {"matmul_lhs", [&](Tensor t) { return sum_all(mul(matmul(t, w47), matmul(t, w47))); }, {5, 4}, 1.0},
        {"matmul_rhs", [&](Tensor t) { return sum_all(square(matmul(w74, t))); }, {4, 6}, 1.0},
        {"transpose", [&](Tensor t) { return sum_all(square(transpose(t))); }, {3, 5}, 1.0},
        {"add", [&](Tensor t) { return sum_all(square(add(t, w47))); }, {4, 7}, 1.0},
        {"sub", [&](Tensor t) { return sum_all(square(sub(w47, t))); }, {4, 7}, 1.0},
        {"mul", [&](Tensor t) { return sum_all(square(mul(t, w47))); }, {4, 7}, 1.0},
        {"scalar_mul", [&](Tensor t) { return sum_all(square(scalar_mul(t, 1.7))); }, {4, 7}, 1.0},
        {"scalar_broadcast", [&](Tensor t) { return sum_all(square(add(t, Tensor::scalar(0.3)))); }, {4, 7}, 1.0},
        {"mean_axis0", [&](Tensor t) { return sum_all(square(mean_axis(t, 0))); }, {5, 3}, 1.0},
        {"mean_axis1", [&](Tensor t) { return sum_all(square(mean_axis(t, 1))); }, {5, 3}, 1.0},
        {"sum_axis0", [&](Tensor t) { return sum_all(square(sum_axis(t, 0))); }, {5, 3}, 1.0},
        {"sum_axis1", [&](Tensor t) { return sum_all(square(sum_axis(t, 1))); }, {5, 3}, 1.0},
        {"relu", [&](Tensor t) { return sum_all(square(relu(t))); }, {4, 7}, 1.0},
        {"gelu", [&](Tensor t) { return sum_all(square(gelu(t))); }, {4, 7}, 1.0},
        {"softmax", [&](Tensor t) { return sum_all(mul(softmax(t), w47)); }, {4, 7}, 2.0},
        {"log", [&](Tensor t) { return sum_all(log(add(square(t), Tensor::scalar(0.5)))); }, {4, 7}, 1.0},
        {"square", [&](Tensor t) { return sum_all(square(t)); }, {4, 7}, 1.0},
        {"sqrt", [&](Tensor t) { return sum_all(sqrt(add(square(t), Tensor::scalar(1.0)))); }, {4, 7}, 1.0},
        {"layer_norm_x", [&](Tensor t) { return sum_all(mul(layer_norm(t, gamma, beta), w47)); }, {4, 7}, 1.5},
        {"concat0", [&](Tensor t) { return sum_all(square(concat<double>({t, w47}, 0))); }, {2, 7}, 1.0},
        {"concat1", [&](Tensor t) { return sum_all(square(concat<double>({t, w74}, 1))); }, {7, 2}, 1.0},
        {"slice0", [&](Tensor t) { return sum_all(square(slice(t, 0, 1, 2))); }, {4, 7}, 1.0},
        {"slice1", [&](Tensor t) { return sum_all(square(slice(t, 1, 2, 3))); }, {4, 7}, 1.0},
        {"reshape", [&](Tensor t) { return sum_all(square(reshape(t, {7, 4}))); }, {4, 7}, 1.0},
        {"gather_rows", [&](Tensor t) { return sum_all(square(gather_rows(t, {0, 2, 2, 1}))); }, {4, 7}, 1.0},
    };
    for (const auto& k : kernels) {
        double worst = 0;
        for (uint64_t s = 0; s < 20; ++s) {
            auto x = randn_tensor<double>(k.shape, Rng(1000 + s * 17), k.sd);
            worst = std::max(worst, grad_vs_fd(k.build, x));
        }
        INFO(std::string(k.name));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("layer-norm affine gradients match finite differences") {
    auto x = seeded({4, 7}, 200, 1.5);
    for (int which = 0; which < 2; ++which) {
        auto affine = seeded({7}, 201 + which, 0.5);
        auto w = seeded({4, 7}, 203);
        double err = grad_vs_fd(
            [&](Tensor leaf) {
                auto g = which == 0 ? leaf : affine;
                auto b = which == 0 ? affine : leaf;
                return sum_all(mul(layer_norm(x, g, b), w));
            },
            affine.detached());
        CHECK(err < 1e-4);
    }
}

TEST_CASE("layer-norm normalizes rows before affine") {
    auto x = seeded({6, 16}, 31, 3.0);
    auto y = layer_norm(x, Tensor::ones({16}), Tensor::zeros({16}));
    for (int i = 0; i < 6; ++i) {
        double mean = 0;
        for (int j = 0; j < 16; ++j) mean += y.data()[i * 16 + j];
        mean /= 16;
        CHECK(std::abs(mean) < 1e-7);
        double var = 0;
        for (int j = 0; j < 16; ++j) {
            double c = y.data()[i * 16 + j] - mean;
            var += c * c;
        }
        var /= 16;
        CHECK(std::abs(var - 1.0) < 1e-5);
    }
}

TEST_CASE("non-finite results are an error state") {
    auto x = Tensor::from_data({2}, {0.0, -1.0});
    CHECK_THROWS_AS(log(x), NumericError);
    auto big = Tensor::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("seeded construction is bit-identical") {
    auto a = randn_tensor<double>({16, 16}, Rng(99).derive("init"), 0.02);
    auto b = randn_tensor<double>({16, 16}, Rng(99).derive("init"), 0.02);
    CHECK(hash_values(a.data()) == hash_values(b.data()));
    auto c = randn_tensor<double>({16, 16}, Rng(100).derive("init"), 0.02);
    CHECK(hash_values(a.data()) != hash_values(c.data()));
}

TEST_CASE("no-grad guard skips graph construction") {
    auto x = seeded({3, 3}, 7);
    x.set_requires_grad(true);
    NoGradGuard guard;
    auto y = matmul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("rng streams are stable and splittable") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    // derivation ignores draw position
    Rng c(42);
    c.next();
    CHECK(Rng(42).derive("x").next() == c.derive("x").next());
    CHECK(Rng(42).derive("x").next() != Rng(42).derive("y").next());
    // bounded draws stay in range
    Rng d(7);
    for (int i = 0; i < 200; ++i) CHECK(d.below(13) < 13);
}
