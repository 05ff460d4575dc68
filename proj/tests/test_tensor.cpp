#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "istd/grad_check.hpp"
#include "istd/ops.hpp"
#include "oracles.hpp"

using istd::Shape;
using T = istd::Tensor<double>;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Square with a deliberately wrong derivative (3x instead of 2x).
T broken_square(const T& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * x.data()[i];
    return T::from_op(x.shape(), std::move(out), {x}, "broken_square", [](istd::Node<double>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            self.inputs[0]->grad[i] += self.grad[i] * 3.0 * self.inputs[0]->value[i];
    });
}

}  // namespace

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(T::from_data(Shape{1, 1, 2, 2}, {1.0, 2.0}), istd::ShapeError);
    const T t = T::zeros(Shape{2, 3, 4, 5});
    CHECK(t.numel() == 120);
    CHECK(t.shape() == Shape{2, 3, 4, 5});
}

TEST_CASE("conv2d") {
    SUBCASE("1x1 unit kernel is the identity") {
        const T x = oracle::random_tensor({1, 1, 4, 5}, 1);
        const T w = T::from_data({1, 1, 1, 1}, {1.0});
        const T y = istd::conv2d(x, w, {1, 0, 1});
        CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
    }
    SUBCASE("zero input without bias gives zero output") {
        const T x = T::zeros({1, 2, 5, 5});
        const T w = oracle::random_tensor({3, 2, 3, 3}, 2);
        const T y = istd::conv2d(x, w, {1, 1, 1});
        CHECK(std::ranges::all_of(y.data(), [](double v) { return v == 0.0; }));
    }
    SUBCASE("random 3x3 matches the nested-loop reference") {
        const T x = oracle::random_tensor({1, 2, 5, 5}, 3);
        const T w = oracle::random_tensor({4, 2, 3, 3}, 4);
        for (int stride : {1, 2}) {
            for (int pad : {0, 1}) {
                const T y = istd::conv2d(x, w, {stride, pad, 1});
                const auto ref = oracle::conv2d(x, w, {}, stride, pad, 1);
                CHECK(y.shape().h == (5 + 2 * pad - 3) / stride + 1);
                CHECK(max_abs_diff(y.data(), ref) <= 1e-12);
            }
        }
    }
    SUBCASE("bias and batch") {
        const T x = oracle::random_tensor({2, 3, 6, 4}, 5);
        const T w = oracle::random_tensor({2, 3, 3, 3}, 6);
        const T b = T::from_data({1, 2, 1, 1}, {0.5, -1.5});
        const T y = istd::conv2d(x, w, b, {1, 1, 1});
        CHECK(max_abs_diff(y.data(), oracle::conv2d(x, w, {0.5, -1.5}, 1, 1, 1)) <= 1e-12);
    }
    SUBCASE("shape mismatch names the dimensions") {
        const T x = T::zeros({1, 3, 5, 5});
        const T w = T::zeros({4, 2, 3, 3});
        try {
            (void)istd::conv2d(x, w, {1, 1, 1});
            FAIL("expected ShapeError");
        } catch (const istd::ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("3 channels") != std::string::npos);
            CHECK(msg.find("(4, 2, 3, 3)") != std::string::npos);
        }
    }
}

TEST_CASE("depthwise_conv2d") {
    const T x = oracle::random_tensor({2, 3, 5, 5}, 7);
    SUBCASE("identity kernels") {
        std::vector<double> k(27, 0.0);
        for (int c = 0; c < 3; ++c) k[static_cast<std::size_t>(c * 9 + 4)] = 1.0;
        const T y = istd::depthwise_conv2d(x, T::from_data({3, 1, 3, 3}, k), 1, 1);
        CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
    }
    SUBCASE("channel isolation") {
        T w = oracle::random_tensor({3, 1, 3, 3}, 8);
        const T before = istd::depthwise_conv2d(x, w, 1, 1);
        std::fill_n(w.mutable_data().begin(), 9, 0.0);
        const T after = istd::depthwise_conv2d(x, w, 1, 1);
        const Shape s = after.shape();
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < 5; ++i)
                    for (int j = 0; j < 5; ++j) {
                        if (c == 0) CHECK(after.at(n, c, i, j) == 0.0);
                        else CHECK(after.at(n, c, i, j) == before.at(n, c, i, j));
                    }
        CHECK(s == Shape{2, 3, 5, 5});
    }
    SUBCASE("random vs per-channel reference") {
        const T w = oracle::random_tensor({3, 1, 3, 3}, 9);
        const T y = istd::depthwise_conv2d(x, w, 2, 1);
        CHECK(max_abs_diff(y.data(), oracle::conv2d(x, w, {}, 2, 1, 3)) <= 1e-12);
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(istd::depthwise_conv2d(x, T::zeros({4, 1, 3, 3}), 1, 1), istd::ShapeError);
    }
}

TEST_CASE("batchnorm2d") {
    const istd::BatchNormOptions opt{1e-12, 0.1};
    SUBCASE("standardized input passes through") {
        T x = oracle::random_tensor({4, 2, 3, 3}, 10);
        // Standardize each channel by hand first.
        auto v = x.mutable_data();
        for (int c = 0; c < 2; ++c) {
            double mu = 0, sq = 0;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 9; ++i) mu += v[static_cast<std::size_t>((n * 2 + c) * 9 + i)];
            mu /= 36;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 9; ++i) sq += std::pow(v[static_cast<std::size_t>((n * 2 + c) * 9 + i)] - mu, 2);
            const double sd = std::sqrt(sq / 36);
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 9; ++i) {
                    auto& e = v[static_cast<std::size_t>((n * 2 + c) * 9 + i)];
                    e = (e - mu) / sd;
                }
        }
        auto stats = istd::RunningStats<double>::fresh(2);
        const T y = istd::batchnorm2d(x, T::full({1, 2, 1, 1}, 1.0), T::zeros({1, 2, 1, 1}), opt,
                                      istd::BnMode::train, stats);
        CHECK(max_abs_diff(x.data(), y.data()) <= 1e-6);
    }
    SUBCASE("gamma 0, beta 5 is constant") {
        auto stats = istd::RunningStats<double>::fresh(3);
        const T y = istd::batchnorm2d(oracle::random_tensor({2, 3, 4, 4}, 11), T::zeros({1, 3, 1, 1}),
                                      T::full({1, 3, 1, 1}, 5.0), opt, istd::BnMode::train, stats);
        CHECK(std::ranges::all_of(y.data(), [](double v) { return v == 5.0; }));
    }
    SUBCASE("train-mode output statistics follow gamma and beta") {
        auto stats = istd::RunningStats<double>::fresh(2);
        const T y = istd::batchnorm2d(oracle::random_tensor({3, 2, 5, 5}, 12, 3.0),
                                      T::from_data({1, 2, 1, 1}, {2.0, 0.5}), T::from_data({1, 2, 1, 1}, {-1.0, 4.0}),
                                      opt, istd::BnMode::train, stats);
        const double gamma[] = {2.0, 0.5}, beta[] = {-1.0, 4.0};
        for (int c = 0; c < 2; ++c) {
            double mu = 0, sq = 0;
            for (int n = 0; n < 3; ++n)
                for (int i = 0; i < 5; ++i)
                    for (int j = 0; j < 5; ++j) mu += y.at(n, c, i, j);
            mu /= 75;
            for (int n = 0; n < 3; ++n)
                for (int i = 0; i < 5; ++i)
                    for (int j = 0; j < 5; ++j) sq += std::pow(y.at(n, c, i, j) - mu, 2);
            CHECK(std::abs(mu - beta[c]) <= 1e-6);
            CHECK(std::abs(sq / 75 - gamma[c] * gamma[c]) <= 1e-6);
        }
        // Running stats moved towards the batch statistics.
        CHECK(stats.mean[0] != 0.0);
        CHECK(stats.var[0] != 1.0);
    }
    SUBCASE("eval mode uses running stats") {
        istd::RunningStats<double> stats{{1.0}, {4.0}};
        const T y = istd::batchnorm2d(T::full({1, 1, 2, 2}, 3.0), T::full({1, 1, 1, 1}, 1.0), T::zeros({1, 1, 1, 1}),
                                      opt, istd::BnMode::eval, stats);
        CHECK(y.data()[0] == doctest::Approx(1.0));
    }
    SUBCASE("eps must be positive") {
        auto stats = istd::RunningStats<double>::fresh(1);
        CHECK_THROWS_AS(istd::batchnorm2d(T::zeros({1, 1, 2, 2}), T::zeros({1, 1, 1, 1}), T::zeros({1, 1, 1, 1}),
                                          istd::BatchNormOptions{0.0, 0.1}, istd::BnMode::train, stats),
                        istd::ValueError);
    }
}

TEST_CASE("maxpool2d") {
    CHECK(istd::maxpool2d(T::full({1, 2, 4, 4}, 3.5), 2, 2).data()[5] == 3.5);
    CHECK(istd::maxpool2d(T::from_data({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2).item() == 4.0);
    const T x = oracle::random_tensor({2, 3, 6, 7}, 13);
    const T y = istd::maxpool2d(x, 2, 2);
    const auto ref = oracle::maxpool(x, 2, 2);
    CHECK(std::ranges::equal(y.data(), ref));
    CHECK(std::ranges::equal(istd::maxpool2d(x, 3, 1).data(), oracle::maxpool(x, 3, 1)));
    CHECK_THROWS_AS(istd::maxpool2d(T::zeros({1, 1, 2, 2}), 3, 1), istd::ShapeError);
}

TEST_CASE("upsample, concat, activations") {
    const T up = istd::upsample_nearest2x(T::full({1, 1, 1, 1}, 7.0));
    CHECK(up.shape() == Shape{1, 1, 2, 2});
    CHECK(std::ranges::all_of(up.data(), [](double v) { return v == 7.0; }));

    const T a = oracle::random_tensor({2, 2, 3, 3}, 14);
    const T b = oracle::random_tensor({2, 3, 3, 3}, 15);
    const T c = istd::concat_channels({a, b});
    CHECK(c.shape() == Shape{2, 5, 3, 3});
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(c.at(n, 2, i, j) == b.at(n, 0, i, j));
    std::vector<double> lhs(c.data().begin(), c.data().end());
    std::vector<double> rhs(a.data().begin(), a.data().end());
    rhs.insert(rhs.end(), b.data().begin(), b.data().end());
    std::ranges::sort(lhs);
    std::ranges::sort(rhs);
    CHECK(lhs == rhs);
    CHECK_THROWS_AS(istd::concat_channels({a, T::zeros({2, 1, 4, 3})}), istd::ShapeError);

    CHECK(istd::sigmoid(T::scalar(0.0)).item() == 0.5);
    CHECK(istd::silu(T::scalar(0.0)).item() == 0.0);
}

TEST_CASE("channel_shuffle") {
    const T x = T::from_data({1, 4, 1, 1}, {0, 1, 2, 3});
    const T y = istd::channel_shuffle(x, 2);
    CHECK(std::ranges::equal(y.data(), std::vector<double>{0, 2, 1, 3}));
    const T z = oracle::random_tensor({2, 6, 2, 3}, 16);
    CHECK(std::ranges::equal(istd::channel_shuffle(z, 1).data(), z.data()));

    // Shuffling with groups g and then with c/g inverts the transpose.
    const T back = istd::channel_shuffle(istd::channel_shuffle(z, 2), 3);
    CHECK(std::ranges::equal(back.data(), z.data()));
    CHECK_THROWS_AS(istd::channel_shuffle(z, 4), istd::ShapeError);
}

TEST_CASE("backward") {
    SUBCASE("d sum(x) / dx is all ones") {
        T x = oracle::random_tensor({1, 2, 3, 3}, 17, 1.0, true);
        istd::backward(istd::sum(x));
        CHECK(std::ranges::all_of(x.grad(), [](double g) { return g == 1.0; }));
    }
    SUBCASE("sigmoid slope at 0") {
        T x = T::scalar(0.0, true);
        istd::backward(istd::sigmoid(x));
        CHECK(x.grad()[0] == 0.25);
    }
    SUBCASE("untouched inputs get zero gradient") {
        T x = T::scalar(1.0, true);
        T unused = T::zeros({1, 1, 2, 2}, true);
        istd::backward(istd::sigmoid(x));
        CHECK(std::ranges::all_of(unused.grad(), [](double g) { return g == 0.0; }));
    }
    SUBCASE("non-scalar output is rejected") {
        T x = T::zeros({1, 1, 2, 2}, true);
        CHECK_THROWS_AS(istd::backward(istd::silu(x)), istd::ShapeError);
    }
    SUBCASE("conv -> silu -> sum against central differences") {
        std::vector<T> inputs{oracle::random_tensor({1, 2, 5, 5}, 18), oracle::random_tensor({3, 2, 3, 3}, 19),
                              oracle::random_tensor({1, 3, 1, 1}, 20)};
        const auto r = istd::grad_check(
            [](const std::vector<T>& in) { return istd::sum(istd::silu(istd::conv2d(in[0], in[1], in[2], {2, 1, 1}))); },
            inputs, 1e-6);
        CHECK(r.max_rel_error <= 1e-6);
        CHECK(r.checked == 50 + 54 + 3);
    }
}

TEST_CASE("grad_check") {
    SUBCASE("linear function is exact") {
        // No truncation error for a linear map, so a wide step only shrinks roundoff.
        std::vector<T> in{oracle::random_tensor({1, 1, 4, 4}, 21)};
        const T weights = oracle::random_tensor({1, 1, 4, 4}, 22);
        const auto r = istd::grad_check([&](const std::vector<T>& v) { return istd::sum(istd::mul(v[0], weights)); },
                                        in, 1e-3);
        CHECK(r.max_rel_error <= 1e-10);
    }
    SUBCASE("silu sum") {
        std::vector<T> in{oracle::random_tensor({2, 3, 4, 4}, 23, 2.0)};
        const auto r = istd::grad_check([](const std::vector<T>& v) { return istd::sum(istd::silu(v[0])); }, in, 1e-6);
        CHECK(r.max_rel_error <= 1e-6);
    }
    SUBCASE("corrupted gradient rule is flagged") {
        std::vector<T> in{oracle::random_tensor({1, 1, 3, 3}, 24, 2.0)};
        const auto r = istd::grad_check([](const std::vector<T>& v) { return istd::sum(broken_square(v[0])); }, in);
        CHECK(r.max_rel_error > 1e-2);
        CHECK_FALSE(r.passed(1e-6));
    }
    SUBCASE("injected fault on a library op is flagged") {
        std::vector<T> in{oracle::random_tensor({1, 1, 3, 3}, 25)};
        const istd::ScopedGradientFault fault("silu", 1.5);
        const auto r = istd::grad_check([](const std::vector<T>& v) { return istd::sum(istd::silu(v[0])); }, in);
        CHECK(r.max_rel_error > 1e-2);
    }
    SUBCASE("non-finite intermediate names the op") {
        std::vector<T> in{T::full({1, 1, 1, 1}, 1.0)};
        const T zero = T::zeros({1, 1, 1, 1});
        try {
            (void)istd::grad_check(
                [&](const std::vector<T>& v) {
                    std::vector<double> inf{std::numeric_limits<double>::infinity()};
                    const T bad = T::from_data({1, 1, 1, 1}, inf);
                    return istd::sum(istd::mul(v[0], bad));
                },
                in);
            FAIL("expected NumericError");
        } catch (const istd::NumericError& e) {
            CHECK(std::string(e.what()).find("mul") != std::string::npos);
        }
    }
    SUBCASE("sampled probing is reproducible") {
        std::vector<T> in{oracle::random_tensor({1, 4, 6, 6}, 26)};
        auto fn = [](const std::vector<T>& v) { return istd::sum(istd::silu(v[0])); };
        const auto a = istd::grad_check(fn, in, 1e-6, 10, 99);
        const auto b = istd::grad_check(fn, in, 1e-6, 10, 99);
        CHECK(a.checked == 10);
        CHECK(a.max_rel_error == b.max_rel_error);
        CHECK(a.worst == b.worst);
    }
}

TEST_CASE("every differentiable op passes grad_check") {
    auto check = [](const istd::ScalarFn& fn, std::vector<T> inputs) {
        const auto r = istd::grad_check(fn, inputs, 1e-6);
        CHECK(r.max_rel_error <= 1e-6);
    };
    const T proj = oracle::random_tensor({2, 4, 6, 6}, 30);
    check([&](const std::vector<T>& v) { return istd::sum(istd::mul(istd::sigmoid(v[0]), proj)); },
          {oracle::random_tensor({2, 4, 6, 6}, 31)});
    check([&](const std::vector<T>& v) { return istd::sum(istd::mul(istd::channel_shuffle(v[0], 2), proj)); },
          {oracle::random_tensor({2, 4, 6, 6}, 32)});
    check([&](const std::vector<T>& v) { return istd::sum(istd::mul(istd::upsample_nearest2x(v[0]), proj)); },
          {oracle::random_tensor({2, 4, 3, 3}, 33)});
    check([&](const std::vector<T>& v) {
              return istd::sum(istd::mul(istd::maxpool2d(v[0], 2, 2), oracle::random_tensor({2, 4, 3, 3}, 34)));
          },
          {oracle::random_tensor({2, 4, 6, 6}, 35)});
    check([&](const std::vector<T>& v) { return istd::sum(istd::mul(istd::concat_channels({v[0], v[1]}), proj)); },
          {oracle::random_tensor({2, 1, 6, 6}, 36), oracle::random_tensor({2, 3, 6, 6}, 37)});
    check([&](const std::vector<T>& v) { return istd::sum(istd::mul(istd::depthwise_conv2d(v[0], v[1], 1, 1), proj)); },
          {oracle::random_tensor({2, 4, 6, 6}, 38), oracle::random_tensor({4, 1, 3, 3}, 39)});
    for (auto mode : {istd::BnMode::train, istd::BnMode::eval}) {
        check(
            [&](const std::vector<T>& v) {
                auto stats = istd::RunningStats<double>::fresh(4);
                stats.var.assign(4, 2.0);
                return istd::sum(istd::mul(istd::batchnorm2d(v[0], v[1], v[2], {1e-3, 0.1}, mode, stats), proj));
            },
            {oracle::random_tensor({2, 4, 6, 6}, 40), oracle::random_tensor({1, 4, 1, 1}, 41),
             oracle::random_tensor({1, 4, 1, 1}, 42)});
    }
}

TEST_CASE("determinism") {
    const T x = oracle::random_tensor({2, 3, 9, 9}, 50);
    const T w = oracle::random_tensor({5, 3, 3, 3}, 51);
    const T a = istd::silu(istd::conv2d(x, w, {2, 1, 1}));
    const T b = istd::silu(istd::conv2d(x, w, {2, 1, 1}));
    CHECK(std::ranges::equal(a.data(), b.data()));
}
