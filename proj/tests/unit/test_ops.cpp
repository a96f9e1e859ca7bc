#include <cmath>
#include <vector>

#include "doctest.h"
#include "l2aed/adam.hpp"
#include "l2aed/autodiff.hpp"
#include "l2aed/errors.hpp"
#include "oracles.hpp"

using namespace l2aed;

namespace {

Tensor vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

// Finite-difference check of d(sum(w * f(x...)))/dx for every listed leaf.
void check_grads(const std::function<Var(Graph&, std::vector<Var>&)>& build, std::vector<Tensor> inputs,
                 double tol = 1e-6) {
    Rng rng(99);
    Tensor weights;
    auto run = [&](bool want_grad, std::vector<Tensor>* grads) {
        Graph g;
        std::vector<Var> leaves;
        for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
        const Var out = build(g, leaves);
        if (weights.empty()) weights = oracle::random_tensor(out.shape(), rng);
        const Var loss = sum(mul(out, g.constant(weights)));
        if (want_grad) {
            g.backward(loss);
            for (const auto& l : leaves) grads->push_back(g.grad(l));
        }
        return loss.value()[0];
    };
    std::vector<Tensor> ad;
    run(true, &ad);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor fd = oracle::finite_diff(inputs[i], [&] { return run(false, nullptr); }, 1e-5);
        CHECK(oracle::grad_rel_error(ad[i], fd, 1e-6) < tol);
    }
}

}  // namespace

TEST_CASE("tensor shape contract") {
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>(3)), ShapeError);
    Tensor t(Shape{2, 3});
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
}

TEST_CASE("conv2d examples") {
    Rng rng(1);
    Graph g;
    SUBCASE("zero input gives zero output") {
        const Var y = conv2d(g.constant(Tensor(Shape{2, 3, 5, 5})), g.constant(oracle::random_tensor({4, 3, 3, 3}, rng)),
                             g.constant(Tensor(Shape{4})));
        for (double v : y.value().data()) CHECK(v == 0.0);
    }
    SUBCASE("identity stencil") {
        const Tensor x = oracle::random_tensor({1, 1, 6, 5}, rng);
        Tensor k(Shape{1, 1, 3, 3});
        k.at({0, 0, 1, 1}) = 1.0;
        const Var y = conv2d(g.constant(x), g.constant(k), g.constant(Tensor(Shape{1})));
        CHECK(y.value() == x);
    }
    SUBCASE("identity stencil sums channels") {
        const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
        Tensor k(Shape{1, 3, 3, 3});
        for (std::size_t c = 0; c < 3; ++c) k.at({0, c, 1, 1}) = 1.0;
        const Var y = conv2d(g.constant(x), g.constant(k), g.constant(Tensor(Shape{1})));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 4; ++j) {
                    const double s = x.at({n, 0, i, j}) + x.at({n, 1, i, j}) + x.at({n, 2, i, j});
                    CHECK(y.value().at({n, 0, i, j}) == doctest::Approx(s).epsilon(1e-14));
                }
    }
    SUBCASE("random 4x4 matches the naive loop") {
        const Tensor x = oracle::random_tensor({1, 1, 4, 4}, rng);
        const Tensor k = oracle::random_tensor({1, 1, 3, 3}, rng);
        const Tensor b = oracle::random_tensor({1}, rng);
        const Var y = conv2d(g.constant(x), g.constant(k), g.constant(b));
        CHECK(max_abs_diff(y.value(), oracle::conv2d(x, k, b)) < 1e-12);
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(conv2d(g.constant(Tensor(Shape{1, 2, 4, 4})), g.constant(Tensor(Shape{1, 3, 3, 3})),
                               g.constant(Tensor(Shape{1}))),
                        ShapeError);
    }
}

TEST_CASE("batchnorm examples") {
    Rng rng(2);
    Graph g;
    const Tensor x = oracle::random_tensor({3, 2, 4, 5}, rng, 3.0);
    SUBCASE("standardizes each channel") {
        const Var y = batchnorm_batch(g.constant(x), g.constant(Tensor::ones({2})), g.constant(Tensor(Shape{2})));
        for (std::size_t c = 0; c < 2; ++c) {
            double mean = 0.0, sq = 0.0, xm = 0.0, xv = 0.0;
            std::vector<double> xs;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 4; ++i)
                    for (std::size_t j = 0; j < 5; ++j) {
                        mean += y.value().at({n, c, i, j});
                        sq += y.value().at({n, c, i, j}) * y.value().at({n, c, i, j});
                        xs.push_back(x.at({n, c, i, j}));
                    }
            for (double v : xs) xm += v;
            xm /= 60.0;
            for (double v : xs) xv += (v - xm) * (v - xm);
            xv /= 60.0;
            mean /= 60.0;
            CHECK(std::abs(mean) < 1e-10);
            CHECK(sq / 60.0 - mean * mean == doctest::Approx(1.0 / (1.0 + 1e-5 / xv)).epsilon(1e-10));
        }
    }
    SUBCASE("constant channel yields beta") {
        Tensor c(Shape{2, 1, 3, 3}, 4.2);
        const Var y = batchnorm_batch(g.constant(c), g.constant(vec({1.7})), g.constant(vec({-0.3})));
        for (double v : y.value().data()) CHECK(v == doctest::Approx(-0.3).epsilon(1e-12));
    }
    SUBCASE("two-pass oracle") {
        const Tensor gamma = oracle::random_tensor({2}, rng), beta = oracle::random_tensor({2}, rng);
        const Var y = batchnorm_batch(g.constant(x), g.constant(gamma), g.constant(beta));
        CHECK(max_rel_diff(y.value(), oracle::batchnorm(x, gamma, beta)) < 1e-10);
    }
}

TEST_CASE("relu examples") {
    Graph g;
    CHECK(relu(g.constant(vec({-1, 0, 2}))).value() == vec({0, 0, 2}));
    CHECK(relu(g.constant(vec({-1, -2, -0.5}))).value() == vec({0, 0, 0}));
    Rng rng(3);
    const Tensor x = oracle::random_tensor({3, 7}, rng);
    CHECK(relu(g.constant(x)).value() == oracle::relu(x));
    // Subgradient at exactly 0 is 0.
    const Var z = g.leaf(vec({0.0}));
    g.backward(sum(relu(z)));
    CHECK(g.grad(z)[0] == 0.0);
}

TEST_CASE("maxpool2 examples") {
    Graph g;
    const Var y = maxpool2(g.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})));
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == 4.0);
    CHECK(maxpool2(g.constant(Tensor(Shape{1, 1, 5, 5}))).shape() == Shape{1, 1, 2, 2});
    Rng rng(4);
    const Tensor x = oracle::random_tensor({1, 1, 6, 6}, rng);
    CHECK(maxpool2(g.constant(x)).value() == oracle::maxpool2(x));
    CHECK_THROWS_AS(maxpool2(g.constant(Tensor(Shape{1, 1, 1, 4}))), ShapeError);

    SUBCASE("ties route to the first maximum") {
        Graph g2;
        const Var x2 = g2.leaf(Tensor(Shape{1, 1, 2, 2}, {5, 5, 5, 5}));
        g2.backward(sum(maxpool2(x2)));
        CHECK(g2.grad(x2) == Tensor(Shape{1, 1, 2, 2}, {1, 0, 0, 0}));
    }
}

TEST_CASE("linear examples") {
    Graph g;
    Rng rng(5);
    const Tensor x = oracle::random_tensor({2, 3}, rng);
    Tensor eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
    CHECK(linear(g.constant(x), g.constant(eye), g.constant(Tensor(Shape{3}))).value() == x);
    const Var z = linear(g.constant(x), g.constant(Tensor(Shape{2, 3})), g.constant(vec({0.5, -1.5})));
    CHECK(z.value() == Tensor(Shape{2, 2}, {0.5, -1.5, 0.5, -1.5}));
    const Tensor w = oracle::random_tensor({4, 3}, rng), b = oracle::random_tensor({4}, rng);
    CHECK(max_abs_diff(linear(g.constant(x), g.constant(w), g.constant(b)).value(), oracle::linear(x, w, b)) < 1e-14);
    CHECK_THROWS_AS(linear(g.constant(x), g.constant(Tensor(Shape{4, 2})), g.constant(b)), ShapeError);
}

TEST_CASE("softmax examples") {
    Graph g;
    const Tensor u = softmax(g.constant(vec({0, 0, 0}))).value();
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(softmax(g.constant(vec({-123.4}))).value()[0] == 1.0);
    const Tensor p = softmax(g.constant(vec({1, 2, 3}))).value();
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(std::exp(i + 1.0) / z).epsilon(1e-14));
    // Large inputs do not overflow.
    const Tensor big = softmax(g.constant(vec({1000, 1000}))).value();
    CHECK(big[0] == 0.5);
    const Tensor lp = log_softmax(g.constant(vec({1, 2, 3}))).value();
    for (int i = 0; i < 3; ++i) CHECK(lp[i] == doctest::Approx(i + 1.0 - std::log(z)).epsilon(1e-14));
}

TEST_CASE("dropout_apply examples") {
    Graph g;
    Rng rng(6);
    const Tensor x = oracle::random_tensor({2, 2, 3, 3}, rng);
    CHECK(dropout_apply(g.constant(x), Tensor::ones({2}), 1.0).value() == x);
    for (double v : dropout_apply(g.constant(x), Tensor(Shape{2}), 0.5).value().data()) CHECK(v == 0.0);
    const Tensor y = dropout_apply(g.constant(x), vec({1, 0}), 0.5).value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                CHECK(y.at({n, 0, i, j}) == 2.0 * x.at({n, 0, i, j}));
                CHECK(y.at({n, 1, i, j}) == 0.0);
            }
    CHECK_THROWS_AS(dropout_apply(g.constant(x), Tensor::ones({2}), 0.0), ParameterError);
    CHECK_THROWS_AS(dropout_apply(g.constant(x), Tensor::ones({2}), -0.5), ParameterError);
    const std::size_t before = dropout_apply_calls();
    (void)dropout_apply(g.constant(x), Tensor::ones({2}), 1.0);
    CHECK(dropout_apply_calls() == before + 1);
}

TEST_CASE("backward examples") {
    Rng rng(7);
    Graph g;
    const Var x = g.leaf(oracle::random_tensor({3, 4}, rng));
    const Var unused = g.leaf(oracle::random_tensor({2}, rng));
    g.backward(sum(x));
    CHECK(g.grad(x) == Tensor::ones({3, 4}));
    CHECK(g.grad(unused) == Tensor(Shape{2}));
    CHECK_THROWS_AS(g.backward(x), ContractError);

    SUBCASE("gradients accumulate across calls") {
        Graph h;
        const Var a = h.leaf(vec({1.0, 2.0}));
        const Var l = sum(mul(a, a));
        h.backward(l);
        h.backward(l);
        CHECK(h.grad(a) == vec({4.0, 8.0}));
        h.zero_grad();
        h.backward(l);
        CHECK(h.grad(a) == vec({2.0, 4.0}));
    }
    SUBCASE("vars from another graph are rejected") {
        Graph other;
        const Var foreign = other.leaf(vec({1.0}));
        CHECK_THROWS_AS(add(g.leaf(vec({1.0})), foreign), ContractError);
    }
}

TEST_CASE("non-finite values surface as numeric errors") {
    Graph g;
    const Var a = g.leaf(vec({1e300}));
    CHECK_THROWS_AS(mul(a, a), NumericError);
    CHECK_THROWS_AS(g.leaf(vec({std::nan("")})), NumericError);
}

TEST_CASE("op gradients match finite differences") {
    Rng rng(8);
    SUBCASE("conv2d") {
        check_grads([](Graph&, std::vector<Var>& v) { return conv2d(v[0], v[1], v[2]); },
                    {oracle::random_tensor({2, 2, 4, 5}, rng), oracle::random_tensor({3, 2, 3, 3}, rng),
                     oracle::random_tensor({3}, rng)});
    }
    SUBCASE("batchnorm") {
        check_grads([](Graph&, std::vector<Var>& v) { return batchnorm_batch(v[0], v[1], v[2]); },
                    {oracle::random_tensor({3, 2, 2, 3}, rng), oracle::random_tensor({2}, rng),
                     oracle::random_tensor({2}, rng)});
    }
    SUBCASE("maxpool and relu") {
        check_grads([](Graph&, std::vector<Var>& v) { return maxpool2(relu(v[0])); },
                    {oracle::random_tensor({2, 2, 5, 4}, rng)});
    }
    SUBCASE("linear, softmax, log_softmax") {
        check_grads([](Graph&, std::vector<Var>& v) { return softmax(linear(v[0], v[1], v[2])); },
                    {oracle::random_tensor({3, 4}, rng), oracle::random_tensor({5, 4}, rng),
                     oracle::random_tensor({5}, rng)});
        check_grads([](Graph&, std::vector<Var>& v) { return log_softmax(v[0]); }, {oracle::random_tensor({3, 4}, rng)});
    }
    SUBCASE("structural ops") {
        check_grads(
            [](Graph&, std::vector<Var>& v) {
                const int idx[] = {2, -1, 0};
                const Var stacks = gather_channel_stacks(v[0], idx);
                return weighted_channel_sum(stacks, v[1]);
            },
            {oracle::random_tensor({3, 4, 2, 2}, rng), oracle::random_tensor({4, 3}, rng)});
        check_grads([](Graph&, std::vector<Var>& v) { return take_cols(reshape(pad_channels(v[0], 5), Shape{2, 5}), 3); },
                    {oracle::random_tensor({2, 2, 1, 1}, rng)});
        check_grads(
            [](Graph&, std::vector<Var>& v) {
                const Var parts[] = {v[0], scale(v[1], 0.5)};
                const Var others[] = {add(v[0], v[1]), reshape(v[1], Shape{3})};
                return sub(stack(parts), stack(others));
            },
            {oracle::random_tensor({3}, rng), oracle::random_tensor({3}, rng)});
    }
    SUBCASE("pairwise distance and nll") {
        check_grads(
            [](Graph&, std::vector<Var>& v) {
                const int labels[] = {1, 0, 2};
                return nll_mean(log_softmax(scale(pairwise_distance(v[0], v[1]), -1.0)), labels);
            },
            {oracle::random_tensor({3, 4}, rng), oracle::random_tensor({3, 4}, rng)});
    }
}

TEST_CASE("pairwise distance at coincident points has zero gradient") {
    Graph g;
    const Var a = g.leaf(Tensor(Shape{1, 2}, {1.0, 2.0}));
    const Var d = pairwise_distance(a, a);
    CHECK(d.value()[0] == 0.0);
    g.backward(sum(d));
    CHECK(g.grad(a) == Tensor(Shape{1, 2}));
}

TEST_CASE("softmax rows are positive and normalized") {
    Rng rng(9);
    Graph g;
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor x = oracle::random_tensor({4, 1 + rng.below(8)}, rng, 30.0);
        const Tensor p = softmax(g.constant(x)).value();
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < p.dim(1); ++c) {
                CHECK(p.at({r, c}) > 0.0);
                s += p.at({r, c});
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("ops are bitwise deterministic") {
    Rng rng(10);
    const Tensor x = oracle::random_tensor({3, 2, 6, 6}, rng), k = oracle::random_tensor({4, 2, 3, 3}, rng),
                 b = oracle::random_tensor({4}, rng);
    auto run = [&] {
        Graph g;
        const Var xv = g.leaf(x), kv = g.leaf(k);
        const Var y = maxpool2(relu(batchnorm_batch(conv2d(xv, kv, g.constant(b)), g.constant(Tensor::ones({4})),
                                                    g.constant(Tensor(Shape{4})))));
        g.backward(sum(mul(y, y)));
        return std::make_pair(y.value(), g.grad(kv));
    };
    CHECK(run() == run());
}

TEST_CASE("adam examples") {
    SUBCASE("zero gradient leaves parameters and moments unchanged") {
        Tensor p = vec({1.0, -2.0});
        Tensor* ps[] = {&p};
        const Tensor* cps[] = {&p};
        AdamState s = AdamState::for_params(cps);
        const Tensor grads[] = {Tensor(Shape{2})};
        adam_step(ps, grads, s, 1e-3);
        CHECK(p == vec({1.0, -2.0}));
        CHECK(s.m[0] == Tensor(Shape{2}));
        CHECK(s.v[0] == Tensor(Shape{2}));
        CHECK(s.t == 1);
    }
    SUBCASE("first step is -lr * sign(g)") {
        Tensor p = vec({0.0, 0.0, 0.0});
        Tensor* ps[] = {&p};
        const Tensor* cps[] = {&p};
        AdamState s = AdamState::for_params(cps);
        s.eps = 0.0;
        const Tensor grads[] = {vec({3.0, -0.01, 250.0})};
        adam_step(ps, grads, s, 1e-3);
        CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(1e-3).epsilon(1e-12));
        CHECK(p[2] == doctest::Approx(-1e-3).epsilon(1e-12));
    }
    SUBCASE("three-step trajectory matches the reference formula") {
        Tensor p = vec({0.7});
        Tensor* ps[] = {&p};
        const Tensor* cps[] = {&p};
        AdamState s = AdamState::for_params(cps);
        const double gs[] = {0.3, -1.2, 0.05};
        double x = 0.7, m = 0.0, v = 0.0;
        for (int t = 1; t <= 3; ++t) {
            const Tensor grads[] = {vec({gs[t - 1]})};
            adam_step(ps, grads, s, 0.01);
            m = 0.9 * m + 0.1 * gs[t - 1];
            v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
            const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
            x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            CHECK(std::abs(p[0] - x) < 1e-12);
        }
        CHECK(s.t == 3);
    }
    SUBCASE("shape mismatch") {
        Tensor p = vec({1.0, 2.0});
        Tensor* ps[] = {&p};
        const Tensor* cps[] = {&p};
        AdamState s = AdamState::for_params(cps);
        const Tensor grads[] = {vec({1.0})};
        CHECK_THROWS_AS(adam_step(ps, grads, s, 1e-3), ShapeError);
    }
}
