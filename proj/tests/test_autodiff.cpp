#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdist/check_battery.hpp"
#include "mdist/grad_check.hpp"
#include "mdist/losses.hpp"
#include "mdist/rng.hpp"
#include "mdist/tape.hpp"

using namespace mdist;

TEST_CASE("primitive forward values") {
    Tape t;
    SUBCASE("relu clamps negatives") {
        Tape::NodeId x = t.leaf(Tensor({3}, {-1, 0, 2}));
        CHECK(t.value(t.relu(x)).data == std::vector<double>{0, 0, 2});
    }
    SUBCASE("matmul shape algebra") {
        Tape::NodeId a = t.leaf(Tensor::full({2, 3}, 1.0));
        Tape::NodeId b = t.leaf(Tensor::full({3, 1}, 2.0));
        const Tensor& out = t.value(t.matmul(a, b));
        CHECK(out.shape == Shape{2, 1});
        CHECK(out.data == std::vector<double>{6, 6});
    }
    SUBCASE("l2norm over last axis, 3-4-5 triangle") {
        Tape::NodeId x = t.leaf(Tensor({1, 2}, {3, 4}));
        const Tensor& out = t.value(t.l2norm(x, 1));
        CHECK(out.shape == Shape{1});
        CHECK(out.data[0] == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("sum and mean over axes") {
        Tape::NodeId x = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
        CHECK(t.value(t.sum(x, {0})).data == std::vector<double>{4, 6});
        CHECK(t.value(t.mean_all(x)).scalar_value() == 2.5);
    }
    SUBCASE("abs and square") {
        Tape::NodeId x = t.leaf(Tensor({3}, {-2, 0, 3}));
        CHECK(t.value(t.abs(x)).data == std::vector<double>{2, 0, 3});
        CHECK(t.value(t.square(x)).data == std::vector<double>{4, 0, 9});
    }
    SUBCASE("broadcast of a scalar") {
        Tape::NodeId c = t.constant(3.0);
        const Tensor& out = t.value(t.broadcast_to(c, {2, 2}));
        CHECK(out.data == std::vector<double>{3, 3, 3, 3});
    }
}

TEST_CASE("primitive rejections carry the op name and shapes") {
    Tape t;
    Tape::NodeId a = t.leaf(Tensor::zeros({2, 3}));
    Tape::NodeId b = t.leaf(Tensor::zeros({4, 5}));
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("add"), Error);
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("[2,3]"), Error);
    CHECK_THROWS_AS(t.sqrt(t.leaf(Tensor({1}, {-1.0}))), Error);
    CHECK_THROWS_AS(t.gather_rows(a, {7}), Error);
    CHECK_THROWS_AS(t.reshape(a, {5}), Error);
}

TEST_CASE("backward basics") {
    SUBCASE("power rule: f(x)=x^2 at 3 gives 6") {
        Tape t;
        Tape::NodeId x = t.leaf(Tensor::scalar(3.0));
        Tape::NodeId y = t.sum_all(t.square(x));
        std::vector<Tensor> g = t.backward(y);
        CHECK(g[x].scalar_value() == doctest::Approx(6.0));
    }
    SUBCASE("relu flat region: f(x)=relu(x) at -1 gives 0") {
        Tape t;
        Tape::NodeId x = t.leaf(Tensor::scalar(-1.0));
        std::vector<Tensor> g = t.backward(t.sum_all(t.relu(x)));
        CHECK(g[x].scalar_value() == 0.0);
    }
    SUBCASE("non-scalar root rejected") {
        Tape t;
        Tape::NodeId x = t.leaf(Tensor::zeros({3}));
        CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("scalar"), Error);
    }
    SUBCASE("nodes unreachable from the root get zero gradients") {
        Tape t;
        Tape::NodeId x = t.leaf(Tensor::scalar(2.0));
        Tape::NodeId unused = t.square(x);  // separate branch
        Tape::NodeId y = t.sum_all(t.mul(x, t.constant(5.0)));
        std::vector<Tensor> g = t.backward(y);
        CHECK(g[x].scalar_value() == doctest::Approx(5.0));
        CHECK(g[unused].scalar_value() == 0.0);
    }
    SUBCASE("gradients have parameter shapes") {
        Tape t;
        Tape::NodeId w = t.leaf(Tensor::full({3, 2}, 0.5));
        Tape::NodeId y = t.sum_all(t.matmul(t.leaf(Tensor::full({1, 3}, 1.0)), w));
        std::vector<Tensor> g = t.backward(y);
        CHECK(g[w].shape == Shape{3, 2});
    }
}

TEST_CASE("matmul gradient matches central differences") {
    Rng rng(11);
    Tensor w = Tensor::zeros({3, 3});
    for (double& v : w.data) v = rng.uniform(-1, 1);
    Tensor vec = Tensor::zeros({3, 1});
    for (double& v : vec.data) v = rng.uniform(-1, 1);
    GradCheckResult res = grad_check(
        [vec](Tape& t, Tape::NodeId x) { return t.sum_all(t.matmul(x, t.leaf(vec))); }, w, 1e-5);
    CHECK(res.finite);
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("grad_check oracle cases") {
    SUBCASE("sum of squares at a random 10-vector") {
        Rng rng(42);
        Tensor x = Tensor::zeros({10});
        for (double& v : x.data) v = rng.uniform(-2, 2);
        GradCheckResult res =
            grad_check([](Tape& t, Tape::NodeId x_) { return t.sum_all(t.square(x_)); }, x, 1e-5);
        CHECK(res.finite);
        CHECK(res.max_rel_error < 1e-6);
    }
    SUBCASE("constant function has zero error") {
        Tensor x = Tensor::full({4}, 1.5);
        GradCheckResult res =
            grad_check([](Tape& t, Tape::NodeId) { return t.constant(7.0); }, x, 1e-5);
        CHECK(res.finite);
        CHECK(res.max_rel_error == 0.0);
    }
    SUBCASE("triplet loss at a non-degenerate triplet") {
        // hinge active: d+ = 2, d- = 1, margin 0.5
        Tensor point({3, 2}, {0, 0, 2, 0, 0, 1});
        GradCheckResult res = grad_check(
            [](Tape& t, Tape::NodeId x) {
                return triplet_loss(t, t.gather_rows(x, {0}), t.gather_rows(x, {1}),
                                    t.gather_rows(x, {2}), 0.5);
            },
            point, 1e-5);
        CHECK(res.finite);
        CHECK(res.max_rel_error < 1e-5);
    }
    SUBCASE("a wrong gradient is flagged") {
        // f(x) = sum(x * detach(x)): analytic gradient is x, true gradient 2x
        Tensor x = Tensor::full({3}, 1.0);
        GradCheckResult res = grad_check(
            [](Tape& t, Tape::NodeId x_) {
                Tape::NodeId frozen = t.leaf(t.value(x_));
                return t.sum_all(t.mul(x_, frozen));
            },
            x, 1e-5);
        CHECK(res.max_rel_error > 0.1);
    }
}

TEST_CASE("backward is linear in the objective") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::zeros({6});
        for (double& v : x.data) v = rng.uniform(0.2, 2.0);
        const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);

        auto grads_of = [&x](auto builder) {
            Tape t;
            Tape::NodeId xn = t.leaf(x);
            std::vector<Tensor> g = t.backward(builder(t, xn));
            return g[xn];
        };
        auto f = [](Tape& t, Tape::NodeId xn) { return t.sum_all(t.square(xn)); };
        auto g = [](Tape& t, Tape::NodeId xn) { return t.sum_all(t.sqrt(xn)); };
        Tensor gf = grads_of(f);
        Tensor gg = grads_of(g);
        Tensor gcombo = grads_of([&](Tape& t, Tape::NodeId xn) {
            return t.add(t.mul(t.constant(a), f(t, xn)), t.mul(t.constant(b), g(t, xn)));
        });
        for (std::size_t i = 0; i < x.numel(); ++i) {
            CHECK(gcombo[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("evaluation is deterministic") {
    Rng rng(3);
    Tensor x = Tensor::zeros({4, 4});
    for (double& v : x.data) v = rng.uniform(-1, 1);
    auto run = [&]() {
        Tape t;
        Tape::NodeId xn = t.leaf(x);
        Tape::NodeId y = t.mean_all(t.relu(t.matmul(xn, xn)));
        std::vector<Tensor> g = t.backward(y);
        return std::pair{t.value(y).scalar_value(), g[xn]};
    };
    auto [y1, g1] = run();
    auto [y2, g2] = run();
    CHECK(y1 == y2);
    CHECK(g1.data == g2.data);
}

TEST_CASE("per-primitive gradients match finite differences over 100 random trials") {
    std::vector<CheckResult> results = run_gradient_battery(100, 987);
    for (const CheckResult& res : results) {
        INFO(res.name, " max_rel_error=", res.max_rel_error, " ", res.detail);
        CHECK(res.pass);
    }
}
