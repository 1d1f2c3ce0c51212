#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "headspec/grad_check.hpp"
#include "headspec/ops.hpp"
#include "headspec/rng.hpp"
#include "headspec/tensor.hpp"

using namespace headspec;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Eigen::ArrayXd v(shape_numel(s));
    for (long i = 0; i < v.size(); i++) v[i] = rng.uniform(lo, hi);
    return Tensor::from_array(s, std::move(v));
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Tensor x = Tensor::from({2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("matmul by identity preserves input") {
    Rng rng(7);
    Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor x = random_tensor({2, 2}, rng);
    Tensor y = matmul(I, x);
    for (int i = 0; i < 4; i++) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
    for (uint64_t seed = 1; seed <= 5; seed++) {
        Rng rng(seed);
        Tensor x = random_tensor({7}, rng, -20.0, 20.0);
        Tensor y = softmax_lastdim(x);
        double s = y.values().sum();
        CHECK(std::abs(s - 1.0) <= 1e-12);
        CHECK(y.values().minCoeff() >= 0.0);
        CHECK(y.values().maxCoeff() <= 1.0);
    }
}

TEST_CASE("softmax tolerates large logits without overflow") {
    Tensor x = Tensor::from({3}, {1000.0, 999.0, -1000.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.values().isFinite().all());
    CHECK(std::abs(y.values().sum() - 1.0) <= 1e-12);
}

TEST_CASE("d(x^2)/dx at x=3 is 6") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    Tensor y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("softmax-dot-c gradient matches the analytic jacobian") {
    Rng rng(11);
    Tensor x = random_tensor({3}, rng);
    Tensor c = random_tensor({3}, rng);
    Tensor xt = x.detached().set_requires_grad(true);
    backward(sum_all(mul(softmax_lastdim(xt), c)));

    // J_ij = y_i (delta_ij - y_j); grad = J^T c.
    Eigen::ArrayXd y = softmax_lastdim(x).values();
    for (int i = 0; i < 3; i++) {
        double gi = 0.0;
        for (int j = 0; j < 3; j++) {
            const double jac = y[j] * ((i == j ? 1.0 : 0.0) - y[i]);
            gi += jac * c[j];
        }
        CHECK(xt.grad()[i] == doctest::Approx(gi).epsilon(1e-12));
    }
}

TEST_CASE("gradient of mean is 1/n per element") {
    Tensor x = Tensor::from({4}, {1, 2, 3, 4}).set_requires_grad(true);
    backward(mean_all(x));
    for (int i = 0; i < 4; i++) CHECK(x.grad()[i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gradients accumulate over fan-out") {
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    Tensor y = add(mul(x, x), x);  // x^2 + x -> 2x + 1 = 5
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("untracked inputs receive no gradient") {
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    Tensor c = Tensor::scalar(3.0);
    backward(mul(x, c));
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("shape errors name the op and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("finite differences: quadratic is exact to 1e-8") {
    Tensor x = Tensor::scalar(3.0);
    double err = finite_difference_check([](const Tensor& t) { return mul(t, t); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite differences: every primitive composite") {
    Rng rng(21);
    auto check = [&](const char* name, auto f, const Shape& s, double lo, double hi) {
        for (int rep = 0; rep < 3; rep++) {
            Tensor x = random_tensor(s, rng, lo, hi);
            double err = finite_difference_check(f, x, 1e-5);
            INFO(name << " rep " << rep);
            CHECK(err < 1e-6);
        }
    };
    Tensor w = random_tensor({4, 3}, rng);
    check("matmul", [&](const Tensor& t) { return sum_all(mul(matmul(t, w), matmul(t, w))); },
          {2, 4}, -1, 1);
    Tensor wnt = random_tensor({5, 4}, rng);
    check("matmul_nt", [&](const Tensor& t) { return sum_all(tanh(matmul_nt(t, wnt))); },
          {2, 3, 4}, -1, 1);
    check("softmax", [](const Tensor& t) { return sum_all(mul(softmax_lastdim(t), softmax_lastdim(t))); },
          {2, 5}, -2, 2);
    check("log", [](const Tensor& t) { return sum_all(log(t)); }, {6}, 0.5, 2.0);
    check("exp", [](const Tensor& t) { return sum_all(exp(t)); }, {6}, -1, 1);
    check("tanh", [](const Tensor& t) { return sum_all(tanh(t)); }, {6}, -2, 2);
    check("sqrt", [](const Tensor& t) { return sum_all(sqrt(t)); }, {6}, 0.5, 3.0);
    check("clamp_min", [](const Tensor& t) { return sum_all(mul(clamp_min(t, 0.2), t)); }, {6},
          0.5, 2.0);
    check("div", [&](const Tensor& t) { return sum_all(div(t, add_scalar(mul(t, t), 1.0))); }, {6},
          -2, 2);
    check("reduce_sum", [](const Tensor& t) { return sum_all(mul(reduce_sum(t, {1}), reduce_sum(t, {1}))); },
          {3, 4}, -1, 1);
    check("reduce_mean_keepdims",
          [](const Tensor& t) { return sum_all(mul(t, reduce_mean(t, {1}, true))); }, {3, 4}, -1, 1);
    check("index_select",
          [](const Tensor& t) { return sum_all(mul(index_select(t, 1, {2, 0, 2}), Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}))); },
          {3, 4}, -1, 1);
    check("concat",
          [](const Tensor& t) {
              Tensor two = mul_scalar(t, 2.0);
              return sum_all(tanh(concat({t, two}, 1)));
          },
          {2, 3}, -1, 1);
    check("split_merge",
          [](const Tensor& t) { return sum_all(mul(merge_heads(split_heads(t, 2)), t)); }, {2, 3, 4},
          -1, 1);
    check("rmsnorm", [](const Tensor& t) { return sum_all(mul(rmsnorm(t), t)); }, {2, 5}, -2, 2);
    check("broadcast_mul",
          [&](const Tensor& t) {
              Tensor row = Tensor::from({1, 4}, {0.5, -1.0, 2.0, 0.25});
              return sum_all(mul(t, row));
          },
          {3, 4}, -1, 1);
    check("reshape", [](const Tensor& t) { return sum_all(mul(reshape(t, {6}), reshape(t, {6}))); },
          {2, 3}, -1, 1);
}

TEST_CASE("backward twice on one graph is bit-identical") {
    Rng rng(33);
    Tensor x = random_tensor({4, 4}, rng).set_requires_grad(true);
    Tensor w = random_tensor({4, 4}, rng).set_requires_grad(true);
    Tensor loss = sum_all(tanh(matmul(x, w)));
    backward(loss);
    Eigen::ArrayXd g1 = x.grad();
    Eigen::ArrayXd gw1 = w.grad();
    backward(loss);
    CHECK(std::memcmp(g1.data(), x.grad().data(), sizeof(double) * 16) == 0);
    CHECK(std::memcmp(gw1.data(), w.grad().data(), sizeof(double) * 16) == 0);
}

TEST_CASE("identical seeds rebuild identical graphs and gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({3, 5}, rng).set_requires_grad(true);
        Tensor w = random_tensor({5, 2}, rng).set_requires_grad(true);
        backward(sum_all(softmax_lastdim(matmul(x, w))));
        return std::make_pair(x.grad(), w.grad());
    };
    auto [a1, b1] = run(99);
    auto [a2, b2] = run(99);
    CHECK(std::memcmp(a1.data(), a2.data(), sizeof(double) * static_cast<size_t>(a1.size())) == 0);
    CHECK(std::memcmp(b1.data(), b2.data(), sizeof(double) * static_cast<size_t>(b1.size())) == 0);
}

TEST_CASE("no-grad mode records no graph") {
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("forward ops keep finite values finite") {
    Rng rng(55);
    Tensor x = random_tensor({4, 9}, rng, -50.0, 50.0);
    CHECK(softmax_lastdim(x).values().isFinite().all());
    CHECK(safe_log(x).values().isFinite().all());
    CHECK(rmsnorm(x).values().isFinite().all());
    CHECK(safe_log(Tensor::zeros({3})).values().isFinite().all());
}

TEST_CASE("index_select rejects out-of-range indices") {
    Tensor x = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(index_select(x, 1, {3}), std::invalid_argument);
    CHECK_THROWS_AS(index_select(x, 2, {0}), std::invalid_argument);
}

TEST_CASE("broadcasting matches explicit expansion") {
    Tensor a = Tensor::from({2, 1, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({2, 1}, {10, 20});
    Tensor y = mul(a, b);  // -> [2,2,3]
    CHECK(y.shape() == Shape{2, 2, 3});
    // a[0,:,:] * 10, a[0,:,:] * 20, a[1,:,:] * 10, a[1,:,:] * 20
    std::vector<double> want = {10, 20, 30, 20, 40, 60, 40, 50, 60, 80, 100, 120};
    for (int i = 0; i < 12; i++) CHECK(y[i] == doctest::Approx(want[static_cast<size_t>(i)]));
}

TEST_CASE("broadcast gradients reduce over expanded dims") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
    Tensor b = Tensor::from({2}, {10, 100}).set_requires_grad(true);
    backward(sum_all(mul(a, b)));
    CHECK(a.grad()[0] == doctest::Approx(10));
    CHECK(a.grad()[1] == doctest::Approx(100));
    CHECK(b.grad()[0] == doctest::Approx(1 + 3));
    CHECK(b.grad()[1] == doctest::Approx(2 + 4));
}

TEST_CASE("finite_difference_check flags non-finite evaluations") {
    Tensor x = Tensor::scalar(0.0);
    CHECK_THROWS_AS(finite_difference_check(
                        [](const Tensor& t) { return log(t); }, x, 1e-5),
                    std::runtime_error);
}
