#include <doctest.h>

#include <cmath>

#include "coattn/tensor.hpp"
#include "oracles.hpp"

using namespace coattn;

TEST_CASE("matmul identity and small cases") {
    Tensor eye = from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = from_data({2, 2}, {3, 4, 5, 6});
    Tensor c = matmul(eye, b);
    for (int i = 0; i < 4; ++i) CHECK((*c.data)[i] == (*b.data)[i]);

    Tensor r = matmul(from_data({1, 2}, {1, 2}), from_data({2, 1}, {3, 4}));
    CHECK(r.item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul matches triple-loop oracle at seed 7") {
    Tensor a = oracle::random_tensor({3, 4}, 7);
    Tensor b = oracle::random_tensor({4, 2}, 77);
    Tensor c = matmul(a, b);
    auto ref = oracle::matmul(*a.data, *b.data, 3, 4, 2);
    CHECK(oracle::max_abs_diff(c, ref) < 1e-12);
}

TEST_CASE("matmul batched and broadcast rhs") {
    Tensor a = oracle::random_tensor({2, 3, 4}, 9);
    Tensor b = oracle::random_tensor({4, 5}, 10);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape == Shape{2, 3, 5});
    for (int64_t bi = 0; bi < 2; ++bi) {
        std::vector<double> ab(a.ptr() + bi * 12, a.ptr() + (bi + 1) * 12);
        auto ref = oracle::matmul(ab, *b.data, 3, 4, 5);
        for (int64_t i = 0; i < 15; ++i)
            CHECK((*c.data)[bi * 15 + i] == doctest::Approx(ref[i]).epsilon(1e-13));
    }
}

TEST_CASE("matmul shape errors") {
    CHECK_THROWS_AS(matmul(from_data({2, 3}, {1, 2, 3, 4, 5, 6}), from_data({2, 2}, {1, 2, 3, 4})),
                    ShapeMismatch);
    CHECK_THROWS_AS(matmul(oracle::random_tensor({2, 2, 3}, 1), oracle::random_tensor({3, 3, 2}, 2)),
                    ShapeMismatch);
}

TEST_CASE("softmax uniform, shift, and large-magnitude stability") {
    Tensor u = softmax_lastdim(from_data({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK((*u.data)[i] == doctest::Approx(1.0 / 3).epsilon(1e-14));

    for (double c : {0.0, -5.0, 1000.0}) {
        Tensor s = softmax_lastdim(from_data({2}, {c, c + std::log(2.0)}));
        CHECK((*s.data)[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
        CHECK((*s.data)[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    }

    Tensor big = softmax_lastdim(from_data({2}, {1000.0, 1001.0}));
    auto ref = oracle::softmax_row({1000.0, 1001.0});
    CHECK(std::isfinite((*big.data)[0]));
    CHECK((*big.data)[0] == doctest::Approx(ref[0]).epsilon(1e-12));
    CHECK((*big.data)[1] == doctest::Approx(ref[1]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to 1 within 1e-12 including magnitude 1e3") {
    Tensor x = oracle::random_tensor({20, 7}, 21, -1e3, 1e3);
    Tensor y = softmax_lastdim(x);
    for (int64_t r = 0; r < 20; ++r) {
        double sum = 0.0;
        for (int64_t i = 0; i < 7; ++i) sum += (*y.data)[r * 7 + i];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax shift invariance within 1e-12") {
    Tensor x = oracle::random_tensor({4, 5}, 31);
    Tensor y0 = softmax_lastdim(x);
    Tensor y1 = softmax_lastdim(add(x, 123.0));
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(std::abs((*y0.data)[i] - (*y1.data)[i]) < 1e-12);
}

TEST_CASE("elementwise basics") {
    Tensor r = relu(from_data({3}, {-1, 0, 2}));
    CHECK((*r.data)[0] == 0.0);
    CHECK((*r.data)[1] == 0.0);
    CHECK((*r.data)[2] == 2.0);

    Tensor x = oracle::random_tensor({4}, 3);
    Tensor y = add(x, zeros({4}));
    for (int64_t i = 0; i < 4; ++i) CHECK((*y.data)[i] == (*x.data)[i]);

    Tensor m = mul(from_data({2}, {2, 3}), from_data({2}, {4, 5}));
    CHECK((*m.data)[0] == 8.0);
    CHECK((*m.data)[1] == 15.0);

    CHECK_THROWS_AS(add(zeros({2}), zeros({3})), ShapeMismatch);
}

TEST_CASE("shape ops semantics") {
    Tensor x = from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = reshape(x, {3, 2});
    for (int64_t i = 0; i < 6; ++i) CHECK((*r.data)[i] == i + 1);
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeMismatch);

    Tensor c = concat({from_data({2, 1}, {1, 2}), from_data({2, 1}, {3, 4})}, 1);
    CHECK(c.shape == Shape{2, 2});
    CHECK((*c.data)[0] == 1.0);
    CHECK((*c.data)[1] == 3.0);
    CHECK((*c.data)[2] == 2.0);
    CHECK((*c.data)[3] == 4.0);

    Tensor m = mean_axis(from_data({2, 2}, {1, 2, 3, 4}), 0);
    CHECK((*m.data)[0] == doctest::Approx(2.0));
    CHECK((*m.data)[1] == doctest::Approx(3.0));

    CHECK_THROWS_AS(transpose(x, {0, 0}), InvalidPermutation);
    CHECK_THROWS_AS(transpose(x, {0}), InvalidPermutation);
    CHECK_THROWS_AS(mean_axis(x, 5), AxisOutOfRange);
    CHECK_THROWS_AS(slice(x, 1, 2, 2), AxisOutOfRange);

    Tensor t = transpose(x, {1, 0});
    CHECK(t.shape == Shape{3, 2});
    CHECK((*t.data)[0] == 1.0);
    CHECK((*t.data)[1] == 4.0);
    CHECK((*t.data)[2] == 2.0);

    Tensor s = slice(x, 1, 1, 3);
    CHECK(s.shape == Shape{2, 2});
    CHECK((*s.data)[0] == 2.0);
    CHECK((*s.data)[2] == 5.0);
}

TEST_CASE("backward: d(sum x*x) = 2x") {
    Tensor x = from_data({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK((*x.grad)[0] == doctest::Approx(2.0));
    CHECK((*x.grad)[1] == doctest::Approx(4.0));
    CHECK((*x.grad)[2] == doctest::Approx(6.0));
}

TEST_CASE("backward: fan-out gradients accumulate additively") {
    Tensor x = from_data({2, 2}, {1, 2, 3, 4});
    Tensor w = from_data({2, 2}, {0.5, -1, 2, 0.25});

    auto branch_grad = [&](int which) {
        Tensor xx = x.clone();
        xx.set_requires_grad(true);
        Tape tape;
        Tensor y = which == 0 ? sum_all(matmul(xx, w)) : sum_all(mul(xx, xx));
        backward(y);
        return *xx.grad;
    };
    std::vector<double> g0 = branch_grad(0), g1 = branch_grad(1);

    Tensor xx = x.clone();
    xx.set_requires_grad(true);
    {
        Tape tape;
        Tensor y = add(sum_all(matmul(xx, w)), sum_all(mul(xx, xx)));
        backward(y);
    }
    for (int64_t i = 0; i < 4; ++i)
        CHECK((*xx.grad)[i] == doctest::Approx(g0[i] + g1[i]).epsilon(1e-13));
}

TEST_CASE("backward errors: NotScalar and DetachedGraph") {
    Tensor x = from_data({2}, {1, 2});
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(backward(y), NotScalar);
    }
    Tensor loss;
    {
        Tape tape;
        loss = sum_all(mul(x, x));
    }
    // tape is gone; a fresh tape does not own the loss
    Tape other;
    CHECK_THROWS_AS(backward(loss), DetachedGraph);
}

TEST_CASE("grad_check: quadratic and softmax-sum") {
    auto quad = [](const Tensor& t) { return sum_all(mul(t, t)); };
    CHECK(grad_check(quad, from_data({2}, {1, 2})) < 1e-8);

    // sum softmax(x) == 1, so the gradient is ~0 everywhere
    auto sm = [](const Tensor& t) { return sum_all(softmax_lastdim(t)); };
    CHECK(grad_check(sm, oracle::random_tensor({4}, 5)) < 1e-8);
}

TEST_CASE("grad_check: composite graph with every tensor op") {
    auto f = [](const Tensor& t) {
        Tensor a = reshape(t, {2, 6});
        Tensor b = transpose(a, {1, 0});         // [6,2]
        Tensor c = matmul(a, b);                 // [2,2]
        Tensor d = softmax_lastdim(c);
        Tensor e = concat({d, scale(c, 0.5)}, 1); // [2,4]
        Tensor f1 = relu(sub(e, 0.1));
        Tensor g = mean_axis(f1, 1);
        return sum_all(mul(g, g));
    };
    CHECK(grad_check(f, oracle::random_tensor({12}, 13)) < 1e-6);
}

TEST_CASE("ops are deterministic across repeated evaluation") {
    Tensor a = oracle::random_tensor({3, 8, 8}, 40);
    Tensor b = oracle::random_tensor({3, 8, 8}, 41);
    Tensor c1 = matmul(a, b), c2 = matmul(a, b);
    for (int64_t i = 0; i < c1.numel(); ++i) CHECK((*c1.data)[i] == (*c2.data)[i]);
    Tensor s1 = softmax_lastdim(a), s2 = softmax_lastdim(a);
    for (int64_t i = 0; i < s1.numel(); ++i) CHECK((*s1.data)[i] == (*s2.data)[i]);
}

TEST_CASE("softmax EmptyAxis and finite outputs on finite inputs") {
    Tensor x = oracle::random_tensor({2, 3}, 50, -1e3, 1e3);
    Tensor y = softmax_lastdim(x);
    for (double v : *y.data) CHECK(std::isfinite(v));
}
