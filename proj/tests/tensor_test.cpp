#include "lion/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace lion;

TEST(Rng, SameSeedSameSequence) {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, RandnDeterministic) {
    Rng a(7), b(7);
    Tensor x = Tensor::randn({4}, a);
    Tensor y = Tensor::randn({4}, b);
    EXPECT_EQ(x.data(), y.data());
}

TEST(Rng, RandnMeanNearZero) {
    Rng rng(1);
    Tensor x = Tensor::randn({100000}, rng);
    double m = 0.0;
    for (double v : x.data()) m += v;
    m /= x.numel();
    EXPECT_LT(std::abs(m), 0.02);
}

TEST(Tensor, ZerosAndInvalidShapes) {
    Tensor z = Tensor::zeros({2, 2});
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
    EXPECT_THROW(Tensor::zeros({-1}), ShapeError);
    EXPECT_THROW(Tensor::zeros({}), ShapeError);
    Rng rng(0);
    EXPECT_THROW(Tensor::randn({3, -2}, rng), ShapeError);
    EXPECT_THROW(Tensor::randn({3}, rng, 0.0), ContractError);
}

TEST(Tensor, MatmulHandCases) {
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(3);
    Tensor a = Tensor::randn({3, 3}, rng);
    Tensor ia = matmul(eye, a);
    EXPECT_EQ(ia.data(), a.data());

    Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::from_data({2, 1}, {5, 6});
    Tensor r = matmul(m, v);
    EXPECT_DOUBLE_EQ(r.at(0), 17.0);
    EXPECT_DOUBLE_EQ(r.at(1), 39.0);

    EXPECT_THROW(matmul(m, Tensor::zeros({3, 1})), ShapeError);
}

TEST(Tensor, AddIdentityAndBroadcast) {
    Rng rng(5);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor s = add(a, zeros_like(a));
    EXPECT_EQ(s.data(), a.data());

    Tensor b = Tensor::from_data({3}, {1, 2, 3});
    Tensor c = add(a, b);
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(c.at(r * 3 + j), a.at(r * 3 + j) + b.at(j));

    EXPECT_THROW(add(a, Tensor::zeros({2})), ShapeError);
    EXPECT_THROW(mul(a, Tensor::zeros({4})), ShapeError);
}

TEST(Tensor, ReluAndSoftmaxValues) {
    Tensor x = Tensor::from_data({3}, {-1, 0, 2});
    Tensor y = relu(x);
    EXPECT_EQ(y.at(0), 0.0);
    EXPECT_EQ(y.at(1), 0.0);
    EXPECT_EQ(y.at(2), 2.0);

    Tensor p = softmax(Tensor::from_data({2}, {0, 0}));
    EXPECT_DOUBLE_EQ(p.at(0), 0.5);
    EXPECT_DOUBLE_EQ(p.at(1), 0.5);
}

TEST(Tensor, SoftmaxSimplexForExtremeInputs) {
    Tensor x = Tensor::from_data({2, 4}, {700, -700, 3, 0, -1e9, 1e9, 0, 5});
    Tensor p = softmax(x, 1);
    for (int64_t r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < 4; ++j) {
            EXPECT_GE(p.at(r * 4 + j), 0.0);
            s += p.at(r * 4 + j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, CrossEntropyUniformCase) {
    Tensor logits = Tensor::zeros({3, 8});
    Tensor loss = cross_entropy(logits, {0, 5, 7});
    EXPECT_NEAR(loss.item(), std::log(8.0), 1e-12);

    EXPECT_THROW(cross_entropy(logits, {-100, -100, -100}), ContractError);
    EXPECT_THROW(cross_entropy(logits, {0, 9, 0}), ContractError);
}

TEST(Tensor, ConcatAndSlice) {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({1, 2}, {5, 6});
    Tensor c = concat({a, b}, 0);
    EXPECT_EQ(c.shape(), (Shape{3, 2}));
    EXPECT_DOUBLE_EQ(c.at(4), 5.0);
    EXPECT_THROW(concat({}, 0), ContractError);

    Tensor s = slice(c, 0, 1, 2);
    EXPECT_EQ(s.shape(), (Shape{2, 2}));
    EXPECT_DOUBLE_EQ(s.at(0), 3.0);
    EXPECT_THROW(slice(c, 0, 2, 5), ShapeError);
}

TEST(Backward, SumGivesOnes) {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}).set_requires_grad(true);
    sum(x).backward();
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, ElementwiseSquare) {
    Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
    sum(mul(x, x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, GradsAccumulateAcrossCalls) {
    Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
    Tensor loss = sum(mul(x, x));
    loss.backward();
    std::vector<double> once = x.grad();
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * once[0]);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2.0 * once[1]);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
    EXPECT_THROW(mul(x, x).backward(), ContractError);
}

// Shared-subexpression DAG: f = (a*b + a) * (a*b), hand chain rule:
// u = a*b, f = (u + a)*u, df/da = b*(2u + a) + u, df/db = a*(2u + a).
TEST(Backward, SharedSubexpressionMatchesHandChainRule) {
    Tensor a = Tensor::from_data({1}, {1.5}).set_requires_grad(true);
    Tensor b = Tensor::from_data({1}, {-2.0}).set_requires_grad(true);
    Tensor u = mul(a, b);
    Tensor f = mul(add(u, a), u);
    f.backward();
    double av = 1.5, bv = -2.0, uv = av * bv;
    EXPECT_NEAR(a.grad()[0], bv * (2 * uv + av) + uv, 1e-12);
    EXPECT_NEAR(b.grad()[0], av * (2 * uv + av), 1e-12);
}

TEST(Backward, FrozenLeafGetsNoGrad) {
    Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4}); // requires_grad defaults false
    Tensor x = Tensor::from_data({1, 2}, {1, 1}).set_requires_grad(true);
    sum(matmul(x, w)).backward();
    EXPECT_FALSE(w.has_grad());
    EXPECT_TRUE(x.has_grad());
}

TEST(GradCheck, LinearIsNearExact) {
    Rng rng(11);
    Tensor w = Tensor::randn({4, 3}, rng);
    Tensor x = Tensor::randn({2, 4}, rng);
    double err = grad_check([&](const Tensor& t) { return sum(matmul(t, w)); }, x, 1e-5);
    EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, ReluAwayFromKink) {
    Tensor x = Tensor::from_data({4}, {0.7, -1.3, 2.2, -0.4});
    double err = grad_check([](const Tensor& t) { return sum(relu(t)); }, x, 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ReluKinkCoordinateExcluded) {
    Tensor x = Tensor::from_data({3}, {0.0, 1.0, -1.0});
    double err = grad_check([](const Tensor& t) { return sum(relu(t)); }, x, 1e-5, {0});
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, CoreOpsUnderTolerance) {
    Rng rng(23);
    Tensor x = Tensor::randn({3, 5}, rng);
    EXPECT_LT(grad_check([](const Tensor& t) { return sum(gelu(t)); }, x), 1e-6);
    EXPECT_LT(grad_check([](const Tensor& t) { return sum(mul(softmax(t, 1), t)); }, x), 1e-5);

    Tensor gm = Tensor::randn({5}, rng);
    Tensor bt = Tensor::randn({5}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(layernorm(t, gm, bt), t)); }, x), 1e-5);
    Tensor x2 = Tensor::randn({3, 5}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(layernorm(x2, t, bt), x2)); }, gm), 1e-5);

    Tensor logits = Tensor::randn({4, 6}, rng);
    std::vector<int> targets{1, -100, 3, 5};
    EXPECT_LT(grad_check([&](const Tensor& t) { return cross_entropy(t, targets); }, logits), 1e-6);

    Tensor table = Tensor::randn({7, 3}, rng);
    std::vector<int> ids{2, 2, 5};
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(embed(t, ids), embed(t, ids))); }, table), 1e-5);
}

TEST(GradCheck, MhaCoreSelfAndCross) {
    Rng rng(31);
    Tensor q = Tensor::randn({3, 4}, rng);
    Tensor k = Tensor::randn({3, 4}, rng);
    Tensor v = Tensor::randn({3, 4}, rng);
    auto through_q = [&](const Tensor& t) { return sum(mul(mha_core(t, k, v, 2, false), t)); };
    EXPECT_LT(grad_check(through_q, q), 1e-5);
    auto through_k = [&](const Tensor& t) { return sum(mha_core(q, t, v, 2, false)); };
    EXPECT_LT(grad_check(through_k, k), 1e-5);
    auto through_v = [&](const Tensor& t) { return sum(mha_core(q, k, t, 2, true)); };
    EXPECT_LT(grad_check(through_v, v), 1e-5);
}

TEST(GradCheck, ReplaceRowsRoutesGradient) {
    Rng rng(37);
    Tensor x = Tensor::randn({4, 3}, rng);
    Tensor repl = Tensor::randn({1, 3}, rng);
    auto fx = [&](const Tensor& t) { return sum(mul(replace_rows(t, {1, 3}, repl, {0, 0}), t)); };
    EXPECT_LT(grad_check(fx, x), 1e-5);
    auto fr = [&](const Tensor& t) { return sum(mul(replace_rows(x, {1, 3}, t, {0, 0}), x)); };
    EXPECT_LT(grad_check(fr, repl), 1e-5);
}

TEST(Determinism, SameSeedSameOpSequenceBitIdentical) {
    auto run = []() {
        Rng rng(99);
        Tensor a = Tensor::randn({4, 4}, rng).set_requires_grad(true);
        Tensor b = Tensor::randn({4, 4}, rng);
        Tensor loss = sum(mul(gelu(matmul(a, b)), a));
        loss.backward();
        std::vector<double> out = loss.data();
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(Tensor, ValidityCheckFlagsNaN) {
    Tensor x = Tensor::from_data({2}, {1.0, std::nan("")});
    EXPECT_FALSE(x.all_finite());
    EXPECT_TRUE(Tensor::zeros({3}).all_finite());
}
