#include "lion/adapters.hpp"

#include <gtest/gtest.h>

using namespace lion;
using namespace lion::moa;

TEST(Adapter, ZeroInputGivesZeroOutput) {
    Rng rng(1);
    Adapter a = init_adapter(4, 2, rng);
    std::fill(a.w_up.mutable_data().begin(), a.w_up.mutable_data().end(), 0.5);
    Tensor x = Tensor::zeros({3, 4});
    Tensor y = adapter_forward(x, a);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), 0.0);
}

TEST(Adapter, RankOneHandOracle) {
    // W_d = e_1, W_u = e_1ᵀ: output keeps max(x_1, 0) in slot 1, zero elsewhere.
    Adapter a{Tensor::from_data({3, 1}, {1, 0, 0}), Tensor::from_data({1, 3}, {1, 0, 0})};
    Tensor x = Tensor::from_data({2, 3}, {2, -3, 5, -1, 4, 7});
    Tensor y = adapter_forward(x, a);
    EXPECT_DOUBLE_EQ(y.at(0), 2.0);
    EXPECT_DOUBLE_EQ(y.at(1), 0.0);
    EXPECT_DOUBLE_EQ(y.at(2), 0.0);
    EXPECT_DOUBLE_EQ(y.at(3), 0.0); // relu(-1) = 0
    EXPECT_DOUBLE_EQ(y.at(4), 0.0);
    EXPECT_DOUBLE_EQ(y.at(5), 0.0);
}

TEST(Adapter, GradCheck) {
    Rng rng(2);
    Adapter a = init_adapter(4, 2, rng, 0.5);
    a.w_up = Tensor::randn({2, 4}, rng, 0.5);
    Tensor x = Tensor::randn({3, 4}, rng);
    auto fx = [&](const Tensor& t) { return sum(mul(adapter_forward(t, a), t)); };
    EXPECT_LT(grad_check(fx, x), 1e-6);
    auto fw = [&](const Tensor& t) {
        Adapter b = a;
        b.w_down = t;
        return sum(adapter_forward(x, b));
    };
    EXPECT_LT(grad_check(fw, a.w_down), 1e-6);
}

TEST(AdapterResidual, DegenerateAndLinearCases) {
    Rng rng(3);
    Tensor f = Tensor::randn({2, 3}, rng);
    Tensor zero = Tensor::zeros({2, 3});
    EXPECT_EQ(adapter_residual(f, zero).data(), f.data());
    Tensor twice = adapter_residual(f, f);
    for (int64_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(twice.at(i), 2.0 * f.at(i));
    Tensor g = Tensor::randn({2, 3}, rng);
    EXPECT_EQ(adapter_residual(f, g).data(), add(f, g).data());
    EXPECT_THROW(adapter_residual(f, Tensor::zeros({3, 2})), ShapeError);
}

TEST(Router, AllZeroGatesReproduceFfn) {
    Rng rng(4);
    Tensor f = Tensor::randn({3, 4}, rng);
    std::vector<Tensor> outs{Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
    RouterGates zero{Tensor::zeros({2, 2, 4})};
    Tensor y = router_forward(f, outs, zero, TaskType::image_level);
    EXPECT_EQ(y.data(), f.data());
}

TEST(Router, UnitGateReducesToAdapterResidual) {
    Rng rng(5);
    Tensor f = Tensor::randn({3, 4}, rng);
    std::vector<Tensor> outs{Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
    RouterGates g = init_gates(2, 4);
    Tensor img = router_forward(f, outs, g, TaskType::image_level);
    EXPECT_EQ(img.data(), adapter_residual(f, outs[0]).data());
    Tensor reg = router_forward(f, outs, g, TaskType::region_level);
    EXPECT_EQ(reg.data(), adapter_residual(f, outs[1]).data());
}

TEST(Router, GateCountMismatchRejected) {
    Rng rng(6);
    Tensor f = Tensor::randn({3, 4}, rng);
    std::vector<Tensor> outs{Tensor::randn({3, 4}, rng)};
    RouterGates g = init_gates(2, 4);
    EXPECT_THROW(router_forward(f, outs, g, TaskType::image_level), ShapeError);
}

TEST(Router, LinearityInGates) {
    Rng rng(7);
    Tensor f = Tensor::randn({2, 3}, rng);
    std::vector<Tensor> outs{Tensor::randn({2, 3}, rng), Tensor::randn({2, 3}, rng)};
    RouterGates g{Tensor::randn({2, 2, 3}, rng)};
    double alpha = 2.75;
    RouterGates ga{scale(g.g, alpha)};
    Tensor base = router_forward(f, outs, g, TaskType::region_level);
    Tensor scaled = router_forward(f, outs, ga, TaskType::region_level);
    for (int64_t i = 0; i < f.numel(); ++i)
        EXPECT_NEAR(scaled.at(i) - f.at(i), alpha * (base.at(i) - f.at(i)), 1e-12);
}

TEST(Router, GradCheckOnGates) {
    Rng rng(8);
    Tensor f = Tensor::randn({3, 4}, rng);
    std::vector<Tensor> outs{Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
    RouterGates g = init_gates(2, 4);
    auto fg = [&](const Tensor& t) {
        RouterGates gg{t};
        return sum(mul(router_forward(f, outs, gg, TaskType::image_level), f));
    };
    EXPECT_LT(grad_check(fg, g.g), 1e-6);
}

TEST(Router, GateGradientSparsityFollowsAdapterOutputs) {
    // Adapter 0 output is zero everywhere; its gates get zero gradient while
    // adapter 1's gates (for the active task) receive nonzero gradient.
    Tensor f = Tensor::zeros({2, 3});
    std::vector<Tensor> outs{Tensor::zeros({2, 3}), Tensor::full({2, 3}, 2.0)};
    RouterGates g{Tensor::zeros({2, 2, 3}).set_requires_grad(true)};
    Tensor y = router_forward(f, outs, g, TaskType::region_level);
    sum(y).backward();
    const auto& grad = g.g.grad();
    for (int64_t i = 0; i < 3; ++i) {
        EXPECT_EQ(grad[1 * 6 + 0 * 3 + i], 0.0); // region task, adapter 0 (zero output)
        EXPECT_EQ(grad[1 * 6 + 1 * 3 + i], 4.0); // region task, adapter 1: 2 positions x value 2
        EXPECT_EQ(grad[0 * 6 + 0 * 3 + i], 0.0); // image task untouched
        EXPECT_EQ(grad[0 * 6 + 1 * 3 + i], 0.0);
    }
}

TEST(InitGates, TaskIdentityPattern) {
    RouterGates g = init_gates(2, 3);
    EXPECT_EQ(g.g.shape(), (Shape{2, 2, 3}));
    std::vector<double> expect{1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1};
    EXPECT_EQ(g.g.data(), expect);
    EXPECT_THROW(init_gates(3, 4), ContractError);
}
