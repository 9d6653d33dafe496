#include "lion/nn.hpp"

#include <gtest/gtest.h>

using namespace lion;
using namespace lion::nn;

namespace {

void zero_out(Tensor& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

} // namespace

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
    Rng rng(1);
    AttentionConfig cfg{4, 2, false};
    AttentionParams p = init_attention(4, rng, 0.3);
    Tensor x = Tensor::randn({1, 4}, rng);
    Tensor got = attention(x, std::nullopt, cfg, p);
    Tensor expect = linear(linear(x, p.v), p.o); // softmax over a single key is 1
    for (int64_t i = 0; i < 4; ++i) EXPECT_NEAR(got.at(i), expect.at(i), 1e-12);
}

TEST(Attention, CausalPrefixUnaffectedByFuture) {
    Rng rng(2);
    AttentionConfig cfg{8, 2, true};
    AttentionParams p = init_attention(8, rng, 0.2);
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor base = attention(x, std::nullopt, cfg, p);
    std::vector<double> bumped = x.data();
    for (int64_t j = 0; j < 8; ++j) bumped[3 * 8 + j] += 1.5; // perturb token 3
    Tensor x2 = Tensor::from_data({5, 8}, bumped);
    Tensor out2 = attention(x2, std::nullopt, cfg, p);
    for (int64_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(base.at(i), out2.at(i));
    bool changed = false;
    for (int64_t i = 3 * 8; i < 5 * 8; ++i) changed |= base.at(i) != out2.at(i);
    EXPECT_TRUE(changed);
}

TEST(Attention, ContractsAndShapes) {
    Rng rng(3);
    AttentionConfig causal{4, 1, true};
    AttentionParams p = init_attention(4, rng);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor kv = Tensor::randn({2, 4}, rng);
    EXPECT_THROW(attention(x, kv, causal, p), ContractError);
    AttentionConfig cfg{4, 1, false};
    Tensor bad_kv = Tensor::randn({2, 6}, rng);
    EXPECT_THROW(attention(x, bad_kv, cfg, p), ShapeError);
    EXPECT_EQ(attention(x, kv, cfg, p).shape(), (Shape{3, 4}));
}

TEST(Attention, BatchEquivariance) {
    Rng rng(4);
    AttentionConfig cfg{4, 2, false};
    AttentionParams p = init_attention(4, rng, 0.3);
    Tensor a = Tensor::randn({1, 3, 4}, rng);
    Tensor b = Tensor::randn({1, 3, 4}, rng);
    Tensor ab = attention(concat({a, b}, 0), std::nullopt, cfg, p);
    Tensor ba = attention(concat({b, a}, 0), std::nullopt, cfg, p);
    for (int64_t i = 0; i < 12; ++i) {
        EXPECT_EQ(ab.at(i), ba.at(12 + i));
        EXPECT_EQ(ab.at(12 + i), ba.at(i));
    }
}

TEST(Attention, GradCheckTwoTokens) {
    Rng rng(5);
    AttentionConfig cfg{4, 1, false};
    AttentionParams p = init_attention(4, rng, 0.4);
    Tensor x = Tensor::randn({2, 4}, rng);
    auto f = [&](const Tensor& t) { return sum(mul(attention(t, std::nullopt, cfg, p), t)); };
    EXPECT_LT(grad_check(f, x), 1e-5);
    auto fw = [&](const Tensor& t) {
        AttentionParams q = p;
        q.q.w = t;
        return sum(attention(x, std::nullopt, cfg, q));
    };
    EXPECT_LT(grad_check(fw, p.q.w), 1e-5);
}

TEST(Ffn, ZeroWeightsGiveZero) {
    FfnConfig cfg{4, 6, Activation::relu};
    Rng rng(6);
    FfnParams p = init_ffn(4, 6, rng);
    zero_out(p.in.w);
    zero_out(p.out.w);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor y = ffn(x, cfg, p);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), 0.0);
}

TEST(Ffn, IdentityConfigPassesNonnegInputThrough) {
    FfnConfig cfg{3, 3, Activation::relu};
    FfnParams p;
    p.in = {Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros({3})};
    p.out = {Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros({3})};
    Tensor x = Tensor::from_data({2, 3}, {0.5, 0.0, 2.0, 1.0, 3.0, 0.25});
    Tensor y = ffn(x, cfg, p);
    EXPECT_EQ(y.data(), x.data());
}

TEST(Ffn, MatchesHandComposedChain) {
    FfnConfig cfg{4, 5, Activation::gelu};
    Rng rng(7);
    FfnParams p = init_ffn(4, 5, rng, 0.5);
    Tensor x = Tensor::randn({2, 4}, rng);
    Tensor expect = add(matmul(gelu(add(matmul(x, p.in.w), p.in.b)), p.out.w), p.out.b);
    Tensor got = ffn(x, cfg, p);
    EXPECT_EQ(got.data(), expect.data());
}

TEST(BertBlock, CrossBlockNeedsY) {
    BertBlockConfig cfg{4, 1, 8, Activation::gelu, true, true};
    Rng rng(8);
    BertBlockParams p = init_bert_block(cfg, rng);
    Tensor x = Tensor::randn({3, 4}, rng);
    EXPECT_THROW(bert_block(x, std::nullopt, cfg, p), ContractError);
    Tensor y = Tensor::randn({2, 4}, rng);
    EXPECT_EQ(bert_block(x, y, cfg, p).shape(), (Shape{3, 4}));
}

TEST(BertBlock, TiedSelfInputsShapeContract) {
    BertBlockConfig cfg{4, 2, 8, Activation::gelu, true, true};
    Rng rng(9);
    BertBlockParams p = init_bert_block(cfg, rng);
    Tensor x = Tensor::randn({1, 3, 4}, rng);
    EXPECT_EQ(bert_block(x, x, cfg, p).shape(), (Shape{1, 3, 4}));
}

TEST(BertBlock, ZeroedBranchesLeaveNormCascadeOfX) {
    BertBlockConfig cfg{4, 2, 8, Activation::gelu, true, true};
    Rng rng(10);
    BertBlockParams p = init_bert_block(cfg, rng, 0.3);
    zero_out(p.self_attn.o.w);
    zero_out(p.self_attn.o.b);
    zero_out(p.cross_attn.o.w);
    zero_out(p.cross_attn.o.b);
    zero_out(p.ffn.out.w);
    zero_out(p.ffn.out.b);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor y = Tensor::randn({2, 4}, rng);
    Tensor got = bert_block(x, y, cfg, p);
    Tensor expect = layernorm(x, p.ln_out.gamma, p.ln_out.beta);
    EXPECT_EQ(got.data(), expect.data());
}

TEST(BertBlock, BareModeIsLiteralComposition) {
    BertBlockConfig cfg{4, 1, 8, Activation::gelu, true, false};
    Rng rng(11);
    BertBlockParams p = init_bert_block(cfg, rng, 0.3);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor y = Tensor::randn({2, 4}, rng);
    AttentionConfig acfg{4, 1, false};
    FfnConfig fcfg{4, 8, Activation::gelu};
    Tensor expect = ffn(attention(attention(x, std::nullopt, acfg, p.self_attn), y, acfg, p.cross_attn),
                        fcfg, p.ffn);
    EXPECT_EQ(bert_block(x, y, cfg, p).data(), expect.data());
}

TEST(BertBlock, GradCheckFullBlock) {
    BertBlockConfig cfg{8, 2, 12, Activation::gelu, true, true};
    Rng rng(12);
    BertBlockParams p = init_bert_block(cfg, rng, 0.2);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor y = Tensor::randn({2, 8}, rng);
    auto fx = [&](const Tensor& t) { return sum(mul(bert_block(t, y, cfg, p), t)); };
    EXPECT_LT(grad_check(fx, x, 1e-5), 1e-4);
    auto fy = [&](const Tensor& t) { return sum(bert_block(x, t, cfg, p)); };
    EXPECT_LT(grad_check(fy, y, 1e-5), 1e-4);
    auto fw = [&](const Tensor& t) {
        BertBlockParams q = p;
        q.ffn.in.w = t;
        return sum(bert_block(x, y, cfg, q));
    };
    EXPECT_LT(grad_check(fw, p.ffn.in.w, 1e-5), 1e-4);
}
