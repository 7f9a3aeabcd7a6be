#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace stab;
using namespace stab::testing;

namespace {

Sample prompt(std::vector<std::size_t> tokens) {
    Sample s;
    s.tokens = std::move(tokens);
    return s;
}

PerturbationTarget head_bias(const ZooModel& m, std::size_t j) {
    return PerturbationTarget::parameter(m.checkpoint.base_offset("head.b") + j);
}

} // namespace

TEST(SeqFI, FirstStepHasNoRandomness) {
    const ZooModel m = random_model(Arch::tiny_transformer, 1);
    const Sample z = prompt({1, 2, 3});
    const auto t = PerturbationTarget::embedding_dim(2);
    const TokenFI r = fi_token_mc(m, z, 1, t, 10, 7);
    EXPECT_EQ(r.stderr_, 0.0);
    EXPECT_EQ(r.samples, 10u);
    EXPECT_DOUBLE_EQ(r.mean, stability_map(m, z, Family::all_embed_dims, Measure::fi).values[2]);
}

TEST(SeqFI, NearDeterministicModelHasSmallSpread) {
    Vector bias(6, 0.0);
    bias[4] = 10.0;
    ZooModel m = constant_transformer(bias);
    Rng rng(3);
    for (auto& [_, t] : m.checkpoint.tensors)
        for (double& v : t.data) v += 0.01 * rng.normal();
    const Sample z = prompt({0, 1});
    for (std::size_t l = 2; l <= 5; ++l) {
        const TokenFI r = fi_token_mc(m, z, l, head_bias(m, 1), 10, 5);
        ASSERT_GT(r.mean, 0.0);
        EXPECT_LT(r.stderr_ / r.mean, 0.05);
    }
}

TEST(SeqFI, ConstantModelAggregates) {
    const Vector bias{0.3, -0.2, 1.0, 0.0, 0.5};
    const ZooModel m = constant_transformer(bias, 40);
    const Sample z = prompt({0, 1, 2});
    // Output ignores the input, so P is fixed; for j != argmax the unit FI of
    // head.b[j] is P_j / (1 - P_j).
    Vector p(bias.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(bias[i]);
    for (double& v : p) v /= s;
    const double c = p[1] / (1.0 - p[1]);
    const auto t = head_bias(m, 1);
    const auto fixed = fi_seq_fixed(m, z, 5, t, 4, 1);
    EXPECT_NEAR(fixed.aggregate, c, 1e-12 * c);
    const auto one = fi_seq_fixed(m, z, 1, t, 4, 1);
    EXPECT_DOUBLE_EQ(one.aggregate, one.per_token[0].mean);
    const auto disc = fi_seq_discounted(m, z, 0.5, t, 2, 1);
    EXPECT_NEAR(disc.aggregate, c, 1e-5 * c);
    EXPECT_LT(disc.truncation_mass, 1e-6);
    const auto zero = fi_seq_discounted(m, z, 0.0, t, 2, 1);
    ASSERT_EQ(zero.per_token.size(), 1u);
    EXPECT_EQ(zero.per_token[0].l, 0u);
    EXPECT_DOUBLE_EQ(zero.aggregate, zero.per_token[0].mean);
}

TEST(SeqFI, AggregatorAlgebra) {
    EXPECT_DOUBLE_EQ(aggregate_fixed({2.0, 2.0, 2.0}), 2.0);
    EXPECT_DOUBLE_EQ(aggregate_fixed({1.0, 2.0, 6.0}), 3.0);
    const double gamma = 0.9;
    const std::size_t n = discounted_terms(gamma, 256, 1000);
    EXPECT_LT(std::pow(gamma, static_cast<double>(n)), 1e-6);
    EXPECT_GE(std::pow(gamma, static_cast<double>(n - 1)), 1e-6);
    EXPECT_NEAR(aggregate_discounted(gamma, std::vector<double>(n, 3.0)), 3.0, 3e-5);
    // Two-phase sequence: high for l < 3, zero after.
    std::vector<double> two(n, 0.0);
    two[0] = two[1] = two[2] = 4.0;
    const double hand = (1.0 - gamma) * 4.0 * (1.0 + gamma + gamma * gamma);
    EXPECT_NEAR(aggregate_discounted(gamma, two), hand, 1e-12);
    EXPECT_GT(aggregate_discounted(gamma, two), 0.0);
    EXPECT_LT(aggregate_discounted(gamma, two), 4.0);
    EXPECT_EQ(discounted_terms(0.0, 256, 10), 1u);
    EXPECT_EQ(discounted_terms(0.99, 5, 1000), 6u);
    EXPECT_EQ(discounted_terms(0.99, 256, 3), 4u);
}

TEST(SeqFI, Errors) {
    const ZooModel m = random_model(Arch::tiny_transformer, 2);
    const Sample z = prompt({1, 2, 3});
    const auto t = PerturbationTarget::embedding_dim(0);
    EXPECT_THROW(fi_seq_discounted(m, z, 1.0, t, 2, 1), InvalidInput);
    EXPECT_THROW(fi_token_mc(m, z, 0, t, 2, 1), InvalidInput);
    EXPECT_THROW(fi_token_mc(m, z, m.input.context, t, 2, 1), InvalidInput);
    EXPECT_THROW(fi_seq_fixed(m, z, 0, t, 2, 1), InvalidInput);
    EXPECT_THROW(fi_dataset_mean(m, {}, t, {}), InvalidInput);
}

TEST(SeqFI, DeterminismAndSeedStreams) {
    const ZooModel m = random_model(Arch::tiny_transformer, 3);
    const Sample z = prompt({4, 0});
    const auto t = PerturbationTarget::embedding_dim(5);
    const auto a = fi_seq_fixed(m, z, 4, t, 6, 11);
    const auto b = fi_seq_fixed(m, z, 4, t, 6, 11);
    const auto longer = fi_seq_fixed(m, z, 6, t, 6, 11);
    for (std::size_t l = 0; l < 4; ++l) {
        EXPECT_EQ(a.per_token[l].mean, b.per_token[l].mean);
        EXPECT_EQ(a.per_token[l].stderr_, b.per_token[l].stderr_);
        EXPECT_EQ(a.per_token[l].mean, longer.per_token[l].mean);
    }
    EXPECT_EQ(a.aggregate, b.aggregate);
    EXPECT_NE(fi_seq_fixed(m, z, 4, t, 6, 12).aggregate, a.aggregate);
}

TEST(SeqFI, StderrMatchesSampleStd) {
    const ZooModel m = random_model(Arch::tiny_transformer, 4);
    const Sample z = prompt({1, 5});
    const auto t = PerturbationTarget::embedding_dim(1);
    const TokenFI r = fi_token_mc(m, z, 3, t, 12, 2);
    Vector v;
    for (std::size_t n = 0; n < 12; ++n) {
        Sample s = z;
        s.tokens = generate(m, z.tokens, 2, derive_seed(2, 3, n));
        v.push_back(next_token_fi(m, s, t));
    }
    double mean = 0.0;
    for (double x : v) mean += x / 12.0;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    EXPECT_NEAR(r.mean, mean, 1e-12 * std::abs(mean));
    EXPECT_NEAR(r.stderr_, std::sqrt(ss / 11.0) / std::sqrt(12.0), 1e-12);
}

TEST(SeqFI, DatasetMean) {
    const ZooModel m = random_model(Arch::tiny_transformer, 5);
    const auto t = PerturbationTarget::embedding_dim(3);
    SeqFIParams p;
    p.L = 3;
    p.samples = 4;
    p.seed = 9;
    const Sample a = prompt({1, 2}), b = prompt({3, 3, 0});
    const double single = fi_dataset_mean(m, {a}, t, p);
    EXPECT_EQ(single, fi_seq(m, a, t, p).aggregate);
    const double dedup = fi_dataset_mean(m, {a, b}, t, p);
    const double dup = fi_dataset_mean(m, {a, b, a, b}, t, p);
    EXPECT_NEAR(dup, dedup, 1e-15 * std::abs(dedup));
    const auto j = seq_estimate_to_json(fi_seq(m, a, t, p));
    EXPECT_EQ(j.at("mode"), "fixed-L");
    EXPECT_EQ(j.at("per_token").size(), 3u);
}
