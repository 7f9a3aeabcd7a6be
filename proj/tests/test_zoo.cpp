#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"

using namespace stab;
using namespace stab::testing;

namespace {

/// Binary softmax regression with zero weights and bias (log q, log(1-q)).
ZooModel binary_softmax(double q) {
    Checkpoint ck;
    ck.arch = "softmax-regression";
    ck.class_count = 2;
    ck.tensors["w"] = Tensor({3, 2}, 0.0);
    ck.tensors["b"] = Tensor({2}, std::vector<double>{std::log(q), std::log(1.0 - q)});
    return ZooModel::from_checkpoint(ck);
}

Sample features(std::size_t n, double v = 1.0) {
    Sample s;
    s.x.assign(n, v);
    return s;
}

} // namespace

TEST(Zoo, ZeroWeightsGiveUniform) {
    ZooModel m = init_model(Arch::softmax_regression, 5, 4, 1);
    for (auto& [_, t] : m.checkpoint.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    const auto p = forward_probs(m, features(5, 0.7));
    for (double v : p.probs) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Zoo, SymmetricLogitsGiveHalf) {
    const auto p = forward_probs(binary_softmax(0.5), features(3));
    EXPECT_NEAR(p.probs[0], 0.5, 1e-15);
    EXPECT_NEAR(p.probs[1], 0.5, 1e-15);
}

TEST(Zoo, DistributionInvariants) {
    for (Arch a : {Arch::softmax_regression, Arch::mlp_classifier, Arch::vision_classifier, Arch::tiny_transformer}) {
        const ZooModel m = random_model(a, 3);
        const auto p = forward_probs(m, random_sample(m, 4));
        double s = 0.0;
        for (double v : p.probs) {
            EXPECT_GE(v, 1e-12);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Zoo, BinarySoftmaxScoreExample) {
    for (double q : {0.5, 0.7, 0.9}) {
        const ZooModel m = binary_softmax(q);
        // "b" sorts before "w", so b[0] is flat index 0.
        const auto sm = score_matrix(m, features(3), PerturbationTarget::parameter(0));
        EXPECT_NEAR(sm.m(0, 0), 1.0 - q, 1e-12);
        EXPECT_NEAR(sm.m(0, 1), -q, 1e-12);
        const Vector g = loss_gradient(m, features(3), 0, PerturbationTarget::parameter(0));
        EXPECT_NEAR(g[0], -(1.0 - q), 1e-12);
    }
}

TEST(Zoo, DeadUnitHasZeroScores) {
    ZooModel m = random_model(Arch::softmax_regression, 5);
    Sample s = random_sample(m, 6);
    s.x[2] = 0.0;
    // w is [features, classes]; w[2][c] only sees x[2].
    const std::size_t flat = m.checkpoint.base_offset("w") + 2 * m.class_count + 1;
    const auto sm = score_matrix(m, s, PerturbationTarget::parameter(flat));
    for (double v : sm.m.data) EXPECT_EQ(v, 0.0);
    for (double v : loss_gradient(m, s, 0, PerturbationTarget::parameter(flat))) EXPECT_EQ(v, 0.0);
}

TEST(Zoo, GradientOracleAcrossArchsAndKinds) {
    Rng rng(11);
    std::size_t probes = 0;
    for (Arch a : {Arch::softmax_regression, Arch::mlp_classifier, Arch::vision_classifier, Arch::tiny_transformer}) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const ZooModel m = random_model(a, seed);
            const Sample s = random_sample(m, seed + 100);
            for (TargetKind kind : kinds_for(a)) {
                const PerturbationTarget t = random_unit(m, kind, rng);
                const auto sm = score_matrix(m, s, t);
                for (std::size_t y = 0; y < m.class_count; ++y) {
                    const Vector fd = finite_diff_gradient(
                        [&](std::span<const double> w) { return log_prob_at(m, s, t, y, w); }, Vector(t.p(), 0.0));
                    EXPECT_LT(rel_err(sm.column(y), fd), 1e-5) << arch_name(a) << " " << target_kind_name(kind);
                    ++probes;
                }
            }
        }
    }
    EXPECT_GE(probes, 100u);
}

TEST(Zoo, FisherScoreIdentity) {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const Arch a = static_cast<Arch>(trial % 4);
        const ZooModel m = random_model(a, 1000 + trial);
        const Sample s = random_sample(m, 2000 + trial);
        const auto kinds = kinds_for(a);
        const PerturbationTarget t = random_unit(m, kinds[rng.index(kinds.size())], rng);
        ClassDistribution p;
        const auto sm = score_matrix(m, s, t, &p);
        double maxnorm = 0.0;
        for (std::size_t y = 0; y < sm.classes(); ++y) maxnorm = std::max(maxnorm, norm2(sm.column(y)));
        Vector sum(t.p(), 0.0);
        for (std::size_t y = 0; y < sm.classes(); ++y)
            for (std::size_t i = 0; i < t.p(); ++i) sum[i] += p.probs[y] * sm.m(i, y);
        EXPECT_LE(norm2(sum), 1e-9 * std::max(maxnorm, 1e-300));
    }
}

TEST(Zoo, PerturbationIdentityAndLocality) {
    const ZooModel m = random_model(Arch::vision_classifier, 2);
    const Sample s = random_sample(m, 3);
    {
        const auto [mp, sp] = apply_perturbation(m, s, PerturbationTarget::pixel(5), Vector(3, 0.0));
        EXPECT_EQ(checkpoint_to_text(mp.checkpoint), checkpoint_to_text(m.checkpoint));
        EXPECT_EQ(sp.x, s.x);
    }
    {
        const auto [mp, sp] = apply_perturbation(m, s, PerturbationTarget::pixel(5), Vector{0.1, -0.2, 0.3});
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (i >= 15 && i < 18) {
                EXPECT_NE(sp.x[i], s.x[i]);
            } else {
                EXPECT_EQ(sp.x[i], s.x[i]);
            }
        }
        EXPECT_EQ(checkpoint_to_text(mp.checkpoint), checkpoint_to_text(m.checkpoint));
    }
    {
        const std::size_t i = 17;
        const double theta = m.checkpoint.flat(i);
        const auto [mp, sp] = apply_perturbation(m, s, PerturbationTarget::parameter(i), Vector{-theta});
        EXPECT_EQ(mp.checkpoint.flat(i), 0.0);
        const Vector a = m.checkpoint.flatten(), b = mp.checkpoint.flatten();
        for (std::size_t j = 0; j < a.size(); ++j) {
            if (j != i) {
                EXPECT_EQ(a[j], b[j]);
            }
        }
    }
    EXPECT_THROW(apply_perturbation(m, s, PerturbationTarget::pixel(5), Vector(2, 0.0)), InvalidInput);
}

TEST(Zoo, TargetValidation) {
    const ZooModel mlp = random_model(Arch::mlp_classifier, 1);
    const ZooModel tf = random_model(Arch::tiny_transformer, 1);
    EXPECT_THROW(score_matrix(mlp, random_sample(mlp, 1), PerturbationTarget::pixel(0)), InvalidInput);
    EXPECT_THROW(score_matrix(mlp, random_sample(mlp, 1), PerturbationTarget::embedding_dim(0)), InvalidInput);
    EXPECT_THROW(score_matrix(tf, random_sample(tf, 1), PerturbationTarget::input_dim(0)), InvalidInput);
    EXPECT_THROW(score_matrix(mlp, random_sample(mlp, 1), PerturbationTarget::parameter(1u << 30)), InvalidInput);
    Sample bad = random_sample(mlp, 1);
    bad.x.pop_back();
    EXPECT_THROW(forward_probs(mlp, bad), InvalidInput);
}

TEST(Zoo, GenerateBehaviour) {
    const ZooModel m = random_model(Arch::tiny_transformer, 4);
    const std::vector<std::size_t> prefix{1, 2, 3};
    EXPECT_EQ(generate(m, prefix, 0, 1), prefix);
    EXPECT_EQ(generate(m, prefix, 6, 9), generate(m, prefix, 6, 9));
    EXPECT_THROW(generate(m, prefix, m.input.context, 1), InvalidInput);
    Sample longer;
    longer.tokens.assign(m.input.context + 1, 0);
    EXPECT_THROW(forward_probs(m, longer), InvalidInput);
}

TEST(Zoo, NearDeterministicModelGeneratesGreedily) {
    Vector bias(6, 0.0);
    bias[4] = 10.0;
    ZooModel m = constant_transformer(bias);
    Rng rng(5);
    for (auto& [_, t] : m.checkpoint.tensors)
        for (double& v : t.data) v += 0.01 * rng.normal();
    const std::vector<std::size_t> prefix{0, 1};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto seq = generate(m, prefix, 8, seed);
        Sample s;
        s.tokens = prefix;
        for (std::size_t i = prefix.size(); i < seq.size(); ++i) {
            const auto p = forward_probs(m, s);
            ASSERT_GT(p.probs[p.argmax()], 0.99);
            EXPECT_EQ(seq[i], p.argmax());
            s.tokens.push_back(seq[i]);
        }
    }
}

TEST(Zoo, SoftmaxTrainsOnSeparableBlobs) {
    const Dataset d = data::blobs(400, 2, 4, 6.0, 3);
    TrainConfig cfg;
    cfg.epochs = 10;
    const ZooModel m = train_toy(Arch::softmax_regression, d, cfg, 1);
    ASSERT_TRUE(m.train_accuracy.has_value());
    EXPECT_GE(*m.train_accuracy, 0.95);
}

TEST(Zoo, TrainingIsDeterministic) {
    const Dataset d = data::blobs(200, 3, 5, 3.0, 4);
    TrainConfig cfg;
    cfg.epochs = 3;
    const auto a = train_toy(Arch::mlp_classifier, d, cfg, 8);
    const auto b = train_toy(Arch::mlp_classifier, d, cfg, 8);
    EXPECT_EQ(checkpoint_to_text(a.checkpoint), checkpoint_to_text(b.checkpoint));
    const auto c = train_toy(Arch::mlp_classifier, d, cfg, 9);
    EXPECT_NE(checkpoint_to_text(a.checkpoint), checkpoint_to_text(c.checkpoint));
}

TEST(Zoo, DivergenceIsTrainingFailure) {
    const Dataset d = data::blobs(64, 2, 3, 2.0, 1);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 1e308;
    EXPECT_THROW(train_toy(Arch::mlp_classifier, d, cfg, 1), TrainingFailure);
}

TEST(Zoo, CheckpointAndDatasetRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "stab_test_zoo";
    std::filesystem::create_directories(dir);
    const ZooModel m = random_model(Arch::tiny_transformer, 6);
    save_checkpoint(m.checkpoint, dir / "m.ckpt");
    const Checkpoint back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(back.flatten(), m.checkpoint.flatten());
    EXPECT_EQ(checkpoint_to_text(back), checkpoint_to_text(m.checkpoint));
    const ZooModel again = ZooModel::from_checkpoint(back);
    EXPECT_EQ(again.input.d_model, m.input.d_model);
    EXPECT_EQ(again.input.layers, m.input.layers);

    Dataset d = data::shapes(5, 1);
    const Dataset g = data::grammar_samples(data::Grammar::make(32, 1), 5, 3, 6, 2);
    d.insert(d.end(), g.begin(), g.end());
    save_dataset(d, dir / "d.jsonl");
    const Dataset db = load_dataset(dir / "d.jsonl");
    ASSERT_EQ(db.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(db[i].x, d[i].x);
        EXPECT_EQ(db[i].tokens, d[i].tokens);
        EXPECT_EQ(db[i].y, d[i].y);
    }
    io::write_text_atomic(dir / "bad.ckpt", "{\"format\":\"other\"}");
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), InvalidInput);
    std::filesystem::remove_all(dir);
}

TEST(Zoo, GeneratorsAreSeeded) {
    EXPECT_EQ(dataset_to_text(data::shapes(10, 3)), dataset_to_text(data::shapes(10, 3)));
    EXPECT_NE(dataset_to_text(data::shapes(10, 3)), dataset_to_text(data::shapes(10, 4)));
    const auto g = data::Grammar::make(32, 2);
    EXPECT_EQ(dataset_to_text(data::grammar_samples(g, 20, 2, 8, 1)),
              dataset_to_text(data::grammar_samples(g, 20, 2, 8, 1)));
}
