#pragma once

// Reference zoo: the fixed datasets and trained models used by the CLI
// defaults and the acceptance suite.

#include <cstddef>
#include <cstdint>

#include "stab/datasets.hpp"
#include "stab/fi.hpp"
#include "stab/random.hpp"
#include "stab/zoo.hpp"

namespace stab::reference {

struct Split {
    Dataset train;
    Dataset validation;
    Dataset test;
};

struct TrainedModel {
    ZooModel model;
    Split data;
};

inline TrainConfig vision_config() {
    TrainConfig c;
    c.epochs = 15;
    c.batch = 32;
    c.learning_rate = 1e-3;
    c.class_count = data::kShapeClasses;
    return c;
}

inline Split vision_data(std::uint64_t seed) {
    return {data::shapes(3000, derive_seed(seed, 1)), data::shapes(500, derive_seed(seed, 2)),
            data::shapes(1000, derive_seed(seed, 3))};
}

inline TrainedModel vision(std::uint64_t seed) {
    Split d = vision_data(seed);
    ZooModel m = train_toy(Arch::vision_classifier, d.train, vision_config(), derive_seed(seed, 4));
    return {std::move(m), std::move(d)};
}

inline TrainConfig mlp_config() {
    TrainConfig c;
    c.epochs = 20;
    c.batch = 32;
    c.learning_rate = 3e-3;
    c.class_count = 4;
    return c;
}

/// Four overlapping Gaussian classes in 16 dimensions.
inline Split mlp_data(std::uint64_t seed) {
    Dataset all = data::blobs(3500, 4, 16, 3.0, derive_seed(seed, 1));
    Split s;
    s.train.assign(all.begin(), all.begin() + 2000);
    s.validation.assign(all.begin() + 2000, all.begin() + 2500);
    s.test.assign(all.begin() + 2500, all.end());
    return s;
}

inline TrainedModel mlp(std::uint64_t seed) {
    Split d = mlp_data(seed);
    ZooModel m = train_toy(Arch::mlp_classifier, d.train, mlp_config(), derive_seed(seed, 4));
    return {std::move(m), std::move(d)};
}

inline TrainConfig transformer_config() {
    TrainConfig c;
    c.epochs = 5;
    c.batch = 16;
    c.learning_rate = 3e-3;
    return c;
}

inline data::Grammar grammar(std::uint64_t seed) { return data::Grammar::make(kTransformerVocab, derive_seed(seed, 0)); }

inline Split transformer_data(std::uint64_t seed) {
    const auto g = grammar(seed);
    return {data::grammar_samples(g, 2000, 4, 16, derive_seed(seed, 1)),
            data::grammar_samples(g, 500, 4, 16, derive_seed(seed, 2)),
            data::grammar_samples(g, 1000, 4, 16, derive_seed(seed, 3))};
}

inline TrainedModel transformer(std::uint64_t seed) {
    Split d = transformer_data(seed);
    ZooModel m = train_toy(Arch::tiny_transformer, d.train, transformer_config(), derive_seed(seed, 4));
    return {std::move(m), std::move(d)};
}

/// Base MLP pretrained on both feature halves, then fine-tuned separately on
/// domain A (first half) and domain B (second half) with their own teachers.
struct TwoTaskZoo {
    ZooModel base;
    ZooModel a;
    ZooModel b;
    Split data_a;
    Split data_b;
    Dataset calibration_a;
    Dataset calibration_b;
};

inline TwoTaskZoo two_task(std::uint64_t seed) {
    const data::TwoTaskSpec spec;
    const Matrix teacher_a = data::random_teacher(spec.classes, spec.dim, derive_seed(seed, 1));
    const Matrix teacher_b = data::random_teacher(spec.classes, spec.dim, derive_seed(seed, 2));
    const Matrix teacher_base = data::random_teacher(spec.classes, spec.dim, derive_seed(seed, 3));
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch = 32;
    cfg.learning_rate = 3e-3;
    cfg.class_count = spec.classes;
    TwoTaskZoo z;
    const Dataset pre = data::domain_samples(spec, 2, teacher_base, 2000, derive_seed(seed, 4));
    z.base = train_toy(Arch::mlp_classifier, pre, cfg, derive_seed(seed, 5));
    auto split = [&](std::size_t domain, const Matrix& teacher, std::uint64_t s) {
        return Split{data::domain_samples(spec, domain, teacher, 2000, derive_seed(s, 0)),
                     data::domain_samples(spec, domain, teacher, 500, derive_seed(s, 1)),
                     data::domain_samples(spec, domain, teacher, 1000, derive_seed(s, 2))};
    };
    z.data_a = split(0, teacher_a, derive_seed(seed, 6));
    z.data_b = split(1, teacher_b, derive_seed(seed, 7));
    z.calibration_a = data::domain_samples(spec, 0, teacher_a, 100, derive_seed(seed, 8));
    z.calibration_b = data::domain_samples(spec, 1, teacher_b, 100, derive_seed(seed, 9));
    z.a = fine_tune(z.base, z.data_a.train, cfg, derive_seed(seed, 10));
    z.b = fine_tune(z.base, z.data_b.train, cfg, derive_seed(seed, 11));
    return z;
}

/// Dataset-mean FI map over all parameters, used for protection and sparsification.
inline StabilityMap parameter_fi_map(const ZooModel& m, const Dataset& calibration) {
    return stability_map_mean(m, calibration, Family::all_params, Measure::fi);
}

} // namespace stab::reference
