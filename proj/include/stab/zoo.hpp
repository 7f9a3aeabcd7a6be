#pragma once

// Desk-scale model zoo. Every architecture is expressed on the reverse-mode
// tape so class probabilities, per-class score vectors and training gradients
// all come from the same forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stab/autodiff.hpp"
#include "stab/checkpoint.hpp"
#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/numeric.hpp"
#include "stab/random.hpp"

namespace stab {

enum class Arch { softmax_regression, mlp_classifier, vision_classifier, tiny_transformer };

inline std::string arch_name(Arch a) {
    switch (a) {
    case Arch::softmax_regression: return "softmax-regression";
    case Arch::mlp_classifier: return "mlp-classifier";
    case Arch::vision_classifier: return "vision-classifier";
    case Arch::tiny_transformer: return "tiny-transformer";
    }
    return "unknown";
}

/// Accepts canonical names and the short CLI aliases (softmax, mlp, vision, transformer).
inline Arch parse_arch(const std::string& s) {
    if (s == "softmax-regression" || s == "softmax") return Arch::softmax_regression;
    if (s == "mlp-classifier" || s == "mlp") return Arch::mlp_classifier;
    if (s == "vision-classifier" || s == "vision") return Arch::vision_classifier;
    if (s == "tiny-transformer" || s == "transformer") return Arch::tiny_transformer;
    throw InvalidInput("unknown architecture '" + s + "'");
}

struct InputSpec {
    std::size_t features = 0;   // flat input length for feature/vision models
    std::size_t width = 0;      // vision only
    std::size_t height = 0;
    std::size_t vocab = 0;      // transformer only
    std::size_t context = 0;
    std::size_t d_model = 0;
    std::size_t heads = 0;
    std::size_t layers = 0;
};

inline constexpr std::size_t kMlpHidden = 64;
inline constexpr std::size_t kVisionHidden0 = 128;
inline constexpr std::size_t kVisionHidden1 = 64;
inline constexpr std::size_t kTransformerDim = 32;
inline constexpr std::size_t kTransformerLayers = 2;
inline constexpr std::size_t kTransformerHeads = 2;
inline constexpr std::size_t kTransformerContext = 64;
inline constexpr std::size_t kTransformerVocab = 32;
inline constexpr double kProbFloor = 1e-12;

struct ZooModel {
    Arch arch = Arch::softmax_regression;
    Checkpoint checkpoint;
    std::size_t class_count = 0;
    InputSpec input;
    std::optional<double> train_accuracy;

    /// Rebuilds architecture metadata from tensor shapes and checks consistency.
    static ZooModel from_checkpoint(Checkpoint ck) {
        ck.validate();
        ZooModel m;
        m.arch = parse_arch(ck.arch);
        ck.arch = arch_name(m.arch);
        m.class_count = ck.class_count;
        require(m.class_count >= 2, "model needs at least two classes");
        auto shape = [&](const std::string& n) { return ck.at(n).shape; };
        auto expect = [&](const std::string& n, std::vector<std::size_t> s) {
            require(shape(n) == s, "tensor '" + n + "' has an unexpected shape");
        };
        switch (m.arch) {
        case Arch::softmax_regression: {
            const auto w = shape("w");
            require(w.size() == 2 && w[1] == m.class_count, "softmax-regression weight shape mismatch");
            m.input.features = w[0];
            expect("b", {m.class_count});
            require(ck.tensors.size() == 2, "softmax-regression has unexpected tensors");
            break;
        }
        case Arch::mlp_classifier:
        case Arch::vision_classifier: {
            const auto w0 = shape("l0.w");
            require(w0.size() == 2, "l0.w must be a matrix");
            m.input.features = w0[0];
            const auto w1 = shape("l1.w");
            require(w1.size() == 2 && w1[0] == w0[1], "l1.w shape mismatch");
            expect("l0.b", {w0[1]});
            expect("l1.b", {w1[1]});
            expect("l2.w", {w1[1], m.class_count});
            expect("l2.b", {m.class_count});
            require(ck.tensors.size() == 6, "mlp has unexpected tensors");
            if (m.arch == Arch::vision_classifier) {
                require(m.input.features % 3 == 0, "vision input must hold RGB pixels");
                const auto side = static_cast<std::size_t>(std::llround(std::sqrt(m.input.features / 3.0)));
                require(side * side * 3 == m.input.features, "vision input must be a square RGB grid");
                m.input.width = m.input.height = side;
            }
            break;
        }
        case Arch::tiny_transformer: {
            const auto te = shape("tok_emb");
            require(te.size() == 2, "tok_emb must be a matrix");
            m.input.vocab = te[0];
            m.input.d_model = te[1];
            require(m.input.vocab == m.class_count, "transformer class count must equal vocabulary size");
            const auto pe = shape("pos_emb");
            require(pe.size() == 2 && pe[1] == m.input.d_model, "pos_emb shape mismatch");
            m.input.context = pe[0];
            m.input.heads = kTransformerHeads;
            require(m.input.d_model % m.input.heads == 0, "d_model must divide into heads");
            std::size_t layers = 0;
            while (ck.tensors.count("blk" + std::to_string(layers) + ".ln1.g")) ++layers;
            m.input.layers = layers;
            const std::size_t d = m.input.d_model;
            for (std::size_t l = 0; l < layers; ++l) {
                const std::string p = "blk" + std::to_string(l) + ".";
                for (const char* n : {"ln1.g", "ln1.b", "ln2.g", "ln2.b", "attn.bq", "attn.bk", "attn.bv", "attn.bo",
                                      "mlp.b2"})
                    expect(p + n, {d});
                for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) expect(p + n, {d, d});
                expect(p + "mlp.w1", {d, 4 * d});
                expect(p + "mlp.b1", {4 * d});
                expect(p + "mlp.w2", {4 * d, d});
            }
            expect("ln_f.g", {d});
            expect("ln_f.b", {d});
            expect("head.w", {d, m.input.vocab});
            expect("head.b", {m.input.vocab});
            require(ck.tensors.size() == 6 + 16 * layers, "transformer has unexpected tensors");
            break;
        }
        }
        m.checkpoint = std::move(ck);
        return m;
    }

    std::size_t parameter_count() const { return checkpoint.total(); }

    std::size_t input_length() const {
        return arch == Arch::tiny_transformer ? 0 : input.features;
    }
};

// ---------------------------------------------------------------------------
// Perturbation targets

enum class TargetKind { parameter, pixel, input_dim, embedding_dim };

inline std::string target_kind_name(TargetKind k) {
    switch (k) {
    case TargetKind::parameter: return "parameter";
    case TargetKind::pixel: return "pixel";
    case TargetKind::input_dim: return "input-dim";
    case TargetKind::embedding_dim: return "embedding-dim";
    }
    return "unknown";
}

/// Coordinates of the model's parameter / input / embedding space that the
/// perturbation vector omega is added to. p = coords.size().
struct PerturbationTarget {
    TargetKind kind = TargetKind::parameter;
    std::vector<std::size_t> coords;

    std::size_t p() const { return coords.size(); }

    static PerturbationTarget parameter(std::size_t flat) { return {TargetKind::parameter, {flat}}; }
    static PerturbationTarget parameters(std::vector<std::size_t> flat) { return {TargetKind::parameter, std::move(flat)}; }
    static PerturbationTarget pixel(std::size_t pixel_index) {
        return {TargetKind::pixel, {3 * pixel_index, 3 * pixel_index + 1, 3 * pixel_index + 2}};
    }
    static PerturbationTarget input_dim(std::size_t i) { return {TargetKind::input_dim, {i}}; }
    static PerturbationTarget embedding_dim(std::size_t d) { return {TargetKind::embedding_dim, {d}}; }
};

/// Size of the coordinate space a target kind indexes into.
inline std::size_t coordinate_space(const ZooModel& m, TargetKind kind) {
    switch (kind) {
    case TargetKind::parameter: return m.parameter_count();
    case TargetKind::pixel:
        require(m.arch == Arch::vision_classifier, "pixel targets are only valid for vision-classifier");
        return m.input.features;
    case TargetKind::input_dim:
        require(m.arch != Arch::tiny_transformer, "input-dim targets are not valid for tiny-transformer");
        return m.input.features;
    case TargetKind::embedding_dim:
        require(m.arch == Arch::tiny_transformer, "embedding-dim targets are only valid for tiny-transformer");
        return m.input.d_model;
    }
    return 0;
}

inline void validate_target(const ZooModel& m, const PerturbationTarget& t) {
    require(t.p() >= 1, "perturbation target is empty");
    const std::size_t n = coordinate_space(m, t.kind);
    for (std::size_t c : t.coords) require(c < n, "perturbation target index out of range");
    if (t.kind == TargetKind::pixel) {
        require(t.p() % 3 == 0, "pixel targets must cover whole RGB pixels");
        for (std::size_t i = 0; i < t.p(); i += 3)
            require(t.coords[i] % 3 == 0 && t.coords[i + 1] == t.coords[i] + 1 && t.coords[i + 2] == t.coords[i] + 2,
                    "pixel target must list the three channels of a pixel");
    }
}

// ---------------------------------------------------------------------------
// Distributions and score matrices

struct ClassDistribution {
    Vector probs;

    std::size_t size() const { return probs.size(); }

    /// Highest-probability class; ties resolve to the lowest index.
    std::size_t argmax() const {
        return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    }
};

/// Clamps at the probability floor and renormalizes.
inline ClassDistribution make_distribution(Vector p) {
    double s = 0.0;
    for (double& v : p) {
        v = std::max(v, kProbFloor);
        s += v;
    }
    for (double& v : p) v /= s;
    return {std::move(p)};
}

/// p x K; column y holds d/d(omega) log P(y | x, theta, omega) at omega = 0.
struct ScoreMatrix {
    Matrix m;

    std::size_t p() const { return m.rows; }
    std::size_t classes() const { return m.cols; }
    Vector column(std::size_t y) const { return m.column(y); }
};

namespace detail {

struct Trace {
    ad::Tape tape;
    ad::Var logp;                        // log-probabilities, one row per batch item / position
    std::vector<ad::Var> params;         // in checkpoint (name) order
    std::optional<ad::Var> input;        // feature / pixel leaf
    std::optional<ad::Var> embed;        // 1 x d additive embedding offset leaf
};

enum class Wrt { none, params, input, embedding };

inline Wrt wrt_for(TargetKind k) {
    switch (k) {
    case TargetKind::parameter: return Wrt::params;
    case TargetKind::pixel:
    case TargetKind::input_dim: return Wrt::input;
    case TargetKind::embedding_dim: return Wrt::embedding;
    }
    return Wrt::none;
}

inline void check_sample(const ZooModel& m, const Sample& s) {
    if (m.arch == Arch::tiny_transformer) {
        require(!s.tokens.empty(), "transformer input needs at least one token");
        require(s.tokens.size() <= m.input.context, "context overflow: input longer than the model context");
        for (std::size_t t : s.tokens) require(t < m.input.vocab, "token id outside the vocabulary");
        require(s.embed_offset.empty() || s.embed_offset.size() == m.input.d_model,
                "embedding offset length must equal d_model");
    } else {
        require(s.x.size() == m.input.features, "input length does not match the model's input spec");
    }
}

inline std::map<std::string, ad::Var> push_params(Trace& tr, const Checkpoint& ck, bool needs_grad) {
    std::map<std::string, ad::Var> named;
    for (const auto& [n, t] : ck.tensors) {
        ad::Var v = tr.tape.leaf(t.as_matrix(), needs_grad);
        tr.params.push_back(v);
        named.emplace(n, v);
    }
    return named;
}

inline ad::Var dense(ad::Tape& tape, ad::Var x, const std::map<std::string, ad::Var>& p, const std::string& name) {
    return tape.add_row(tape.matmul(x, p.at(name + ".w")), p.at(name + ".b"));
}

/// Feature models on a batch matrix (one sample per row).
inline void build_feature(Trace& tr, const ZooModel& m, Matrix x, bool params_grad, bool input_grad) {
    auto p = push_params(tr, m.checkpoint, params_grad);
    auto& tape = tr.tape;
    ad::Var in = tape.leaf(std::move(x), input_grad);
    if (input_grad) tr.input = in;
    ad::Var logits;
    if (m.arch == Arch::softmax_regression) {
        logits = tape.add_row(tape.matmul(in, p.at("w")), p.at("b"));
    } else {
        ad::Var h = tape.tanh(dense(tape, in, p, "l0"));
        h = tape.tanh(dense(tape, h, p, "l1"));
        logits = dense(tape, h, p, "l2");
    }
    tr.logp = tape.log_softmax(logits);
}

/// Transformer over one token sequence. With last_only the head is applied to
/// the final position alone.
inline void build_transformer(Trace& tr, const ZooModel& m, const std::vector<std::size_t>& tokens,
                              const Vector& embed_offset, bool params_grad, bool embed_grad, bool last_only) {
    auto p = push_params(tr, m.checkpoint, params_grad);
    auto& tape = tr.tape;
    const std::size_t T = tokens.size();
    const std::size_t d = m.input.d_model;
    const std::size_t H = m.input.heads;
    const std::size_t dh = d / H;

    ad::Var h = tape.add(tape.gather_rows(p.at("tok_emb"), tokens), tape.slice_rows(p.at("pos_emb"), 0, T));
    if (embed_grad || !embed_offset.empty()) {
        Matrix off(1, d);
        if (!embed_offset.empty()) off.data = embed_offset;
        ad::Var e = tape.leaf(std::move(off), embed_grad);
        if (embed_grad) tr.embed = e;
        h = tape.add_row(h, e);
    }
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < m.input.layers; ++l) {
        const std::string b = "blk" + std::to_string(l) + ".";
        ad::Var a = tape.layer_norm(h, p.at(b + "ln1.g"), p.at(b + "ln1.b"));
        ad::Var q = tape.add_row(tape.matmul(a, p.at(b + "attn.wq")), p.at(b + "attn.bq"));
        ad::Var k = tape.add_row(tape.matmul(a, p.at(b + "attn.wk")), p.at(b + "attn.bk"));
        ad::Var v = tape.add_row(tape.matmul(a, p.at(b + "attn.wv")), p.at(b + "attn.bv"));
        std::vector<ad::Var> heads;
        for (std::size_t hd = 0; hd < H; ++hd) {
            ad::Var qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
            ad::Var kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
            ad::Var vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
            ad::Var att = tape.causal_softmax(tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale));
            heads.push_back(tape.matmul(att, vh));
        }
        ad::Var o = tape.add_row(tape.matmul(tape.concat_cols(heads), p.at(b + "attn.wo")), p.at(b + "attn.bo"));
        h = tape.add(h, o);
        ad::Var f = tape.layer_norm(h, p.at(b + "ln2.g"), p.at(b + "ln2.b"));
        f = tape.gelu(tape.add_row(tape.matmul(f, p.at(b + "mlp.w1")), p.at(b + "mlp.b1")));
        f = tape.add_row(tape.matmul(f, p.at(b + "mlp.w2")), p.at(b + "mlp.b2"));
        h = tape.add(h, f);
    }
    h = tape.layer_norm(h, p.at("ln_f.g"), p.at("ln_f.b"));
    if (last_only) h = tape.slice_rows(h, T - 1, T);
    ad::Var logits = tape.add_row(tape.matmul(h, p.at("head.w")), p.at("head.b"));
    tr.logp = tape.log_softmax(logits);
}

/// Single-sample trace; logp's last row is the prediction for this sample.
inline Trace trace(const ZooModel& m, const Sample& s, Wrt wrt) {
    check_sample(m, s);
    Trace tr;
    if (m.arch == Arch::tiny_transformer) {
        require(wrt != Wrt::input, "transformer inputs are discrete; use embedding-dim targets");
        build_transformer(tr, m, s.tokens, s.embed_offset, wrt == Wrt::params, wrt == Wrt::embedding, true);
    } else {
        require(wrt != Wrt::embedding, "embedding targets are only valid for tiny-transformer");
        build_feature(tr, m, Matrix(1, s.x.size(), s.x), wrt == Wrt::params, wrt == Wrt::input);
    }
    return tr;
}

inline Vector flat_grad(const Trace& tr, Wrt wrt) {
    Vector out;
    switch (wrt) {
    case Wrt::params:
        for (ad::Var v : tr.params) {
            const auto& g = tr.tape.grad(v).data;
            out.insert(out.end(), g.begin(), g.end());
        }
        break;
    case Wrt::input: out = tr.tape.grad(*tr.input).data; break;
    case Wrt::embedding: out = tr.tape.grad(*tr.embed).data; break;
    case Wrt::none: break;
    }
    return out;
}

inline Vector last_row_probs(const Trace& tr) {
    const Matrix& lp = tr.tape.value(tr.logp);
    Vector p(lp.cols);
    for (std::size_t c = 0; c < lp.cols; ++c) p[c] = std::exp(lp(lp.rows - 1, c));
    return p;
}

} // namespace detail

inline ClassDistribution forward_probs(const ZooModel& m, const Sample& s) {
    const auto tr = detail::trace(m, s, detail::Wrt::none);
    return make_distribution(detail::last_row_probs(tr));
}

inline std::size_t predict(const ZooModel& m, const Sample& s) { return forward_probs(m, s).argmax(); }

/// Per-class log-likelihood gradients over every coordinate of a target kind:
/// returns K x n with n = coordinate_space(m, kind). Also reports the distribution.
inline Matrix score_block(const ZooModel& m, const Sample& s, TargetKind kind, ClassDistribution* probs = nullptr) {
    coordinate_space(m, kind);
    const auto wrt = detail::wrt_for(kind);
    auto tr = detail::trace(m, s, wrt);
    if (probs) *probs = make_distribution(detail::last_row_probs(tr));
    const Matrix& lp = tr.tape.value(tr.logp);
    const std::size_t K = lp.cols;
    Matrix out;
    Matrix seed(lp.rows, lp.cols);
    for (std::size_t y = 0; y < K; ++y) {
        std::fill(seed.data.begin(), seed.data.end(), 0.0);
        seed(lp.rows - 1, y) = 1.0;
        tr.tape.backward(tr.logp, seed);
        Vector g = detail::flat_grad(tr, wrt);
        if (out.empty()) out = Matrix(K, g.size());
        std::copy(g.begin(), g.end(), out.row(y).begin());
    }
    return out;
}

/// Restricts a K x n score block to the target's coordinates (p x K).
inline ScoreMatrix restrict_scores(const Matrix& block, const PerturbationTarget& t) {
    ScoreMatrix sm{Matrix(t.p(), block.rows)};
    for (std::size_t i = 0; i < t.p(); ++i)
        for (std::size_t y = 0; y < block.rows; ++y) sm.m(i, y) = block(y, t.coords[i]);
    return sm;
}

inline ScoreMatrix score_matrix(const ZooModel& m, const Sample& s, const PerturbationTarget& t,
                                ClassDistribution* probs = nullptr) {
    validate_target(m, t);
    return restrict_scores(score_block(m, s, t.kind, probs), t);
}

/// Gradient of f(omega) = -log P(y_pred | x, theta, omega) at omega = 0.
inline Vector loss_gradient(const ZooModel& m, const Sample& s, std::size_t y_pred, const PerturbationTarget& t) {
    require(y_pred < m.class_count, "y_pred outside the class range");
    const auto sm = score_matrix(m, s, t);
    Vector g = sm.column(y_pred);
    for (double& v : g) v = -v;
    return g;
}

/// Adds omega at the target's coordinates of the model or the input.
inline std::pair<ZooModel, Sample> apply_perturbation(const ZooModel& m, const Sample& s, const PerturbationTarget& t,
                                                      std::span<const double> omega) {
    validate_target(m, t);
    require(omega.size() == t.p(), "perturbation length does not match the target dimension");
    require(all_finite(omega), "perturbation has non-finite entries");
    ZooModel mp = m;
    Sample sp = s;
    switch (t.kind) {
    case TargetKind::parameter:
        for (std::size_t i = 0; i < t.p(); ++i) mp.checkpoint.flat(t.coords[i]) += omega[i];
        break;
    case TargetKind::pixel:
    case TargetKind::input_dim:
        for (std::size_t i = 0; i < t.p(); ++i) sp.x[t.coords[i]] += omega[i];
        break;
    case TargetKind::embedding_dim:
        if (sp.embed_offset.empty()) sp.embed_offset.assign(m.input.d_model, 0.0);
        for (std::size_t i = 0; i < t.p(); ++i) sp.embed_offset[t.coords[i]] += omega[i];
        break;
    }
    return {std::move(mp), std::move(sp)};
}

/// Autoregressive sampling from the full vocabulary. prefix.size() + length
/// must fit in the context.
inline std::vector<std::size_t> generate(const ZooModel& m, const std::vector<std::size_t>& prefix, std::size_t length,
                                         std::uint64_t seed) {
    require(m.arch == Arch::tiny_transformer, "generate requires a tiny-transformer");
    require(!prefix.empty(), "generate needs a nonempty prefix");
    require(prefix.size() + length <= m.input.context, "context overflow: generation exceeds the model context");
    Rng rng(seed);
    Sample s;
    s.tokens = prefix;
    for (std::size_t i = 0; i < length; ++i) {
        const auto probs = forward_probs(m, s);
        s.tokens.push_back(rng.categorical(probs.probs));
    }
    return s.tokens;
}

// ---------------------------------------------------------------------------
// Construction and training

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch = 32;
    double learning_rate = 3e-3;
    std::size_t class_count = 0;   // 0: infer from labels (transformer: vocabulary)
    std::size_t vocab = kTransformerVocab;
    std::size_t context = kTransformerContext;
    std::size_t d_model = kTransformerDim;
    std::size_t layers = kTransformerLayers;
};

/// Fresh randomly initialized model.
inline ZooModel init_model(Arch arch, std::size_t features, std::size_t classes, std::uint64_t seed,
                           const TrainConfig& cfg = {}) {
    Rng rng(derive_seed(seed, 0x1417));
    Checkpoint ck;
    ck.arch = arch_name(arch);
    ck.class_count = classes;
    auto gauss = [&](std::vector<std::size_t> shape, double sd) {
        Tensor t(std::move(shape), 0.0);
        for (double& v : t.data) v = sd * rng.normal();
        return t;
    };
    auto dense = [&](const std::string& n, std::size_t in, std::size_t out) {
        ck.tensors[n + ".w"] = gauss({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
        ck.tensors[n + ".b"] = Tensor({out}, 0.0);
    };
    switch (arch) {
    case Arch::softmax_regression:
        ck.tensors["w"] = gauss({features, classes}, 0.01);
        ck.tensors["b"] = Tensor({classes}, 0.0);
        break;
    case Arch::mlp_classifier:
        dense("l0", features, kMlpHidden);
        dense("l1", kMlpHidden, kMlpHidden);
        dense("l2", kMlpHidden, classes);
        break;
    case Arch::vision_classifier:
        dense("l0", features, kVisionHidden0);
        dense("l1", kVisionHidden0, kVisionHidden1);
        dense("l2", kVisionHidden1, classes);
        break;
    case Arch::tiny_transformer: {
        const std::size_t d = cfg.d_model;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        ck.class_count = cfg.vocab;
        ck.tensors["tok_emb"] = gauss({cfg.vocab, d}, 0.5);
        ck.tensors["pos_emb"] = gauss({cfg.context, d}, 0.1);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string b = "blk" + std::to_string(l) + ".";
            ck.tensors[b + "ln1.g"] = Tensor({d}, 1.0);
            ck.tensors[b + "ln1.b"] = Tensor({d}, 0.0);
            ck.tensors[b + "ln2.g"] = Tensor({d}, 1.0);
            ck.tensors[b + "ln2.b"] = Tensor({d}, 0.0);
            for (const char* n : {"attn.wq", "attn.wk", "attn.wv"}) ck.tensors[b + n] = gauss({d, d}, sd);
            ck.tensors[b + "attn.wo"] = gauss({d, d}, sd / std::sqrt(2.0 * static_cast<double>(cfg.layers)));
            for (const char* n : {"attn.bq", "attn.bk", "attn.bv", "attn.bo", "mlp.b2"}) ck.tensors[b + n] = Tensor({d}, 0.0);
            ck.tensors[b + "mlp.w1"] = gauss({d, 4 * d}, sd);
            ck.tensors[b + "mlp.b1"] = Tensor({4 * d}, 0.0);
            ck.tensors[b + "mlp.w2"] = gauss({4 * d, d}, 0.5 / std::sqrt(static_cast<double>(4 * d * cfg.layers)));
        }
        ck.tensors["ln_f.g"] = Tensor({d}, 1.0);
        ck.tensors["ln_f.b"] = Tensor({d}, 0.0);
        ck.tensors["head.w"] = gauss({d, cfg.vocab}, sd);
        ck.tensors["head.b"] = Tensor({cfg.vocab}, 0.0);
        break;
    }
    }
    return ZooModel::from_checkpoint(std::move(ck));
}

namespace detail {

/// Adam state laid out over the flat parameter vector.
struct Adam {
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Vector m, v;
    std::size_t step = 0;

    explicit Adam(std::size_t n, double lr_) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void apply(Checkpoint& ck, const Vector& grad) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        std::size_t i = 0;
        for (auto& [_, t] : ck.tensors)
            for (double& w : t.data) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                w -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
                ++i;
            }
    }
};

/// Mean cross-entropy and its parameter gradient over a minibatch.
inline double batch_loss_grad(const ZooModel& m, const Dataset& data, std::span<const std::size_t> idx, Vector& grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    if (m.arch != Arch::tiny_transformer) {
        Matrix x(idx.size(), m.input.features);
        std::vector<std::size_t> y(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const Sample& s = data[idx[r]];
            check_sample(m, s);
            std::copy(s.x.begin(), s.x.end(), x.row(r).begin());
            y[r] = s.y;
        }
        Trace tr;
        build_feature(tr, m, std::move(x), true, false);
        ad::Var loss = tr.tape.nll_mean(tr.logp, std::move(y));
        tr.tape.backward(loss, Matrix(1, 1, 1.0));
        grad = flat_grad(tr, Wrt::params);
        return tr.tape.value(loss).data[0];
    }
    double total = 0.0;
    for (std::size_t i : idx) {
        const Sample& s = data[i];
        std::vector<std::size_t> seq = s.tokens;
        seq.push_back(s.y);
        require(seq.size() <= m.input.context + 1, "context overflow: training sequence too long");
        std::vector<std::size_t> in(seq.begin(), seq.end() - 1), tgt(seq.begin() + 1, seq.end());
        Trace tr;
        build_transformer(tr, m, in, {}, true, false, false);
        ad::Var loss = tr.tape.nll_mean(tr.logp, std::move(tgt));
        tr.tape.backward(loss, Matrix(1, 1, 1.0));
        const Vector g = flat_grad(tr, Wrt::params);
        for (std::size_t k = 0; k < g.size(); ++k) grad[k] += g[k];
        total += tr.tape.value(loss).data[0];
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (double& g : grad) g *= inv;
    return total * inv;
}

} // namespace detail

inline double accuracy(const ZooModel& m, const Dataset& d) {
    require(!d.empty(), "accuracy: empty dataset");
    std::size_t hits = 0;
    for (const auto& s : d) hits += predict(m, s) == s.y;
    return static_cast<double>(hits) / static_cast<double>(d.size());
}

/// Continues training an existing model with minibatch Adam on cross-entropy.
inline ZooModel fine_tune(ZooModel m, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
    require(!data.empty(), "training dataset is empty");
    for (const auto& s : data) {
        require(s.y < m.class_count, "label outside the model's class range");
        detail::check_sample(m, s);
    }
    require(cfg.batch >= 1, "batch size must be positive");
    Rng rng(derive_seed(seed, 0x5eed));
    detail::Adam opt(m.parameter_count(), cfg.learning_rate);
    Vector grad(m.parameter_count());
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
            const std::size_t e = std::min(order.size(), b + cfg.batch);
            const double loss = detail::batch_loss_grad(m, data, std::span(order).subspan(b, e - b), grad);
            if (!std::isfinite(loss) || !all_finite(grad))
                throw TrainingFailure("training diverged: non-finite loss at epoch " + std::to_string(epoch));
            opt.apply(m.checkpoint, grad);
        }
    }
    for (const auto& [n, t] : m.checkpoint.tensors)
        if (!all_finite(t.data)) throw TrainingFailure("training diverged: non-finite parameters in " + n);
    m.train_accuracy = accuracy(m, data);
    return m;
}

/// Trains a fresh model of the given architecture; deterministic given seed.
inline ZooModel train_toy(Arch arch, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
    require(!data.empty(), "training dataset is empty");
    std::size_t classes = cfg.class_count;
    std::size_t features = 0;
    if (arch == Arch::tiny_transformer) {
        classes = cfg.vocab;
    } else {
        features = data.front().x.size();
        require(features >= 1, "feature samples are empty");
        if (classes == 0) {
            for (const auto& s : data) classes = std::max(classes, s.y + 1);
            classes = std::max<std::size_t>(classes, 2);
        }
    }
    ZooModel m = init_model(arch, features, classes, seed, cfg);
    return fine_tune(std::move(m), data, cfg, seed);
}

} // namespace stab
