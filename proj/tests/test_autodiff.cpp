#include <gtest/gtest.h>

#include <functional>

#include "stab/autodiff.hpp"
#include "stab/random.hpp"

using namespace stab;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal();
    return m;
}

// Checks d<R, op(inputs)>/d input against central differences for every input.
void check_op(const std::vector<Matrix>& inputs, const Builder& build, double tol = 1e-7) {
    Rng rng(99);
    Tape probe;
    std::vector<Var> pv;
    for (const auto& m : inputs) pv.push_back(probe.leaf(m, false));
    const Matrix out_shape = probe.value(build(probe, pv));
    const Matrix readout = random_matrix(rng, out_shape.rows, out_shape.cols);

    Tape tape;
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m, true));
    Var out = build(tape, vars);
    tape.backward(out, readout);

    for (std::size_t which = 0; which < inputs.size(); ++which) {
        auto f = [&](std::span<const double> flat) {
            Tape t;
            std::vector<Var> vs;
            for (std::size_t k = 0; k < inputs.size(); ++k)
                vs.push_back(t.leaf(k == which ? Matrix(inputs[k].rows, inputs[k].cols, Vector(flat.begin(), flat.end()))
                                               : inputs[k]));
            return dot(t.value(build(t, vs)).data, readout.data);
        };
        const Vector fd = finite_diff_gradient(f, inputs[which].data, 1e-6);
        const Matrix& g = tape.grad(vars[which]);
        for (std::size_t i = 0; i < fd.size(); ++i)
            ASSERT_NEAR(g.data[i], fd[i], tol * std::max(1.0, std::abs(fd[i]))) << "input " << which << " coord " << i;
    }
}

} // namespace

TEST(Autodiff, MatmulAndTranspose) {
    Rng rng(1);
    check_op({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)},
             [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); });
    check_op({random_matrix(rng, 3, 4), random_matrix(rng, 2, 4)},
             [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], t.transpose(v[1])); });
}

TEST(Autodiff, ElementwiseOps) {
    Rng rng(2);
    const Matrix a = random_matrix(rng, 3, 5), b = random_matrix(rng, 3, 5), r = random_matrix(rng, 1, 5);
    check_op({a, b}, [](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); });
    check_op({a, r}, [](Tape& t, const std::vector<Var>& v) { return t.add_row(v[0], v[1]); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], -1.7); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.tanh(v[0]); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.gelu(v[0]); });
}

TEST(Autodiff, Normalizations) {
    Rng rng(3);
    const Matrix a = random_matrix(rng, 4, 6), g = random_matrix(rng, 1, 6), b = random_matrix(rng, 1, 6);
    check_op({a, g, b}, [](Tape& t, const std::vector<Var>& v) { return t.layer_norm(v[0], v[1], v[2]); });
    check_op({random_matrix(rng, 4, 4)}, [](Tape& t, const std::vector<Var>& v) { return t.causal_softmax(v[0]); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.log_softmax(v[0]); });
}

TEST(Autodiff, IndexingOps) {
    Rng rng(4);
    const Matrix table = random_matrix(rng, 5, 3), a = random_matrix(rng, 4, 6);
    check_op({table}, [](Tape& t, const std::vector<Var>& v) { return t.gather_rows(v[0], {4, 1, 1, 0}); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.slice_rows(v[0], 1, 3); });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.slice_cols(v[0], 2, 5); });
    check_op({a, a}, [](Tape& t, const std::vector<Var>& v) {
        return t.concat_cols({t.slice_cols(v[0], 0, 2), v[1]});
    });
    check_op({a}, [](Tape& t, const std::vector<Var>& v) { return t.nll_mean(t.log_softmax(v[0]), {0, 5, 2, 2}); });
}

TEST(Autodiff, CausalSoftmaxMasksFuture) {
    Tape t;
    Var s = t.causal_softmax(t.leaf(Matrix(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9})));
    const Matrix& y = t.value(s);
    EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
    EXPECT_EQ(y(0, 1), 0.0);
    EXPECT_EQ(y(1, 2), 0.0);
    EXPECT_NEAR(y(2, 0) + y(2, 1) + y(2, 2), 1.0, 1e-15);
}

TEST(Autodiff, LeavesWithoutGradAreSkipped) {
    Tape t;
    Var a = t.leaf(Matrix(1, 2, {1, 2}), false);
    Var b = t.leaf(Matrix(2, 1, {3, 4}), true);
    Var c = t.matmul(a, b);
    t.backward(c, Matrix(1, 1, 1.0));
    EXPECT_TRUE(t.grad(a).empty());
    EXPECT_DOUBLE_EQ(t.grad(b).data[0], 1.0);
    EXPECT_DOUBLE_EQ(t.grad(b).data[1], 2.0);
}
