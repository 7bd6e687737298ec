#include <cmath>
#include <random>

#include "doctest.h"
#include "seqcomm/autodiff.hpp"

using namespace seqcomm;

namespace {

// central differences of the gradient, independent route for checking hvp
std::vector<Tensor> fd_of_grad(const LossFn& f, const std::vector<Tensor>& params,
                               const std::vector<Tensor>& v, double eps) {
    std::vector<Tensor> plus = params, minus = params;
    for (size_t i = 0; i < params.size(); ++i)
        for (int64_t j = 0; j < params[i].numel(); ++j) {
            plus[i][j] += eps * v[i][j];
            minus[i][j] -= eps * v[i][j];
        }
    auto gp = grad(f, plus);
    auto gm = grad(f, minus);
    for (size_t i = 0; i < gp.size(); ++i)
        for (int64_t j = 0; j < gp[i].numel(); ++j)
            gp[i][j] = (gp[i][j] - gm[i][j]) / (2.0 * eps);
    return gp;
}

double rel_err(double a, double b) { return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-12); }

Var half_sq_norm(const std::vector<Var>& p) { return scale(sumsq(p[0]), 0.5); }

}  // namespace

TEST_CASE("grad of quadratic is the identity map") {
    std::vector<Tensor> w{Tensor::vec({3.0, 4.0})};
    auto g = grad(half_sq_norm, w);
    CHECK(g[0][0] == doctest::Approx(3.0));
    CHECK(g[0][1] == doctest::Approx(4.0));
}

TEST_CASE("grad of constant is zero") {
    LossFn f = [](const std::vector<Var>&) { return Var::scalar(7.5); };
    std::vector<Tensor> w{Tensor::vec({1.0, -2.0, 0.5})};
    auto g = grad(f, w);
    for (int i = 0; i < 3; ++i) CHECK(g[0][i] == 0.0);
}

TEST_CASE("grad of sum of LeakyReLU uses slope 0.01 on the negative side") {
    LossFn f = [](const std::vector<Var>& p) { return sum_all(leaky_relu(p[0], 0.01)); };
    std::vector<Tensor> w{Tensor::vec({-1.0, 2.0})};
    auto g = grad(f, w);
    CHECK(g[0][0] == doctest::Approx(0.01));
    CHECK(g[0][1] == doctest::Approx(1.0));
}

TEST_CASE("LeakyReLU derivative at exactly zero is the negative slope") {
    LossFn f = [](const std::vector<Var>& p) { return sum_all(leaky_relu(p[0], 0.01)); };
    std::vector<Tensor> w{Tensor::vec({0.0})};
    auto g = grad(f, w);
    CHECK(g[0][0] == doctest::Approx(0.01));
}

TEST_CASE("grad rejects non-scalar losses") {
    LossFn f = [](const std::vector<Var>& p) { return add(p[0], p[0]); };
    std::vector<Tensor> w{Tensor::vec({1.0, 2.0})};
    CHECK_THROWS_AS(grad(f, w), UsageError);
}

TEST_CASE("non-finite intermediates raise a numerical error") {
    LossFn f = [](const std::vector<Var>& p) { return sum_all(log_(p[0])); };
    std::vector<Tensor> w{Tensor::vec({-1.0})};
    CHECK_THROWS_AS(eval_loss(f, w), NumericalError);
}

TEST_CASE("hvp on quadratic returns v") {
    std::vector<Tensor> w{Tensor::vec({1.0, -2.0, 3.0})};
    std::vector<Tensor> v{Tensor::vec({0.5, 0.25, -1.0})};
    auto hv = hvp(half_sq_norm, w, v);
    for (int i = 0; i < 3; ++i) CHECK(hv[0][i] == doctest::Approx(v[0][i]));
}

TEST_CASE("hvp with bilinear form matches A v and central differences of grad") {
    // f = 0.5 w^T A w with A=[[2,1],[1,3]] -> H = A
    LossFn f = [](const std::vector<Var>& p) {
        Var w2 = reshape(p[0], {2, 1});
        Var A = Var::constant(Tensor({2, 2}, {2.0, 1.0, 1.0, 3.0}));
        return scale(sum_all(mul(reshape(matmul(A, w2), {2}), p[0])), 0.5);
    };
    std::vector<Tensor> w{Tensor::vec({0.7, -1.2})};
    std::vector<Tensor> v{Tensor::vec({1.0, 0.0})};
    auto hv = hvp(f, w, v);
    CHECK(hv[0][0] == doctest::Approx(2.0));
    CHECK(hv[0][1] == doctest::Approx(1.0));

    auto fd = fd_of_grad(f, w, v, 1e-5);
    CHECK(rel_err(hv[0][0], fd[0][0]) < 1e-3);
    CHECK(rel_err(hv[0][1], fd[0][1]) < 1e-3);
}

TEST_CASE("hvp of zero vector is zero and hvp is linear in v") {
    std::mt19937_64 rng(11);
    LossFn f = [](const std::vector<Var>& p) {
        return sum_all(exp_(scale(leaky_relu(p[0], 0.01), 0.3)));
    };
    std::vector<Tensor> w{Tensor::uniform({5}, 0.2, 1.5, rng)};

    std::vector<Tensor> z{Tensor::zeros({5})};
    auto hz = hvp(f, w, z);
    for (int i = 0; i < 5; ++i) CHECK(hz[0][i] == 0.0);

    std::vector<Tensor> v1{Tensor::uniform({5}, -1, 1, rng)};
    std::vector<Tensor> v2{Tensor::uniform({5}, -1, 1, rng)};
    double a = 0.37, b = -1.21;
    std::vector<Tensor> mix{Tensor::zeros({5})};
    for (int i = 0; i < 5; ++i) mix[0][i] = a * v1[0][i] + b * v2[0][i];
    auto h1 = hvp(f, w, v1);
    auto h2 = hvp(f, w, v2);
    auto hm = hvp(f, w, mix);
    for (int i = 0; i < 5; ++i)
        CHECK(hm[0][i] == doctest::Approx(a * h1[0][i] + b * h2[0][i]).epsilon(1e-9));
}

TEST_CASE("hvp rejects shape mismatches") {
    std::vector<Tensor> w{Tensor::vec({1.0, 2.0})};
    std::vector<Tensor> v{Tensor::vec({1.0, 2.0, 3.0})};
    CHECK_THROWS_AS(hvp(half_sq_norm, w, v), UsageError);
}

TEST_CASE("finite_diff_check on quadratic is exact up to round-off") {
    std::vector<Tensor> w{Tensor::vec({0.3, -0.9, 2.0})};
    CHECK(finite_diff_check(half_sq_norm, w, 1e-5) < 1e-8);
}

TEST_CASE("finite_diff_check on constant function is zero") {
    LossFn f = [](const std::vector<Var>&) { return Var::scalar(3.0); };
    std::vector<Tensor> w{Tensor::vec({1.0, 2.0})};
    CHECK(finite_diff_check(f, w, 1e-5) == 0.0);
}

namespace {

// three-layer MLP loss over all parameters; exercises the batched linear path
Var mlp3_loss(const std::vector<Var>& p, const Tensor& x, const Tensor& y) {
    Var X = Var::constant(x);
    Var h1 = leaky_relu(add_rowvec(matmul(X, transpose(p[0])), p[1]), 0.01);
    Var h2 = leaky_relu(add_rowvec(matmul(h1, transpose(p[2])), p[3]), 0.01);
    Var out = add_rowvec(matmul(h2, transpose(p[4])), p[5]);
    Var d = sub(out, Var::constant(y));
    return mean_all(mul(d, d));
}

std::vector<Tensor> mlp3_params(std::mt19937_64& rng) {
    return {Tensor::uniform({6, 4}, -0.8, 0.8, rng), Tensor::uniform({6}, -0.5, 0.5, rng),
            Tensor::uniform({5, 6}, -0.8, 0.8, rng), Tensor::uniform({5}, -0.5, 0.5, rng),
            Tensor::uniform({2, 5}, -0.8, 0.8, rng), Tensor::uniform({2}, -0.5, 0.5, rng)};
}

}  // namespace

TEST_CASE("finite_diff_check on a 3-layer MLP loss stays under 1e-4") {
    std::mt19937_64 rng(5);
    Tensor x = Tensor::uniform({7, 4}, -1.0, 1.0, rng);
    Tensor y = Tensor::uniform({7, 2}, -1.0, 1.0, rng);
    auto params = mlp3_params(rng);
    LossFn f = [&](const std::vector<Var>& p) { return mlp3_loss(p, x, y); };
    CHECK(finite_diff_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("every primitive passes the finite-difference oracle") {
    std::mt19937_64 rng(17);
    // inputs kept away from LeakyReLU/abs kinks (|x| >= 1e-3 after ops)
    Tensor m0 = Tensor::uniform({3, 4}, 0.2, 1.4, rng);
    Tensor v0 = Tensor::uniform({4}, 0.3, 1.2, rng);

    struct Case {
        const char* name;
        LossFn f;
    };
    std::vector<Case> cases;
    cases.push_back({"add/sub/mul/neg", [&](const std::vector<Var>& p) {
                         Var a = p[0];
                         Var b = broadcast_rows(p[1], 3);
                         return sum_all(mul(sub(add(a, b), neg(b)), a));
                     }});
    cases.push_back({"scale/add_const/smul", [&](const std::vector<Var>& p) {
                         Var s = sum_all(p[1]);
                         return sum_all(smul(s, add_const(scale(p[0], 1.7), 0.3)));
                     }});
    cases.push_back({"matmul/transpose", [&](const std::vector<Var>& p) {
                         return sum_all(matmul(transpose(p[0]), p[0]));
                     }});
    cases.push_back({"rowvec/sum_rows/cols", [&](const std::vector<Var>& p) {
                         Var m = add_rowvec(p[0], p[1]);
                         return sum_all(mul(sum_cols(m), sum_cols(m))) ;
                     }});
    cases.push_back({"broadcasts", [&](const std::vector<Var>& p) {
                         Var col = sum_cols(p[0]);
                         Var m = mul(broadcast_col(col, 4), broadcast_rows(p[1], 3));
                         return mean_all(m);
                     }});
    cases.push_back({"concat/slice/embed", [&](const std::vector<Var>& p) {
                         Var row = reshape(slice_cols(p[0], 1, 3), {6});
                         Var c = concat({row, p[1]});
                         return sumsq(slice(c, 2, 8));
                     }});
    cases.push_back({"exp/log/recip", [&](const std::vector<Var>& p) {
                         return sum_all(log_(add_const(exp_(neg(p[0])), 1.0)));
                     }});
    cases.push_back({"leaky/abs/clamp", [&](const std::vector<Var>& p) {
                         Var z = sub(p[0], Var::constant(Tensor::full({3, 4}, 0.8)));
                         return sum_all(add(leaky_relu(z, 0.01), abs_(clamp_min(z, -0.5))));
                     }});
    cases.push_back({"rowmax/max_all", [&](const std::vector<Var>& p) {
                         return add(sum_all(rowmax(p[0])), max_all(p[1]));
                     }});
    cases.push_back({"logsumexp_rows", [&](const std::vector<Var>& p) {
                         return sum_all(logsumexp_rows(p[0], 0.1));
                     }});
    cases.push_back({"concat_cols/embed_cols", [&](const std::vector<Var>& p) {
                         Var two = concat_cols({p[0], p[0]});
                         return sumsq(embed_cols(slice_cols(two, 3, 6), 1, 5));
                     }});

    for (auto& c : cases) {
        std::vector<Tensor> params{m0, v0};
        double err = finite_diff_check(c.f, params, 1e-5);
        INFO(c.name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("hvp matches finite differences of the gradient on a composite function") {
    std::mt19937_64 rng(23);
    Tensor x = Tensor::uniform({6, 4}, -1.0, 1.0, rng);
    Tensor y = Tensor::uniform({6, 2}, -1.0, 1.0, rng);
    auto params = mlp3_params(rng);
    LossFn f = [&](const std::vector<Var>& p) { return mlp3_loss(p, x, y); };

    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Tensor> v;
        for (auto& p : params) v.push_back(Tensor::uniform(p.shape(), -1.0, 1.0, rng));
        auto hv = hvp(f, params, v);
        auto fd = fd_of_grad(f, params, v, 1e-5);
        double hnorm = 0, dnorm = 0;
        for (size_t i = 0; i < hv.size(); ++i)
            for (int64_t j = 0; j < hv[i].numel(); ++j) {
                hnorm += (hv[i][j] - fd[i][j]) * (hv[i][j] - fd[i][j]);
                dnorm += fd[i][j] * fd[i][j];
            }
        CHECK(std::sqrt(hnorm) < 1e-3 * (std::sqrt(dnorm) + 1.0));
    }
}

TEST_CASE("replaying the same function yields bit-identical gradients") {
    std::mt19937_64 rng(31);
    Tensor x = Tensor::uniform({5, 4}, -1.0, 1.0, rng);
    Tensor y = Tensor::uniform({5, 2}, -1.0, 1.0, rng);
    auto params = mlp3_params(rng);
    LossFn f = [&](const std::vector<Var>& p) { return mlp3_loss(p, x, y); };
    auto g1 = grad(f, params);
    auto g2 = grad(f, params);
    for (size_t i = 0; i < g1.size(); ++i)
        for (int64_t j = 0; j < g1[i].numel(); ++j) {
            // bit-identical, not approximately equal
            CHECK(g1[i][j] == g2[i][j]);
        }
}

TEST_CASE("flatten/unflatten round-trips and clip bounds the global norm") {
    std::mt19937_64 rng(41);
    std::vector<Tensor> ts{Tensor::uniform({3, 2}, -2, 2, rng), Tensor::uniform({4}, -2, 2, rng)};
    auto flat = flatten(ts);
    std::vector<Tensor> copy{Tensor::zeros({3, 2}), Tensor::zeros({4})};
    unflatten(flat, copy);
    for (size_t i = 0; i < ts.size(); ++i)
        for (int64_t j = 0; j < ts[i].numel(); ++j) CHECK(ts[i][j] == copy[i][j]);

    clip_global_norm(ts, 0.5);
    CHECK(global_norm(ts) <= 0.5 + 1e-12);
}
