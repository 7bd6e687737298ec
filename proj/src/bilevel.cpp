#include "seqcomm/bilevel.hpp"

#include <cmath>
#include <string>

namespace seqcomm {

// ---------------- conjugate gradient ----------------

CgResult cg_solve(const HvpOracle& hvp, const std::vector<double>& b, double lambda,
                  int max_iters, double tol) {
    if (lambda < 0.0) throw UsageError("cg_solve: negative damping");
    size_t n = b.size();
    CgResult res;
    res.v.assign(n, 0.0);
    std::vector<double> r = b, p = b, Ap(n);
    auto dot = [](const std::vector<double>& a, const std::vector<double>& c) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * c[i];
        return s;
    };
    double rs = dot(r, r);
    res.residual = std::sqrt(rs);
    if (res.residual < tol) return res;
    int rising = 0;
    double prev_residual = res.residual;
    for (int it = 0; it < max_iters; ++it) {
        hvp(p, Ap);
        if (Ap.size() != n) throw UsageError("cg_solve: oracle output size mismatch");
        if (lambda != 0.0)
            for (size_t i = 0; i < n; ++i) Ap[i] += lambda * p[i];
        double pAp = dot(p, Ap);
        if (!(pAp > 0.0))
            throw NumericalError("cg_solve: non-positive curvature, system is not PSD");
        double alpha = rs / pAp;
        for (size_t i = 0; i < n; ++i) {
            res.v[i] += alpha * p[i];
            r[i] -= alpha * Ap[i];
        }
        double rs_new = dot(r, r);
        res.iterations = it + 1;
        res.residual = std::sqrt(rs_new);
        if (res.residual < tol) return res;
        if (res.residual > prev_residual) {
            if (++rising >= 3)
                throw NumericalError("cg_solve: residual increased three iterations in a row");
        } else {
            rising = 0;
        }
        prev_residual = res.residual;
        double beta = rs_new / rs;
        for (size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
        rs = rs_new;
    }
    return res;
}

// ---------------- inner loop ----------------

InnerLoopResult inner_loop(const LossFn& loss, std::vector<Tensor>& w, int k_inner, double lr,
                           double clip_norm) {
    if (k_inner < 0) throw UsageError("inner_loop: negative step count");
    InnerLoopResult res;
    for (int step = 0; step < k_inner; ++step) {
        std::vector<Tensor> g;
        try {
            g = grad(loss, w);
        } catch (const NumericalError& e) {
            throw NumericalError("inner_loop: diverged at step " + std::to_string(step) + ": " +
                                 e.what());
        }
        if (step == 0) res.entry_grad_norm = global_norm(g);
        if (clip_norm > 0.0) clip_global_norm(g, clip_norm);
        for (size_t i = 0; i < w.size(); ++i)
            for (int64_t j = 0; j < w[i].numel(); ++j) w[i][j] -= lr * g[i][j];
        res.steps = step + 1;
    }
    std::vector<Tensor> g_exit = grad(loss, w);
    res.exit_grad_norm = global_norm(g_exit);
    if (res.steps == 0) res.entry_grad_norm = res.exit_grad_norm;
    res.final_loss = eval_loss(loss, w);
    res.warn = res.exit_grad_norm > 1e-2;
    return res;
}

// ---------------- hypergradient ----------------

std::vector<Tensor> hypergradient(const BiLossFn& model_loss, const BiLossFn& true_loss,
                                  const LossFn& curvature_loss, const std::vector<Tensor>& theta,
                                  const std::vector<Tensor>& w, double lambda, int k_cg,
                                  HypergradReport* report) {
    GradModeGuard guard(true);

    // direct term and the adjoint right-hand side from one backward pass
    std::vector<Var> th_vars, w_vars, all_vars;
    for (const auto& t : theta) th_vars.push_back(Var::leaf(t));
    for (const auto& t : w) w_vars.push_back(Var::leaf(t));
    all_vars = th_vars;
    all_vars.insert(all_vars.end(), w_vars.begin(), w_vars.end());
    Var lt = true_loss(th_vars, w_vars);
    std::vector<Tensor> gt = grad(lt, all_vars);
    std::vector<Tensor> direct(gt.begin(), gt.begin() + theta.size());
    std::vector<Tensor> b_tensors(gt.begin() + theta.size(), gt.end());

    HypergradReport rep;
    rep.direct_norm = global_norm(direct);

    std::vector<double> b = flatten(b_tensors);
    double bnorm = 0;
    for (double x : b) bnorm += x * x;

    std::vector<Tensor> result = direct;
    if (bnorm == 0.0) {
        // indirect term vanishes exactly
        if (report) *report = rep;
        return result;
    }

    std::vector<Tensor> vbuf = b_tensors;  // shape template
    HvpOracle oracle = [&](const std::vector<double>& v, std::vector<double>& out) {
        unflatten(v, vbuf);
        std::vector<Tensor> hv = hvp(curvature_loss, w, vbuf);
        out = flatten(hv);
    };
    CgResult cg = cg_solve(oracle, b, lambda, k_cg);
    rep.cg_residual = cg.residual;
    rep.cg_iterations = cg.iterations;

    // mixed second-order term: grad_theta (grad_w L_model . v*)
    std::vector<Tensor> vstar = b_tensors;
    unflatten(cg.v, vstar);
    std::vector<Var> th2, w2;
    for (const auto& t : theta) th2.push_back(Var::leaf(t));
    for (const auto& t : w) w2.push_back(Var::leaf(t));
    Var lm = model_loss(th2, w2);
    std::vector<Var> gw = grad_vars(lm, w2, /*create_graph=*/true);
    Var s;
    for (size_t i = 0; i < gw.size(); ++i) {
        Var term = sum_all(mul(gw[i], Var::constant(vstar[i])));
        s = s.defined() ? add(s, term) : term;
    }
    std::vector<Tensor> gmix = grad(s, th2);
    rep.indirect_norm = global_norm(gmix);

    for (size_t i = 0; i < result.size(); ++i)
        for (int64_t j = 0; j < result[i].numel(); ++j) result[i][j] -= gmix[i][j];
    if (report) *report = rep;
    return result;
}

// ---------------- batch losses ----------------

namespace {

Var batch_const(const Tensor& t) { return Var::constant(t); }

// recomputed next-state messages: full-visibility views shared by all agents
std::vector<Var> next_state_views(const WorldModelVars& theta, const EnvDims& dims,
                                  const std::vector<Var>& obs_next, int B, bool has_comm) {
    Var full;
    if (has_comm) {
        std::vector<Var> enc;
        for (int i = 0; i < dims.n_agents; ++i)
            enc.push_back(mlp_forward(theta.encoder, obs_next[i]));
        full = concat_cols(enc);
    } else {
        full = Var::constant(Tensor::zeros({B, dims.msg_view_dim()}));
    }
    return std::vector<Var>(dims.n_agents, full);
}

}  // namespace

Var batch_joint_q(const CriticVars& cv, const EnvDims& dims, const Batch& batch) {
    std::vector<Var> obs, views, onehot;
    for (int i = 0; i < dims.n_agents; ++i) {
        obs.push_back(batch_const(batch.obs[i]));
        views.push_back(batch_const(batch.views[i]));
        onehot.push_back(batch_const(batch.act_onehot[i]));
    }
    return critic_joint_q_rec(cv, dims, batch_const(batch.S), obs, views, onehot);
}

Var model_targets_rec(const WorldModelVars& theta, const Critic& cbar, const EnvDims& dims,
                      const Batch& batch, const LossParams& p) {
    if (batch.B < 1) throw UsageError("model_targets: empty batch");
    // dynamics input: state . joint-action one-hot . flat messages
    std::vector<Var> parts{batch_const(batch.S)};
    for (int i = 0; i < dims.n_agents; ++i) parts.push_back(batch_const(batch.act_onehot[i]));
    parts.push_back(batch_const(batch.M_flat));
    Var out = mlp_forward(theta.dynamics, concat_cols(parts));
    Var r_hat = slice_cols(out, 0, 1);
    Var s_hat = slice_cols(out, 1, 1 + dims.state_dim);

    std::vector<Var> obs_hat;
    for (int i = 0; i < dims.n_agents; ++i)
        obs_hat.push_back(slice_cols(s_hat, i * dims.obs_dim, (i + 1) * dims.obs_dim));
    std::vector<Var> views = next_state_views(theta, dims, obs_hat, batch.B, p.has_comm);
    Var v = soft_value_rec(cbar, dims, s_hat, obs_hat, views, p.tau, p.enumerated_value);
    return add(r_hat, scale(v, p.gamma));
}

Var true_targets_rec(const WorldModelVars& theta, const Critic& cbar, const EnvDims& dims,
                     const Batch& batch, const LossParams& p) {
    if (batch.B < 1) throw UsageError("true_targets: empty batch");
    std::vector<Var> obs_next;
    for (int i = 0; i < dims.n_agents; ++i) obs_next.push_back(batch_const(batch.obs_next[i]));
    std::vector<Var> views = next_state_views(theta, dims, obs_next, batch.B, p.has_comm);
    Var v = soft_value_rec(cbar, dims, batch_const(batch.S_next), obs_next, views, p.tau,
                           p.enumerated_value);
    return add(batch_const(batch.R), scale(v, p.gamma));
}

Var model_loss_rec(const CriticVars& cv, const Var& targets, const EnvDims& dims,
                   const Batch& batch, const LossParams& p) {
    Var q = batch_joint_q(cv, dims, batch);
    Var d = sub(q, targets);
    Var loss = mean_all(mul(d, d));
    if (p.lambda_reg != 0.0) {
        std::vector<Var> ws;
        append_params(cv, ws);
        Var reg;
        for (const auto& t : ws) {
            Var sq = sumsq(t);
            reg = reg.defined() ? add(reg, sq) : sq;
        }
        loss = add(loss, scale(reg, p.lambda_reg));
    }
    return loss;
}

Var awareness_loss_rec(const CriticVars& cv, const EnvDims& dims, const Batch& batch,
                       const LossParams& p) {
    if (p.eps_margin <= 0.0) throw UsageError("awareness_loss: margin must be positive");
    Var q_m = batch_joint_q(cv, dims, batch);
    Batch nulled = batch;
    for (auto& v : nulled.views) v = Tensor::zeros(v.shape());
    Var q_0 = batch_joint_q(cv, dims, nulled);
    Var gap = abs_(sub(q_m, q_0));
    Var hinge = relu(sub(Var::constant(Tensor::full(gap.value().shape(), p.eps_margin)), gap));
    return mean_all(hinge);
}

Var true_loss_rec(const CriticVars& cv, const Var& targets, const EnvDims& dims,
                  const Batch& batch) {
    Var q = batch_joint_q(cv, dims, batch);
    Var d = sub(q, targets);
    return mean_all(mul(d, d));
}

Tensor eval_model_targets(const WorldModel& wm, const Critic& cbar, const EnvDims& dims,
                          const Batch& batch, const LossParams& p) {
    NoGradGuard guard;
    WorldModelVars tv = world_model_vars(wm, /*requires_grad=*/false);
    return model_targets_rec(tv, cbar, dims, batch, p).value();
}

}  // namespace seqcomm
