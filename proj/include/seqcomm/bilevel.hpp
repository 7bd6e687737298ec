#pragma once

#include <functional>
#include <vector>

#include "seqcomm/autodiff.hpp"
#include "seqcomm/comm.hpp"
#include "seqcomm/nets.hpp"

namespace seqcomm {

// ---------------- conjugate gradient ----------------

struct CgResult {
    std::vector<double> v;
    double residual = 0.0;
    int iterations = 0;
};

using HvpOracle = std::function<void(const std::vector<double>& v, std::vector<double>& out)>;

// Solves (H + lambda I) v = b. Early exit when ||r|| < tol. Aborts with a
// NumericalError when the residual grows three iterations in a row or a
// non-positive curvature direction shows up (H not PSD).
CgResult cg_solve(const HvpOracle& hvp, const std::vector<double>& b, double lambda,
                  int max_iters, double tol = 1e-8);

// ---------------- inner loop ----------------

struct InnerLoopResult {
    double final_loss = 0.0;
    double entry_grad_norm = 0.0;
    double exit_grad_norm = 0.0;
    int steps = 0;
    bool warn = false;  // exit gradient norm above 1e-2: IFT validity degraded
};

// Plain gradient descent with global-norm clipping on a w-only recorded loss.
InnerLoopResult inner_loop(const LossFn& loss, std::vector<Tensor>& w, int k_inner, double lr,
                           double clip_norm);

// ---------------- hypergradient ----------------

struct HypergradReport {
    double direct_norm = 0.0;
    double indirect_norm = 0.0;
    double cg_residual = 0.0;
    int cg_iterations = 0;
    double inner_exit_grad_norm = 0.0;  // filled by the caller when available
};

using BiLossFn = std::function<Var(const std::vector<Var>& theta, const std::vector<Var>& w)>;

// d L_true / d theta = grad_theta L_true - grad_theta (grad_w L_model . v*),
// (H + lambda I) v* = b = grad_w L_true. The curvature loss supplies the
// positive-semidefinite Hessian surrogate used by CG.
std::vector<Tensor> hypergradient(const BiLossFn& model_loss, const BiLossFn& true_loss,
                                  const LossFn& curvature_loss, const std::vector<Tensor>& theta,
                                  const std::vector<Tensor>& w, double lambda, int k_cg,
                                  HypergradReport* report = nullptr);

// ---------------- batch losses (Bellman residuals) ----------------

struct Batch {
    int B = 0;
    Tensor S;                        // [B, state_dim]
    Tensor S_next;                   // [B, state_dim]
    Tensor R;                        // [B, 1]
    Tensor M_flat;                   // [B, N*d_m] full message tensor rows
    std::vector<Tensor> obs;         // per agent [B, obs_dim]
    std::vector<Tensor> obs_next;    // per agent [B, obs_dim]
    std::vector<Tensor> views;       // per agent [B, N*d_m] decision-time masked views
    std::vector<Tensor> act_onehot;  // per agent [B, A]
};

struct LossParams {
    double gamma = 0.9;
    double tau = 0.1;
    double lambda_reg = 1e-3;
    double lambda_aware = 0.05;
    double eps_margin = 0.1;
    bool enumerated_value = true;  // pre-warmup soft value route
    bool has_comm = true;
};

// Recorded joint Q over the batch under leaf/constant critic vars.
Var batch_joint_q(const CriticVars& cv, const EnvDims& dims, const Batch& batch);

// Model-target graph: y = r_hat + gamma V_wbar(s_hat', phi_theta(s_hat')).
// Gradients flow into theta; the target critic stays fixed.
Var model_targets_rec(const WorldModelVars& theta, const Critic& cbar, const EnvDims& dims,
                      const Batch& batch, const LossParams& p);
// True-environment target: y = r + gamma V_wbar(s', phi_theta(s')).
Var true_targets_rec(const WorldModelVars& theta, const Critic& cbar, const EnvDims& dims,
                     const Batch& batch, const LossParams& p);

// L_model = mean (Q_w - y)^2 + lambda_reg ||w||^2.
Var model_loss_rec(const CriticVars& cv, const Var& targets, const EnvDims& dims,
                   const Batch& batch, const LossParams& p);
// L_aware = mean hinge(eps_margin - |Q(s,a,M) - Q(s,a,0)|).
Var awareness_loss_rec(const CriticVars& cv, const EnvDims& dims, const Batch& batch,
                       const LossParams& p);
// L_true = mean (Q_w - y_true)^2 (no regularizer).
Var true_loss_rec(const CriticVars& cv, const Var& targets, const EnvDims& dims,
                  const Batch& batch);

// Fixed-target evaluation used by the inner loop (no graph, no theta deps).
Tensor eval_model_targets(const WorldModel& wm, const Critic& cbar, const EnvDims& dims,
                          const Batch& batch, const LossParams& p);

}  // namespace seqcomm
