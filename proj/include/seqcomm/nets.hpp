#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "seqcomm/autodiff.hpp"
#include "seqcomm/tensor.hpp"

namespace seqcomm {

struct EnvDims {
    int n_agents = 3;
    int n_actions = 3;
    int obs_dim = 0;
    int state_dim = 0;
    int d_m = 8;

    int msg_view_dim() const { return n_agents * d_m; }
    int utility_in_dim() const { return obs_dim + msg_view_dim() + n_actions; }
    int dynamics_in_dim() const { return state_dim + n_agents * n_actions + msg_view_dim(); }
};

struct MlpScratch {
    std::vector<double> in, h1, h2;
};

// Two hidden layers, LeakyReLU(0.01), orthogonal init. Weights are [out,in].
struct Mlp {
    Tensor W1, b1, W2, b2, W3, b3;
    double slope = 0.01;

    static Mlp make(int in, int out, int hidden, std::mt19937_64& rng);

    int in_dim() const { return W1.cols(); }
    int hidden_dim() const { return W1.rows(); }
    int out_dim() const { return W3.rows(); }

    void forward(std::span<const double> x, std::span<double> out, MlpScratch& s) const;
    double forward1(std::span<const double> x, MlpScratch& s) const;
};

// Parameter handles for recorded (differentiable) forward passes.
struct MlpVars {
    Var W1, b1, W2, b2, W3, b3;
    double slope = 0.01;
};
MlpVars mlp_vars(const Mlp& m, bool requires_grad);
Var mlp_forward(const MlpVars& mv, const Var& X);  // X: [B,in] -> [B,out]
void append_params(const MlpVars& mv, std::vector<Var>& out);

// max |W W^T - I| (or W^T W, whichever dimension is smaller)
double orthogonality_defect(const Tensor& W);

// Orthogonal init in place (rows or columns, whichever is smaller).
void orthogonal_init(Tensor& W, std::mt19937_64& rng);

// ---------------- world model (outer parameters, theta) ----------------

struct WorldModel {
    EnvDims dims;
    bool has_comm = true;  // the no-comm baseline drops encoder/refine entirely
    Mlp encoder;           // obs -> d_m
    Mlp refine;            // d_m + 1 -> d_m
    Mlp dynamics;          // state + one-hot joint action + flat M -> [r_hat, s_next]

    static WorldModel make(const EnvDims& dims, bool with_comm, int hidden,
                           std::mt19937_64& rng);

    void encode_message(std::span<const double> obs, std::span<double> m_out,
                        MlpScratch& s) const;
    void predict(std::span<const double> state, std::span<const int> actions,
                 std::span<const double> flat_msgs, double& r_hat,
                 std::span<double> s_next, MlpScratch& s) const;
};

struct WorldModelVars {
    MlpVars encoder, refine, dynamics;
    bool has_comm = true;
};
WorldModelVars world_model_vars(const WorldModel& wm, bool requires_grad);
void append_params(const WorldModelVars& wv, std::vector<Var>& out);

// ---------------- critic (inner parameters, w) ----------------

// Per-agent utility MLPs plus a monotone mixer: Q = sum_i |mix_w_i| u_i + bias(s).
struct Critic {
    EnvDims dims;
    std::vector<Mlp> utility;
    Tensor mix_w;  // [N]; absolute value applied when mixing
    Mlp mix_bias;  // state -> 1

    mutable long long utility_evals = 0;  // complexity accounting
    mutable long long joint_evals = 0;

    static Critic make(const EnvDims& dims, int hidden, std::mt19937_64& rng);

    double utility_eval(int agent, std::span<const double> obs, std::span<const double> view,
                        int action, MlpScratch& s) const;
    // mixes externally supplied per-agent utilities
    double mix(std::span<const double> utilities, std::span<const double> state,
               MlpScratch& s) const;
    double joint_q(std::span<const double> state, const std::vector<std::span<const double>>& obs,
                   const std::vector<std::span<const double>>& views, std::span<const int> actions,
                   MlpScratch& s) const;
    // per-agent utility table u[i*A + a]
    void utility_table(const std::vector<std::span<const double>>& obs,
                       const std::vector<std::span<const double>>& views,
                       std::span<double> table, MlpScratch& s) const;
};

struct CriticVars {
    std::vector<MlpVars> utility;
    Var mix_w;
    MlpVars mix_bias;
};
CriticVars critic_vars(const Critic& c, bool requires_grad);
void append_params(const CriticVars& cv, std::vector<Var>& out);

// Recorded joint Q over a batch. obs[i]: [B,obs_dim], views[i]: [B,N*d_m],
// act_onehot[i]: [B,A] constants for the taken actions.
Var critic_joint_q_rec(const CriticVars& cv, const EnvDims& dims, const Var& S,
                       const std::vector<Var>& obs, const std::vector<Var>& views,
                       const std::vector<Var>& act_onehot);

// ---------------- soft value ----------------

// tau * log sum exp(q/tau) with max subtraction.
double soft_value_table(std::span<const double> q, double tau);

// Soft value over all |A|^N joint actions of the factored critic. The
// enumeration guard rejects N*log(A) > 20.
double soft_value(const Critic& c, std::span<const double> state,
                  const std::vector<std::span<const double>>& obs,
                  const std::vector<std::span<const double>>& views, double tau, MlpScratch& s);
// Factored route: per-agent logsumexp combined through the monotone mixer.
double soft_value_factored(const Critic& c, std::span<const double> state,
                           const std::vector<std::span<const double>>& obs,
                           const std::vector<std::span<const double>>& views, double tau,
                           MlpScratch& s);

// Recorded batched soft value under a fixed (target) critic; gradients flow
// into S / obs / views only. enumerated=false uses the factored route.
Var soft_value_rec(const Critic& cbar, const EnvDims& dims, const Var& S,
                   const std::vector<Var>& obs, const std::vector<Var>& views, double tau,
                   bool enumerated);

// ---------------- target updates & checkpoints ----------------

// w_bar <- tau_ema * w_bar + (1 - tau_ema) * w
void ema_update(Critic& target, const Critic& online, double tau_ema);

struct ParamEntry {
    std::string name;
    Tensor* t;
};
std::vector<ParamEntry> named_params(WorldModel& wm, const std::string& prefix = "theta");
std::vector<ParamEntry> named_params(Critic& c, const std::string& prefix = "w");
std::vector<std::string> manifest(const std::vector<ParamEntry>& entries);

void save_checkpoint(const std::string& path, const std::vector<ParamEntry>& entries);
void load_checkpoint(const std::string& path, const std::vector<ParamEntry>& entries);

}  // namespace seqcomm
