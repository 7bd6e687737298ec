#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "seqcomm/autodiff.hpp"
#include "seqcomm/common.hpp"
#include "seqcomm/nets.hpp"

namespace seqcomm {

enum class CommMode {
    sequential,  // predecessor messages only (Stackelberg conditioning)
    parallel,    // every agent sees all other agents' messages at once
    none,        // zero messages everywhere
};

// N x d_m message rows plus the masking rules used to build per-agent views.
struct MessageTensor {
    int n_agents = 0;
    int d_m = 0;
    std::vector<double> flat;  // row-major N x d_m

    MessageTensor() = default;
    MessageTensor(int n, int dm) : n_agents(n), d_m(dm), flat(static_cast<size_t>(n) * dm, 0.0) {}

    std::span<double> row(int i) { return {flat.data() + static_cast<size_t>(i) * d_m, (size_t)d_m}; }
    std::span<const double> row(int i) const {
        return {flat.data() + static_cast<size_t>(i) * d_m, (size_t)d_m};
    }
    void zero() { std::fill(flat.begin(), flat.end(), 0.0); }

    // Fills `out` (size N*d_m) with the messages visible to `agent`.
    // sequential: rows of agents whose rank precedes agent's rank; rows at
    // rank >= own rank stay zero. parallel: all rows except the agent's own.
    void view_for(int agent, std::span<const int> rank, CommMode mode,
                  std::span<double> out) const;
};

// Builds a single-sender view: only `sender`'s slot carries `message`.
void single_sender_view(int n_agents, int d_m, int sender, std::span<const double> message,
                        std::span<double> out);

struct PriorityOrder {
    std::vector<int> order;  // order[k] = agent selected at rank k
    std::vector<int> rank;   // rank[agent] = position of agent in order
    std::vector<double> gp;  // guidance potentials the order was drawn from
    bool stochastic = false;
};

// Evaluation interface shared by the production critic and test oracles:
// utility(agent, masked message view, action) and a monotone mix of the
// per-agent utilities into the joint value.
struct TeamEval {
    int n_agents = 0;
    int n_actions = 0;
    int view_dim = 0;
    std::function<double(int agent, std::span<const double> view, int action)> utility;
    std::function<double(std::span<const double> utilities)> mix;
};

// Adapter closing over the critic and the current state/observations.
TeamEval make_team_eval(const Critic& critic, std::span<const double> state,
                        const std::vector<std::vector<double>>& obs, MlpScratch& scratch);

// ---------------- delta-Q estimation ----------------

// Critic-based decision-quality gain of message m_i for receiver j:
// max_a Q_j(o_j, m_i, a) - max_a Q_j(o_j, 0, a).
double delta_q_critic(const TeamEval& team, int receiver, int sender, int d_m,
                      std::span<const double> message);

// Monte-Carlo grounding with paired common-random-number rollouts. The policy
// is called as policy(env, message, rng) where `message` is empty for the
// null branch; the env must provide reset(seed)/step(actions)/done().
template <class Env, class Policy>
double delta_q_mc(Env& env, Policy&& policy, std::span<const double> message, int K, int T,
                  double gamma, uint64_t seed, double* standard_error = nullptr) {
    if (K < 1) throw UsageError("delta_q_mc: need at least one rollout");
    auto rollout = [&](uint64_t s, bool with_message) {
        env.reset(s);
        std::mt19937_64 rng = make_rng(s, 0x9d);
        double g = 0.0, disc = 1.0;
        for (int t = 0; t < T && !env.done(); ++t) {
            std::span<const double> msg =
                with_message ? message : std::span<const double>{};
            std::vector<int> a = policy(env, msg, rng);
            g += disc * env.step(a);
            disc *= gamma;
        }
        return g;
    };
    double sum = 0.0, sumsq = 0.0;
    for (int k = 0; k < K; ++k) {
        uint64_t s = split_seed(seed, static_cast<uint64_t>(k));
        double diff = rollout(s, true) - rollout(s, false);
        sum += diff;
        sumsq += diff * diff;
    }
    double mean = sum / K;
    if (standard_error) {
        double var = K > 1 ? (sumsq - K * mean * mean) / (K - 1) : 0.0;
        *standard_error = std::sqrt(std::max(0.0, var) / K);
    }
    return mean;
}

// (1 - beta) * mc + beta * critic
double hybrid_delta_q(double mc, double critic, double beta);
// min(t / warmup, 1)
double beta_schedule(int t, int warmup);

// ---------------- message generation ----------------

// m = m_base + alpha * Refine(m_base, dq_hat)
void refine_message(const WorldModel& wm, std::span<const double> m_base, double dq_hat,
                    double alpha, std::span<double> out, MlpScratch& scratch);

// Base-encodes observations, estimates per-sender decision impact through the
// critic (blended with the MC table when beta < 1), refines, and writes the
// message tensor. mc_table holds per-sender MC delta-q means (may be empty
// when beta = 1).
void build_messages(const WorldModel& wm, const Critic& critic,
                    std::span<const double> state, const std::vector<std::vector<double>>& obs,
                    double alpha, double beta, std::span<const double> mc_table,
                    MessageTensor& out, MlpScratch& scratch);

// ---------------- ordering & action selection ----------------

// GP_i: expected joint value when agent i leads versus trails, averaged over
// k_orderings sampled permutations of the remaining agents.
std::vector<double> guidance_potential(const TeamEval& team, const MessageTensor& M,
                                       int k_orderings, std::mt19937_64& rng);

// Deterministic mode: stable argsort of -gp (ties by agent index).
// Stochastic mode: argsort of -(gp + tau_gumbel * Gumbel(0,1)).
PriorityOrder priority_order(std::span<const double> gp, bool stochastic, double tau_gumbel,
                             std::mt19937_64* rng);

PriorityOrder identity_order(int n_agents);
PriorityOrder random_order(int n_agents, std::mt19937_64& rng);

// Greedy sequential (Stackelberg) selection: the agent at rank k maximizes
// its utility given predecessor messages only. epsilon-greedy exploration
// draws one uniform per agent so the draw count is message-independent.
std::vector<int> sequential_select(const TeamEval& team, const MessageTensor& M,
                                   const PriorityOrder& pi, CommMode mode, double epsilon,
                                   std::mt19937_64* rng,
                                   std::vector<double>* utilities_out = nullptr);

// ---------------- communication losses (recorded) ----------------

// Refined message graph for a batch: per-agent base and refined [B, d_m]
// columns plus the critic-based per-sender impact estimates.
struct RecordedMessages {
    std::vector<Var> base;
    std::vector<Var> refined;
    std::vector<Var> dq_hat;  // [B,1] per sender (hybrid estimate)
};

// obs[i]: [B, obs_dim] recorded or constant observation blocks. The critic is
// used frozen (no gradients flow into it).
RecordedMessages build_messages_rec(const WorldModelVars& theta, const Critic& frozen,
                                    const EnvDims& dims, const std::vector<Var>& obs,
                                    double alpha, double beta, std::span<const double> mc_table);

// L_VA = -(1 / (B N (N-1))) sum_b sum_i sum_{j!=i} dQ_j(m_i); refined
// messages enter through recorded views, critic parameters stay frozen.
Var value_aware_loss_rec(const RecordedMessages& msgs, const Critic& frozen, const EnvDims& dims,
                         const std::vector<Var>& obs);

// Plain-value variant over precomputed estimates (dq[b][i][j]); used by tests
// and diagnostics. Requires n_agents >= 2.
double value_aware_loss(const std::vector<std::vector<std::vector<double>>>& dq);

// L_inf = -(1/(N(N-1))) sum_{i != j} KL(pi_j(.|m_i) || pi_j(.|0)) with
// softmax(u/tau) receiver policies and a 1e-8 probability floor.
Var influence_loss_rec(const RecordedMessages& msgs, const Critic& frozen, const EnvDims& dims,
                       const std::vector<Var>& obs, double tau);

}  // namespace seqcomm
