#include "seqcomm/comm.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace seqcomm {

void MessageTensor::view_for(int agent, std::span<const int> rank, CommMode mode,
                             std::span<double> out) const {
    if (static_cast<int>(out.size()) != n_agents * d_m)
        throw UsageError("message view: bad output size");
    std::fill(out.begin(), out.end(), 0.0);
    if (mode == CommMode::none) return;
    for (int j = 0; j < n_agents; ++j) {
        bool visible = (mode == CommMode::parallel) ? (j != agent) : (rank[j] < rank[agent]);
        if (visible)
            std::memcpy(out.data() + static_cast<size_t>(j) * d_m,
                        flat.data() + static_cast<size_t>(j) * d_m, d_m * sizeof(double));
    }
}

void single_sender_view(int n_agents, int d_m, int sender, std::span<const double> message,
                        std::span<double> out) {
    if (static_cast<int>(out.size()) != n_agents * d_m)
        throw UsageError("single_sender_view: bad output size");
    if (static_cast<int>(message.size()) != d_m)
        throw UsageError("single_sender_view: bad message size");
    std::fill(out.begin(), out.end(), 0.0);
    std::memcpy(out.data() + static_cast<size_t>(sender) * d_m, message.data(),
                d_m * sizeof(double));
}

TeamEval make_team_eval(const Critic& critic, std::span<const double> state,
                        const std::vector<std::vector<double>>& obs, MlpScratch& scratch) {
    TeamEval t;
    t.n_agents = critic.dims.n_agents;
    t.n_actions = critic.dims.n_actions;
    t.view_dim = critic.dims.msg_view_dim();
    t.utility = [&critic, &obs, &scratch](int agent, std::span<const double> view, int action) {
        return critic.utility_eval(agent, obs[agent], view, action, scratch);
    };
    std::vector<double> state_copy(state.begin(), state.end());
    t.mix = [&critic, state_copy = std::move(state_copy), &scratch](std::span<const double> u) {
        return critic.mix(u, state_copy, scratch);
    };
    return t;
}

// ---------------- delta-Q ----------------

double delta_q_critic(const TeamEval& team, int receiver, int sender, int d_m,
                      std::span<const double> message) {
    if (receiver < 0 || receiver >= team.n_agents || sender < 0 || sender >= team.n_agents)
        throw UsageError("delta_q_critic: bad agent index");
    std::vector<double> view(team.view_dim, 0.0);
    std::vector<double> null_view(team.view_dim, 0.0);
    single_sender_view(team.n_agents, d_m, sender, message, view);
    double best_with = -1e300, best_null = -1e300;
    for (int a = 0; a < team.n_actions; ++a) {
        best_with = std::max(best_with, team.utility(receiver, view, a));
        best_null = std::max(best_null, team.utility(receiver, null_view, a));
    }
    return best_with - best_null;
}

double hybrid_delta_q(double mc, double critic, double beta) {
    if (beta < 0.0 || beta > 1.0) throw UsageError("hybrid_delta_q: beta outside [0,1]");
    return (1.0 - beta) * mc + beta * critic;
}

double beta_schedule(int t, int warmup) {
    if (warmup <= 0) return 1.0;
    return std::min(static_cast<double>(t) / warmup, 1.0);
}

// ---------------- message generation ----------------

void refine_message(const WorldModel& wm, std::span<const double> m_base, double dq_hat,
                    double alpha, std::span<double> out, MlpScratch& scratch) {
    int dm = wm.dims.d_m;
    if (static_cast<int>(m_base.size()) != dm || static_cast<int>(out.size()) != dm)
        throw UsageError("refine_message: bad message size");
    if (alpha == 0.0) {
        std::copy(m_base.begin(), m_base.end(), out.begin());
        return;
    }
    std::vector<double> in(dm + 1);
    std::copy(m_base.begin(), m_base.end(), in.begin());
    in[dm] = dq_hat;
    std::vector<double> delta(dm);
    wm.refine.forward(in, delta, scratch);
    for (int k = 0; k < dm; ++k) out[k] = m_base[k] + alpha * delta[k];
}

void build_messages(const WorldModel& wm, const Critic& critic,
                    std::span<const double> state, const std::vector<std::vector<double>>& obs,
                    double alpha, double beta, std::span<const double> mc_table,
                    MessageTensor& out, MlpScratch& scratch) {
    int n = wm.dims.n_agents, dm = wm.dims.d_m;
    if (out.n_agents != n || out.d_m != dm) out = MessageTensor(n, dm);
    std::vector<std::vector<double>> base(n, std::vector<double>(dm));
    for (int i = 0; i < n; ++i) wm.encode_message(obs[i], base[i], scratch);

    TeamEval team = make_team_eval(critic, state, obs, scratch);
    for (int i = 0; i < n; ++i) {
        double dq_critic = 0.0;
        for (int j = 0; j < n; ++j)
            if (j != i) dq_critic += delta_q_critic(team, j, i, dm, base[i]);
        dq_critic /= std::max(1, n - 1);
        double mc = mc_table.empty() ? 0.0 : mc_table[i];
        double dq_hat = hybrid_delta_q(mc, dq_critic, beta);
        refine_message(wm, base[i], dq_hat, alpha, out.row(i), scratch);
    }
}

// ---------------- ordering & action selection ----------------

namespace {

std::vector<int> greedy_pass(const TeamEval& team, const MessageTensor& M,
                             std::span<const int> order, CommMode mode, double epsilon,
                             std::mt19937_64* rng, std::vector<double>* utilities_out) {
    int n = team.n_agents;
    std::vector<int> rank(n, 0);
    for (int k = 0; k < n; ++k) rank[order[k]] = k;
    std::vector<int> actions(n, 0);
    std::vector<double> chosen(n, 0.0);
    std::vector<double> view(team.view_dim);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int k = 0; k < n; ++k) {
        int agent = order[k];
        M.view_for(agent, rank, mode, view);
        int best = 0;
        double best_u = -1e300;
        for (int a = 0; a < team.n_actions; ++a) {
            double u = team.utility(agent, view, a);
            if (u > best_u) {
                best_u = u;
                best = a;
            }
        }
        if (rng && epsilon > 0.0 && unit(*rng) < epsilon) {
            std::uniform_int_distribution<int> ad(0, team.n_actions - 1);
            best = ad(*rng);
            best_u = team.utility(agent, view, best);
        }
        actions[agent] = best;
        chosen[agent] = best_u;
    }
    if (utilities_out) *utilities_out = chosen;
    return actions;
}

}  // namespace

std::vector<double> guidance_potential(const TeamEval& team, const MessageTensor& M,
                                       int k_orderings, std::mt19937_64& rng) {
    if (k_orderings < 1) throw UsageError("guidance_potential: need at least one ordering");
    int n = team.n_agents;
    std::vector<double> gp(n, 0.0);
    std::vector<double> utils;
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < k_orderings; ++k) {
            std::vector<int> rest;
            for (int j = 0; j < n; ++j)
                if (j != i) rest.push_back(j);
            std::shuffle(rest.begin(), rest.end(), rng);

            std::vector<int> lead{i};
            lead.insert(lead.end(), rest.begin(), rest.end());
            greedy_pass(team, M, lead, CommMode::sequential, 0.0, nullptr, &utils);
            double q_plus = team.mix(utils);

            std::vector<int> trail = rest;
            trail.push_back(i);
            greedy_pass(team, M, trail, CommMode::sequential, 0.0, nullptr, &utils);
            double q_minus = team.mix(utils);

            gp[i] += (q_plus - q_minus) / k_orderings;
        }
    }
    return gp;
}

PriorityOrder priority_order(std::span<const double> gp, bool stochastic, double tau_gumbel,
                             std::mt19937_64* rng) {
    int n = static_cast<int>(gp.size());
    for (double g : gp)
        if (!std::isfinite(g)) throw NumericalError("priority_order: non-finite GP");
    std::vector<double> keys(gp.begin(), gp.end());
    if (stochastic) {
        if (!rng) throw UsageError("priority_order: stochastic mode needs an rng");
        std::uniform_real_distribution<double> unit(1e-12, 1.0);
        for (auto& k : keys) k += tau_gumbel * (-std::log(-std::log(unit(*rng))));
    }
    PriorityOrder po;
    po.gp.assign(gp.begin(), gp.end());
    po.stochastic = stochastic;
    po.order.resize(n);
    std::iota(po.order.begin(), po.order.end(), 0);
    std::stable_sort(po.order.begin(), po.order.end(),
                     [&](int a, int b) { return keys[a] > keys[b]; });
    po.rank.assign(n, 0);
    for (int k = 0; k < n; ++k) po.rank[po.order[k]] = k;
    return po;
}

PriorityOrder identity_order(int n_agents) {
    PriorityOrder po;
    po.order.resize(n_agents);
    std::iota(po.order.begin(), po.order.end(), 0);
    po.rank = po.order;
    po.gp.assign(n_agents, 0.0);
    return po;
}

PriorityOrder random_order(int n_agents, std::mt19937_64& rng) {
    PriorityOrder po = identity_order(n_agents);
    std::shuffle(po.order.begin(), po.order.end(), rng);
    for (int k = 0; k < n_agents; ++k) po.rank[po.order[k]] = k;
    po.stochastic = true;
    return po;
}

std::vector<int> sequential_select(const TeamEval& team, const MessageTensor& M,
                                   const PriorityOrder& pi, CommMode mode, double epsilon,
                                   std::mt19937_64* rng, std::vector<double>* utilities_out) {
    if (static_cast<int>(pi.order.size()) != team.n_agents)
        throw UsageError("sequential_select: order arity mismatch");
    return greedy_pass(team, M, pi.order, mode, epsilon, rng, utilities_out);
}

// ---------------- communication losses ----------------

namespace {

// frozen-critic utility columns for one receiver: [B, A]
Var utility_matrix_rec(const Critic& frozen, const EnvDims& dims, int receiver, const Var& obs,
                       const Var& view) {
    CriticVars cv = critic_vars(frozen, /*requires_grad=*/false);
    int B = obs.value().rows();
    std::vector<Var> cols;
    for (int a = 0; a < dims.n_actions; ++a) {
        Tensor onehot({B, dims.n_actions});
        for (int b = 0; b < B; ++b) onehot.at(b, a) = 1.0;
        Var x = concat_cols({obs, view, Var::constant(onehot)});
        cols.push_back(mlp_forward(cv.utility[receiver], x));
    }
    return concat_cols(cols);
}

Var sender_view_rec(const EnvDims& dims, int sender, const Var& message) {
    return embed_cols(message, sender * dims.d_m, dims.msg_view_dim());
}

Var zero_view_rec(const EnvDims& dims, int batch) {
    return Var::constant(Tensor::zeros({batch, dims.msg_view_dim()}));
}

}  // namespace

RecordedMessages build_messages_rec(const WorldModelVars& theta, const Critic& frozen,
                                    const EnvDims& dims, const std::vector<Var>& obs,
                                    double alpha, double beta, std::span<const double> mc_table) {
    if (!theta.has_comm) throw UsageError("build_messages_rec: communication module disabled");
    int n = dims.n_agents;
    int B = obs[0].value().rows();
    RecordedMessages out;
    for (int i = 0; i < n; ++i) out.base.push_back(mlp_forward(theta.encoder, obs[i]));

    Var null_view = zero_view_rec(dims, B);
    for (int i = 0; i < n; ++i) {
        // impact of the base message on each receiver, critic frozen
        Var acc;
        Var view = sender_view_rec(dims, i, out.base[i]);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            Var with_m = rowmax(utility_matrix_rec(frozen, dims, j, obs[j], view));
            Var without = rowmax(utility_matrix_rec(frozen, dims, j, obs[j], null_view));
            Var dq = sub(with_m, without);
            acc = acc.defined() ? add(acc, dq) : dq;
        }
        Var dq_critic = scale(acc, 1.0 / std::max(1, n - 1));
        double mc = mc_table.empty() ? 0.0 : mc_table[i];
        Var dq_hat = add_const(scale(dq_critic, beta), (1.0 - beta) * mc);
        out.dq_hat.push_back(dq_hat);
        Var refined = add(out.base[i],
                          scale(mlp_forward(theta.refine, concat_cols({out.base[i], dq_hat})),
                                alpha));
        out.refined.push_back(refined);
    }
    return out;
}

Var value_aware_loss_rec(const RecordedMessages& msgs, const Critic& frozen, const EnvDims& dims,
                         const std::vector<Var>& obs) {
    int n = dims.n_agents;
    if (n < 2) throw UsageError("value_aware_loss: needs at least two agents");
    int B = obs[0].value().rows();
    Var null_view = zero_view_rec(dims, B);
    Var acc;
    for (int i = 0; i < n; ++i) {
        Var view = sender_view_rec(dims, i, msgs.refined[i]);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            Var with_m = rowmax(utility_matrix_rec(frozen, dims, j, obs[j], view));
            Var without = rowmax(utility_matrix_rec(frozen, dims, j, obs[j], null_view));
            Var dq = mean_all(sub(with_m, without));
            acc = acc.defined() ? add(acc, dq) : dq;
        }
    }
    return scale(acc, -1.0 / (n * (n - 1)));
}

double value_aware_loss(const std::vector<std::vector<std::vector<double>>>& dq) {
    int B = static_cast<int>(dq.size());
    if (B < 1) throw UsageError("value_aware_loss: empty batch");
    int n = static_cast<int>(dq[0].size());
    if (n < 2) throw UsageError("value_aware_loss: needs at least two agents");
    double acc = 0.0;
    for (const auto& per_sender : dq)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (j != i) acc += per_sender[i][j];
    return -acc / (static_cast<double>(B) * n * (n - 1));
}

Var influence_loss_rec(const RecordedMessages& msgs, const Critic& frozen, const EnvDims& dims,
                       const std::vector<Var>& obs, double tau) {
    if (tau <= 0.0) throw UsageError("influence_loss: tau must be positive");
    int n = dims.n_agents;
    if (n < 2) throw UsageError("influence_loss: needs at least two agents");
    int B = obs[0].value().rows();
    int A = dims.n_actions;
    const double log_floor = std::log(1e-8);
    Var null_view = zero_view_rec(dims, B);
    auto log_policy = [&](int receiver, const Var& view) {
        Var logits = scale(utility_matrix_rec(frozen, dims, receiver, obs[receiver], view),
                           1.0 / tau);
        return sub(logits, broadcast_col(logsumexp_rows(logits, 1.0), A));
    };
    Var acc;
    for (int i = 0; i < n; ++i) {
        Var view = sender_view_rec(dims, i, msgs.refined[i]);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            Var logp_m = log_policy(j, view);
            Var logp_0 = clamp_min(log_policy(j, null_view), log_floor);
            Var p_m = exp_(logp_m);
            Var kl = clamp_min(sum_cols(mul(p_m, sub(logp_m, logp_0))), 0.0);
            Var mean_kl = mean_all(kl);
            acc = acc.defined() ? add(acc, mean_kl) : mean_kl;
        }
    }
    return scale(acc, -1.0 / (n * (n - 1)));
}

}  // namespace seqcomm
