#include <cmath>
#include <random>

#include "doctest.h"
#include "seqcomm/comm.hpp"
#include "seqcomm/env.hpp"

using namespace seqcomm;

namespace {

// tabular team: utility = base[agent][action] + dot(coef[agent], view)
struct TabularTeam {
    std::vector<std::vector<double>> base;           // [N][A]
    std::vector<std::vector<double>> coef;           // [N][view_dim]
    TeamEval eval(int n_agents, int n_actions, int view_dim) const {
        TeamEval t;
        t.n_agents = n_agents;
        t.n_actions = n_actions;
        t.view_dim = view_dim;
        t.utility = [this](int agent, std::span<const double> view, int action) {
            double u = base[agent][action];
            for (size_t k = 0; k < view.size(); ++k) u += coef[agent][k] * view[k];
            return u;
        };
        t.mix = [](std::span<const double> u) {
            double s = 0;
            for (double x : u) s += x;
            return s;
        };
        return t;
    }
};

TabularTeam random_team(int n, int A, int view_dim, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-1, 1);
    TabularTeam t;
    t.base.assign(n, std::vector<double>(A));
    t.coef.assign(n, std::vector<double>(view_dim));
    for (auto& row : t.base)
        for (auto& x : row) x = d(rng);
    for (auto& row : t.coef)
        for (auto& x : row) x = d(rng);
    return t;
}

}  // namespace

TEST_CASE("message views follow the predecessor mask") {
    MessageTensor M(3, 2);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 2; ++k) M.row(i)[k] = 10.0 * i + k + 1;
    std::vector<int> rank{1, 0, 2};  // order: agent1, agent0, agent2
    std::vector<double> view(6);

    M.view_for(1, rank, CommMode::sequential, view);  // leader sees nothing
    for (double x : view) CHECK(x == 0.0);

    M.view_for(0, rank, CommMode::sequential, view);  // sees agent 1 only
    CHECK(view[0] == 0.0);
    CHECK(view[2] == 11.0);
    CHECK(view[4] == 0.0);

    M.view_for(2, rank, CommMode::sequential, view);  // sees both predecessors
    CHECK(view[0] == 1.0);
    CHECK(view[2] == 11.0);
    CHECK(view[4] == 0.0);

    M.view_for(1, rank, CommMode::parallel, view);  // all but self
    CHECK(view[0] == 1.0);
    CHECK(view[2] == 0.0);
    CHECK(view[4] == 21.0);

    M.view_for(2, rank, CommMode::none, view);
    for (double x : view) CHECK(x == 0.0);
}

TEST_CASE("delta_q_critic") {
    std::mt19937_64 rng(3);
    int n = 3, A = 3, dm = 2;
    TabularTeam tt = random_team(n, A, n * dm, rng);
    TeamEval team = tt.eval(n, A, n * dm);

    SUBCASE("null message gives exactly zero") {
        std::vector<double> zero(dm, 0.0);
        CHECK(delta_q_critic(team, 1, 0, dm, zero) == 0.0);
    }
    SUBCASE("message-agnostic critic gives zero for any message") {
        TabularTeam blind = tt;
        for (auto& row : blind.coef)
            for (auto& x : row) x = 0.0;
        TeamEval bt = blind.eval(n, A, n * dm);
        std::vector<double> m{0.7, -1.3};
        CHECK(delta_q_critic(bt, 2, 0, dm, m) == 0.0);
    }
    SUBCASE("matches brute-force max difference on random tables") {
        std::uniform_real_distribution<double> d(-1, 1);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> m{d(rng), d(rng)};
            int sender = trial % n;
            int receiver = (sender + 1 + trial % (n - 1)) % n;
            std::vector<double> view(n * dm, 0.0), null_view(n * dm, 0.0);
            single_sender_view(n, dm, sender, m, view);
            double bw = -1e300, bn = -1e300;
            for (int a = 0; a < A; ++a) {
                bw = std::max(bw, team.utility(receiver, view, a));
                bn = std::max(bn, team.utility(receiver, null_view, a));
            }
            CHECK(delta_q_critic(team, receiver, sender, dm, m) ==
                  doctest::Approx(bw - bn).epsilon(1e-12));
        }
    }
    SUBCASE("real critic also yields an exact zero for the null message") {
        EnvDims dims;
        dims.n_agents = 3;
        dims.n_actions = 3;
        dims.obs_dim = 5;
        dims.state_dim = 12;
        dims.d_m = 4;
        Critic c = Critic::make(dims, 8, rng);
        MlpScratch s;
        std::vector<std::vector<double>> obs(3, std::vector<double>(5, 0.3));
        std::vector<double> state(12, 0.1);
        TeamEval te = make_team_eval(c, state, obs, s);
        std::vector<double> zero(dims.d_m, 0.0);
        CHECK(delta_q_critic(te, 1, 0, dims.d_m, zero) == 0.0);
    }
}

namespace {

// two-state chain used for the MC grounding oracle
ToySpec chain_spec() {
    ToySpec spec;
    spec.n_states = 2;
    spec.n_agents = 1;
    spec.n_actions = 2;
    spec.horizon = 20;
    spec.gamma = 0.9;
    spec.next = {{0, 1}, {0, 1}};
    spec.reward = {{0.0, 1.0}, {2.0, -1.0}};
    return spec;
}

// finite-horizon policy evaluation oracle; pol[s][a] are action probabilities
double policy_value(const ToySpec& spec, const std::vector<std::vector<double>>& pol, int T) {
    std::vector<double> v(spec.n_states, 0.0);
    for (int t = T - 1; t >= 0; --t) {
        std::vector<double> nv(spec.n_states, 0.0);
        for (int s = 0; s < spec.n_states; ++s)
            for (int a = 0; a < spec.n_actions; ++a)
                nv[s] += pol[s][a] * (spec.reward[s][a] + spec.gamma * v[spec.next[s][a]]);
        v = nv;
    }
    return v[spec.start_state];
}

}  // namespace

TEST_CASE("delta_q_mc") {
    SUBCASE("message-irrelevant environment gives exactly zero under paired seeds") {
        TabularEnv env = make_toy_env(chain_spec());
        auto policy = [](TabularEnv& e, std::span<const double>, std::mt19937_64& rng) {
            std::uniform_int_distribution<int> d(0, 1);
            (void)e;
            return std::vector<int>{d(rng)};
        };
        std::vector<double> msg{1.0};
        CHECK(delta_q_mc(env, policy, msg, 32, 10, 0.9, 7) == 0.0);
    }
    SUBCASE("gamma=0 one-step environment returns the immediate reward shift") {
        ToySpec spec;
        spec.n_states = 1;
        spec.n_agents = 1;
        spec.n_actions = 2;
        spec.horizon = 1;
        spec.gamma = 0.0;
        spec.next = {{0, 0}};
        spec.reward = {{0.25, 0.95}};  // message shifts reward by 0.7
        TabularEnv env = make_toy_env(spec);
        auto policy = [](TabularEnv&, std::span<const double> msg, std::mt19937_64&) {
            return std::vector<int>{msg.empty() ? 0 : 1};
        };
        std::vector<double> m{1.0};
        CHECK(delta_q_mc(env, policy, m, 5, 1, 0.0, 3) == doctest::Approx(0.7));
    }
    SUBCASE("large-K estimate brackets the policy-evaluation oracle gap") {
        ToySpec spec = chain_spec();
        TabularEnv env = make_toy_env(spec);
        const double eps = 0.2;
        // informed: acts on the true state; blind: always action 1
        auto policy = [&](TabularEnv& e, std::span<const double> msg, std::mt19937_64& rng) {
            std::uniform_real_distribution<double> unit(0, 1);
            int greedy;
            if (!msg.empty())
                greedy = e.state() == 0 ? 1 : 0;
            else
                greedy = 1;
            int a = greedy;
            if (unit(rng) < eps) {
                std::uniform_int_distribution<int> ad(0, 1);
                a = ad(rng);
            }
            return std::vector<int>{a};
        };
        int T = 20;
        std::vector<std::vector<double>> informed{{eps / 2, 1 - eps / 2}, {1 - eps / 2, eps / 2}};
        std::vector<std::vector<double>> blind{{eps / 2, 1 - eps / 2}, {eps / 2, 1 - eps / 2}};
        double analytic = policy_value(spec, informed, T) - policy_value(spec, blind, T);
        double se = 0.0;
        std::vector<double> m{1.0};
        double mc = delta_q_mc(env, policy, m, 10000, T, spec.gamma, 11, &se);
        CHECK(se > 0.0);
        CHECK(std::abs(mc - analytic) <= 3.0 * se);
    }
}

TEST_CASE("hybrid delta-q and the annealing schedule") {
    CHECK(hybrid_delta_q(0.2, 0.4, 0.0) == doctest::Approx(0.2));
    CHECK(hybrid_delta_q(0.2, 0.4, 1.0) == doctest::Approx(0.4));
    CHECK(hybrid_delta_q(0.2, 0.4, 0.5) == doctest::Approx(0.3));
    CHECK_THROWS_AS(hybrid_delta_q(0, 0, 1.5), UsageError);
    int tw = 100;
    CHECK(beta_schedule(0, tw) == 0.0);
    CHECK(beta_schedule(50, tw) == doctest::Approx(0.5));
    CHECK(beta_schedule(100, tw) == 1.0);
    CHECK(beta_schedule(200, tw) == 1.0);
}

TEST_CASE("refine_message") {
    std::mt19937_64 rng(5);
    EnvDims dims;
    dims.n_agents = 3;
    dims.n_actions = 3;
    dims.obs_dim = 5;
    dims.state_dim = 12;
    dims.d_m = 4;
    WorldModel wm = WorldModel::make(dims, true, 8, rng);
    MlpScratch s;
    std::vector<double> base{0.1, -0.4, 0.7, 0.2};
    std::vector<double> out(4);

    SUBCASE("alpha = 0 returns the base message") {
        refine_message(wm, base, 0.5, 0.0, out, s);
        for (int k = 0; k < 4; ++k) CHECK(out[k] == base[k]);
    }
    SUBCASE("zero-weight refinement net is the identity for any alpha") {
        for (Tensor* t : {&wm.refine.W1, &wm.refine.b1, &wm.refine.W2, &wm.refine.b2,
                          &wm.refine.W3, &wm.refine.b3})
            for (int64_t i = 0; i < t->numel(); ++i) (*t)[i] = 0.0;
        refine_message(wm, base, 0.5, 0.7, out, s);
        for (int k = 0; k < 4; ++k) CHECK(out[k] == doctest::Approx(base[k]));
    }
    SUBCASE("output responds to the decision-impact input") {
        std::vector<double> out2(4);
        refine_message(wm, base, 0.5, 0.1, out, s);
        refine_message(wm, base, 0.5 + 1e-4, 0.1, out2, s);
        double g = 0;
        for (int k = 0; k < 4; ++k) g += std::abs(out2[k] - out[k]) / 1e-4;
        CHECK(g > 1e-4);
    }
}

TEST_CASE("guidance potential") {
    std::mt19937_64 rng(7);
    int n = 3, A = 3, dm = 2;

    SUBCASE("fully symmetric agents get identical potentials") {
        TabularTeam t;
        t.base.assign(n, {0.3, 0.9, 0.1});
        // symmetric view dependence: every slot weighted equally
        t.coef.assign(n, std::vector<double>(n * dm, 0.25));
        TeamEval team = t.eval(n, A, n * dm);
        MessageTensor M(n, dm);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < dm; ++k) M.row(i)[k] = 0.4;  // identical messages
        auto gp = guidance_potential(team, M, 4, rng);
        CHECK(gp[0] == doctest::Approx(gp[1]).epsilon(1e-12));
        CHECK(gp[1] == doctest::Approx(gp[2]).epsilon(1e-12));
    }
    SUBCASE("two agents have exactly two orderings") {
        TabularTeam t = random_team(2, A, 2 * dm, rng);
        TeamEval team = t.eval(2, A, 2 * dm);
        MessageTensor M(2, dm);
        M.row(0)[0] = 0.5;
        M.row(1)[1] = -0.8;
        auto gp1 = guidance_potential(team, M, 1, rng);
        auto gp4 = guidance_potential(team, M, 4, rng);
        for (int i = 0; i < 2; ++i) CHECK(gp1[i] == doctest::Approx(gp4[i]).epsilon(1e-12));
    }
    SUBCASE("the informative agent earns the largest potential") {
        // only agent 0's message improves the followers' decisions
        int n2 = 3;
        TabularTeam t;
        t.base.assign(n2, {0.0, 0.0, 0.0});
        t.coef.assign(n2, std::vector<double>(n2 * dm, 0.0));
        // receivers read sender 0's first slot; acting on it pays off
        for (int j = 1; j < n2; ++j) t.coef[j][0] = 1.0;
        TeamEval team = t.eval(n2, A, n2 * dm);
        MessageTensor M(n2, dm);
        M.row(0)[0] = 2.0;  // informative content
        M.row(1)[0] = 0.0;
        M.row(2)[0] = 0.0;
        auto gp = guidance_potential(team, M, 4, rng);
        CHECK(gp[0] > gp[1]);
        CHECK(gp[0] > gp[2]);
    }
    SUBCASE("uniform joint-value shifts leave the ordering unchanged") {
        TabularTeam t = random_team(n, A, n * dm, rng);
        TeamEval team = t.eval(n, A, n * dm);
        TeamEval shifted = team;
        shifted.mix = [&team](std::span<const double> u) { return team.mix(u) + 1000.0; };
        MessageTensor M(n, dm);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < dm; ++k) M.row(i)[k] = 0.1 * (i + 1) * (k + 1);
        std::mt19937_64 r1(99), r2(99);
        auto gp_a = guidance_potential(team, M, 4, r1);
        auto gp_b = guidance_potential(shifted, M, 4, r2);
        auto o_a = priority_order(gp_a, false, 0.0, nullptr);
        auto o_b = priority_order(gp_b, false, 0.0, nullptr);
        for (int i = 0; i < n; ++i) {
            CHECK(gp_a[i] == doctest::Approx(gp_b[i]).epsilon(1e-9));
            CHECK(o_a.order[i] == o_b.order[i]);
        }
    }
}

TEST_CASE("priority order") {
    SUBCASE("deterministic argsort of -GP") {
        std::vector<double> gp{0.5, 0.9, 0.1};
        auto po = priority_order(gp, false, 0.0, nullptr);
        CHECK(po.order == std::vector<int>{1, 0, 2});
        CHECK(po.rank == std::vector<int>{1, 0, 2});
    }
    SUBCASE("ties break by agent index") {
        std::vector<double> gp{0.4, 0.4, 0.4};
        auto po = priority_order(gp, false, 0.0, nullptr);
        CHECK(po.order == std::vector<int>{0, 1, 2});
    }
    SUBCASE("vanishing gumbel temperature recovers the deterministic order") {
        std::vector<double> gp{0.5, 0.9, 0.1};
        std::mt19937_64 rng(13);
        int agree = 0;
        for (int t = 0; t < 100; ++t) {
            auto po = priority_order(gp, true, 1e-12, &rng);
            if (po.order == std::vector<int>{1, 0, 2}) ++agree;
        }
        CHECK(agree == 100);
    }
    SUBCASE("positive temperature explores other orders") {
        std::vector<double> gp{0.5, 0.6, 0.4};
        std::mt19937_64 rng(17);
        int agree = 0;
        for (int t = 0; t < 200; ++t) {
            auto po = priority_order(gp, true, 1.0, &rng);
            if (po.order == std::vector<int>{1, 0, 2}) ++agree;
        }
        CHECK(agree < 200);
        CHECK(agree > 0);
    }
    SUBCASE("non-finite potentials are rejected") {
        std::vector<double> gp{0.5, std::nan(""), 0.1};
        CHECK_THROWS_AS(priority_order(gp, false, 0.0, nullptr), NumericalError);
    }
}

TEST_CASE("sequential selection") {
    std::mt19937_64 rng(19);
    int A = 3, dm = 2;

    SUBCASE("single agent reduces to a plain argmax") {
        TabularTeam t = random_team(1, A, dm, rng);
        TeamEval team = t.eval(1, A, dm);
        MessageTensor M(1, dm);
        auto po = identity_order(1);
        auto act = sequential_select(team, M, po, CommMode::sequential, 0.0, nullptr);
        int best = 0;
        for (int a = 1; a < A; ++a)
            if (t.base[0][a] > t.base[0][best]) best = a;
        CHECK(act[0] == best);
    }
    SUBCASE("zero messages match independent greedy selection") {
        int n = 3;
        TabularTeam t = random_team(n, A, n * dm, rng);
        TeamEval team = t.eval(n, A, n * dm);
        MessageTensor M(n, dm);  // zeros
        auto po = priority_order(std::vector<double>{0.3, 0.1, 0.8}, false, 0.0, nullptr);
        auto act = sequential_select(team, M, po, CommMode::sequential, 0.0, nullptr);
        std::vector<double> zero_view(n * dm, 0.0);
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bu = -1e300;
            for (int a = 0; a < A; ++a) {
                double u = team.utility(i, zero_view, a);
                if (u > bu) {
                    bu = u;
                    best = a;
                }
            }
            CHECK(act[i] == best);
        }
    }
    SUBCASE("matches the rank-by-rank enumeration oracle on tabular teams") {
        int n = 2;
        for (int trial = 0; trial < 30; ++trial) {
            TabularTeam t = random_team(n, A, n * dm, rng);
            TeamEval team = t.eval(n, A, n * dm);
            MessageTensor M(n, dm);
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < dm; ++k) M.row(i)[k] = 0.5 * (i + 1) + 0.1 * k;
            auto po = priority_order(std::vector<double>{0.1, 0.9}, false, 0.0, nullptr);
            auto act = sequential_select(team, M, po, CommMode::sequential, 0.0, nullptr);
            // oracle: leader argmax with empty view, follower argmax given leader row
            std::vector<int> rank = po.rank;
            std::vector<double> view(n * dm);
            std::vector<int> expect(n);
            for (int k = 0; k < n; ++k) {
                int agent = po.order[k];
                M.view_for(agent, rank, CommMode::sequential, view);
                int best = 0;
                double bu = -1e300;
                for (int a = 0; a < A; ++a) {
                    double u = team.utility(agent, view, a);
                    if (u > bu) {
                        bu = u;
                        best = a;
                    }
                }
                expect[agent] = best;
            }
            CHECK(act == expect);
        }
    }
    SUBCASE("rank-k actions ignore successor-message perturbations (100 trials)") {
        int n = 3;
        std::uniform_real_distribution<double> d(-1, 1);
        for (int trial = 0; trial < 100; ++trial) {
            TabularTeam t = random_team(n, A, n * dm, rng);
            TeamEval team = t.eval(n, A, n * dm);
            MessageTensor M(n, dm);
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < dm; ++k) M.row(i)[k] = d(rng);
            std::vector<double> gp{d(rng), d(rng), d(rng)};
            auto po = priority_order(gp, false, 0.0, nullptr);
            auto base_act = sequential_select(team, M, po, CommMode::sequential, 0.0, nullptr);
            int cut = trial % n;  // perturb messages of ranks > cut
            MessageTensor M2 = M;
            for (int k = cut + 1; k < n; ++k)
                for (int c = 0; c < dm; ++c) M2.row(po.order[k])[c] = d(rng);
            auto new_act = sequential_select(team, M2, po, CommMode::sequential, 0.0, nullptr);
            for (int k = 0; k <= cut; ++k) CHECK(new_act[po.order[k]] == base_act[po.order[k]]);
        }
    }
}

TEST_CASE("value-aware loss over precomputed estimates") {
    SUBCASE("all-zero estimates give zero") {
        std::vector<std::vector<std::vector<double>>> dq(2,
            std::vector<std::vector<double>>(3, std::vector<double>(3, 0.0)));
        CHECK(value_aware_loss(dq) == 0.0);
    }
    SUBCASE("two agents, one batch: pairs (0.3, 0.1) give -0.2") {
        std::vector<std::vector<std::vector<double>>> dq(1,
            std::vector<std::vector<double>>(2, std::vector<double>(2, 0.0)));
        dq[0][0][1] = 0.3;
        dq[0][1][0] = 0.1;
        CHECK(value_aware_loss(dq) == doctest::Approx(-0.2));
    }
    SUBCASE("positive estimates give a negative loss") {
        std::vector<std::vector<std::vector<double>>> dq(4,
            std::vector<std::vector<double>>(3, std::vector<double>(3, 0.25)));
        CHECK(value_aware_loss(dq) < 0.0);
    }
    SUBCASE("single agent is rejected") {
        std::vector<std::vector<std::vector<double>>> dq(1,
            std::vector<std::vector<double>>(1, std::vector<double>(1, 0.0)));
        CHECK_THROWS_AS(value_aware_loss(dq), UsageError);
    }
}

namespace {

struct RecFixture {
    EnvDims dims;
    WorldModel wm;
    Critic critic;
    std::vector<Tensor> obs_t;
    std::vector<Var> obs_v;
    int B = 3;

    explicit RecFixture(uint64_t seed)
        : dims{3, 3, 5, 12, 4},
          wm(WorldModel::make(dims, true, 8, *tmp_rng(seed))),
          critic(Critic::make(dims, 8, *tmp_rng(seed + 1))) {
        std::mt19937_64 rng = make_rng(seed + 2);
        for (int i = 0; i < dims.n_agents; ++i) {
            obs_t.push_back(Tensor::uniform({B, dims.obs_dim}, -1, 1, rng));
            obs_v.push_back(Var::constant(obs_t.back()));
        }
    }
    static std::mt19937_64* tmp_rng(uint64_t seed) {
        static thread_local std::mt19937_64 r;
        r = make_rng(seed);
        return &r;
    }
};

}  // namespace

TEST_CASE("recorded messages agree with the fast path and feed gradients to theta") {
    RecFixture fx(31);
    WorldModelVars tv = world_model_vars(fx.wm, true);
    auto msgs = build_messages_rec(tv, fx.critic, fx.dims, fx.obs_v, 0.1, 1.0, {});

    MlpScratch s;
    for (int b = 0; b < fx.B; ++b) {
        std::vector<std::vector<double>> obs_rows;
        for (int i = 0; i < fx.dims.n_agents; ++i)
            obs_rows.emplace_back(fx.obs_t[i].data() + b * fx.dims.obs_dim,
                                  fx.obs_t[i].data() + (b + 1) * fx.dims.obs_dim);
        std::vector<double> state(fx.dims.state_dim, 0.0);  // state unused by messages
        MessageTensor M;
        build_messages(fx.wm, fx.critic, state, obs_rows, 0.1, 1.0, {}, M, s);
        for (int i = 0; i < fx.dims.n_agents; ++i)
            for (int k = 0; k < fx.dims.d_m; ++k)
                CHECK(msgs.refined[i].value().at(b, k) ==
                      doctest::Approx(M.row(i)[k]).epsilon(1e-12));
    }

    Var lva = value_aware_loss_rec(msgs, fx.critic, fx.dims, fx.obs_v);
    std::vector<Var> theta;
    append_params(tv, theta);
    auto gs = grad(lva, theta);
    double gnorm = 0;
    for (auto& g : gs) gnorm += g.squared_norm();
    CHECK(gnorm > 0.0);
}

TEST_CASE("recorded value-aware loss equals the formula over extracted estimates") {
    RecFixture fx(37);
    WorldModelVars tv = world_model_vars(fx.wm, true);
    auto msgs = build_messages_rec(tv, fx.critic, fx.dims, fx.obs_v, 0.1, 1.0, {});
    Var lva = value_aware_loss_rec(msgs, fx.critic, fx.dims, fx.obs_v);

    MlpScratch s;
    int n = fx.dims.n_agents, dm = fx.dims.d_m;
    std::vector<std::vector<std::vector<double>>> dq(
        fx.B, std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0)));
    for (int b = 0; b < fx.B; ++b) {
        std::vector<std::vector<double>> obs_rows;
        for (int i = 0; i < n; ++i)
            obs_rows.emplace_back(fx.obs_t[i].data() + b * fx.dims.obs_dim,
                                  fx.obs_t[i].data() + (b + 1) * fx.dims.obs_dim);
        std::vector<double> state(fx.dims.state_dim, 0.0);
        TeamEval team = make_team_eval(fx.critic, state, obs_rows, s);
        for (int i = 0; i < n; ++i) {
            std::vector<double> m(dm);
            for (int k = 0; k < dm; ++k) m[k] = msgs.refined[i].value().at(b, k);
            for (int j = 0; j < n; ++j)
                if (j != i) dq[b][i][j] = delta_q_critic(team, j, i, dm, m);
        }
    }
    CHECK(lva.value().item() == doctest::Approx(value_aware_loss(dq)).epsilon(1e-10));
}

TEST_CASE("influence loss") {
    RecFixture fx(41);
    WorldModelVars tv = world_model_vars(fx.wm, true);

    SUBCASE("zero messages give exactly zero") {
        // zero the encoder and refinement nets so every message is null
        WorldModel wz = fx.wm;
        for (Mlp* net : {&wz.encoder, &wz.refine})
            for (Tensor* t : {&net->W1, &net->b1, &net->W2, &net->b2, &net->W3, &net->b3})
                for (int64_t i = 0; i < t->numel(); ++i) (*t)[i] = 0.0;
        WorldModelVars tz = world_model_vars(wz, true);
        auto msgs = build_messages_rec(tz, fx.critic, fx.dims, fx.obs_v, 0.1, 1.0, {});
        Var linf = influence_loss_rec(msgs, fx.critic, fx.dims, fx.obs_v, 0.1);
        CHECK(linf.value().item() == 0.0);
    }
    SUBCASE("matches the closed-form KL of the induced policies and is never positive") {
        auto msgs = build_messages_rec(tv, fx.critic, fx.dims, fx.obs_v, 0.1, 1.0, {});
        Var linf = influence_loss_rec(msgs, fx.critic, fx.dims, fx.obs_v, 0.1);
        CHECK(linf.value().item() <= 0.0);

        // independent route: softmax policies from fast-path utilities
        MlpScratch s;
        int n = fx.dims.n_agents, A = fx.dims.n_actions, dm = fx.dims.d_m;
        double tau = 0.1;
        double acc = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                double mean_kl = 0.0;
                for (int b = 0; b < fx.B; ++b) {
                    std::vector<double> obs_j(fx.obs_t[j].data() + b * fx.dims.obs_dim,
                                              fx.obs_t[j].data() + (b + 1) * fx.dims.obs_dim);
                    std::vector<double> m(dm);
                    for (int k = 0; k < dm; ++k) m[k] = msgs.refined[i].value().at(b, k);
                    std::vector<double> view(n * dm, 0.0), null_view(n * dm, 0.0);
                    single_sender_view(n, dm, i, m, view);
                    auto softmax = [&](std::span<const double> v) {
                        std::vector<double> p(A);
                        double mx = -1e300;
                        for (int a = 0; a < A; ++a) {
                            p[a] = fx.critic.utility_eval(j, obs_j, v, a, s) / tau;
                            mx = std::max(mx, p[a]);
                        }
                        double z = 0;
                        for (auto& x : p) z += std::exp(x - mx);
                        for (auto& x : p) x = std::exp(x - mx) / z;
                        return p;
                    };
                    auto pm = softmax(view), p0 = softmax(null_view);
                    double kl = 0;
                    for (int a = 0; a < A; ++a)
                        if (pm[a] > 0) kl += pm[a] * std::log(pm[a] / std::max(p0[a], 1e-8));
                    mean_kl += kl / fx.B;
                }
                acc += mean_kl;
            }
        double expected = -acc / (n * (n - 1));
        CHECK(linf.value().item() == doctest::Approx(expected).epsilon(1e-9));
    }
    SUBCASE("closed-form spot check: KL of Bernoulli(0.75) vs Bernoulli(0.5)") {
        double kl = 0.75 * std::log(0.75 / 0.5) + 0.25 * std::log(0.25 / 0.5);
        CHECK(kl == doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)));
        CHECK(kl > 0.0);  // the loss contributes -kl / (N(N-1))
    }
}
