#include "seqcomm/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace seqcomm {

double treatment_efficacy(int action) {
    switch (action) {
        case 0: return 0.0;
        case 1: return 0.05;
        case 2: return 0.12;
        default: throw UsageError("treatment_efficacy: action outside {0,1,2}");
    }
}

double blind_penalty(int specialty, int condition, double hidden_risk, int action) {
    if (action < 0 || action > 2) throw UsageError("blind_penalty: action outside {0,1,2}");
    double mismatched = (specialty == condition) ? 0.0 : 1.0;
    return 1.5 * mismatched * hidden_risk * static_cast<double>(action);
}

double drug_penalty(std::span<const int> actions, std::span<const int> conditions,
                    const std::array<std::array<double, 3>, 3>& drug) {
    for (int a = 0; a < 3; ++a) {
        if (drug[a][a] != 0.0) throw UsageError("drug_penalty: matrix diagonal must be zero");
        for (int b = 0; b < 3; ++b) {
            if (drug[a][b] != drug[b][a]) throw UsageError("drug_penalty: matrix must be symmetric");
            if (drug[a][b] < 0.0 || drug[a][b] > 1.0)
                throw UsageError("drug_penalty: entries must lie in [0,1]");
        }
    }
    if (actions.size() != conditions.size()) throw UsageError("drug_penalty: arity mismatch");
    double p = 0.0;
    for (size_t i = 0; i < actions.size(); ++i)
        for (size_t j = i + 1; j < actions.size(); ++j)
            if (actions[i] == 2 && actions[j] == 2) p += drug[conditions[i]][conditions[j]];
    return 1.5 * p;
}

double resource_penalty(std::span<const int> actions, int budget) {
    if (budget < 0) throw UsageError("resource_penalty: budget must be non-negative");
    int high = 0;
    for (int a : actions)
        if (a == 2) ++high;
    return 0.5 * std::max(0, high - budget);
}

HospitalEnv::HospitalEnv(HospitalConfig cfg) : cfg_(cfg) {
    if (cfg_.n_agents != 3) throw UsageError("hospital: exactly 3 specialist agents supported");
    if (cfg_.patients < cfg_.n_agents) throw UsageError("hospital: need at least one patient per agent");
    focal_.assign(cfg_.n_agents, -1);
}

EnvDims HospitalEnv::dims(int d_m) const {
    EnvDims d;
    d.n_agents = cfg_.n_agents;
    d.n_actions = 3;
    d.obs_dim = obs_dim();
    d.state_dim = state_dim();
    d.d_m = d_m;
    return d;
}

void HospitalEnv::reset(uint64_t seed) {
    rng_ = make_rng(seed);
    std::uniform_real_distribution<double> vital(0.3, 0.7);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> sev(0.2, 0.8);
    std::uniform_int_distribution<int> cond(0, 2);
    patients_.assign(cfg_.patients, Patient{});
    for (auto& p : patients_) {
        for (auto& v : p.vitals) v = vital(rng_);
        p.condition = cond(rng_);
        for (auto& h : p.risk) h = unit(rng_);
        p.severity = sev(rng_);
    }
    focal_.assign(cfg_.n_agents, -1);
    first_severity_.clear();
    for (int i = 0; i < cfg_.n_agents; ++i) assign(i);
    step_ = 0;
    done_ = false;
}

void HospitalEnv::assign(int agent) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto eligible = [&](int j) {
        if (patients_[j].severity < cfg_.heal_threshold) return false;
        for (int k = 0; k < cfg_.n_agents; ++k)
            if (k != agent && focal_[k] == j) return false;
        return true;
    };
    int pick = -1;
    if (unit(rng_) < cfg_.match_prob) {
        // highest-severity eligible patient whose condition matches the specialty
        double best = -1.0;
        for (int j = 0; j < cfg_.patients; ++j)
            if (eligible(j) && patients_[j].condition == specialty(agent) &&
                patients_[j].severity > best) {
                best = patients_[j].severity;
                pick = j;
            }
    }
    if (pick < 0) {
        // random mismatched patient
        std::vector<int> pool;
        for (int j = 0; j < cfg_.patients; ++j)
            if (eligible(j) && patients_[j].condition != specialty(agent)) pool.push_back(j);
        if (pool.empty())
            for (int j = 0; j < cfg_.patients; ++j)
                if (eligible(j)) pool.push_back(j);
        if (!pool.empty()) {
            std::uniform_int_distribution<int> idx(0, static_cast<int>(pool.size()) - 1);
            pick = pool[idx(rng_)];
        }
    }
    if (pick >= 0) {
        focal_[agent] = pick;
        first_severity_.emplace(pick, patients_[pick].severity);
    }
}

double HospitalEnv::step(std::span<const int> actions, StepMetrics* metrics) {
    if (done_) throw UsageError("hospital: step() after termination");
    if (static_cast<int>(actions.size()) != cfg_.n_agents)
        throw UsageError("hospital: joint action arity mismatch");
    for (int a : actions)
        if (a < 0 || a > 2) throw UsageError("hospital: action outside {0,1,2}");

    std::normal_distribution<double> noise(0.0, cfg_.noise);
    StepMetrics m;
    std::vector<int> conds(cfg_.n_agents);
    double base = 0.0;
    for (int i = 0; i < cfg_.n_agents; ++i) {
        Patient& p = patients_[focal_[i]];
        conds[i] = p.condition;
        bool matched = specialty(i) == p.condition;
        double h_cond = p.risk[p.condition];
        double eff = treatment_efficacy(actions[i]) * (matched ? 1.0 : (1.0 - h_cond));

        double dc = -eff;
        if (cfg_.noise > 0.0) dc += noise(rng_);
        double c_new = std::clamp(p.severity + dc, 0.0, 1.0);
        double delta_c = c_new - p.severity;
        p.severity = c_new;

        double& v = p.vitals[p.condition];
        double v_new = std::clamp(v + eff * (0.5 - v), 0.0, 1.0);
        double delta_v = std::abs(v - 0.5) - std::abs(v_new - 0.5);
        v = v_new;

        double vmax = *std::max_element(p.vitals.begin(), p.vitals.end());
        bool overtreat = vmax > 0.85;

        base += delta_v + 0.4 * (matched ? 1.0 : 0.0) - 0.6 * delta_c - 3.0 * (overtreat ? 1.0 : 0.0);
        m.blind += blind_penalty(specialty(i), p.condition, h_cond, actions[i]);
        m.delta_v += delta_v;
        m.delta_c += delta_c;
        m.overtreated += overtreat ? 1 : 0;
    }
    m.drug = drug_penalty(actions, conds, cfg_.drug);
    m.resource = resource_penalty(actions, cfg_.budget);
    m.reward = base - m.blind - m.drug - m.resource;

    ++step_;
    bool all_healed = true;
    for (int i = 0; i < cfg_.n_agents; ++i)
        if (patients_[focal_[i]].severity >= cfg_.heal_threshold) all_healed = false;
    done_ = all_healed || step_ >= cfg_.horizon;
    if (!done_) {
        for (int i = 0; i < cfg_.n_agents; ++i)
            if (patients_[focal_[i]].severity < cfg_.heal_threshold) assign(i);
    }
    m.done = done_;
    if (metrics) *metrics = m;
    return m.reward;
}

void HospitalEnv::observe(int agent, std::span<double> out) const {
    if (agent < 0 || agent >= cfg_.n_agents) throw UsageError("hospital: bad agent index");
    if (static_cast<int>(out.size()) != obs_dim()) throw UsageError("hospital: obs buffer size");
    const Patient& p = patients_[focal_[agent]];
    std::fill(out.begin(), out.end(), 0.0);
    for (int k = 0; k < 3; ++k) out[kObsVitals + k] = p.vitals[k];
    out[kObsCond + p.condition] = 1.0;
    out[kObsSeverity] = p.severity;
    out[kObsRisk] = (specialty(agent) == p.condition) ? p.risk[specialty(agent)] : 0.0;
    out[kObsAgentId + agent] = 1.0;
}

std::vector<double> HospitalEnv::observe(int agent) const {
    std::vector<double> o(obs_dim());
    observe(agent, o);
    return o;
}

void HospitalEnv::global_state(std::span<double> out) const {
    if (static_cast<int>(out.size()) != state_dim()) throw UsageError("hospital: state buffer size");
    int od = obs_dim();
    for (int i = 0; i < cfg_.n_agents; ++i)
        observe(i, out.subspan(static_cast<size_t>(i) * od, od));
    double* risks = out.data() + cfg_.n_agents * od;
    for (int i = 0; i < cfg_.n_agents; ++i) {
        const Patient& p = patients_[focal_[i]];
        for (int k = 0; k < 3; ++k) risks[i * 3 + k] = p.risk[k];
    }
}

std::vector<double> HospitalEnv::global_state() const {
    std::vector<double> s(state_dim());
    global_state(s);
    return s;
}

double HospitalEnv::severity_improvement() const {
    if (first_severity_.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& [j, c0] : first_severity_) acc += c0 - patients_[j].severity;
    return acc / static_cast<double>(first_severity_.size());
}

// ---------------- tabular toy environments ----------------

TabularEnv::TabularEnv(ToySpec spec) : spec_(std::move(spec)) {
    joint_count_ = 1;
    for (int i = 0; i < spec_.n_agents; ++i) {
        joint_count_ *= spec_.n_actions;
        if (static_cast<int64_t>(spec_.n_states) * joint_count_ > 10000)
            throw CapabilityError("toy env: |S| * |A|^N exceeds 10000");
    }
    if (static_cast<int64_t>(spec_.n_states) * joint_count_ > 10000)
        throw CapabilityError("toy env: |S| * |A|^N exceeds 10000");
    if (static_cast<int>(spec_.next.size()) != spec_.n_states ||
        static_cast<int>(spec_.reward.size()) != spec_.n_states)
        throw UsageError("toy env: transition tables must cover every state");
    for (int s = 0; s < spec_.n_states; ++s) {
        if (static_cast<int64_t>(spec_.next[s].size()) != joint_count_ ||
            static_cast<int64_t>(spec_.reward[s].size()) != joint_count_)
            throw UsageError("toy env: transition tables must cover every joint action");
        for (int n : spec_.next[s])
            if (n < 0 || n >= spec_.n_states) throw UsageError("toy env: bad next state");
    }
}

void TabularEnv::reset(uint64_t /*seed*/) {
    state_ = spec_.start_state;
    step_ = 0;
    done_ = false;
}

int TabularEnv::joint_index(std::span<const int> actions) const {
    if (static_cast<int>(actions.size()) != spec_.n_agents)
        throw UsageError("toy env: joint action arity mismatch");
    int idx = 0;
    for (int a : actions) {
        if (a < 0 || a >= spec_.n_actions) throw UsageError("toy env: bad action");
        idx = idx * spec_.n_actions + a;
    }
    return idx;
}

double TabularEnv::step(std::span<const int> actions) {
    if (done_) throw UsageError("toy env: step() after termination");
    int j = joint_index(actions);
    double r = spec_.reward[state_][j];
    state_ = spec_.next[state_][j];
    ++step_;
    done_ = step_ >= spec_.horizon;
    return r;
}

TabularEnv make_toy_env(ToySpec spec) { return TabularEnv(std::move(spec)); }

}  // namespace seqcomm
