#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "seqcomm/nets.hpp"
#include "seqcomm/tensor.hpp"

namespace seqcomm {

// ---------------- hospital Dec-POMDP ----------------

struct Patient {
    std::array<double, 3> vitals{};  // heart rate, blood pressure, oxygen saturation in [0,1]
    int condition = 0;               // 0-based condition type
    std::array<double, 3> risk{};    // hidden risk per specialty channel
    double severity = 0.0;
};

struct HospitalConfig {
    int patients = 100;
    int n_agents = 3;
    int budget = 2;
    int horizon = 50;
    double noise = 0.01;       // severity noise std dev
    double match_prob = 0.7;   // probability an assignment matches the specialty
    double heal_threshold = 0.05;
    // drug interaction matrix, symmetric with zero diagonal
    std::array<std::array<double, 3>, 3> drug{{{0.0, 0.8, 0.5}, {0.8, 0.0, 0.3}, {0.5, 0.3, 0.0}}};
};

// Penalty formulas. Actions are 0 (low), 1 (medium), 2 (high intensity).
double blind_penalty(int specialty, int condition, double hidden_risk, int action);
double drug_penalty(std::span<const int> actions, std::span<const int> conditions,
                    const std::array<std::array<double, 3>, 3>& drug);
double resource_penalty(std::span<const int> actions, int budget);

// treatment efficacy per action level
double treatment_efficacy(int action);

struct StepMetrics {
    double reward = 0.0;
    double blind = 0.0, drug = 0.0, resource = 0.0;
    double delta_v = 0.0, delta_c = 0.0;
    int overtreated = 0;
    bool done = false;
};

// Per-agent observation layout:
//   [0..2]  focal patient vitals
//   [3..5]  condition one-hot
//   [6]     severity
//   [7]     specialty-gated hidden risk (0 when mismatched)
//   [8..10] agent-id one-hot
// Global state: concatenated observations of all agents followed by the full
// hidden-risk vectors of the focal patients (training-time privileged state).
class HospitalEnv {
  public:
    static constexpr int kObsVitals = 0;
    static constexpr int kObsCond = 3;
    static constexpr int kObsSeverity = 6;
    static constexpr int kObsRisk = 7;
    static constexpr int kObsAgentId = 8;

    explicit HospitalEnv(HospitalConfig cfg = {});

    EnvDims dims(int d_m) const;
    int obs_dim() const { return 8 + cfg_.n_agents; }
    int state_dim() const { return cfg_.n_agents * (obs_dim() + 3); }

    void reset(uint64_t seed);
    double step(std::span<const int> actions, StepMetrics* metrics = nullptr);

    bool done() const { return done_; }
    int steps() const { return step_; }
    void observe(int agent, std::span<double> out) const;
    std::vector<double> observe(int agent) const;
    void global_state(std::span<double> out) const;
    std::vector<double> global_state() const;

    int focal(int agent) const { return focal_[agent]; }
    int specialty(int agent) const { return agent; }  // one agent per specialty
    const HospitalConfig& config() const { return cfg_; }

    // mean over ever-assigned patients of (severity at first assignment - now)
    double severity_improvement() const;

    // exposed for tests that freeze specific scenarios
    std::vector<Patient>& patients() { return patients_; }
    std::vector<int>& focal_assignments() { return focal_; }
    void mark_active() { done_ = false; }

  private:
    void assign(int agent);

    HospitalConfig cfg_;
    std::vector<Patient> patients_;
    std::vector<int> focal_;
    std::mt19937_64 rng_;
    int step_ = 0;
    bool done_ = true;
    std::map<int, double> first_severity_;
};

// ---------------- tabular toy environments ----------------

struct ToySpec {
    int n_states = 0;
    int n_agents = 1;
    int n_actions = 2;
    int start_state = 0;
    int horizon = 1;
    double gamma = 1.0;
    // deterministic transitions next[s][joint] and rewards reward[s][joint];
    // joint index enumerates actions with agent 0 as the most significant digit
    std::vector<std::vector<int>> next;
    std::vector<std::vector<double>> reward;
};

// Fully enumerable Dec-POMDP used as a test oracle bed. Guard: |S| * |A|^N <= 10000.
class TabularEnv {
  public:
    explicit TabularEnv(ToySpec spec);

    void reset(uint64_t seed);
    double step(std::span<const int> actions);
    bool done() const { return done_; }
    int state() const { return state_; }
    int steps() const { return step_; }
    const ToySpec& spec() const { return spec_; }

    int joint_index(std::span<const int> actions) const;
    int64_t joint_count() const { return joint_count_; }

  private:
    ToySpec spec_;
    int64_t joint_count_ = 0;
    int state_ = 0;
    int step_ = 0;
    bool done_ = true;
};

TabularEnv make_toy_env(ToySpec spec);

}  // namespace seqcomm
