#include "seqcomm/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace seqcomm {

namespace {

void mgs_orthonormalize(std::vector<std::vector<double>>& rows) {
    // modified Gram-Schmidt with one re-orthogonalization pass
    for (size_t i = 0; i < rows.size(); ++i) {
        for (int pass = 0; pass < 2; ++pass) {
            for (size_t j = 0; j < i; ++j) {
                double d = 0;
                for (size_t k = 0; k < rows[i].size(); ++k) d += rows[i][k] * rows[j][k];
                for (size_t k = 0; k < rows[i].size(); ++k) rows[i][k] -= d * rows[j][k];
            }
        }
        double n = 0;
        for (double x : rows[i]) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-12) throw NumericalError("orthogonal_init: degenerate direction");
        for (double& x : rows[i]) x /= n;
    }
}

void lrelu_inplace(std::vector<double>& v, double slope) {
    for (double& x : v)
        if (x < 0.0) x *= slope;
}

}  // namespace

void orthogonal_init(Tensor& W, std::mt19937_64& rng) {
    int out = W.rows(), in = W.cols();
    std::normal_distribution<double> dist(0.0, 1.0);
    bool by_rows = out <= in;
    int k = by_rows ? out : in;
    int len = by_rows ? in : out;
    std::vector<std::vector<double>> vecs(k, std::vector<double>(len));
    for (auto& v : vecs)
        for (auto& x : v) x = dist(rng);
    mgs_orthonormalize(vecs);
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) W.at(i, j) = by_rows ? vecs[i][j] : vecs[j][i];
}

double orthogonality_defect(const Tensor& W) {
    int out = W.rows(), in = W.cols();
    bool by_rows = out <= in;
    int k = by_rows ? out : in;
    double worst = 0.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double d = 0;
            if (by_rows)
                for (int t = 0; t < in; ++t) d += W.at(i, t) * W.at(j, t);
            else
                for (int t = 0; t < out; ++t) d += W.at(t, i) * W.at(t, j);
            worst = std::max(worst, std::abs(d - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

Mlp Mlp::make(int in, int out, int hidden, std::mt19937_64& rng) {
    Mlp m;
    m.W1 = Tensor({hidden, in});
    m.b1 = Tensor({hidden});
    m.W2 = Tensor({hidden, hidden});
    m.b2 = Tensor({hidden});
    m.W3 = Tensor({out, hidden});
    m.b3 = Tensor({out});
    orthogonal_init(m.W1, rng);
    orthogonal_init(m.W2, rng);
    orthogonal_init(m.W3, rng);
    return m;
}

void Mlp::forward(std::span<const double> x, std::span<double> out, MlpScratch& s) const {
    int in = in_dim(), h = hidden_dim(), o = out_dim();
    if (static_cast<int>(x.size()) != in) throw UsageError("mlp: input dimension mismatch");
    if (static_cast<int>(out.size()) != o) throw UsageError("mlp: output dimension mismatch");
    s.h1.assign(h, 0.0);
    s.h2.assign(h, 0.0);
    const double* w1 = W1.data();
    for (int j = 0; j < h; ++j) {
        const double* row = w1 + static_cast<int64_t>(j) * in;
        double acc = b1[j];
        for (int k = 0; k < in; ++k) acc += row[k] * x[k];
        s.h1[j] = acc;
    }
    lrelu_inplace(s.h1, slope);
    const double* w2 = W2.data();
    for (int j = 0; j < h; ++j) {
        const double* row = w2 + static_cast<int64_t>(j) * h;
        double acc = b2[j];
        for (int k = 0; k < h; ++k) acc += row[k] * s.h1[k];
        s.h2[j] = acc;
    }
    lrelu_inplace(s.h2, slope);
    const double* w3 = W3.data();
    for (int j = 0; j < o; ++j) {
        const double* row = w3 + static_cast<int64_t>(j) * h;
        double acc = b3[j];
        for (int k = 0; k < h; ++k) acc += row[k] * s.h2[k];
        out[j] = acc;
    }
}

double Mlp::forward1(std::span<const double> x, MlpScratch& s) const {
    double out;
    forward(x, std::span<double>(&out, 1), s);
    return out;
}

MlpVars mlp_vars(const Mlp& m, bool requires_grad) {
    MlpVars v;
    v.W1 = Var::leaf(m.W1, requires_grad);
    v.b1 = Var::leaf(m.b1, requires_grad);
    v.W2 = Var::leaf(m.W2, requires_grad);
    v.b2 = Var::leaf(m.b2, requires_grad);
    v.W3 = Var::leaf(m.W3, requires_grad);
    v.b3 = Var::leaf(m.b3, requires_grad);
    v.slope = m.slope;
    return v;
}

Var mlp_forward(const MlpVars& mv, const Var& X) {
    Var h1 = leaky_relu(add_rowvec(matmul(X, transpose(mv.W1)), mv.b1), mv.slope);
    Var h2 = leaky_relu(add_rowvec(matmul(h1, transpose(mv.W2)), mv.b2), mv.slope);
    return add_rowvec(matmul(h2, transpose(mv.W3)), mv.b3);
}

void append_params(const MlpVars& mv, std::vector<Var>& out) {
    out.push_back(mv.W1);
    out.push_back(mv.b1);
    out.push_back(mv.W2);
    out.push_back(mv.b2);
    out.push_back(mv.W3);
    out.push_back(mv.b3);
}

// ---------------- world model ----------------

WorldModel WorldModel::make(const EnvDims& dims, bool with_comm, int hidden,
                            std::mt19937_64& rng) {
    WorldModel wm;
    wm.dims = dims;
    wm.has_comm = with_comm;
    if (with_comm) {
        wm.encoder = Mlp::make(dims.obs_dim, dims.d_m, hidden, rng);
        wm.refine = Mlp::make(dims.d_m + 1, dims.d_m, hidden, rng);
    }
    wm.dynamics = Mlp::make(dims.dynamics_in_dim(), 1 + dims.state_dim, hidden, rng);
    return wm;
}

void WorldModel::encode_message(std::span<const double> obs, std::span<double> m_out,
                                MlpScratch& s) const {
    if (!has_comm) throw UsageError("world model: communication module disabled");
    encoder.forward(obs, m_out, s);
}

void WorldModel::predict(std::span<const double> state, std::span<const int> actions,
                         std::span<const double> flat_msgs, double& r_hat,
                         std::span<double> s_next, MlpScratch& s) const {
    if (static_cast<int>(state.size()) != dims.state_dim)
        throw UsageError("world model: state dimension mismatch");
    if (static_cast<int>(actions.size()) != dims.n_agents)
        throw UsageError("world model: joint action arity mismatch");
    s.in.assign(dims.dynamics_in_dim(), 0.0);
    std::memcpy(s.in.data(), state.data(), state.size() * sizeof(double));
    for (int i = 0; i < dims.n_agents; ++i) {
        int a = actions[i];
        if (a < 0 || a >= dims.n_actions) throw UsageError("world model: invalid action index");
        s.in[dims.state_dim + i * dims.n_actions + a] = 1.0;
    }
    std::memcpy(s.in.data() + dims.state_dim + dims.n_agents * dims.n_actions, flat_msgs.data(),
                flat_msgs.size() * sizeof(double));
    std::vector<double> out(1 + dims.state_dim);
    MlpScratch scratch;
    dynamics.forward(s.in, out, scratch);
    r_hat = out[0];
    std::memcpy(s_next.data(), out.data() + 1, dims.state_dim * sizeof(double));
}

WorldModelVars world_model_vars(const WorldModel& wm, bool requires_grad) {
    WorldModelVars v;
    v.has_comm = wm.has_comm;
    if (wm.has_comm) {
        v.encoder = mlp_vars(wm.encoder, requires_grad);
        v.refine = mlp_vars(wm.refine, requires_grad);
    }
    v.dynamics = mlp_vars(wm.dynamics, requires_grad);
    return v;
}

void append_params(const WorldModelVars& wv, std::vector<Var>& out) {
    if (wv.has_comm) {
        append_params(wv.encoder, out);
        append_params(wv.refine, out);
    }
    append_params(wv.dynamics, out);
}

// ---------------- critic ----------------

Critic Critic::make(const EnvDims& dims, int hidden, std::mt19937_64& rng) {
    Critic c;
    c.dims = dims;
    for (int i = 0; i < dims.n_agents; ++i)
        c.utility.push_back(Mlp::make(dims.utility_in_dim(), 1, hidden, rng));
    c.mix_w = Tensor::full({dims.n_agents}, 1.0);
    c.mix_bias = Mlp::make(dims.state_dim, 1, hidden, rng);
    return c;
}

double Critic::utility_eval(int agent, std::span<const double> obs, std::span<const double> view,
                            int action, MlpScratch& s) const {
    if (agent < 0 || agent >= dims.n_agents) throw UsageError("critic: bad agent index");
    if (action < 0 || action >= dims.n_actions) throw UsageError("critic: bad action index");
    if (static_cast<int>(obs.size()) != dims.obs_dim ||
        static_cast<int>(view.size()) != dims.msg_view_dim())
        throw UsageError("critic: input dimension mismatch");
    s.in.assign(dims.utility_in_dim(), 0.0);
    std::memcpy(s.in.data(), obs.data(), obs.size() * sizeof(double));
    std::memcpy(s.in.data() + dims.obs_dim, view.data(), view.size() * sizeof(double));
    s.in[dims.obs_dim + dims.msg_view_dim() + action] = 1.0;
    ++utility_evals;
    return utility[agent].forward1(std::span<const double>(s.in.data(), s.in.size()), s);
}

double Critic::mix(std::span<const double> utilities, std::span<const double> state,
                   MlpScratch& s) const {
    double q = mix_bias.forward1(state, s);
    for (int i = 0; i < dims.n_agents; ++i) q += std::abs(mix_w[i]) * utilities[i];
    return q;
}

double Critic::joint_q(std::span<const double> state,
                       const std::vector<std::span<const double>>& obs,
                       const std::vector<std::span<const double>>& views,
                       std::span<const int> actions, MlpScratch& s) const {
    std::vector<double> u(dims.n_agents);
    for (int i = 0; i < dims.n_agents; ++i) u[i] = utility_eval(i, obs[i], views[i], actions[i], s);
    ++joint_evals;
    return mix(u, state, s);
}

void Critic::utility_table(const std::vector<std::span<const double>>& obs,
                           const std::vector<std::span<const double>>& views,
                           std::span<double> table, MlpScratch& s) const {
    for (int i = 0; i < dims.n_agents; ++i)
        for (int a = 0; a < dims.n_actions; ++a)
            table[i * dims.n_actions + a] = utility_eval(i, obs[i], views[i], a, s);
}

CriticVars critic_vars(const Critic& c, bool requires_grad) {
    CriticVars v;
    for (const auto& u : c.utility) v.utility.push_back(mlp_vars(u, requires_grad));
    v.mix_w = Var::leaf(c.mix_w, requires_grad);
    v.mix_bias = mlp_vars(c.mix_bias, requires_grad);
    return v;
}

void append_params(const CriticVars& cv, std::vector<Var>& out) {
    for (const auto& u : cv.utility) append_params(u, out);
    out.push_back(cv.mix_w);
    append_params(cv.mix_bias, out);
}

Var critic_joint_q_rec(const CriticVars& cv, const EnvDims& dims, const Var& S,
                       const std::vector<Var>& obs, const std::vector<Var>& views,
                       const std::vector<Var>& act_onehot) {
    Var aw = abs_(cv.mix_w);
    Var q = mlp_forward(cv.mix_bias, S);
    for (int i = 0; i < dims.n_agents; ++i) {
        Var x = concat_cols({obs[i], views[i], act_onehot[i]});
        Var u = mlp_forward(cv.utility[i], x);
        q = add(q, smul(reshape(slice(aw, i, i + 1), {}), u));
    }
    return q;
}

// ---------------- soft value ----------------

double soft_value_table(std::span<const double> q, double tau) {
    if (tau <= 0.0) throw UsageError("soft_value: tau must be positive");
    if (q.empty()) throw UsageError("soft_value: empty table");
    double mx = q[0];
    for (double x : q) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : q) s += std::exp((x - mx) / tau);
    return mx + tau * std::log(s);
}

namespace {

void check_enumeration_guard(const EnvDims& dims) {
    if (dims.n_agents * std::log(static_cast<double>(dims.n_actions)) > 20.0)
        throw CapabilityError("soft_value: joint action space too large to enumerate");
}

}  // namespace

double soft_value(const Critic& c, std::span<const double> state,
                  const std::vector<std::span<const double>>& obs,
                  const std::vector<std::span<const double>>& views, double tau, MlpScratch& s) {
    check_enumeration_guard(c.dims);
    int n = c.dims.n_agents, A = c.dims.n_actions;
    std::vector<double> table(static_cast<size_t>(n) * A);
    c.utility_table(obs, views, table, s);
    double bias = c.mix_bias.forward1(state, s);
    int64_t total = 1;
    for (int i = 0; i < n; ++i) total *= A;
    std::vector<double> joint(static_cast<size_t>(total));
    std::vector<int> a(n, 0);
    for (int64_t idx = 0; idx < total; ++idx) {
        double q = bias;
        for (int i = 0; i < n; ++i) q += std::abs(c.mix_w[i]) * table[i * A + a[i]];
        joint[idx] = q;
        c.joint_evals++;
        for (int i = n - 1; i >= 0; --i) {
            if (++a[i] < A) break;
            a[i] = 0;
        }
    }
    return soft_value_table(joint, tau);
}

double soft_value_factored(const Critic& c, std::span<const double> state,
                           const std::vector<std::span<const double>>& obs,
                           const std::vector<std::span<const double>>& views, double tau,
                           MlpScratch& s) {
    int n = c.dims.n_agents, A = c.dims.n_actions;
    std::vector<double> table(static_cast<size_t>(n) * A);
    c.utility_table(obs, views, table, s);
    double v = c.mix_bias.forward1(state, s);
    std::vector<double> scaled(A);
    for (int i = 0; i < n; ++i) {
        double wi = std::abs(c.mix_w[i]);
        for (int a = 0; a < A; ++a) scaled[a] = wi * table[i * A + a];
        v += soft_value_table(scaled, tau);
    }
    return v;
}

Var soft_value_rec(const Critic& cbar, const EnvDims& dims, const Var& S,
                   const std::vector<Var>& obs, const std::vector<Var>& views, double tau,
                   bool enumerated) {
    int n = dims.n_agents, A = dims.n_actions;
    if (enumerated) check_enumeration_guard(dims);
    CriticVars cv = critic_vars(cbar, /*requires_grad=*/false);
    int B = S.value().rows();

    // per (agent, action) utility columns, scaled by the fixed mixing weights
    std::vector<std::vector<Var>> u(n);
    for (int i = 0; i < n; ++i) {
        double wi = std::abs(cbar.mix_w[i]);
        for (int a = 0; a < A; ++a) {
            Tensor onehot({B, A});
            for (int b = 0; b < B; ++b) onehot.at(b, a) = 1.0;
            Var x = concat_cols({obs[i], views[i], Var::constant(onehot)});
            u[i].push_back(scale(mlp_forward(cv.utility[i], x), wi));
        }
    }
    Var bias = mlp_forward(cv.mix_bias, S);
    if (!enumerated) {
        Var v = bias;
        for (int i = 0; i < n; ++i)
            v = add(v, logsumexp_rows(concat_cols(u[i]), tau));
        return v;
    }
    int64_t total = 1;
    for (int i = 0; i < n; ++i) total *= A;
    std::vector<Var> cols;
    cols.reserve(static_cast<size_t>(total));
    std::vector<int> a(n, 0);
    for (int64_t idx = 0; idx < total; ++idx) {
        Var q = u[0][a[0]];
        for (int i = 1; i < n; ++i) q = add(q, u[i][a[i]]);
        cols.push_back(q);
        for (int i = n - 1; i >= 0; --i) {
            if (++a[i] < A) break;
            a[i] = 0;
        }
    }
    return add(bias, logsumexp_rows(concat_cols(cols), tau));
}

// ---------------- target updates & checkpoints ----------------

namespace {

void ema_tensor(Tensor& target, const Tensor& online, double tau_ema) {
    for (int64_t i = 0; i < target.numel(); ++i)
        target[i] = tau_ema * target[i] + (1.0 - tau_ema) * online[i];
}

void ema_mlp(Mlp& target, const Mlp& online, double tau_ema) {
    ema_tensor(target.W1, online.W1, tau_ema);
    ema_tensor(target.b1, online.b1, tau_ema);
    ema_tensor(target.W2, online.W2, tau_ema);
    ema_tensor(target.b2, online.b2, tau_ema);
    ema_tensor(target.W3, online.W3, tau_ema);
    ema_tensor(target.b3, online.b3, tau_ema);
}

void add_mlp_params(std::vector<ParamEntry>& out, Mlp& m, const std::string& prefix) {
    out.push_back({prefix + ".W1", &m.W1});
    out.push_back({prefix + ".b1", &m.b1});
    out.push_back({prefix + ".W2", &m.W2});
    out.push_back({prefix + ".b2", &m.b2});
    out.push_back({prefix + ".W3", &m.W3});
    out.push_back({prefix + ".b3", &m.b3});
}

}  // namespace

void ema_update(Critic& target, const Critic& online, double tau_ema) {
    if (tau_ema < 0.0 || tau_ema > 1.0) throw UsageError("ema_update: tau_ema outside [0,1]");
    for (size_t i = 0; i < target.utility.size(); ++i)
        ema_mlp(target.utility[i], online.utility[i], tau_ema);
    ema_tensor(target.mix_w, online.mix_w, tau_ema);
    ema_mlp(target.mix_bias, online.mix_bias, tau_ema);
}

std::vector<ParamEntry> named_params(WorldModel& wm, const std::string& prefix) {
    std::vector<ParamEntry> out;
    if (wm.has_comm) {
        add_mlp_params(out, wm.encoder, prefix + ".encoder");
        add_mlp_params(out, wm.refine, prefix + ".refine");
    }
    add_mlp_params(out, wm.dynamics, prefix + ".dynamics");
    return out;
}

std::vector<ParamEntry> named_params(Critic& c, const std::string& prefix) {
    std::vector<ParamEntry> out;
    for (size_t i = 0; i < c.utility.size(); ++i)
        add_mlp_params(out, c.utility[i], prefix + ".utility" + std::to_string(i));
    out.push_back({prefix + ".mix_w", &c.mix_w});
    add_mlp_params(out, c.mix_bias, prefix + ".mix_bias");
    return out;
}

std::vector<std::string> manifest(const std::vector<ParamEntry>& entries) {
    std::vector<std::string> out;
    for (const auto& e : entries) {
        std::string line = e.name;
        for (int d : e.t->shape()) line += " " + std::to_string(d);
        out.push_back(line);
    }
    return out;
}

void save_checkpoint(const std::string& path, const std::vector<ParamEntry>& entries) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw UsageError("checkpoint: cannot open for writing: " + path);
    const char magic[4] = {'S', 'Q', 'C', '1'};
    f.write(magic, 4);
    uint32_t count = static_cast<uint32_t>(entries.size());
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& e : entries) {
        uint32_t nlen = static_cast<uint32_t>(e.name.size());
        f.write(reinterpret_cast<const char*>(&nlen), sizeof(nlen));
        f.write(e.name.data(), nlen);
        uint32_t rank = static_cast<uint32_t>(e.t->shape().size());
        f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
        for (int d : e.t->shape()) {
            int32_t dd = d;
            f.write(reinterpret_cast<const char*>(&dd), sizeof(dd));
        }
        f.write(reinterpret_cast<const char*>(e.t->data()),
                static_cast<std::streamsize>(e.t->numel() * sizeof(double)));
    }
}

void load_checkpoint(const std::string& path, const std::vector<ParamEntry>& entries) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("checkpoint: cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SQC1", 4) != 0)
        throw UsageError("checkpoint: bad magic in " + path);
    uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (count != entries.size()) throw UsageError("checkpoint: entry count mismatch");
    for (const auto& e : entries) {
        uint32_t nlen = 0;
        f.read(reinterpret_cast<char*>(&nlen), sizeof(nlen));
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        if (name != e.name) throw UsageError("checkpoint: name mismatch: " + name);
        uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
        std::vector<int> shape(rank);
        for (auto& d : shape) {
            int32_t dd = 0;
            f.read(reinterpret_cast<char*>(&dd), sizeof(dd));
            d = dd;
        }
        if (shape != e.t->shape()) throw UsageError("checkpoint: shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(e.t->data()),
               static_cast<std::streamsize>(e.t->numel() * sizeof(double)));
        if (!f) throw UsageError("checkpoint: truncated file " + path);
    }
}

}  // namespace seqcomm
