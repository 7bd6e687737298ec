#include "seqcomm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>
#include <unordered_set>

namespace seqcomm {

namespace {

thread_local bool g_grad_mode = true;

Var make_node(Tensor out, const char* name, std::vector<Var> ins,
              std::function<std::vector<Var>(const Var&)> vjp) {
    if (!out.all_finite())
        throw NumericalError(std::string("non-finite result in op '") + name + "'");
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(out);
    n->op = name;
    bool any = false;
    if (g_grad_mode)
        for (const auto& v : ins)
            if (v.requires_grad()) any = true;
    if (any) {
        n->requires_grad = true;
        n->inputs.reserve(ins.size());
        for (const auto& v : ins) n->inputs.push_back(v.ptr());
        n->vjp = std::move(vjp);
    }
    return Var(n);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw UsageError(std::string(op) + ": shape mismatch");
}

}  // namespace

bool grad_mode() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }
GradModeGuard::GradModeGuard(bool enabled) : prev_(g_grad_mode) { g_grad_mode = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_mode = prev_; }

Var Var::leaf(Tensor value, bool requires_grad) {
    if (!value.all_finite()) throw NumericalError("leaf: non-finite value");
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && g_grad_mode;
    return Var(n);
}

Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

Var Var::scalar(double v) { return constant(Tensor::scalar(v)); }

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.value();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    return make_node(std::move(out), "add", {a, b},
                     [](const Var& gy) { return std::vector<Var>{gy, gy}; });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.value();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
    return make_node(std::move(out), "sub", {a, b},
                     [](const Var& gy) { return std::vector<Var>{gy, neg(gy)}; });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.value();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
    return make_node(std::move(out), "mul", {a, b}, [a, b](const Var& gy) {
        std::vector<Var> gs(2);
        if (a.requires_grad()) gs[0] = mul(gy, b);
        if (b.requires_grad()) gs[1] = mul(gy, a);
        return gs;
    });
}

Var neg(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x = -x;
    return make_node(std::move(out), "neg", {a},
                     [](const Var& gy) { return std::vector<Var>{neg(gy)}; });
}

Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x *= c;
    return make_node(std::move(out), "scale", {a},
                     [c](const Var& gy) { return std::vector<Var>{scale(gy, c)}; });
}

Var add_const(const Var& a, double c) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x += c;
    return make_node(std::move(out), "add_const", {a},
                     [](const Var& gy) { return std::vector<Var>{gy}; });
}

Var smul(const Var& s, const Var& t) {
    if (s.value().numel() != 1) throw UsageError("smul: first argument must be scalar");
    Tensor out = t.value();
    double c = s.value()[0];
    for (double& x : out.vec_data()) x *= c;
    return make_node(std::move(out), "smul", {s, t}, [s, t](const Var& gy) {
        std::vector<Var> gs(2);
        if (s.requires_grad()) gs[0] = sum_all(mul(gy, t));
        if (t.requires_grad()) gs[1] = smul(s, gy);
        return gs;
    });
}

Var exp_(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x = std::exp(x);
    return make_node(std::move(out), "exp", {a}, [a](const Var& gy) {
        return std::vector<Var>{mul(gy, exp_(a))};
    });
}

Var log_(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x = std::log(x);
    return make_node(std::move(out), "log", {a}, [a](const Var& gy) {
        return std::vector<Var>{mul(gy, recip(a))};
    });
}

Var recip(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.vec_data()) x = 1.0 / x;
    return make_node(std::move(out), "recip", {a}, [a](const Var& gy) {
        Var r = recip(a);
        return std::vector<Var>{neg(mul(gy, mul(r, r)))};
    });
}

Var leaky_relu(const Var& a, double slope) {
    Tensor out = a.value();
    Tensor mask(out.shape());
    const double* pa = a.value().data();
    double* po = out.data();
    double* pm = mask.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        // derivative at exactly 0 is defined as the negative slope
        pm[i] = pa[i] > 0.0 ? 1.0 : slope;
        po[i] = pa[i] > 0.0 ? pa[i] : slope * pa[i];
    }
    Var mv = Var::constant(std::move(mask));
    return make_node(std::move(out), "leaky_relu", {a}, [mv](const Var& gy) {
        return std::vector<Var>{mul(gy, mv)};
    });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var abs_(const Var& a) {
    Tensor out = a.value();
    Tensor sign(out.shape());
    const double* pa = a.value().data();
    double* po = out.data();
    double* ps = sign.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        ps[i] = pa[i] > 0.0 ? 1.0 : (pa[i] < 0.0 ? -1.0 : 0.0);
        po[i] = std::abs(pa[i]);
    }
    Var sv = Var::constant(std::move(sign));
    return make_node(std::move(out), "abs", {a}, [sv](const Var& gy) {
        return std::vector<Var>{mul(gy, sv)};
    });
}

Var clamp_min(const Var& a, double lo) {
    Tensor out = a.value();
    Tensor mask(out.shape());
    const double* pa = a.value().data();
    double* po = out.data();
    double* pm = mask.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        pm[i] = pa[i] > lo ? 1.0 : 0.0;
        po[i] = pa[i] > lo ? pa[i] : lo;
    }
    Var mv = Var::constant(std::move(mask));
    return make_node(std::move(out), "clamp_min", {a}, [mv](const Var& gy) {
        return std::vector<Var>{mul(gy, mv)};
    });
}

// ---------------- linear algebra / shape ----------------

Var matmul(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw UsageError("matmul: requires [m,k] x [k,n]");
    int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    const double* pa = A.data();
    const double* pb = B.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + static_cast<int64_t>(i) * k;
        double* orow = po + static_cast<int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_node(std::move(out), "matmul", {a, b}, [a, b](const Var& gy) {
        std::vector<Var> gs(2);
        if (a.requires_grad()) gs[0] = matmul(gy, transpose(b));
        if (b.requires_grad()) gs[1] = matmul(transpose(a), gy);
        return gs;
    });
}

Var transpose(const Var& a) {
    const Tensor& A = a.value();
    if (A.rank() != 2) throw UsageError("transpose: rank-2 only");
    int m = A.rows(), n = A.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    return make_node(std::move(out), "transpose", {a},
                     [](const Var& gy) { return std::vector<Var>{transpose(gy)}; });
}

Var reshape(const Var& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.value().numel()) throw UsageError("reshape: numel mismatch");
    Tensor out(std::move(shape), a.value().vec_data());
    std::vector<int> orig = a.value().shape();
    return make_node(std::move(out), "reshape", {a}, [orig](const Var& gy) {
        return std::vector<Var>{reshape(gy, orig)};
    });
}

Var add_rowvec(const Var& m, const Var& v) {
    const Tensor& M = m.value();
    const Tensor& V = v.value();
    if (M.rank() != 2 || V.rank() != 1 || V.numel() != M.cols())
        throw UsageError("add_rowvec: [B,k] + [k]");
    Tensor out = M;
    int rows = M.rows(), cols = M.cols();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) += V[j];
    return make_node(std::move(out), "add_rowvec", {m, v}, [m, v](const Var& gy) {
        std::vector<Var> gs(2);
        if (m.requires_grad()) gs[0] = gy;
        if (v.requires_grad()) gs[1] = sum_rows(gy);
        return gs;
    });
}

Var sum_rows(const Var& m) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw UsageError("sum_rows: rank-2 only");
    int rows = M.rows(), cols = M.cols();
    Tensor out({cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[j] += M.at(i, j);
    return make_node(std::move(out), "sum_rows", {m}, [rows](const Var& gy) {
        return std::vector<Var>{broadcast_rows(gy, rows)};
    });
}

Var broadcast_rows(const Var& v, int rows) {
    const Tensor& V = v.value();
    if (V.rank() != 1) throw UsageError("broadcast_rows: rank-1 only");
    int cols = static_cast<int>(V.numel());
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) = V[j];
    return make_node(std::move(out), "broadcast_rows", {v},
                     [](const Var& gy) { return std::vector<Var>{sum_rows(gy)}; });
}

Var sum_cols(const Var& m) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw UsageError("sum_cols: rank-2 only");
    int rows = M.rows(), cols = M.cols();
    Tensor out({rows, 1});
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += M.at(i, j);
        out.at(i, 0) = s;
    }
    return make_node(std::move(out), "sum_cols", {m}, [cols](const Var& gy) {
        return std::vector<Var>{broadcast_col(gy, cols)};
    });
}

Var broadcast_col(const Var& col, int cols) {
    const Tensor& C = col.value();
    if (C.rank() != 2 || C.cols() != 1) throw UsageError("broadcast_col: [B,1] expected");
    int rows = C.rows();
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) = C.at(i, 0);
    return make_node(std::move(out), "broadcast_col", {col},
                     [](const Var& gy) { return std::vector<Var>{sum_cols(gy)}; });
}

Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat: empty input");
    int total = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != 1) throw UsageError("concat: rank-1 only");
        total += static_cast<int>(p.value().numel());
    }
    Tensor out({total});
    int off = 0;
    std::vector<int> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::memcpy(out.data() + off, p.value().data(), p.value().numel() * sizeof(double));
        off += static_cast<int>(p.value().numel());
    }
    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(static_cast<int>(p.value().numel()));
    return make_node(std::move(out), "concat", parts, [offsets, sizes](const Var& gy) {
        std::vector<Var> gs;
        gs.reserve(offsets.size());
        for (size_t i = 0; i < offsets.size(); ++i)
            gs.push_back(slice(gy, offsets[i], offsets[i] + sizes[i]));
        return gs;
    });
}

Var slice(const Var& a, int from, int to) {
    const Tensor& A = a.value();
    if (A.rank() != 1 || from < 0 || to > A.numel() || from > to)
        throw UsageError("slice: bad range");
    Tensor out({to - from});
    std::memcpy(out.data(), A.data() + from, static_cast<size_t>(to - from) * sizeof(double));
    int total = static_cast<int>(A.numel());
    return make_node(std::move(out), "slice", {a}, [from, total](const Var& gy) {
        return std::vector<Var>{embed(gy, from, total)};
    });
}

Var embed(const Var& a, int from, int total) {
    const Tensor& A = a.value();
    if (A.rank() != 1 || from < 0 || from + A.numel() > total) throw UsageError("embed: bad range");
    Tensor out({total});
    std::memcpy(out.data() + from, A.data(), static_cast<size_t>(A.numel()) * sizeof(double));
    int len = static_cast<int>(A.numel());
    return make_node(std::move(out), "embed", {a}, [from, len](const Var& gy) {
        return std::vector<Var>{slice(gy, from, from + len)};
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: empty input");
    int rows = parts[0].value().rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != 2 || p.value().rows() != rows)
            throw UsageError("concat_cols: row mismatch");
        total += p.value().cols();
    }
    Tensor out({rows, total});
    std::vector<int> offsets, sizes;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        sizes.push_back(p.value().cols());
        off += p.value().cols();
    }
    for (int i = 0; i < rows; ++i) {
        double* orow = out.data() + static_cast<int64_t>(i) * total;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& P = parts[pi].value();
            std::memcpy(orow + offsets[pi], P.data() + static_cast<int64_t>(i) * sizes[pi],
                        static_cast<size_t>(sizes[pi]) * sizeof(double));
        }
    }
    return make_node(std::move(out), "concat_cols", parts, [offsets, sizes](const Var& gy) {
        std::vector<Var> gs;
        gs.reserve(offsets.size());
        for (size_t i = 0; i < offsets.size(); ++i)
            gs.push_back(slice_cols(gy, offsets[i], offsets[i] + sizes[i]));
        return gs;
    });
}

Var slice_cols(const Var& m, int from, int to) {
    const Tensor& M = m.value();
    if (M.rank() != 2 || from < 0 || to > M.cols() || from > to)
        throw UsageError("slice_cols: bad range");
    int rows = M.rows(), w = to - from, total = M.cols();
    Tensor out({rows, w});
    for (int i = 0; i < rows; ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i) * w,
                    M.data() + static_cast<int64_t>(i) * total + from,
                    static_cast<size_t>(w) * sizeof(double));
    return make_node(std::move(out), "slice_cols", {m}, [from, total](const Var& gy) {
        return std::vector<Var>{embed_cols(gy, from, total)};
    });
}

Var embed_cols(const Var& m, int from, int total) {
    const Tensor& M = m.value();
    if (M.rank() != 2 || from < 0 || from + M.cols() > total)
        throw UsageError("embed_cols: bad range");
    int rows = M.rows(), w = M.cols();
    Tensor out({rows, total});
    for (int i = 0; i < rows; ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i) * total + from,
                    M.data() + static_cast<int64_t>(i) * w, static_cast<size_t>(w) * sizeof(double));
    return make_node(std::move(out), "embed_cols", {m}, [from, w](const Var& gy) {
        return std::vector<Var>{slice_cols(gy, from, from + w)};
    });
}

// ---------------- reductions ----------------

Var sum_all(const Var& a) {
    double s = 0.0;
    for (double x : a.value().vec_data()) s += x;
    std::vector<int> shape = a.value().shape();
    return make_node(Tensor::scalar(s), "sum_all", {a}, [shape](const Var& gy) {
        return std::vector<Var>{broadcast_scalar(gy, shape)};
    });
}

Var mean_all(const Var& a) {
    int64_t n = a.value().numel();
    if (n == 0) throw UsageError("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var broadcast_scalar(const Var& s, std::vector<int> shape) {
    if (s.value().numel() != 1) throw UsageError("broadcast_scalar: scalar expected");
    Tensor out = Tensor::full(shape, s.value()[0]);
    return make_node(std::move(out), "broadcast_scalar", {s},
                     [](const Var& gy) { return std::vector<Var>{sum_all(gy)}; });
}

Var max_all(const Var& a) {
    const Tensor& A = a.value();
    if (A.numel() == 0) throw UsageError("max_all: empty tensor");
    int64_t arg = 0;
    double best = A[0];
    for (int64_t i = 1; i < A.numel(); ++i)
        if (A[i] > best) { best = A[i]; arg = i; }
    Tensor onehot = Tensor::zeros(A.shape());
    onehot[arg] = 1.0;
    Var oh = Var::constant(std::move(onehot));
    return make_node(Tensor::scalar(best), "max_all", {a}, [oh](const Var& gy) {
        return std::vector<Var>{smul(gy, oh)};
    });
}

Var rowmax(const Var& m) {
    const Tensor& M = m.value();
    if (M.rank() != 2) throw UsageError("rowmax: rank-2 only");
    int rows = M.rows(), cols = M.cols();
    Tensor out({rows, 1});
    Tensor onehot({rows, cols});
    for (int i = 0; i < rows; ++i) {
        int arg = 0;
        double best = M.at(i, 0);
        for (int j = 1; j < cols; ++j)
            if (M.at(i, j) > best) { best = M.at(i, j); arg = j; }
        out.at(i, 0) = best;
        onehot.at(i, arg) = 1.0;
    }
    Var oh = Var::constant(std::move(onehot));
    return make_node(std::move(out), "rowmax", {m}, [oh, cols](const Var& gy) {
        return std::vector<Var>{mul(broadcast_col(gy, cols), oh)};
    });
}

Var dot(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

Var sumsq(const Var& a) { return sum_all(mul(a, a)); }

Var logsumexp_rows(const Var& m, double tau) {
    if (tau <= 0.0) throw UsageError("logsumexp_rows: tau must be positive");
    const Tensor& M = m.value();
    if (M.rank() != 2) throw UsageError("logsumexp_rows: rank-2 only");
    int rows = M.rows(), cols = M.cols();
    // row maxima are detached; the expression stays exact with constant shift
    Tensor mx({rows, 1});
    for (int i = 0; i < rows; ++i) {
        double best = M.at(i, 0);
        for (int j = 1; j < cols; ++j) best = std::max(best, M.at(i, j));
        mx.at(i, 0) = best;
    }
    Var mxc = Var::constant(std::move(mx));
    Var z = exp_(scale(sub(m, broadcast_col(mxc, cols)), 1.0 / tau));
    return add(mxc, scale(log_(sum_cols(z)), tau));
}

// ---------------- differentiation ----------------

std::vector<Var> grad_vars(const Var& loss, const std::vector<Var>& wrt, bool create_graph) {
    if (!loss.defined()) throw UsageError("grad: undefined loss");
    if (loss.value().numel() != 1) throw UsageError("grad: loss must be scalar");

    using detail::Node;
    // post-order over the requires_grad subgraph (iterative; graphs get deep)
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    if (loss.requires_grad()) {
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(loss.node(), 0);
        seen.insert(loss.node());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->inputs.size()) {
                Node* c = n->inputs[idx++].get();
                if (c->requires_grad && !seen.count(c)) {
                    seen.insert(c);
                    stack.emplace_back(c, 0);
                }
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }
    }

    GradModeGuard guard(create_graph);
    std::unordered_map<Node*, Var> gmap;
    if (loss.requires_grad())
        gmap[loss.node()] = Var::constant(Tensor::full(loss.value().shape(), 1.0));

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        auto git = gmap.find(n);
        if (git == gmap.end() || !n->vjp) continue;
        const Var& gy = git->second;
        std::vector<Var> gxs = n->vjp(gy);
        if (gxs.size() != n->inputs.size())
            throw NumericalError("internal: vjp arity mismatch");
        for (size_t i = 0; i < n->inputs.size(); ++i) {
            Node* in = n->inputs[i].get();
            if (!in->requires_grad || !gxs[i].defined()) continue;
            auto ait = gmap.find(in);
            if (ait == gmap.end())
                gmap.emplace(in, gxs[i]);
            else
                ait->second = add(ait->second, gxs[i]);
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto it = gmap.find(w.node());
        if (it != gmap.end())
            out.push_back(it->second);
        else
            out.push_back(Var::constant(Tensor::zeros(w.value().shape())));
    }
    return out;
}

std::vector<Tensor> grad(const Var& loss, const std::vector<Var>& wrt) {
    auto gv = grad_vars(loss, wrt, /*create_graph=*/false);
    std::vector<Tensor> out;
    out.reserve(gv.size());
    for (auto& g : gv) out.push_back(g.value());
    return out;
}

double eval_loss(const LossFn& f, const std::vector<Tensor>& params) {
    NoGradGuard guard;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Var::constant(p));
    return f(leaves).value().item();
}

std::vector<Tensor> grad(const LossFn& f, const std::vector<Tensor>& params) {
    GradModeGuard guard(true);
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Var::leaf(p));
    Var loss = f(leaves);
    return grad(loss, leaves);
}

std::vector<Tensor> hvp(const LossFn& f, const std::vector<Tensor>& params,
                        const std::vector<Tensor>& v) {
    if (v.size() != params.size()) throw UsageError("hvp: v/params length mismatch");
    for (size_t i = 0; i < v.size(); ++i)
        if (!v[i].same_shape(params[i])) throw UsageError("hvp: v/params shape mismatch");
    GradModeGuard guard(true);
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(Var::leaf(p));
    Var loss = f(leaves);
    std::vector<Var> gs = grad_vars(loss, leaves, /*create_graph=*/true);
    Var s;
    for (size_t i = 0; i < gs.size(); ++i) {
        Var term = sum_all(mul(gs[i], Var::constant(v[i])));
        s = s.defined() ? add(s, term) : term;
    }
    return grad(s, leaves);
}

double finite_diff_check(const LossFn& f, const std::vector<Tensor>& params, double eps) {
    if (eps <= 0.0) throw UsageError("finite_diff_check: eps must be positive");
    constexpr double kFloor = 1e-12;
    std::vector<Tensor> analytic = grad(f, params);
    std::vector<Tensor> probe = params;
    double worst = 0.0;
    for (size_t t = 0; t < params.size(); ++t) {
        for (int64_t i = 0; i < params[t].numel(); ++i) {
            double orig = probe[t][i];
            probe[t][i] = orig + eps;
            double fp = eval_loss(f, probe);
            probe[t][i] = orig - eps;
            double fm = eval_loss(f, probe);
            probe[t][i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[t][i];
            double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + kFloor);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// ---------------- flat helpers ----------------

int64_t flat_size(const std::vector<Tensor>& ts) {
    int64_t n = 0;
    for (const auto& t : ts) n += t.numel();
    return n;
}

std::vector<double> flatten(const std::vector<Tensor>& ts) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(flat_size(ts)));
    for (const auto& t : ts)
        out.insert(out.end(), t.vec_data().begin(), t.vec_data().end());
    return out;
}

void unflatten(const std::vector<double>& flat, std::vector<Tensor>& ts) {
    if (static_cast<int64_t>(flat.size()) != flat_size(ts))
        throw UsageError("unflatten: size mismatch");
    size_t off = 0;
    for (auto& t : ts) {
        std::copy(flat.begin() + off, flat.begin() + off + t.numel(), t.data());
        off += static_cast<size_t>(t.numel());
    }
}

double global_norm(const std::vector<Tensor>& ts) {
    double s = 0.0;
    for (const auto& t : ts) s += t.squared_norm();
    return std::sqrt(s);
}

void clip_global_norm(std::vector<Tensor>& ts, double max_norm) {
    double n = global_norm(ts);
    if (n <= max_norm || n == 0.0) return;
    double c = max_norm / n;
    for (auto& t : ts)
        for (double& x : t.vec_data()) x *= c;
}

}  // namespace seqcomm
