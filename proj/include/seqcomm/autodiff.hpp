#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "seqcomm/tensor.hpp"

namespace seqcomm {

class Var;

namespace detail {

struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Backward rule: maps the upstream gradient to per-input gradients.
    // Rules are written in terms of recorded ops, so a gradient expression
    // can itself be differentiated (needed for Hessian-vector products).
    std::function<std::vector<Var>(const Var& gy)> vjp;
    const char* op = "leaf";
};

}  // namespace detail

// Handle to a node in the recorded computation graph. Copying a Var shares
// the node. The graph is a DAG of shared_ptrs; it is freed when the last
// handle to its outputs goes away.
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad = true);
    static Var constant(Tensor value);
    static Var scalar(double v);  // constant scalar

    bool defined() const { return n_ != nullptr; }
    const Tensor& value() const { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    detail::Node* node() const { return n_.get(); }
    const std::shared_ptr<detail::Node>& ptr() const { return n_; }

  private:
    std::shared_ptr<detail::Node> n_;
};

// When disabled, newly created ops do not record backward rules and their
// outputs are constants. Used to evaluate without building graph.
bool grad_mode();
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};
class GradModeGuard {
  public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;

  private:
    bool prev_;
};

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_const(const Var& a, double c);
Var smul(const Var& s, const Var& t);  // s scalar (numel 1)
Var exp_(const Var& a);
Var log_(const Var& a);
Var recip(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);
Var abs_(const Var& a);
Var clamp_min(const Var& a, double lo);

// ---- linear algebra / shape ----
Var matmul(const Var& a, const Var& b);  // rank-2 x rank-2
Var transpose(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
Var add_rowvec(const Var& m, const Var& v);          // [B,k] + [k]
Var sum_rows(const Var& m);                          // [B,k] -> [k]
Var broadcast_rows(const Var& v, int rows);          // [k] -> [rows,k]
Var sum_cols(const Var& m);                          // [B,k] -> [B,1]
Var broadcast_col(const Var& col, int cols);         // [B,1] -> [B,cols]
Var concat(const std::vector<Var>& parts);           // rank-1
Var slice(const Var& a, int from, int to);           // rank-1
Var embed(const Var& a, int from, int total);        // rank-1 zero-pad
Var concat_cols(const std::vector<Var>& parts);      // rank-2, same rows
Var slice_cols(const Var& m, int from, int to);
Var embed_cols(const Var& m, int from, int total);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var broadcast_scalar(const Var& s, std::vector<int> shape);
Var max_all(const Var& a);   // subgradient at first argmax
Var rowmax(const Var& m);    // [B,k] -> [B,1]
Var dot(const Var& a, const Var& b);
Var sumsq(const Var& a);
// tau * log sum_j exp(m_ij / tau), row-wise with max subtraction: [B,k] -> [B,1]
Var logsumexp_rows(const Var& m, double tau);

// ---- differentiation ----

// Gradient of a scalar loss with respect to `wrt`. With create_graph the
// returned Vars are themselves recorded and can be differentiated again.
std::vector<Var> grad_vars(const Var& loss, const std::vector<Var>& wrt, bool create_graph);
std::vector<Tensor> grad(const Var& loss, const std::vector<Var>& wrt);

// Convenience interface over plain tensors: f builds a recorded scalar from
// leaf Vars created for each parameter tensor.
using LossFn = std::function<Var(const std::vector<Var>& params)>;

double eval_loss(const LossFn& f, const std::vector<Tensor>& params);
std::vector<Tensor> grad(const LossFn& f, const std::vector<Tensor>& params);

// Hessian-vector product H v = d/dp (grad f . v), via two reverse passes.
std::vector<Tensor> hvp(const LossFn& f, const std::vector<Tensor>& params,
                        const std::vector<Tensor>& v);

// Max relative error between analytic gradient and central differences:
// max_i |a_i - n_i| / (|a_i| + |n_i| + floor). Test oracle, not a training op.
double finite_diff_check(const LossFn& f, const std::vector<Tensor>& params, double eps);

// ---- flat parameter helpers (used by CG and the optimizers) ----
int64_t flat_size(const std::vector<Tensor>& ts);
std::vector<double> flatten(const std::vector<Tensor>& ts);
void unflatten(const std::vector<double>& flat, std::vector<Tensor>& ts);
double global_norm(const std::vector<Tensor>& ts);
// Scales tensors in place so the global norm is at most max_norm.
void clip_global_norm(std::vector<Tensor>& ts, double max_norm);

}  // namespace seqcomm
