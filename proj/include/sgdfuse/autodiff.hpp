#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sgdfuse/tensor.hpp"

namespace sgdfuse::ad {

// Reverse-mode autodiff on dynamically built graphs. Every op returns a new
// node; backward() walks the graph once in reverse topological order.
// Parameters are long-lived leaf nodes whose gradients accumulate across
// samples until zero_grad().
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor(value.dims(), 0.0);
            grad_alloc = true;
        }
    }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor v);
Var make_param(Tensor v);

// While a NoGradScope is alive, ops do not record parents or backward
// closures, so intermediates free as soon as they go out of scope.
bool grad_enabled();
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

// Seeds d(loss)/d(loss)=1 and propagates; loss must be scalar.
void backward(const Var& loss);
void zero_grad(const std::vector<Var>& params);

// Throws NumericalError naming `stage` if v contains NaN/Inf.
void check_finite(const Var& v, const std::string& stage);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var abs_(const Var& a);
Var square(const Var& a);
Var max_elem(const Var& a, const Var& b);

// ---- reductions / broadcasts ----
Var mean_all(const Var& a);
Var mean_c(const Var& a);                       // [C,H,W] -> [1,H,W]
Var bias_chw(const Var& x, const Var& b);       // [C,H,W] + [C]
Var mul_bcast_c(const Var& g, const Var& x);    // [1,H,W] * [C,H,W]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                      // [M,K]x[K,N]
Var linear(const Var& x, const Var& w, const Var& b);        // [N,D],[O,D],[O] -> [N,O]
Var softmax_rows(const Var& x);                              // [N,M]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- convolution ----
enum class PadMode { Zero, Replicate };
Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = -1);
Var dwconv2d(const Var& x, const Var& w, const Var& b);      // stride 1, same pad

// Fixed-kernel Sobel with replicate padding; output packs [gx(0..C-1), gy(C..2C-1)].
Var sobel_xy(const Var& x);
// [2C,H,W] -> [C,H,W]: sqrt(gx^2+gy^2), subgradient 0 at 0.
Var hypot_pairs(const Var& g);

// ---- shape ----
Var reshape(const Var& x, std::vector<int> dims); // same element count
Var concat_c(const std::vector<Var>& xs);
Var slice_c(const Var& x, int c0, int len);
Var upsample2x(const Var& x);
Var chw_to_tokens(const Var& x, int win);       // [C,H,W] -> [T,C], window-major
Var tokens_to_chw(const Var& t, int c, int h, int w, int win);

// ---- attention ----
// q,k,v: [T,D] with T = n_blocks*block tokens; per-block multi-head attention.
// probs_out, when non-null, receives softmax rows as [n_blocks*heads*block, block].
Var attention(const Var& q, const Var& k, const Var& v, int heads, int block,
              Tensor* probs_out = nullptr);

} // namespace sgdfuse::ad
