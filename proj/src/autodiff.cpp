#include "sgdfuse/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace sgdfuse::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make_node(Tensor value, std::vector<Var> parents, const char* op,
              std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    if (g_grad_enabled) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p->requires_grad;
        if (rg) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return n;
}

void accumulate(Node& p, const Tensor& delta) {
    p.ensure_grad();
    double* g = p.grad.data();
    const double* d = delta.data();
    for (std::int64_t i = 0; i < delta.size(); ++i) g[i] += d[i];
}

} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->op = "const";
    return n;
}

Var make_param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->op = "param";
    return n;
}

void backward(const Var& loss) {
    if (loss->value.size() != 1) throw DimensionError("backward: loss must be scalar");
    if (!loss->requires_grad) return;

    // iterative post-order over requires_grad subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) {
        p->grad_alloc = false;
        p->grad = Tensor();
    }
}

void check_finite(const Var& v, const std::string& stage) {
    if (!v->value.all_finite()) throw NumericalError("non-finite values at stage '" + stage + "'");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, "add", [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *self.parents[k];
            if (p.requires_grad) accumulate(p, self.grad);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_node(std::move(out), {a, b}, "sub", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) accumulate(pa, self.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, "mul", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::int64_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_node(std::move(out), {a}, "scale", [s](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += s;
    return make_node(std::move(out), {a}, "add_scalar", [](Node& self) {
        Node& p = *self.parents[0];
        if (p.requires_grad) accumulate(p, self.grad);
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    return make_node(std::move(out), {a}, "sigmoid", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            double s = self.value[i];
            p.grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

Var tanh_(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return make_node(std::move(out), {a}, "tanh", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            double t = self.value[i];
            p.grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
}

Var silu(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-out[i]));
        out[i] *= s;
    }
    return make_node(std::move(out), {a}, "silu", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            double x = p.value[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            p.grad[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Var gelu(const Var& a) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] * kInvSqrt2));
    return make_node(std::move(out), {a}, "gelu", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            double x = p.value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            p.grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

Var abs_(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
    return make_node(std::move(out), {a}, "abs", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            double x = p.value[i];
            double s = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            p.grad[i] += self.grad[i] * s;
        }
    });
}

Var square(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    return make_node(std::move(out), {a}, "square", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * 2.0 * p.value[i];
    });
}

Var max_elem(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "max_elem");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], b->value[i]);
    return make_node(std::move(out), {a, b}, "max_elem", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) {
            // subgradient: ties route to the first argument
            if (pa.value[i] >= pb.value[i]) {
                if (pa.requires_grad) pa.grad[i] += self.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += self.grad[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

Var mean_all(const Var& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    double inv = 1.0 / static_cast<double>(a->value.size());
    return make_node(Tensor::scalar(s * inv), {a}, "mean_all", [inv](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        double g = self.grad[0] * inv;
        for (std::int64_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

Var mean_c(const Var& a) {
    const Tensor& x = a->value;
    if (x.rank() != 3) throw DimensionError("mean_c expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out(std::vector<int>{1, h, w}, 0.0);
    double inv = 1.0 / c;
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < h * w; ++i) out[i] += x[static_cast<std::int64_t>(ci) * h * w + i];
    for (int i = 0; i < h * w; ++i) out[i] *= inv;
    return make_node(std::move(out), {a}, "mean_c", [c, h, w, inv](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < h * w; ++i)
                p.grad[static_cast<std::int64_t>(ci) * h * w + i] += self.grad[i] * inv;
    });
}

Var bias_chw(const Var& x, const Var& b) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3 || b->value.rank() != 1 || b->value.dim(0) != xv.dim(0))
        throw DimensionError("bias_chw: want [C,H,W] and [C]");
    int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor out = xv;
    for (int ci = 0; ci < c; ++ci) {
        double bv = b->value[ci];
        for (int i = 0; i < hw; ++i) out[static_cast<std::int64_t>(ci) * hw + i] += bv;
    }
    return make_node(std::move(out), {x, b}, "bias_chw", [c, hw](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) accumulate(px, self.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                double s = 0.0;
                for (int i = 0; i < hw; ++i) s += self.grad[static_cast<std::int64_t>(ci) * hw + i];
                pb.grad[ci] += s;
            }
        }
    });
}

Var mul_bcast_c(const Var& g, const Var& x) {
    const Tensor& gv = g->value;
    const Tensor& xv = x->value;
    if (gv.rank() != 3 || gv.dim(0) != 1 || xv.rank() != 3 || gv.dim(1) != xv.dim(1) ||
        gv.dim(2) != xv.dim(2))
        throw DimensionError("mul_bcast_c: want [1,H,W] and [C,H,W]");
    int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor out = xv;
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < hw; ++i) out[static_cast<std::int64_t>(ci) * hw + i] *= gv[i];
    return make_node(std::move(out), {g, x}, "mul_bcast_c", [c, hw](Node& self) {
        Node& pg = *self.parents[0];
        Node& px = *self.parents[1];
        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int i = 0; i < hw; ++i) {
                double s = 0.0;
                for (int ci = 0; ci < c; ++ci) {
                    std::int64_t at = static_cast<std::int64_t>(ci) * hw + i;
                    s += self.grad[at] * px.value[at];
                }
                pg.grad[i] += s;
            }
        }
        if (px.requires_grad) {
            px.ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int i = 0; i < hw; ++i) {
                    std::int64_t at = static_cast<std::int64_t>(ci) * hw + i;
                    px.grad[at] += self.grad[at] * pg.value[i];
                }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw DimensionError("matmul: incompatible " + av.shape_str() + " x " + bv.shape_str());
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out(std::vector<int>{m, n});
    MapMat(out.data(), m, n).noalias() =
        CMapMat(av.data(), m, k) * CMapMat(bv.data(), k, n);
    return make_node(std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        CMapMat g(self.grad.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            MapMat(pa.grad.data(), m, k).noalias() += g * CMapMat(pb.value.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            MapMat(pb.grad.data(), k, n).noalias() += CMapMat(pa.value.data(), m, k).transpose() * g;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
        throw DimensionError("linear: incompatible " + xv.shape_str() + " and " + wv.shape_str());
    int n = xv.dim(0), d = xv.dim(1), o = wv.dim(0);
    if (b->value.rank() != 1 || b->value.dim(0) != o) throw DimensionError("linear: bad bias");
    Tensor out(std::vector<int>{n, o});
    MapMat y(out.data(), n, o);
    y.noalias() = CMapMat(xv.data(), n, d) * CMapMat(wv.data(), o, d).transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) out.at(i, j) += b->value[j];
    return make_node(std::move(out), {x, w, b}, "linear", [n, d, o](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        CMapMat g(self.grad.data(), n, o);
        if (px.requires_grad) {
            px.ensure_grad();
            MapMat(px.grad.data(), n, d).noalias() += g * CMapMat(pw.value.data(), o, d);
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            MapMat(pw.grad.data(), o, d).noalias() +=
                g.transpose() * CMapMat(px.value.data(), n, d);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int j = 0; j < o; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += self.grad.at(i, j);
                pb.grad[j] += s;
            }
        }
    });
}

Var softmax_rows(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.rank() != 2) throw DimensionError("softmax_rows expects [N,M]");
    int n = xv.dim(0), m = xv.dim(1);
    Tensor out = xv;
    for (int i = 0; i < n; ++i) {
        double mx = out.at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, out.at(i, j));
        double s = 0.0;
        for (int j = 0; j < m; ++j) {
            double e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        double inv = 1.0 / s;
        for (int j = 0; j < m; ++j) out.at(i, j) *= inv;
    }
    return make_node(std::move(out), {x}, "softmax", [n, m](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < m; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
            for (int j = 0; j < m; ++j)
                p.grad.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x->value;
    if (xv.rank() != 2) throw DimensionError("layer_norm expects [N,D]");
    int n = xv.dim(0), d = xv.dim(1);
    if (gamma->value.size() != d || beta->value.size() != d)
        throw DimensionError("layer_norm: gamma/beta size mismatch");
    Tensor xhat(std::vector<int>{n, d});
    Tensor inv_std(std::vector<int>{n});
    Tensor out(std::vector<int>{n, d});
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xv.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = xv.at(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < d; ++j) {
            double h = (xv.at(i, j) - mu) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gamma->value[j] + beta->value[j];
        }
    }
    return make_node(std::move(out), {x, gamma, beta}, "layer_norm",
                     [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int j = 0; j < d; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += self.grad.at(i, j) * xhat.at(i, j);
                pg.grad[j] += s;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int j = 0; j < d; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += self.grad.at(i, j);
                pb.grad[j] += s;
            }
        }
        if (px.requires_grad) {
            px.ensure_grad();
            for (int i = 0; i < n; ++i) {
                double mean_dh = 0.0, mean_dh_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    double dh = self.grad.at(i, j) * pg.value[j];
                    mean_dh += dh;
                    mean_dh_xhat += dh * xhat.at(i, j);
                }
                mean_dh /= d;
                mean_dh_xhat /= d;
                for (int j = 0; j < d; ++j) {
                    double dh = self.grad.at(i, j) * pg.value[j];
                    px.grad.at(i, j) +=
                        inv_std[i] * (dh - mean_dh - xhat.at(i, j) * mean_dh_xhat);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

// col: [C*k*k, OH*OW]; zero padding. Stride-1 rows reduce to shifted copies.
void im2col(const Tensor& x, int k, int stride, int pad, Tensor& col, int oh, int ow) {
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                std::int64_t row = (static_cast<std::int64_t>(ci) * k + ki) * k + kj;
                double* dst = col.data() + row * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + static_cast<std::int64_t>(oy) * ow,
                                  dst + static_cast<std::int64_t>(oy) * ow + ow, 0.0);
                        continue;
                    }
                    const double* src = x.data() + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    double* drow = dst + static_cast<std::int64_t>(oy) * ow;
                    if (stride == 1) {
                        int shift = kj - pad; // ix = ox + shift
                        int lo = std::max(0, -shift);
                        int hi = std::min(ow, w - shift);
                        if (lo > 0) std::fill(drow, drow + lo, 0.0);
                        if (hi > lo) std::copy(src + lo + shift, src + hi + shift, drow + lo);
                        if (hi < ow) std::fill(drow + std::max(hi, lo), drow + ow, 0.0);
                    } else {
                        for (int ox = 0; ox < ow; ++ox) {
                            int ix = ox * stride - pad + kj;
                            drow[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                        }
                    }
                }
            }
}

void col2im_add(const Tensor& col, int c, int h, int w, int k, int stride, int pad,
                int oh, int ow, Tensor& dx) {
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                std::int64_t row = (static_cast<std::int64_t>(ci) * k + ki) * k + kj;
                const double* src = col.data() + row * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = dx.data() + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * ow + ox];
                    }
                }
            }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.rank() != 3 || wv.rank() != 4) throw DimensionError("conv2d: want [C,H,W], [O,C,k,k]");
    int c = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    int o = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != c) throw DimensionError("conv2d: channel mismatch");
    if (wv.dim(3) != k) throw DimensionError("conv2d: non-square kernel");
    if (b->value.size() != o) throw DimensionError("conv2d: bad bias");
    if (pad < 0) pad = k / 2;
    int oh = (h + 2 * pad - k) / stride + 1;
    int ow = (wd + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: output would be empty");

    // pointwise convs skip im2col entirely: col == x viewed as [C, HW]
    bool pointwise = (k == 1 && stride == 1 && pad == 0);
    int ckk = c * k * k;
    Tensor col;
    if (!pointwise) {
        col = Tensor(std::vector<int>{ckk, oh * ow});
        im2col(xv, k, stride, pad, col, oh, ow);
    }
    const double* col_data = pointwise ? xv.data() : col.data();
    Tensor out(std::vector<int>{o, oh, ow});
    MapMat(out.data(), o, oh * ow).noalias() =
        CMapMat(wv.data(), o, ckk) * CMapMat(col_data, ckk, oh * ow);
    for (int oc = 0; oc < o; ++oc) {
        double bv = b->value[oc];
        double* dst = out.data() + static_cast<std::int64_t>(oc) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) dst[i] += bv;
    }

    Var node = make_node(std::move(out), {x, w, b}, "conv2d", nullptr);
    if (node->requires_grad) {
        // the column matrix is captured for the weight gradient; built lazily
        // here so pure inference never pays for the copy
        node->backward_fn = [c, h, wd, o, k, stride, pad, oh, ow, ckk, pointwise,
                             col = std::move(col)](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            Node& pb = *self.parents[2];
            CMapMat g(self.grad.data(), o, oh * ow);
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int oc = 0; oc < o; ++oc) {
                    double s = 0.0;
                    const double* src =
                        self.grad.data() + static_cast<std::int64_t>(oc) * oh * ow;
                    for (int i = 0; i < oh * ow; ++i) s += src[i];
                    pb.grad[oc] += s;
                }
            }
            const double* col_data = pointwise ? px.value.data() : col.data();
            if (pw.requires_grad) {
                pw.ensure_grad();
                MapMat(pw.grad.data(), o, ckk).noalias() +=
                    g * CMapMat(col_data, ckk, oh * ow).transpose();
            }
            if (px.requires_grad) {
                px.ensure_grad();
                if (pointwise) {
                    MapMat(px.grad.data(), c, oh * ow).noalias() +=
                        CMapMat(pw.value.data(), o, ckk).transpose() * g;
                } else {
                    Tensor dcol(std::vector<int>{ckk, oh * ow});
                    MapMat(dcol.data(), ckk, oh * ow).noalias() =
                        CMapMat(pw.value.data(), o, ckk).transpose() * g;
                    col2im_add(dcol, c, h, wd, k, stride, pad, oh, ow, px.grad);
                }
            }
        };
    }
    return node;
}

Var dwconv2d(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.rank() != 3 || wv.rank() != 3 || wv.dim(0) != xv.dim(0) || wv.dim(1) != wv.dim(2))
        throw DimensionError("dwconv2d: want [C,H,W], [C,k,k]");
    int c = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), k = wv.dim(1);
    if (b->value.size() != c) throw DimensionError("dwconv2d: bad bias");
    int pad = k / 2;
    Tensor out(std::vector<int>{c, h, wd});
    for (int ci = 0; ci < c; ++ci) {
        const double* xc = xv.data() + static_cast<std::int64_t>(ci) * h * wd;
        double* oc = out.data() + static_cast<std::int64_t>(ci) * h * wd;
        std::fill(oc, oc + static_cast<std::int64_t>(h) * wd, b->value[ci]);
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                double wk = wv.at(ci, ki, kj);
                int dy = ki - pad, dx = kj - pad;
                int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                for (int oy = y0; oy < y1; ++oy) {
                    const double* src = xc + static_cast<std::int64_t>(oy + dy) * wd + dx;
                    double* dst = oc + static_cast<std::int64_t>(oy) * wd;
                    for (int ox = x0; ox < x1; ++ox) dst[ox] += wk * src[ox];
                }
            }
    }
    return make_node(std::move(out), {x, w, b}, "dwconv2d", [c, h, wd, k, pad](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                double s = 0.0;
                const double* src = self.grad.data() + static_cast<std::int64_t>(ci) * h * wd;
                for (int i = 0; i < h * wd; ++i) s += src[i];
                pb.grad[ci] += s;
            }
        }
        bool need_x = px.requires_grad, need_w = pw.requires_grad;
        if (!need_x && !need_w) return;
        if (need_x) px.ensure_grad();
        if (need_w) pw.ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            const double* gc = self.grad.data() + static_cast<std::int64_t>(ci) * h * wd;
            const double* xc = px.value.data() + static_cast<std::int64_t>(ci) * h * wd;
            double* dxc = need_x ? px.grad.data() + static_cast<std::int64_t>(ci) * h * wd
                                 : nullptr;
            for (int ki = 0; ki < k; ++ki)
                for (int kj = 0; kj < k; ++kj) {
                    double wk = pw.value.at(ci, ki, kj);
                    int dy = ki - pad, dx = kj - pad;
                    int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                    double dw = 0.0;
                    for (int oy = y0; oy < y1; ++oy) {
                        const double* grow = gc + static_cast<std::int64_t>(oy) * wd;
                        const double* xrow = xc + static_cast<std::int64_t>(oy + dy) * wd + dx;
                        if (need_x) {
                            double* dxrow = dxc + static_cast<std::int64_t>(oy + dy) * wd + dx;
                            for (int ox = x0; ox < x1; ++ox) {
                                dw += grow[ox] * xrow[ox];
                                dxrow[ox] += grow[ox] * wk;
                            }
                        } else {
                            for (int ox = x0; ox < x1; ++ox) dw += grow[ox] * xrow[ox];
                        }
                    }
                    if (need_w) pw.grad.at(ci, ki, kj) += dw;
                }
        }
    });
}

namespace {
constexpr double kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr double kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }
} // namespace

Var sobel_xy(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3) throw DimensionError("sobel_xy expects [C,H,W]");
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out(std::vector<int>{2 * c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < w; ++ox) {
                double n[3][3];
                for (int ki = 0; ki < 3; ++ki)
                    for (int kj = 0; kj < 3; ++kj)
                        n[ki][kj] = xv.at(ci, clampi(oy + ki - 1, 0, h - 1),
                                          clampi(ox + kj - 1, 0, w - 1));
                // identical grouping on both sides so constants cancel exactly
                double gx = (n[0][2] + 2.0 * n[1][2] + n[2][2]) -
                            (n[0][0] + 2.0 * n[1][0] + n[2][0]);
                double gy = (n[2][0] + 2.0 * n[2][1] + n[2][2]) -
                            (n[0][0] + 2.0 * n[0][1] + n[0][2]);
                out.at(ci, oy, ox) = gx;
                out.at(c + ci, oy, ox) = gy;
            }
    return make_node(std::move(out), {x}, "sobel_xy", [c, h, w](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int oy = 0; oy < h; ++oy)
                for (int ox = 0; ox < w; ++ox) {
                    double ggx = self.grad.at(ci, oy, ox);
                    double ggy = self.grad.at(c + ci, oy, ox);
                    if (ggx == 0.0 && ggy == 0.0) continue;
                    for (int ki = 0; ki < 3; ++ki)
                        for (int kj = 0; kj < 3; ++kj)
                            p.grad.at(ci, clampi(oy + ki - 1, 0, h - 1),
                                      clampi(ox + kj - 1, 0, w - 1)) +=
                                ggx * kSobelX[ki][kj] + ggy * kSobelY[ki][kj];
                }
    });
}

Var hypot_pairs(const Var& g) {
    const Tensor& gv = g->value;
    if (gv.rank() != 3 || gv.dim(0) % 2 != 0) throw DimensionError("hypot_pairs expects [2C,H,W]");
    int c = gv.dim(0) / 2, h = gv.dim(1), w = gv.dim(2);
    Tensor out(std::vector<int>{c, h, w});
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < hw; ++i) {
            double gx = gv[ci * hw + i];
            double gy = gv[(c + ci) * hw + i];
            out[ci * hw + i] = std::sqrt(gx * gx + gy * gy);
        }
    return make_node(std::move(out), {g}, "hypot_pairs", [c, hw](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (std::int64_t i = 0; i < hw; ++i) {
                double m = self.value[ci * hw + i];
                if (m <= 0.0) continue; // subgradient 0 at the kink
                double gr = self.grad[ci * hw + i] / m;
                p.grad[ci * hw + i] += gr * p.value[ci * hw + i];
                p.grad[(c + ci) * hw + i] += gr * p.value[(c + ci) * hw + i];
            }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& x, std::vector<int> dims) {
    Tensor out(dims);
    if (out.size() != x->value.size()) throw DimensionError("reshape: element count mismatch");
    std::copy(x->value.data(), x->value.data() + x->value.size(), out.data());
    return make_node(std::move(out), {x}, "reshape", [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

Var concat_c(const std::vector<Var>& xs) {
    if (xs.empty()) throw DimensionError("concat_c: empty list");
    int h = xs[0]->value.dim(1), w = xs[0]->value.dim(2);
    int ctot = 0;
    for (const auto& v : xs) {
        if (v->value.rank() != 3 || v->value.dim(1) != h || v->value.dim(2) != w)
            throw DimensionError("concat_c: spatial mismatch");
        ctot += v->value.dim(0);
    }
    Tensor out(std::vector<int>{ctot, h, w});
    std::int64_t off = 0;
    for (const auto& v : xs) {
        std::copy(v->value.data(), v->value.data() + v->value.size(), out.data() + off);
        off += v->value.size();
    }
    return make_node(std::move(out), xs, "concat_c", [](Node& self) {
        std::int64_t off = 0;
        for (auto& pv : self.parents) {
            Node& p = *pv;
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::int64_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[off + i];
            }
            off += p.value.size();
        }
    });
}

Var slice_c(const Var& x, int c0, int len) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3 || c0 < 0 || len <= 0 || c0 + len > xv.dim(0))
        throw DimensionError("slice_c: bad channel range");
    int h = xv.dim(1), w = xv.dim(2);
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out(std::vector<int>{len, h, w});
    std::copy(xv.data() + c0 * hw, xv.data() + (c0 + len) * hw, out.data());
    return make_node(std::move(out), {x}, "slice_c", [c0, hw](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) p.grad[c0 * hw + i] += self.grad[i];
    });
}

Var upsample2x(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3) throw DimensionError("upsample2x expects [C,H,W]");
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out(std::vector<int>{c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) out.at(ci, y, xx) = xv.at(ci, y / 2, xx / 2);
    return make_node(std::move(out), {x}, "upsample2x", [c, h, w](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    p.grad.at(ci, y / 2, xx / 2) += self.grad.at(ci, y, xx);
    });
}

namespace {
// token t = (wy*nwx + wx)*win*win + iy*win + ix ; column = channel
void token_index_check(const Tensor& x, int win) {
    if (x.rank() != 3) throw DimensionError("tokens: expects [C,H,W]");
    if (x.dim(1) % win != 0 || x.dim(2) % win != 0)
        throw DimensionError("tokens: H,W must be divisible by window " + std::to_string(win));
}
} // namespace

Var chw_to_tokens(const Var& x, int win) {
    token_index_check(x->value, win);
    const Tensor& xv = x->value;
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    int nwx = w / win;
    int t = h * w;
    Tensor out(std::vector<int>{t, c});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                int tok = ((y / win) * nwx + (xx / win)) * win * win + (y % win) * win + (xx % win);
                out.at(tok, ci) = xv.at(ci, y, xx);
            }
    return make_node(std::move(out), {x}, "chw_to_tokens", [c, h, w, win, nwx](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    int tok =
                        ((y / win) * nwx + (xx / win)) * win * win + (y % win) * win + (xx % win);
                    p.grad.at(ci, y, xx) += self.grad.at(tok, ci);
                }
    });
}

Var tokens_to_chw(const Var& t, int c, int h, int w, int win) {
    const Tensor& tv = t->value;
    if (tv.rank() != 2 || tv.dim(0) != h * w || tv.dim(1) != c)
        throw DimensionError("tokens_to_chw: shape mismatch");
    if (h % win != 0 || w % win != 0) throw DimensionError("tokens_to_chw: window divisibility");
    int nwx = w / win;
    Tensor out(std::vector<int>{c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                int tok = ((y / win) * nwx + (xx / win)) * win * win + (y % win) * win + (xx % win);
                out.at(ci, y, xx) = tv.at(tok, ci);
            }
    return make_node(std::move(out), {t}, "tokens_to_chw", [c, h, w, win, nwx](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    int tok =
                        ((y / win) * nwx + (xx / win)) * win * win + (y % win) * win + (xx % win);
                    p.grad.at(tok, ci) += self.grad.at(ci, y, xx);
                }
    });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Var attention(const Var& q, const Var& k, const Var& v, int heads, int block, Tensor* probs_out) {
    const Tensor& qv = q->value;
    const Tensor& kv = k->value;
    const Tensor& vv = v->value;
    if (qv.rank() != 2 || !qv.same_shape(kv) || !qv.same_shape(vv))
        throw DimensionError("attention: q,k,v must be [T,D] with equal shapes");
    int t = qv.dim(0), d = qv.dim(1);
    if (t % block != 0) throw DimensionError("attention: T not divisible by block");
    if (d % heads != 0) throw DimensionError("attention: D not divisible by heads");
    int nb = t / block, dk = d / heads;
    double scl = 1.0 / std::sqrt(static_cast<double>(dk));

    Tensor out(std::vector<int>{t, d});
    Tensor probs(std::vector<int>{nb * heads * block, block});

    using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
    auto slice = [&](const Tensor& m, int b, int h) {
        return Eigen::Map<const RowMat, 0, StrideT>(
            m.data() + static_cast<std::int64_t>(b) * block * d + h * dk, block, dk, StrideT(d, 1));
    };
    for (int b = 0; b < nb; ++b)
        for (int hh = 0; hh < heads; ++hh) {
            auto Q = slice(qv, b, hh);
            auto K = slice(kv, b, hh);
            auto V = slice(vv, b, hh);
            RowMat S = (Q * K.transpose()) * scl;
            // stable row softmax
            for (int i = 0; i < block; ++i) {
                double mx = S.row(i).maxCoeff();
                for (int j = 0; j < block; ++j) S(i, j) = std::exp(S(i, j) - mx);
                S.row(i) /= S.row(i).sum();
            }
            std::int64_t poff = (static_cast<std::int64_t>(b) * heads + hh) * block * block;
            std::copy(S.data(), S.data() + block * block, probs.data() + poff);
            RowMat O = S * V;
            for (int i = 0; i < block; ++i)
                for (int j = 0; j < dk; ++j)
                    out.at(b * block + i, hh * dk + j) = O(i, j);
        }
    if (probs_out) *probs_out = probs;

    return make_node(std::move(out), {q, k, v}, "attention",
                     [t, d, nb, dk, heads, block, scl, probs = std::move(probs)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        bool nq = pq.requires_grad, nk = pk.requires_grad, nv = pv.requires_grad;
        if (!nq && !nk && !nv) return;
        if (nq) pq.ensure_grad();
        if (nk) pk.ensure_grad();
        if (nv) pv.ensure_grad();
        using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
        auto cslice = [&](const Tensor& m, int b, int h) {
            return Eigen::Map<const RowMat, 0, StrideT>(
                m.data() + static_cast<std::int64_t>(b) * block * d + h * dk, block, dk,
                StrideT(d, 1));
        };
        auto mslice = [&](Tensor& m, int b, int h) {
            return Eigen::Map<RowMat, 0, StrideT>(
                m.data() + static_cast<std::int64_t>(b) * block * d + h * dk, block, dk,
                StrideT(d, 1));
        };
        for (int b = 0; b < nb; ++b)
            for (int hh = 0; hh < heads; ++hh) {
                std::int64_t poff = (static_cast<std::int64_t>(b) * heads + hh) * block * block;
                CMapMat P(probs.data() + poff, block, block);
                auto dO = cslice(self.grad, b, hh);
                auto Q = cslice(pq.value, b, hh);
                auto K = cslice(pk.value, b, hh);
                auto V = cslice(pv.value, b, hh);
                if (nv) mslice(pv.grad, b, hh).noalias() += P.transpose() * dO;
                if (nq || nk) {
                    RowMat dP = dO * V.transpose();
                    RowMat dS(block, block);
                    for (int i = 0; i < block; ++i) {
                        double dot = dP.row(i).dot(P.row(i));
                        for (int j = 0; j < block; ++j)
                            dS(i, j) = P(i, j) * (dP(i, j) - dot);
                    }
                    dS *= scl;
                    if (nq) mslice(pq.grad, b, hh).noalias() += dS * K;
                    if (nk) mslice(pk.grad, b, hh).noalias() += dS.transpose() * Q;
                }
            }
    });
}

} // namespace sgdfuse::ad
