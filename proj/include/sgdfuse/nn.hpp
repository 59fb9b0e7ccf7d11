#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sgdfuse/autodiff.hpp"
#include "sgdfuse/rng.hpp"

namespace sgdfuse::nn {

enum class Init { FanIn, Zeros, Ones };

// Registry of named parameters. Initialization draws from an RNG derived from
// (init_seed, parameter name) so values do not depend on construction order.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

    ad::Var create(const std::string& name, const std::vector<int>& dims, Init init,
                   int fan_in = 0);

    const std::map<std::string, ad::Var>& all() const { return params_; }
    std::vector<ad::Var> vars() const;
    std::int64_t scalar_count() const;
    void zero_grad() const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    ad::Var at(const std::string& name) const;

private:
    std::uint64_t init_seed_;
    std::map<std::string, ad::Var> params_;
};

struct Conv2d {
    ad::Var w, b;
    int stride = 1;

    static Conv2d make(ParamStore& ps, const std::string& name, int cin, int cout, int k,
                       int stride = 1, Init init = Init::FanIn);
    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b, stride); }
};

struct DwConv2d {
    ad::Var w, b;

    static DwConv2d make(ParamStore& ps, const std::string& name, int c, int k);
    ad::Var operator()(const ad::Var& x) const { return ad::dwconv2d(x, w, b); }
};

struct Linear {
    ad::Var w, b;

    static Linear make(ParamStore& ps, const std::string& name, int in, int out,
                       Init init = Init::FanIn);
    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, w, b); }
};

struct LayerNorm {
    ad::Var gamma, beta;

    static LayerNorm make(ParamStore& ps, const std::string& name, int dim);
    ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

// Adam with bias correction; update order is the store's (sorted) name order.
class Adam {
public:
    Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const ParamStore& ps);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::int64_t t() const { return t_; }

    // checkpoint access
    std::map<std::string, Tensor>& moment1() { return m_; }
    std::map<std::string, Tensor>& moment2() { return v_; }
    void set_t(std::int64_t t) { t_ = t; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

} // namespace sgdfuse::nn
