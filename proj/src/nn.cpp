#include "sgdfuse/nn.hpp"

#include <cmath>

#include "sgdfuse/errors.hpp"

namespace sgdfuse::nn {

ad::Var ParamStore::create(const std::string& name, const std::vector<int>& dims, Init init,
                           int fan_in) {
    auto it = params_.find(name);
    if (it != params_.end()) {
        if (it->second->value.dims() != dims)
            throw ConfigError("parameter '" + name + "' recreated with different shape");
        return it->second;
    }
    Tensor t(dims);
    switch (init) {
        case Init::Zeros:
            break;
        case Init::Ones:
            t.fill(1.0);
            break;
        case Init::FanIn: {
            if (fan_in <= 0) throw ConfigError("fan_in required for parameter '" + name + "'");
            double limit = std::sqrt(1.0 / fan_in);
            Rng rng = Rng(init_seed_).derive("param:" + name);
            rng.fill_uniform(t, -limit, limit);
            break;
        }
    }
    auto v = ad::make_param(std::move(t));
    params_.emplace(name, v);
    return v;
}

std::vector<ad::Var> ParamStore::vars() const {
    std::vector<ad::Var> out;
    out.reserve(params_.size());
    for (const auto& [_, v] : params_) out.push_back(v);
    return out;
}

std::int64_t ParamStore::scalar_count() const {
    std::int64_t n = 0;
    for (const auto& [_, v] : params_) n += v->value.size();
    return n;
}

void ParamStore::zero_grad() const { ad::zero_grad(vars()); }

ad::Var ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

Conv2d Conv2d::make(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride,
                    Init init) {
    Conv2d c;
    c.stride = stride;
    int fan_in = cin * k * k;
    c.w = ps.create(name + ".weight", {cout, cin, k, k}, init, fan_in);
    c.b = ps.create(name + ".bias", {cout}, init == Init::FanIn ? Init::FanIn : Init::Zeros,
                    fan_in);
    return c;
}

DwConv2d DwConv2d::make(ParamStore& ps, const std::string& name, int c, int k) {
    DwConv2d d;
    int fan_in = k * k;
    d.w = ps.create(name + ".weight", {c, k, k}, Init::FanIn, fan_in);
    d.b = ps.create(name + ".bias", {c}, Init::FanIn, fan_in);
    return d;
}

Linear Linear::make(ParamStore& ps, const std::string& name, int in, int out, Init init) {
    Linear l;
    l.w = ps.create(name + ".weight", {out, in}, init, in);
    l.b = ps.create(name + ".bias", {out}, init == Init::FanIn ? Init::FanIn : Init::Zeros, in);
    return l;
}

LayerNorm LayerNorm::make(ParamStore& ps, const std::string& name, int dim) {
    LayerNorm n;
    n.gamma = ps.create(name + ".gamma", {dim}, Init::Ones);
    n.beta = ps.create(name + ".beta", {dim}, Init::Zeros);
    return n;
}

void Adam::step(const ParamStore& ps) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, p] : ps.all()) {
        if (!p->grad_alloc) continue; // parameter unused this step
        Tensor& m = m_.try_emplace(name, Tensor(p->value.dims(), 0.0)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor(p->value.dims(), 0.0)).first->second;
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            double g = p->grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

} // namespace sgdfuse::nn
