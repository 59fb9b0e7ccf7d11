#include "sgdfuse/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

using ad::Var;

void UNetConfig::validate() const {
    if (in_channels != 5 || out_channels != 5)
        throw ConfigError("unet: conditioned samples are five-channel");
    if (depth < 2) throw ConfigError("unet: depth >= 2");
    if (base_width < 1 || max_width < base_width) throw ConfigError("unet: bad widths");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ConfigError("unet: time_embed_dim must be even and >= 2");
}

int UNetConfig::width_at(int level) const {
    long long w = static_cast<long long>(base_width) << level;
    return static_cast<int>(std::min<long long>(w, max_width));
}

void HFAHConfig::validate(const UNetConfig& unet) const {
    if (tap_levels < 2) throw ConfigError("hfah: at least 2 tap levels");
    if (tap_levels > unet.depth) throw ConfigError("hfah: more taps than decoder levels");
    if (head_width < 1) throw ConfigError("hfah: head_width >= 1");
}

Tensor sinusoidal_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal embedding: dim must be even");
    int half = dim / 2;
    Tensor out(std::vector<int>{1, dim});
    for (int i = 0; i < half; ++i) {
        double denom = (half > 1) ? static_cast<double>(half - 1) : 1.0;
        double freq = std::exp(-std::log(10000.0) * i / denom);
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

TimeEmbed::TimeEmbed(nn::ParamStore& ps, const std::string& prefix, int dim)
    : dim_(dim),
      l1_(nn::Linear::make(ps, prefix + ".l1", dim, dim)),
      l2_(nn::Linear::make(ps, prefix + ".l2", dim, dim)) {}

Var TimeEmbed::forward(int t) const {
    Var raw = ad::constant(sinusoidal_embedding(t, dim_));
    return l2_(ad::silu(l1_(raw)));
}

Var UNet::ResBlock::forward(const Var& x, const Var& temb_row) const {
    Var h = c1(x);
    int cout = h->value.dim(0);
    Var tb = ad::reshape(tproj(temb_row), {cout});
    h = ad::silu(ad::bias_chw(h, tb));
    h = c2(h);
    Var s = has_skip ? skip(x) : x;
    return ad::add(h, s);
}

UNet::ResBlock UNet::make_block(nn::ParamStore& ps, const std::string& prefix, int cin,
                                int cout) const {
    ResBlock b;
    b.c1 = nn::Conv2d::make(ps, prefix + ".c1", cin, cout, 3);
    b.c2 = nn::Conv2d::make(ps, prefix + ".c2", cout, cout, 3);
    b.tproj = nn::Linear::make(ps, prefix + ".tproj", cfg_.time_embed_dim, cout);
    if (cin != cout) {
        b.skip = nn::Conv2d::make(ps, prefix + ".skip", cin, cout, 1);
        b.has_skip = true;
    }
    return b;
}

UNet::UNet(nn::ParamStore& ps, const UNetConfig& cfg, int tap_levels)
    : cfg_(cfg), tap_levels_(tap_levels), time_(ps, "unet.time", cfg.time_embed_dim) {
    cfg_.validate();
    int d = cfg_.depth;
    stem_ = nn::Conv2d::make(ps, "unet.stem", cfg_.in_channels, cfg_.width_at(0), 3);
    for (int i = 0; i < d; ++i) {
        int w = cfg_.width_at(i);
        enc_.push_back(make_block(ps, "unet.enc" + std::to_string(i), w, w));
        if (i + 1 < d)
            down_.push_back(
                nn::Conv2d::make(ps, "unet.down" + std::to_string(i), w, cfg_.width_at(i + 1), 3,
                                 /*stride=*/2));
    }
    // decoder: bottom block at level d-1, then upsample+concat blocks up to level 0
    dec_.resize(d);
    up_.resize(d > 1 ? d - 1 : 0);
    dec_[d - 1] = make_block(ps, "unet.dec" + std::to_string(d - 1), cfg_.width_at(d - 1),
                             cfg_.width_at(d - 1));
    for (int i = d - 2; i >= 0; --i) {
        up_[i] = nn::Conv2d::make(ps, "unet.up" + std::to_string(i), cfg_.width_at(i + 1),
                                  cfg_.width_at(i), 3);
        dec_[i] = make_block(ps, "unet.dec" + std::to_string(i), 2 * cfg_.width_at(i),
                             cfg_.width_at(i));
    }
    head_ = nn::Conv2d::make(ps, "unet.head", cfg_.width_at(0), cfg_.out_channels, 3, 1,
                             nn::Init::Zeros);
}

std::vector<int> UNet::tap_widths() const {
    std::vector<int> out;
    for (int i = 0; i < tap_levels_; ++i) out.push_back(cfg_.width_at(i));
    return out;
}

DenoiseOutput UNet::forward(const Var& i_t, int t) const {
    const Tensor& x = i_t->value;
    if (x.rank() != 3 || x.dim(0) != cfg_.in_channels)
        throw DimensionError("unet: want [" + std::to_string(cfg_.in_channels) + ",H,W], got " +
                             x.shape_str());
    int mult = cfg_.spatial_multiple();
    if (x.dim(1) % mult != 0 || x.dim(2) % mult != 0)
        throw DimensionError("unet: H,W must be divisible by " + std::to_string(mult));

    Var temb = time_.forward(t);
    int d = cfg_.depth;
    std::vector<Var> skips(d);
    Var h = stem_(i_t);
    for (int i = 0; i < d; ++i) {
        h = enc_[i].forward(h, temb);
        skips[i] = h;
        if (i + 1 < d) h = down_[i](h);
    }
    std::vector<Var> taps(tap_levels_);
    h = dec_[d - 1].forward(skips[d - 1], temb);
    if (d - 1 < tap_levels_) taps[d - 1] = h;
    for (int i = d - 2; i >= 0; --i) {
        h = up_[i](ad::upsample2x(h));
        h = dec_[i].forward(ad::concat_c({h, skips[i]}), temb);
        if (i < tap_levels_) taps[i] = h;
    }
    ad::check_finite(h, "unet decoder");
    DenoiseOutput out;
    out.eps_hat = head_(h);
    out.taps = std::move(taps);
    return out;
}

Hfah::Hfah(nn::ParamStore& ps, const HFAHConfig& cfg, const std::vector<int>& tap_widths)
    : cfg_(cfg) {
    if (static_cast<int>(tap_widths.size()) != cfg.tap_levels)
        throw ConfigError("hfah: tap width list does not match tap_levels");
    int total = 0;
    for (int i = 0; i < cfg.tap_levels; ++i) {
        gates_.push_back(nn::Conv2d::make(ps, "hfah.gate" + std::to_string(i), 1, 1, 3));
        total += tap_widths[static_cast<std::size_t>(i)];
    }
    head1_ = nn::Conv2d::make(ps, "hfah.head1", total, cfg.head_width, 3);
    head2_ = nn::Conv2d::make(ps, "hfah.head2", cfg.head_width, cfg.head_width, 3);
    head3_ = nn::Conv2d::make(ps, "hfah.head3", cfg.head_width, 3, 3);
}

Var Hfah::forward(const std::vector<Var>& taps) const {
    if (static_cast<int>(taps.size()) < 2) throw ConfigError("hfah: needs at least 2 tap levels");
    if (static_cast<int>(taps.size()) != cfg_.tap_levels)
        throw ConfigError("hfah: expected " + std::to_string(cfg_.tap_levels) + " taps, got " +
                          std::to_string(taps.size()));
    std::vector<Var> up;
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (!taps[i]) throw ConfigError("hfah: missing tap at level " + std::to_string(i));
        Var gate = ad::sigmoid(gates_[i](ad::mean_c(taps[i])));
        Var g = ad::mul_bcast_c(gate, taps[i]);
        for (std::size_t lvl = 0; lvl < i; ++lvl) g = ad::upsample2x(g);
        up.push_back(g);
    }
    Var cat = ad::concat_c(up);
    Var out = ad::tanh_(head3_(ad::silu(head2_(ad::silu(head1_(cat))))));
    // Tanh range [-1,1] remapped to the unit image range
    return ad::add_scalar(ad::scale(out, 0.5), 0.5);
}

Var fused_from_timesteps_var(const Tensor& condition, const std::vector<int>& timesteps,
                             const UNet& unet, const Hfah* hfah, const NoiseSchedule& sched,
                             std::uint64_t rng_seed, bool no_hfah) {
    if (timesteps.empty()) throw ConfigError("fused_from_timesteps: empty timestep set");
    std::vector<int> ts = timesteps;
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    for (int t : ts) sched.check_t(t);

    Rng base(rng_seed);
    int n_levels = no_hfah ? 0 : static_cast<int>(unet.tap_widths().size());
    std::vector<std::vector<Var>> by_level(static_cast<std::size_t>(std::max(n_levels, 0)));
    Var x0_first; // x0 estimate at the smallest timestep (no_hfah path)

    for (int t : ts) {
        Rng noise_rng = base.derive("fft_eps", static_cast<std::uint64_t>(t));
        Tensor eps(condition.dims());
        noise_rng.fill_normal(eps);
        Tensor i_t = q_sample(condition, t, eps, sched);
        DenoiseOutput out = unet.forward(ad::constant(i_t), t);
        if (no_hfah) {
            if (!x0_first) {
                double ab = sched.alpha_bar_at(t);
                // x0_hat = (I_t - sqrt(1-ab) eps_hat) / sqrt(ab)
                Var scaled = ad::scale(out.eps_hat, std::sqrt(1.0 - ab));
                Var x0 = ad::scale(ad::sub(ad::constant(i_t), scaled), 1.0 / std::sqrt(ab));
                x0_first = x0;
            }
        } else {
            for (int lvl = 0; lvl < n_levels; ++lvl)
                by_level[static_cast<std::size_t>(lvl)].push_back(out.taps[static_cast<std::size_t>(lvl)]);
        }
    }

    if (no_hfah) {
        Var rgb = ad::slice_c(x0_first, 0, 3);
        return ad::add_scalar(ad::scale(rgb, 0.5), 0.5);
    }

    if (!hfah) throw ConfigError("fused_from_timesteps: HFAH head missing");
    std::vector<Var> merged;
    for (auto& vars : by_level) {
        Var acc = vars[0];
        for (std::size_t i = 1; i < vars.size(); ++i) acc = ad::add(acc, vars[i]);
        merged.push_back(ad::scale(acc, 1.0 / static_cast<double>(vars.size())));
    }
    return hfah->forward(merged);
}

FusedImage fused_from_timesteps(const ConditionedSample& condition,
                                const std::vector<int>& timesteps, const UNet& unet,
                                const Hfah* hfah, const NoiseSchedule& sched,
                                std::uint64_t rng_seed, bool no_hfah) {
    ad::NoGradScope ng;
    Var out =
        fused_from_timesteps_var(condition.data, timesteps, unet, hfah, sched, rng_seed, no_hfah);
    Tensor t = out->value;
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
    return FusedImage(std::move(t), FusionStage::Final);
}

} // namespace sgdfuse
