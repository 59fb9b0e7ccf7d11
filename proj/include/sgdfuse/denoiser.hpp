#pragma once

#include <vector>

#include "sgdfuse/diffusion.hpp"
#include "sgdfuse/image.hpp"
#include "sgdfuse/nn.hpp"

namespace sgdfuse {

struct UNetConfig {
    int in_channels = 5;
    int out_channels = 5;
    int depth = 5; // resolution levels in each path
    int base_width = 32;
    int max_width = 256;
    int time_embed_dim = 64;

    void validate() const;
    int width_at(int level) const;
    int spatial_multiple() const { return 1 << (depth - 1); }
};

struct HFAHConfig {
    int tap_levels = 3; // highest-resolution decoder levels feeding the head
    int head_width = 32;

    void validate(const UNetConfig& unet) const;
};

// Raw sinusoidal position code for a timestep; [sin(t*f_i)..., cos(t*f_i)...].
Tensor sinusoidal_embedding(int t, int dim);

class TimeEmbed {
public:
    TimeEmbed(nn::ParamStore& ps, const std::string& prefix, int dim);
    ad::Var forward(int t) const; // [1,dim]

private:
    int dim_;
    nn::Linear l1_, l2_;
};

struct DenoiseOutput {
    ad::Var eps_hat;               // [5,H,W]
    std::vector<ad::Var> taps;     // decoder features, index = level (0 full res)
};

class UNet {
public:
    UNet(nn::ParamStore& ps, const UNetConfig& cfg, int tap_levels);

    DenoiseOutput forward(const ad::Var& i_t, int t) const;

    const UNetConfig& config() const { return cfg_; }
    std::vector<int> tap_widths() const;

private:
    struct ResBlock {
        nn::Conv2d c1, c2;
        nn::Linear tproj;
        nn::Conv2d skip;
        bool has_skip = false;

        ad::Var forward(const ad::Var& x, const ad::Var& temb_row) const;
    };

    ResBlock make_block(nn::ParamStore& ps, const std::string& prefix, int cin, int cout) const;

    UNetConfig cfg_;
    int tap_levels_;
    TimeEmbed time_;
    nn::Conv2d stem_;
    std::vector<ResBlock> enc_;
    std::vector<nn::Conv2d> down_;
    std::vector<ResBlock> dec_;
    std::vector<nn::Conv2d> up_;
    nn::Conv2d head_;
};

// Per-tap spatial attention (channel-mean map -> conv -> sigmoid -> multiply)
// at native resolution, nearest upsampling to full resolution, concatenation,
// then a 3x3 conv stack with Tanh remapped to [0,1].
class Hfah {
public:
    Hfah(nn::ParamStore& ps, const HFAHConfig& cfg, const std::vector<int>& tap_widths);

    // taps[i]: decoder feature at level i (resolution H/2^i); output [3,H,W].
    ad::Var forward(const std::vector<ad::Var>& taps) const;

    const HFAHConfig& config() const { return cfg_; }

private:
    HFAHConfig cfg_;
    std::vector<nn::Conv2d> gates_;
    nn::Conv2d head1_, head2_, head3_;
};

// Forward passes at each timestep in `timesteps` (q_sample noise derived from
// rng_seed), per-level mean of decoder taps across timesteps, then HFAH.
// When no_hfah is set, I_f comes from the x0 estimate of the smallest timestep
// (channels 0..2 remapped to [0,1]).
ad::Var fused_from_timesteps_var(const Tensor& condition, const std::vector<int>& timesteps,
                                 const UNet& unet, const Hfah* hfah, const NoiseSchedule& sched,
                                 std::uint64_t rng_seed, bool no_hfah = false);

FusedImage fused_from_timesteps(const ConditionedSample& condition,
                                const std::vector<int>& timesteps, const UNet& unet,
                                const Hfah* hfah, const NoiseSchedule& sched,
                                std::uint64_t rng_seed, bool no_hfah = false);

} // namespace sgdfuse
