#pragma once

#include <optional>
#include <vector>

#include "sgdfuse/image.hpp"
#include "sgdfuse/nn.hpp"

namespace sgdfuse {

struct MSFEMConfig {
    int channels = 16;
    int repeats = 3; // stacking three performs best in ablation
};

struct TBConfig {
    int embed_dim = 16;
    int heads = 4;
    double mlp_ratio = 2.0;
    int repeats = 3;
    int window = 8; // windowed self-attention keeps token counts bounded
};

struct Stage1Config {
    MSFEMConfig msfem;
    TBConfig tb;

    void validate() const;
};

// Parallel 1/3/5/7 conv branches, depthwise enhancement of the large-scale
// concat, sigmoid-gated 1x1 reduction, residual add.
class Msfem {
public:
    Msfem(nn::ParamStore& ps, const std::string& prefix, int channels);
    ad::Var forward(const ad::Var& x) const;

private:
    nn::Conv2d branch1_, branch3_, branch5_, branch7_;
    nn::DwConv2d enh_dw1_, enh_dw2_;
    nn::Conv2d enh_pw_;
    nn::Conv2d reduce_;
};

// Pre-norm transformer block over window tokens: MHSA + MLP, both residual.
class TransformerBlock {
public:
    TransformerBlock(nn::ParamStore& ps, const std::string& prefix, const TBConfig& cfg);
    // probs_out, when set, receives attention rows [win_tokens x win_tokens] stacked.
    ad::Var forward(const ad::Var& x_chw, Tensor* probs_out = nullptr) const;

private:
    TBConfig cfg_;
    nn::LayerNorm ln1_, ln2_;
    nn::Linear q_, k_, v_, proj_;
    nn::Linear fc1_, fc2_;
};

struct CrossFusionTrace {
    Tensor path_ir;  // IR tokens after cross-attention, [T,C]
    Tensor path_vis; // VIS tokens after cross-attention, [T,C]
};

// Bidirectional window cross-attention (IR queries VIS and vice versa),
// concatenation, then a two-conv head with sigmoid producing F1 in [0,1].
class CrossFusion {
public:
    CrossFusion(nn::ParamStore& ps, const std::string& prefix, int channels, int heads,
                int window);
    ad::Var forward(const ad::Var& f_ir, const ad::Var& f_vis,
                    CrossFusionTrace* trace = nullptr) const;

private:
    int heads_, window_;
    nn::LayerNorm ln_ir_q_, ln_vis_kv_, ln_vis_q_, ln_ir_kv_;
    nn::Linear ir_q_, vis_k_, vis_v_, proj_ir_;
    nn::Linear vis_q_, ir_k_, ir_v_, proj_vis_;
    nn::Conv2d head1_, head2_;
};

class Stage1Net {
public:
    Stage1Net(nn::ParamStore& ps, const Stage1Config& cfg);

    // Autodiff path; inputs are [1,H,W] and [3,H,W] unit-range tensors.
    ad::Var forward_var(const ad::Var& ir, const ad::Var& vis,
                        CrossFusionTrace* trace = nullptr) const;

    // Inference path (no graph retained).
    FusedImage forward(const ImagePair& pair) const;

    const Stage1Config& config() const { return cfg_; }
    int spatial_multiple() const { return cfg_.tb.window; }

private:
    Stage1Config cfg_;
    nn::Conv2d stem_ir_, stem_vis_;
    std::vector<Msfem> msfem_;
    std::vector<TransformerBlock> tb_;
    std::optional<CrossFusion> fuse_;
};

} // namespace sgdfuse
