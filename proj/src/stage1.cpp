#include "sgdfuse/stage1.hpp"

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

using ad::Var;

void Stage1Config::validate() const {
    if (msfem.channels < 1 || msfem.repeats < 1) throw ConfigError("msfem: channels/repeats >= 1");
    if (tb.repeats < 1) throw ConfigError("tb: repeats >= 1");
    if (tb.embed_dim % tb.heads != 0) throw ConfigError("tb: embed_dim must divide by heads");
    if (tb.embed_dim != msfem.channels)
        throw ConfigError("stage1: embed_dim must match msfem channels for cross fusion");
    if (tb.window < 1) throw ConfigError("tb: window >= 1");
}

Msfem::Msfem(nn::ParamStore& ps, const std::string& prefix, int c)
    : branch1_(nn::Conv2d::make(ps, prefix + ".branch1", c, c, 1)),
      branch3_(nn::Conv2d::make(ps, prefix + ".branch3", c, c, 3)),
      branch5_(nn::Conv2d::make(ps, prefix + ".branch5", c, c, 5)),
      branch7_(nn::Conv2d::make(ps, prefix + ".branch7", c, c, 7)),
      enh_dw1_(nn::DwConv2d::make(ps, prefix + ".enh_dw1", 3 * c, 3)),
      enh_dw2_(nn::DwConv2d::make(ps, prefix + ".enh_dw2", 3 * c, 3)),
      enh_pw_(nn::Conv2d::make(ps, prefix + ".enh_pw", 3 * c, 3 * c, 1)),
      reduce_(nn::Conv2d::make(ps, prefix + ".reduce", 4 * c, c, 1)) {}

Var Msfem::forward(const Var& x) const {
    Var f1 = branch1_(x);
    Var f2 = branch3_(x);
    Var f3 = branch5_(x);
    Var f4 = branch7_(x);
    ad::check_finite(f4, "msfem branches");
    Var fms = ad::concat_c({f2, f3, f4});
    Var fenh = enh_dw2_(enh_pw_(enh_dw1_(fms)));
    ad::check_finite(fenh, "msfem enhancement");
    Var fcat = ad::concat_c({fenh, f1});
    Var gate = ad::sigmoid(reduce_(fcat));
    ad::check_finite(gate, "msfem gate");
    return ad::add(x, gate);
}

TransformerBlock::TransformerBlock(nn::ParamStore& ps, const std::string& prefix,
                                   const TBConfig& cfg)
    : cfg_(cfg),
      ln1_(nn::LayerNorm::make(ps, prefix + ".ln1", cfg.embed_dim)),
      ln2_(nn::LayerNorm::make(ps, prefix + ".ln2", cfg.embed_dim)),
      q_(nn::Linear::make(ps, prefix + ".q", cfg.embed_dim, cfg.embed_dim)),
      k_(nn::Linear::make(ps, prefix + ".k", cfg.embed_dim, cfg.embed_dim)),
      v_(nn::Linear::make(ps, prefix + ".v", cfg.embed_dim, cfg.embed_dim)),
      proj_(nn::Linear::make(ps, prefix + ".proj", cfg.embed_dim, cfg.embed_dim)),
      fc1_(nn::Linear::make(ps, prefix + ".fc1", cfg.embed_dim,
                            static_cast<int>(cfg.embed_dim * cfg.mlp_ratio))),
      fc2_(nn::Linear::make(ps, prefix + ".fc2",
                            static_cast<int>(cfg.embed_dim * cfg.mlp_ratio), cfg.embed_dim)) {}

Var TransformerBlock::forward(const Var& x_chw, Tensor* probs_out) const {
    const Tensor& xv = x_chw->value;
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    int block = cfg_.window * cfg_.window;
    Var tokens = ad::chw_to_tokens(x_chw, cfg_.window);
    Var n1 = ln1_(tokens);
    Var attn = ad::attention(q_(n1), k_(n1), v_(n1), cfg_.heads, block, probs_out);
    tokens = ad::add(tokens, proj_(attn));
    Var n2 = ln2_(tokens);
    tokens = ad::add(tokens, fc2_(ad::gelu(fc1_(n2))));
    ad::check_finite(tokens, "transformer block");
    return ad::tokens_to_chw(tokens, c, h, w, cfg_.window);
}

CrossFusion::CrossFusion(nn::ParamStore& ps, const std::string& prefix, int c, int heads,
                         int window)
    : heads_(heads),
      window_(window),
      ln_ir_q_(nn::LayerNorm::make(ps, prefix + ".ln_ir_q", c)),
      ln_vis_kv_(nn::LayerNorm::make(ps, prefix + ".ln_vis_kv", c)),
      ln_vis_q_(nn::LayerNorm::make(ps, prefix + ".ln_vis_q", c)),
      ln_ir_kv_(nn::LayerNorm::make(ps, prefix + ".ln_ir_kv", c)),
      ir_q_(nn::Linear::make(ps, prefix + ".ir_q", c, c)),
      vis_k_(nn::Linear::make(ps, prefix + ".vis_k", c, c)),
      vis_v_(nn::Linear::make(ps, prefix + ".vis_v", c, c)),
      proj_ir_(nn::Linear::make(ps, prefix + ".proj_ir", c, c)),
      vis_q_(nn::Linear::make(ps, prefix + ".vis_q", c, c)),
      ir_k_(nn::Linear::make(ps, prefix + ".ir_k", c, c)),
      ir_v_(nn::Linear::make(ps, prefix + ".ir_v", c, c)),
      proj_vis_(nn::Linear::make(ps, prefix + ".proj_vis", c, c)),
      head1_(nn::Conv2d::make(ps, prefix + ".head1", 2 * c, c, 3)),
      head2_(nn::Conv2d::make(ps, prefix + ".head2", c, 3, 3)) {}

Var CrossFusion::forward(const Var& f_ir, const Var& f_vis, CrossFusionTrace* trace) const {
    const Tensor& iv = f_ir->value;
    const Tensor& vv = f_vis->value;
    if (iv.dim(1) != vv.dim(1) || iv.dim(2) != vv.dim(2))
        throw DimensionError("cross fusion: spatial mismatch " + iv.shape_str() + " vs " +
                             vv.shape_str());
    int c = iv.dim(0), h = iv.dim(1), w = iv.dim(2);
    int block = window_ * window_;

    Var ti = ad::chw_to_tokens(f_ir, window_);
    Var tv = ad::chw_to_tokens(f_vis, window_);

    // IR attends to VIS content
    Var a = ad::add(ti, proj_ir_(ad::attention(ir_q_(ln_ir_q_(ti)), vis_k_(ln_vis_kv_(tv)),
                                               vis_v_(ln_vis_kv_(tv)), heads_, block)));
    // VIS attends to IR content
    Var b = ad::add(tv, proj_vis_(ad::attention(vis_q_(ln_vis_q_(tv)), ir_k_(ln_ir_kv_(ti)),
                                                ir_v_(ln_ir_kv_(ti)), heads_, block)));
    if (trace) {
        trace->path_ir = a->value;
        trace->path_vis = b->value;
    }
    Var cat = ad::concat_c({ad::tokens_to_chw(a, c, h, w, window_),
                            ad::tokens_to_chw(b, c, h, w, window_)});
    Var out = ad::sigmoid(head2_(ad::silu(head1_(cat))));
    ad::check_finite(out, "cross fusion head");
    return out;
}

Stage1Net::Stage1Net(nn::ParamStore& ps, const Stage1Config& cfg) : cfg_(cfg) {
    cfg_.validate();
    int c = cfg_.msfem.channels;
    stem_ir_ = nn::Conv2d::make(ps, "stage1.stem_ir", 1, c, 3);
    stem_vis_ = nn::Conv2d::make(ps, "stage1.stem_vis", 3, c, 3);
    for (int r = 0; r < cfg_.msfem.repeats; ++r)
        msfem_.emplace_back(ps, "stage1.msfem" + std::to_string(r), c);
    for (int r = 0; r < cfg_.tb.repeats; ++r)
        tb_.emplace_back(ps, "stage1.tb" + std::to_string(r), cfg_.tb);
    fuse_.emplace(ps, "stage1.fuse", c, cfg_.tb.heads, cfg_.tb.window);
}

Var Stage1Net::forward_var(const Var& ir, const Var& vis, CrossFusionTrace* trace) const {
    if (ir->value.dim(1) % cfg_.tb.window != 0 || ir->value.dim(2) % cfg_.tb.window != 0)
        throw DimensionError("stage1: input size must be divisible by the attention window");
    Var fi = stem_ir_(ir);
    for (const auto& m : msfem_) fi = m.forward(fi);
    Var fv = stem_vis_(vis);
    for (const auto& t : tb_) fv = t.forward(fv);
    return fuse_->forward(fi, fv, trace);
}

FusedImage Stage1Net::forward(const ImagePair& pair) const {
    ad::NoGradScope ng;
    Var out = forward_var(ad::constant(pair.ir.data), ad::constant(pair.vis.data));
    return FusedImage(out->value, FusionStage::Preliminary);
}

} // namespace sgdfuse
