#include "sgdfuse/losses.hpp"

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

using ad::Var;

Tensor grad_operator(const Tensor& img) {
    ad::NoGradScope ng;
    return ad::hypot_pairs(ad::sobel_xy(ad::constant(img)))->value;
}

Var grad_mag_var(const Var& img) { return ad::hypot_pairs(ad::sobel_xy(img)); }

Var stage1_loss_var(const Var& f1, const ImagePair& pair) {
    const Tensor& f = f1->value;
    if (f.rank() != 3 || f.dim(0) != 3 || f.dim(1) != pair.height() || f.dim(2) != pair.width())
        throw DimensionError("stage1 loss: F1 " + f.shape_str() + " does not match pair");
    Var ir3 = ad::constant(broadcast_ir3(pair.ir));
    Var grad_vis = ad::constant(grad_operator(pair.vis.data));
    Var l_int = ad::mean_all(ad::abs_(ad::sub(f1, ir3)));
    Var l_grad = ad::mean_all(ad::abs_(ad::sub(grad_mag_var(f1), grad_vis)));
    return ad::add(l_int, l_grad);
}

Tensor joint_mask(const MaskPair& masks) {
    Tensor out = masks.m_ir.data;
    const Tensor& mv = masks.m_vis.data;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], mv[i]);
    return out;
}

namespace {

// max(I_ir broadcast, I_vis) per channel, the Stage-II intensity target
Tensor intensity_target(const ImagePair& pair) {
    Tensor t = broadcast_ir3(pair.ir);
    const Tensor& v = pair.vis.data;
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std::max(t[i], v[i]);
    return t;
}

// max(grad(I_ir), grad(I_vis)) per channel on gradient magnitudes
Tensor gradient_target(const ImagePair& pair) {
    Tensor gi = grad_operator(broadcast_ir3(pair.ir));
    Tensor gv = grad_operator(pair.vis.data);
    for (std::int64_t i = 0; i < gi.size(); ++i) gi[i] = std::max(gi[i], gv[i]);
    return gi;
}

void check_if_shape(const Var& i_f, const ImagePair& pair, const Tensor& joint) {
    const Tensor& f = i_f->value;
    if (f.rank() != 3 || f.dim(0) != 3 || f.dim(1) != pair.height() || f.dim(2) != pair.width())
        throw DimensionError("mask loss: fused " + f.shape_str() + " does not match pair");
    if (joint.rank() != 3 || joint.dim(0) != 1 || joint.dim(1) != pair.height() ||
        joint.dim(2) != pair.width())
        throw DimensionError("mask loss: joint mask shape " + joint.shape_str());
}

} // namespace

Var mask_int_loss_var(const Var& i_f, const ImagePair& pair, const Tensor& joint) {
    check_if_shape(i_f, pair, joint);
    Var target = ad::constant(intensity_target(pair));
    Var resid = ad::abs_(ad::sub(i_f, target));
    return ad::mean_all(ad::mul_bcast_c(ad::constant(joint), resid));
}

Var mask_grad_loss_var(const Var& i_f, const ImagePair& pair, const Tensor& joint) {
    check_if_shape(i_f, pair, joint);
    Var target = ad::constant(gradient_target(pair));
    Var resid = ad::abs_(ad::sub(grad_mag_var(i_f), target));
    return ad::mean_all(ad::mul_bcast_c(ad::constant(joint), resid));
}

Var stage2_loss_var(const Var& i_f, const ImagePair& pair, const MaskPair& masks,
                    const LossWeights& weights) {
    if (weights.lambda1 < 0.0 || weights.lambda2 < 0.0)
        throw ConfigError("loss weights must be non-negative");
    Tensor joint = joint_mask(masks);
    Var li = mask_int_loss_var(i_f, pair, joint);
    Var lg = mask_grad_loss_var(i_f, pair, joint);
    return ad::add(ad::scale(li, weights.lambda1), ad::scale(lg, weights.lambda2));
}

Var mse_var(const Var& pred, const Tensor& target) {
    require_same_shape(pred->value, target, "mse");
    return ad::mean_all(ad::square(ad::sub(pred, ad::constant(target))));
}

LossParts stage1_loss(const FusedImage& f1, const ImagePair& pair) {
    ad::NoGradScope ng;
    Var f = ad::constant(f1.data);
    Var ir3 = ad::constant(broadcast_ir3(pair.ir));
    Var grad_vis = ad::constant(grad_operator(pair.vis.data));
    double li = ad::mean_all(ad::abs_(ad::sub(f, ir3)))->value[0];
    double lg = ad::mean_all(ad::abs_(ad::sub(grad_mag_var(f), grad_vis)))->value[0];
    return LossParts{li + lg, li, lg};
}

double mask_int_loss(const FusedImage& i_f, const ImagePair& pair, const Tensor& joint) {
    ad::NoGradScope ng;
    return mask_int_loss_var(ad::constant(i_f.data), pair, joint)->value[0];
}

double mask_grad_loss(const FusedImage& i_f, const ImagePair& pair, const Tensor& joint) {
    ad::NoGradScope ng;
    return mask_grad_loss_var(ad::constant(i_f.data), pair, joint)->value[0];
}

LossParts stage2_loss(const FusedImage& i_f, const ImagePair& pair, const MaskPair& masks,
                      const LossWeights& weights) {
    if (weights.lambda1 < 0.0 || weights.lambda2 < 0.0)
        throw ConfigError("loss weights must be non-negative");
    Tensor joint = joint_mask(masks);
    double li = mask_int_loss(i_f, pair, joint);
    double lg = mask_grad_loss(i_f, pair, joint);
    return LossParts{weights.lambda1 * li + weights.lambda2 * lg, li, lg};
}

double diffusion_loss(const Tensor& eps_true, const Tensor& eps_hat) {
    require_same_shape(eps_true, eps_hat, "diffusion loss");
    double s = 0.0;
    for (std::int64_t i = 0; i < eps_true.size(); ++i) {
        double d = eps_hat[i] - eps_true[i];
        s += d * d;
    }
    return s / static_cast<double>(eps_true.size());
}

} // namespace sgdfuse
