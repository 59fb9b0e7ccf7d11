#pragma once

#include "sgdfuse/autodiff.hpp"
#include "sgdfuse/image.hpp"

namespace sgdfuse {

struct LossWeights {
    double lambda1 = 1.5; // mask-guided intensity
    double lambda2 = 1.0; // mask-guided gradient
};

struct LossParts {
    double total = 0.0;
    double intensity = 0.0;
    double gradient = 0.0;
};

// Sobel 3x3 gradient magnitude per channel, replicate padding at borders.
Tensor grad_operator(const Tensor& img);

// Autodiff path used by the trainers. All reductions are means over C*H*W.
ad::Var grad_mag_var(const ad::Var& img);
ad::Var stage1_loss_var(const ad::Var& f1, const ImagePair& pair);
ad::Var mask_int_loss_var(const ad::Var& i_f, const ImagePair& pair, const Tensor& joint);
ad::Var mask_grad_loss_var(const ad::Var& i_f, const ImagePair& pair, const Tensor& joint);
ad::Var stage2_loss_var(const ad::Var& i_f, const ImagePair& pair, const MaskPair& masks,
                        const LossWeights& weights);
// mean squared error over all elements
ad::Var mse_var(const ad::Var& pred, const Tensor& target);

// Value-level API mirroring the training objectives.
LossParts stage1_loss(const FusedImage& f1, const ImagePair& pair);
Tensor joint_mask(const MaskPair& masks); // elementwise max, [1,H,W]
double mask_int_loss(const FusedImage& i_f, const ImagePair& pair, const Tensor& joint);
double mask_grad_loss(const FusedImage& i_f, const ImagePair& pair, const Tensor& joint);
LossParts stage2_loss(const FusedImage& i_f, const ImagePair& pair, const MaskPair& masks,
                      const LossWeights& weights);
double diffusion_loss(const Tensor& eps_true, const Tensor& eps_hat);

} // namespace sgdfuse
