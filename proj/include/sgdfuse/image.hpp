#pragma once

#include <string>

#include "sgdfuse/tensor.hpp"

namespace sgdfuse {

enum class ValueRange { Unit, Signed }; // [0,1] or [-1,1]

// H*W*C raster, stored planar [C,H,W]. C is 1 or 3, H/W at least 8, all values
// finite and inside the declared range.
struct Image {
    Tensor data;
    ValueRange range = ValueRange::Unit;

    Image() = default;
    Image(Tensor t, ValueRange r);

    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

Image normalize(const Image& img, ValueRange target);

struct ImagePair {
    Image ir;  // C=1
    Image vis; // C=3
    std::string id;

    ImagePair() = default;
    ImagePair(Image ir_, Image vis_, std::string id_);

    int height() const { return ir.height(); }
    int width() const { return ir.width(); }
};

enum class MaskProvenance { File, Synthetic, Remote, RandomPatch };

const char* to_string(MaskProvenance p);

struct MaskPair {
    Image m_ir;  // C=1, unit range
    Image m_vis; // C=1, unit range
    MaskProvenance provenance = MaskProvenance::File;

    MaskPair() = default;
    MaskPair(Image ir_mask, Image vis_mask, MaskProvenance prov);

    int height() const { return m_ir.height(); }
    int width() const { return m_ir.width(); }
};

enum class FusionStage { Preliminary, Final };

struct FusedImage {
    Tensor data; // [3,H,W], unit range
    FusionStage stage = FusionStage::Preliminary;

    FusedImage() = default;
    FusedImage(Tensor t, FusionStage s);

    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

// Five-channel diffusion input: [F1.r, F1.g, F1.b, M_ir, M_vis].
// Image channels live in [-1,1], mask channels in [0,1].
struct ConditionedSample {
    Tensor data; // [5,H,W]

    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

ConditionedSample to_conditioned_sample(const FusedImage& f1, const MaskPair& masks);

// Inverse of to_conditioned_sample; exact up to the affine range maps.
void split_conditioned(const ConditionedSample& cs, FusedImage& f1_out, MaskPair& masks_out);

// IR (1 channel) replicated to 3 channels, as used inside loss terms.
Tensor broadcast_ir3(const Image& ir);

// ITU-R BT.601 luminance of an RGB tensor [3,H,W] -> [1,H,W].
Tensor luma_bt601(const Tensor& rgb);

} // namespace sgdfuse
