#include "sgdfuse/image.hpp"

#include <algorithm>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

namespace {

void check_range(const Tensor& t, ValueRange r, const char* what) {
    if (!t.all_finite()) throw ValueError(std::string(what) + ": non-finite values");
    double lo = (r == ValueRange::Unit) ? 0.0 : -1.0;
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (t[i] < lo || t[i] > 1.0)
            throw ValueError(std::string(what) + ": value " + std::to_string(t[i]) +
                             " outside declared range");
}

} // namespace

Image::Image(Tensor t, ValueRange r) : data(std::move(t)), range(r) {
    if (data.rank() != 3) throw DimensionError("image: want [C,H,W]");
    int c = data.dim(0);
    if (c != 1 && c != 3) throw DimensionError("image: channels must be 1 or 3");
    if (data.dim(1) < 8 || data.dim(2) < 8) throw DimensionError("image: H and W must be >= 8");
    check_range(data, range, "image");
}

Image normalize(const Image& img, ValueRange target) {
    if (img.range == target) return img;
    Tensor t = img.data;
    if (target == ValueRange::Signed) {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 2.0 * t[i] - 1.0;
    } else {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = (t[i] + 1.0) * 0.5;
    }
    return Image(std::move(t), target);
}

ImagePair::ImagePair(Image ir_, Image vis_, std::string id_)
    : ir(std::move(ir_)), vis(std::move(vis_)), id(std::move(id_)) {
    if (ir.channels() != 1) throw DimensionError("pair: ir must be single-channel");
    if (vis.channels() != 3) throw DimensionError("pair: vis must be 3-channel");
    if (ir.height() != vis.height() || ir.width() != vis.width())
        throw DimensionError("pair '" + id + "': ir and vis sizes differ");
    if (id.empty()) throw ValueError("pair: empty id");
}

const char* to_string(MaskProvenance p) {
    switch (p) {
        case MaskProvenance::File: return "file";
        case MaskProvenance::Synthetic: return "synthetic";
        case MaskProvenance::Remote: return "remote";
        case MaskProvenance::RandomPatch: return "random_patch";
    }
    return "?";
}

MaskPair::MaskPair(Image ir_mask, Image vis_mask, MaskProvenance prov)
    : m_ir(std::move(ir_mask)), m_vis(std::move(vis_mask)), provenance(prov) {
    if (m_ir.channels() != 1 || m_vis.channels() != 1)
        throw DimensionError("masks must be single-channel");
    if (m_ir.range != ValueRange::Unit || m_vis.range != ValueRange::Unit)
        throw ValueError("masks must be in [0,1]");
    if (m_ir.height() != m_vis.height() || m_ir.width() != m_vis.width())
        throw DimensionError("mask pair sizes differ");
}

FusedImage::FusedImage(Tensor t, FusionStage s) : data(std::move(t)), stage(s) {
    if (data.rank() != 3 || data.dim(0) != 3) throw DimensionError("fused image: want [3,H,W]");
    check_range(data, ValueRange::Unit, "fused image");
}

ConditionedSample to_conditioned_sample(const FusedImage& f1, const MaskPair& masks) {
    if (f1.stage != FusionStage::Preliminary)
        throw ValueError("conditioned sample: F1 must be the preliminary fused image");
    if (f1.height() != masks.height() || f1.width() != masks.width())
        throw DimensionError("conditioned sample: F1 and masks sizes differ");
    int h = f1.height(), w = f1.width();
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out(std::vector<int>{5, h, w});
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            out[c * hw + i] = 2.0 * f1.data[c * hw + i] - 1.0;
    std::copy(masks.m_ir.data.data(), masks.m_ir.data.data() + hw, out.data() + 3 * hw);
    std::copy(masks.m_vis.data.data(), masks.m_vis.data.data() + hw, out.data() + 4 * hw);
    if (!out.all_finite()) throw ValueError("conditioned sample: non-finite values");
    return ConditionedSample{std::move(out)};
}

void split_conditioned(const ConditionedSample& cs, FusedImage& f1_out, MaskPair& masks_out) {
    if (cs.data.rank() != 3 || cs.data.dim(0) != 5)
        throw DimensionError("split: want [5,H,W]");
    int h = cs.height(), w = cs.width();
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor f1(std::vector<int>{3, h, w});
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            f1[c * hw + i] = (cs.data[c * hw + i] + 1.0) * 0.5;
    Tensor mi(std::vector<int>{1, h, w}), mv(std::vector<int>{1, h, w});
    std::copy(cs.data.data() + 3 * hw, cs.data.data() + 4 * hw, mi.data());
    std::copy(cs.data.data() + 4 * hw, cs.data.data() + 5 * hw, mv.data());
    f1_out = FusedImage(std::move(f1), FusionStage::Preliminary);
    masks_out = MaskPair(Image(std::move(mi), ValueRange::Unit),
                         Image(std::move(mv), ValueRange::Unit), MaskProvenance::File);
}

Tensor broadcast_ir3(const Image& ir) {
    if (ir.channels() != 1) throw DimensionError("broadcast_ir3: want single-channel");
    int h = ir.height(), w = ir.width();
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out(std::vector<int>{3, h, w});
    for (int c = 0; c < 3; ++c)
        std::copy(ir.data.data(), ir.data.data() + hw, out.data() + c * hw);
    return out;
}

Tensor luma_bt601(const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DimensionError("luma: want [3,H,W]");
    int h = rgb.dim(1), w = rgb.dim(2);
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out(std::vector<int>{1, h, w});
    for (std::int64_t i = 0; i < hw; ++i)
        out[i] = 0.299 * rgb[i] + 0.587 * rgb[hw + i] + 0.114 * rgb[2 * hw + i];
    return out;
}

} // namespace sgdfuse
