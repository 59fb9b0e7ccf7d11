#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sgdfuse/dataset.hpp"
#include "sgdfuse/image.hpp"

namespace sgdfuse {

struct MaskSourceConfig {
    enum class Kind { File, Synthetic, Remote, RandomPatch };
    Kind kind = Kind::Synthetic;
    double q_ir = 0.85;   // intensity quantile for the synthetic IR mask
    double q_vis = 0.85;  // gradient quantile for the synthetic VIS mask
    double fraction = 0.25;
    std::uint64_t seed = 0;
    std::string endpoint; // http://host:port
    double timeout_s = 5.0;
    bool fallback_synthetic = false;

    static Kind parse_kind(const std::string& s);
};

using WarnFn = std::function<void(const std::string&)>;

MaskPair masks_from_files(const IndexEntry& entry, const ImagePair& pair);

// Stand-in saliency oracle: IR mask thresholds raw intensity at its q_ir
// quantile, VIS mask thresholds luminance gradient magnitude at q_vis.
MaskPair synth_masks(const ImagePair& pair, double q_ir, double q_vis,
                     const WarnFn& warn = nullptr);

// Ablation source: one random axis-aligned rectangle per mask with area about
// fraction*H*W.
MaskPair random_patch_masks(const ImagePair& pair, double fraction, std::uint64_t seed);

// POSTs PNG bytes to {endpoint}/segment and expects a same-size grayscale PNG.
// One retry on transient failure; attempts_out reports tries per modality.
MaskPair fetch_masks_remote(const ImagePair& pair, const std::string& endpoint,
                            double timeout_s, int* attempts_out = nullptr);

// Dispatch on cfg.kind; honors SGDFUSE_MASK_ENDPOINT and the remote->synthetic
// fallback. `pair_seed` decorrelates random-patch masks between pairs.
MaskPair provide_masks(const MaskSourceConfig& cfg, const IndexEntry& entry,
                       const ImagePair& pair, std::uint64_t pair_seed = 0,
                       const WarnFn& warn = nullptr);

} // namespace sgdfuse
