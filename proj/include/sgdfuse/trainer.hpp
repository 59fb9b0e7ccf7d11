#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "sgdfuse/checkpoint.hpp"
#include "sgdfuse/config.hpp"
#include "sgdfuse/denoiser.hpp"
#include "sgdfuse/stage1.hpp"

namespace sgdfuse {

struct Stage1Bundle {
    nn::ParamStore ps;
    std::unique_ptr<Stage1Net> net;
};

struct Stage2Bundle {
    nn::ParamStore ps;
    std::unique_ptr<UNet> unet;
    std::unique_ptr<Hfah> hfah;
};

Stage1Bundle build_stage1(const RunConfig& cfg);
Stage2Bundle build_stage2(const RunConfig& cfg);

struct TrainResult {
    std::filesystem::path best_path;
    std::filesystem::path last_path;
    std::vector<double> loss_history;      // mean batch loss per step
    std::vector<double> mask_loss_history; // stage 2 only: the mask-guided part
};

// Step-k randomness (batch ids, crops, timesteps, noise) derives from
// (seed, stage, k) only, so a resumed run replays the identical trajectory.
TrainResult train_stage1(const RunConfig& cfg, std::ostream& log,
                         const std::filesystem::path& resume = {});

TrainResult train_stage2(const RunConfig& cfg, const std::filesystem::path& stage1_ckpt,
                         std::ostream& log, const std::filesystem::path& resume = {});

// End-to-end fusion of one registered pair. Arbitrary sizes are handled by
// reflective padding to the network's spatial multiple, cropped back after.
// When `masks` is null they come from the configured provider.
FusedImage fuse(const RunConfig& cfg, const Stage1Bundle* stage1, const Stage2Bundle* stage2,
                const ImagePair& pair, const MaskPair* masks = nullptr);

// Convenience wrapper loading checkpoints from disk (validated against cfg).
FusedImage fuse(const RunConfig& cfg, const std::filesystem::path& stage1_ckpt,
                const std::filesystem::path& stage2_ckpt, const ImagePair& pair,
                const MaskPair* masks = nullptr);

// F1 stand-in when Stage I is ablated: mean of VIS and broadcast IR.
FusedImage stage1_substitute(const ImagePair& pair);

// Mask acquisition with ablation flags applied (no_sam / no_ir / no_vis).
MaskPair masks_for_pair(const RunConfig& cfg, const IndexEntry& entry, const ImagePair& pair,
                        const WarnFn& warn = nullptr);

std::filesystem::path checkpoint_path(const RunConfig& cfg, int stage, const char* which);

} // namespace sgdfuse
