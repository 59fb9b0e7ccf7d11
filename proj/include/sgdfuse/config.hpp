#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sgdfuse/losses.hpp"
#include "sgdfuse/maskprovider.hpp"
#include "sgdfuse/stage1.hpp"

namespace sgdfuse {

// Minimal TOML reader covering the config surface: [table] headers, dotted
// keys, strings, integers, floats, booleans and flat arrays. Values keep their
// dotted path, e.g. "train.lr".
struct TomlValue {
    std::variant<std::string, std::int64_t, double, bool, std::vector<TomlValue>> v;

    const std::string& as_string() const;
    std::int64_t as_int() const;
    double as_double() const; // accepts integer literals
    bool as_bool() const;
    const std::vector<TomlValue>& as_array() const;
    std::string repr() const;
};

using TomlTable = std::map<std::string, TomlValue>;

TomlTable parse_toml(const std::string& text);
TomlTable parse_toml_file(const std::filesystem::path& path);
TomlValue parse_toml_scalar(const std::string& text); // for CLI overrides

struct AblationFlags {
    bool no_sam = false;      // random patches replace semantic masks
    bool no_ir_mask = false;  // M_ir forced to zeros
    bool no_vis_mask = false; // M_vis forced to zeros
    bool no_stage1 = false;   // F1 substitute = mean(vis, broadcast ir)
    bool no_stage2 = false;   // output is the Stage-I image
    bool no_diffusion = false; // denoiser sees the clean condition at t=1
    bool no_hfah = false;     // I_f from denoised channels 0..2
};

struct RunConfig {
    std::uint64_t seed = 1234;
    std::string workdir = ".";

    // data
    std::string data_root;
    int patch = 64; // 160 reproduces the reference protocol
    bool require_masks = false;

    MaskSourceConfig masks;
    Stage1Config stage1;

    // diffusion
    int steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int t_start = 0;                     // 0 -> defaults to steps
    std::vector<int> feature_timesteps;  // empty -> {5,50,100} scaled from T=1000
    std::string sampling = "features";   // features | chain

    // unet / hfah
    int unet_depth = 5;
    int unet_base_width = 32;
    int unet_max_width = 256;
    int time_embed_dim = 64;
    int hfah_taps = 3;
    int hfah_head_width = 32;

    LossWeights loss_weights;
    double diffusion_loss_weight = 1.0;

    // train
    double lr = 1e-4;
    int batch = 4; // 24 reproduces the reference protocol
    int stage1_steps = 500;
    int stage2_steps = 400;
    int log_every = 50;
    std::string checkpoint_dir = "ckpt";

    AblationFlags ablation;

    // resolved helpers
    int resolved_t_start() const { return t_start > 0 ? t_start : steps; }
    std::vector<int> resolved_feature_timesteps() const;
    int spatial_multiple() const; // lcm of UNet stride and attention window

    void validate() const;
};

RunConfig config_from_toml(const TomlTable& table);
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});

// Canonical TOML rendering of every key (stable ordering); configs with equal
// digests behave identically.
std::string config_to_toml(const RunConfig& cfg);
std::string config_digest(const RunConfig& cfg);

} // namespace sgdfuse
