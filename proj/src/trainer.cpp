#include "sgdfuse/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "sgdfuse/dataset.hpp"
#include "sgdfuse/errors.hpp"

namespace sgdfuse {

namespace fs = std::filesystem;
using ad::Var;

Stage1Bundle build_stage1(const RunConfig& cfg) {
    Stage1Bundle b{nn::ParamStore(mix64(cfg.seed ^ hash_str64("stage1_init"))), nullptr};
    b.net = std::make_unique<Stage1Net>(b.ps, cfg.stage1);
    return b;
}

Stage2Bundle build_stage2(const RunConfig& cfg) {
    Stage2Bundle b{nn::ParamStore(mix64(cfg.seed ^ hash_str64("stage2_init"))), nullptr, nullptr};
    UNetConfig ucfg;
    ucfg.depth = cfg.unet_depth;
    ucfg.base_width = cfg.unet_base_width;
    ucfg.max_width = cfg.unet_max_width;
    ucfg.time_embed_dim = cfg.time_embed_dim;
    HFAHConfig hcfg;
    hcfg.tap_levels = cfg.hfah_taps;
    hcfg.head_width = cfg.hfah_head_width;
    hcfg.validate(ucfg);
    b.unet = std::make_unique<UNet>(b.ps, ucfg, hcfg.tap_levels);
    b.hfah = std::make_unique<Hfah>(b.ps, hcfg, b.unet->tap_widths());
    return b;
}

fs::path checkpoint_path(const RunConfig& cfg, int stage, const char* which) {
    return fs::path(cfg.workdir) / cfg.checkpoint_dir /
           ("stage" + std::to_string(stage) + "_" + which + ".ckpt");
}

FusedImage stage1_substitute(const ImagePair& pair) {
    Tensor f = broadcast_ir3(pair.ir);
    const Tensor& v = pair.vis.data;
    for (std::int64_t i = 0; i < f.size(); ++i) f[i] = 0.5 * (f[i] + v[i]);
    return FusedImage(std::move(f), FusionStage::Preliminary);
}

MaskPair masks_for_pair(const RunConfig& cfg, const IndexEntry& entry, const ImagePair& pair,
                        const WarnFn& warn) {
    MaskSourceConfig mcfg = cfg.masks;
    if (cfg.ablation.no_sam) mcfg.kind = MaskSourceConfig::Kind::RandomPatch;
    MaskPair masks = provide_masks(mcfg, entry, pair, hash_str64(pair.id), warn);
    if (cfg.ablation.no_ir_mask) masks.m_ir.data.fill(0.0);
    if (cfg.ablation.no_vis_mask) masks.m_vis.data.fill(0.0);
    return masks;
}

namespace {

struct TrainSample {
    ImagePair pair;
    MaskPair masks;
};

std::vector<TrainSample> load_samples(const RunConfig& cfg, bool with_masks,
                                      const WarnFn& warn) {
    bool need_files = with_masks && !cfg.ablation.no_sam &&
                      cfg.masks.kind == MaskSourceConfig::Kind::File;
    DatasetIndex index =
        scan_dataset(fs::path(cfg.workdir) / cfg.data_root, need_files || cfg.require_masks);
    std::vector<TrainSample> out;
    out.reserve(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        ImagePair pair = load_pair(index.at(i));
        MaskPair masks =
            with_masks
                ? masks_for_pair(cfg, index.at(i), pair, warn)
                : MaskPair(Image(Tensor(pair.ir.data.dims(), 0.0), ValueRange::Unit),
                           Image(Tensor(pair.ir.data.dims(), 0.0), ValueRange::Unit),
                           MaskProvenance::Synthetic);
        out.push_back(TrainSample{std::move(pair), std::move(masks)});
    }
    return out;
}

struct BestTracker {
    double best = std::numeric_limits<double>::infinity();
    std::map<std::string, Tensor> params;

    void offer(double loss, const nn::ParamStore& ps) {
        if (loss < best) {
            best = loss;
            params.clear();
            for (const auto& [name, v] : ps.all()) params.emplace(name, v->value);
        }
    }
};

void save_with_params(Checkpoint base, const std::map<std::string, Tensor>& params,
                      const fs::path& path) {
    base.params = params;
    base.has_optimizer = false;
    base.adam_m.clear();
    base.adam_v.clear();
    save_checkpoint(base, path);
}

} // namespace

TrainResult train_stage1(const RunConfig& cfg, std::ostream& log, const fs::path& resume) {
    if (cfg.ablation.no_stage1)
        throw ConfigError("train-stage1 requested but ablation.no_stage1 is set");
    auto samples = load_samples(cfg, /*with_masks=*/false, nullptr);
    Stage1Bundle bundle = build_stage1(cfg);
    nn::Adam opt(cfg.lr);
    int start_step = 0;
    if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        if (ck.stage != 1) throw CheckpointError("resume checkpoint is not stage 1");
        restore_params(ck, bundle.ps);
        restore_optimizer(ck, opt);
        start_step = static_cast<int>(ck.step);
    }

    TrainResult result;
    BestTracker best;
    int n = static_cast<int>(samples.size());
    for (int step = start_step + 1; step <= cfg.stage1_steps; ++step) {
        Rng rng_step = Rng(cfg.seed).derive("stage1_step", static_cast<std::uint64_t>(step));
        bundle.ps.zero_grad();
        double batch_loss = 0.0;
        try {
            for (int b = 0; b < cfg.batch; ++b) {
                Rng rb = rng_step.derive("sample", static_cast<std::uint64_t>(b));
                const TrainSample& s =
                    samples[static_cast<std::size_t>(rb.uniform_int(0, n - 1))];
                auto [ppair, pmasks] = random_patch(s.pair, s.masks, cfg.patch,
                                                    rb.derive("crop").seed(),
                                                    cfg.spatial_multiple());
                Var f1 = bundle.net->forward_var(ad::constant(ppair.ir.data),
                                                 ad::constant(ppair.vis.data));
                Var loss = ad::scale(stage1_loss_var(f1, ppair), 1.0 / cfg.batch);
                batch_loss += loss->value[0] * cfg.batch;
                ad::backward(loss);
            }
        } catch (const NumericalError& e) {
            throw NumericalError("stage1 step " + std::to_string(step) + ": " + e.what());
        }
        batch_loss /= cfg.batch;
        if (!std::isfinite(batch_loss))
            throw NumericalError("stage1 training diverged at step " + std::to_string(step));
        opt.step(bundle.ps);
        result.loss_history.push_back(batch_loss);
        best.offer(batch_loss, bundle.ps);
        if (cfg.log_every > 0 && step % cfg.log_every == 0)
            log << "stage1 step " << step << " loss " << batch_loss << "\n";
    }

    Checkpoint last = snapshot(1, static_cast<std::uint64_t>(cfg.stage1_steps), cfg.seed,
                               config_to_toml(cfg), bundle.ps, &opt);
    result.last_path = checkpoint_path(cfg, 1, "last");
    save_checkpoint(last, result.last_path);
    result.best_path = checkpoint_path(cfg, 1, "best");
    if (best.params.empty()) best.offer(0.0, bundle.ps); // zero-step run
    save_with_params(last, best.params, result.best_path);
    return result;
}

namespace {

// One Stage-II objective evaluation; returns the scalar graph root.
Var stage2_objective(const RunConfig& cfg, const Stage2Bundle& s2, const NoiseSchedule& sched,
                     const ImagePair& ppair, const MaskPair& pmasks, const Tensor& cond,
                     Rng& rng, double* diff_part, double* s2_part) {
    Var total;
    if (!cfg.ablation.no_diffusion) {
        int t = static_cast<int>(rng.derive("t").uniform_int(1, sched.T));
        Tensor eps(cond.dims());
        rng.derive("eps").fill_normal(eps);
        Tensor i_t = q_sample(cond, t, eps, sched);
        DenoiseOutput out = s2.unet->forward(ad::constant(i_t), t);
        Var l_diff = mse_var(out.eps_hat, eps);
        if (diff_part) *diff_part = l_diff->value[0];
        total = ad::scale(l_diff, cfg.diffusion_loss_weight);
    }

    Var i_f;
    if (cfg.ablation.no_diffusion) {
        // clean condition, fixed t=1, no noising
        DenoiseOutput out = s2.unet->forward(ad::constant(cond), 1);
        if (cfg.ablation.no_hfah) {
            double ab = sched.alpha_bar_at(1);
            Var x0 = ad::scale(ad::sub(ad::constant(cond),
                                       ad::scale(out.eps_hat, std::sqrt(1.0 - ab))),
                               1.0 / std::sqrt(ab));
            i_f = ad::add_scalar(ad::scale(ad::slice_c(x0, 0, 3), 0.5), 0.5);
        } else {
            i_f = s2.hfah->forward(out.taps);
        }
    } else {
        i_f = fused_from_timesteps_var(cond, cfg.resolved_feature_timesteps(), *s2.unet,
                                       s2.hfah.get(), sched, rng.derive("fft").seed(),
                                       cfg.ablation.no_hfah);
    }
    Var l_s2 = stage2_loss_var(i_f, ppair, pmasks, cfg.loss_weights);
    if (s2_part) *s2_part = l_s2->value[0];
    total = total ? ad::add(total, l_s2) : l_s2;
    return total;
}

} // namespace

TrainResult train_stage2(const RunConfig& cfg, const fs::path& stage1_ckpt, std::ostream& log,
                         const fs::path& resume) {
    if (cfg.ablation.no_stage2)
        throw ConfigError("train-stage2 requested but ablation.no_stage2 is set");
    auto warn = [&log](const std::string& m) { log << "warning: " << m << "\n"; };
    auto samples = load_samples(cfg, /*with_masks=*/true, warn);
    log << "stage2: " << samples.size() << " pairs, mask provenance "
        << to_string(samples.front().masks.provenance) << "\n";

    Stage1Bundle s1;
    if (!cfg.ablation.no_stage1) {
        s1 = build_stage1(cfg);
        Checkpoint ck = load_checkpoint(stage1_ckpt);
        if (ck.stage != 1) throw CheckpointError("expected a stage-1 checkpoint");
        restore_params(ck, s1.ps);
    }

    Stage2Bundle s2 = build_stage2(cfg);
    NoiseSchedule sched = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end);
    nn::Adam opt(cfg.lr);
    int start_step = 0;
    if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        if (ck.stage != 2) throw CheckpointError("resume checkpoint is not stage 2");
        restore_params(ck, s2.ps);
        restore_optimizer(ck, opt);
        start_step = static_cast<int>(ck.step);
    }

    TrainResult result;
    BestTracker best;
    int n = static_cast<int>(samples.size());
    for (int step = start_step + 1; step <= cfg.stage2_steps; ++step) {
        Rng rng_step = Rng(cfg.seed).derive("stage2_step", static_cast<std::uint64_t>(step));
        s2.ps.zero_grad();
        double batch_loss = 0.0, diff_sum = 0.0, s2_sum = 0.0;
        try {
            for (int b = 0; b < cfg.batch; ++b) {
                Rng rb = rng_step.derive("sample", static_cast<std::uint64_t>(b));
                const TrainSample& s =
                    samples[static_cast<std::size_t>(rb.uniform_int(0, n - 1))];
                auto [ppair, pmasks] = random_patch(s.pair, s.masks, cfg.patch,
                                                    rb.derive("crop").seed(),
                                                    cfg.spatial_multiple());
                FusedImage f1;
                {
                    ad::NoGradScope ng; // Stage-I weights stay frozen
                    f1 = cfg.ablation.no_stage1 ? stage1_substitute(ppair)
                                                : s1.net->forward(ppair);
                }
                Tensor cond = to_conditioned_sample(f1, pmasks).data;
                double diff_part = 0.0, s2_part = 0.0;
                Var loss = stage2_objective(cfg, s2, sched, ppair, pmasks, cond, rb, &diff_part,
                                            &s2_part);
                diff_sum += diff_part;
                s2_sum += s2_part;
                Var scaled = ad::scale(loss, 1.0 / cfg.batch);
                batch_loss += loss->value[0];
                ad::backward(scaled);
            }
        } catch (const NumericalError& e) {
            throw NumericalError("stage2 step " + std::to_string(step) + ": " + e.what());
        }
        batch_loss /= cfg.batch;
        if (!std::isfinite(batch_loss))
            throw NumericalError("stage2 training diverged at step " + std::to_string(step));
        opt.step(s2.ps);
        result.loss_history.push_back(batch_loss);
        result.mask_loss_history.push_back(s2_sum / cfg.batch);
        best.offer(batch_loss, s2.ps);
        if (cfg.log_every > 0 && step % cfg.log_every == 0)
            log << "stage2 step " << step << " loss " << batch_loss << " (diff "
                << diff_sum / cfg.batch << ", mask " << s2_sum / cfg.batch << ")\n";
    }

    Checkpoint last = snapshot(2, static_cast<std::uint64_t>(cfg.stage2_steps), cfg.seed,
                               config_to_toml(cfg), s2.ps, &opt);
    result.last_path = checkpoint_path(cfg, 2, "last");
    save_checkpoint(last, result.last_path);
    result.best_path = checkpoint_path(cfg, 2, "best");
    if (best.params.empty()) best.offer(0.0, s2.ps);
    save_with_params(last, best.params, result.best_path);
    return result;
}

namespace {

Tensor reflect_pad_br(const Tensor& t, int pad_b, int pad_r) {
    int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    Tensor out(std::vector<int>{c, h + pad_b, w + pad_r});
    auto reflect = [](int i, int n) {
        // symmetric reflection: n, n+1 map to n-1, n-2, ...
        if (i < n) return i;
        int r = 2 * n - 1 - i;
        return r < 0 ? 0 : r;
    };
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h + pad_b; ++y)
            for (int x = 0; x < w + pad_r; ++x)
                out.at(ci, y, x) = t.at(ci, reflect(y, h), reflect(x, w));
    return out;
}

Tensor crop_tl(const Tensor& t, int h, int w) {
    int c = t.dim(0);
    Tensor out(std::vector<int>{c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = t.at(ci, y, x);
    return out;
}

} // namespace

FusedImage fuse(const RunConfig& cfg, const Stage1Bundle* stage1, const Stage2Bundle* stage2,
                const ImagePair& pair, const MaskPair* masks) {
    ad::NoGradScope ng;
    int mult = cfg.spatial_multiple();
    int h = pair.height(), w = pair.width();
    int ph = (h % mult == 0) ? h : h + (mult - h % mult);
    int pw = (w % mult == 0) ? w : w + (mult - w % mult);

    ImagePair padded = (ph == h && pw == w)
                           ? pair
                           : ImagePair(Image(reflect_pad_br(pair.ir.data, ph - h, pw - w),
                                             pair.ir.range),
                                       Image(reflect_pad_br(pair.vis.data, ph - h, pw - w),
                                             pair.vis.range),
                                       pair.id);

    FusedImage f1 = cfg.ablation.no_stage1 ? stage1_substitute(padded)
                                           : stage1->net->forward(padded);
    if (cfg.ablation.no_stage2) {
        if (ph != h || pw != w) return FusedImage(crop_tl(f1.data, h, w), FusionStage::Preliminary);
        return f1;
    }

    MaskPair pmasks = [&] {
        if (masks) {
            if (masks->height() != h || masks->width() != w)
                throw DimensionError("fuse: provided masks do not match pair size");
            if (ph == h && pw == w) return *masks;
            return MaskPair(Image(reflect_pad_br(masks->m_ir.data, ph - h, pw - w),
                                  ValueRange::Unit),
                            Image(reflect_pad_br(masks->m_vis.data, ph - h, pw - w),
                                  ValueRange::Unit),
                            masks->provenance);
        }
        IndexEntry dummy;
        dummy.id = pair.id;
        RunConfig mc = cfg;
        if (mc.masks.kind == MaskSourceConfig::Kind::File)
            throw ConfigError("fuse: file mask source needs masks passed explicitly");
        return masks_for_pair(mc, dummy, padded);
    }();
    if (cfg.ablation.no_ir_mask) pmasks.m_ir.data.fill(0.0);
    if (cfg.ablation.no_vis_mask) pmasks.m_vis.data.fill(0.0);

    ConditionedSample cond = to_conditioned_sample(f1, pmasks);
    NoiseSchedule sched = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end);
    std::uint64_t fuse_seed = Rng(cfg.seed).derive("fuse:" + pair.id).seed();
    std::vector<int> feature_ts = cfg.resolved_feature_timesteps();

    Tensor out3;
    if (cfg.ablation.no_diffusion) {
        DenoiseOutput out = stage2->unet->forward(ad::constant(cond.data), 1);
        if (cfg.ablation.no_hfah) {
            double ab = sched.alpha_bar_at(1);
            Var x0 = ad::scale(ad::sub(ad::constant(cond.data),
                                       ad::scale(out.eps_hat, std::sqrt(1.0 - ab))),
                               1.0 / std::sqrt(ab));
            out3 = ad::add_scalar(ad::scale(ad::slice_c(x0, 0, 3), 0.5), 0.5)->value;
        } else {
            out3 = stage2->hfah->forward(out.taps)->value;
        }
    } else if (cfg.sampling == "chain") {
        int t_start = cfg.resolved_t_start();
        std::vector<int> taps_at;
        for (int t : feature_ts)
            if (t <= t_start) taps_at.push_back(t);
        if (taps_at.empty() && !cfg.ablation.no_hfah)
            throw ConfigError("chain sampling: no feature timestep <= t_start");
        DenoiseFn fn = [&](const Tensor& i_t, int t, std::vector<Tensor>* taps) {
            DenoiseOutput o = stage2->unet->forward(ad::constant(i_t), t);
            if (taps)
                for (const Var& v : o.taps) taps->push_back(v->value);
            return o.eps_hat->value;
        };
        ChainResult chain = sample_chain(cond, t_start, fn, sched, fuse_seed, taps_at);
        if (cfg.ablation.no_hfah) {
            int hh = cond.height(), ww = cond.width();
            Tensor rgb(std::vector<int>{3, hh, ww});
            std::int64_t hw = static_cast<std::int64_t>(hh) * ww;
            for (std::int64_t i = 0; i < 3 * hw; ++i)
                rgb[i] = (chain.final_sample[i] + 1.0) * 0.5;
            out3 = rgb;
        } else {
            int levels = static_cast<int>(stage2->unet->tap_widths().size());
            std::vector<Var> merged;
            for (int lvl = 0; lvl < levels; ++lvl) {
                Var acc;
                int count = 0;
                for (const auto& [t, taps] : chain.taps) {
                    Var v = ad::constant(taps[static_cast<std::size_t>(lvl)]);
                    acc = acc ? ad::add(acc, v) : v;
                    ++count;
                }
                merged.push_back(ad::scale(acc, 1.0 / count));
            }
            out3 = stage2->hfah->forward(merged)->value;
        }
    } else {
        out3 = fused_from_timesteps_var(cond.data, feature_ts, *stage2->unet, stage2->hfah.get(),
                                        sched, fuse_seed, cfg.ablation.no_hfah)
                   ->value;
    }

    for (std::int64_t i = 0; i < out3.size(); ++i) out3[i] = std::clamp(out3[i], 0.0, 1.0);
    if (ph != h || pw != w) out3 = crop_tl(out3, h, w);
    return FusedImage(std::move(out3), FusionStage::Final);
}

FusedImage fuse(const RunConfig& cfg, const fs::path& stage1_ckpt, const fs::path& stage2_ckpt,
                const ImagePair& pair, const MaskPair* masks) {
    Stage1Bundle s1;
    if (!cfg.ablation.no_stage1) {
        s1 = build_stage1(cfg);
        Checkpoint ck = load_checkpoint(stage1_ckpt);
        if (ck.stage != 1) throw CheckpointError("expected a stage-1 checkpoint");
        restore_params(ck, s1.ps);
    }
    if (cfg.ablation.no_stage2)
        return fuse(cfg, cfg.ablation.no_stage1 ? nullptr : &s1, nullptr, pair, masks);
    Stage2Bundle s2 = build_stage2(cfg);
    Checkpoint ck2 = load_checkpoint(stage2_ckpt);
    if (ck2.stage != 2) throw CheckpointError("expected a stage-2 checkpoint");
    restore_params(ck2, s2.ps);
    return fuse(cfg, cfg.ablation.no_stage1 ? nullptr : &s1, &s2, pair, masks);
}

} // namespace sgdfuse
