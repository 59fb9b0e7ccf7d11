// Acceptance suite: one pass/fail line per criterion, nonzero exit on failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <vector>

#include "helpers.hpp"
#include "sgdfuse/checkpoint.hpp"
#include "sgdfuse/denoiser.hpp"
#include "sgdfuse/diffusion.hpp"
#include "sgdfuse/losses.hpp"
#include "sgdfuse/metrics.hpp"
#include "sgdfuse/png_io.hpp"
#include "sgdfuse/sha256.hpp"
#include "sgdfuse/trainer.hpp"

using namespace sgdfuse;
using namespace testutil;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << (detail.str().empty() ? "" : "; ") << what;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// overfit-friendly pair: VIS tracks the IR structure so the two loss terms
// barely conflict and the optimization floor sits near zero
ImagePair consistent_pair(const std::string& id, int h, int w, std::uint64_t seed) {
    Image ir = make_ir(h, w, seed);
    Tensor vis(std::vector<int>{3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double ramp = 0.02 * c + 0.03 * x / std::max(1, w - 1);
                vis.at(c, y, x) = std::clamp(0.8 * ir.data.at(0, y, x) + ramp, 0.0, 1.0);
            }
    return ImagePair(ir, Image(vis, ValueRange::Unit), id);
}

// ---------------------------------------------------------------------------
// criterion 1: q_sample marginal statistics
// ---------------------------------------------------------------------------
Outcome criterion1() {
    Outcome out;
    auto t0 = std::chrono::steady_clock::now();
    NoiseSchedule sched = make_schedule(100, 1e-4, 0.02);
    Tensor i0(std::vector<int>{1, 1, 2});
    i0[0] = 0.8;
    i0[1] = -0.55;
    Rng trng(2024);
    const int draws = 200000;
    for (int rep = 0; rep < 3; ++rep) {
        int t = static_cast<int>(trng.uniform_int(1, 100));
        Rng rng(500 + rep);
        double s0 = 0, s0q = 0, s1 = 0, s1q = 0;
        Tensor eps(i0.dims());
        for (int d = 0; d < draws; ++d) {
            rng.fill_normal(eps);
            Tensor it = q_sample(i0, t, eps, sched);
            s0 += it[0];
            s0q += it[0] * it[0];
            s1 += it[1];
            s1q += it[1] * it[1];
        }
        double ab = sched.alpha_bar_at(t);
        double want_var = 1.0 - ab;
        for (auto [s, sq, x0] : {std::tuple{s0, s0q, i0[0]}, std::tuple{s1, s1q, i0[1]}}) {
            double mean = s / draws;
            double var = sq / draws - mean * mean;
            double want_mean = std::sqrt(ab) * x0;
            out.require(std::fabs(mean - want_mean) <= 0.01 * std::fabs(want_mean),
                        "mean off at t=" + std::to_string(t));
            out.require(std::fabs(var - want_var) <= 0.01 * want_var,
                        "variance off at t=" + std::to_string(t));
        }
    }
    double secs = seconds_since(t0);
    out.require(secs < 30.0, "runtime " + std::to_string(secs) + "s exceeds 30s");
    out.detail << "3 random t, 2e5 draws each, 1% relative";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 2: Markov composition equals the closed form
// ---------------------------------------------------------------------------
Outcome criterion2() {
    Outcome out;
    auto t0 = std::chrono::steady_clock::now();
    NoiseSchedule sched = make_schedule(100, 1e-4, 0.02);
    const int k = 20, trials = 100000;
    Tensor i0(std::vector<int>{1, 1, 1});
    i0[0] = 0.7;
    Rng rng(808);
    double s = 0, sq = 0;
    Tensor eps(i0.dims());
    for (int trial = 0; trial < trials; ++trial) {
        Tensor x = i0;
        for (int t = 1; t <= k; ++t) {
            rng.fill_normal(eps);
            x = q_step(x, t, eps, sched);
        }
        s += x[0];
        sq += x[0] * x[0];
    }
    double mean = s / trials, var = sq / trials - mean * mean;
    double ab = sched.alpha_bar_at(k);
    double want_mean = std::sqrt(ab) * i0[0];
    double want_var = 1.0 - ab;
    out.require(std::fabs(mean - want_mean) <= 0.01 * std::fabs(want_mean), "composed mean off");
    out.require(std::fabs(var - want_var) <= 0.01 * want_var, "composed variance off");
    double secs = seconds_since(t0);
    out.require(secs < 60.0, "runtime " + std::to_string(secs) + "s exceeds 60s");
    out.detail << "t<=20 composition, 1e5 trials, 1% relative";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 3: oracle reverse chain reconstruction
// ---------------------------------------------------------------------------
Outcome criterion3() {
    Outcome out;
    auto t0 = std::chrono::steady_clock::now();
    NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
    ImagePair pair = consistent_pair("c3", 16, 16, 3);
    MaskPair masks = synth_masks(pair, 0.8, 0.8);
    RunConfig s1cfg;
    s1cfg.seed = 3;
    Stage1Bundle s1 = build_stage1(s1cfg);
    FusedImage f1 = s1.net->forward(pair);
    ConditionedSample cond = to_conditioned_sample(f1, masks);

    DenoiseFn oracle = [&](const Tensor& x, int t, std::vector<Tensor>*) {
        double ab = sched.alpha_bar_at(t);
        Tensor eps_hat(x.dims());
        for (std::int64_t i = 0; i < x.size(); ++i)
            eps_hat[i] = (x[i] - std::sqrt(ab) * cond.data[i]) / std::sqrt(1.0 - ab);
        return eps_hat;
    };
    ChainResult chain =
        sample_chain(cond, 50, oracle, sched, 77, {}, /*zero_posterior_noise=*/true);
    double max_err = 0;
    for (std::int64_t i = 0; i < cond.data.size(); ++i)
        max_err = std::max(max_err, std::fabs(chain.final_sample[i] - cond.data[i]));
    out.require(max_err <= 1e-3, "max per-pixel error " + std::to_string(max_err));
    double secs = seconds_since(t0);
    out.require(secs < 10.0, "runtime " + std::to_string(secs) + "s exceeds 10s");
    out.detail << "T=50 oracle chain, max err " << max_err;
    return out;
}

// ---------------------------------------------------------------------------
// criterion 4: loss zero cases and the mask-loss weighting
// ---------------------------------------------------------------------------
Outcome criterion4() {
    Outcome out;
    ImagePair pair = make_pair("c4", 16, 16, 4);

    LossParts grad_zero = stage1_loss(FusedImage(pair.vis.data, FusionStage::Preliminary), pair);
    out.require(grad_zero.gradient == 0.0, "L_grad(F1=I_vis) != 0");
    LossParts int_zero =
        stage1_loss(FusedImage(broadcast_ir3(pair.ir), FusionStage::Preliminary), pair);
    out.require(int_zero.intensity == 0.0, "L_int(F1=I_ir) != 0");

    auto mk = [](double v) {
        return Image(Tensor(std::vector<int>{1, 16, 16}, v), ValueRange::Unit);
    };
    out.require(joint_mask(MaskPair(mk(1), mk(0), MaskProvenance::File))[0] == 1.0, "max(1,0)");
    out.require(joint_mask(MaskPair(mk(0), mk(0), MaskProvenance::File))[0] == 0.0, "max(0,0)");
    out.require(joint_mask(MaskPair(mk(0.3), mk(0.7), MaskProvenance::File))[0] == 0.7,
                "max(0.3,0.7)");

    Tensor ones(std::vector<int>{1, 16, 16}, 1.0);
    Tensor zeros(std::vector<int>{1, 16, 16}, 0.0);
    Tensor target = broadcast_ir3(pair.ir);
    for (std::int64_t i = 0; i < target.size(); ++i)
        target[i] = std::max(target[i], pair.vis.data[i]);
    out.require(mask_int_loss(FusedImage(target, FusionStage::Final), pair, ones) == 0.0,
                "L_int^mask at the max target != 0");
    Tensor rnd = random_tensor({3, 16, 16}, 44, 0.0, 1.0);
    out.require(mask_int_loss(FusedImage(rnd, FusionStage::Final), pair, zeros) == 0.0,
                "L_int^mask with M=0 != 0");
    out.require(mask_grad_loss(FusedImage(rnd, FusionStage::Final), pair, zeros) == 0.0,
                "L_grad^mask with M=0 != 0");

    // consistent construction: vis = broadcast(ir) makes I_f = ir3 exact
    Image ir = make_ir(16, 16, 5);
    Tensor ir3 = broadcast_ir3(ir);
    ImagePair consistent(ir, Image(ir3, ValueRange::Unit), "cz");
    out.require(mask_grad_loss(FusedImage(ir3, FusionStage::Final), consistent, ones) == 0.0,
                "L_grad^mask zero construction != 0");

    MaskPair masks(mk(0.8), mk(0.4), MaskProvenance::Synthetic);
    LossWeights w; // 1.5 / 1.0
    for (int trial = 0; trial < 100; ++trial) {
        Tensor f = random_tensor({3, 16, 16}, 4000 + trial, 0.0, 1.0);
        LossParts p = stage2_loss(FusedImage(f, FusionStage::Final), pair, masks, w);
        double recomputed = 1.5 * p.intensity + 1.0 * p.gradient;
        out.require(std::fabs(p.total - recomputed) <= 1e-12 * std::max(1.0, recomputed),
                    "weighting mismatch");
    }
    out.detail << "all zero cases exact, 100 weighting checks";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 5: finite differences through the full Stage-II graph
// ---------------------------------------------------------------------------
Outcome criterion5() {
    Outcome out;
    auto t0 = std::chrono::steady_clock::now();

    nn::ParamStore ps(55);
    UNetConfig ucfg;
    ucfg.depth = 3; // 8x8 toy input supports three resolution levels
    ucfg.base_width = 4;
    ucfg.max_width = 16;
    ucfg.time_embed_dim = 8;
    UNet unet(ps, ucfg, 2);
    HFAHConfig hcfg;
    hcfg.tap_levels = 2;
    hcfg.head_width = 6;
    Hfah hfah(ps, hcfg, unet.tap_widths());
    NoiseSchedule sched = make_schedule(20, 1e-3, 0.05);
    Rng hr(56);
    hr.fill_uniform(ps.at("unet.head.weight")->value, -0.05, 0.05);

    ImagePair pair = make_pair("c5", 8, 8, 57);
    MaskPair masks(Image(Tensor(std::vector<int>{1, 8, 8}, 1.0), ValueRange::Unit),
                   Image(Tensor(std::vector<int>{1, 8, 8}, 0.5), ValueRange::Unit),
                   MaskProvenance::Synthetic);
    Tensor cond = random_tensor({5, 8, 8}, 58);
    Tensor eps = random_tensor({5, 8, 8}, 59);
    Tensor i_t = q_sample(cond, 9, eps, sched);
    LossWeights w;

    auto loss_var = [&] {
        DenoiseOutput diff = unet.forward(ad::constant(i_t), 9);
        ad::Var l_diff = mse_var(diff.eps_hat, eps);
        ad::Var i_f = fused_from_timesteps_var(cond, {2, 5}, unet, &hfah, sched, 60, false);
        return ad::add(l_diff, stage2_loss_var(i_f, pair, masks, w));
    };
    auto loss_val = [&] {
        ad::NoGradScope ng;
        return loss_var()->value[0];
    };

    std::vector<std::pair<std::string, ad::Var>> params = {
        {"unet.stem.weight", ps.at("unet.stem.weight")},
        {"unet.enc0.c1.weight", ps.at("unet.enc0.c1.weight")},
        {"unet.enc1.c2.weight", ps.at("unet.enc1.c2.weight")},
        {"unet.enc2.c1.bias", ps.at("unet.enc2.c1.bias")},
        {"unet.down0.weight", ps.at("unet.down0.weight")},
        {"unet.up0.weight", ps.at("unet.up0.weight")},
        {"unet.dec0.c1.weight", ps.at("unet.dec0.c1.weight")},
        {"unet.dec1.c2.weight", ps.at("unet.dec1.c2.weight")},
        {"unet.dec0.skip.weight", ps.at("unet.dec0.skip.weight")},
        {"unet.time.l1.weight", ps.at("unet.time.l1.weight")},
        {"unet.time.l2.bias", ps.at("unet.time.l2.bias")},
        {"unet.enc0.tproj.weight", ps.at("unet.enc0.tproj.weight")},
        {"unet.dec1.tproj.weight", ps.at("unet.dec1.tproj.weight")},
        {"unet.head.weight", ps.at("unet.head.weight")},
        {"unet.head.bias", ps.at("unet.head.bias")},
        {"hfah.gate0.weight", ps.at("hfah.gate0.weight")},
        {"hfah.gate1.weight", ps.at("hfah.gate1.weight")},
        {"hfah.head1.weight", ps.at("hfah.head1.weight")},
        {"hfah.head2.weight", ps.at("hfah.head2.weight")},
        {"hfah.head3.weight", ps.at("hfah.head3.weight")},
    };
    auto res = grad_check(params, loss_val, loss_var, 2, 61);
    out.require(res.checked >= 40, "only " + std::to_string(res.checked) + " samples");
    out.require(res.max_rel_err <= 1e-4,
                "max rel err " + std::to_string(res.max_rel_err) + " at " + res.worst);
    double secs = seconds_since(t0);
    out.require(secs < 300.0, "runtime " + std::to_string(secs) + "s exceeds 5min");
    out.detail << res.checked << " samples across conv/time/attention/head blocks, max rel err "
               << res.max_rel_err;
    return out;
}

// ---------------------------------------------------------------------------
// criterion 6: metric oracles
// ---------------------------------------------------------------------------
namespace oracle {

using metrics::GrayU8;

double en(const GrayU8& f) {
    double c[256] = {0};
    for (auto b : f.v) c[b] += 1;
    double e = 0, n = static_cast<double>(f.v.size());
    for (int i = 0; i < 256; ++i)
        if (c[i] > 0) e -= (c[i] / n) * std::log2(c[i] / n);
    return e;
}

double sd(const GrayU8& f) {
    double s = 0;
    for (auto b : f.v) s += b;
    double mu = s / static_cast<double>(f.v.size());
    double acc = 0;
    for (auto b : f.v) acc += (b - mu) * (b - mu);
    return std::sqrt(acc / static_cast<double>(f.v.size()));
}

double sf(const GrayU8& f) {
    double rf = 0, cf = 0;
    for (int y = 0; y < f.h; ++y)
        for (int x = 1; x < f.w; ++x) {
            double d = double(f.v[y * f.w + x]) - f.v[y * f.w + x - 1];
            rf += d * d;
        }
    for (int y = 1; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) {
            double d = double(f.v[y * f.w + x]) - f.v[(y - 1) * f.w + x];
            cf += d * d;
        }
    return std::sqrt(rf / (double(f.h) * (f.w - 1)) + cf / (double(f.h - 1) * f.w));
}

double mi2(const GrayU8& x, const GrayU8& y) {
    std::vector<double> joint(65536, 0.0);
    double px[256] = {0}, py[256] = {0};
    double n = static_cast<double>(x.v.size());
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        joint[x.v[i] * 256 + y.v[i]] += 1;
        px[x.v[i]] += 1;
        py[y.v[i]] += 1;
    }
    double m = 0;
    for (int a = 0; a < 256; ++a)
        for (int b = 0; b < 256; ++b) {
            double p = joint[a * 256 + b] / n;
            if (p > 0) m += p * std::log2(p / ((px[a] / n) * (py[b] / n)));
        }
    return m;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

double scd(const GrayU8& f, const GrayU8& a, const GrayU8& b) {
    std::size_t n = f.v.size();
    std::vector<double> fb(n), fa(n), av(n), bv(n);
    for (std::size_t i = 0; i < n; ++i) {
        fb[i] = double(f.v[i]) - b.v[i];
        fa[i] = double(f.v[i]) - a.v[i];
        av[i] = a.v[i];
        bv[i] = b.v[i];
    }
    return pearson(fb, av) + pearson(fa, bv);
}

double qabf(const GrayU8& f, const GrayU8& a, const GrayU8& b) {
    metrics::QabfConstants c;
    auto edge = [](const GrayU8& img, std::vector<double>& g, std::vector<double>& al) {
        const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
        const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
        auto cl = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
        g.resize(img.v.size());
        al.resize(img.v.size());
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                double gx = 0, gy = 0;
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) {
                        double v =
                            img.v[cl(y + i - 1, img.h - 1) * img.w + cl(x + j - 1, img.w - 1)];
                        gx += kx[i][j] * v;
                        gy += ky[i][j] * v;
                    }
                g[y * img.w + x] = std::hypot(gx, gy);
                double ang = std::atan2(gy, gx);
                if (ang < 0) ang += M_PI;
                if (ang >= M_PI) ang -= M_PI;
                al[y * img.w + x] = ang;
            }
    };
    std::vector<double> gf, af, ga, aa, gb, ab;
    edge(f, gf, af);
    edge(a, ga, aa);
    edge(b, gb, ab);
    auto q = [&](double gs, double as, double gff, double aff) {
        if (gs <= 0 && gff <= 0) return 1.0;
        double ratio = std::max(gs, gff) > 0 ? std::min(gs, gff) / std::max(gs, gff) : 0.0;
        double d = std::fabs(as - aff);
        d = std::min(d, M_PI - d);
        double align = 1.0 - d / (M_PI / 2);
        return (c.gamma_g / (1 + std::exp(c.kappa_g * (ratio - c.sigma_g)))) *
               (c.gamma_a / (1 + std::exp(c.kappa_a * (align - c.sigma_a))));
    };
    double num = 0, den = 0;
    for (std::size_t i = 0; i < gf.size(); ++i) {
        num += q(ga[i], aa[i], gf[i], af[i]) * ga[i] + q(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    return den > 0 ? num / den : 0.0;
}

} // namespace oracle

Outcome criterion6() {
    Outcome out;
    using metrics::GrayU8;
    auto random_gray = [](int h, int w, std::uint64_t seed) {
        Rng rng(seed);
        GrayU8 g;
        g.h = h;
        g.w = w;
        g.v.resize(static_cast<std::size_t>(h) * w);
        for (auto& b : g.v) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        return g;
    };
    for (int trial = 0; trial < 20; ++trial) {
        GrayU8 f = random_gray(8, 8, 600 + trial);
        GrayU8 a = random_gray(8, 8, 700 + trial);
        GrayU8 b = random_gray(8, 8, 800 + trial);
        out.require(std::fabs(metrics::en(f) - oracle::en(f)) <= 1e-9, "EN oracle");
        out.require(std::fabs(metrics::sd(f) - oracle::sd(f)) <= 1e-9, "SD oracle");
        out.require(std::fabs(metrics::sf(f) - oracle::sf(f)) <= 1e-9, "SF oracle");
        out.require(std::fabs(metrics::mi(f, a, b) - (oracle::mi2(f, a) + oracle::mi2(f, b))) <=
                        1e-9,
                    "MI oracle");
        out.require(std::fabs(metrics::scd(f, a, b) - oracle::scd(f, a, b)) <= 1e-9,
                    "SCD oracle");
        out.require(std::fabs(metrics::qabf(f, a, b) - oracle::qabf(f, a, b)) <= 1e-9,
                    "Qabf oracle");
    }

    std::vector<std::uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
    GrayU8 uniform{16, 16, all};
    out.require(metrics::en(uniform) == 8.0, "EN uniform-histogram != 8.0");

    GrayU8 structured = random_gray(16, 16, 900);
    out.require(std::fabs(metrics::qabf(structured, structured, structured) - 1.0) <= 1e-6,
                "Qabf(F=A=B) != 1");

    Rng rng(901);
    GrayU8 a, b, f;
    a.h = b.h = f.h = 16;
    a.w = b.w = f.w = 16;
    a.v.resize(256);
    b.v.resize(256);
    f.v.resize(256);
    for (int i = 0; i < 256; ++i) {
        int av = static_cast<int>(rng.uniform_int(64, 192));
        int bv = static_cast<int>(rng.uniform_int(64, 192));
        a.v[i] = static_cast<std::uint8_t>(av);
        b.v[i] = static_cast<std::uint8_t>(bv);
        f.v[i] = static_cast<std::uint8_t>(std::clamp(av + bv - 128, 0, 255));
    }
    out.require(std::fabs(metrics::scd(f, a, b) - 2.0) <= 1e-9, "SCD(F=A+B) != 2");
    out.detail << "20 random 8x8 triples vs brute force, all identities";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 7: overfit smoke tests
// ---------------------------------------------------------------------------
Outcome criterion7(const std::filesystem::path& work) {
    Outcome out;
    auto t0 = std::chrono::steady_clock::now();

    auto data1 = work / "overfit1";
    std::filesystem::create_directories(data1 / "ir");
    std::filesystem::create_directories(data1 / "vis");
    for (int i = 0; i < 4; ++i) {
        ImagePair pair = consistent_pair("p" + std::to_string(i), 64, 64,
                                         7000 + 10 * static_cast<std::uint64_t>(i));
        write_png(data1 / "ir" / (pair.id + ".png"), pair.ir);
        write_png(data1 / "vis" / (pair.id + ".png"), pair.vis);
    }
    RunConfig cfg;
    cfg.seed = 71;
    cfg.workdir = work.string();
    cfg.data_root = "overfit1";
    cfg.patch = 64;
    cfg.batch = 2;
    cfg.lr = 1e-3;
    cfg.stage1_steps = 500;
    cfg.log_every = 0;
    cfg.checkpoint_dir = "ckpt_c7";
    cfg.validate();
    std::ostringstream log;
    TrainResult s1 = train_stage1(cfg, log);
    double first = s1.loss_history.front();
    double last = s1.loss_history.back();
    out.require(last <= 0.10 * first,
                "stage1 loss fell only to " + std::to_string(last / first) + " of step 1");
    double stage1_secs = seconds_since(t0);
    out.require(stage1_secs < 600.0,
                "stage1 runtime " + std::to_string(stage1_secs) + "s exceeds 10min");

    auto data2 = work / "overfit2";
    std::filesystem::create_directories(data2 / "ir");
    std::filesystem::create_directories(data2 / "vis");
    {
        ImagePair pair = consistent_pair("q0", 32, 32, 7200);
        write_png(data2 / "ir" / "q0.png", pair.ir);
        write_png(data2 / "vis" / "q0.png", pair.vis);
    }
    RunConfig cfg2 = cfg;
    cfg2.data_root = "overfit2";
    cfg2.patch = 32;
    cfg2.batch = 1;
    cfg2.stage1_steps = 150;
    cfg2.stage2_steps = 250;
    cfg2.unet_base_width = 16;
    cfg2.unet_max_width = 128;
    cfg2.checkpoint_dir = "ckpt_c7b";
    cfg2.validate();
    TrainResult s1b = train_stage1(cfg2, log);
    TrainResult s2 = train_stage2(cfg2, s1b.best_path, log);
    double best_mask =
        *std::min_element(s2.mask_loss_history.begin(), s2.mask_loss_history.end());
    out.require(best_mask < 0.05, "stage2 mask loss bottomed at " + std::to_string(best_mask));
    out.detail << "stage1 drop " << (1.0 - last / first) * 100.0 << "% in 500 steps ("
               << stage1_secs << "s), stage2 mask loss " << best_mask;
    return out;
}

// ---------------------------------------------------------------------------
// criterion 8: every ablation variant runs end to end
// ---------------------------------------------------------------------------
Outcome criterion8(const std::filesystem::path& work) {
    Outcome out;
    auto data = work / "abl_data";
    write_dataset(data, 2, 64, 64, 8000);
    DatasetIndex index = scan_dataset(data);

    RunConfig base;
    base.seed = 81;
    base.workdir = work.string();
    base.data_root = "abl_data";
    base.patch = 32;
    base.stage1.msfem.channels = 8;
    base.stage1.tb.embed_dim = 8;
    base.stage1.msfem.repeats = 2;
    base.stage1.tb.repeats = 2;
    base.stage1.tb.heads = 2;
    base.stage1.tb.window = 4;
    base.steps = 20;
    base.unet_depth = 3;
    base.unet_base_width = 8;
    base.unet_max_width = 32;
    base.time_embed_dim = 16;
    base.hfah_taps = 2;
    base.hfah_head_width = 8;
    base.batch = 1;
    base.lr = 1e-3;
    base.stage1_steps = 3;
    base.stage2_steps = 3;
    base.log_every = 0;

    struct Variant {
        std::string name;
        std::function<void(RunConfig&)> apply;
    };
    std::vector<Variant> variants = {
        {"full", [](RunConfig&) {}},
        {"no_sam", [](RunConfig& c) { c.ablation.no_sam = true; }},
        {"no_ir_mask", [](RunConfig& c) { c.ablation.no_ir_mask = true; }},
        {"no_vis_mask", [](RunConfig& c) { c.ablation.no_vis_mask = true; }},
        {"no_stage1", [](RunConfig& c) { c.ablation.no_stage1 = true; }},
        {"no_stage2", [](RunConfig& c) { c.ablation.no_stage2 = true; }},
        {"no_diffusion", [](RunConfig& c) { c.ablation.no_diffusion = true; }},
        {"no_hfah", [](RunConfig& c) { c.ablation.no_hfah = true; }},
        {"repeats2", [](RunConfig& c) { c.stage1.msfem.repeats = c.stage1.tb.repeats = 2; }},
        {"repeats3", [](RunConfig& c) { c.stage1.msfem.repeats = c.stage1.tb.repeats = 3; }},
        {"repeats4", [](RunConfig& c) { c.stage1.msfem.repeats = c.stage1.tb.repeats = 4; }},
    };

    std::ostringstream log;
    for (const auto& variant : variants) {
        try {
            RunConfig cfg = base;
            variant.apply(cfg);
            cfg.checkpoint_dir = "ckpt_" + variant.name;
            cfg.validate();

            std::filesystem::path s1_path, s2_path;
            if (!cfg.ablation.no_stage1) s1_path = train_stage1(cfg, log).best_path;
            if (!cfg.ablation.no_stage2) s2_path = train_stage2(cfg, s1_path, log).best_path;

            auto fused_dir = work / ("fused_" + variant.name);
            std::filesystem::create_directories(fused_dir);
            for (std::size_t i = 0; i < index.size(); ++i) {
                ImagePair pair = load_pair(index.at(i));
                FusedImage fused = fuse(cfg, s1_path, s2_path, pair);
                write_png(fused_dir / (pair.id + ".png"), Image(fused.data, ValueRange::Unit));
            }
            metrics::MetricReport report = metrics::evaluate_all(index, fused_dir, 1);
            out.require(report.complete() && report.rows.size() == index.size(),
                        variant.name + ": incomplete metric report");
            for (const auto& row : report.rows)
                out.require(std::isfinite(row.en) && std::isfinite(row.vif) &&
                                std::isfinite(row.qabf),
                            variant.name + ": non-finite metric");
        } catch (const std::exception& e) {
            out.require(false, variant.name + " raised: " + e.what());
        }
    }
    out.detail << variants.size() << " variants trained, fused, and evaluated";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 9: structural identities
// ---------------------------------------------------------------------------
Outcome criterion9() {
    Outcome out;

    nn::ParamStore ps(91);
    Msfem msfem(ps, "m", 8);
    ps.at("m.reduce.weight")->value.fill(0.0);
    ps.at("m.reduce.bias")->value.fill(-20.0);
    Tensor x = random_tensor({8, 16, 16}, 91);
    ad::Var mo = msfem.forward(ad::constant(x));
    double worst = 0;
    for (std::int64_t i = 0; i < x.size(); ++i)
        worst = std::max(worst, std::fabs(mo->value[i] - x[i]));
    out.require(worst <= 1e-6, "MSFEM saturation identity off by " + std::to_string(worst));

    TBConfig tcfg;
    tcfg.embed_dim = 8;
    tcfg.heads = 2;
    tcfg.window = 4;
    nn::ParamStore ps2(92);
    TransformerBlock tb(ps2, "tb", tcfg);
    ps2.at("tb.proj.weight")->value.fill(0.0);
    ps2.at("tb.proj.bias")->value.fill(0.0);
    ps2.at("tb.fc2.weight")->value.fill(0.0);
    ps2.at("tb.fc2.bias")->value.fill(0.0);
    Tensor tx = random_tensor({8, 16, 16}, 92);
    out.require(tb.forward(ad::constant(tx))->value == tx, "TB residual identity not exact");

    nn::ParamStore ps3(93);
    UNetConfig ucfg;
    ucfg.depth = 3;
    ucfg.base_width = 6;
    ucfg.max_width = 24;
    ucfg.time_embed_dim = 8;
    UNet unet(ps3, ucfg, 2);
    HFAHConfig hcfg;
    hcfg.tap_levels = 2;
    hcfg.head_width = 8;
    Hfah hfah(ps3, hcfg, unet.tap_widths());
    std::vector<ad::Var> taps = {ad::constant(random_tensor({6, 16, 16}, 93)),
                                 ad::constant(random_tensor({12, 8, 8}, 94))};
    Tensor hv = hfah.forward(taps)->value;
    bool in_range = true;
    for (std::int64_t i = 0; i < hv.size(); ++i)
        in_range = in_range && hv[i] >= 0.0 && hv[i] <= 1.0;
    out.require(in_range, "HFAH output escapes [0,1]");

    Rng rng(95);
    Tensor f(std::vector<int>{3, 8, 8});
    rng.fill_uniform(f, 0.0, 1.0);
    Tensor mi(std::vector<int>{1, 8, 8}), mv(std::vector<int>{1, 8, 8});
    rng.fill_uniform(mi, 0.0, 1.0);
    rng.fill_uniform(mv, 0.0, 1.0);
    ConditionedSample cs = to_conditioned_sample(
        FusedImage(f, FusionStage::Preliminary),
        MaskPair(Image(mi, ValueRange::Unit), Image(mv, ValueRange::Unit),
                 MaskProvenance::Synthetic));
    FusedImage f2;
    MaskPair m2;
    split_conditioned(cs, f2, m2);
    double round = 0;
    for (std::int64_t i = 0; i < f.size(); ++i)
        round = std::max(round, std::fabs(f2.data[i] - f[i]));
    out.require(round <= 1e-7, "layout round trip error " + std::to_string(round));
    out.require(m2.m_ir.data == mi && m2.m_vis.data == mv, "mask channels not exact");
    out.detail << "MSFEM/TB/HFAH/layout identities hold";
    return out;
}

// ---------------------------------------------------------------------------
// criterion 10: reproducibility
// ---------------------------------------------------------------------------
Outcome criterion10(const std::filesystem::path& work) {
    Outcome out;
    auto data = work / "repro";
    write_dataset(data, 1, 32, 32, 1000);
    RunConfig cfg;
    cfg.seed = 101;
    cfg.workdir = work.string();
    cfg.data_root = "repro";
    cfg.patch = 16;
    cfg.stage1.msfem.channels = 8;
    cfg.stage1.tb.embed_dim = 8;
    cfg.stage1.msfem.repeats = 2;
    cfg.stage1.tb.repeats = 2;
    cfg.stage1.tb.heads = 2;
    cfg.stage1.tb.window = 4;
    cfg.steps = 20;
    cfg.unet_depth = 3;
    cfg.unet_base_width = 8;
    cfg.unet_max_width = 32;
    cfg.time_embed_dim = 16;
    cfg.hfah_taps = 2;
    cfg.hfah_head_width = 8;
    cfg.batch = 1;
    cfg.lr = 1e-3;
    cfg.stage1_steps = 3;
    cfg.stage2_steps = 3;
    cfg.log_every = 0;
    cfg.checkpoint_dir = "ckpt_c10";
    cfg.validate();

    std::ostringstream log;
    TrainResult s1 = train_stage1(cfg, log);
    TrainResult s2 = train_stage2(cfg, s1.best_path, log);

    ImagePair pair = make_pair("rp", 48, 48, 1001);
    FusedImage a = fuse(cfg, s1.best_path, s2.best_path, pair);
    FusedImage b = fuse(cfg, s1.best_path, s2.best_path, pair);
    out.require(a.data == b.data, "fuse outputs differ bitwise");

    auto pa = work / "repro_a.png", pb = work / "repro_b.png";
    write_png(pa, Image(a.data, ValueRange::Unit));
    write_png(pb, Image(b.data, ValueRange::Unit));
    out.require(sha256_file_hex(pa) == sha256_file_hex(pb), "fused PNG hashes differ");

    Stage2Bundle s2a = build_stage2(cfg);
    {
        Checkpoint ck = load_checkpoint(s2.best_path);
        restore_params(ck, s2a.ps);
    }
    Tensor i_t = random_tensor({5, 16, 16}, 1002);
    ad::NoGradScope ng;
    Tensor before = s2a.unet->forward(ad::constant(i_t), 5).eps_hat->value;
    Checkpoint rt = snapshot(2, 3, cfg.seed, config_to_toml(cfg), s2a.ps);
    save_checkpoint(rt, work / "rt.ckpt");
    Stage2Bundle s2b = build_stage2(cfg);
    restore_params(load_checkpoint(work / "rt.ckpt"), s2b.ps);
    Tensor after = s2b.unet->forward(ad::constant(i_t), 5).eps_hat->value;
    out.require(before == after, "checkpoint round trip changed forward outputs");
    out.detail << "bitwise fuse outputs, equal hashes, checkpoint round trip exact";
    return out;
}

} // namespace

int main() {
    TempDir work;
    struct Entry {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    std::vector<Entry> entries = {
        {1, "diffusion marginal correctness (Monte-Carlo vs closed form)", criterion1},
        {2, "Markov composition matches closed-form sampling", criterion2},
        {3, "oracle reverse chain reconstructs the condition", criterion3},
        {4, "loss zero cases and mask-loss weighting", criterion4},
        {5, "finite-difference gradients through the Stage-II graph", criterion5},
        {6, "metric oracles and identities", criterion6},
        {7, "overfit smoke tests (Stage I and Stage II)",
         [&] { return criterion7(work.path()); }},
        {8, "ablation variants run end to end", [&] { return criterion8(work.path()); }},
        {9, "structural identities", criterion9},
        {10, "reproducibility (bitwise fuse, checkpoint round trip)",
         [&] { return criterion10(work.path()); }},
    };

    int failures = 0;
    for (const auto& e : entries) {
        auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = e.run();
        } catch (const std::exception& ex) {
            out.pass = false;
            out.detail << "exception: " << ex.what();
        }
        double secs = seconds_since(t0);
        std::printf("%s criterion %2d: %s [%s] (%.1fs)\n", out.pass ? "PASS" : "FAIL", e.id,
                    e.name, out.detail.str().c_str(), secs);
        std::fflush(stdout);
        if (!out.pass) ++failures;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
