#include "sgdfuse/maskprovider.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "sgdfuse/errors.hpp"
#include "sgdfuse/losses.hpp"
#include "sgdfuse/png_io.hpp"
#include "sgdfuse/rng.hpp"

namespace sgdfuse {

MaskSourceConfig::Kind MaskSourceConfig::parse_kind(const std::string& s) {
    if (s == "file") return Kind::File;
    if (s == "synthetic") return Kind::Synthetic;
    if (s == "remote") return Kind::Remote;
    if (s == "random_patch") return Kind::RandomPatch;
    throw ConfigError("unknown mask source '" + s + "'");
}

MaskPair masks_from_files(const IndexEntry& entry, const ImagePair& pair) {
    if (!entry.has_masks())
        throw IoError("entry '" + entry.id + "' has no mask files");
    Image mi = read_png(*entry.m_ir_path);
    Image mv = read_png(*entry.m_vis_path);
    if (mi.channels() != 1 || mv.channels() != 1)
        throw IoError("mask files for '" + entry.id + "' must be grayscale");
    if (mi.height() != pair.height() || mi.width() != pair.width() ||
        mv.height() != pair.height() || mv.width() != pair.width())
        throw DimensionError("mask size does not match pair '" + entry.id + "'");
    return MaskPair(std::move(mi), std::move(mv), MaskProvenance::File);
}

namespace {

// nearest-rank threshold: pixels >= sorted[round(q*n)] are selected
Tensor quantile_mask(const Tensor& score, double q, const WarnFn& warn, const char* what) {
    int h = score.dim(1), w = score.dim(2);
    std::int64_t n = static_cast<std::int64_t>(h) * w;
    Tensor mask(std::vector<int>{1, h, w}, 0.0);
    double lo = score[0], hi = score[0];
    for (std::int64_t i = 0; i < n; ++i) {
        lo = std::min(lo, score[i]);
        hi = std::max(hi, score[i]);
    }
    if (hi - lo < 1e-12) {
        if (warn) warn(std::string(what) + ": degenerate (constant) image, mask set to zeros");
        return mask;
    }
    std::vector<double> sorted(score.data(), score.data() + n);
    std::sort(sorted.begin(), sorted.end());
    std::int64_t idx = std::min<std::int64_t>(n - 1, std::llround(q * static_cast<double>(n)));
    double thr = sorted[static_cast<std::size_t>(idx)];
    for (std::int64_t i = 0; i < n; ++i) mask[i] = score[i] >= thr ? 1.0 : 0.0;
    return mask;
}

} // namespace

MaskPair synth_masks(const ImagePair& pair, double q_ir, double q_vis, const WarnFn& warn) {
    if (q_ir <= 0.0 || q_ir >= 1.0 || q_vis <= 0.0 || q_vis >= 1.0)
        throw ConfigError("synthetic mask quantiles must be in (0,1)");
    Tensor mi = quantile_mask(pair.ir.data, q_ir, warn, "ir mask");
    Tensor grad = grad_operator(luma_bt601(pair.vis.data));
    Tensor mv = quantile_mask(grad, q_vis, warn, "vis mask");
    return MaskPair(Image(std::move(mi), ValueRange::Unit), Image(std::move(mv), ValueRange::Unit),
                    MaskProvenance::Synthetic);
}

namespace {

Tensor random_rect(int h, int w, double fraction, Rng& rng) {
    Tensor m(std::vector<int>{1, h, w}, 0.0);
    if (fraction >= 1.0) {
        m.fill(1.0);
        return m;
    }
    double area = fraction * h * w;
    double aspect = rng.uniform(0.5, 2.0);
    int rw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, w);
    int rh = std::clamp(static_cast<int>(std::lround(area / rw)), 1, h);
    int y0 = static_cast<int>(rng.uniform_int(0, h - rh));
    int x0 = static_cast<int>(rng.uniform_int(0, w - rw));
    for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) m.at(0, y, x) = 1.0;
    return m;
}

} // namespace

MaskPair random_patch_masks(const ImagePair& pair, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ConfigError("random patch fraction must be in (0,1]");
    Rng base(seed);
    Rng ri = base.derive("rect_ir");
    Rng rv = base.derive("rect_vis");
    Tensor mi = random_rect(pair.height(), pair.width(), fraction, ri);
    Tensor mv = random_rect(pair.height(), pair.width(), fraction, rv);
    return MaskPair(Image(std::move(mi), ValueRange::Unit), Image(std::move(mv), ValueRange::Unit),
                    MaskProvenance::RandomPatch);
}

namespace {

Image post_segment(httplib::Client& cli, const Image& img, int h, int w, int& attempts,
                   const std::string& endpoint) {
    std::vector<std::uint8_t> png = encode_png(img);
    std::string body(png.begin(), png.end());
    for (int attempt = 0; attempt < 2; ++attempt) {
        ++attempts;
        auto res = cli.Post("/segment", body, "image/png");
        if (!res) continue; // timeout or connect failure -> retry once
        if (res->status >= 500) continue;
        if (res->status != 200)
            throw RemoteMaskError("endpoint " + endpoint + " returned status " +
                                  std::to_string(res->status));
        std::vector<std::uint8_t> bytes(res->body.begin(), res->body.end());
        Image mask = decode_png(bytes);
        if (mask.channels() != 1)
            throw RemoteMaskError("endpoint returned non-grayscale mask");
        if (mask.height() != h || mask.width() != w)
            throw RemoteMaskError("mask size " + std::to_string(mask.width()) + "x" +
                                  std::to_string(mask.height()) + " does not match image " +
                                  std::to_string(w) + "x" + std::to_string(h));
        return mask;
    }
    throw RemoteMaskError("endpoint " + endpoint + " unreachable (timeout after retry)");
}

} // namespace

MaskPair fetch_masks_remote(const ImagePair& pair, const std::string& endpoint, double timeout_s,
                            int* attempts_out) {
    httplib::Client cli(endpoint);
    int to_s = std::max(1, static_cast<int>(timeout_s));
    int to_us = static_cast<int>((timeout_s - std::floor(timeout_s)) * 1e6);
    cli.set_connection_timeout(to_s, to_us);
    cli.set_read_timeout(to_s, to_us);
    cli.set_write_timeout(to_s, to_us);

    int local_attempts = 0;
    int& attempts = attempts_out ? *attempts_out : local_attempts;
    attempts = 0;
    int h = pair.height(), w = pair.width();
    Image mi = post_segment(cli, pair.ir, h, w, attempts, endpoint);
    Image mv = post_segment(cli, pair.vis, h, w, attempts, endpoint);
    return MaskPair(std::move(mi), std::move(mv), MaskProvenance::Remote);
}

MaskPair provide_masks(const MaskSourceConfig& cfg, const IndexEntry& entry,
                       const ImagePair& pair, std::uint64_t pair_seed, const WarnFn& warn) {
    using Kind = MaskSourceConfig::Kind;
    switch (cfg.kind) {
        case Kind::File:
            return masks_from_files(entry, pair);
        case Kind::Synthetic:
            return synth_masks(pair, cfg.q_ir, cfg.q_vis, warn);
        case Kind::RandomPatch:
            return random_patch_masks(pair, cfg.fraction, mix64(cfg.seed ^ mix64(pair_seed)));
        case Kind::Remote: {
            std::string endpoint = cfg.endpoint;
            if (const char* env = std::getenv("SGDFUSE_MASK_ENDPOINT"); env && *env)
                endpoint = env;
            if (endpoint.empty()) throw ConfigError("remote mask source without endpoint");
            try {
                return fetch_masks_remote(pair, endpoint, cfg.timeout_s);
            } catch (const RemoteMaskError& e) {
                if (!cfg.fallback_synthetic) throw;
                if (warn) warn(std::string("remote masks failed (") + e.what() +
                               "), falling back to synthetic");
                return synth_masks(pair, cfg.q_ir, cfg.q_vis, warn);
            }
        }
    }
    throw ConfigError("unhandled mask source");
}

} // namespace sgdfuse
