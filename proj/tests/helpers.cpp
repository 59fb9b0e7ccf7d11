#include "helpers.hpp"

#include <unistd.h>

#include <atomic>
#include <cmath>

#include "sgdfuse/png_io.hpp"

namespace testutil {

namespace fs = std::filesystem;

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("sgdfuse_test_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter.fetch_add(1)));
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

Image make_ir(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    int blobs = 2 + static_cast<int>(rng.uniform_int(0, 2));
    std::vector<double> cx(blobs), cy(blobs), s(blobs), amp(blobs);
    for (int b = 0; b < blobs; ++b) {
        cx[b] = rng.uniform(0.15, 0.85) * w;
        cy[b] = rng.uniform(0.15, 0.85) * h;
        s[b] = rng.uniform(0.05, 0.15) * std::min(h, w);
        amp[b] = rng.uniform(0.5, 0.9);
    }
    Tensor t(std::vector<int>{1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = 0.08 + 0.15 * y / std::max(1, h - 1);
            for (int b = 0; b < blobs; ++b) {
                double dx = x - cx[b], dy = y - cy[b];
                v += amp[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * s[b] * s[b]));
            }
            t.at(0, y, x) = std::clamp(v, 0.0, 1.0);
        }
    return Image(std::move(t), ValueRange::Unit);
}

Image make_vis(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    double fx = rng.uniform(2.0, 5.0), fy = rng.uniform(2.0, 5.0);
    double phase = rng.uniform(0.0, 6.28);
    int rx0 = static_cast<int>(rng.uniform(0.1, 0.5) * w);
    int ry0 = static_cast<int>(rng.uniform(0.1, 0.5) * h);
    int rw = std::max(4, static_cast<int>(0.25 * w));
    int rh = std::max(4, static_cast<int>(0.25 * h));
    Tensor t(std::vector<int>{3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double base = 0.35 + 0.2 * std::sin(fx * 6.28 * x / w + phase) *
                                     std::cos(fy * 6.28 * y / h);
            bool in_rect = x >= rx0 && x < rx0 + rw && y >= ry0 && y < ry0 + rh;
            double r = base + (in_rect ? 0.3 : 0.0);
            double g = base * 0.9 + (in_rect ? 0.25 : 0.0);
            double b = base * 0.8 + 0.1 * x / std::max(1, w - 1);
            t.at(0, y, x) = std::clamp(r, 0.0, 1.0);
            t.at(1, y, x) = std::clamp(g, 0.0, 1.0);
            t.at(2, y, x) = std::clamp(b, 0.0, 1.0);
        }
    return Image(std::move(t), ValueRange::Unit);
}

ImagePair make_pair(const std::string& id, int h, int w, std::uint64_t seed) {
    return ImagePair(make_ir(h, w, seed), make_vis(h, w, seed + 1), id);
}

Image quantized(const Image& img) {
    Tensor t = img.data;
    for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = std::lround(t[i] * 255.0) / 255.0;
    return Image(std::move(t), img.range);
}

std::vector<std::string> write_dataset(const fs::path& root, int n, int h, int w,
                                       std::uint64_t seed, bool with_masks) {
    fs::create_directories(root / "ir");
    fs::create_directories(root / "vis");
    if (with_masks) {
        fs::create_directories(root / "masks_ir");
        fs::create_directories(root / "masks_vis");
    }
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) {
        char name[16];
        std::snprintf(name, sizeof(name), "p%04d", i);
        ids.emplace_back(name);
        ImagePair pair = make_pair(name, h, w, seed + 10 * static_cast<std::uint64_t>(i));
        write_png(root / "ir" / (ids.back() + ".png"), pair.ir);
        write_png(root / "vis" / (ids.back() + ".png"), pair.vis);
        if (with_masks) {
            Rng rng(seed + 77 + i);
            Tensor mi(std::vector<int>{1, h, w}, 0.0), mv(std::vector<int>{1, h, w}, 0.0);
            for (int y = h / 4; y < 3 * h / 4; ++y)
                for (int x = w / 4; x < 3 * w / 4; ++x) mi.at(0, y, x) = 1.0;
            for (int y = 0; y < h; ++y)
                for (int x = w / 2; x < w; ++x) mv.at(0, y, x) = 1.0;
            write_png(root / "masks_ir" / (ids.back() + ".png"),
                      Image(std::move(mi), ValueRange::Unit));
            write_png(root / "masks_vis" / (ids.back() + ".png"),
                      Image(std::move(mv), ValueRange::Unit));
        }
    }
    return ids;
}

Tensor random_tensor(const std::vector<int>& dims, std::uint64_t seed, double lo, double hi) {
    Tensor t(dims);
    Rng rng(seed);
    rng.fill_uniform(t, lo, hi);
    return t;
}

GradCheckResult grad_check(const std::vector<std::pair<std::string, ad::Var>>& params,
                           const std::function<double()>& loss_fn,
                           const std::function<ad::Var()>& loss_var_fn, int samples,
                           std::uint64_t seed, double h, double floor) {
    // analytic gradients
    std::vector<ad::Var> vars;
    for (const auto& [_, v] : params) vars.push_back(v);
    ad::zero_grad(vars);
    ad::Var loss = loss_var_fn();
    ad::backward(loss);

    GradCheckResult res;
    Rng rng(seed);
    for (const auto& [name, p] : params) {
        for (int s = 0; s < samples; ++s) {
            std::int64_t i = rng.uniform_int(0, p->value.size() - 1);
            double saved = p->value[i];
            p->value[i] = saved - h;
            double f0 = loss_fn();
            p->value[i] = saved + h;
            double f1 = loss_fn();
            p->value[i] = saved;
            double num = (f1 - f0) / (2.0 * h);
            double ana = p->grad_alloc ? p->grad[i] : 0.0;
            double denom = std::max({std::fabs(num), std::fabs(ana), floor});
            double rel = std::fabs(num - ana) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

} // namespace testutil
