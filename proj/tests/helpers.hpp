#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sgdfuse/autodiff.hpp"
#include "sgdfuse/dataset.hpp"
#include "sgdfuse/image.hpp"
#include "sgdfuse/nn.hpp"
#include "sgdfuse/rng.hpp"

namespace testutil {

using namespace sgdfuse;

// Unique scratch directory, removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// IR: soft thermal blobs on a gentle vertical ramp.
Image make_ir(int h, int w, std::uint64_t seed);
// VIS: RGB with sinusoidal texture and a bright rectangle.
Image make_vis(int h, int w, std::uint64_t seed);
ImagePair make_pair(const std::string& id, int h, int w, std::uint64_t seed);

// Round-trips image values through 8-bit quantization (PNG semantics).
Image quantized(const Image& img);

// Writes ir/ and vis/ (and optionally masks_*) PNG trees; returns the ids.
std::vector<std::string> write_dataset(const std::filesystem::path& root, int n, int h, int w,
                                       std::uint64_t seed, bool with_masks = false);

Tensor random_tensor(const std::vector<int>& dims, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0);

// Central finite differences vs analytic gradient through `loss_fn`, sampling
// `samples` coordinates in each listed parameter. Returns max relative error;
// comparisons use |num - ana| / max(|num|, |ana|, floor).
struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    std::string worst; // "param[i]"
};

GradCheckResult grad_check(const std::vector<std::pair<std::string, ad::Var>>& params,
                           const std::function<double()>& loss_fn,
                           const std::function<ad::Var()>& loss_var_fn, int samples,
                           std::uint64_t seed, double h = 1e-5, double floor = 1e-6);

} // namespace testutil
