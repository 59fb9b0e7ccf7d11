#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "sgdfuse/image.hpp"
#include "sgdfuse/rng.hpp"
#include "sgdfuse/tensor.hpp"

namespace sgdfuse {

// beta/alpha/alpha_bar for t = 1..T, stored 0-indexed (index t-1).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; } // alpha_bar_0 := 1
    void check_t(int t) const;
};

enum class ScheduleKind { Linear };

NoiseSchedule make_schedule(int T, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::Linear);

// I_t = sqrt(alpha_bar_t) I_0 + sqrt(1 - alpha_bar_t) eps
Tensor q_sample(const Tensor& i0, int t, const Tensor& eps, const NoiseSchedule& sched);

// single Markov transition: I_t = sqrt(alpha_t) I_{t-1} + sqrt(1-alpha_t) eps
Tensor q_step(const Tensor& i_prev, int t, const Tensor& eps, const NoiseSchedule& sched);

// mu + sigma_t z with mu from the predicted noise and
// sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
Tensor posterior_step(const Tensor& i_t, int t, const Tensor& eps_hat, const Tensor& z,
                      const NoiseSchedule& sched);

// Denoiser callback: predicts noise for (I_t, t); when taps != nullptr the
// callee may record decoder feature maps there.
using DenoiseFn = std::function<Tensor(const Tensor& i_t, int t, std::vector<Tensor>* taps)>;

struct ChainResult {
    Tensor final_sample;                     // [5,H,W]
    std::map<int, std::vector<Tensor>> taps; // decoder features per recorded timestep
};

// Seeds I_{t_start} through q_sample, then walks posterior_step down to t=1
// (z=0 at the last step). Decoder features are recorded at tap_timesteps.
// zero_posterior_noise forces z=0 on every step (oracle-reconstruction mode).
ChainResult sample_chain(const ConditionedSample& condition, int t_start, const DenoiseFn& denoiser,
                         const NoiseSchedule& sched, std::uint64_t rng_seed,
                         const std::vector<int>& tap_timesteps = {},
                         bool zero_posterior_noise = false);

// Maps a full-scale (T=1000) timestep set onto this schedule.
std::vector<int> scale_timesteps(const std::vector<int>& reference_steps, int T);

} // namespace sgdfuse
