#include "sgdfuse/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T)
        throw RangeError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    if (kind != ScheduleKind::Linear) throw ConfigError("schedule: unknown kind");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double acc = 1.0;
    for (int i = 0; i < T; ++i) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(i) / (T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        acc *= s.alpha[i];
        s.alpha_bar[i] = acc;
    }
    return s;
}

Tensor q_sample(const Tensor& i0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    require_same_shape(i0, eps, "q_sample");
    double ab = sched.alpha_bar_at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = i0;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + b * eps[i];
    return out;
}

Tensor q_step(const Tensor& i_prev, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    require_same_shape(i_prev, eps, "q_step");
    double al = sched.alpha[t - 1];
    double a = std::sqrt(al), b = std::sqrt(1.0 - al);
    Tensor out = i_prev;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + b * eps[i];
    return out;
}

Tensor posterior_step(const Tensor& i_t, int t, const Tensor& eps_hat, const Tensor& z,
                      const NoiseSchedule& sched) {
    sched.check_t(t);
    require_same_shape(i_t, eps_hat, "posterior_step");
    require_same_shape(i_t, z, "posterior_step noise");
    double at = sched.alpha[t - 1];
    double bt = sched.beta[t - 1];
    double ab_t = sched.alpha_bar_at(t);
    double ab_prev = sched.alpha_bar_at(t - 1);
    double inv_sqrt_a = 1.0 / std::sqrt(at);
    double noise_coef = bt / std::sqrt(1.0 - ab_t);
    double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * bt); // 0 at t=1
    Tensor out = i_t;
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = inv_sqrt_a * (out[i] - noise_coef * eps_hat[i]) + sigma * z[i];
    return out;
}

ChainResult sample_chain(const ConditionedSample& condition, int t_start, const DenoiseFn& denoiser,
                         const NoiseSchedule& sched, std::uint64_t rng_seed,
                         const std::vector<int>& tap_timesteps, bool zero_posterior_noise) {
    sched.check_t(t_start);
    std::set<int> want(tap_timesteps.begin(), tap_timesteps.end());
    for (int t : want) sched.check_t(t);

    Rng rng = Rng(rng_seed).derive("chain");
    Tensor eps(condition.data.dims());
    rng.fill_normal(eps);
    Tensor sample = q_sample(condition.data, t_start, eps, sched);

    ChainResult result;
    Tensor z(condition.data.dims(), 0.0);
    for (int t = t_start; t >= 1; --t) {
        std::vector<Tensor> taps;
        bool record = want.count(t) != 0;
        Tensor eps_hat;
        try {
            eps_hat = denoiser(sample, t, record ? &taps : nullptr);
        } catch (const Error& e) {
            throw NumericalError("denoiser failed at step " + std::to_string(t) + ": " +
                                 e.what());
        }
        if (!eps_hat.all_finite())
            throw NumericalError("denoiser produced non-finite output at step " +
                                 std::to_string(t));
        if (record) result.taps.emplace(t, std::move(taps));
        if (t > 1 && !zero_posterior_noise) {
            rng.fill_normal(z);
        } else {
            z.fill(0.0); // final step is deterministic
        }
        sample = posterior_step(sample, t, eps_hat, z, sched);
    }
    result.final_sample = std::move(sample);
    return result;
}

std::vector<int> scale_timesteps(const std::vector<int>& reference_steps, int T) {
    std::set<int> scaled;
    for (int t : reference_steps) {
        int s = static_cast<int>(std::lround(static_cast<double>(t) * T / 1000.0));
        scaled.insert(std::clamp(s, 1, T));
    }
    return {scaled.begin(), scaled.end()};
}

} // namespace sgdfuse
