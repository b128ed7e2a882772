#pragma once

#include <cmath>
#include <vector>

#include "regionroute/common.hpp"

namespace rr {

// Cosine cumulative-signal schedule, t in [1, T]. alpha_bar is strictly
// decreasing with alpha_bar[1] near 1 and alpha_bar[T] near 0.
template <typename T = double>
struct DiffusionSchedule {
    int steps = 0;
    std::vector<T> alpha_bar;  // index 0 unused; alpha_bar[t] for t in [1,T]

    static DiffusionSchedule cosine(int timesteps) {
        if (timesteps < 2) throw ConfigError("schedule needs at least 2 timesteps");
        DiffusionSchedule s;
        s.steps = timesteps;
        s.alpha_bar.assign(static_cast<size_t>(timesteps) + 1, T(0));
        const double off = 0.008;
        auto f = [&](double t) {
            const double v = std::cos((t / timesteps + off) / (1.0 + off) * M_PI / 2.0);
            return v * v;
        };
        const double f0 = f(0.0);
        for (int t = 1; t <= timesteps; ++t) {
            double ab = f(static_cast<double>(t)) / f0;
            ab = std::min(ab, 0.9999);
            s.alpha_bar[static_cast<size_t>(t)] = static_cast<T>(std::max(ab, 1e-5));
        }
        return s;
    }

    T signal(int t) const { return std::sqrt(at(t)); }
    T noise(int t) const { return std::sqrt(T(1) - at(t)); }

    T at(int t) const {
        if (t < 1 || t > steps) throw ConfigError("timestep out of range");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
template <typename T>
std::vector<T> add_noise(const std::vector<T>& x0, const std::vector<T>& eps, int t,
                         const DiffusionSchedule<T>& sched) {
    if (x0.size() != eps.size()) throw ConfigError("add_noise: shape mismatch");
    const T a = sched.signal(t);
    const T b = sched.noise(t);
    std::vector<T> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

}  // namespace rr
