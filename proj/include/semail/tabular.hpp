#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "semail/rng.hpp"

namespace semail {

// Finite POMDP whose state factorizes as s = (z+, z-): the task component
// transitions under actions, the background component transitions on its
// own, and the joint transition is exactly the product of the two factors.
// Policies are tables over z+ only. Observations come from a deterministic
// render map on (z+, z-) that may merge states.
struct TabularFactorizedPOMDP {
    int n_zp = 0, n_zm = 0, n_a = 0, n_obs = 0;
    std::vector<double> p_task;  // [zp][a][zp']
    std::vector<double> p_bg;    // [zm][zm']
    std::vector<int> obs_map;    // [zp][zm] -> o
    std::vector<double> reward;  // [zp][a], values in [0,1]
    std::vector<double> init_zp; // [zp]
    std::vector<double> init_zm; // [zm]

    double task(int zp, int a, int zp2) const { return p_task[(static_cast<std::size_t>(zp) * n_a + a) * n_zp + zp2]; }
    double bg(int zm, int zm2) const { return p_bg[static_cast<std::size_t>(zm) * n_zm + zm2]; }
    int obs(int zp, int zm) const { return obs_map[static_cast<std::size_t>(zp) * n_zm + zm]; }
    double rew(int zp, int a) const { return reward[static_cast<std::size_t>(zp) * n_a + a]; }

    void validate(double tol = 1e-12) const {
        auto check_rows = [&](const std::vector<double>& table, int rows, int cols,
                              const char* what) {
            for (int r = 0; r < rows; ++r) {
                double s = 0;
                for (int c = 0; c < cols; ++c) {
                    const double v = table[static_cast<std::size_t>(r) * cols + c];
                    if (v < 0) throw std::invalid_argument(std::string(what) + ": negative entry");
                    s += v;
                }
                if (std::abs(s - 1.0) > tol)
                    throw std::invalid_argument(std::string(what) + ": row does not sum to 1");
            }
        };
        check_rows(p_task, n_zp * n_a, n_zp, "task transitions");
        check_rows(p_bg, n_zm, n_zm, "background transitions");
        check_rows(init_zp, 1, n_zp, "task init");
        check_rows(init_zm, 1, n_zm, "background init");
    }

    // stationary distribution of the background chain by power iteration
    std::vector<double> bg_stationary(int iters = 20000) const {
        std::vector<double> mu(n_zm, 1.0 / n_zm), nxt(n_zm);
        for (int it = 0; it < iters; ++it) {
            for (int j = 0; j < n_zm; ++j) {
                double s = 0;
                for (int i = 0; i < n_zm; ++i) s += mu[i] * bg(i, j);
                nxt[j] = s;
            }
            double total = 0;
            for (const double v : nxt) total += v;
            for (auto& v : nxt) v /= total;
            mu.swap(nxt);
        }
        return mu;
    }
};

// policy table over z+: [zp][a]
using PolicyTable = std::vector<double>;

namespace tabular {

inline std::vector<double> random_simplex_row(RandomSource& rng, int n) {
    std::vector<double> row(n);
    double total = 0;
    for (auto& v : row) {
        v = rng.uniform(0.05, 1.0);
        total += v;
    }
    for (auto& v : row) v /= total;
    return row;
}

inline PolicyTable random_policy(RandomSource& rng, int n_zp, int n_a) {
    PolicyTable pi(static_cast<std::size_t>(n_zp) * n_a);
    for (int z = 0; z < n_zp; ++z) {
        auto row = random_simplex_row(rng, n_a);
        for (int a = 0; a < n_a; ++a) pi[static_cast<std::size_t>(z) * n_a + a] = row[a];
    }
    return pi;
}

// stationary_bg_init makes the occupancy factorize exactly as
// rho(z,a) = rho(z+,a) * mu(z-) with the same conditional for every policy,
// the regime in which the z-space and z+-space divergences coincide
inline TabularFactorizedPOMDP random_instance(RandomSource& rng, int n_zp, int n_zm, int n_a,
                                              int n_obs, bool stationary_bg_init) {
    TabularFactorizedPOMDP m;
    m.n_zp = n_zp;
    m.n_zm = n_zm;
    m.n_a = n_a;
    m.n_obs = n_obs;
    m.p_task.resize(static_cast<std::size_t>(n_zp) * n_a * n_zp);
    for (int z = 0; z < n_zp; ++z)
        for (int a = 0; a < n_a; ++a) {
            auto row = random_simplex_row(rng, n_zp);
            for (int z2 = 0; z2 < n_zp; ++z2)
                m.p_task[(static_cast<std::size_t>(z) * n_a + a) * n_zp + z2] = row[z2];
        }
    m.p_bg.resize(static_cast<std::size_t>(n_zm) * n_zm);
    for (int z = 0; z < n_zm; ++z) {
        auto row = random_simplex_row(rng, n_zm);
        for (int z2 = 0; z2 < n_zm; ++z2) m.p_bg[static_cast<std::size_t>(z) * n_zm + z2] = row[z2];
    }
    m.obs_map.resize(static_cast<std::size_t>(n_zp) * n_zm);
    for (auto& o : m.obs_map) o = static_cast<int>(rng.uniform_index(n_obs));
    m.reward.resize(static_cast<std::size_t>(n_zp) * n_a);
    for (auto& r : m.reward) r = rng.uniform(0.0, 1.0);
    m.init_zp = random_simplex_row(rng, n_zp);
    m.init_zm = stationary_bg_init ? m.bg_stationary() : random_simplex_row(rng, n_zm);
    m.validate(1e-9);
    return m;
}

} // namespace tabular
} // namespace semail
