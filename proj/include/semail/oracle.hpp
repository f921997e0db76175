#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "semail/agent.hpp"
#include "semail/discriminator.hpp"
#include "semail/nn.hpp"
#include "semail/rng.hpp"
#include "semail/tabular.hpp"
#include "semail/worldmodel.hpp"

// Independent verification: everything in here is exact arithmetic over
// finite tables, controlled Monte Carlo, or finite differences. None of it
// reuses the code path it checks.
namespace semail::oracle {

// ---- f-divergences over finite tables ----

struct FDivergenceSpec {
    std::string name;
    std::function<double(double)> f; // convex, f(1) = 0
    bool finite_at_zero_q = false;   // lim_{q->0+} q*f(p/q) = zero_q_coef * p
    double zero_q_coef = 0.0;

    static FDivergenceSpec kl() {
        return {"KL", [](double t) { return t <= 0.0 ? 0.0 : t * std::log(t); }, false, 0.0};
    }
    static FDivergenceSpec js() {
        return {"JS",
                [](double t) {
                    if (t <= 0.0) return 0.5 * std::log(2.0);
                    return 0.5 * (t * std::log(2.0 * t / (1.0 + t)) + std::log(2.0 / (1.0 + t)));
                },
                true, 0.5 * std::log(2.0)};
    }
    static FDivergenceSpec tv() {
        return {"TV", [](double t) { return 0.5 * std::abs(t - 1.0); }, true, 0.5};
    }
    static FDivergenceSpec chi2() {
        return {"chi2", [](double t) { return (t - 1.0) * (t - 1.0); }, false, 0.0};
    }
    static std::vector<FDivergenceSpec> all() { return {kl(), js(), tv(), chi2()}; }

    bool convex_spot_check(int grid = 50) const {
        double prev_lo = 0.02, prev_hi = 6.0;
        for (int i = 0; i < grid; ++i)
            for (int j = i + 1; j < grid; ++j) {
                const double a = prev_lo + (prev_hi - prev_lo) * i / (grid - 1);
                const double b = prev_lo + (prev_hi - prev_lo) * j / (grid - 1);
                if (f(0.5 * (a + b)) > 0.5 * (f(a) + f(b)) + 1e-12) return false;
            }
        return std::abs(f(1.0)) < 1e-12;
    }
};

// D_f(p || q) = sum_i q_i f(p_i / q_i)
inline double f_divergence(const std::vector<double>& p, const std::vector<double>& q,
                           const FDivergenceSpec& spec) {
    if (p.size() != q.size()) throw std::invalid_argument("f_divergence: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (q[i] <= 0.0) {
            if (p[i] <= 0.0) continue;
            if (!spec.finite_at_zero_q)
                throw std::domain_error("f_divergence (" + spec.name +
                                        "): support violation, p > 0 where q = 0");
            acc += spec.zero_q_coef * p[i];
        } else {
            acc += q[i] * spec.f(p[i] / q[i]);
        }
    }
    return acc;
}

// ---- exact discounted occupancies ----

struct OccupancyTable {
    int n_zp = 0, n_zm = 0, n_a = 0;
    std::vector<double> joint; // [zp][zm][a], sums to 1

    double& at(int zp, int zm, int a) {
        return joint[(static_cast<std::size_t>(zp) * n_zm + zm) * n_a + a];
    }
    double at(int zp, int zm, int a) const {
        return joint[(static_cast<std::size_t>(zp) * n_zm + zm) * n_a + a];
    }

    std::vector<double> marginal_task_action() const {
        std::vector<double> out(static_cast<std::size_t>(n_zp) * n_a, 0.0);
        for (int zp = 0; zp < n_zp; ++zp)
            for (int zm = 0; zm < n_zm; ++zm)
                for (int a = 0; a < n_a; ++a)
                    out[static_cast<std::size_t>(zp) * n_a + a] += at(zp, zm, a);
        return out;
    }

    std::vector<double> observation_action(const TabularFactorizedPOMDP& m) const {
        std::vector<double> out(static_cast<std::size_t>(m.n_obs) * n_a, 0.0);
        for (int zp = 0; zp < n_zp; ++zp)
            for (int zm = 0; zm < n_zm; ++zm)
                for (int a = 0; a < n_a; ++a)
                    out[static_cast<std::size_t>(m.obs(zp, zm)) * n_a + a] += at(zp, zm, a);
        return out;
    }
};

inline int horizon_for(double gamma, double tail = 1e-12) {
    if (gamma <= 0.0) return 0;
    return static_cast<int>(std::ceil(std::log(tail) / std::log(gamma)));
}

// discounted state-action visitation by forward recursion, truncated where
// gamma^h < 1e-12 and renormalized to an exact distribution
inline OccupancyTable exact_occupancy(const TabularFactorizedPOMDP& m, const PolicyTable& pi,
                                      double gamma, int horizon) {
    m.validate(1e-9);
    for (int z = 0; z < m.n_zp; ++z) {
        double s = 0;
        for (int a = 0; a < m.n_a; ++a) s += pi[static_cast<std::size_t>(z) * m.n_a + a];
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument("exact_occupancy: policy rows must sum to 1");
    }
    // policy-averaged task transition A[zp][zp'] = sum_a pi(a|zp) p(zp'|zp,a)
    std::vector<double> A(static_cast<std::size_t>(m.n_zp) * m.n_zp, 0.0);
    for (int zp = 0; zp < m.n_zp; ++zp)
        for (int a = 0; a < m.n_a; ++a) {
            const double pa = pi[static_cast<std::size_t>(zp) * m.n_a + a];
            for (int z2 = 0; z2 < m.n_zp; ++z2)
                A[static_cast<std::size_t>(zp) * m.n_zp + z2] += pa * m.task(zp, a, z2);
        }

    std::vector<double> cur(static_cast<std::size_t>(m.n_zp) * m.n_zm);
    for (int zp = 0; zp < m.n_zp; ++zp)
        for (int zm = 0; zm < m.n_zm; ++zm)
            cur[static_cast<std::size_t>(zp) * m.n_zm + zm] = m.init_zp[zp] * m.init_zm[zm];

    std::vector<double> acc(cur.size(), 0.0), nxt(cur.size());
    double w = 1.0;
    for (int t = 0;; ++t) {
        for (std::size_t i = 0; i < cur.size(); ++i) acc[i] += w * cur[i];
        if (t >= horizon) break;
        std::fill(nxt.begin(), nxt.end(), 0.0);
        for (int zp = 0; zp < m.n_zp; ++zp)
            for (int zm = 0; zm < m.n_zm; ++zm) {
                const double mass = cur[static_cast<std::size_t>(zp) * m.n_zm + zm];
                if (mass == 0.0) continue;
                for (int z2 = 0; z2 < m.n_zp; ++z2) {
                    const double mz = mass * A[static_cast<std::size_t>(zp) * m.n_zp + z2];
                    for (int m2 = 0; m2 < m.n_zm; ++m2)
                        nxt[static_cast<std::size_t>(z2) * m.n_zm + m2] += mz * m.bg(zm, m2);
                }
            }
        cur.swap(nxt);
        w *= gamma;
    }

    OccupancyTable occ;
    occ.n_zp = m.n_zp;
    occ.n_zm = m.n_zm;
    occ.n_a = m.n_a;
    occ.joint.assign(static_cast<std::size_t>(m.n_zp) * m.n_zm * m.n_a, 0.0);
    for (int zp = 0; zp < m.n_zp; ++zp)
        for (int zm = 0; zm < m.n_zm; ++zm)
            for (int a = 0; a < m.n_a; ++a)
                occ.at(zp, zm, a) = acc[static_cast<std::size_t>(zp) * m.n_zm + zm] *
                                    pi[static_cast<std::size_t>(zp) * m.n_a + a];
    double total = 0;
    for (const double v : occ.joint) total += v;
    for (auto& v : occ.joint) v /= total;
    return occ;
}

// ---- Theorem chain: D_f(o,a) <= D_f(s,a) <= D_f(z+,a) ----

struct ChainCheck {
    std::string divergence;
    double d_obs = 0, d_state = 0, d_task = 0;
    bool chain_ok = false;
    bool equality_ok = false; // z-space vs z+-space under exact factorization
};

inline std::vector<ChainCheck> verify_divergence_chain(const TabularFactorizedPOMDP& m,
                                                       const PolicyTable& expert,
                                                       const PolicyTable& agent, double gamma,
                                                       const std::vector<FDivergenceSpec>& specs,
                                                       double tol = 1e-10) {
    const int h = horizon_for(gamma);
    const OccupancyTable occ_pi = exact_occupancy(m, agent, gamma, h);
    const OccupancyTable occ_e = exact_occupancy(m, expert, gamma, h);
    std::vector<ChainCheck> out;
    for (const auto& spec : specs) {
        ChainCheck c;
        c.divergence = spec.name;
        c.d_obs = f_divergence(occ_pi.observation_action(m), occ_e.observation_action(m), spec);
        c.d_state = f_divergence(occ_pi.joint, occ_e.joint, spec);
        c.d_task = f_divergence(occ_pi.marginal_task_action(), occ_e.marginal_task_action(), spec);
        c.chain_ok = (c.d_obs <= c.d_state + tol) && (c.d_state <= c.d_task + tol);
        c.equality_ok = std::abs(c.d_state - c.d_task) <= tol;
        out.push_back(c);
    }
    return out;
}

// ---- Return-gap bound ----

struct BoundCheck {
    double gap = 0;       // |J(pi_E, M+) - J(pi, M~+)|
    double tv = 0;        // D_TV between the two occupancies
    double eps_used = 0;  // realized max transition TV error
    double r_max = 0;
    double bound = 0;
    bool pass = false;
};

namespace detail {

// occupancy over (z+, a) in the task-only MDP with the given transitions
inline std::vector<double> task_occupancy(const TabularFactorizedPOMDP& m,
                                          const std::vector<double>& p_task,
                                          const PolicyTable& pi, double gamma) {
    const int h = horizon_for(gamma);
    std::vector<double> A(static_cast<std::size_t>(m.n_zp) * m.n_zp, 0.0);
    for (int zp = 0; zp < m.n_zp; ++zp)
        for (int a = 0; a < m.n_a; ++a) {
            const double pa = pi[static_cast<std::size_t>(zp) * m.n_a + a];
            for (int z2 = 0; z2 < m.n_zp; ++z2)
                A[static_cast<std::size_t>(zp) * m.n_zp + z2] +=
                    pa * p_task[(static_cast<std::size_t>(zp) * m.n_a + a) * m.n_zp + z2];
        }
    std::vector<double> cur = m.init_zp, acc(m.n_zp, 0.0), nxt(m.n_zp);
    double w = 1.0;
    for (int t = 0;; ++t) {
        for (int z = 0; z < m.n_zp; ++z) acc[z] += w * cur[z];
        if (t >= h) break;
        std::fill(nxt.begin(), nxt.end(), 0.0);
        for (int z = 0; z < m.n_zp; ++z)
            for (int z2 = 0; z2 < m.n_zp; ++z2)
                nxt[z2] += cur[z] * A[static_cast<std::size_t>(z) * m.n_zp + z2];
        cur.swap(nxt);
        w *= gamma;
    }
    std::vector<double> occ(static_cast<std::size_t>(m.n_zp) * m.n_a);
    for (int z = 0; z < m.n_zp; ++z)
        for (int a = 0; a < m.n_a; ++a)
            occ[static_cast<std::size_t>(z) * m.n_a + a] =
                acc[z] * pi[static_cast<std::size_t>(z) * m.n_a + a];
    double total = 0;
    for (const double v : occ) total += v;
    for (auto& v : occ) v /= total;
    return occ;
}

inline double expected_return(const TabularFactorizedPOMDP& m, const std::vector<double>& occ,
                              double gamma) {
    double j = 0;
    for (int z = 0; z < m.n_zp; ++z)
        for (int a = 0; a < m.n_a; ++a)
            j += occ[static_cast<std::size_t>(z) * m.n_a + a] * m.rew(z, a);
    return j / (1.0 - gamma);
}

} // namespace detail

// construct a perturbed task model with max transition TV error ~eps and
// check |J(pi_E, M+) - J(pi, M~+)| against the两-term bound
inline BoundCheck verify_return_gap_bound(const TabularFactorizedPOMDP& m,
                                          const PolicyTable& expert, const PolicyTable& agent,
                                          double eps, double gamma, RandomSource& rng) {
    std::vector<double> p_pert = m.p_task;
    double eps_used = 0.0;
    if (eps > 0.0) {
        for (int row = 0; row < m.n_zp * m.n_a; ++row) {
            auto target = tabular::random_simplex_row(rng, m.n_zp);
            double tv_full = 0.0;
            for (int z2 = 0; z2 < m.n_zp; ++z2)
                tv_full +=
                    std::abs(target[z2] - m.p_task[static_cast<std::size_t>(row) * m.n_zp + z2]);
            tv_full *= 0.5;
            const double delta = tv_full > 0 ? std::min(1.0, eps / tv_full) : 0.0;
            double tv_row = 0.0;
            for (int z2 = 0; z2 < m.n_zp; ++z2) {
                double& v = p_pert[static_cast<std::size_t>(row) * m.n_zp + z2];
                const double orig = v;
                v = (1.0 - delta) * orig + delta * target[z2];
                tv_row += std::abs(v - orig);
            }
            eps_used = std::max(eps_used, 0.5 * tv_row);
        }
    }

    const auto occ_e = detail::task_occupancy(m, m.p_task, expert, gamma);
    const auto occ_pi = detail::task_occupancy(m, p_pert, agent, gamma);

    BoundCheck c;
    c.eps_used = eps_used;
    c.gap = std::abs(detail::expected_return(m, occ_e, gamma) -
                     detail::expected_return(m, occ_pi, gamma));
    double tv = 0.0;
    for (std::size_t i = 0; i < occ_e.size(); ++i) tv += std::abs(occ_pi[i] - occ_e[i]);
    c.tv = 0.5 * tv;
    c.r_max = *std::max_element(m.reward.begin(), m.reward.end());
    c.bound = c.r_max / (1.0 - gamma) * c.tv + eps_used * c.r_max / ((1.0 - gamma) * (1.0 - gamma));
    c.pass = c.gap <= c.bound + 1e-12;
    return c;
}

// ---- closed-form diagonal-Gaussian KL vs Monte Carlo ----

struct KlMcCheck {
    double closed_form = 0;
    double mc_estimate = 0;
    double std_error = 0;
    bool pass = false;
};

inline double kl_diag_gaussian_closed(const std::vector<double>& mq, const std::vector<double>& sq,
                                      const std::vector<double>& mp,
                                      const std::vector<double>& sp) {
    double kl = 0;
    for (std::size_t i = 0; i < mq.size(); ++i) {
        const double d = mq[i] - mp[i];
        kl += std::log(sp[i] / sq[i]) + (sq[i] * sq[i] + d * d) / (2.0 * sp[i] * sp[i]) - 0.5;
    }
    return kl;
}

inline KlMcCheck kl_closed_form_vs_mc(const std::vector<double>& mq, const std::vector<double>& sq,
                                      const std::vector<double>& mp, const std::vector<double>& sp,
                                      long n_samples, RandomSource& rng) {
    KlMcCheck c;
    c.closed_form = kl_diag_gaussian_closed(mq, sq, mp, sp);
    double sum = 0, sumsq = 0;
    const std::size_t d = mq.size();
    for (long s = 0; s < n_samples; ++s) {
        double w = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const double x = mq[i] + sq[i] * rng.normal();
            const double zq = (x - mq[i]) / sq[i];
            const double zp = (x - mp[i]) / sp[i];
            w += -0.5 * zq * zq - std::log(sq[i]) + 0.5 * zp * zp + std::log(sp[i]);
        }
        sum += w;
        sumsq += w * w;
    }
    c.mc_estimate = sum / n_samples;
    const double var = std::max(0.0, sumsq / n_samples - c.mc_estimate * c.mc_estimate);
    c.std_error = std::sqrt(var / n_samples);
    c.pass = std::abs(c.mc_estimate - c.closed_form) <= 3.0 * c.std_error + 1e-9;
    return c;
}

// ---- finite-difference gradient audits ----

struct GradAuditResult {
    std::string loss_name;
    int coords_checked = 0;
    double max_rel_err = 0;
    bool pass = false;
};

namespace detail {

inline WorldModel<double>::Sizes micro_sizes() {
    WorldModel<double>::Sizes sz;
    sz.image = 8;
    sz.conv_depth = 4;
    sz.deter = 8;
    sz.stoch = 4;
    sz.hidden = 16;
    sz.action_dim = 2;
    return sz;
}

inline SequenceBatch micro_batch(int B, int L, int hw, int A, RandomSource& rng) {
    SequenceBatch b;
    b.batch = B;
    b.length = L;
    b.hw = hw;
    b.action_dim = A;
    b.observations.resize(static_cast<std::size_t>(B) * L * hw * hw * 3);
    b.actions.resize(static_cast<std::size_t>(B) * L * A);
    for (auto& v : b.observations) v = static_cast<float>(rng.uniform());
    for (auto& v : b.actions) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    b.source_flags.assign(B, 0);
    return b;
}

// Central finite differences against analytic tape gradients on `coords`
// random coordinates of the parameter set that `grads` covers.
struct AuditRunner {
    std::function<double()> value;                             // loss with frozen randomness
    std::function<std::vector<double>()> analytic;             // flat gradient, same order as index
    nn::ParamIndex<double>* index = nullptr;

    GradAuditResult run(const std::string& name, int coords, RandomSource& rng,
                        double fd_eps = 1e-4) {
        GradAuditResult res;
        res.loss_name = name;
        const auto g = analytic();
        for (int c = 0; c < coords; ++c) {
            const std::size_t i = rng.uniform_index(index->total);
            const double orig = index->get(i);
            index->set(i, orig + fd_eps);
            const double up = value();
            index->set(i, orig - fd_eps);
            const double dn = value();
            index->set(i, orig);
            const double fd = (up - dn) / (2.0 * fd_eps);
            const double denom = std::max({std::abs(g[i]), std::abs(fd), 1e-3});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(g[i] - fd) / denom);
        }
        res.coords_checked = coords;
        res.pass = res.max_rel_err < 1e-3;
        return res;
    }
};

inline std::vector<double> flatten_grads(const nn::Binding<double>& bind,
                                         const nn::ParamIndex<double>& index) {
    std::vector<double> flat(index.total, 0.0);
    const auto grads = bind.collect_grads();
    const auto& bound = bind.bound();
    for (std::size_t e = 0; e < bound.size(); ++e) {
        // locate the param in the flat index
        for (std::size_t p = 0; p < index.params.size(); ++p) {
            if (index.params[p] == bound[e].first) {
                std::copy(grads[e].begin(), grads[e].end(), flat.begin() + index.offsets[p]);
                break;
            }
        }
    }
    return flat;
}

} // namespace detail

// Audits one of: "kl", "recon", "disc", "actor", "value" on float64 micro
// models. Randomness (sampling noise, interpolation draws) is replayed from
// fixed seeds so the loss is a deterministic function of the parameters.
inline GradAuditResult gradient_audit(const std::string& loss_name, std::uint64_t seed,
                                      int coords = 50) {
    RandomSource model_rng(seed);
    RandomSource data_rng(seed + 1);
    RandomSource coord_rng(seed + 3);
    const std::uint64_t noise_seed = seed + 2;

    auto sz = detail::micro_sizes();
    WorldModel<double> wm(sz, model_rng);
    const int state_dim = sz.state_dim();

    if (loss_name == "kl" || loss_name == "recon") {
        auto batch = detail::micro_batch(2, 3, sz.image, sz.action_dim, data_rng);
        const double free_nats = 0.0, beta = 1.0, lambda = 1.5;
        nn::ParamIndex<double> index(wm.bundles());
        detail::AuditRunner runner;
        runner.index = &index;
        runner.value = [&, loss_name] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, false);
            RandomSource noise(noise_seed);
            auto g = wm.build_filter(tape, bind, batch, noise);
            if (loss_name == "kl") return tape.val(wm.kl_loss_graph(tape, g, free_nats, beta))[0];
            return tape.val(wm.recon_loss_graph(tape, bind, g, lambda).total)[0];
        };
        runner.analytic = [&, loss_name] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, true);
            RandomSource noise(noise_seed);
            auto g = wm.build_filter(tape, bind, batch, noise);
            auto loss = loss_name == "kl" ? wm.kl_loss_graph(tape, g, free_nats, beta)
                                          : wm.recon_loss_graph(tape, bind, g, lambda).total;
            tape.backward(loss);
            return detail::flatten_grads(bind, index);
        };
        return runner.run(loss_name, coords, coord_rng);
    }

    if (loss_name == "disc") {
        Discriminator<double> disc(state_dim + sz.action_dim, sz.hidden, model_rng);
        // give the zero-initialized output layer nontrivial weights
        for (auto& p : disc.bundle().params)
            if (p.name.rfind("l3", 0) == 0)
                for (auto& v : p.value) v = data_rng.uniform(-0.3, 0.3);
        const int ne = 6, na = 5;
        std::vector<double> expert_rows(static_cast<std::size_t>(ne) * disc.input_dim());
        std::vector<double> agent_rows(static_cast<std::size_t>(na) * disc.input_dim());
        data_rng.fill_uniform(expert_rows, -1.0, 1.0);
        data_rng.fill_uniform(agent_rows, -1.0, 1.0);
        std::vector<nn::Bundle<double>*> bundles = {&disc.bundle()};
        nn::ParamIndex<double> index(bundles);
        detail::AuditRunner runner;
        runner.index = &index;
        runner.value = [&] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, false);
            RandomSource gp_rng(noise_seed);
            return tape.val(disc.loss_graph(tape, bind, expert_rows, agent_rows, 1.0, gp_rng).total)[0];
        };
        runner.analytic = [&] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, true);
            RandomSource gp_rng(noise_seed);
            auto loss = disc.loss_graph(tape, bind, expert_rows, agent_rows, 1.0, gp_rng);
            tape.backward(loss.total);
            return detail::flatten_grads(bind, index);
        };
        return runner.run(loss_name, coords, coord_rng);
    }

    if (loss_name == "actor") {
        Policy<double> policy(state_dim, sz.hidden, sz.action_dim, model_rng);
        ValueFunction<double> value(state_dim, sz.hidden, model_rng);
        Discriminator<double> disc(state_dim + sz.action_dim, sz.hidden, model_rng);
        for (auto& p : policy.bundle().params)
            if (p.name.rfind("head", 0) == 0)
                for (auto& v : p.value) v = data_rng.uniform(-0.2, 0.2);
        for (auto& p : disc.bundle().params)
            if (p.name.rfind("l3", 0) == 0)
                for (auto& v : p.value) v = data_rng.uniform(-0.3, 0.3);
        for (auto& p : value.bundle().params)
            if (p.name.rfind("head", 0) == 0)
                for (auto& v : p.value) v = data_rng.uniform(-0.2, 0.2);
        const int n_starts = 3, H = 3;
        std::vector<double> starts(static_cast<std::size_t>(n_starts) * state_dim);
        data_rng.fill_uniform(starts, -0.5, 0.5);
        std::vector<nn::Bundle<double>*> bundles = {&policy.bundle()};
        nn::ParamIndex<double> index(bundles);
        detail::AuditRunner runner;
        runner.index = &index;
        auto build = [&](bool trainable) {
            ad::Tape<double> tape;
            nn::Binding<double> wm_bind(tape, false);
            nn::Binding<double> pol_bind(tape, trainable);
            nn::Binding<double> disc_bind(tape, false);
            nn::Binding<double> val_bind(tape, false);
            RandomSource noise(noise_seed);
            auto out = actor_loss_graph(tape, wm, wm_bind, policy, pol_bind, disc, disc_bind,
                                        value, val_bind, starts, H, 0.99, 0.95, noise);
            if (!trainable) return std::pair<double, std::vector<double>>{tape.val(out.loss)[0], {}};
            tape.backward(out.loss);
            return std::pair<double, std::vector<double>>{tape.val(out.loss)[0],
                                                          detail::flatten_grads(pol_bind, index)};
        };
        runner.value = [&] { return build(false).first; };
        runner.analytic = [&] { return build(true).second; };
        return runner.run(loss_name, coords, coord_rng);
    }

    if (loss_name == "value") {
        ValueFunction<double> value(state_dim, sz.hidden, model_rng);
        for (auto& p : value.bundle().params)
            if (p.name.rfind("head", 0) == 0)
                for (auto& v : p.value) v = data_rng.uniform(-0.2, 0.2);
        const int m = 10;
        std::vector<double> states(static_cast<std::size_t>(m) * state_dim), targets(m);
        data_rng.fill_uniform(states, -0.5, 0.5);
        data_rng.fill_uniform(targets, -2.0, 0.0);
        std::vector<nn::Bundle<double>*> bundles = {&value.bundle()};
        nn::ParamIndex<double> index(bundles);
        detail::AuditRunner runner;
        runner.index = &index;
        runner.value = [&] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, false);
            return tape.val(value_loss_graph(tape, value, bind, states, state_dim, targets))[0];
        };
        runner.analytic = [&] {
            ad::Tape<double> tape;
            nn::Binding<double> bind(tape, true);
            auto loss = value_loss_graph(tape, value, bind, states, state_dim, targets);
            tape.backward(loss);
            return detail::flatten_grads(bind, index);
        };
        return runner.run(loss_name, coords, coord_rng);
    }

    throw std::invalid_argument("unknown loss for gradient audit: " + loss_name);
}

} // namespace semail::oracle
