#include <catch_amalgamated.hpp>

#include <cmath>

#include "semail/oracle.hpp"
#include "semail/tabular.hpp"

using namespace semail;

TEST_CASE("f-divergence basics") {
    const auto specs = oracle::FDivergenceSpec::all();
    REQUIRE(specs.size() == 4);
    for (const auto& s : specs) {
        REQUIRE(s.convex_spot_check());
        // identical distributions give zero for every spec
        std::vector<double> p = {0.2, 0.5, 0.3};
        REQUIRE_THAT(oracle::f_divergence(p, p, s), Catch::Matchers::WithinAbs(0.0, 1e-14));
    }
    // TV between point masses on different atoms is 1
    REQUIRE_THAT(oracle::f_divergence({1.0, 0.0}, {0.0, 1.0}, oracle::FDivergenceSpec::tv()),
                 Catch::Matchers::WithinAbs(1.0, 1e-14));
    // documented KL value
    const double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    REQUIRE_THAT(oracle::f_divergence({0.5, 0.5}, {0.9, 0.1}, oracle::FDivergenceSpec::kl()),
                 Catch::Matchers::WithinAbs(expect, 1e-12));
    REQUIRE_THAT(expect, Catch::Matchers::WithinAbs(0.5108, 1e-4));
    // support violation for divergences requiring absolute continuity
    REQUIRE_THROWS_AS(oracle::f_divergence({0.5, 0.5}, {1.0, 0.0}, oracle::FDivergenceSpec::kl()),
                      std::domain_error);
    REQUIRE_NOTHROW(oracle::f_divergence({0.5, 0.5}, {1.0, 0.0}, oracle::FDivergenceSpec::tv()));
}

TEST_CASE("exact occupancy degenerate cases") {
    SECTION("single-state chain concentrates on its action distribution") {
        RandomSource rng(1);
        auto m = tabular::random_instance(rng, 1, 1, 3, 1, true);
        auto pi = tabular::random_policy(rng, 1, 3);
        auto occ = oracle::exact_occupancy(m, pi, 0.9, oracle::horizon_for(0.9));
        for (int a = 0; a < 3; ++a)
            REQUIRE_THAT(occ.at(0, 0, a), Catch::Matchers::WithinAbs(pi[a], 1e-12));
    }
    SECTION("gamma 0 gives the initial distribution times the policy") {
        RandomSource rng(2);
        auto m = tabular::random_instance(rng, 3, 2, 2, 4, false);
        auto pi = tabular::random_policy(rng, 3, 2);
        auto occ = oracle::exact_occupancy(m, pi, 0.0, 0);
        for (int zp = 0; zp < 3; ++zp)
            for (int zm = 0; zm < 2; ++zm)
                for (int a = 0; a < 2; ++a)
                    REQUIRE_THAT(occ.at(zp, zm, a),
                                 Catch::Matchers::WithinAbs(
                                     m.init_zp[zp] * m.init_zm[zm] * pi[zp * 2 + a], 1e-12));
    }
}

TEST_CASE("exact occupancy agrees with Monte Carlo rollouts") {
    RandomSource rng(3);
    auto m = tabular::random_instance(rng, 3, 1, 2, 3, false);
    auto pi = tabular::random_policy(rng, 3, 2);
    const double gamma = 0.9;
    auto occ = oracle::exact_occupancy(m, pi, gamma, oracle::horizon_for(gamma));
    auto task_marginal = occ.marginal_task_action();

    // Monte Carlo: sample discounted visitation by geometric stopping
    RandomSource mc(4);
    std::vector<double> counts(task_marginal.size(), 0.0);
    const long episodes = 200000;
    for (long e = 0; e < episodes; ++e) {
        // draw initial state
        double u = mc.uniform();
        int z = 0;
        while (u > m.init_zp[z] && z + 1 < m.n_zp) u -= m.init_zp[z++];
        while (true) {
            // draw action
            double ua = mc.uniform();
            int a = 0;
            while (ua > pi[z * 2 + a] && a + 1 < m.n_a) ua -= pi[z * 2 + a++];
            counts[z * 2 + a] += 1.0;
            if (mc.uniform() > gamma) break;
            double ut = mc.uniform();
            int z2 = 0;
            while (ut > m.task(z, a, z2) && z2 + 1 < m.n_zp) ut -= m.task(z, a, z2++);
            z = z2;
        }
    }
    double total = 0;
    for (const double c : counts) total += c;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double p_hat = counts[i] / total;
        const double se = std::sqrt(task_marginal[i] * (1 - task_marginal[i]) / total) /
                          (1.0 - gamma); // loose inflation for correlated visits
        REQUIRE_THAT(p_hat, Catch::Matchers::WithinAbs(task_marginal[i], 3 * se + 3e-3));
    }
}

TEST_CASE("divergence chain holds on random factorized instances") {
    RandomSource rng(5);
    const auto specs = oracle::FDivergenceSpec::all();
    for (int trial = 0; trial < 25; ++trial) {
        const int n_zp = 2 + static_cast<int>(rng.uniform_index(5));
        const int n_zm = 2 + static_cast<int>(rng.uniform_index(5));
        const int n_a = 2 + static_cast<int>(rng.uniform_index(2));
        const int n_obs = 4 + static_cast<int>(rng.uniform_index(std::max(1, n_zp * n_zm - 4)));
        const double gamma = rng.uniform(0.5, 0.95);
        auto m = tabular::random_instance(rng, n_zp, n_zm, n_a, n_obs, true);
        auto expert = tabular::random_policy(rng, n_zp, n_a);
        auto agent = tabular::random_policy(rng, n_zp, n_a);
        auto checks = oracle::verify_divergence_chain(m, expert, agent, gamma, specs);
        for (const auto& c : checks) {
            INFO("divergence " << c.divergence << " trial " << trial);
            REQUIRE(c.chain_ok);
            REQUIRE(c.equality_ok);
        }
    }
}

TEST_CASE("identical policies give zero divergences everywhere") {
    RandomSource rng(6);
    auto m = tabular::random_instance(rng, 4, 3, 2, 6, true);
    auto pi = tabular::random_policy(rng, 4, 2);
    auto checks = oracle::verify_divergence_chain(m, pi, pi, 0.9,
                                                  oracle::FDivergenceSpec::all());
    for (const auto& c : checks) {
        REQUIRE_THAT(c.d_obs, Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(c.d_state, Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(c.d_task, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
}

TEST_CASE("bijective emission makes observation and state divergences equal") {
    RandomSource rng(7);
    auto m = tabular::random_instance(rng, 3, 2, 2, 6, true);
    for (int zp = 0; zp < 3; ++zp)
        for (int zm = 0; zm < 2; ++zm) m.obs_map[zp * 2 + zm] = zp * 2 + zm;
    auto expert = tabular::random_policy(rng, 3, 2);
    auto agent = tabular::random_policy(rng, 3, 2);
    auto checks =
        oracle::verify_divergence_chain(m, expert, agent, 0.85, oracle::FDivergenceSpec::all());
    for (const auto& c : checks)
        REQUIRE_THAT(c.d_obs, Catch::Matchers::WithinAbs(c.d_state, 1e-10));
}

TEST_CASE("return gap bound holds, including the exact-model corner") {
    RandomSource rng(8);
    SECTION("eps 0 with identical policies gives zero gap") {
        auto m = tabular::random_instance(rng, 4, 2, 2, 4, true);
        auto pi = tabular::random_policy(rng, 4, 2);
        auto c = oracle::verify_return_gap_bound(m, pi, pi, 0.0, 0.9, rng);
        REQUIRE_THAT(c.gap, Catch::Matchers::WithinAbs(0.0, 1e-10));
        REQUIRE(c.pass);
    }
    SECTION("eps 0 with distinct policies stays within the TV term") {
        for (int t = 0; t < 10; ++t) {
            auto m = tabular::random_instance(rng, 3 + t % 3, 2, 2, 4, true);
            auto expert = tabular::random_policy(rng, 3 + t % 3, 2);
            auto agent = tabular::random_policy(rng, 3 + t % 3, 2);
            auto c = oracle::verify_return_gap_bound(m, expert, agent, 0.0, 0.85, rng);
            REQUIRE(c.eps_used == 0.0);
            REQUIRE(c.gap <= c.r_max / (1 - 0.85) * c.tv + 1e-12);
        }
    }
    SECTION("random perturbations up to 0.2 stay within the bound") {
        for (int t = 0; t < 20; ++t) {
            auto m = tabular::random_instance(rng, 4, 2, 3, 6, true);
            auto expert = tabular::random_policy(rng, 4, 3);
            auto agent = tabular::random_policy(rng, 4, 3);
            const double eps = rng.uniform(0.0, 0.2);
            auto c = oracle::verify_return_gap_bound(m, expert, agent, eps, 0.9, rng);
            REQUIRE(c.eps_used <= eps + 1e-12);
            REQUIRE(c.pass);
        }
    }
}

TEST_CASE("KL Monte Carlo agreement") {
    RandomSource rng(9);
    SECTION("identical Gaussians") {
        std::vector<double> m0 = {0.3, -0.2}, s0 = {0.8, 1.1};
        auto c = oracle::kl_closed_form_vs_mc(m0, s0, m0, s0, 100000, rng);
        REQUIRE_THAT(c.closed_form, Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE(c.pass);
    }
    SECTION("unit variance, mean shift 1") {
        auto c = oracle::kl_closed_form_vs_mc({1.0}, {1.0}, {0.0}, {1.0}, 1000000, rng);
        REQUIRE_THAT(c.closed_form, Catch::Matchers::WithinAbs(0.5, 1e-12));
        REQUIRE(c.pass);
    }
    SECTION("stddev pair (1,2)") {
        auto c = oracle::kl_closed_form_vs_mc({0.0}, {1.0}, {0.0}, {2.0}, 1000000, rng);
        REQUIRE_THAT(c.closed_form,
                     Catch::Matchers::WithinAbs(std::log(2.0) + 0.125 - 0.5, 1e-12));
        REQUIRE_THAT(c.closed_form, Catch::Matchers::WithinAbs(0.3181, 1e-4));
        REQUIRE(c.pass);
    }
}

TEST_CASE("tabular instance validation catches broken tables") {
    RandomSource rng(10);
    auto m = tabular::random_instance(rng, 3, 2, 2, 4, false);
    REQUIRE_NOTHROW(m.validate(1e-9));
    m.p_task[0] += 0.5;
    REQUIRE_THROWS_AS(m.validate(1e-9), std::invalid_argument);
}

TEST_CASE("stationary background init is indeed stationary") {
    RandomSource rng(11);
    auto m = tabular::random_instance(rng, 2, 5, 2, 4, true);
    std::vector<double> pushed(m.n_zm, 0.0);
    for (int j = 0; j < m.n_zm; ++j)
        for (int i = 0; i < m.n_zm; ++i) pushed[j] += m.init_zm[i] * m.bg(i, j);
    for (int j = 0; j < m.n_zm; ++j)
        REQUIRE_THAT(pushed[j], Catch::Matchers::WithinAbs(m.init_zm[j], 1e-12));
}

TEST_CASE("gradient audits pass for all five losses") {
    for (const char* loss : {"kl", "recon", "disc", "actor", "value"}) {
        auto r = oracle::gradient_audit(loss, 2024, 25);
        INFO(r.loss_name << " max_rel_err " << r.max_rel_err);
        REQUIRE(r.pass);
    }
    REQUIRE_THROWS_AS(oracle::gradient_audit("nope", 1, 1), std::invalid_argument);
}
