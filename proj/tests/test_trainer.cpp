#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "semail/trainer.hpp"

using namespace semail;
namespace fs = std::filesystem;

namespace {

// small-but-real configuration so trainer tests stay fast
ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.image_size = 16;
    cfg.conv_depth = 4;
    cfg.deter_size = 16;
    cfg.stoch_size = 6;
    cfg.dense_units = 24;
    cfg.batch = 4;
    cfg.seq_len = 8;
    cfg.max_steps = 20;
    cfg.imagination_horizon = 4;
    cfg.imagine_starts = 12;
    cfg.disc_expert_batch = 3;
    cfg.seed_episodes = 2;
    cfg.train_iters_per_episode = 3;
    cfg.episodes = 2;
    cfg.eval_every = 2;
    cfg.eval_episodes = 2;
    cfg.num_expert_demos = 3;
    cfg.env_seed = 42;
    cfg.early_stop_score = 0.0; // disabled
    cfg.validate();
    return cfg;
}

std::vector<EpisodeRecord> make_demos(const ExperimentConfig& cfg, int n) {
    DistractedPointMassEnv env(EnvParams::from_config(cfg));
    ScriptedExpert expert{cfg.expert_gain};
    RandomSource rng(cfg.env_seed);
    return collect_demonstrations(env, expert, n, rng);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

TEST_CASE("seed phase fills the agent buffer with random episodes") {
    auto cfg = tiny_config();
    Trainer<float> tr(cfg, make_demos(cfg, 3), "/tmp/semail_t_seed", true);
    tr.seed_phase(cfg.seed_episodes);
    REQUIRE(tr.agent_buffer().size() == cfg.seed_episodes);
    for (int i = 0; i < tr.agent_buffer().size(); ++i) {
        const auto& ep = tr.agent_buffer().episode(i);
        REQUIRE(ep.length() == cfg.max_steps / cfg.action_repeat);
        for (const auto& a : ep.actions)
            for (const float v : a.values) {
                REQUIRE(v >= -1.0f);
                REQUIRE(v <= 1.0f);
            }
    }
    RandomSource dummy(1);
    REQUIRE_NOTHROW(
        sample_union_sequences(tr.agent_buffer(), tr.agent_buffer(), 2, cfg.seq_len, dummy));
}

TEST_CASE("collected episodes have full length and land in the buffer") {
    auto cfg = tiny_config();
    Trainer<float> tr(cfg, make_demos(cfg, 3), "/tmp/semail_t_collect", true);
    tr.collect_episode();
    REQUIRE(tr.agent_buffer().size() == 1);
    REQUIRE(tr.agent_buffer().episode(0).length() == cfg.max_steps / cfg.action_repeat);
    REQUIRE_FALSE(tr.agent_buffer().episode(0).is_expert);
}

TEST_CASE("train_iteration runs every update and logs one row per iteration") {
    auto cfg = tiny_config();
    const std::string out = "/tmp/semail_t_iter";
    fs::remove_all(out);
    Trainer<float> tr(cfg, make_demos(cfg, 3), out, true);
    tr.seed_phase(cfg.seed_episodes);
    auto st = tr.train_iteration();
    REQUIRE(std::isfinite(st.kl));
    REQUIRE(std::isfinite(st.recon));
    REQUIRE(std::isfinite(st.disc));
    REQUIRE(std::isfinite(st.actor));
    REQUIRE(std::isfinite(st.value));
    REQUIRE(st.pe > 0.0);
    REQUIRE(st.pe < 1.0);
    REQUIRE(tr.global_step() == 1);
}

TEST_CASE("no_bor ablation with lambda zero matches an explicit lambda-zero run") {
    auto cfg_a = tiny_config();
    cfg_a.no_bor = true;
    auto cfg_b = tiny_config();
    cfg_b.bor_weight = 0.0;
    auto run = [&](const ExperimentConfig& cfg, const std::string& out) {
        fs::remove_all(out);
        Trainer<float> tr(cfg, make_demos(cfg, 3), out, true);
        tr.seed_phase(cfg.seed_episodes);
        std::vector<double> losses;
        for (int i = 0; i < 3; ++i) {
            auto st = tr.train_iteration();
            losses.push_back(st.kl);
            losses.push_back(st.recon);
            losses.push_back(st.disc);
            losses.push_back(st.actor);
            losses.push_back(st.value);
        }
        return losses;
    };
    // identical losses: with lambda already 0 the BoR term vanishes either way
    REQUIRE(run(cfg_a, "/tmp/semail_t_nobor_a") == run(cfg_b, "/tmp/semail_t_nobor_b"));
}

TEST_CASE("metrics csv is byte-identical across reruns with the same seed") {
    auto cfg = tiny_config();
    cfg.threads = 1;
    auto run = [&](const std::string& out) {
        fs::remove_all(out);
        Trainer<float> tr(cfg, make_demos(cfg, 3), out, true);
        tr.run();
        return slurp(out + "/metrics.csv");
    };
    const auto a = run("/tmp/semail_t_det_a");
    const auto b = run("/tmp/semail_t_det_b");
    REQUIRE(a == b);
    REQUIRE(a.find("step,episode,kl_loss") == 0);

    // row count: iterations + evaluations (+ header)
    const int expected_rows = cfg.episodes * cfg.train_iters_per_episode + 1; // 1 eval at ep 2
    int lines = 0;
    for (const char c : a) lines += c == '\n';
    REQUIRE(lines == expected_rows + 1);
}

TEST_CASE("true env rewards only reach the eval column") {
    // trainers constructed from reward-shifted demos see identical losses:
    // the learner never reads the reward channel
    auto cfg = tiny_config();
    auto demos = make_demos(cfg, 3);
    auto shifted = demos;
    for (auto& d : shifted) {
        std::vector<float> rw(d.length(), 123.0f);
        d = EpisodeRecord(d.observations, d.actions, rw, d.is_expert);
    }
    auto run = [&](std::vector<EpisodeRecord> ds, const std::string& out) {
        fs::remove_all(out);
        Trainer<float> tr(cfg, std::move(ds), out, true);
        tr.seed_phase(cfg.seed_episodes);
        auto st = tr.train_iteration();
        return std::vector<double>{st.kl, st.recon, st.disc, st.actor, st.value};
    };
    REQUIRE(run(demos, "/tmp/semail_t_rw_a") == run(shifted, "/tmp/semail_t_rw_b"));
}

TEST_CASE("checkpoints restore bit-identical evaluation behavior") {
    auto cfg = tiny_config();
    const std::string out = "/tmp/semail_t_ckpt";
    fs::remove_all(out);
    Trainer<float> tr(cfg, make_demos(cfg, 3), out, true);
    tr.seed_phase(cfg.seed_episodes);
    for (int i = 0; i < 2; ++i) tr.train_iteration();
    tr.save_checkpoint(out + "/ck.smck");
    auto ev1 = tr.evaluate();

    Trainer<float> tr2(cfg, make_demos(cfg, 3), out + "_2", true);
    tr2.load_checkpoint(Checkpoint::load(out + "/ck.smck"));
    auto ev2 = tr2.evaluate();
    REQUIRE(ev1.mean_return == ev2.mean_return);
    REQUIRE(ev1.mask_iou == ev2.mask_iou);
}

TEST_CASE("evaluation score normalization anchors expert at 1 and random near 0") {
    auto cfg = tiny_config();
    Trainer<float> tr(cfg, make_demos(cfg, 3), "/tmp/semail_t_anchor", true);
    REQUIRE(tr.expert_anchor() > tr.random_anchor());
    REQUIRE_THAT(tr.normalized_score(tr.expert_anchor()), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(tr.normalized_score(tr.random_anchor()), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("trainer rejects empty demo sets and non-expert demos") {
    auto cfg = tiny_config();
    REQUIRE_THROWS(Trainer<float>(cfg, {}, "/tmp/semail_t_bad", true));
    DistractedPointMassEnv env(EnvParams::from_config(cfg));
    RandomSource rng(1);
    std::vector<EpisodeRecord> not_expert = {random_policy_episode(env, rng)};
    REQUIRE_THROWS(Trainer<float>(cfg, std::move(not_expert), "/tmp/semail_t_bad2", true));
}
