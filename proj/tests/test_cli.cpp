#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    // tests run from build/tests; the tool lives in build/tools
    const fs::path guess = fs::path("..") / "tools" / "semail";
    if (fs::exists(guess)) return guess.string();
    return "build/tools/semail";
}

int run(const std::string& args, std::string* out = nullptr) {
    const std::string redirect = out ? " > /tmp/semail_cli_out.txt 2>&1" : " > /dev/null 2>&1";
    const int rc = std::system((cli_path() + " " + args + redirect).c_str());
    if (out) {
        std::ifstream in("/tmp/semail_cli_out.txt");
        std::ostringstream os;
        os << in.rdbuf();
        *out = os.str();
    }
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// fast env/net settings passed to every train invocation
const char* kTinyFlags =
    " --image_size 16 --conv_depth 4 --deter_size 16 --stoch_size 6 --dense_units 24"
    " --batch 4 --seq_len 8 --max_steps 20 --imagination_horizon 4 --imagine_starts 12"
    " --disc_expert_batch 3 --seed_episodes 2 --train_iters_per_episode 2 --episodes 2"
    " --eval_every 2 --eval_episodes 2 --early_stop_score 0 --threads 1";

} // namespace

TEST_CASE("collect-expert writes demos with a manifest, byte-identical per seed") {
    fs::remove_all("/tmp/semail_cli_demos_a");
    fs::remove_all("/tmp/semail_cli_demos_b");
    REQUIRE(run(std::string("collect-expert --demo-dir /tmp/semail_cli_demos_a --n 3 --seed 9") + kTinyFlags) == 0);
    REQUIRE(run(std::string("collect-expert --demo-dir /tmp/semail_cli_demos_b --n 3 --seed 9") + kTinyFlags) == 0);
    REQUIRE(fs::exists("/tmp/semail_cli_demos_a/manifest.json"));
    for (const char* f : {"manifest.json", "demo_0000.ep", "demo_0002.ep"})
        REQUIRE(slurp(std::string("/tmp/semail_cli_demos_a/") + f) ==
                slurp(std::string("/tmp/semail_cli_demos_b/") + f));
}

TEST_CASE("collect-expert rejects n=0 with a usage error") {
    REQUIRE(run("collect-expert --demo-dir /tmp/semail_cli_demos_n0 --n 0") == 1);
}

TEST_CASE("unknown flags and bad subcommands are usage errors") {
    REQUIRE(run("collect-expert --demo-dir /tmp/x --definitely-not-a-flag 3") == 1);
    REQUIRE(run("frobnicate") == 1);
    REQUIRE(run("eval") == 1); // missing required --checkpoint
}

TEST_CASE("train -> eval -> visualize round trip on a tiny setup") {
    fs::remove_all("/tmp/semail_cli_demos");
    fs::remove_all("/tmp/semail_cli_run");
    REQUIRE(run(std::string("collect-expert --demo-dir /tmp/semail_cli_demos --n 3 --seed 9") + kTinyFlags) == 0);

    std::string out;
    REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_demos --out /tmp/semail_cli_run "
                            "--quiet") +
                kTinyFlags, &out) == 0);
    REQUIRE(out.find("final_score") != std::string::npos);
    REQUIRE(fs::exists("/tmp/semail_cli_run/metrics.csv"));
    REQUIRE(fs::exists("/tmp/semail_cli_run/checkpoint_latest.smck"));
    REQUIRE(fs::exists("/tmp/semail_cli_run/config_used.txt"));

    // metrics header matches the documented row schema
    {
        std::ifstream m("/tmp/semail_cli_run/metrics.csv");
        std::string header;
        std::getline(m, header);
        REQUIRE(header ==
                "step,episode,kl_loss,recon_loss,bor_loss,disc_loss,mean_D_on_agent,actor_loss,"
                "value_loss,eval_return,mask_iou");
    }

    std::string eval_out;
    REQUIRE(run("eval --checkpoint /tmp/semail_cli_run/checkpoint_latest.smck --episodes 2",
                &eval_out) == 0);
    REQUIRE(eval_out.find("eval_return") != std::string::npos);
    REQUIRE(eval_out.find("normalized_score") != std::string::npos);

    fs::remove_all("/tmp/semail_cli_viz");
    std::string viz_out;
    REQUIRE(run("visualize --checkpoint /tmp/semail_cli_run/checkpoint_latest.smck --out "
                "/tmp/semail_cli_viz",
                &viz_out) == 0);
    REQUIRE(fs::exists("/tmp/semail_cli_viz/recon_panels.png"));
    REQUIRE(fs::exists("/tmp/semail_cli_viz/pe_series.png"));
    REQUIRE(viz_out.find("mask_iou") != std::string::npos);
}

TEST_CASE("train fails cleanly without demos") {
    fs::remove_all("/tmp/semail_cli_nodemos");
    REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_nodemos --out /tmp/semail_cli_r2 "
                            "--quiet") +
                kTinyFlags) == 3);
}

TEST_CASE("train rejects a bad ablation name") {
    REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_demos --out /tmp/semail_cli_r3 "
                            "--ablation bogus --quiet") +
                kTinyFlags) == 1);
}

TEST_CASE("ablation flags select the right model variants") {
    // reuse demos from the round-trip test (regenerate if missing)
    if (!fs::exists("/tmp/semail_cli_demos/manifest.json"))
        REQUIRE(run(std::string("collect-expert --demo-dir /tmp/semail_cli_demos --n 3 --seed 9") + kTinyFlags) == 0);
    for (const char* ab : {"no_act", "no_bor", "joint"}) {
        fs::remove_all(std::string("/tmp/semail_cli_ab_") + ab);
        REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_demos --out /tmp/semail_cli_ab_") +
                    ab + " --ablation " + ab + " --quiet" + kTinyFlags) == 0);
        std::string cfg = slurp(std::string("/tmp/semail_cli_ab_") + ab + "/config_used.txt");
        if (std::string(ab) == "no_act") REQUIRE(cfg.find("no_act = true") != std::string::npos);
        if (std::string(ab) == "no_bor") REQUIRE(cfg.find("no_bor = true") != std::string::npos);
        if (std::string(ab) == "joint")
            REQUIRE(cfg.find("joint_model = true") != std::string::npos);
    }
}

TEST_CASE("verify subcommand exits 0 on success and 1 on usage errors") {
    REQUIRE(run("verify --suite kl --trials 2 --seed 5") == 0);
    REQUIRE(run("verify --suite bogus") == 1);
    std::string report;
    REQUIRE(run("verify --suite bound --trials 3 --seed 5 --report /tmp/semail_cli_report.jsonl") ==
            0);
    const auto rep = slurp("/tmp/semail_cli_report.jsonl");
    REQUIRE(rep.find("\"check\":\"return_gap_bound\"") != std::string::npos);
    REQUIRE(rep.find("\"pass\":true") != std::string::npos);
}

TEST_CASE("train runs are byte-identical in single-threaded mode") {
    if (!fs::exists("/tmp/semail_cli_demos/manifest.json"))
        REQUIRE(run(std::string("collect-expert --demo-dir /tmp/semail_cli_demos --n 3 --seed 9") + kTinyFlags) == 0);
    fs::remove_all("/tmp/semail_cli_det_a");
    fs::remove_all("/tmp/semail_cli_det_b");
    REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_demos --out /tmp/semail_cli_det_a "
                            "--seed 3 --quiet") +
                kTinyFlags) == 0);
    REQUIRE(run(std::string("train --demo-dir /tmp/semail_cli_demos --out /tmp/semail_cli_det_b "
                            "--seed 3 --quiet") +
                kTinyFlags) == 0);
    REQUIRE(slurp("/tmp/semail_cli_det_a/metrics.csv") == slurp("/tmp/semail_cli_det_b/metrics.csv"));
}
