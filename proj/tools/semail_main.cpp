// semail command-line interface:
//   collect-expert  write scripted-expert demonstrations + manifest
//   train           run the full training loop
//   eval            deterministic evaluation of a checkpoint
//   verify          exact oracle suites (theorem / bound / kl / grads)
//   visualize       reconstruction panels and P_E series from a checkpoint

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "semail/checkpoint.hpp"
#include "semail/config.hpp"
#include "semail/env.hpp"
#include "semail/oracle.hpp"
#include "semail/runtime.hpp"
#include "semail/trainer.hpp"
#include "semail/viz.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semail;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerifyFailure = 2;
constexpr int kExitIo = 3;

struct ConfigCli {
    std::map<std::string, std::string> overrides;

    void add_flags(CLI::App* cmd, const std::set<std::string>& exclude = {}) {
        ExperimentConfig defaults;
        for (const auto& f : defaults.fields()) {
            const std::string name = f.name;
            if (exclude.count(name)) continue;
            cmd->add_option_function<std::string>(
                "--" + name, [this, name](const std::string& v) { overrides[name] = v; },
                "config key " + name + " (default " + defaults.get(name) + ")");
        }
    }

    bool was_set(const std::string& key) const { return overrides.count(key) > 0; }

    void apply(ExperimentConfig& cfg) const {
        for (const auto& [k, v] : overrides) cfg.set(k, v);
    }
};

ExperimentConfig resolve_config(const std::string& config_path, const ConfigCli& cli) {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig() : load_config(config_path);
    cli.apply(cfg);
    cfg.validate();
    return cfg;
}

json manifest_from(const ExperimentConfig& cfg, int n, double mean_return,
                   const std::vector<std::string>& files) {
    const EnvParams p = EnvParams::from_config(cfg);
    json m;
    m["version"] = 1;
    m["env"] = "pointmass";
    m["env_seed"] = p.env_seed;
    m["image_size"] = p.image_size;
    m["max_steps"] = p.max_steps;
    m["action_repeat"] = p.action_repeat;
    m["step_size"] = p.step_size;
    m["background_velocity"] = p.background_velocity;
    m["background_pattern"] = cfg.background_pattern;
    m["stripe_cycles"] = p.stripe_cycles;
    m["expert_gain"] = cfg.expert_gain;
    m["n"] = n;
    m["mean_return"] = mean_return;
    m["files"] = files;
    return m;
}

std::vector<EpisodeRecord> load_demos(const std::string& demo_dir, json* manifest_out = nullptr) {
    const fs::path mpath = fs::path(demo_dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw std::runtime_error("cannot open demo manifest: " + mpath.string());
    json manifest = json::parse(in);
    if (manifest_out) *manifest_out = manifest;
    std::vector<EpisodeRecord> demos;
    for (const auto& f : manifest.at("files"))
        demos.push_back(load_episode((fs::path(demo_dir) / f.get<std::string>()).string()));
    if (demos.empty()) throw std::runtime_error("demo manifest lists no episodes");
    return demos;
}

int cmd_collect_expert(const std::string& demo_dir, int n, std::uint64_t seed,
                       const std::string& config_path, const ConfigCli& cli) {
    ExperimentConfig cfg = resolve_config(config_path, cli);
    if (!cli.was_set("env_seed")) cfg.env_seed = seed;
    if (n < 1) {
        std::cerr << "usage error: --n must be >= 1\n";
        return kExitUsage;
    }
    DistractedPointMassEnv env(EnvParams::from_config(cfg));
    ScriptedExpert expert{cfg.expert_gain};
    RandomSource rng(seed);
    auto demos = collect_demonstrations(env, expert, n, rng);

    fs::create_directories(demo_dir);
    std::vector<std::string> files;
    double total = 0;
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "demo_%04d.ep", i);
        save_episode(demos[i], (fs::path(demo_dir) / name).string());
        files.push_back(name);
        total += demos[i].eval_only_return();
    }
    const double mean_return = total / n;
    std::ofstream mout(fs::path(demo_dir) / "manifest.json");
    if (!mout) throw std::runtime_error("cannot write manifest under " + demo_dir);
    mout << manifest_from(cfg, n, mean_return, files).dump(2) << "\n";
    std::printf("wrote %d demonstrations to %s (mean return %.3f)\n", n, demo_dir.c_str(),
                mean_return);
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& demo_dir, const std::string& out,
              const std::string& ablation, const ConfigCli& cli, bool quiet) {
    ExperimentConfig cfg = resolve_config(config_path, cli);
    if (ablation == "no_act") cfg.no_act = true;
    else if (ablation == "no_bor") cfg.no_bor = true;
    else if (ablation == "joint") cfg.joint_model = true;
    else if (ablation != "none") {
        std::cerr << "usage error: --ablation must be one of none,no_act,no_bor,joint\n";
        return kExitUsage;
    }

    json manifest;
    auto demos = load_demos(demo_dir, &manifest);
    // adopt the demo environment identity unless explicitly overridden
    if (!cli.was_set("env_seed")) cfg.env_seed = manifest.at("env_seed").get<std::uint64_t>();
    if (!cli.was_set("image_size")) cfg.image_size = manifest.at("image_size").get<int>();
    cfg.validate();
    if (manifest.at("image_size").get<int>() != cfg.image_size)
        throw std::runtime_error("demo image size does not match the configured image size");

    set_compute_threads(cfg.threads);
    Trainer<float> trainer(cfg, std::move(demos), out, quiet);
    EvalResult last = trainer.run();
    {
        ExperimentConfig cfg_echo = cfg;
        cfg_echo.save((fs::path(out) / "config_used.txt").string());
    }
    std::printf("episodes=%d final_return=%.3f final_score=%.3f mask_iou=%.3f\n",
                trainer.episodes_collected(), last.mean_return, last.score, last.mask_iou);
    return kExitOk;
}

struct EvalOutput {
    double mean = 0, stddev = 0, score = 0, expert_ref = 0, random_ref = 0, mask_iou = NAN;
};

EvalOutput eval_checkpoint(const std::string& ckpt_path, int episodes, std::uint64_t eval_seed) {
    Checkpoint ck = Checkpoint::load(ckpt_path);
    ExperimentConfig cfg = ck.parse_config();
    if (episodes > 0) cfg.eval_episodes = episodes;
    set_compute_threads(cfg.threads);
    // anchors and eval episodes share the same deterministic seed stream
    EnvParams params = EnvParams::from_config(cfg);
    if (eval_seed != 0) params.env_seed = params.env_seed ^ (eval_seed << 17);

    RandomSource dummy(0);
    WorldModel<float> wm(WorldModel<float>::Sizes::from_config(cfg, DistractedPointMassEnv::kActionDim),
                         dummy);
    Policy<float> policy(wm.sizes().state_dim(), cfg.dense_units,
                         DistractedPointMassEnv::kActionDim, dummy);
    for (auto* b : wm.bundles()) ck.load_bundle(*b);
    ck.load_bundle(policy.bundle());

    auto ep_rng = [&](int i) {
        RandomSource base(params.env_seed ^ 0xEA15EEDull);
        return base.child(static_cast<std::uint64_t>(i));
    };

    EvalOutput out;
    ScriptedExpert expert{cfg.expert_gain};
    double esum = 0, rsum = 0;
    for (int e = 0; e < cfg.eval_episodes; ++e) {
        {
            DistractedPointMassEnv env(params);
            RandomSource r = ep_rng(e);
            esum += rollout_episode(
                        env, r,
                        [&](const DistractedPointMassEnv& en, const ImageObservation&) {
                            return expert.act(en);
                        },
                        true)
                        .eval_only_return();
        }
        {
            DistractedPointMassEnv env(params);
            RandomSource r = ep_rng(e);
            rsum += random_policy_episode(env, r).eval_only_return();
        }
    }
    out.expert_ref = esum / cfg.eval_episodes;
    out.random_ref = rsum / cfg.eval_episodes;

    std::vector<double> returns;
    double iou_sum = 0;
    long iou_n = 0;
    for (int e = 0; e < cfg.eval_episodes; ++e) {
        DistractedPointMassEnv env(params);
        RandomSource r = ep_rng(e);
        ImageObservation obs = env.reset(r);
        BranchState<float> task = wm.zero_state(), bg = wm.zero_state();
        std::vector<float> prev_action(DistractedPointMassEnv::kActionDim, 0.f);
        double ret = 0;
        int t = 0;
        while (!env.done()) {
            const auto [et, eb] = wm.encode(obs);
            task = wm.posterior_task_opt(et, task, prev_action, nullptr).first;
            if (!wm.sizes().joint) {
                bg = wm.posterior_background_opt(eb, bg, prev_action, nullptr).first;
                if (t % 5 == 0) {
                    auto rec = wm.decode_joint({task, bg});
                    iou_sum += viz::mask_iou(rec.mask_final, env.ground_truth_mask().mask);
                    ++iou_n;
                }
            }
            auto a = policy.act(WorldModel<float>::concat_state(task), false, 0.0, r);
            Action act;
            act.values.assign(a.begin(), a.end());
            auto [next_obs, reward, done] = env.step(act);
            ret += reward;
            obs = std::move(next_obs);
            prev_action = a;
            ++t;
            (void)done;
        }
        returns.push_back(ret);
    }
    double mean = 0;
    for (const double r : returns) mean += r;
    mean /= returns.size();
    double var = 0;
    for (const double r : returns) var += (r - mean) * (r - mean);
    out.mean = mean;
    out.stddev = std::sqrt(var / returns.size());
    out.score = (mean - out.random_ref) / (out.expert_ref - out.random_ref);
    if (iou_n > 0) out.mask_iou = iou_sum / static_cast<double>(iou_n);
    return out;
}

int cmd_eval(const std::string& ckpt, int episodes, std::uint64_t seed) {
    EvalOutput out = eval_checkpoint(ckpt, episodes, seed);
    std::printf("eval_return = %.3f ± %.3f\n", out.mean, out.stddev);
    std::printf("normalized_score = %.4f (0 = random %.3f, 1 = expert %.3f)\n", out.score,
                out.random_ref, out.expert_ref);
    if (!std::isnan(out.mask_iou)) std::printf("mask_iou = %.4f\n", out.mask_iou);
    return kExitOk;
}

int cmd_verify(const std::string& suite, int trials, std::uint64_t seed,
               const std::string& report_path) {
    std::ofstream report_file;
    std::ostream* rep = &std::cout;
    if (!report_path.empty()) {
        report_file.open(report_path);
        if (!report_file) throw std::runtime_error("cannot write report: " + report_path);
        rep = &report_file;
    }
    int failures = 0;
    auto emit = [&](const json& j) { (*rep) << j.dump() << "\n"; };

    const bool all = suite == "all";
    if (suite == "theorem" || all) {
        RandomSource rng(seed ^ 0x7e08e3ull);
        const auto specs = oracle::FDivergenceSpec::all();
        const int n = trials > 0 ? trials : 100;
        for (int i = 0; i < n; ++i) {
            const std::uint64_t inst_seed = rng.next_u64();
            RandomSource irng(inst_seed);
            const int n_zp = 2 + static_cast<int>(irng.uniform_index(5));
            const int n_zm = 2 + static_cast<int>(irng.uniform_index(5));
            const int n_a = 2 + static_cast<int>(irng.uniform_index(2));
            const int n_obs = 4 + static_cast<int>(irng.uniform_index(
                                      std::max(1, n_zp * n_zm - 4)));
            const double gamma = irng.uniform(0.5, 0.95);
            auto m = tabular::random_instance(irng, n_zp, n_zm, n_a, n_obs, true);
            auto expert = tabular::random_policy(irng, n_zp, n_a);
            auto agent = tabular::random_policy(irng, n_zp, n_a);
            auto checks = oracle::verify_divergence_chain(m, expert, agent, gamma, specs);
            for (const auto& c : checks) {
                const bool pass = c.chain_ok && c.equality_ok;
                if (!pass) ++failures;
                emit(json{{"check", "theorem_chain"},
                          {"divergence", c.divergence},
                          {"seed", inst_seed},
                          {"d_obs", c.d_obs},
                          {"d_state", c.d_state},
                          {"d_task", c.d_task},
                          {"chain_ok", c.chain_ok},
                          {"equality_ok", c.equality_ok},
                          {"pass", pass}});
            }
        }
    }
    if (suite == "bound" || all) {
        RandomSource rng(seed ^ 0xb0c4d1ull);
        const int n = trials > 0 ? trials : 50;
        for (int i = 0; i < n; ++i) {
            const std::uint64_t inst_seed = rng.next_u64();
            RandomSource irng(inst_seed);
            const int n_zp = 2 + static_cast<int>(irng.uniform_index(5));
            const int n_a = 2 + static_cast<int>(irng.uniform_index(2));
            const double gamma = irng.uniform(0.5, 0.95);
            const double eps = (i % 5 == 0) ? 0.0 : irng.uniform(0.0, 0.2);
            auto m = tabular::random_instance(irng, n_zp, 2, n_a, 4, true);
            auto expert = tabular::random_policy(irng, n_zp, n_a);
            auto agent = tabular::random_policy(irng, n_zp, n_a);
            auto c = oracle::verify_return_gap_bound(m, expert, agent, eps, gamma, irng);
            if (!c.pass) ++failures;
            emit(json{{"check", "return_gap_bound"},
                      {"seed", inst_seed},
                      {"gap", c.gap},
                      {"bound", c.bound},
                      {"tv", c.tv},
                      {"eps", c.eps_used},
                      {"pass", c.pass}});
        }
    }
    if (suite == "kl" || all) {
        RandomSource rng(seed ^ 0x712a9ull);
        const int n = trials > 0 ? trials : 20;
        for (int i = 0; i < n; ++i) {
            const int dim = 1 + static_cast<int>(rng.uniform_index(4));
            std::vector<double> mq(dim), sq(dim), mp(dim), sp(dim);
            for (int d = 0; d < dim; ++d) {
                mq[d] = rng.uniform(-1, 1);
                mp[d] = rng.uniform(-1, 1);
                sq[d] = rng.uniform(0.3, 2.0);
                sp[d] = rng.uniform(0.3, 2.0);
            }
            if (i == 0) { mp = mq; sp = sq; } // identical pair
            auto c = oracle::kl_closed_form_vs_mc(mq, sq, mp, sp, 1000000, rng);
            if (!c.pass) ++failures;
            emit(json{{"check", "kl_closed_vs_mc"},
                      {"dim", dim},
                      {"closed", c.closed_form},
                      {"mc", c.mc_estimate},
                      {"se", c.std_error},
                      {"pass", c.pass}});
        }
    }
    if (suite == "grads" || all) {
        for (const char* loss : {"kl", "recon", "disc", "actor", "value"}) {
            auto r = oracle::gradient_audit(loss, seed ^ 0x96adull);
            if (!r.pass) ++failures;
            emit(json{{"check", "gradient_audit"},
                      {"loss", r.loss_name},
                      {"coords", r.coords_checked},
                      {"max_rel_err", r.max_rel_err},
                      {"pass", r.pass}});
        }
    }
    if (!all && suite != "theorem" && suite != "bound" && suite != "kl" && suite != "grads") {
        std::cerr << "usage error: --suite must be one of theorem,bound,kl,grads,all\n";
        return kExitUsage;
    }
    std::fprintf(stderr, "verify suite '%s': %s (%d failures)\n", suite.c_str(),
                 failures == 0 ? "PASS" : "FAIL", failures);
    return failures == 0 ? kExitOk : kExitVerifyFailure;
}

int cmd_visualize(const std::string& ckpt, const std::string& out_dir,
                  const std::string& metrics_path) {
    Checkpoint ck = Checkpoint::load(ckpt);
    ExperimentConfig cfg = ck.parse_config();
    set_compute_threads(cfg.threads);
    EnvParams params = EnvParams::from_config(cfg);

    RandomSource dummy(0);
    WorldModel<float> wm(WorldModel<float>::Sizes::from_config(cfg, DistractedPointMassEnv::kActionDim),
                         dummy);
    Policy<float> policy(wm.sizes().state_dim(), cfg.dense_units,
                         DistractedPointMassEnv::kActionDim, dummy);
    for (auto* b : wm.bundles()) ck.load_bundle(*b);
    ck.load_bundle(policy.bundle());
    fs::create_directories(out_dir);

    double iou_sum = 0;
    long iou_n = 0;
    std::vector<viz::PanelRow<float>> rows;
    ScriptedExpert expert{cfg.expert_gain};
    for (const bool is_expert : {false, true}) {
        DistractedPointMassEnv env(params);
        RandomSource r(params.env_seed ^ (is_expert ? 0x1ee7ull : 0xface11ull));
        ImageObservation obs = env.reset(r);
        BranchState<float> task = wm.zero_state(), bg = wm.zero_state();
        std::vector<float> prev_action(DistractedPointMassEnv::kActionDim, 0.f);
        int t = 0;
        while (!env.done()) {
            const auto [et, eb] = wm.encode(obs);
            task = wm.posterior_task_opt(et, task, prev_action, nullptr).first;
            if (!wm.sizes().joint) bg = wm.posterior_background_opt(eb, bg, prev_action, nullptr).first;
            if (!wm.sizes().joint && t % 10 == 5) {
                auto rec = wm.decode_joint({task, bg});
                iou_sum += viz::mask_iou(rec.mask_final, env.ground_truth_mask().mask);
                ++iou_n;
                viz::PanelRow<float> row;
                row.expert = is_expert;
                row.o.assign(obs.pixels.begin(), obs.pixels.end());
                row.o_hat = rec.o_hat;
                row.o_hat_plus = rec.o_hat_plus;
                row.o_hat_minus = rec.o_hat_minus;
                row.mask = rec.mask_final;
                rows.push_back(std::move(row));
            }
            std::vector<float> a;
            if (is_expert) {
                auto ea = expert.act(env);
                a.assign(ea.values.begin(), ea.values.end());
            } else {
                a = policy.act(WorldModel<float>::concat_state(task), false, 0.0, r);
            }
            Action act;
            act.values.assign(a.begin(), a.end());
            auto [next_obs, reward, done] = env.step(act);
            obs = std::move(next_obs);
            prev_action = a;
            ++t;
            (void)reward;
            (void)done;
        }
    }
    if (!rows.empty())
        viz::save_reconstruction_panel(rows, cfg.image_size,
                                       (fs::path(out_dir) / "recon_panels.png").string());

    // P_E series from the metrics file when available
    std::string mpath = metrics_path;
    if (mpath.empty()) {
        const fs::path sibling = fs::path(ckpt).parent_path() / "metrics.csv";
        if (fs::exists(sibling)) mpath = sibling.string();
    }
    if (!mpath.empty()) {
        std::ifstream min(mpath);
        std::string line;
        std::getline(min, line); // header
        std::vector<double> pe;
        while (std::getline(min, line)) {
            int col = 0;
            std::string field;
            std::istringstream ls(line);
            while (std::getline(ls, field, ',')) {
                if (col == 6 && !field.empty()) pe.push_back(std::stod(field));
                ++col;
            }
        }
        viz::save_series_plot(pe, (fs::path(out_dir) / "pe_series.png").string());
    }
    if (iou_n > 0) std::printf("mask_iou = %.4f\n", iou_sum / static_cast<double>(iou_n));
    std::printf("wrote visualization artifacts to %s\n", out_dir.c_str());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    semail::boost_blas_kernel(argc, argv);
    CLI::App app{"separated-model adversarial imitation learning toolkit"};
    app.require_subcommand(1);

    // collect-expert
    auto* c_collect = app.add_subcommand("collect-expert", "write scripted-expert demonstrations");
    std::string env_name = "pointmass", demo_dir, config_path;
    int n_demos = 10;
    std::uint64_t seed = 0;
    ConfigCli collect_cli;
    c_collect->add_option("--env", env_name, "environment name (pointmass)");
    c_collect->add_option("--n", n_demos, "number of demonstrations");
    c_collect->add_option("--seed", seed, "environment/task seed");
    c_collect->add_option("--demo-dir", demo_dir, "output directory")->required();
    c_collect->add_option("--config", config_path, "config file");
    collect_cli.add_flags(c_collect, {"seed"});

    // train
    auto* c_train = app.add_subcommand("train", "run the training loop");
    std::string train_config, train_demo_dir, train_out, ablation = "none";
    bool quiet = false;
    ConfigCli train_cli;
    c_train->add_option("--config", train_config, "config file");
    c_train->add_option("--demo-dir", train_demo_dir, "demonstration directory")->required();
    c_train->add_option("--out", train_out, "output directory")->required();
    c_train->add_option("--ablation", ablation, "none | no_act | no_bor | joint");
    c_train->add_flag("--quiet", quiet, "suppress progress output");
    train_cli.add_flags(c_train);

    // eval
    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt;
    int eval_episodes = 10;
    std::uint64_t eval_seed = 0;
    c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    c_eval->add_option("--env", env_name, "environment name (pointmass)");
    c_eval->add_option("--episodes", eval_episodes, "number of evaluation episodes");
    c_eval->add_option("--seed", eval_seed, "evaluation seed variation (0 = checkpoint default)");

    // verify
    auto* c_verify = app.add_subcommand("verify", "run the oracle verification suites");
    std::string suite = "all", report_path;
    int trials = 0;
    std::uint64_t verify_seed = 0;
    c_verify->add_option("--suite", suite, "theorem | bound | kl | grads | all");
    c_verify->add_option("--trials", trials, "trial count (0 = suite default)");
    c_verify->add_option("--seed", verify_seed, "suite seed");
    c_verify->add_option("--report", report_path, "JSON-lines report file (default stdout)");

    // visualize
    auto* c_viz = app.add_subcommand("visualize", "write reconstruction panels from a checkpoint");
    std::string viz_ckpt, viz_out, viz_metrics;
    c_viz->add_option("--checkpoint", viz_ckpt, "checkpoint file")->required();
    c_viz->add_option("--env", env_name, "environment name (pointmass)");
    c_viz->add_option("--out", viz_out, "output directory")->required();
    c_viz->add_option("--metrics", viz_metrics, "metrics.csv for the P_E series");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (env_name != "pointmass") {
            std::cerr << "usage error: unknown environment '" << env_name << "'\n";
            return kExitUsage;
        }
        if (c_collect->parsed())
            return cmd_collect_expert(demo_dir, n_demos, seed, config_path, collect_cli);
        if (c_train->parsed())
            return cmd_train(train_config, train_demo_dir, train_out, ablation, train_cli, quiet);
        if (c_eval->parsed()) return cmd_eval(eval_ckpt, eval_episodes, eval_seed);
        if (c_verify->parsed()) return cmd_verify(suite, trials, verify_seed, report_path);
        if (c_viz->parsed()) return cmd_visualize(viz_ckpt, viz_out, viz_metrics);
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}
