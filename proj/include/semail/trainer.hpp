#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semail/agent.hpp"
#include "semail/buffer.hpp"
#include "semail/checkpoint.hpp"
#include "semail/config.hpp"
#include "semail/discriminator.hpp"
#include "semail/env.hpp"
#include "semail/viz.hpp"
#include "semail/worldmodel.hpp"

namespace semail {

// step, episode, losses for training rows; eval_return/mask_iou for
// evaluation rows. Missing values stay empty in the CSV.
struct MetricsRow {
    long step = 0;
    int episode = 0;
    double kl_loss = NAN, recon_loss = NAN, bor_loss = NAN, disc_loss = NAN;
    double mean_D_on_agent = NAN, actor_loss = NAN, value_loss = NAN;
    double eval_return = NAN, mask_iou = NAN;

    static const char* header() {
        return "step,episode,kl_loss,recon_loss,bor_loss,disc_loss,mean_D_on_agent,actor_loss,"
               "value_loss,eval_return,mask_iou";
    }
    std::string csv() const {
        std::ostringstream os;
        auto field = [&os](double v) {
            os << ',';
            if (!std::isnan(v)) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.9g", v);
                os << buf;
            }
        };
        os << step << ',' << episode;
        field(kl_loss);
        field(recon_loss);
        field(bor_loss);
        field(disc_loss);
        field(mean_D_on_agent);
        field(actor_loss);
        field(value_loss);
        field(eval_return);
        field(mask_iou);
        return os.str();
    }
};

struct EvalResult {
    double mean_return = 0;
    double std_return = 0;
    double score = 0; // expert-normalized, 0 = random, 1 = expert
    double mask_iou = NAN;
};

template <class T = float>
class Trainer {
public:
    Trainer(const ExperimentConfig& cfg, std::vector<EpisodeRecord> demos, std::string out_dir,
            bool quiet = false)
        : cfg_(cfg),
          env_params_(EnvParams::from_config(cfg)),
          env_(env_params_),
          out_dir_(std::move(out_dir)),
          quiet_(quiet),
          master_(cfg.seed),
          rng_(master_.child(1)),
          collect_rng_(master_.child(2)),
          model_rng_(master_.child(3)),
          agent_buf_(cfg.buffer_capacity),
          expert_buf_(cfg.buffer_capacity),
          wm_(WorldModel<T>::Sizes::from_config(cfg, DistractedPointMassEnv::kActionDim),
              model_rng_),
          disc_(wm_.sizes().state_dim() + DistractedPointMassEnv::kActionDim, cfg.dense_units,
                model_rng_),
          policy_(wm_.sizes().state_dim(), cfg.dense_units, DistractedPointMassEnv::kActionDim,
                  model_rng_),
          value_(wm_.sizes().state_dim(), cfg.dense_units, model_rng_) {
        if (demos.empty()) throw std::runtime_error("trainer: expert demonstrations are required");
        for (auto& d : demos) {
            if (!d.is_expert) throw std::runtime_error("trainer: non-expert episode in demo set");
            expert_buf_.add_episode(std::move(d));
        }
        opt_wm_.lr = cfg.model_lr;
        opt_policy_.lr = opt_value_.lr = opt_disc_.lr = cfg.ac_disc_lr;
        opt_wm_.clip_norm = opt_policy_.clip_norm = opt_value_.clip_norm = opt_disc_.clip_norm =
            cfg.grad_clip_norm;

        std::filesystem::create_directories(out_dir_);
        std::filesystem::create_directories(out_dir_ + "/viz");
        metrics_.open(out_dir_ + "/metrics.csv");
        if (!metrics_) throw std::runtime_error("cannot write metrics under " + out_dir_);
        metrics_ << MetricsRow::header() << "\n";
        metrics_.flush();

        compute_anchors();
    }

    const ExperimentConfig& config() const { return cfg_; }
    WorldModel<T>& world_model() { return wm_; }
    Discriminator<T>& discriminator() { return disc_; }
    Policy<T>& policy() { return policy_; }
    ValueFunction<T>& value_function() { return value_; }
    ReplayBuffer& agent_buffer() { return agent_buf_; }
    double expert_anchor() const { return expert_ref_; }
    double random_anchor() const { return random_ref_; }
    long global_step() const { return global_step_; }
    int episodes_collected() const { return episodes_; }
    const std::vector<double>& pe_series() const { return pe_series_; }

    // n uniform-random-action episodes into the agent buffer
    void seed_phase(int n) {
        for (int i = 0; i < n; ++i)
            agent_buf_.add_episode(random_policy_episode(env_, collect_rng_));
    }

    // one environment episode with task-branch posterior filtering and noisy
    // policy actions
    void collect_episode() {
        std::vector<ImageObservation> obs_list;
        std::vector<Action> actions;
        std::vector<float> rewards;
        obs_list.push_back(env_.reset(collect_rng_));
        BranchState<T> state = wm_.zero_state();
        std::vector<T> prev_action(DistractedPointMassEnv::kActionDim, T(0));
        while (!env_.done()) {
            const auto embed = wm_.encode_task(obs_list.back());
            state = wm_.posterior_task_opt(embed, state, prev_action, &collect_rng_).first;
            const auto a = policy_.act(WorldModel<T>::concat_state(state), true,
                                       cfg_.exploration_noise_std, collect_rng_);
            Action act;
            act.values.assign(a.begin(), a.end());
            auto [next_obs, reward, done] = env_.step(act);
            obs_list.push_back(std::move(next_obs));
            actions.push_back(act);
            rewards.push_back(static_cast<float>(reward));
            prev_action = a;
            (void)done;
        }
        agent_buf_.add_episode(
            EpisodeRecord(std::move(obs_list), std::move(actions), std::move(rewards), false));
        ++episodes_;
    }

    struct IterStats {
        double kl = 0, recon = 0, bor = 0, disc = 0, pe = 0, actor = 0, value = 0;
    };

    // model step, discriminator step on imagined-vs-expert pairs, actor and
    // value steps on fresh imagination
    IterStats train_iteration() {
        IterStats st;
        const int B = cfg_.batch, L = cfg_.seq_len;
        SequenceBatch batch = sample_union_sequences(agent_buf_, expert_buf_, B, L, rng_);

        // (1) world model
        std::vector<T> starts;
        {
            ad::Tape<T> tape;
            nn::Binding<T> bind(tape, true);
            auto g = wm_.build_filter(tape, bind, batch, rng_);
            auto kl = wm_.kl_loss_graph(tape, g, cfg_.free_nats, cfg_.kl_beta);
            const double lambda = cfg_.no_bor ? 0.0 : cfg_.bor_weight;
            auto recon = wm_.recon_loss_graph(tape, bind, g, lambda);
            auto loss = tape.add(kl, recon.total);
            st.kl = tape.val(kl)[0];
            st.recon = tape.val(recon.joint_nll)[0];
            st.bor = recon.bor_nll.valid() ? tape.val(recon.bor_nll)[0] : NAN;
            check_finite(st.kl, "kl_loss");
            check_finite(st.recon, "reconstruction_loss");
            tape.backward(loss);
            starts = gather_starts(tape, g, batch);
            opt_wm_.step(bind);
        }

        // (2) expert pairs from a dedicated demo sample, filtered with the
        // updated model
        std::vector<T> expert_pairs = filter_expert_pairs();

        // (3) imagined agent pairs for the discriminator (forward only)
        std::vector<T> agent_pairs;
        {
            ad::Tape<T> tape;
            nn::Binding<T> wm_bind(tape, false), pol_bind(tape, false);
            auto roll = imagine_rollout(tape, wm_, wm_bind, policy_, pol_bind, starts,
                                        cfg_.imagination_horizon, rng_);
            const int n = roll.n;
            const int sd = wm_.sizes().state_dim();
            const int ad = DistractedPointMassEnv::kActionDim;
            // pairs from imagined steps 1..H-1
            for (int k = 0; k + 1 < roll.horizon; ++k) {
                const auto& s = tape.val(roll.states[k]);
                const auto& a = tape.val(roll.actions[k]);
                for (int i = 0; i < n; ++i) {
                    agent_pairs.insert(agent_pairs.end(), s.begin() + static_cast<std::size_t>(i) * sd,
                                       s.begin() + static_cast<std::size_t>(i + 1) * sd);
                    agent_pairs.insert(agent_pairs.end(), a.begin() + static_cast<std::size_t>(i) * ad,
                                       a.begin() + static_cast<std::size_t>(i + 1) * ad);
                }
            }
        }

        // (4) discriminator step
        {
            ad::Tape<T> tape;
            nn::Binding<T> bind(tape, true);
            auto loss = disc_.loss_graph(tape, bind, expert_pairs, agent_pairs, cfg_.gp_weight,
                                         rng_);
            st.disc = tape.val(loss.total)[0];
            st.pe = tape.val(loss.mean_agent_prob)[0];
            check_finite(st.disc, "discriminator_loss");
            tape.backward(loss.total);
            opt_disc_.step(bind);
        }
        pe_series_.push_back(st.pe);

        // (5) actor step on fresh imagination
        std::vector<T> imagined_states;
        std::vector<T> value_targets;
        {
            ad::Tape<T> tape;
            nn::Binding<T> wm_bind(tape, false), pol_bind(tape, true), disc_bind(tape, false),
                val_bind(tape, false);
            auto out = actor_loss_graph(tape, wm_, wm_bind, policy_, pol_bind, disc_, disc_bind,
                                        value_, val_bind, starts, cfg_.imagination_horizon,
                                        cfg_.discount, cfg_.return_lambda, rng_,
                                        cfg_.entropy_weight);
            st.actor = tape.val(out.loss)[0];
            check_finite(st.actor, "actor_loss");
            tape.backward(out.loss);
            opt_policy_.step(pol_bind);
            const int sd = wm_.sizes().state_dim();
            for (int k = 0; k < out.rollout.horizon; ++k) {
                const auto& s = tape.val(out.rollout.states[k]);
                imagined_states.insert(imagined_states.end(), s.begin(), s.end());
                (void)sd;
                value_targets.insert(value_targets.end(), out.return_targets[k].begin(),
                                     out.return_targets[k].end());
            }
        }

        // (6) value step on the detached rollout
        {
            ad::Tape<T> tape;
            nn::Binding<T> bind(tape, true);
            auto loss = value_loss_graph(tape, value_, bind, imagined_states,
                                         wm_.sizes().state_dim(), value_targets);
            st.value = tape.val(loss)[0];
            check_finite(st.value, "value_loss");
            tape.backward(loss);
            opt_value_.step(bind);
        }

        ++global_step_;
        MetricsRow row;
        row.step = global_step_;
        row.episode = episodes_;
        row.kl_loss = st.kl;
        row.recon_loss = st.recon;
        row.bor_loss = st.bor;
        row.disc_loss = st.disc;
        row.mean_D_on_agent = st.pe;
        row.actor_loss = st.actor;
        row.value_loss = st.value;
        metrics_ << row.csv() << "\n";
        return st;
    }

    // deterministic rollouts with posterior-mean filtering; also measures
    // mask IoU against the environment's ground-truth sprite mask
    EvalResult evaluate() {
        EvalResult res;
        std::vector<double> returns;
        double iou_sum = 0;
        long iou_count = 0;
        for (int e = 0; e < cfg_.eval_episodes; ++e) {
            DistractedPointMassEnv env(env_params_);
            RandomSource ep_rng = eval_episode_rng(e);
            ImageObservation obs = env.reset(ep_rng);
            BranchState<T> task = wm_.zero_state();
            BranchState<T> bg = wm_.zero_state();
            std::vector<T> prev_action(DistractedPointMassEnv::kActionDim, T(0));
            double ep_return = 0;
            int t = 0;
            while (!env.done()) {
                const auto [embed_t, embed_b] = wm_.encode(obs);
                task = wm_.posterior_task_opt(embed_t, task, prev_action, nullptr).first;
                if (!wm_.sizes().joint)
                    bg = wm_.posterior_background_opt(embed_b, bg, prev_action, nullptr).first;
                if (!wm_.sizes().joint && t % 5 == 0) {
                    auto rec = wm_.decode_joint({task, bg});
                    iou_sum += viz::mask_iou(rec.mask_final, env.ground_truth_mask().mask);
                    ++iou_count;
                }
                const auto a = policy_.act(WorldModel<T>::concat_state(task), false, 0.0, ep_rng);
                Action act;
                act.values.assign(a.begin(), a.end());
                auto [next_obs, reward, done] = env.step(act);
                ep_return += reward;
                obs = std::move(next_obs);
                prev_action = a;
                ++t;
                (void)done;
            }
            returns.push_back(ep_return);
        }
        double mean = 0;
        for (const double r : returns) mean += r;
        mean /= returns.size();
        double var = 0;
        for (const double r : returns) var += (r - mean) * (r - mean);
        res.mean_return = mean;
        res.std_return = std::sqrt(var / returns.size());
        res.score = normalized_score(mean);
        if (iou_count > 0) res.mask_iou = iou_sum / static_cast<double>(iou_count);
        return res;
    }

    double normalized_score(double mean_return) const {
        return (mean_return - random_ref_) / (expert_ref_ - random_ref_);
    }

    // Algorithm 1 end to end: seed, then alternate collection with training
    // blocks, evaluating and checkpointing periodically. Stops early once
    // the evaluation score reaches early_stop_score.
    EvalResult run() {
        seed_phase(cfg_.seed_episodes);
        EvalResult last;
        bool stopped = false;
        for (int ep = 1; ep <= cfg_.episodes && !stopped; ++ep) {
            collect_episode();
            IterStats st{};
            const auto t0 = std::chrono::steady_clock::now();
            for (int i = 0; i < cfg_.train_iters_per_episode; ++i) st = train_iteration();
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!quiet_)
                std::fprintf(stderr,
                             "[ep %3d] kl=%.3f recon=%.1f bor=%.1f disc=%.3f P_E=%.3f actor=%.3f "
                             "value=%.4f (%.2fs/block)\n",
                             episodes_, st.kl, st.recon, st.bor, st.disc, st.pe, st.actor, st.value,
                             secs);
            if (ep % cfg_.eval_every == 0 || ep == cfg_.episodes) {
                last = evaluate();
                write_eval_row(last);
                write_viz();
                save_checkpoint(out_dir_ + "/checkpoint_latest.smck");
                if (!quiet_)
                    std::fprintf(stderr, "[ep %3d] eval return=%.2f score=%.3f iou=%.3f\n",
                                 episodes_, last.mean_return, last.score, last.mask_iou);
                if (cfg_.early_stop_score > 0 && last.score >= cfg_.early_stop_score) stopped = true;
            }
        }
        metrics_.flush();
        save_checkpoint(out_dir_ + "/checkpoint_latest.smck");
        return last;
    }

    void save_checkpoint(const std::string& path) {
        Checkpoint ck;
        ExperimentConfig cfg_copy = cfg_;
        std::ostringstream cfg_text;
        for (auto& f : cfg_copy.fields()) cfg_text << f.name << " = " << cfg_copy.get(f.name) << "\n";
        ck.config_text = cfg_text.str();
        ck.episodes_collected = static_cast<std::uint64_t>(episodes_);
        ck.global_step = static_cast<std::uint64_t>(global_step_);
        for (auto* b : wm_.bundles()) ck.put_bundle(*b);
        ck.put_bundle(disc_.bundle());
        ck.put_bundle(policy_.bundle());
        ck.put_bundle(value_.bundle());
        ck.save(path);
    }

    void load_checkpoint(const Checkpoint& ck) {
        for (auto* b : wm_.bundles()) ck.load_bundle(*b);
        ck.load_bundle(disc_.bundle());
        ck.load_bundle(policy_.bundle());
        ck.load_bundle(value_.bundle());
        episodes_ = static_cast<int>(ck.episodes_collected);
        global_step_ = static_cast<long>(ck.global_step);
    }

    RandomSource eval_episode_rng(int episode_index) const {
        RandomSource base(env_params_.env_seed ^ 0xEA15EEDull);
        return base.child(static_cast<std::uint64_t>(episode_index));
    }

    void write_eval_row(const EvalResult& res) {
        MetricsRow row;
        row.step = global_step_;
        row.episode = episodes_;
        row.eval_return = res.mean_return;
        row.mask_iou = res.mask_iou;
        metrics_ << row.csv() << "\n";
        metrics_.flush();
    }

    // Fig.4-style reconstruction panels for one agent eval episode and one
    // expert demo, plus the P_E series
    void write_viz() {
        std::vector<viz::PanelRow<T>> rows;
        append_panel_rows(rows, false);
        append_panel_rows(rows, true);
        if (!rows.empty())
            viz::save_reconstruction_panel(rows, cfg_.image_size,
                                           out_dir_ + "/viz/recon_ep" + std::to_string(episodes_) +
                                               ".png");
        viz::save_series_plot(pe_series_, out_dir_ + "/viz/pe_series.png");
    }

private:
    void compute_anchors() {
        double expert_sum = 0, random_sum = 0;
        ScriptedExpert expert{cfg_.expert_gain};
        for (int e = 0; e < cfg_.eval_episodes; ++e) {
            {
                DistractedPointMassEnv env(env_params_);
                RandomSource r = eval_episode_rng(e);
                expert_sum += rollout_episode(
                                  env, r,
                                  [&](const DistractedPointMassEnv& en, const ImageObservation&) {
                                      return expert.act(en);
                                  },
                                  true)
                                  .eval_only_return();
            }
            {
                DistractedPointMassEnv env(env_params_);
                RandomSource r = eval_episode_rng(e);
                random_sum += random_policy_episode(env, r).eval_only_return();
            }
        }
        expert_ref_ = expert_sum / cfg_.eval_episodes;
        random_ref_ = random_sum / cfg_.eval_episodes;
        if (expert_ref_ <= random_ref_)
            throw std::runtime_error("scripted expert does not beat the random baseline");
    }

    // detached task posterior states of the agent-sourced rows, capped at
    // imagine_starts by a uniform draw
    std::vector<T> gather_starts(ad::Tape<T>& tape, const typename WorldModel<T>::FilterGraph& g,
                                 const SequenceBatch& batch) {
        std::vector<int> rows;
        for (int b = 0; b < batch.batch; ++b)
            if (!batch.source_flags[b]) rows.push_back(b);
        if (rows.empty())
            for (int b = 0; b < batch.batch; ++b) rows.push_back(b);
        const int sd = wm_.sizes().state_dim();
        std::vector<std::pair<int, int>> coords; // (t, b)
        coords.reserve(static_cast<std::size_t>(rows.size()) * g.L);
        for (int t = 0; t < g.L; ++t)
            for (const int b : rows) coords.push_back({t, b});
        const int cap = cfg_.imagine_starts;
        std::vector<std::pair<int, int>> chosen;
        if (cap > 0 && static_cast<int>(coords.size()) > cap) {
            for (int i = 0; i < cap; ++i)
                chosen.push_back(coords[rng_.uniform_index(coords.size())]);
        } else {
            chosen = coords;
        }
        std::vector<T> out;
        out.reserve(chosen.size() * static_cast<std::size_t>(sd));
        for (const auto& [t, b] : chosen) {
            const auto& stoch = tape.val(g.task_states[t].stoch);
            const auto& deter = tape.val(g.task_states[t].deter);
            out.insert(out.end(), stoch.begin() + static_cast<std::size_t>(b) * wm_.sizes().stoch,
                       stoch.begin() + static_cast<std::size_t>(b + 1) * wm_.sizes().stoch);
            out.insert(out.end(), deter.begin() + static_cast<std::size_t>(b) * wm_.sizes().deter,
                       deter.begin() + static_cast<std::size_t>(b + 1) * wm_.sizes().deter);
        }
        return out;
    }

    // (z_t^E+, a_t^E) rows from a dedicated expert-buffer sample
    std::vector<T> filter_expert_pairs() {
        const int rows = std::min(cfg_.disc_expert_batch, expert_buf_.size());
        ReplayBuffer empty(1);
        SequenceBatch eb = sample_union_sequences(empty, expert_buf_, rows, cfg_.seq_len, rng_);
        ad::Tape<T> tape;
        nn::Binding<T> bind(tape, false);
        auto g = wm_.build_filter(tape, bind, eb, rng_);
        const int sd = wm_.sizes().state_dim();
        const int ad = eb.action_dim;
        std::vector<T> pairs;
        pairs.reserve(static_cast<std::size_t>(rows) * eb.length * (sd + ad));
        for (int t = 0; t < eb.length; ++t) {
            const auto& stoch = tape.val(g.task_states[t].stoch);
            const auto& deter = tape.val(g.task_states[t].deter);
            for (int b = 0; b < rows; ++b) {
                pairs.insert(pairs.end(), stoch.begin() + static_cast<std::size_t>(b) * wm_.sizes().stoch,
                             stoch.begin() + static_cast<std::size_t>(b + 1) * wm_.sizes().stoch);
                pairs.insert(pairs.end(), deter.begin() + static_cast<std::size_t>(b) * wm_.sizes().deter,
                             deter.begin() + static_cast<std::size_t>(b + 1) * wm_.sizes().deter);
                const float* a = eb.act_at(b, t);
                for (int j = 0; j < ad; ++j) pairs.push_back(static_cast<T>(a[j]));
            }
        }
        return pairs;
    }

    void append_panel_rows(std::vector<viz::PanelRow<T>>& rows, bool expert) {
        if (wm_.sizes().joint) return;
        // filter a short prefix of a representative episode
        const EpisodeRecord* ep = nullptr;
        if (expert && expert_buf_.size() > 0) ep = &expert_buf_.episode(0);
        if (!expert && agent_buf_.size() > 0) ep = &agent_buf_.episode(agent_buf_.size() - 1);
        if (!ep) return;
        BranchState<T> task = wm_.zero_state(), bg = wm_.zero_state();
        std::vector<T> prev_action(DistractedPointMassEnv::kActionDim, T(0));
        const int steps = std::min<int>(ep->length(), 24);
        for (int t = 0; t < steps; ++t) {
            const auto [et, ebd] = wm_.encode(ep->observations[t]);
            task = wm_.posterior_task_opt(et, task, prev_action, nullptr).first;
            bg = wm_.posterior_background_opt(ebd, bg, prev_action, nullptr).first;
            const auto& av = ep->actions[t].values;
            prev_action.assign(av.begin(), av.end());
            if (t % 8 != 4) continue;
            auto rec = wm_.decode_joint({task, bg});
            viz::PanelRow<T> row;
            row.expert = expert;
            row.o.assign(ep->observations[t].pixels.begin(), ep->observations[t].pixels.end());
            row.o_hat = rec.o_hat;
            row.o_hat_plus = rec.o_hat_plus;
            row.o_hat_minus = rec.o_hat_minus;
            row.mask = rec.mask_final;
            rows.push_back(std::move(row));
        }
    }

    static void check_finite(double v, const char* what) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite ") + what +
                                     " — aborting training (diverged)");
    }

    ExperimentConfig cfg_;
    EnvParams env_params_;
    DistractedPointMassEnv env_;
    std::string out_dir_;
    bool quiet_;
    RandomSource master_, rng_, collect_rng_, model_rng_;
    ReplayBuffer agent_buf_, expert_buf_;
    WorldModel<T> wm_;
    Discriminator<T> disc_;
    Policy<T> policy_;
    ValueFunction<T> value_;
    nn::Adam<T> opt_wm_, opt_policy_, opt_value_, opt_disc_;
    std::ofstream metrics_;
    std::vector<double> pe_series_;
    long global_step_ = 0;
    int episodes_ = 0;
    double expert_ref_ = 0, random_ref_ = 0;
};

} // namespace semail
