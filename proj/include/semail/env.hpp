#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "semail/config.hpp"
#include "semail/episode.hpp"
#include "semail/rng.hpp"

namespace semail {

// 2D point mass rendered as a colored square over autonomously scrolling
// sinusoidal stripes. The stripes advance by a fixed velocity every step no
// matter what the agent does; the sprite moves only through actions. The
// goal is part of the task (drawn once from env_seed) and is never rendered:
// where to go can only be learned from demonstrations.
struct EnvParams {
    int image_size = 32;
    int max_steps = 100; // env steps; episode length is max_steps / action_repeat actions
    int action_repeat = 2;
    double step_size = 0.1;
    double background_velocity = 0.35; // radians per env step
    double stripe_cycles = 2.0;        // vertical spatial frequency
    std::uint64_t env_seed = 0;

    static EnvParams from_config(const ExperimentConfig& cfg) {
        EnvParams p;
        p.image_size = cfg.image_size;
        p.max_steps = cfg.max_steps;
        p.action_repeat = cfg.action_repeat;
        p.step_size = cfg.step_size;
        p.background_velocity = cfg.background_velocity;
        p.stripe_cycles =
            cfg.background_pattern == "A" ? cfg.stripe_cycles_a : cfg.stripe_cycles_b;
        p.env_seed = cfg.env_seed;
        return p;
    }
};

struct GroundTruthSegmentation {
    int hw = 0;
    std::vector<std::uint8_t> mask; // 1 where the sprite is drawn
};

class DistractedPointMassEnv {
public:
    static constexpr int kActionDim = 2;

    explicit DistractedPointMassEnv(const EnvParams& params) : p_(params) {
        RandomSource goal_rng(params.env_seed ^ 0x5eedull);
        goal_[0] = goal_rng.uniform(-0.8, 0.8);
        goal_[1] = goal_rng.uniform(-0.8, 0.8);
    }

    const EnvParams& params() const { return p_; }
    int action_dim() const { return kActionDim; }
    bool done() const { return steps_ >= p_.max_steps; }
    const double* agent_pos() const { return pos_; }
    const double* goal_pos() const { return goal_; }
    double background_phase() const { return phase_; }

    ImageObservation reset(RandomSource& rng) {
        pos_[0] = rng.uniform(-0.8, 0.8);
        pos_[1] = rng.uniform(-0.8, 0.8);
        phase_ = rng.uniform(0.0, 2.0 * M_PI);
        steps_ = 0;
        return render();
    }

    // Applies the action action_repeat times. Returns the next frame, the
    // evaluation-only reward accumulated over the repeats, and done.
    std::tuple<ImageObservation, double, bool> step(const Action& a) {
        if (done()) throw std::logic_error("step() on a finished episode");
        if (static_cast<int>(a.values.size()) != kActionDim)
            throw std::invalid_argument("action dimension mismatch");
        double reward = 0.0;
        for (int r = 0; r < p_.action_repeat; ++r) {
            for (int d = 0; d < kActionDim; ++d) {
                const double v = std::clamp(static_cast<double>(a.values[d]), -1.0, 1.0);
                pos_[d] = std::clamp(pos_[d] + p_.step_size * v, -1.0, 1.0);
            }
            phase_ += p_.background_velocity;
            const double dx = pos_[0] - goal_[0], dy = pos_[1] - goal_[1];
            reward += -std::sqrt(dx * dx + dy * dy);
            ++steps_;
        }
        return {render(), reward, done()};
    }

    ImageObservation render() const {
        ImageObservation obs = render_background();
        const auto [y0, y1, x0, x1] = sprite_rect();
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                float* px = obs.pixels.data() + (static_cast<std::size_t>(y) * p_.image_size + x) * 3;
                px[0] = 0.9f;
                px[1] = 0.15f;
                px[2] = 0.15f;
            }
        last_rendered_ = true;
        return obs;
    }

    // evaluation-only: the stripes without the sprite
    ImageObservation render_background_only() const { return render_background(); }

    // evaluation-only: exact sprite support of the most recent frame
    GroundTruthSegmentation ground_truth_mask() const {
        if (!last_rendered_) throw std::logic_error("ground_truth_mask before first render");
        GroundTruthSegmentation seg;
        seg.hw = p_.image_size;
        seg.mask.assign(static_cast<std::size_t>(p_.image_size) * p_.image_size, 0);
        const auto [y0, y1, x0, x1] = sprite_rect();
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) seg.mask[static_cast<std::size_t>(y) * p_.image_size + x] = 1;
        return seg;
    }

private:
    ImageObservation render_background() const {
        ImageObservation obs;
        obs.hw = p_.image_size;
        obs.pixels.resize(static_cast<std::size_t>(p_.image_size) * p_.image_size * 3);
        for (int y = 0; y < p_.image_size; ++y) {
            const double v = 0.5 + 0.4 * std::sin(2.0 * M_PI * p_.stripe_cycles * y /
                                                      p_.image_size +
                                                  phase_);
            const float g = static_cast<float>(std::clamp(v, 0.0, 1.0));
            for (int x = 0; x < p_.image_size; ++x) {
                float* px = obs.pixels.data() + (static_cast<std::size_t>(y) * p_.image_size + x) * 3;
                px[0] = px[1] = px[2] = g;
            }
        }
        return obs;
    }

    std::tuple<int, int, int, int> sprite_rect() const {
        const int side = std::max(3, p_.image_size / 6);
        const int cy = static_cast<int>(std::lround((pos_[1] + 1.0) * 0.5 * (p_.image_size - 1)));
        const int cx = static_cast<int>(std::lround((pos_[0] + 1.0) * 0.5 * (p_.image_size - 1)));
        const int y0 = std::clamp(cy - side / 2, 0, p_.image_size);
        const int y1 = std::clamp(cy - side / 2 + side, 0, p_.image_size);
        const int x0 = std::clamp(cx - side / 2, 0, p_.image_size);
        const int x1 = std::clamp(cx - side / 2 + side, 0, p_.image_size);
        return {y0, y1, x0, x1};
    }

    EnvParams p_;
    double pos_[2] = {0, 0};
    double goal_[2] = {0, 0};
    double phase_ = 0.0;
    int steps_ = 0;
    mutable bool last_rendered_ = false;
};

// Proportional controller toward the goal; the demonstration-time stand-in
// for a trained expert policy.
struct ScriptedExpert {
    double gain = 0.5;

    Action act(const DistractedPointMassEnv& env) const {
        Action a;
        a.values.resize(DistractedPointMassEnv::kActionDim);
        for (int d = 0; d < DistractedPointMassEnv::kActionDim; ++d) {
            const double v = gain * (env.goal_pos()[d] - env.agent_pos()[d]);
            a.values[d] = static_cast<float>(std::clamp(v, -1.0, 1.0));
        }
        return a;
    }
};

template <class Policy>
inline EpisodeRecord rollout_episode(DistractedPointMassEnv& env, RandomSource& rng,
                                     Policy&& policy, bool is_expert) {
    std::vector<ImageObservation> obs;
    std::vector<Action> actions;
    std::vector<float> rewards;
    obs.push_back(env.reset(rng));
    while (!env.done()) {
        Action a = policy(env, obs.back());
        auto [next_obs, reward, done] = env.step(a);
        obs.push_back(std::move(next_obs));
        actions.push_back(std::move(a));
        rewards.push_back(static_cast<float>(reward));
        (void)done;
    }
    return EpisodeRecord(std::move(obs), std::move(actions), std::move(rewards), is_expert);
}

inline std::vector<EpisodeRecord> collect_demonstrations(DistractedPointMassEnv& env,
                                                         const ScriptedExpert& expert, int n,
                                                         RandomSource& rng) {
    if (n < 1) throw std::invalid_argument("need at least one demonstration");
    std::vector<EpisodeRecord> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(rollout_episode(
            env, rng, [&](const DistractedPointMassEnv& e, const ImageObservation&) { return expert.act(e); },
            true));
    return out;
}

inline EpisodeRecord random_policy_episode(DistractedPointMassEnv& env, RandomSource& rng) {
    return rollout_episode(
        env, rng,
        [&rng](const DistractedPointMassEnv& e, const ImageObservation&) {
            Action a;
            a.values.resize(e.action_dim());
            for (auto& v : a.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
            return a;
        },
        false);
}

} // namespace semail
