#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "semail/discriminator.hpp"
#include "semail/nn.hpp"
#include "semail/rng.hpp"
#include "semail/tape.hpp"
#include "semail/worldmodel.hpp"

namespace semail {

// tanh-squashed diagonal Gaussian over actions, conditioned on the
// task-branch state (stoch + deter)
template <class T>
class Policy {
public:
    using Tape = ad::Tape<T>;
    using Var = typename Tape::Var;

    Policy(int state_dim, int hidden, int action_dim, RandomSource& rng)
        : in_(state_dim), hid_(hidden), act_(action_dim) {
        bundle_.name = "policy";
        l1_.build(bundle_, "l1", in_, hid_, rng);
        l2_.build(bundle_, "l2", hid_, hid_, rng);
        head_.build(bundle_, "head", hid_, 2 * act_, rng, /*zero_init=*/true);
    }

    nn::Bundle<T>& bundle() { return bundle_; }
    int action_dim() const { return act_; }

    struct StatsVars {
        Var mean, stddev;
    };

    StatsVars stats_graph(Tape& tape, nn::Binding<T>& bind, Var state, int m) const {
        Var h1 = tape.elu(l1_.apply(tape, bind, state, m));
        Var h2 = tape.elu(l2_.apply(tape, bind, h1, m));
        Var stats = head_.apply(tape, bind, h2, m);
        Var mean = tape.slice_cols(stats, 2 * act_, 0, act_);
        Var std = tape.add_scalar(tape.softplus(tape.slice_cols(stats, 2 * act_, act_, act_)),
                                  T(0.1));
        return {mean, std};
    }

    // reparameterized squashed sample: tanh(mean + std * eps)
    Var sample_graph(Tape& tape, nn::Binding<T>& bind, Var state, int m, RandomSource& rng) const {
        auto st = stats_graph(tape, bind, state, m);
        std::vector<T> eps(static_cast<std::size_t>(m) * act_);
        rng.fill_normal(eps);
        return tape.tanh_(tape.add(st.mean, tape.mul(st.stddev, tape.constant(std::move(eps)))));
    }

    // environment-facing action. train: squashed sample plus exploration
    // noise, clipped; eval: tanh of the mean.
    std::vector<T> act(const std::vector<T>& state, bool train_mode, double noise_std,
                       RandomSource& rng) const {
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var s = tape.constant(state);
        auto st = stats_graph(tape, bind, s, 1);
        std::vector<T> out(act_);
        const auto& mean = tape.val(st.mean);
        const auto& std = tape.val(st.stddev);
        for (int j = 0; j < act_; ++j) {
            double a;
            if (train_mode) {
                a = std::tanh(mean[j] + std[j] * rng.normal());
                a += noise_std * rng.normal();
            } else {
                a = std::tanh(mean[j]);
            }
            out[j] = static_cast<T>(std::clamp(a, -1.0, 1.0));
        }
        return out;
    }

private:
    int in_, hid_, act_;
    nn::Bundle<T> bundle_;
    nn::DenseLayer<T> l1_, l2_, head_;
};

template <class T>
class ValueFunction {
public:
    using Tape = ad::Tape<T>;
    using Var = typename Tape::Var;

    ValueFunction(int state_dim, int hidden, RandomSource& rng) : in_(state_dim), hid_(hidden) {
        bundle_.name = "value";
        l1_.build(bundle_, "l1", in_, hid_, rng);
        l2_.build(bundle_, "l2", hid_, hid_, rng);
        head_.build(bundle_, "head", hid_, 1, rng, /*zero_init=*/true);
    }

    nn::Bundle<T>& bundle() { return bundle_; }

    Var value_graph(Tape& tape, nn::Binding<T>& bind, Var state, int m) const {
        Var h1 = tape.elu(l1_.apply(tape, bind, state, m));
        Var h2 = tape.elu(l2_.apply(tape, bind, h1, m));
        return head_.apply(tape, bind, h2, m); // [m,1]
    }

    std::vector<T> value_batch(const std::vector<T>& states) const {
        const int m = static_cast<int>(states.size()) / in_;
        Tape tape;
        nn::Binding<T> bind(tape, false);
        return tape.val(value_graph(tape, bind, tape.constant(states), m));
    }

private:
    int in_, hid_;
    nn::Bundle<T> bundle_;
    nn::DenseLayer<T> l1_, l2_, head_;
};

// TD(lambda) targets. rewards/values are [N,H] flattened time-major lists of
// [N] columns; recursion R_t = r_t + gamma*((1-lambda)*v_{t+1} + lambda*R_{t+1})
// with v_{H+1} := v_H and R_{H+1} := v_H as the terminal bootstrap.
template <class T>
inline std::vector<std::vector<T>> lambda_returns(const std::vector<std::vector<T>>& rewards,
                                                  const std::vector<std::vector<T>>& values,
                                                  double gamma, double lambda) {
    const int H = static_cast<int>(rewards.size());
    if (H < 1 || values.size() != rewards.size())
        throw std::invalid_argument("lambda_returns: need H >= 1 matching reward/value lists");
    const std::size_t N = rewards[0].size();
    std::vector<std::vector<T>> returns(H, std::vector<T>(N));
    std::vector<T> next_return = values[H - 1];
    const std::vector<T>* next_value = &values[H - 1];
    for (int t = H - 1; t >= 0; --t) {
        for (std::size_t i = 0; i < N; ++i)
            returns[t][i] = rewards[t][i] +
                            static_cast<T>(gamma) *
                                (static_cast<T>(1.0 - lambda) * (*next_value)[i] +
                                 static_cast<T>(lambda) * next_return[i]);
        next_return = returns[t];
        next_value = &values[t];
    }
    return returns;
}

// One imagined rollout from detached start states. Actions are sampled from
// the policy, transitions come from the task prior only; the background
// branch never appears in this graph. states[k] pairs with actions[k], the
// action taken at that state (and driving the k+1 transition).
template <class T>
struct ImaginedRollout {
    using Var = typename ad::Tape<T>::Var;
    int n = 0, horizon = 0;
    std::vector<Var> states;  // [H] of [N, stoch+deter], imagined steps 1..H
    std::vector<Var> actions; // [H] of [N, A]
};

template <class T>
inline ImaginedRollout<T> imagine_rollout(ad::Tape<T>& tape, WorldModel<T>& wm,
                                          nn::Binding<T>& wm_bind, Policy<T>& policy,
                                          nn::Binding<T>& pol_bind,
                                          const std::vector<T>& start_states, int horizon,
                                          RandomSource& rng) {
    using Var = typename ad::Tape<T>::Var;
    const auto& sz = wm.sizes();
    const int n = static_cast<int>(start_states.size()) / sz.state_dim();
    if (horizon < 1) throw std::invalid_argument("imagine_rollout: horizon must be >= 1");

    Var start = tape.constant(start_states);
    typename WorldModel<T>::StateVars state{
        tape.slice_cols(start, sz.state_dim(), 0, sz.stoch),
        tape.slice_cols(start, sz.state_dim(), sz.stoch, sz.deter)};

    // step out of the (posterior) start state; that pair is not recorded
    Var a0 = policy.sample_graph(tape, pol_bind, start, n, rng);
    state = wm.prior_step_graph(tape, wm_bind, false, state, a0, wm.noise_var(tape, rng, n), n)
                .first;

    ImaginedRollout<T> out;
    out.n = n;
    out.horizon = horizon;
    for (int k = 1; k <= horizon; ++k) {
        Var cur = tape.concat_cols(state.stoch, sz.stoch, state.deter, sz.deter);
        Var action = policy.sample_graph(tape, pol_bind, cur, n, rng);
        out.states.push_back(cur);
        out.actions.push_back(action);
        if (k < horizon)
            state = wm.prior_step_graph(tape, wm_bind, false, state, action,
                                        wm.noise_var(tape, rng, n), n)
                        .first;
    }
    return out;
}

// Negative mean lambda-return over imagined rollouts with discriminator
// log-probabilities as rewards, differentiated pathwise through the
// reparameterized dynamics and policy. The discriminator and value nets
// enter as constants: their parameters receive no gradient here.
template <class T>
struct ActorLossVars {
    using Var = typename ad::Tape<T>::Var;
    Var loss;
    ImaginedRollout<T> rollout;
    std::vector<std::vector<T>> return_targets; // detached [H][N], value-training targets
};

template <class T>
inline ActorLossVars<T> actor_loss_graph(ad::Tape<T>& tape, WorldModel<T>& wm,
                                         nn::Binding<T>& wm_bind, Policy<T>& policy,
                                         nn::Binding<T>& pol_bind, Discriminator<T>& disc,
                                         nn::Binding<T>& disc_bind, ValueFunction<T>& value,
                                         nn::Binding<T>& val_bind,
                                         const std::vector<T>& start_states, int horizon,
                                         double gamma, double lambda, RandomSource& rng,
                                         double entropy_weight = 0.0) {
    using Var = typename ad::Tape<T>::Var;
    const auto& sz = wm.sizes();
    ActorLossVars<T> out;
    out.rollout = imagine_rollout(tape, wm, wm_bind, policy, pol_bind, start_states, horizon, rng);
    const int n = out.rollout.n;
    const int H = horizon;

    std::vector<Var> rewards(H), values(H);
    for (int k = 0; k < H; ++k) {
        Var pair = tape.concat_cols(out.rollout.states[k], sz.state_dim(), out.rollout.actions[k],
                                    sz.action_dim);
        Var prob = disc.classify_graph(tape, disc_bind, pair, n);
        rewards[k] = disc.clamped_log_graph(tape, prob);         // [n,1]
        values[k] = value.value_graph(tape, val_bind, out.rollout.states[k], n); // [n,1]
    }

    // lambda-return recursion on tape vars
    std::vector<Var> returns(H);
    Var next_return = values[H - 1];
    Var next_value = values[H - 1];
    for (int t = H - 1; t >= 0; --t) {
        Var mix = tape.add(tape.mul_scalar(next_value, static_cast<T>(1.0 - lambda)),
                           tape.mul_scalar(next_return, static_cast<T>(lambda)));
        returns[t] = tape.add(rewards[t], tape.mul_scalar(mix, static_cast<T>(gamma)));
        next_return = returns[t];
        next_value = values[t];
    }

    Var total = tape.scalar_const(T(0));
    for (int t = 0; t < H; ++t) total = tape.add(total, tape.sum(returns[t]));
    out.loss = tape.mul_scalar(total, static_cast<T>(-1.0 / (static_cast<double>(n) * H)));

    if (entropy_weight != 0.0) {
        // pre-squash Gaussian entropy bonus, off by default
        Var ent = tape.scalar_const(T(0));
        for (int t = 0; t < H; ++t) {
            auto st = policy.stats_graph(tape, pol_bind, out.rollout.states[t], n);
            ent = tape.add(ent, tape.sum(tape.log_(st.stddev)));
        }
        const double scale = entropy_weight / (static_cast<double>(n) * H);
        out.loss = tape.sub(out.loss, tape.mul_scalar(ent, static_cast<T>(scale)));
    }

    out.return_targets.resize(H);
    for (int t = 0; t < H; ++t) out.return_targets[t] = tape.val(returns[t]);
    return out;
}

// mean squared error between v(z_t) and detached lambda-return targets
template <class T>
inline typename ad::Tape<T>::Var value_loss_graph(ad::Tape<T>& tape, ValueFunction<T>& value,
                                                  nn::Binding<T>& val_bind,
                                                  const std::vector<T>& states_flat, int state_dim,
                                                  const std::vector<T>& targets_flat) {
    const int m = static_cast<int>(states_flat.size()) / state_dim;
    if (static_cast<int>(targets_flat.size()) != m)
        throw std::invalid_argument("value_loss: target count mismatch");
    auto v = value.value_graph(tape, val_bind, tape.constant(states_flat), m);
    auto err = tape.sub(v, tape.constant(targets_flat));
    return tape.mean(tape.square(err));
}

} // namespace semail
