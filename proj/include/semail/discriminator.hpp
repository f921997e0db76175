#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "semail/nn.hpp"
#include "semail/rng.hpp"
#include "semail/tape.hpp"

namespace semail {

// Latent-space discriminator over concatenated (task stoch, task deter,
// action). Two ELU hidden layers, sigmoid output; the final layer is
// zero-initialized so the untrained output is exactly 0.5.
//
// The gradient penalty needs d(penalty)/d(theta) where the penalty itself
// contains the input gradient of the network. Rather than double backprop,
// grad_input_graph expresses that input gradient with primal tape ops
// (chain rule written out), so one reverse pass yields parameter gradients.
template <class T>
class Discriminator {
public:
    using Tape = ad::Tape<T>;
    using Var = typename Tape::Var;

    static constexpr T kProbClamp = T(1e-6);
    static constexpr T kNormEps = T(1e-12);

    Discriminator(int input_dim, int hidden, RandomSource& rng) : in_(input_dim), hid_(hidden) {
        bundle_.name = "discriminator";
        l1_.build(bundle_, "l1", in_, hid_, rng);
        l2_.build(bundle_, "l2", hid_, hid_, rng);
        l3_.build(bundle_, "l3", hid_, 1, rng, /*zero_init=*/true);
    }

    int input_dim() const { return in_; }
    nn::Bundle<T>& bundle() { return bundle_; }

    // probability in (0,1) that the pair is expert, [m,1]
    Var classify_graph(Tape& tape, nn::Binding<T>& bind, Var x, int m) const {
        Var h1 = tape.elu(l1_.apply(tape, bind, x, m));
        Var h2 = tape.elu(l2_.apply(tape, bind, h1, m));
        return tape.sigmoid(l3_.apply(tape, bind, h2, m));
    }

    Var clamped_log_graph(Tape& tape, Var prob) const {
        return tape.log_(tape.clamp(prob, kProbClamp, T(1) - kProbClamp));
    }

    // d(classify)/d(input) at x, [m, in], written with primal ops
    Var grad_input_graph(Tape& tape, nn::Binding<T>& bind, Var x, int m) const {
        Var p1 = l1_.apply(tape, bind, x, m);
        Var h1 = tape.elu(p1);
        Var p2 = l2_.apply(tape, bind, h1, m);
        Var h2 = tape.elu(p2);
        Var logit = l3_.apply(tape, bind, h2, m);
        Var sd = tape.sigmoid_deriv(logit);                              // [m,1]
        Var gh2 = tape.matmul(sd, bind(*l3_.w), m, 1, hid_, false, true); // [m,hid]
        Var gp2 = tape.mul(tape.elu_deriv(p2), gh2);
        Var gh1 = tape.matmul(gp2, bind(*l2_.w), m, hid_, hid_, false, true);
        Var gp1 = tape.mul(tape.elu_deriv(p1), gh1);
        return tape.matmul(gp1, bind(*l1_.w), m, hid_, in_, false, true); // [m,in]
    }

    // mean over pairs of (||grad_x D(x_interp)||_2 - 1)^2 at random
    // interpolates between expert and agent pairs
    Var gradient_penalty_graph(Tape& tape, nn::Binding<T>& bind,
                               const std::vector<T>& expert_rows,
                               const std::vector<T>& agent_rows, int pairs, RandomSource& rng) const {
        std::vector<T> interp(static_cast<std::size_t>(pairs) * in_);
        for (int i = 0; i < pairs; ++i) {
            const T u = static_cast<T>(rng.uniform());
            const T* e = expert_rows.data() + static_cast<std::size_t>(i) * in_;
            const T* a = agent_rows.data() + static_cast<std::size_t>(i) * in_;
            T* o = interp.data() + static_cast<std::size_t>(i) * in_;
            for (int j = 0; j < in_; ++j) o[j] = u * e[j] + (T(1) - u) * a[j];
        }
        Var x = tape.constant(std::move(interp));
        Var g = grad_input_graph(tape, bind, x, pairs);
        Var norm = tape.sqrt_(tape.add_scalar(tape.rowsum(tape.square(g), pairs, in_), kNormEps));
        return tape.mean(tape.square(tape.add_scalar(norm, T(-1))));
    }

    struct LossVars {
        Var total;
        Var bce;
        Var penalty;
        Var mean_agent_prob;
    };

    // E_expert[-log D] + E_agent[-log(1-D)] + gp_weight * penalty
    LossVars loss_graph(Tape& tape, nn::Binding<T>& bind, const std::vector<T>& expert_rows,
                        const std::vector<T>& agent_rows, double gp_weight,
                        RandomSource& rng) const {
        const int ne = static_cast<int>(expert_rows.size()) / in_;
        const int na = static_cast<int>(agent_rows.size()) / in_;
        if (ne == 0 || na == 0)
            throw std::invalid_argument("discriminator loss needs nonempty expert and agent sets");
        Var xe = tape.constant(expert_rows);
        Var xa = tape.constant(agent_rows);
        Var pe = classify_graph(tape, bind, xe, ne);
        Var pa = classify_graph(tape, bind, xa, na);
        Var le = tape.mul_scalar(tape.mean(clamped_log_graph(tape, pe)), T(-1));
        Var one_minus_pa = tape.add_scalar(tape.mul_scalar(pa, T(-1)), T(1));
        Var la = tape.mul_scalar(tape.mean(clamped_log_graph(tape, one_minus_pa)), T(-1));
        LossVars out;
        out.bce = tape.add(le, la);
        out.mean_agent_prob = tape.mean(pa);
        out.total = out.bce;
        if (gp_weight != 0.0) {
            // pair up by cycling the smaller set
            const int pairs = std::max(ne, na);
            std::vector<T> er(static_cast<std::size_t>(pairs) * in_);
            std::vector<T> ar(static_cast<std::size_t>(pairs) * in_);
            for (int i = 0; i < pairs; ++i) {
                std::copy_n(expert_rows.data() + static_cast<std::size_t>(i % ne) * in_, in_,
                            er.data() + static_cast<std::size_t>(i) * in_);
                std::copy_n(agent_rows.data() + static_cast<std::size_t>(i % na) * in_, in_,
                            ar.data() + static_cast<std::size_t>(i) * in_);
            }
            out.penalty = gradient_penalty_graph(tape, bind, er, ar, pairs, rng);
            out.total = tape.add(out.total, tape.mul_scalar(out.penalty, static_cast<T>(gp_weight)));
        }
        return out;
    }

    // ---- numeric wrappers ----

    T classify(const std::vector<T>& z_plus_and_action) const {
        if (static_cast<int>(z_plus_and_action.size()) != in_)
            throw std::invalid_argument("discriminator input dimension mismatch");
        return classify_batch(z_plus_and_action)[0];
    }

    std::vector<T> classify_batch(const std::vector<T>& rows) const {
        const int m = static_cast<int>(rows.size()) / in_;
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var x = tape.constant(rows);
        return tape.val(classify_graph(tape, bind, x, m));
    }

    // log of the clamped classify output; always <= ~0
    T pseudo_reward(const std::vector<T>& z_plus_and_action) const {
        const T p = classify(z_plus_and_action);
        const T c = std::min(std::max(p, kProbClamp), T(1) - kProbClamp);
        return std::log(c);
    }

private:
    int in_, hid_;
    nn::Bundle<T> bundle_;
    nn::DenseLayer<T> l1_, l2_, l3_;
};

} // namespace semail
