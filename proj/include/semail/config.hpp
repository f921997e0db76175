#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semail {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every hyperparameter of the training pipeline plus the environment knobs.
// Serialized as flat key=value text, keys matching the field names exactly.
struct ExperimentConfig {
    // learning
    double discount = 0.99;
    int action_repeat = 2;
    int imagination_horizon = 15;
    double bor_weight = 1.5;
    double model_lr = 6e-5;
    double ac_disc_lr = 8e-5;
    double grad_clip_norm = 100.0;
    double gp_weight = 1.0;
    double exploration_noise_std = 0.3;
    int seed_episodes = 5;
    int train_iters_per_episode = 100;
    int num_expert_demos = 10;
    int deter_size = 200;
    int stoch_size = 30;
    int dense_units = 300;
    int batch = 64;
    int seq_len = 50;
    double free_nats = 3.0;
    double return_lambda = 0.95;
    double kl_beta = 1.0;
    double entropy_weight = 0.0;
    // ablations
    bool no_act = false;
    bool no_bor = false;
    bool joint_model = false; // single-model baseline: background branch disabled
    // environment
    int image_size = 32;
    std::uint64_t env_seed = 0;
    int max_steps = 100; // env steps before action repeat
    double step_size = 0.1;
    double background_velocity = 0.35;
    double stripe_cycles_a = 2.0;
    double stripe_cycles_b = 4.0;
    std::string background_pattern = "A";
    double expert_gain = 0.5;
    // run control
    std::uint64_t seed = 0;
    int episodes = 200;
    int eval_every = 10;
    int eval_episodes = 10;
    int buffer_capacity = 1000;
    double early_stop_score = 0.9; // normalized eval score; <=0 disables
    // implementation knobs
    int conv_depth = 4;
    int disc_expert_batch = 16;
    int imagine_starts = 128; // cap on imagination start states, 0 = all
    int threads = 0;          // 0 = auto

    struct Field {
        enum class Type { Int, Real, Bool, U64, Str };
        const char* name;
        Type type;
        void* ptr;
    };

    std::vector<Field> fields() {
        using T = Field::Type;
        return {
            {"discount", T::Real, &discount},
            {"action_repeat", T::Int, &action_repeat},
            {"imagination_horizon", T::Int, &imagination_horizon},
            {"bor_weight", T::Real, &bor_weight},
            {"model_lr", T::Real, &model_lr},
            {"ac_disc_lr", T::Real, &ac_disc_lr},
            {"grad_clip_norm", T::Real, &grad_clip_norm},
            {"gp_weight", T::Real, &gp_weight},
            {"exploration_noise_std", T::Real, &exploration_noise_std},
            {"seed_episodes", T::Int, &seed_episodes},
            {"train_iters_per_episode", T::Int, &train_iters_per_episode},
            {"num_expert_demos", T::Int, &num_expert_demos},
            {"deter_size", T::Int, &deter_size},
            {"stoch_size", T::Int, &stoch_size},
            {"dense_units", T::Int, &dense_units},
            {"batch", T::Int, &batch},
            {"seq_len", T::Int, &seq_len},
            {"free_nats", T::Real, &free_nats},
            {"return_lambda", T::Real, &return_lambda},
            {"kl_beta", T::Real, &kl_beta},
            {"entropy_weight", T::Real, &entropy_weight},
            {"no_act", T::Bool, &no_act},
            {"no_bor", T::Bool, &no_bor},
            {"joint_model", T::Bool, &joint_model},
            {"image_size", T::Int, &image_size},
            {"env_seed", T::U64, &env_seed},
            {"max_steps", T::Int, &max_steps},
            {"step_size", T::Real, &step_size},
            {"background_velocity", T::Real, &background_velocity},
            {"stripe_cycles_a", T::Real, &stripe_cycles_a},
            {"stripe_cycles_b", T::Real, &stripe_cycles_b},
            {"background_pattern", T::Str, &background_pattern},
            {"expert_gain", T::Real, &expert_gain},
            {"seed", T::U64, &seed},
            {"episodes", T::Int, &episodes},
            {"eval_every", T::Int, &eval_every},
            {"eval_episodes", T::Int, &eval_episodes},
            {"buffer_capacity", T::Int, &buffer_capacity},
            {"early_stop_score", T::Real, &early_stop_score},
            {"conv_depth", T::Int, &conv_depth},
            {"disc_expert_batch", T::Int, &disc_expert_batch},
            {"imagine_starts", T::Int, &imagine_starts},
            {"threads", T::Int, &threads},
        };
    }

    void set(const std::string& key, const std::string& value) {
        for (auto& f : fields()) {
            if (key != f.name) continue;
            try {
                switch (f.type) {
                    case Field::Type::Int: *static_cast<int*>(f.ptr) = std::stoi(value); break;
                    case Field::Type::Real: *static_cast<double*>(f.ptr) = std::stod(value); break;
                    case Field::Type::U64:
                        *static_cast<std::uint64_t*>(f.ptr) = std::stoull(value);
                        break;
                    case Field::Type::Bool: {
                        if (value == "true" || value == "1") *static_cast<bool*>(f.ptr) = true;
                        else if (value == "false" || value == "0") *static_cast<bool*>(f.ptr) = false;
                        else throw ConfigError("invalid boolean for " + key + ": " + value);
                        break;
                    }
                    case Field::Type::Str: *static_cast<std::string*>(f.ptr) = value; break;
                }
            } catch (const std::invalid_argument&) {
                throw ConfigError("invalid value for " + key + ": " + value);
            } catch (const std::out_of_range&) {
                throw ConfigError("value out of range for " + key + ": " + value);
            }
            return;
        }
        throw ConfigError("unknown config key: " + key);
    }

    std::string get(const std::string& key) {
        for (auto& f : fields()) {
            if (key != f.name) continue;
            std::ostringstream os;
            os.precision(17);
            switch (f.type) {
                case Field::Type::Int: os << *static_cast<int*>(f.ptr); break;
                case Field::Type::Real: os << *static_cast<double*>(f.ptr); break;
                case Field::Type::U64: os << *static_cast<std::uint64_t*>(f.ptr); break;
                case Field::Type::Bool: os << (*static_cast<bool*>(f.ptr) ? "true" : "false"); break;
                case Field::Type::Str: os << *static_cast<std::string*>(f.ptr); break;
            }
            return os.str();
        }
        throw ConfigError("unknown config key: " + key);
    }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError("config validation: " + msg); };
        if (!(discount >= 0.0 && discount < 1.0)) fail("discount must be in [0,1)");
        if (imagination_horizon < 2) fail("imagination_horizon must be >= 2");
        if (model_lr <= 0.0 || ac_disc_lr <= 0.0) fail("learning rates must be > 0");
        if (bor_weight < 0.0) fail("bor_weight must be >= 0");
        if (batch < 1 || seq_len < 1) fail("batch and seq_len must be >= 1");
        if (deter_size < 1 || stoch_size < 1 || dense_units < 1) fail("network sizes must be >= 1");
        if (image_size < 8 || (image_size & (image_size - 1)) != 0)
            fail("image_size must be a power of two >= 8");
        if (action_repeat < 1) fail("action_repeat must be >= 1");
        if (max_steps < action_repeat) fail("max_steps must cover one action repeat");
        if (max_steps % action_repeat != 0) fail("max_steps must be divisible by action_repeat");
        if (background_pattern != "A" && background_pattern != "B")
            fail("background_pattern must be A or B");
        if (exploration_noise_std < 0.0) fail("exploration_noise_std must be >= 0");
        if (free_nats < 0.0) fail("free_nats must be >= 0");
        if (return_lambda < 0.0 || return_lambda > 1.0) fail("return_lambda must be in [0,1]");
        if (gp_weight < 0.0) fail("gp_weight must be >= 0");
        if (buffer_capacity < 1) fail("buffer_capacity must be >= 1");
        if (num_expert_demos < 1) fail("num_expert_demos must be >= 1");
        if (conv_depth < 1) fail("conv_depth must be >= 1");
        if (seq_len > max_steps / action_repeat)
            fail("seq_len exceeds episode length (max_steps / action_repeat)");
    }

    void save(const std::string& path) {
        std::ofstream out(path);
        if (!out) throw ConfigError("cannot write config file: " + path);
        for (auto& f : fields()) out << f.name << " = " << get(f.name) << "\n";
    }
};

// Missing keys keep their defaults; every present key is validated.
inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r\n");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r\n");
            return s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

} // namespace semail
