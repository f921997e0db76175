#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "semail/config.hpp"
#include "semail/nn.hpp"

namespace semail {

// Versioned container mapping "bundle/param" names to shape-prefixed float32
// arrays, with the config echoed as text and the training counters.
struct Checkpoint {
    static constexpr const char* kMagic = "SMCKPT1";

    std::string config_text;
    std::uint64_t episodes_collected = 0;
    std::uint64_t global_step = 0;
    std::map<std::string, std::pair<std::vector<std::uint32_t>, std::vector<float>>> arrays;

    template <class T>
    void put_bundle(const nn::Bundle<T>& bundle) {
        for (const auto& p : bundle.params) {
            std::vector<float> data(p.value.size());
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(p.value[i]);
            arrays[bundle.name + "/" + p.name] = {
                {static_cast<std::uint32_t>(p.rows), static_cast<std::uint32_t>(p.cols)},
                std::move(data)};
        }
    }

    template <class T>
    void load_bundle(nn::Bundle<T>& bundle) const {
        for (auto& p : bundle.params) {
            const auto it = arrays.find(bundle.name + "/" + p.name);
            if (it == arrays.end())
                throw std::runtime_error("checkpoint missing array " + bundle.name + "/" + p.name);
            const auto& [dims, data] = it->second;
            if (data.size() != p.value.size())
                throw std::runtime_error("checkpoint shape mismatch for " + bundle.name + "/" +
                                         p.name);
            for (std::size_t i = 0; i < data.size(); ++i) p.value[i] = static_cast<T>(data[i]);
        }
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
        out.write(kMagic, 7);
        auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
        auto w64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
        w64(episodes_collected);
        w64(global_step);
        w32(static_cast<std::uint32_t>(config_text.size()));
        out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
        w32(static_cast<std::uint32_t>(arrays.size()));
        for (const auto& [name, entry] : arrays) {
            w32(static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            w32(static_cast<std::uint32_t>(entry.first.size()));
            for (const std::uint32_t d : entry.first) w32(d);
            out.write(reinterpret_cast<const char*>(entry.second.data()),
                      static_cast<std::streamsize>(entry.second.size() * 4));
        }
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
        char magic[8] = {0};
        in.read(magic, 7);
        if (std::string(magic, 7) != kMagic) throw std::runtime_error("bad checkpoint magic");
        Checkpoint ck;
        auto r32 = [&] {
            std::uint32_t v = 0;
            in.read(reinterpret_cast<char*>(&v), 4);
            return v;
        };
        auto r64 = [&] {
            std::uint64_t v = 0;
            in.read(reinterpret_cast<char*>(&v), 8);
            return v;
        };
        ck.episodes_collected = r64();
        ck.global_step = r64();
        const std::uint32_t clen = r32();
        ck.config_text.resize(clen);
        in.read(ck.config_text.data(), clen);
        const std::uint32_t n = r32();
        for (std::uint32_t i = 0; i < n; ++i) {
            const std::uint32_t nlen = r32();
            std::string name(nlen, '\0');
            in.read(name.data(), nlen);
            const std::uint32_t nd = r32();
            std::vector<std::uint32_t> dims(nd);
            std::size_t count = 1;
            for (auto& d : dims) {
                d = r32();
                count *= d;
            }
            std::vector<float> data(count);
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 4));
            if (!in) throw std::runtime_error("truncated checkpoint: " + path);
            ck.arrays[name] = {std::move(dims), std::move(data)};
        }
        return ck;
    }

    ExperimentConfig parse_config() const {
        ExperimentConfig cfg;
        std::istringstream in(config_text);
        std::string line;
        while (std::getline(in, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        cfg.validate();
        return cfg;
    }
};

} // namespace semail
