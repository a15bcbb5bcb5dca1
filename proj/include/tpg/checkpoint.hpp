#ifndef TPG_CHECKPOINT_HPP
#define TPG_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpg/core/error.hpp"
#include "tpg/core/nn.hpp"
#include "tpg/core/tensor.hpp"

namespace tpg {

// Parameter values plus optimizer moments in one binary blob, with a JSON
// sidecar (<path>.json) carrying stage identity, step counter, and the config
// hash so stage or config mismatches are caught before weights are touched.

inline constexpr char kCkptMagic[8] = {'T', 'P', 'G', 'C', 'K', 'P', 'T', '1'};

struct CheckpointMeta {
    std::string stage;  // "ldn" or "sldm"
    int64_t step = 0;
    uint64_t config_hash = 0;
    nlohmann::json extra = nlohmann::json::object();
};

namespace ckpt_detail {

template <typename T>
void put(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    TPG_REQUIRE(f.good(), errc::data, "checkpoint truncated");
    return v;
}

inline void put_string(std::ofstream& f, const std::string& s) {
    put(f, uint32_t(s.size()));
    f.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_string(std::ifstream& f) {
    uint32_t n = get<uint32_t>(f);
    TPG_REQUIRE(n < (1u << 20), errc::data, "checkpoint string too long");
    std::string s(n, '\0');
    f.read(s.data(), std::streamsize(n));
    TPG_REQUIRE(f.good(), errc::data, "checkpoint truncated");
    return s;
}

inline void put_tensor_data(std::ofstream& f, const Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.v.data()),
            std::streamsize(t.v.size() * sizeof(double)));
}

inline void get_tensor_data(std::ifstream& f, Tensor& t) {
    f.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(t.v.size() * sizeof(double)));
    TPG_REQUIRE(f.good(), errc::data, "checkpoint truncated");
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const ParamSet& ps, const Adam* opt,
                            const CheckpointMeta& meta) {
    using namespace ckpt_detail;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    TPG_REQUIRE(f.good(), errc::io, "cannot write checkpoint: " + path);
    f.write(kCkptMagic, 8);
    put(f, uint64_t(ps.items.size()));
    for (const auto* p : ps.items) {
        put_string(f, p->name);
        put(f, uint32_t(p->value.ndim()));
        for (int d = 0; d < p->value.ndim(); ++d) put(f, int32_t(p->value.dim(d)));
        put_tensor_data(f, p->value);
    }
    if (opt) {
        put(f, uint8_t(1));
        put(f, int64_t(opt->t));
        put(f, uint64_t(opt->params.size()));
        for (size_t i = 0; i < opt->params.size(); ++i) {
            TPG_REQUIRE(ps.find(opt->params[i]->name) == opt->params[i], errc::state,
                        "optimizer tracks a parameter outside the saved set: " +
                            opt->params[i]->name);
            put_string(f, opt->params[i]->name);
            put_tensor_data(f, opt->m[i]);
            put_tensor_data(f, opt->v[i]);
        }
    } else {
        put(f, uint8_t(0));
    }
    f.close();
    TPG_REQUIRE(f.good(), errc::io, "checkpoint write failed: " + path);

    nlohmann::json side = meta.extra;
    side["stage"] = meta.stage;
    side["step"] = meta.step;
    side["config_hash"] = meta.config_hash;
    std::ofstream jf(path + ".json", std::ios::trunc);
    TPG_REQUIRE(jf.good(), errc::io, "cannot write checkpoint sidecar: " + path + ".json");
    jf << side.dump(2) << "\n";
}

inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream jf(path + ".json");
    TPG_REQUIRE(jf.good(), errc::io, "missing checkpoint sidecar: " + path + ".json");
    nlohmann::json side;
    try {
        jf >> side;
    } catch (const std::exception& e) {
        fail(errc::data, std::string("checkpoint sidecar parse: ") + e.what());
    }
    CheckpointMeta meta;
    meta.stage = side.at("stage").get<std::string>();
    meta.step = side.at("step").get<int64_t>();
    meta.config_hash = side.at("config_hash").get<uint64_t>();
    meta.extra = side;
    return meta;
}

// fills an existing parameter set (matched by name) and optionally the
// optimizer moments; the stored and live sets must agree exactly
inline CheckpointMeta load_checkpoint(const std::string& path, ParamSet& ps, Adam* opt) {
    using namespace ckpt_detail;
    CheckpointMeta meta = read_checkpoint_meta(path);

    std::ifstream f(path, std::ios::binary);
    TPG_REQUIRE(f.good(), errc::io, "cannot read checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    TPG_REQUIRE(f.good() && std::memcmp(magic, kCkptMagic, 8) == 0, errc::data,
                "not a checkpoint file: " + path);
    uint64_t n = get<uint64_t>(f);
    TPG_REQUIRE(n == ps.items.size(), errc::data,
                "checkpoint holds " + std::to_string(n) + " parameters, expected " +
                    std::to_string(ps.items.size()));
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = get_string(f);
        Parameter* p = ps.find(name);
        TPG_REQUIRE(p != nullptr, errc::data, "checkpoint parameter unknown: " + name);
        uint32_t nd = get<uint32_t>(f);
        TPG_REQUIRE(int(nd) == p->value.ndim(), errc::data, "rank mismatch for " + name);
        for (uint32_t d = 0; d < nd; ++d) {
            int32_t dim = get<int32_t>(f);
            TPG_REQUIRE(dim == p->value.dim(int(d)), errc::data, "shape mismatch for " + name);
        }
        get_tensor_data(f, p->value);
    }
    uint8_t has_opt = get<uint8_t>(f);
    if (opt) {
        TPG_REQUIRE(has_opt == 1, errc::data, "checkpoint lacks optimizer state: " + path);
        opt->t = get<int64_t>(f);
        uint64_t n_opt = get<uint64_t>(f);
        TPG_REQUIRE(n_opt == opt->params.size(), errc::state,
                    "checkpoint optimizer tracks " + std::to_string(n_opt) +
                        " parameters, expected " + std::to_string(opt->params.size()));
        for (uint64_t i = 0; i < n_opt; ++i) {
            std::string name = get_string(f);
            size_t k = 0;
            while (k < opt->params.size() && opt->params[k]->name != name) ++k;
            TPG_REQUIRE(k < opt->params.size(), errc::state,
                        "optimizer does not track " + name);
            get_tensor_data(f, opt->m[k]);
            get_tensor_data(f, opt->v[k]);
        }
    }
    return meta;
}

}  // namespace tpg

#endif
