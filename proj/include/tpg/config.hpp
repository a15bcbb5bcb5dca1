#ifndef TPG_CONFIG_HPP
#define TPG_CONFIG_HPP

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include "tpg/core/error.hpp"

namespace tpg {

using json = nlohmann::json;

struct SyntheticConfig {
    int image_size = 64;
    int tile_period = 16;
    std::string motif_family = "mixed";  // dots | stripes | blobs | grid | mixed
    double warp_amplitude = 3.0;
    double blur_sigma_min = 0.4;
    double blur_sigma_max = 1.2;
    int occlusion_min = 0;
    int occlusion_max = 3;
    double shading_amplitude = 0.15;
    int labeled_count = 8;
    int unlabeled_count = 8;
    uint64_t seed = 1;

    void validate() const {
        TPG_REQUIRE(image_size > 0 && tile_period > 0, errc::config, "sizes must be positive");
        TPG_REQUIRE(image_size % tile_period == 0, errc::config,
                    "tile_period must divide image_size");
        TPG_REQUIRE(warp_amplitude >= 0.0 && warp_amplitude < tile_period / 2.0, errc::config,
                    "warp_amplitude must be < tile_period/2");
        TPG_REQUIRE(blur_sigma_min >= 0.0 && blur_sigma_max >= blur_sigma_min, errc::config,
                    "blur sigma range inverted");
        TPG_REQUIRE(occlusion_min >= 0 && occlusion_max >= occlusion_min, errc::config,
                    "occlusion range invalid");
        TPG_REQUIRE(labeled_count >= 0 && unlabeled_count >= 0, errc::config,
                    "counts must be >= 0");
        static const std::set<std::string> fams{"dots", "stripes", "blobs", "grid", "mixed"};
        TPG_REQUIRE(fams.count(motif_family) == 1, errc::config,
                    "unknown motif_family: " + motif_family);
    }
};

struct LdnConfig {
    int d = 64;
    int n_ram = 2;
    int k_sat = 3;
    double alpha = 1.0;
    int d_head = 32;
    int epochs_scm = 2;
    int epochs_ram = 2;
    double lr = 1e-3;
    int batch_size = 8;
    bool sats_enabled = true;

    void validate() const {
        TPG_REQUIRE(d > 0 && n_ram > 0 && k_sat > 0 && d_head > 0, errc::config,
                    "ldn dims must be positive");
        TPG_REQUIRE(alpha >= 0.0, errc::config, "alpha must be >= 0");
        TPG_REQUIRE(epochs_scm >= 0 && epochs_ram >= 0 && batch_size > 0, errc::config,
                    "ldn schedule invalid");
    }
};

struct SldmConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    double p_drop = 0.1;
    double lambda1 = 1e-4;
    double lambda2 = 1e-4;
    double lambda3 = 1e-2;
    double lambda4 = 1e-1;
    int labeled_per_batch = 2;
    int unlabeled_per_batch = 2;
    int align_t_cap = 500;
    double lr = 1e-3;
    int steps = 2000;
    int base_channels = 32;

    void validate() const {
        TPG_REQUIRE(T > 0 && beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
                    errc::config, "noise schedule range invalid");
        TPG_REQUIRE(p_drop >= 0.0 && p_drop <= 1.0, errc::config, "p_drop outside [0,1]");
        TPG_REQUIRE(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0 && lambda4 >= 0.0,
                    errc::config, "lambdas must be nonnegative");
        TPG_REQUIRE(labeled_per_batch >= 0 && unlabeled_per_batch >= 0 &&
                        labeled_per_batch + unlabeled_per_batch > 0,
                    errc::config, "batch composition empty");
        TPG_REQUIRE(align_t_cap >= 1 && align_t_cap <= T, errc::config,
                    "align_t_cap outside [1,T]");
        TPG_REQUIRE(steps >= 0 && base_channels > 0 && base_channels % 8 == 0, errc::config,
                    "sldm steps/base_channels invalid");
    }
};

struct SamplerConfig {
    int steps = 50;
    double guidance = 3.0;

    void validate() const {
        TPG_REQUIRE(steps > 0, errc::config, "sampler steps must be > 0");
        TPG_REQUIRE(guidance >= 0.0, errc::config, "guidance must be >= 0");
    }
};

struct Ablations {
    bool no_ldn = false;
    bool no_content = false;
    bool no_structure = false;
    bool no_defect = false;
    bool no_alignment = false;
    bool no_cls = false;
    bool no_std = false;

    void set(const std::string& name) {
        if (name == "no_ldn") no_ldn = true;
        else if (name == "no_content") no_content = true;
        else if (name == "no_structure") no_structure = true;
        else if (name == "no_defect") no_defect = true;
        else if (name == "no_alignment") no_alignment = true;
        else if (name == "no_cls") no_cls = true;
        else if (name == "no_std") no_std = true;
        else fail(errc::config, "unknown ablation flag: " + name);
    }
};

struct RunConfig {
    SyntheticConfig data;
    LdnConfig ldn;
    SldmConfig sldm;
    SamplerConfig sampler;
    Ablations ablate;
    uint64_t seed = 1;

    void validate() const {
        data.validate();
        ldn.validate();
        sldm.validate();
        sampler.validate();
    }
};

namespace cfgio {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        TPG_REQUIRE(allowed.count(it.key()) == 1, errc::config,
                    "unknown config key " + where + "." + it.key());
}

template <typename T>
void get(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace cfgio

inline json to_json(const SyntheticConfig& c) {
    return json{{"image_size", c.image_size},
                {"tile_period", c.tile_period},
                {"motif_family", c.motif_family},
                {"warp_amplitude", c.warp_amplitude},
                {"blur_sigma_min", c.blur_sigma_min},
                {"blur_sigma_max", c.blur_sigma_max},
                {"occlusion_min", c.occlusion_min},
                {"occlusion_max", c.occlusion_max},
                {"shading_amplitude", c.shading_amplitude},
                {"labeled_count", c.labeled_count},
                {"unlabeled_count", c.unlabeled_count},
                {"seed", c.seed}};
}

inline void from_json_into(const json& j, SyntheticConfig& c) {
    cfgio::check_keys(j,
                      {"image_size", "tile_period", "motif_family", "warp_amplitude",
                       "blur_sigma_min", "blur_sigma_max", "occlusion_min", "occlusion_max",
                       "shading_amplitude", "labeled_count", "unlabeled_count", "seed"},
                      "data");
    cfgio::get(j, "image_size", c.image_size);
    cfgio::get(j, "tile_period", c.tile_period);
    cfgio::get(j, "motif_family", c.motif_family);
    cfgio::get(j, "warp_amplitude", c.warp_amplitude);
    cfgio::get(j, "blur_sigma_min", c.blur_sigma_min);
    cfgio::get(j, "blur_sigma_max", c.blur_sigma_max);
    cfgio::get(j, "occlusion_min", c.occlusion_min);
    cfgio::get(j, "occlusion_max", c.occlusion_max);
    cfgio::get(j, "shading_amplitude", c.shading_amplitude);
    cfgio::get(j, "labeled_count", c.labeled_count);
    cfgio::get(j, "unlabeled_count", c.unlabeled_count);
    cfgio::get(j, "seed", c.seed);
}

inline json to_json(const LdnConfig& c) {
    return json{{"d", c.d},
                {"n_ram", c.n_ram},
                {"k_sat", c.k_sat},
                {"alpha", c.alpha},
                {"d_head", c.d_head},
                {"epochs_scm", c.epochs_scm},
                {"epochs_ram", c.epochs_ram},
                {"lr", c.lr},
                {"batch_size", c.batch_size},
                {"sats_enabled", c.sats_enabled}};
}

inline void from_json_into(const json& j, LdnConfig& c) {
    cfgio::check_keys(j,
                      {"d", "n_ram", "k_sat", "alpha", "d_head", "epochs_scm", "epochs_ram", "lr",
                       "batch_size", "sats_enabled"},
                      "ldn");
    cfgio::get(j, "d", c.d);
    cfgio::get(j, "n_ram", c.n_ram);
    cfgio::get(j, "k_sat", c.k_sat);
    cfgio::get(j, "alpha", c.alpha);
    cfgio::get(j, "d_head", c.d_head);
    cfgio::get(j, "epochs_scm", c.epochs_scm);
    cfgio::get(j, "epochs_ram", c.epochs_ram);
    cfgio::get(j, "lr", c.lr);
    cfgio::get(j, "batch_size", c.batch_size);
    cfgio::get(j, "sats_enabled", c.sats_enabled);
}

inline json to_json(const SldmConfig& c) {
    return json{{"T", c.T},
                {"beta_start", c.beta_start},
                {"beta_end", c.beta_end},
                {"p_drop", c.p_drop},
                {"lambda1", c.lambda1},
                {"lambda2", c.lambda2},
                {"lambda3", c.lambda3},
                {"lambda4", c.lambda4},
                {"labeled_per_batch", c.labeled_per_batch},
                {"unlabeled_per_batch", c.unlabeled_per_batch},
                {"align_t_cap", c.align_t_cap},
                {"lr", c.lr},
                {"steps", c.steps},
                {"base_channels", c.base_channels}};
}

inline void from_json_into(const json& j, SldmConfig& c) {
    cfgio::check_keys(j,
                      {"T", "beta_start", "beta_end", "p_drop", "lambda1", "lambda2", "lambda3",
                       "lambda4", "labeled_per_batch", "unlabeled_per_batch", "align_t_cap", "lr",
                       "steps", "base_channels"},
                      "sldm");
    cfgio::get(j, "T", c.T);
    cfgio::get(j, "beta_start", c.beta_start);
    cfgio::get(j, "beta_end", c.beta_end);
    cfgio::get(j, "p_drop", c.p_drop);
    cfgio::get(j, "lambda1", c.lambda1);
    cfgio::get(j, "lambda2", c.lambda2);
    cfgio::get(j, "lambda3", c.lambda3);
    cfgio::get(j, "lambda4", c.lambda4);
    cfgio::get(j, "labeled_per_batch", c.labeled_per_batch);
    cfgio::get(j, "unlabeled_per_batch", c.unlabeled_per_batch);
    cfgio::get(j, "align_t_cap", c.align_t_cap);
    cfgio::get(j, "lr", c.lr);
    cfgio::get(j, "steps", c.steps);
    cfgio::get(j, "base_channels", c.base_channels);
}

inline json to_json(const SamplerConfig& c) {
    return json{{"steps", c.steps}, {"guidance", c.guidance}};
}

inline void from_json_into(const json& j, SamplerConfig& c) {
    cfgio::check_keys(j, {"steps", "guidance"}, "sampler");
    cfgio::get(j, "steps", c.steps);
    cfgio::get(j, "guidance", c.guidance);
}

inline json to_json(const Ablations& a) {
    return json{{"no_ldn", a.no_ldn},         {"no_content", a.no_content},
                {"no_structure", a.no_structure}, {"no_defect", a.no_defect},
                {"no_alignment", a.no_alignment}, {"no_cls", a.no_cls},
                {"no_std", a.no_std}};
}

inline void from_json_into(const json& j, Ablations& a) {
    cfgio::check_keys(j,
                      {"no_ldn", "no_content", "no_structure", "no_defect", "no_alignment",
                       "no_cls", "no_std"},
                      "ablate");
    cfgio::get(j, "no_ldn", a.no_ldn);
    cfgio::get(j, "no_content", a.no_content);
    cfgio::get(j, "no_structure", a.no_structure);
    cfgio::get(j, "no_defect", a.no_defect);
    cfgio::get(j, "no_alignment", a.no_alignment);
    cfgio::get(j, "no_cls", a.no_cls);
    cfgio::get(j, "no_std", a.no_std);
}

inline json to_json(const RunConfig& c) {
    return json{{"data", to_json(c.data)},       {"ldn", to_json(c.ldn)},
                {"sldm", to_json(c.sldm)},       {"sampler", to_json(c.sampler)},
                {"ablate", to_json(c.ablate)},   {"seed", c.seed}};
}

inline void from_json_into(const json& j, RunConfig& c) {
    cfgio::check_keys(j, {"data", "ldn", "sldm", "sampler", "ablate", "seed"}, "root");
    if (j.contains("data")) from_json_into(j.at("data"), c.data);
    if (j.contains("ldn")) from_json_into(j.at("ldn"), c.ldn);
    if (j.contains("sldm")) from_json_into(j.at("sldm"), c.sldm);
    if (j.contains("sampler")) from_json_into(j.at("sampler"), c.sampler);
    if (j.contains("ablate")) from_json_into(j.at("ablate"), c.ablate);
    cfgio::get(j, "seed", c.seed);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    TPG_REQUIRE(in.good(), errc::io, "cannot read config: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        fail(errc::config, std::string("config parse: ") + e.what());
    }
    RunConfig c;
    from_json_into(j, c);
    c.validate();
    return c;
}

// stable fingerprint used to pair checkpoints with the config that made them
// training-duration knobs are excluded so a checkpoint stays resumable when a
// run is extended; everything that shapes the model or data keeps its hash bite
inline uint64_t config_hash(const RunConfig& c) {
    nlohmann::json j = to_json(c);
    j["ldn"].erase("epochs_scm");
    j["ldn"].erase("epochs_ram");
    j["sldm"].erase("steps");
    std::string s = j.dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace tpg

#endif
