#ifndef TPG_PIPELINE_HPP
#define TPG_PIPELINE_HPP

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpg/alignment.hpp"
#include "tpg/checkpoint.hpp"
#include "tpg/codec.hpp"
#include "tpg/config.hpp"
#include "tpg/ldn.hpp"
#include "tpg/metrics.hpp"
#include "tpg/sldm.hpp"
#include "tpg/synth.hpp"

namespace tpg {

// ---- run directory layout ----------------------------------------------------------

struct RunPaths {
    std::string out_dir;

    std::string dataset_dir() const { return join("dataset"); }
    std::string manifest() const { return dataset_dir() + "/manifest.jsonl"; }
    std::string ldn_ckpt() const { return join("ldn.ckpt"); }
    std::string sldm_ckpt() const { return join("sldm.ckpt"); }
    std::string log_dir() const { return join("logs"); }
    std::string ldn_log() const { return log_dir() + "/ldn_steps.jsonl"; }
    std::string sldm_log() const { return log_dir() + "/sldm_steps.jsonl"; }
    std::string report_dir() const { return join("reports"); }

    std::string join(const std::string& rel) const {
        return (std::filesystem::path(out_dir) / rel).string();
    }
};

struct JsonlLogger {
    std::ofstream f;

    JsonlLogger(const std::string& path, bool append) {
        std::filesystem::create_directories(std::filesystem::path(path).parent_path());
        f.open(path, append ? std::ios::app : std::ios::trunc);
        TPG_REQUIRE(f.good(), errc::io, "cannot open log: " + path);
    }

    void write(const nlohmann::json& j) {
        f << j.dump() << "\n";
        f.flush();
    }
};

inline double wall_seconds() {
    using clock = std::chrono::steady_clock;
    static const clock::time_point start = clock::now();
    return std::chrono::duration<double>(clock::now() - start).count();
}

// ---- conditioning assembly -----------------------------------------------------------

// positive-direction bundle; the defect slot stays empty outside training
inline ConditioningBundle positive_bundle(const LdnFeatures& f, const Ablations& ab) {
    ConditioningBundle b;
    if (!ab.no_ldn && !ab.no_content) b.content_tokens = f.content_tokens;
    if (!ab.no_ldn && !ab.no_structure) b.structure_tokens = tokens_from_chw(f.structured);
    b.global_vec = f.content_pooled;
    return b;
}

// negative-direction bundle: defect tokens in, content and structure out
inline ConditioningBundle negative_bundle(const LdnFeatures& f, const Ablations& ab) {
    ConditioningBundle b;
    if (!ab.no_ldn && !ab.no_defect) b.defect_tokens = tokens_from_chw(f.defect);
    b.global_vec = f.content_pooled;
    return b;
}

// training bundle: positive slots plus populated defect slot, then independent
// dropout of content/structure/global
inline ConditioningBundle train_bundle(const LdnFeatures& f, const Ablations& ab, double p_drop,
                                       Rng& rng) {
    ConditioningBundle b = positive_bundle(f, ab);
    if (!ab.no_ldn && !ab.no_defect) b.defect_tokens = tokens_from_chw(f.defect);
    bool drop_content = rng.bernoulli(p_drop);
    bool drop_structure = rng.bernoulli(p_drop);
    bool drop_global = rng.bernoulli(p_drop);
    if (drop_content) b.content_tokens = Tensor{};
    if (drop_structure) b.structure_tokens = Tensor{};
    if (drop_global) b.global_vec = Tensor{};
    return b;
}

// ---- stage-I training ------------------------------------------------------------------

namespace pipeline_detail {

inline std::vector<int> shuffled_indices(int n, uint64_t seed, const char* tag, uint64_t epoch) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
    Rng rng = rng_stream(seed, tag, epoch);
    for (int i = n - 1; i > 0; --i) {
        int j = int(rng.uniform_int(uint64_t(i + 1)));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    return idx;
}

inline uint64_t derived_seed(uint64_t seed, const char* tag, uint64_t a, uint64_t b) {
    return rng_stream(seed, tag, a, b).next_u64();
}

// feature distances without the trained-flag gate, for in-training probes
struct ProbeDistances {
    double structured = 0.0;  // mean structured clothing feature vs mean pattern defect feature
    double clothing = 0.0;    // mean clothing defect feature vs mean pattern defect feature
};

inline ProbeDistances probe_distances(const LdnModel& model,
                                      const std::vector<std::pair<Tensor, Tensor>>& pairs) {
    std::vector<Tensor> fa_c, ft_p, ft_c;
    for (const auto& [zc, zp] : pairs) {
        Graph g(false);
        Var vzc = g.input(zc);
        Var tok_c = model.scm.tokens_var(g, vzc, true);
        Var ftc = model.ram.forward(g, tok_c, vzc, true);
        Var fac = model.cfg.sats_enabled ? model.sats.forward(g, ftc, true) : ftc;
        Var vzp = g.input(zp);
        Var tok_p = model.scm.tokens_var(g, vzp, true);
        Var ftp = model.ram.forward(g, tok_p, vzp, true);
        fa_c.push_back(fac.val());
        ft_c.push_back(ftc.val());
        ft_p.push_back(ftp.val());
    }
    ProbeDistances d;
    d.structured = mean_feature_distance(fa_c, ft_p);
    d.clothing = mean_feature_distance(ft_c, ft_p);
    return d;
}

}  // namespace pipeline_detail

struct LdnCheckpointInfo {
    int phase = 1;       // 1 = content stage, 2 = attention/filter stage
    int epoch_next = 0;  // global epoch to run next
    int64_t step = 0;
};

inline CheckpointMeta make_ldn_meta(const RunConfig& cfg, const LdnCheckpointInfo& info) {
    CheckpointMeta meta;
    meta.stage = "ldn";
    meta.step = info.step;
    meta.config_hash = config_hash(cfg);
    meta.extra = {{"d", cfg.ldn.d},
                  {"n_ram", cfg.ldn.n_ram},
                  {"k_sat", cfg.ldn.k_sat},
                  {"alpha", cfg.ldn.alpha},
                  {"seed", cfg.seed},
                  {"sats_enabled", cfg.ldn.sats_enabled},
                  {"phase", info.phase},
                  {"epoch_next", info.epoch_next}};
    return meta;
}

// two-phase stage-I loop: the content module trains alone first, then freezes
// while the attention stack and filter units train on the triplet objective
inline void train_ldn(const RunConfig& cfg, const RunPaths& paths, bool resume) {
    cfg.validate();
    TPG_REQUIRE(std::filesystem::exists(paths.manifest()), errc::state,
                "dataset not found; run gen-data first: " + paths.manifest());
    auto records = load_manifest(paths.manifest());
    std::vector<ManifestRecord> labeled;
    for (const auto& r : records)
        if (r.labeled) labeled.push_back(r);
    TPG_REQUIRE(!labeled.empty(), errc::data, "stage-I training needs labeled pairs");

    LdnModel model(cfg.ldn, cfg.seed);
    ParamSet all = model.all_params();
    ParamSet scm_ps = model.scm_params();
    ParamSet ram_ps = model.ram_sat_params();

    int e1 = cfg.ldn.epochs_scm, e2 = cfg.ldn.epochs_ram;
    int total_epochs = e1 + e2;
    LdnCheckpointInfo info;
    Adam opt_scm(scm_ps, cfg.ldn.lr);
    Adam opt_ram(ram_ps, cfg.ldn.lr);

    if (resume && std::filesystem::exists(paths.ldn_ckpt())) {
        CheckpointMeta meta = read_checkpoint_meta(paths.ldn_ckpt());
        TPG_REQUIRE(meta.stage == "ldn", errc::state, "checkpoint is not a stage-I checkpoint");
        TPG_REQUIRE(meta.config_hash == config_hash(cfg), errc::config,
                    "checkpoint was produced by a different configuration");
        info.phase = meta.extra.at("phase").get<int>();
        info.epoch_next = meta.extra.at("epoch_next").get<int>();
        Adam* opt = info.phase == 1 ? &opt_scm : &opt_ram;
        load_checkpoint(paths.ldn_ckpt(), all, opt);
        info.step = meta.step;
    }

    JsonlLogger log(paths.ldn_log(), info.epoch_next > 0);
    int batch = cfg.ldn.batch_size;
    int n = int(labeled.size());

    // image and latent caches; stage-I data is labeled-only and modest in size
    std::vector<Tensor> img_c(labeled.size()), img_p(labeled.size());
    std::vector<Tensor> z_c(labeled.size()), z_p(labeled.size());
    for (size_t i = 0; i < labeled.size(); ++i) {
        Sample s = load_sample(labeled[i]);
        img_c[i] = s.clothing;
        img_p[i] = s.pattern;
        z_c[i] = encode_image(s.clothing);
        z_p[i] = encode_image(s.pattern);
    }
    auto probe_pairs = [&]() {
        std::vector<std::pair<Tensor, Tensor>> pairs;
        int m = std::min(n, 32);
        for (int i = 0; i < m; ++i) pairs.emplace_back(z_c[size_t(i)], z_p[size_t(i)]);
        return pairs;
    };
    auto log_distances = [&](int epoch) {
        auto d = pipeline_detail::probe_distances(model, probe_pairs());
        log.write({{"stage", "ldn_distance"},
                   {"epoch", epoch},
                   {"d_structured", d.structured},
                   {"d_clothing", d.clothing},
                   {"wall_time", wall_seconds()}});
    };

    for (int epoch = info.epoch_next; epoch < total_epochs; ++epoch) {
        bool phase1 = epoch < e1;
        if (!phase1 && epoch == e1 && info.epoch_next <= e1) log_distances(epoch);

        auto order = pipeline_detail::shuffled_indices(n, cfg.seed, "ldn_shuffle", uint64_t(epoch));
        for (int b0 = 0; b0 < n; b0 += batch) {
            int bn = std::min(batch, n - b0);
            Graph g;
            Var acc{};
            for (int k = 0; k < bn; ++k) {
                int i = order[size_t(b0 + k)];
                Var term{};
                if (phase1) {
                    uint64_t sa = pipeline_detail::derived_seed(cfg.seed, "aug_c",
                                                                uint64_t(epoch), uint64_t(i));
                    uint64_t sb = pipeline_detail::derived_seed(cfg.seed, "aug_p",
                                                                uint64_t(epoch), uint64_t(i));
                    Tensor ac = encode_image(augment_view(img_c[size_t(i)], sa));
                    Tensor ap = encode_image(augment_view(img_p[size_t(i)], sb));
                    term = loss_scm(g, model.scm, g.input(ac), g.input(ap));
                } else {
                    Var vzc = g.input(z_c[size_t(i)]);
                    Var vzp = g.input(z_p[size_t(i)]);
                    Var tok_c = model.scm.tokens_var(g, vzc, true);
                    Var tok_p = model.scm.tokens_var(g, vzp, true);
                    Var ft_c = model.ram.forward(g, tok_c, vzc);
                    Var ft_p = model.ram.forward(g, tok_p, vzp);
                    Var fa_c = cfg.ldn.sats_enabled ? model.sats.forward(g, ft_c) : ft_c;
                    term = loss_triplet(g, fa_c, ft_c, ft_p, cfg.ldn.alpha);
                }
                acc = acc.valid() ? g.add(acc, term) : term;
            }
            Var loss = g.scale(acc, 1.0 / double(bn));
            g.backward(loss);
            (phase1 ? opt_scm : opt_ram).step();
            ++info.step;
            nlohmann::json entry{{"step", info.step},
                                 {"stage", "ldn"},
                                 {"phase", phase1 ? 1 : 2},
                                 {"epoch", epoch},
                                 {"wall_time", wall_seconds()}};
            entry[phase1 ? "loss_scm" : "loss_triplet"] = loss.val().v[0];
            log.write(entry);
        }
        if (!phase1) log_distances(epoch + 1);

        info.phase = epoch + 1 < e1 ? 1 : 2;
        info.epoch_next = epoch + 1;
        save_checkpoint(paths.ldn_ckpt(), all, info.phase == 1 ? &opt_scm : &opt_ram,
                        make_ldn_meta(cfg, info));
    }

    if (info.epoch_next == 0 && total_epochs == 0)
        save_checkpoint(paths.ldn_ckpt(), all, nullptr, make_ldn_meta(cfg, info));
}

// loads a trained stage-I model; the parameter shapes double-check the sidecar
inline LdnModel load_ldn(const RunConfig& cfg, const std::string& ckpt_path) {
    TPG_REQUIRE(std::filesystem::exists(ckpt_path), errc::state,
                "stage-I checkpoint required: " + ckpt_path);
    LdnModel model(cfg.ldn, cfg.seed);
    ParamSet all = model.all_params();
    CheckpointMeta meta = load_checkpoint(ckpt_path, all, nullptr);
    TPG_REQUIRE(meta.stage == "ldn", errc::state,
                "expected a stage-I checkpoint: " + ckpt_path);
    model.trained = true;
    return model;
}

// ---- stage-II training -----------------------------------------------------------------

struct SldmCheckpointInfo {
    int64_t step_next = 0;
};

inline CheckpointMeta make_sldm_meta(const RunConfig& cfg, const SldmCheckpointInfo& info) {
    CheckpointMeta meta;
    meta.stage = "sldm";
    meta.step = info.step_next;
    meta.config_hash = config_hash(cfg);
    meta.extra = {{"T", cfg.sldm.T},
                  {"beta_start", cfg.sldm.beta_start},
                  {"beta_end", cfg.sldm.beta_end},
                  {"guidance_scale_default", cfg.sampler.guidance},
                  {"seed", cfg.seed},
                  {"base_channels", cfg.sldm.base_channels}};
    return meta;
}

// per-sample constants the step loop derives from a manifest record
inline SldmBatchSample prepare_sample(const ManifestRecord& rec, const LdnModel& ldn,
                                      const Ablations& ab, double p_drop, uint64_t sample_seed) {
    Sample s = load_sample(rec);
    SldmBatchSample out;
    out.clothing = s.clothing;
    out.pattern = s.pattern;
    out.mask = s.mask;
    out.labeled = s.labeled;
    out.seed = sample_seed;
    out.z_c = encode_image(s.clothing);
    out.mask_lat = resize_mask(s.mask);
    LdnFeatures fc = ldn.extract_all(out.z_c);
    out.fs_c = fc.content_pooled;
    if (s.labeled) {
        out.z_p = encode_image(s.pattern);
        out.fs_p = ldn.extract_content(out.z_p).pooled;
    }
    Rng drop = rng_stream(sample_seed, "drop");
    out.bundle = train_bundle(fc, ab, p_drop, drop);
    return out;
}

inline void train_sldm(const RunConfig& cfg, const RunPaths& paths, bool resume) {
    cfg.validate();
    TPG_REQUIRE(std::filesystem::exists(paths.manifest()), errc::state,
                "dataset not found; run gen-data first: " + paths.manifest());
    auto records = load_manifest(paths.manifest());
    std::vector<int> labeled_idx, unlabeled_idx;
    for (size_t i = 0; i < records.size(); ++i)
        (records[i].labeled ? labeled_idx : unlabeled_idx).push_back(int(i));
    TPG_REQUIRE(!labeled_idx.empty(), errc::data, "stage-II training needs labeled pairs");
    TPG_REQUIRE(cfg.sldm.unlabeled_per_batch == 0 || !unlabeled_idx.empty(), errc::data,
                "config asks for unlabeled samples but the dataset has none");

    LdnModel ldn = load_ldn(cfg, paths.ldn_ckpt());
    NoiseSchedule sched(cfg.sldm.T, cfg.sldm.beta_start, cfg.sldm.beta_end);
    DenoiserNet net(cfg.sldm.base_channels, cfg.ldn.d, latent_channels(), cfg.ldn.d_head,
                    cfg.seed);
    ParamSet ps;
    net.collect(ps);
    Adam opt(ps, cfg.sldm.lr);

    SldmCheckpointInfo info;
    if (resume && std::filesystem::exists(paths.sldm_ckpt())) {
        CheckpointMeta meta = read_checkpoint_meta(paths.sldm_ckpt());
        TPG_REQUIRE(meta.stage == "sldm", errc::state, "checkpoint is not a stage-II checkpoint");
        TPG_REQUIRE(meta.config_hash == config_hash(cfg), errc::config,
                    "checkpoint was produced by a different configuration");
        load_checkpoint(paths.sldm_ckpt(), ps, &opt);
        info.step_next = meta.step;
    }

    ApContext ctx;
    ctx.scm = &ldn.scm;
    ctx.lambda1 = cfg.ablate.no_std ? 0.0 : cfg.sldm.lambda1;
    ctx.lambda2 = cfg.ablate.no_cls ? 0.0 : cfg.sldm.lambda2;
    ctx.lambda3 = cfg.sldm.lambda3;
    ctx.lambda4 = cfg.sldm.lambda4;
    ctx.n_kernels = 4;
    ctx.kernel_size = cls_kernel_size(cfg.data.image_size);
    ctx.threshold = 0.7;
    bool include_ap = !cfg.ablate.no_alignment;

    JsonlLogger log(paths.sldm_log(), info.step_next > 0);
    int per_l = cfg.sldm.labeled_per_batch, per_u = cfg.sldm.unlabeled_per_batch;
    int64_t ckpt_every = 500;

    for (int64_t step = info.step_next; step < cfg.sldm.steps; ++step) {
        Rng pick = rng_stream(cfg.seed, "batch_pick", uint64_t(step));
        std::vector<SldmBatchSample> batch;
        for (int k = 0; k < per_l; ++k) {
            int i = labeled_idx[size_t(pick.uniform_int(uint64_t(labeled_idx.size())))];
            uint64_t ss = pipeline_detail::derived_seed(cfg.seed, "sldm_sample", uint64_t(step),
                                                        uint64_t(batch.size()));
            batch.push_back(prepare_sample(records[size_t(i)], ldn, cfg.ablate,
                                           cfg.sldm.p_drop, ss));
        }
        for (int k = 0; k < per_u; ++k) {
            int i = unlabeled_idx[size_t(pick.uniform_int(uint64_t(unlabeled_idx.size())))];
            uint64_t ss = pipeline_detail::derived_seed(cfg.seed, "sldm_sample", uint64_t(step),
                                                        uint64_t(batch.size()));
            batch.push_back(prepare_sample(records[size_t(i)], ldn, cfg.ablate,
                                           cfg.sldm.p_drop, ss));
        }

        std::vector<int> labeled_in_batch;
        for (size_t i = 0; i < batch.size(); ++i)
            if (batch[i].labeled) labeled_in_batch.push_back(int(i));
        Rng refr = rng_stream(cfg.seed, "align_ref", uint64_t(step));
        std::vector<int> ref_choice(batch.size(), -1);
        for (size_t i = 0; i < batch.size(); ++i) {
            std::vector<int> pool;
            for (int r : labeled_in_batch)
                if (r != int(i) || labeled_in_batch.size() < 2) pool.push_back(r);
            ref_choice[i] = pool[size_t(refr.uniform_int(uint64_t(pool.size())))];
        }

        Graph g;
        SldmStepReport rep;
        Var loss = loss_sldm_total(g, net, sched, ctx, batch, ref_choice,
                                   cfg.sldm.align_t_cap, include_ap, &rep);
        g.backward(loss);
        opt.step();

        log.write({{"step", step + 1},
                   {"stage", "sldm"},
                   {"loss_total", rep.total},
                   {"loss_dp", rep.dp},
                   {"loss_std", rep.std_t},
                   {"loss_cls", rep.cls},
                   {"loss_perceptual", rep.perceptual},
                   {"loss_mse", rep.mse},
                   {"loss_ap", rep.ap},
                   {"wall_time", wall_seconds()}});

        info.step_next = step + 1;
        if ((step + 1) % ckpt_every == 0 || step + 1 == cfg.sldm.steps)
            save_checkpoint(paths.sldm_ckpt(), ps, &opt, make_sldm_meta(cfg, info));
    }
    if (cfg.sldm.steps == 0)
        save_checkpoint(paths.sldm_ckpt(), ps, &opt, make_sldm_meta(cfg, info));
}

inline DenoiserNet load_sldm(const RunConfig& cfg, const std::string& ckpt_path) {
    TPG_REQUIRE(std::filesystem::exists(ckpt_path), errc::state,
                "stage-II checkpoint required: " + ckpt_path);
    DenoiserNet net(cfg.sldm.base_channels, cfg.ldn.d, latent_channels(), cfg.ldn.d_head,
                    cfg.seed);
    ParamSet ps;
    net.collect(ps);
    CheckpointMeta meta = load_checkpoint(ckpt_path, ps, nullptr);
    TPG_REQUIRE(meta.stage == "sldm", errc::state,
                "expected a stage-II checkpoint: " + ckpt_path);
    return net;
}

// ---- inference and evaluation -----------------------------------------------------------

inline Tensor infer_one(const Tensor& clothing, const Tensor& mask, const LdnModel& ldn,
                        const DenoiserNet& net, const NoiseSchedule& sched,
                        const SamplerConfig& scfg, const Ablations& ab, uint64_t seed) {
    Tensor z_c = encode_image(clothing);
    Tensor mask_lat = resize_mask(mask);
    LdnFeatures f = ldn.extract_all(z_c);
    ConditioningBundle pos = positive_bundle(f, ab);
    ConditioningBundle neg = negative_bundle(f, ab);
    return sample_image(net, sched, z_c, mask_lat, pos, neg, scfg, seed);
}

// deterministic per-sample generation seed for evaluation runs
inline uint64_t eval_seed(uint64_t run_seed, const std::string& sample_id) {
    uint64_t x = run_seed ^ hash_tag(sample_id.c_str());
    return Rng::splitmix64(x);
}

inline nlohmann::json run_evaluation(const RunConfig& cfg, const std::string& eval_manifest,
                                     const RunPaths& paths) {
    LdnModel ldn = load_ldn(cfg, paths.ldn_ckpt());
    DenoiserNet net = load_sldm(cfg, paths.sldm_ckpt());
    NoiseSchedule sched(cfg.sldm.T, cfg.sldm.beta_start, cfg.sldm.beta_end);
    std::vector<Sample> split = load_dataset(eval_manifest);
    auto gen = [&](const Sample& s) {
        return infer_one(s.clothing, s.mask, ldn, net, sched, cfg.sampler, cfg.ablate,
                         eval_seed(cfg.seed, s.sample_id));
    };
    return evaluate_dataset(split, gen, ldn, to_json(cfg));
}

inline nlohmann::json analyze_features(const RunConfig& cfg, const std::string& manifest_path,
                                       const std::vector<std::string>& ckpt_paths) {
    std::vector<Sample> all = load_dataset(manifest_path);
    std::vector<std::pair<Tensor, Tensor>> pairs;
    for (const auto& s : all)
        if (s.labeled && int(pairs.size()) < 32) pairs.emplace_back(s.clothing, s.pattern);
    TPG_REQUIRE(!pairs.empty(), errc::data, "feature analysis needs labeled pairs");

    nlohmann::json out;
    out["checkpoints"] = nlohmann::json::array();
    for (const auto& path : ckpt_paths) {
        LdnModel model = load_ldn(cfg, path);
        FeatureDistanceReport rep = feature_distance_report(model, pairs);
        nlohmann::json entry{{"path", path},
                             {"step", read_checkpoint_meta(path).step},
                             {"d_structured", rep.structured_to_pattern},
                             {"d_clothing", rep.clothing_to_pattern}};
        auto coords = [](const std::vector<std::array<double, 2>>& v) {
            nlohmann::json a = nlohmann::json::array();
            for (const auto& p : v) a.push_back({p[0], p[1]});
            return a;
        };
        entry["proj_structured_c"] = coords(rep.proj_structured_c);
        entry["proj_defect_p"] = coords(rep.proj_defect_p);
        entry["proj_defect_c"] = coords(rep.proj_defect_c);
        out["checkpoints"].push_back(entry);
    }
    return out;
}

}  // namespace tpg

#endif
