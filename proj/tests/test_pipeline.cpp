#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oracle_utils.hpp"
#include "tpg/pipeline.hpp"

using namespace tpg;
namespace fs = std::filesystem;

namespace {

bool throws_code(const std::function<void()>& fn, errc want) {
    try {
        fn();
    } catch (const error& e) {
        return e.code == want;
    }
    return false;
}

std::string fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("tpg_pipeline_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

RunConfig tiny_config(uint64_t seed = 11) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.data.image_size = 32;
    cfg.data.tile_period = 8;
    cfg.data.warp_amplitude = 1.5;
    cfg.data.blur_sigma_min = 0.4;
    cfg.data.blur_sigma_max = 0.8;
    cfg.data.occlusion_min = 0;
    cfg.data.occlusion_max = 2;
    cfg.data.labeled_count = 6;
    cfg.data.unlabeled_count = 4;
    cfg.data.seed = seed;
    cfg.ldn.d = 16;
    cfg.ldn.n_ram = 1;
    cfg.ldn.k_sat = 3;
    cfg.ldn.d_head = 8;
    cfg.ldn.epochs_scm = 1;
    cfg.ldn.epochs_ram = 1;
    cfg.ldn.batch_size = 4;
    cfg.sldm.T = 50;
    cfg.sldm.labeled_per_batch = 2;
    cfg.sldm.unlabeled_per_batch = 1;
    cfg.sldm.align_t_cap = 25;
    cfg.sldm.steps = 2;
    cfg.sldm.base_channels = 8;
    cfg.sampler.steps = 3;
    cfg.sampler.guidance = 2.0;
    return cfg;
}

// strips volatile fields so two runs of the same seed compare equal
std::vector<nlohmann::json> losses_only(const std::vector<nlohmann::json>& rows) {
    std::vector<nlohmann::json> out;
    for (auto r : rows) {
        r.erase("wall_time");
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

TEST_CASE("run directory layout composes under the output root") {
    RunPaths p{"some/out"};
    REQUIRE(p.manifest() == p.join("dataset/manifest.jsonl"));
    REQUIRE(p.ldn_ckpt() == p.join("ldn.ckpt"));
    REQUIRE(p.ldn_log() == p.join("logs/ldn_steps.jsonl"));
    REQUIRE(p.report_dir() == p.join("reports"));
}

TEST_CASE("training stages refuse to start without their inputs") {
    RunConfig cfg = tiny_config();
    RunPaths paths{fresh_dir("gate")};

    REQUIRE(throws_code([&] { train_ldn(cfg, paths, false); }, errc::state));
    REQUIRE(throws_code([&] { train_sldm(cfg, paths, false); }, errc::state));
    REQUIRE(throws_code([&] { load_ldn(cfg, paths.ldn_ckpt()); }, errc::state));
    REQUIRE(throws_code([&] { load_sldm(cfg, paths.sldm_ckpt()); }, errc::state));

    build_dataset(cfg.data, paths.dataset_dir());
    REQUIRE(throws_code([&] { train_sldm(cfg, paths, false); }, errc::state));
}

TEST_CASE("stage one trains, logs both phases, and reloads") {
    RunConfig cfg = tiny_config();
    RunPaths paths{fresh_dir("ldn")};
    build_dataset(cfg.data, paths.dataset_dir());
    train_ldn(cfg, paths, false);

    REQUIRE(fs::exists(paths.ldn_ckpt()));
    REQUIRE(fs::exists(paths.ldn_ckpt() + ".json"));
    CheckpointMeta meta = read_checkpoint_meta(paths.ldn_ckpt());
    REQUIRE(meta.stage == "ldn");
    REQUIRE(meta.config_hash == config_hash(cfg));
    REQUIRE(meta.extra.at("epoch_next").get<int>() == 2);

    auto rows = read_jsonl(paths.ldn_log());
    int n_p1 = 0, n_p2 = 0, n_dist = 0;
    for (const auto& r : rows) {
        if (r.at("stage") == "ldn_distance") {
            ++n_dist;
            REQUIRE(std::isfinite(r.at("d_structured").get<double>()));
            REQUIRE(std::isfinite(r.at("d_clothing").get<double>()));
            continue;
        }
        int phase = r.at("phase").get<int>();
        if (phase == 1) {
            ++n_p1;
            REQUIRE(std::isfinite(r.at("loss_scm").get<double>()));
        } else {
            ++n_p2;
            REQUIRE(std::isfinite(r.at("loss_triplet").get<double>()));
            REQUIRE(r.at("loss_triplet").get<double>() >= 0.0);
        }
    }
    REQUIRE(n_p1 == 2);  // 6 labeled / batch 4 -> 2 steps per epoch
    REQUIRE(n_p2 == 2);
    REQUIRE(n_dist == 2);

    LdnModel model = load_ldn(cfg, paths.ldn_ckpt());
    REQUIRE(model.trained);
    Tensor z = oracle::rand_tensor({latent_channels(), 8, 8}, 901);
    LdnFeatures f = model.extract_all(z);
    REQUIRE(f.defect.shape == z.shape);

    nlohmann::json fa = analyze_features(cfg, paths.manifest(), {paths.ldn_ckpt()});
    REQUIRE(fa.at("checkpoints").size() == 1);
    REQUIRE(std::isfinite(fa["checkpoints"][0].at("d_structured").get<double>()));
    REQUIRE(fa["checkpoints"][0].at("proj_structured_c").size() == 6);
}

TEST_CASE("interrupted stage-one training resumes to the identical checkpoint") {
    RunConfig full = tiny_config();
    full.ldn.epochs_scm = 2;
    full.ldn.epochs_ram = 1;

    RunPaths a{fresh_dir("ldn_straight")};
    build_dataset(full.data, a.dataset_dir());
    train_ldn(full, a, false);

    RunPaths b{fresh_dir("ldn_resumed")};
    build_dataset(full.data, b.dataset_dir());
    RunConfig part = full;
    part.ldn.epochs_ram = 0;
    train_ldn(part, b, false);
    CheckpointMeta mid = read_checkpoint_meta(b.ldn_ckpt());
    REQUIRE(mid.extra.at("epoch_next").get<int>() == 2);
    train_ldn(full, b, true);

    REQUIRE(slurp(a.ldn_ckpt()) == slurp(b.ldn_ckpt()));
    REQUIRE(slurp(a.ldn_ckpt() + ".json") == slurp(b.ldn_ckpt() + ".json"));

    // resuming a finished run is a no-op
    std::string before = slurp(b.ldn_ckpt());
    train_ldn(full, b, true);
    REQUIRE(slurp(b.ldn_ckpt()) == before);
}

TEST_CASE("stage two trains, logs every term, and evaluates") {
    RunConfig cfg = tiny_config();
    RunPaths paths{fresh_dir("sldm")};
    build_dataset(cfg.data, paths.dataset_dir());
    train_ldn(cfg, paths, false);
    train_sldm(cfg, paths, false);

    CheckpointMeta meta = read_checkpoint_meta(paths.sldm_ckpt());
    REQUIRE(meta.stage == "sldm");
    REQUIRE(meta.step == 2);

    auto rows = read_jsonl(paths.sldm_log());
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        for (const char* key : {"loss_total", "loss_dp", "loss_std", "loss_cls",
                                "loss_perceptual", "loss_mse", "loss_ap"})
            REQUIRE(std::isfinite(r.at(key).get<double>()));
        REQUIRE(r.at("loss_dp").get<double>() >= 0.0);
    }
    REQUIRE(rows[0].at("step").get<int>() == 1);
    REQUIRE(rows[1].at("step").get<int>() == 2);

    DenoiserNet net = load_sldm(cfg, paths.sldm_ckpt());
    LdnModel ldn = load_ldn(cfg, paths.ldn_ckpt());
    NoiseSchedule sched(cfg.sldm.T, cfg.sldm.beta_start, cfg.sldm.beta_end);
    Tensor clothing = oracle::rand_tensor({32, 32, 3}, 902, 0.0, 1.0);
    Tensor mask(Shape{32, 32}, 1.0);
    Tensor img1 = infer_one(clothing, mask, ldn, net, sched, cfg.sampler, cfg.ablate, 31);
    REQUIRE(img1.shape == Shape{32, 32, 3});
    Tensor img2 = infer_one(clothing, mask, ldn, net, sched, cfg.sampler, cfg.ablate, 31);
    REQUIRE(img1.max_abs_diff(img2) == 0.0);
    REQUIRE(img1.max_abs_diff(infer_one(clothing, mask, ldn, net, sched, cfg.sampler,
                                        cfg.ablate, 32)) > 0.0);

    nlohmann::json rep = run_evaluation(cfg, paths.manifest(), paths);
    REQUIRE(rep.at("count").get<int>() == 10);
    REQUIRE(rep.at("means").contains("cts"));
    REQUIRE(rep.at("means").contains("ssim"));
    REQUIRE(std::isfinite(rep["means"]["ssim"].get<double>()));
}

TEST_CASE("interrupted stage-two training resumes to the identical checkpoint") {
    RunConfig full = tiny_config();
    full.sldm.steps = 4;

    RunPaths a{fresh_dir("sldm_straight")};
    build_dataset(full.data, a.dataset_dir());
    train_ldn(full, a, false);
    train_sldm(full, a, false);

    RunPaths b{fresh_dir("sldm_resumed")};
    build_dataset(full.data, b.dataset_dir());
    train_ldn(full, b, false);
    RunConfig part = full;
    part.sldm.steps = 2;
    train_sldm(part, b, false);
    REQUIRE(read_checkpoint_meta(b.sldm_ckpt()).step == 2);
    train_sldm(full, b, true);

    REQUIRE(slurp(a.sldm_ckpt()) == slurp(b.sldm_ckpt()));
    REQUIRE(slurp(a.sldm_ckpt() + ".json") == slurp(b.sldm_ckpt() + ".json"));

    std::string before = slurp(b.sldm_ckpt());
    train_sldm(full, b, true);
    REQUIRE(slurp(b.sldm_ckpt()) == before);
}

TEST_CASE("checkpoints reject stage and configuration mismatches") {
    RunConfig cfg = tiny_config();
    RunPaths paths{fresh_dir("mismatch")};
    build_dataset(cfg.data, paths.dataset_dir());
    train_ldn(cfg, paths, false);
    train_sldm(cfg, paths, false);

    REQUIRE(throws_code([&] { load_ldn(cfg, paths.sldm_ckpt()); }, errc::data));
    REQUIRE(throws_code([&] { load_sldm(cfg, paths.ldn_ckpt()); }, errc::data));

    RunPaths cross{fresh_dir("mismatch_cross")};
    build_dataset(cfg.data, cross.dataset_dir());
    fs::copy_file(paths.sldm_ckpt(), cross.ldn_ckpt());
    fs::copy_file(paths.sldm_ckpt() + ".json", cross.ldn_ckpt() + ".json");
    REQUIRE(throws_code([&] { train_ldn(cfg, cross, true); }, errc::state));

    RunConfig wider = cfg;
    wider.ldn.d = 32;
    REQUIRE(throws_code([&] { train_ldn(wider, paths, true); }, errc::config));
    RunConfig reseeded = cfg;
    reseeded.seed = cfg.seed + 1;
    reseeded.data.seed = cfg.data.seed;
    REQUIRE(throws_code([&] { train_sldm(reseeded, paths, true); }, errc::config));
}

TEST_CASE("checkpoint files round-trip parameters and optimizer moments") {
    std::string dir = fresh_dir("ckpt_unit");
    std::string path = dir + "/unit.ckpt";

    auto make_params = [](uint64_t seed) {
        auto ps = std::make_shared<std::vector<Parameter>>();
        ps->push_back(Parameter("w", oracle::rand_tensor({3, 4}, seed)));
        ps->push_back(Parameter("b", oracle::rand_tensor({4}, seed + 1)));
        return ps;
    };
    auto toy_step = [](std::vector<Parameter>& ps, Adam& opt) {
        for (auto& p : ps) p.zero_grad();
        for (auto& p : ps)
            for (size_t i = 0; i < p.grad.v.size(); ++i)
                p.grad.v[i] = 0.3 * p.value.v[i] + 0.01 * double(i);
        opt.step();
    };

    auto base = make_params(71);
    ParamSet set_a;
    for (auto& p : *base) set_a.add(p);
    Adam opt_a(set_a, 1e-2);
    toy_step(*base, opt_a);
    toy_step(*base, opt_a);
    CheckpointMeta meta;
    meta.stage = "ldn";
    meta.step = 2;
    meta.config_hash = 1234;
    save_checkpoint(path, set_a, &opt_a, meta);
    toy_step(*base, opt_a);
    Tensor w_after3 = (*base)[0].value;

    auto fresh = make_params(99);
    ParamSet set_b;
    for (auto& p : *fresh) set_b.add(p);
    Adam opt_b(set_b, 1e-2);
    CheckpointMeta loaded = load_checkpoint(path, set_b, &opt_b);
    REQUIRE(loaded.stage == "ldn");
    REQUIRE(loaded.step == 2);
    REQUIRE(loaded.config_hash == 1234);
    REQUIRE(opt_b.t == 2);
    toy_step(*fresh, opt_b);
    REQUIRE((*fresh)[0].value.max_abs_diff(w_after3) == 0.0);

    // an optimizer covering a subset of the saved parameters round-trips
    ParamSet sub_a;
    sub_a.add((*base)[0]);
    Adam opt_sub(sub_a, 1e-2);
    save_checkpoint(path, set_a, &opt_sub, meta);
    ParamSet sub_b;
    sub_b.add((*fresh)[0]);
    Adam opt_sub_b(sub_b, 1e-2);
    load_checkpoint(path, set_b, &opt_sub_b);
    REQUIRE(throws_code([&] { load_checkpoint(path, set_b, &opt_b); }, errc::state));

    // an optimizer tracking a parameter outside the saved set cannot be saved
    Parameter stray("stray", oracle::rand_tensor({2}, 55));
    ParamSet stray_set;
    stray_set.add(stray);
    Adam opt_stray(stray_set, 1e-2);
    REQUIRE(throws_code([&] { save_checkpoint(path, set_a, &opt_stray, meta); }, errc::state));

    save_checkpoint(path, set_a, nullptr, meta);
    REQUIRE(throws_code([&] { load_checkpoint(path, set_b, &opt_b); }, errc::data));

    ParamSet wrong_shape;
    Parameter w_wide("w", oracle::rand_tensor({3, 5}, 56));
    Parameter b_same("b", oracle::rand_tensor({4}, 57));
    wrong_shape.add(w_wide);
    wrong_shape.add(b_same);
    REQUIRE(throws_code([&] { load_checkpoint(path, wrong_shape, nullptr); }, errc::data));

    ParamSet wrong_name;
    Parameter renamed("w2", oracle::rand_tensor({3, 4}, 58));
    wrong_name.add(renamed);
    wrong_name.add(b_same);
    REQUIRE(throws_code([&] { load_checkpoint(path, wrong_name, nullptr); }, errc::data));

    ParamSet too_few;
    too_few.add(b_same);
    REQUIRE(throws_code([&] { load_checkpoint(path, too_few, nullptr); }, errc::data));

    // garbage without a sidecar fails at the sidecar; with one, at the magic
    {
        std::ofstream garbage(dir + "/garbage.ckpt", std::ios::binary);
        garbage << "not a checkpoint";
    }
    REQUIRE(throws_code([&] { load_checkpoint(dir + "/garbage.ckpt", set_b, nullptr); },
                        errc::io));
    {
        std::ofstream side(dir + "/garbage.ckpt.json");
        side << R"({"stage": "ldn", "step": 0, "config_hash": 0})";
    }
    REQUIRE(throws_code([&] { load_checkpoint(dir + "/garbage.ckpt", set_b, nullptr); },
                        errc::data));
}

TEST_CASE("the whole pipeline reruns bit-identically under one seed") {
    RunConfig cfg = tiny_config(21);
    auto run = [&](const std::string& tag, uint64_t seed) {
        RunConfig c = tiny_config(seed);
        RunPaths paths{fresh_dir("det_" + tag)};
        build_dataset(c.data, paths.dataset_dir());
        train_ldn(c, paths, false);
        train_sldm(c, paths, false);
        LdnModel ldn = load_ldn(c, paths.ldn_ckpt());
        DenoiserNet net = load_sldm(c, paths.sldm_ckpt());
        NoiseSchedule sched(c.sldm.T, c.sldm.beta_start, c.sldm.beta_end);
        Sample s = load_dataset(paths.manifest()).front();
        Tensor img = infer_one(s.clothing, s.mask, ldn, net, sched, c.sampler, c.ablate,
                               eval_seed(c.seed, s.sample_id));
        write_png(paths.join("pattern.png"), img);
        return paths;
    };

    RunPaths a = run("a", 21);
    RunPaths b = run("b", 21);
    REQUIRE(losses_only(read_jsonl(a.ldn_log())) == losses_only(read_jsonl(b.ldn_log())));
    REQUIRE(losses_only(read_jsonl(a.sldm_log())) == losses_only(read_jsonl(b.sldm_log())));
    REQUIRE(slurp(a.join("pattern.png")) == slurp(b.join("pattern.png")));
    REQUIRE(slurp(a.ldn_ckpt()) == slurp(b.ldn_ckpt()));
    REQUIRE(slurp(a.sldm_ckpt()) == slurp(b.sldm_ckpt()));

    RunPaths c = run("c", 22);
    REQUIRE(losses_only(read_jsonl(a.sldm_log())) != losses_only(read_jsonl(c.sldm_log())));
}

TEST_CASE("configuration files parse, validate, and reject unknown keys") {
    RunConfig defaults;
    RunConfig from_doc = load_config(std::string(TPG_SOURCE_DIR) + "/docs/config.default.json");
    REQUIRE(to_json(from_doc) == to_json(defaults));

    std::string dir = fresh_dir("config");
    REQUIRE(throws_code([&] { load_config(dir + "/missing.json"); }, errc::io));

    {
        std::ofstream bad(dir + "/bad.json");
        bad << "{ not json";
    }
    REQUIRE(throws_code([&] { load_config(dir + "/bad.json"); }, errc::config));

    {
        std::ofstream unknown(dir + "/unknown.json");
        unknown << R"({"ldn": {"depth": 3}})";
    }
    REQUIRE(throws_code([&] { load_config(dir + "/unknown.json"); }, errc::config));

    auto invalid = [&](const std::function<void(RunConfig&)>& mutate) {
        RunConfig c = tiny_config();
        mutate(c);
        return throws_code([&] { c.validate(); }, errc::config);
    };
    REQUIRE(invalid([](RunConfig& c) { c.data.image_size = 0; }));
    REQUIRE(invalid([](RunConfig& c) { c.data.tile_period = 5; }));
    REQUIRE(invalid([](RunConfig& c) { c.ldn.d = 0; }));
    REQUIRE(invalid([](RunConfig& c) { c.sldm.p_drop = 1.5; }));
    REQUIRE(invalid([](RunConfig& c) { c.sldm.align_t_cap = c.sldm.T + 1; }));
    REQUIRE(invalid([](RunConfig& c) { c.sldm.base_channels = 12; }));
    REQUIRE(invalid([](RunConfig& c) { c.sampler.steps = 0; }));
    REQUIRE(invalid([](RunConfig& c) { c.sampler.guidance = -1.0; }));
}

TEST_CASE("ablation names map onto their flags") {
    const char* names[] = {"no_ldn",      "no_content", "no_structure", "no_defect",
                           "no_alignment", "no_cls",     "no_std"};
    for (const char* name : names) {
        Ablations ab;
        ab.set(name);
        int count = int(ab.no_ldn) + int(ab.no_content) + int(ab.no_structure) +
                    int(ab.no_defect) + int(ab.no_alignment) + int(ab.no_cls) + int(ab.no_std);
        REQUIRE(count == 1);
    }
    Ablations ab;
    REQUIRE(throws_code([&] { ab.set("no_such_thing"); }, errc::config));

    ab.set("no_cls");
    REQUIRE(ab.no_cls);
    REQUIRE(!ab.no_std);
}

TEST_CASE("stage two enforces its batch composition against the dataset") {
    RunConfig cfg = tiny_config();
    cfg.data.unlabeled_count = 0;
    RunPaths paths{fresh_dir("composition")};
    build_dataset(cfg.data, paths.dataset_dir());
    train_ldn(cfg, paths, false);

    REQUIRE(throws_code([&] { train_sldm(cfg, paths, false); }, errc::data));

    cfg.sldm.unlabeled_per_batch = 0;
    cfg.sldm.steps = 1;
    train_sldm(cfg, paths, false);
    REQUIRE(fs::exists(paths.sldm_ckpt()));
}
