#include <catch2/catch_amalgamated.hpp>

#include "oracle_utils.hpp"
#include "tpg/sldm.hpp"

using namespace tpg;

namespace {

constexpr int kC = 48;  // latent channel count at reduction 4

// the output head and residual tails start at zero; nudge every weight so the
// net produces nonzero predictions and passes gradients to all layers
DenoiserNet tiny_net(uint64_t seed = 77) {
    DenoiserNet net(8, 16, latent_channels(), 8, seed);
    ParamSet ps;
    net.collect(ps);
    Rng rng(seed * 31 + 7);
    for (auto* p : ps.items)
        for (auto& v : p->value.v) v += 0.05 * rng.uniform(-1.0, 1.0);
    return net;
}

ConditioningBundle full_bundle(uint64_t seed, int L, int d_content) {
    ConditioningBundle b;
    b.content_tokens = oracle::rand_tensor({L, d_content}, seed);
    b.structure_tokens = oracle::rand_tensor({L, kC}, seed + 1);
    b.defect_tokens = oracle::rand_tensor({L, kC}, seed + 2);
    b.global_vec = oracle::rand_tensor({d_content}, seed + 3);
    return b;
}

bool throws_code(const std::function<void()>& fn, errc want) {
    try {
        fn();
    } catch (const error& e) {
        return e.code == want;
    }
    return false;
}

}  // namespace

TEST_CASE("noise schedule endpoints, monotonicity, and range checks") {
    NoiseSchedule s;
    REQUIRE(s.T == 1000);
    REQUIRE(s.bar(0) == 1.0);
    REQUIRE(s.beta[1] == 1e-4);
    REQUIRE(s.beta[1000] == Catch::Approx(2e-2).margin(1e-15));
    for (int t = 1; t <= s.T; ++t) {
        REQUIRE(s.bar(t) < s.bar(t - 1));
        REQUIRE(s.bar(t) > 0.0);
        double frac = double(t - 1) / double(s.T - 1);
        double want = 1e-4 + (2e-2 - 1e-4) * frac;
        REQUIRE(s.beta[size_t(t)] == Catch::Approx(want).margin(1e-15));
    }

    double prod = 1.0;
    for (int t = 1; t <= s.T; ++t) prod *= 1.0 - s.beta[size_t(t)];
    REQUIRE(s.bar(s.T) == Catch::Approx(prod).epsilon(1e-12));

    REQUIRE(throws_code([&] { s.bar(-1); }, errc::domain));
    REQUIRE(throws_code([&] { s.bar(1001); }, errc::domain));
    REQUIRE(throws_code([] { NoiseSchedule(0, 1e-4, 2e-2); }, errc::config));
    REQUIRE(throws_code([] { NoiseSchedule(10, 1e-4, 1.0); }, errc::config));

    NoiseSchedule one(1, 5e-3, 2e-2);
    REQUIRE(one.beta[1] == 5e-3);
    REQUIRE(one.bar(1) == Catch::Approx(1.0 - 5e-3).margin(1e-15));
}

TEST_CASE("forward noising identities") {
    NoiseSchedule s;
    Tensor z0 = oracle::rand_tensor({kC, 2, 2}, 81);
    Tensor eps = oracle::rand_tensor({kC, 2, 2}, 82);

    REQUIRE(add_noise(s, z0, Tensor(z0.shape), 0).max_abs_diff(z0) == 0.0);
    REQUIRE(add_noise(s, z0, eps, 0).max_abs_diff(z0) == 0.0);

    int t = 400;
    Tensor pure = add_noise(s, z0, Tensor(z0.shape), t);
    double sa = std::sqrt(s.bar(t));
    for (size_t i = 0; i < z0.v.size(); ++i)
        REQUIRE(pure.v[i] == Catch::Approx(sa * z0.v[i]).margin(1e-15));

    Tensor bad({kC, 3, 3});
    REQUIRE(throws_code([&] { add_noise(s, z0, bad, t); }, errc::shape));
}

TEST_CASE("noised latents have the scheduled mean and variance") {
    NoiseSchedule s;
    int t = 600;
    double sa = std::sqrt(s.bar(t)), sb = std::sqrt(1.0 - s.bar(t));
    Tensor z0 = oracle::rand_tensor({3, 4, 4}, 83);

    Rng rng(91);
    int draws = 4000;
    double sum = 0.0, sum2 = 0.0;
    int64_t n = 0;
    for (int k = 0; k < draws; ++k) {
        Tensor eps(z0.shape);
        for (auto& e : eps.v) e = rng.normal();
        Tensor zt = add_noise(s, z0, eps, t);
        for (size_t i = 0; i < zt.v.size(); ++i) {
            double r = (zt.v[i] - sa * z0.v[i]) / sb;
            sum += r;
            sum2 += r * r;
            ++n;
        }
    }
    double mean = sum / double(n);
    double var = sum2 / double(n) - mean * mean;
    REQUIRE(std::fabs(mean) <= 0.02);
    REQUIRE(var == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("clean-latent recovery inverts noising") {
    NoiseSchedule s;
    Rng rng(92);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor z0 = oracle::rand_tensor({kC, 2, 2}, 100 + uint64_t(rep));
        Tensor eps(z0.shape);
        for (auto& e : eps.v) e = rng.normal();
        int t = 1 + int(rng.uniform_int(1000));
        Tensor zt = add_noise(s, z0, eps, t);
        Tensor rec = predict_latent0(s, zt, eps, t);
        REQUIRE(rec.max_abs_diff(z0) <= 1e-5);
    }

    int t = 500;
    Tensor z0 = oracle::rand_tensor({kC, 2, 2}, 111);
    Tensor eps = oracle::rand_tensor({kC, 2, 2}, 112);
    Tensor zt = add_noise(s, z0, eps, t);
    Graph g(false);
    Tensor via_graph = predict_latent0_var(g, s, g.input(zt), g.input(eps), t).val();
    REQUIRE(via_graph.max_abs_diff(predict_latent0(s, zt, eps, t)) <= 1e-9);
}

TEST_CASE("denoiser input assembly is an exact channel concat") {
    Tensor z_t = oracle::rand_tensor({kC, 2, 2}, 121);
    Tensor z_c = oracle::rand_tensor({kC, 2, 2}, 122);
    Tensor m = oracle::rand_tensor({2, 2}, 123, 0.0, 1.0);
    Tensor phi = assemble_input(z_t, z_c, m);
    REQUIRE(phi.shape == Shape{2 * kC + 1, 2, 2});

    for (int c = 0; c < kC; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                REQUIRE(phi.at(c, y, x) == z_t.at(c, y, x));
                REQUIRE(phi.at(kC + c, y, x) == z_c.at(c, y, x));
            }
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) REQUIRE(phi.at(2 * kC, y, x) == m.at(y, x));

    Tensor z_bad = oracle::rand_tensor({kC, 3, 2}, 124);
    REQUIRE(throws_code([&] { assemble_input(z_t, z_bad, m); }, errc::shape));
    Tensor m_bad = oracle::rand_tensor({3, 3}, 125, 0.0, 1.0);
    REQUIRE(throws_code([&] { assemble_input(z_t, z_c, m_bad); }, errc::shape));
}

TEST_CASE("denoiser output shape and construction determinism") {
    DenoiserNet net = tiny_net();
    DenoiserNet net2 = tiny_net();
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 131);
    ConditioningBundle b = full_bundle(132, 64, 16);

    Tensor e1 = net.predict_eps(phi, b, 250);
    REQUIRE(e1.shape == Shape{kC, 8, 8});
    REQUIRE(e1.max_abs_diff(net2.predict_eps(phi, b, 250)) == 0.0);
    REQUIRE(e1.max_abs_diff(net.predict_eps(phi, b, 251)) > 0.0);

    Tensor phi_bad = oracle::rand_tensor({2 * kC, 8, 8}, 133);
    REQUIRE(throws_code([&] { net.predict_eps(phi_bad, b, 250); }, errc::shape));
}

TEST_CASE("noise-prediction loss equals the elementwise mse oracle") {
    DenoiserNet net = tiny_net();
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 141);
    ConditioningBundle b = full_bundle(142, 64, 16);
    Tensor eps_true = oracle::rand_tensor({kC, 8, 8}, 143);

    Graph g;
    double loss = loss_dp(g, net, g.input(phi), b, 300, eps_true).val().v[0];

    Tensor pred = net.predict_eps(phi, b, 300);
    double acc = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        double d = pred.v[i] - eps_true.v[i];
        acc += d * d;
    }
    REQUIRE(loss == Catch::Approx(acc / double(pred.numel())).epsilon(1e-12));
    REQUIRE(loss >= 0.0);
}

TEST_CASE("guidance blend short-circuits at its endpoints and is affine") {
    DenoiserNet net = tiny_net();
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 151);
    ConditioningBundle pos = full_bundle(152, 64, 16);
    ConditioningBundle neg = full_bundle(153, 64, 16);
    neg.defect_tokens = oracle::rand_tensor({64, kC}, 154);
    int t = 420;

    Tensor ep = net.predict_eps(phi, pos, t);
    Tensor en = net.predict_eps(phi, neg, t);
    REQUIRE(cfg_epsilon(net, phi, pos, neg, 1.0, t).max_abs_diff(ep) == 0.0);
    REQUIRE(cfg_epsilon(net, phi, pos, neg, 0.0, t).max_abs_diff(en) == 0.0);

    Tensor e0 = cfg_epsilon(net, phi, pos, neg, 0.0, t);
    Tensor e1 = cfg_epsilon(net, phi, pos, neg, 1.0, t);
    Tensor e2 = cfg_epsilon(net, phi, pos, neg, 2.0, t);
    Tensor e3 = cfg_epsilon(net, phi, pos, neg, 3.0, t);
    double worst = 0.0;
    for (size_t i = 0; i < e0.v.size(); ++i) {
        worst = std::max(worst, std::fabs((e2.v[i] - e0.v[i]) - 2.0 * (e1.v[i] - e0.v[i])));
        worst = std::max(worst, std::fabs((e3.v[i] - e0.v[i]) - 3.0 * (e1.v[i] - e0.v[i])));
    }
    REQUIRE(worst <= 1e-6);

    REQUIRE(throws_code([&] { cfg_epsilon(net, phi, pos, neg, -0.5, t); }, errc::config));
}

TEST_CASE("conditioning slots reach only their designated blocks") {
    DenoiserNet net = tiny_net();
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 161);
    ConditioningBundle b = full_bundle(162, 64, 16);

    DenoiserProbe base;
    net.predict_eps(phi, b, 123, &base);
    REQUIRE(base.entries.size() == 5);
    REQUIRE(base.entries[0].name == "attn16_down");
    REQUIRE(base.entries[1].name == "attn8_down");
    REQUIRE(base.entries[2].name == "attn4_mid");
    REQUIRE(base.entries[3].name == "attn8_up");
    REQUIRE(base.entries[4].name == "attn16_up");
    REQUIRE(base.entries[0].tokens_in.dim(0) == 64);
    REQUIRE(base.entries[1].tokens_in.dim(0) == 16);
    REQUIRE(base.entries[2].tokens_in.dim(0) == 4);

    ConditioningBundle bc = b;
    bc.content_tokens = oracle::rand_tensor({64, 16}, 163);
    DenoiserProbe pc;
    net.predict_eps(phi, bc, 123, &pc);
    REQUIRE(pc.entries[0].attn_raw.max_abs_diff(base.entries[0].attn_raw) == 0.0);
    REQUIRE(pc.entries[1].attn_raw.max_abs_diff(base.entries[1].attn_raw) == 0.0);
    REQUIRE(pc.entries[2].attn_raw.max_abs_diff(base.entries[2].attn_raw) > 0.0);

    ConditioningBundle bs = b;
    bs.structure_tokens = oracle::rand_tensor({64, kC}, 164);
    DenoiserProbe psr;
    net.predict_eps(phi, bs, 123, &psr);
    REQUIRE(psr.entries[0].attn_raw.max_abs_diff(base.entries[0].attn_raw) > 0.0);
    REQUIRE(psr.entries[0].tokens_in.max_abs_diff(base.entries[0].tokens_in) == 0.0);

    ConditioningBundle bd = b;
    bd.defect_tokens = oracle::rand_tensor({64, kC}, 165);
    DenoiserProbe pd;
    net.predict_eps(phi, bd, 123, &pd);
    for (int i = 0; i < 5; ++i)
        REQUIRE(pd.entries[size_t(i)].attn_raw.max_abs_diff(base.entries[size_t(i)].attn_raw) >
                0.0);

    ConditioningBundle bg = b;
    bg.global_vec = oracle::rand_tensor({16}, 166);
    DenoiserProbe pg;
    net.predict_eps(phi, bg, 123, &pg);
    REQUIRE(pg.entries[0].tokens_in.max_abs_diff(base.entries[0].tokens_in) > 0.0);
}

TEST_CASE("empty slots fall back to the learned null tokens") {
    DenoiserNet net = tiny_net();
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 171);
    ConditioningBundle b = full_bundle(172, 64, 16);

    ConditioningBundle b_null = b;
    b_null.content_tokens = Tensor{};
    ConditioningBundle b_explicit = b;
    b_explicit.content_tokens = net.null_content.value;
    REQUIRE(net.predict_eps(phi, b_null, 55).max_abs_diff(
                net.predict_eps(phi, b_explicit, 55)) == 0.0);

    ConditioningBundle g_null = b;
    g_null.global_vec = Tensor{};
    ConditioningBundle g_explicit = b;
    g_explicit.global_vec = net.null_global.value;
    REQUIRE(net.predict_eps(phi, g_null, 55).max_abs_diff(
                net.predict_eps(phi, g_explicit, 55)) == 0.0);

    ConditioningBundle all_null;
    Tensor out = net.predict_eps(phi, all_null, 55);
    REQUIRE(out.shape == Shape{kC, 8, 8});
}

TEST_CASE("gradients reach the denoiser and the null tokens only when used") {
    DenoiserNet net = tiny_net();
    ParamSet ps;
    net.collect(ps);
    Tensor phi = oracle::rand_tensor({2 * kC + 1, 8, 8}, 181);
    Tensor eps_true = oracle::rand_tensor({kC, 8, 8}, 182);

    ConditioningBundle b = full_bundle(183, 64, 16);
    ps.zero_grad();
    {
        Graph g;
        Var l = loss_dp(g, net, g.input(phi), b, 77, eps_true);
        g.backward(l);
    }
    double head_total = 0.0;
    for (double v : net.head.W.grad.v) head_total += std::fabs(v);
    REQUIRE(head_total > 0.0);
    for (double v : net.null_content.grad.v) REQUIRE(v == 0.0);
    for (double v : net.null_global.grad.v) REQUIRE(v == 0.0);

    ConditioningBundle empty;
    ps.zero_grad();
    {
        Graph g;
        Var l = loss_dp(g, net, g.input(phi), empty, 77, eps_true);
        g.backward(l);
    }
    double nc = 0.0, ng = 0.0, nsr = 0.0, nd = 0.0;
    for (double v : net.null_content.grad.v) nc += std::fabs(v);
    for (double v : net.null_global.grad.v) ng += std::fabs(v);
    for (double v : net.null_structure.grad.v) nsr += std::fabs(v);
    for (double v : net.null_defect.grad.v) nd += std::fabs(v);
    REQUIRE(nc > 0.0);
    REQUIRE(ng > 0.0);
    REQUIRE(nsr > 0.0);
    REQUIRE(nd > 0.0);
}

TEST_CASE("sampler is deterministic and shape preserving") {
    DenoiserNet net = tiny_net();
    NoiseSchedule sched(50, 1e-4, 2e-2);
    Tensor z_c = oracle::rand_tensor({kC, 8, 8}, 191);
    Tensor mask(Shape{8, 8}, 1.0);
    ConditioningBundle pos = full_bundle(192, 64, 16);
    ConditioningBundle neg;
    neg.defect_tokens = oracle::rand_tensor({64, kC}, 193);

    SamplerConfig scfg;
    scfg.steps = 4;
    scfg.guidance = 2.0;

    Tensor za = sample_latent(net, sched, z_c, mask, pos, neg, scfg, 9001);
    REQUIRE(za.shape == z_c.shape);
    Tensor zb = sample_latent(net, sched, z_c, mask, pos, neg, scfg, 9001);
    REQUIRE(za.max_abs_diff(zb) == 0.0);
    Tensor zc2 = sample_latent(net, sched, z_c, mask, pos, neg, scfg, 9002);
    REQUIRE(za.max_abs_diff(zc2) > 0.0);
    for (double v : za.v) REQUIRE(std::isfinite(v));

    SamplerConfig one = scfg;
    one.steps = 1;
    Tensor zo = sample_latent(net, sched, z_c, mask, pos, neg, one, 9001);
    REQUIRE(zo.shape == z_c.shape);

    SamplerConfig over = scfg;
    over.steps = 500;
    Tensor zv = sample_latent(net, sched, z_c, mask, pos, neg, over, 9001);
    REQUIRE(zv.shape == z_c.shape);

    SamplerConfig bad = scfg;
    bad.steps = 0;
    REQUIRE(throws_code([&] { sample_latent(net, sched, z_c, mask, pos, neg, bad, 1); },
                        errc::config));

    Tensor img = sample_image(net, sched, z_c, mask, pos, neg, scfg, 9001);
    REQUIRE(img.shape == Shape{32, 32, 3});
    for (double v : img.v) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("timestep embeddings separate distinct steps deterministically") {
    Tensor a = timestep_embedding(17, 64);
    REQUIRE(a.shape == Shape{64});
    REQUIRE(a.max_abs_diff(timestep_embedding(17, 64)) == 0.0);
    REQUIRE(a.max_abs_diff(timestep_embedding(18, 64)) > 0.0);
    for (double v : a.v) {
        REQUIRE(v >= -1.0);
        REQUIRE(v <= 1.0);
    }
}
