// rough throughput probe used to size the training configuration
#include <chrono>
#include <cstdio>

#include "tpg/core/graph.hpp"
#include "tpg/core/nn.hpp"

using namespace tpg;

static double secs_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int main() {
    {
        int n = 512;
        Tensor a({n, n}), b({n, n});
        Rng r(1);
        for (auto& e : a.v) e = r.uniform();
        for (auto& e : b.v) e = r.uniform();
        auto t0 = std::chrono::steady_clock::now();
        int reps = 10;
        double sink = 0.0;
        for (int i = 0; i < reps; ++i) {
            Graph g(false);
            Var y = g.matmul(g.input(a), g.input(b));
            sink += y.val().v[0];
        }
        double dt = secs_since(t0);
        double gf = 2.0 * n * n * double(n) * reps / dt / 1e9;
        std::printf("gemm %dx%d: %.1f GFLOP/s (sink %.3f)\n", n, n, gf, sink);
    }
    {
        // conv stack resembling one denoiser level: 97ch in, 32ch mid, 16x16
        Rng rng(2);
        Conv2dLayer c1("c1", 97, 32, 3, rng);
        Conv2dLayer c2("c2", 32, 32, 3, rng);
        ParamSet ps;
        c1.collect(ps);
        c2.collect(ps);
        Tensor x({97, 16, 16});
        Rng r(3);
        for (auto& e : x.v) e = r.uniform();
        auto t0 = std::chrono::steady_clock::now();
        int reps = 200;
        for (int i = 0; i < reps; ++i) {
            ps.zero_grad();
            Graph g;
            Var h = c2.forward(g, g.silu(c1.forward(g, g.input(x))));
            g.backward(g.mean(h));
        }
        double dt = secs_since(t0);
        std::printf("conv fwd+bwd 97->32->32 @16x16: %.2f ms/iter\n", dt / reps * 1e3);
    }
    return 0;
}
