// Times the OpenMP kernels against the serial reference on transformer-shaped
// problems and checks that both produce identical bits.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

#include "picogen/kernels.hpp"

namespace K = picogen::kernels;

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) fn();
    auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void fill_random(std::vector<double>& v, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    for (double& x : v) x = d(rng);
}

struct Case {
    const char* name;
    int m, k, n;
};

}  // namespace

int main() {
    std::mt19937_64 rng(42);
    // Shapes from the Performer: QKV projections, attention scores/context,
    // MLP, and the widest prediction head.
    const Case cases[] = {
        {"qkv  (T=256,D=64)", 256, 64, 64},
        {"attn (T=256)", 256, 16, 256},
        {"mlp  (T=256,H=256)", 256, 64, 256},
        {"head (T=256,V=129)", 256, 64, 129},
        {"qkv  (T=1024,D=64)", 1024, 64, 64},
        {"attn (T=1024)", 1024, 16, 1024},
    };

    std::printf("%-22s %10s %10s %8s  %s\n", "case", "serial ms", "openmp ms", "speedup",
                "bit-equal");
    for (const Case& c : cases) {
        std::vector<double> a(size_t(c.m) * c.k), b(size_t(c.k) * c.n);
        std::vector<double> c_ref(size_t(c.m) * c.n), c_omp(size_t(c.m) * c.n);
        fill_random(a, rng);
        fill_random(b, rng);

        int reps = std::max(1, int(2e8 / (double(c.m) * c.k * c.n)));
        K::set_parallel(false);
        double ser = time_ms([&] { K::ref::matmul_nn(a.data(), b.data(), c_ref.data(),
                                                     c.m, c.k, c.n); },
                             reps);
        K::set_parallel(true);
        double par = time_ms([&] { K::matmul_nn(a.data(), b.data(), c_omp.data(),
                                                c.m, c.k, c.n); },
                             reps);
        bool equal = std::memcmp(c_ref.data(), c_omp.data(),
                                 c_ref.size() * sizeof(double)) == 0;
        std::printf("%-22s %10.3f %10.3f %7.2fx  %s\n", c.name, ser, par, ser / par,
                    equal ? "yes" : "NO");
    }

    {
        const int n = 1024;
        std::vector<double> s(size_t(n) * n), s_ref, s_omp;
        fill_random(s, rng);
        s_ref = s;
        s_omp = s;
        K::set_parallel(false);
        double ser = time_ms([&] {
            s_ref = s;
            K::ref::causal_softmax(s_ref.data(), n);
        }, 3);
        K::set_parallel(true);
        double par = time_ms([&] {
            s_omp = s;
            K::causal_softmax(s_omp.data(), n);
        }, 3);
        bool equal = std::memcmp(s_ref.data(), s_omp.data(), s_ref.size() * sizeof(double)) == 0;
        std::printf("%-22s %10.3f %10.3f %7.2fx  %s\n", "causal softmax (1024)", ser, par,
                    ser / par, equal ? "yes" : "NO");
    }

    std::printf("threads: %d\n", K::thread_count());
    return 0;
}
