#include "conceptlm/rng.hpp"

#include <cmath>
#include <numbers>

namespace conceptlm {

double SeededRng::next_gauss() {
    // 1 - u keeps the log argument in (0, 1].
    double u1 = 1.0 - next_real();
    double u2 = next_real();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double SeededRng::next_trunc_normal(double stddev) {
    for (;;) {
        double z = next_gauss();
        if (std::abs(z) <= 2.0) return z * stddev;
    }
}

std::vector<int> SeededRng::permutation(int n, bool forbid_identity) {
    std::vector<int> p(static_cast<size_t>(n < 0 ? 0 : n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    if (n < 2) return p;
    for (;;) {
        shuffle(p);
        if (!forbid_identity) return p;
        for (int i = 0; i < n; ++i) {
            if (p[static_cast<size_t>(i)] != i) return p;
        }
    }
}

}  // namespace conceptlm
