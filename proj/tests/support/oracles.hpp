#pragma once

// Independent numerical oracles shared by the unit and acceptance tests.

#include <cmath>

namespace oracles {

// KL(N(mh,vh) || N(m,v)) by trapezoid quadrature over mh +- 12*sqrt(vh).
// Truncation and discretization error are far below 1e-6 for the variance
// ranges the tests draw from.
inline double kl_quadrature(double mh, double vh, double m, double v) {
    const double sh = std::sqrt(vh);
    const double lo = mh - 12.0 * sh;
    const double hi = mh + 12.0 * sh;
    const int n = 40001;
    const double dx = (hi - lo) / (n - 1);
    auto logpdf = [](double x, double mu, double var) {
        constexpr double log2pi = 1.8378770664093454835606594728112;
        return -0.5 * (log2pi + std::log(var)) - (x - mu) * (x - mu) / (2.0 * var);
    };
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = lo + i * dx;
        const double lp = logpdf(x, mh, vh);
        const double val = std::exp(lp) * (lp - logpdf(x, m, v));
        acc += (i == 0 || i == n - 1) ? 0.5 * val : val;
    }
    return acc * dx;
}

} // namespace oracles
