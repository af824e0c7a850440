#pragma once

// Reference computations written without the library's closed forms, so
// tests compare two independent routes to the same number.

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace oracle {

/// Shapley value by the permutation definition: average marginal
/// contribution over all n! orderings of a 2^n utility table.
inline std::vector<double> sv_by_permutations(const std::vector<double>& table, std::size_t n)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> sv(n, 0.0);
    double count = 0.0;
    do {
        std::size_t s = 0;
        for (auto i : order) {
            sv[i] += table[s | (std::size_t{1} << i)] - table[s];
            s |= std::size_t{1} << i;
        }
        count += 1.0;
    } while (std::next_permutation(order.begin(), order.end()));
    for (auto& v : sv) v /= count;
    return sv;
}

/// sum_S P(S | p) (U(S + i) - U(S)) at a fixed p, for every source i.
inline std::vector<double> marginal_at(const std::vector<double>& table, std::size_t n, double p)
{
    std::vector<double> out(n, 0.0);
    for (std::size_t s = 0; s < table.size(); ++s) {
        const auto size = static_cast<double>(std::popcount(s));
        for (std::size_t i = 0; i < n; ++i) {
            if (s >> i & 1U) continue;
            const double prob = std::pow(p, size) * std::pow(1.0 - p, static_cast<double>(n - 1) - size);
            out[i] += prob * (table[s | (std::size_t{1} << i)] - table[s]);
        }
    }
    return out;
}

/// AME by integrating marginal_at against a density on [lo, hi].
inline std::vector<double> ame_by_quadrature(const std::vector<double>& table, std::size_t n, double lo, double hi,
                                             const std::function<double(double)>& density)
{
    boost::math::quadrature::tanh_sinh<double> q;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = q.integrate([&](double p) { return density(p) * marginal_at(table, n, p)[i]; }, lo, hi);
    }
    return out;
}

inline std::vector<double> ame_truncated_uniform(const std::vector<double>& table, std::size_t n, double eps)
{
    const double h = 1.0 / (1.0 - 2.0 * eps);
    return ame_by_quadrature(table, n, eps, 1.0 - eps, [h](double) { return h; });
}

inline std::vector<double> ame_beta(const std::vector<double>& table, std::size_t n, double a, double b)
{
    const double z = boost::math::beta(a, b);
    return ame_by_quadrature(table, n, 0.0, 1.0,
                             [=](double p) { return std::pow(p, a - 1.0) * std::pow(1.0 - p, b - 1.0) / z; });
}

inline std::vector<double> ame_grid(const std::vector<double>& table, std::size_t n, const std::vector<double>& levels)
{
    std::vector<double> out(n, 0.0);
    for (double p : levels) {
        const auto m = marginal_at(table, n, p);
        for (std::size_t i = 0; i < n; ++i) out[i] += m[i] / static_cast<double>(levels.size());
    }
    return out;
}

// E[1/(p(1-p))] by quadrature against the density, kept independent of the closed forms.
inline double v_truncated_uniform(double eps)
{
    boost::math::quadrature::tanh_sinh<double> q;
    return q.integrate([](double p) { return 1.0 / (p * (1.0 - p)); }, eps, 1.0 - eps) / (1.0 - 2.0 * eps);
}

// The integrand p^(a-2) (1-p)^(b-2) is singular at both ends when a or b < 2.
// Split at 1/2 and substitute p = t^(1/(a-1)) (mirrored for the right half),
// which turns each half into a smooth integral.
inline double v_beta(double a, double b)
{
    boost::math::quadrature::tanh_sinh<double> q;
    auto half = [&](double near, double far) {
        const double r = 1.0 / (near - 1.0);
        return q.integrate([&](double t) { return r * std::pow(1.0 - std::pow(t, r), far - 2.0); }, 0.0,
                           std::pow(0.5, near - 1.0));
    };
    return (half(a, b) + half(b, a)) / boost::math::beta(a, b);
}

inline double l2(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline double linf(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a[i] - b[i]));
    return s;
}

} // namespace oracle
