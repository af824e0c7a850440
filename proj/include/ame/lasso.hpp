#pragma once

#include <ame/core.hpp>
#include <ame/detail/parallel.hpp>
#include <ame/rng.hpp>
#include <ame/sampling.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace ame {

// Objective: (1/(2M)) * ||y - X b||^2 + lambda * sum_{j penalized} |b_j|.
// With the 1/M-free convention, lambda_unscaled = 2 * M * lambda.

struct LassoOptions
{
    double tol = 1e-7;
    std::size_t max_sweeps = 100000;
};

struct LassoFit
{
    Eigen::VectorXd beta;
    double lambda = 0.0;
    std::vector<bool> penalized;
    std::size_t n_iter = 0;
    bool converged = false;
};

struct CvReport
{
    std::vector<double> lambda_grid;
    std::vector<double> mean_error;
    std::vector<double> std_error;
    std::size_t index_min = 0;
    std::size_t index_1se = 0;
    double lambda_min = 0.0;
    double lambda_1se = 0.0;
};

namespace detail {

inline double soft_threshold(double z, double t)
{
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
}

/// Columns of X'X/M computed on first use. Only columns that go active are
/// ever asked for, so this stays small on wide designs.
class ColumnCache
{
public:
    explicit ColumnCache(const Eigen::MatrixXd& x) : x_(x), slot_(static_cast<std::size_t>(x.cols()), -1) {}

    const Eigen::VectorXd& column(Eigen::Index j)
    {
        auto& s = slot_[static_cast<std::size_t>(j)];
        if (s < 0) {
            s = static_cast<std::ptrdiff_t>(cols_.size());
            cols_.push_back(x_.transpose() * x_.col(j) / static_cast<double>(x_.rows()));
        }
        return cols_[static_cast<std::size_t>(s)];
    }

private:
    const Eigen::MatrixXd& x_;
    std::vector<std::ptrdiff_t> slot_;
    std::deque<Eigen::VectorXd> cols_;
};

/// Coordinate gradients from the residual vector; O(M) per query.
class ResidualEngine
{
public:
    static constexpr bool cheap_update = false;

    ResidualEngine(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                   ColumnCache& cache)
        : x_(x), inv_m_(1.0 / static_cast<double>(x.rows())), r_(y), cache_(cache)
    {
        for (Eigen::Index j = 0; j < beta.size(); ++j) {
            if (beta[j] != 0.0) r_.noalias() -= beta[j] * x_.col(j);
        }
        diag_ = x_.colwise().squaredNorm().transpose() * inv_m_;
    }

    double diag(Eigen::Index j) const { return diag_[j]; }
    double grad(Eigen::Index j) const { return x_.col(j).dot(r_) * inv_m_; }
    void update(Eigen::Index j, double delta) { r_.noalias() -= delta * x_.col(j); }
    const Eigen::VectorXd& column(Eigen::Index j) { return cache_.column(j); }
    double loss() const { return 0.5 * r_.squaredNorm() * inv_m_; }

private:
    const Eigen::MatrixXd& x_;
    double inv_m_;
    Eigen::VectorXd r_;
    Eigen::VectorXd diag_;
    ColumnCache& cache_;
};

/// Coordinate gradients maintained from the Gram matrix G = X'X/M; O(P) per update.
class GramEngine
{
public:
    static constexpr bool cheap_update = true;

    GramEngine(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty, double yy, const Eigen::VectorXd& beta)
        : g_(gram), c_(xty), yy_(yy), grad_(xty)
    {
        for (Eigen::Index j = 0; j < beta.size(); ++j) {
            if (beta[j] != 0.0) grad_.noalias() -= beta[j] * g_.col(j);
        }
        beta_ = beta;
    }

    double diag(Eigen::Index j) const { return g_(j, j); }
    double grad(Eigen::Index j) const { return grad_[j]; }
    void update(Eigen::Index j, double delta)
    {
        grad_.noalias() -= delta * g_.col(j);
        beta_[j] += delta;
    }
    auto column(Eigen::Index j) const { return g_.col(j); }
    // 0.5*y'y/M - c'b + 0.5*b'Gb, with Gb = c - grad
    double loss() const { return 0.5 * yy_ - c_.dot(beta_) + 0.5 * beta_.dot(c_ - grad_); }

private:
    const Eigen::MatrixXd& g_;
    const Eigen::VectorXd& c_;
    double yy_;
    Eigen::VectorXd grad_;
    Eigen::VectorXd beta_;
};

template <class Engine>
double objective(const Engine& eng, const Eigen::VectorXd& beta, double lambda, const std::vector<bool>& pen)
{
    double l1 = 0.0;
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        if (pen[static_cast<std::size_t>(j)]) l1 += std::abs(beta[j]);
    }
    return eng.loss() + lambda * l1;
}

/// Cyclic coordinate descent in ascending column order with an active-set
/// inner loop. Returns the number of sweeps and whether tol was reached.
/// Inner sweeps between exact solves of the active block.
constexpr std::size_t newton_interval = 25;

template <class Engine>
std::pair<std::size_t, bool> coordinate_descent(Engine& eng, Eigen::VectorXd& beta, double lambda,
                                                const std::vector<bool>& pen, const LassoOptions& opts)
{
    const Eigen::Index p = beta.size();
    std::vector<Eigen::Index> active;
    std::size_t sweeps = 0;

    auto next_value = [&](Eigen::Index j, double grad, double d) {
        if (!(d > 0.0)) return 0.0;
        const double z = grad + d * beta[j];
        // the relative slack keeps lambda == lambda_max at exactly zero despite roundoff
        return pen[static_cast<std::size_t>(j)] ? soft_threshold(z, lambda * (1.0 + 1e-12)) / d : z / d;
    };

    auto visit = [&](Eigen::Index j) -> double {
        const double delta = next_value(j, eng.grad(j), eng.diag(j)) - beta[j];
        if (delta != 0.0) {
            beta[j] += delta;
            eng.update(j, delta);
        }
        return std::abs(delta);
    };

#ifndef NDEBUG
    double last_obj = objective(eng, beta, lambda, pen);
    auto check_descent = [&] {
        const double obj = objective(eng, beta, lambda, pen);
        assert(obj <= last_obj + 1e-9 * (1.0 + std::abs(last_obj)));
        last_obj = obj;
    };
#else
    auto check_descent = [] {};
#endif

    Eigen::MatrixXd g_aa;
    Eigen::VectorXd grad_a, diag_a, moved;

    // On an ill-conditioned active block cyclic updates crawl. With the signs
    // held fixed the subproblem is a linear system; step toward its solution
    // as far as no coefficient crosses zero, which keeps the objective falling.
    auto newton_step = [&](const Eigen::MatrixXd& g, Eigen::VectorXd& grad, Eigen::VectorXd& acc) {
        // zero penalized coefficients stay put; the rest keep their signs
        std::vector<Eigen::Index> free;
        for (Eigen::Index a = 0; a < g.rows(); ++a) {
            const auto j = active[static_cast<std::size_t>(a)];
            if (beta[j] != 0.0 || !pen[static_cast<std::size_t>(j)]) free.push_back(a);
        }
        const auto nf = static_cast<Eigen::Index>(free.size());
        if (nf == 0) return;
        Eigen::MatrixXd sub(nf, nf);
        Eigen::VectorXd target(nf);
        for (Eigen::Index u = 0; u < nf; ++u) {
            const auto a = free[static_cast<std::size_t>(u)];
            const auto j = active[static_cast<std::size_t>(a)];
            for (Eigen::Index w = 0; w < nf; ++w) sub(w, u) = g(free[static_cast<std::size_t>(w)], a);
            const double sign = beta[j] > 0.0 ? 1.0 : (beta[j] < 0.0 ? -1.0 : 0.0);
            target[u] = grad[a] - (pen[static_cast<std::size_t>(j)] ? lambda * sign : 0.0);
        }
        const Eigen::LLT<Eigen::MatrixXd> llt(sub);
        if (llt.info() != Eigen::Success) return;
        const Eigen::VectorXd step = llt.solve(target);
        if (!step.allFinite()) return;
        double t = 1.0;
        for (Eigen::Index u = 0; u < nf; ++u) {
            const auto j = active[static_cast<std::size_t>(free[static_cast<std::size_t>(u)])];
            if (!pen[static_cast<std::size_t>(j)]) continue;
            if ((beta[j] + step[u]) * beta[j] <= 0.0) t = std::min(t, -beta[j] / step[u]);
        }
        if (!(t > 0.0)) return;
        Eigen::VectorXd change = Eigen::VectorXd::Zero(g.rows());
        double l1_gain = 0.0;
        for (Eigen::Index u = 0; u < nf; ++u) {
            const auto a = free[static_cast<std::size_t>(u)];
            const auto j = active[static_cast<std::size_t>(a)];
            double next = beta[j] + t * step[u];
            if (pen[static_cast<std::size_t>(j)]) {
                if (next * beta[j] <= 0.0) next = 0.0;
                l1_gain += std::abs(next) - std::abs(beta[j]);
            }
            change[a] = next - beta[j];
        }
        // exact objective change of the quadratic; roundoff on a near-singular
        // block can make the step useless, so it must strictly help
        const Eigen::VectorXd g_change = g * change;
        if (!(-change.dot(grad) + 0.5 * change.dot(g_change) + lambda * l1_gain < 0.0)) return;
        for (Eigen::Index a = 0; a < g.rows(); ++a) beta[active[static_cast<std::size_t>(a)]] += change[a];
        acc += change;
        grad -= g_change;
    };
    while (sweeps < opts.max_sweeps) {
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) max_change = std::max(max_change, visit(j));
        ++sweeps;
        check_descent();
        if (max_change < opts.tol) return {sweeps, true};

        active.clear();
        for (Eigen::Index j = 0; j < p; ++j) {
            if (beta[j] != 0.0) active.push_back(j);
        }
        const auto na = static_cast<Eigen::Index>(active.size());
        auto load_block = [&] {
            g_aa.resize(na, na);
            grad_a.resize(na);
            diag_a.resize(na);
            moved.setZero(na);
            for (Eigen::Index a = 0; a < na; ++a) {
                const auto j = active[static_cast<std::size_t>(a)];
                const auto& col = eng.column(j);
                for (Eigen::Index b = 0; b < na; ++b) g_aa(b, a) = col[active[static_cast<std::size_t>(b)]];
                grad_a[a] = eng.grad(j);
                diag_a[a] = eng.diag(j);
            }
        };
        auto flush_block = [&] {
            for (Eigen::Index a = 0; a < na; ++a) {
                if (moved[a] != 0.0) eng.update(active[static_cast<std::size_t>(a)], moved[a]);
            }
        };

        if (Engine::cheap_update && 2 * na >= p) {
            // Mostly dense: an engine update already costs about what a block
            // update would, so skip copying the block except for exact steps.
            std::size_t inner = 0;
            while (sweeps < opts.max_sweeps) {
                if (++inner % newton_interval == 0) {
                    load_block();
                    newton_step(g_aa, grad_a, moved);
                    flush_block();
                }
                double inner_change = 0.0;
                for (auto j : active) inner_change = std::max(inner_change, visit(j));
                ++sweeps;
                if (inner_change < opts.tol) break;
            }
            check_descent();
            continue;
        }

        // The inner loop works on the active block of X'X/M, so one update
        // costs O(|active|) whatever the engine; the engine catches up after.
        load_block();
        std::size_t inner = 0;
        while (sweeps < opts.max_sweeps) {
            if (++inner % newton_interval == 0) newton_step(g_aa, grad_a, moved);
            double inner_change = 0.0;
            for (Eigen::Index a = 0; a < na; ++a) {
                const auto j = active[static_cast<std::size_t>(a)];
                const double delta = next_value(j, grad_a[a], diag_a[a]) - beta[j];
                if (delta == 0.0) continue;
                beta[j] += delta;
                moved[a] += delta;
                grad_a.noalias() -= delta * g_aa.col(a);
                inner_change = std::max(inner_change, std::abs(delta));
            }
            ++sweeps;
            if (inner_change < opts.tol) break;
        }
        flush_block();
        check_descent();
    }
    return {sweeps, false};
}

/// Warm starts along a path. Between kinks the solution is linear in lambda,
/// so the last two fits predict the next one; a coefficient that is zero or
/// would change sign starts at zero instead.
class PathWarmStart
{
public:
    PathWarmStart(Eigen::Index p, const std::vector<bool>& pen) : pen_(pen), last_(Eigen::VectorXd::Zero(p)) {}

    Eigen::VectorXd next(double lambda) const
    {
        if (count_ < 2) return last_;
        const double t = (lambda - last_lambda_) / (last_lambda_ - prev_lambda_);
        Eigen::VectorXd out = last_ + t * (last_ - prev_);
        for (Eigen::Index j = 0; j < out.size(); ++j) {
            if (!pen_[static_cast<std::size_t>(j)]) continue;
            if (last_[j] == 0.0 || out[j] * last_[j] <= 0.0) out[j] = 0.0;
        }
        return out;
    }

    void record(const Eigen::VectorXd& beta, double lambda)
    {
        prev_ = last_;
        prev_lambda_ = last_lambda_;
        last_ = beta;
        last_lambda_ = lambda;
        ++count_;
    }

private:
    const std::vector<bool>& pen_;
    Eigen::VectorXd last_, prev_;
    double last_lambda_ = 0.0, prev_lambda_ = 0.0;
    std::size_t count_ = 0;
};

inline void check_finite(const Eigen::MatrixXd& x, const Eigen::VectorXd& y)
{
    if (!x.allFinite() || !y.allFinite()) throw Error(ErrorCode::NonFinite, "design or response has non-finite entries");
}

/// X'X/M makes a full sweep O(P) instead of O(MP); past 2048 columns it costs too much memory.
inline bool prefer_gram(Eigen::Index, Eigen::Index p) { return p <= 2048; }

} // namespace detail

/// Sufficient statistics of a design: G = X'X/M, c = X'y/M, yy = y'y/M.
struct GramStats
{
    Eigen::MatrixXd gram;
    Eigen::VectorXd xty;
    double yy = 0.0;
    double m = 0.0;

    static GramStats from(const Eigen::MatrixXd& x, const Eigen::VectorXd& y)
    {
        GramStats s;
        s.m = static_cast<double>(x.rows());
        s.gram.setZero(x.cols(), x.cols());
        s.gram.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), 1.0 / s.m);
        s.gram.triangularView<Eigen::StrictlyUpper>() = s.gram.transpose();
        s.xty = x.transpose() * y / s.m;
        s.yy = y.squaredNorm() / s.m;
        return s;
    }
};

/// LASSO by coordinate descent. `penalized[j] == false` leaves column j
/// unpenalized. `warm_start` seeds the coefficients; a path shares `cache`
/// across its fits.
inline LassoFit fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                    const std::vector<bool>& penalized, const LassoOptions& opts = {},
                    const Eigen::VectorXd* warm_start = nullptr, detail::ColumnCache* cache = nullptr)
{
    if (!(lambda >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda must be >= 0");
    if (x.rows() < 1) throw Error(ErrorCode::TooFewRows, "LASSO needs at least one row");
    if (penalized.size() != static_cast<std::size_t>(x.cols())) {
        throw Error(ErrorCode::InvalidConfig, "penalized mask length differs from column count");
    }
    detail::check_finite(x, y);
    LassoFit out;
    out.lambda = lambda;
    out.penalized = penalized;
    out.beta = warm_start ? *warm_start : Eigen::VectorXd::Zero(x.cols());
    std::optional<detail::ColumnCache> own;
    if (!cache) cache = &own.emplace(x);
    detail::ResidualEngine eng(x, y, out.beta, *cache);
    std::tie(out.n_iter, out.converged) = detail::coordinate_descent(eng, out.beta, lambda, penalized, opts);
    return out;
}

inline LassoFit fit(const GramStats& stats, double lambda, const std::vector<bool>& penalized,
                    const LassoOptions& opts = {}, const Eigen::VectorXd* warm_start = nullptr)
{
    if (!(lambda >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda must be >= 0");
    LassoFit out;
    out.lambda = lambda;
    out.penalized = penalized;
    out.beta = warm_start ? *warm_start : Eigen::VectorXd::Zero(stats.gram.cols());
    detail::GramEngine eng(stats.gram, stats.xty, stats.yy, out.beta);
    std::tie(out.n_iter, out.converged) = detail::coordinate_descent(eng, out.beta, lambda, penalized, opts);
    return out;
}

inline LassoFit fit(const DesignMatrix& d, double lambda, const LassoOptions& opts = {})
{
    return fit(d.x, d.y, lambda, d.penalized_mask(), opts);
}

/// Largest KKT violation of `beta` at `lambda`.
inline double kkt_residual(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                           double lambda, const std::vector<bool>& penalized)
{
    const Eigen::VectorXd g = x.transpose() * (y - x * beta) / static_cast<double>(x.rows());
    double worst = 0.0;
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        double v = 0.0;
        if (!penalized[static_cast<std::size_t>(j)]) v = std::abs(g[j]);
        else if (beta[j] == 0.0) v = std::max(0.0, std::abs(g[j]) - lambda);
        else v = std::abs(g[j] - lambda * (beta[j] > 0 ? 1.0 : -1.0));
        worst = std::max(worst, v);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Regularization path
// ---------------------------------------------------------------------------

constexpr std::size_t default_path_length = 100;
constexpr double default_path_ratio = 1e-4;
/// Used instead when there are fewer rows than columns: deeper lambdas only
/// interpolate the data and coordinate descent crawls there.
constexpr double wide_path_ratio = 1e-2;
/// A path stops early once the fit explains this share of the null deviance,
/// or once one step gains less than `path_min_gain` of it.
constexpr double path_max_explained = 0.999;
constexpr double path_min_gain = 1e-5;

inline double default_ratio(Eigen::Index m, Eigen::Index p) { return m < p ? wide_path_ratio : default_path_ratio; }

namespace detail {

/// Gradient at the solution with every penalized coefficient at zero.
inline Eigen::VectorXd null_model_gradient(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                           const std::vector<bool>& pen, const LassoOptions& opts)
{
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
    bool any_free = false;
    for (bool p : pen) any_free |= !p;
    if (any_free) {
        // only unpenalized columns move: a huge penalty pins the rest
        ColumnCache cache(x);
        ResidualEngine eng(x, y, beta, cache);
        coordinate_descent(eng, beta, std::numeric_limits<double>::max(), pen, opts);
    }
    return x.transpose() * (y - x * beta) / static_cast<double>(x.rows());
}

inline std::vector<double> log_grid(double lambda_max, std::size_t length, double ratio)
{
    lambda_max = std::max(lambda_max, 1e-12);
    std::vector<double> grid(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double t = length == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(length - 1);
        grid[i] = lambda_max * std::pow(ratio, t);
    }
    return grid;
}

} // namespace detail

/// max_j |(1/M) X_j'(y - X b0)| over penalized j, where b0 fits only the
/// unpenalized columns: the smallest lambda with all penalized b_j = 0.
inline double lambda_max(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<bool>& pen,
                         const LassoOptions& opts = {})
{
    const auto g = detail::null_model_gradient(x, y, pen, opts);
    double best = 0.0;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        if (pen[static_cast<std::size_t>(j)]) best = std::max(best, std::abs(g[j]));
    }
    return best;
}

/// 100 log-spaced values from lambda_max down to lambda_max * 1e-4
/// (1e-2 when M < P).
inline std::vector<double> lambda_path(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       const std::vector<bool>& pen, std::size_t length = default_path_length,
                                       std::optional<double> ratio = std::nullopt)
{
    if (x.rows() < 1 || x.cols() < 1) throw Error(ErrorCode::TooFewRows, "empty design");
    return detail::log_grid(lambda_max(x, y, pen), length, ratio.value_or(default_ratio(x.rows(), x.cols())));
}

inline std::vector<double> lambda_path(const DesignMatrix& d)
{
    return lambda_path(d.x, d.y, d.penalized_mask());
}

/// Warm-started fits along a descending grid. With `early_stop` the path
/// ends once the deviance is saturated (see path_max_explained), so the
/// result may be shorter than the grid.
inline std::vector<LassoFit> fit_path(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                      const std::vector<double>& grid, const std::vector<bool>& pen,
                                      const LassoOptions& opts = {}, bool early_stop = false,
                                      const GramStats* shared = nullptr)
{
    std::vector<LassoFit> fits;
    fits.reserve(grid.size());
    const bool gram = detail::prefer_gram(x.rows(), x.cols());
    std::optional<GramStats> own;
    const GramStats* stats = shared;
    if (gram && !stats) stats = &own.emplace(GramStats::from(x, y));
    detail::ColumnCache cache(x);
    auto rss = [&](const Eigen::VectorXd& b) {
        if (!gram) return (y - x * b).squaredNorm();
        // ||y - Xb||^2 from the sufficient statistics
        return stats->m * (stats->yy - 2.0 * stats->xty.dot(b) + b.dot(stats->gram * b));
    };
    // At or above this path's own lambda_max the exact solution is the null
    // model. Running the solver there lets roundoff in the unpenalized block
    // push a penalized coefficient a few ulps off zero.
    const double huge = std::numeric_limits<double>::max();
    const LassoFit null_fit = gram ? fit(*stats, huge, pen, opts) : fit(x, y, huge, pen, opts, nullptr, &cache);
    const Eigen::VectorXd null_grad = gram ? Eigen::VectorXd(stats->xty - stats->gram * null_fit.beta)
                                           : Eigen::VectorXd(x.transpose() * (y - x * null_fit.beta) / static_cast<double>(x.rows()));
    double null_lambda = 0.0;
    for (Eigen::Index j = 0; j < null_grad.size(); ++j) {
        if (pen[static_cast<std::size_t>(j)]) null_lambda = std::max(null_lambda, std::abs(null_grad[j]));
    }
    double null_rss = 0.0, last_rss = 0.0;
    detail::PathWarmStart warm(x.cols(), pen);
    for (double lambda : grid) {
        const Eigen::VectorXd start = warm.next(lambda);
        if (lambda >= null_lambda * (1.0 - 1e-9)) {
            fits.push_back(null_fit);
            fits.back().lambda = lambda;
        } else {
            fits.push_back(gram ? fit(*stats, lambda, pen, opts, &start)
                                : fit(x, y, lambda, pen, opts, &start, &cache));
        }
        warm.record(fits.back().beta, lambda);
        if (!early_stop) continue;
        const double r = rss(fits.back().beta);
        if (fits.size() == 1) {
            null_rss = r;
        } else if (null_rss > 0.0 &&
                   (1.0 - r / null_rss >= path_max_explained || (last_rss - r) / null_rss < path_min_gain)) {
            break;
        }
        last_rss = r;
    }
    return fits;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Fold of each row, keyed on a stable row id so reordering rows does not
/// change the split. Folds are balanced to within one row.
inline std::vector<std::size_t> assign_folds(const std::vector<std::uint64_t>& row_ids, std::size_t folds,
                                             std::uint64_t seed)
{
    const CounterRng rng(seed, Stream::Fold);
    std::vector<std::size_t> order(row_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto ha = rng.bits(row_ids[a]);
        const auto hb = rng.bits(row_ids[b]);
        return ha != hb ? ha < hb : row_ids[a] < row_ids[b];
    });
    std::vector<std::size_t> fold(row_ids.size());
    for (std::size_t r = 0; r < order.size(); ++r) fold[order[r]] = r % folds;
    return fold;
}

inline CvReport cross_validate(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<bool>& pen,
                               std::size_t folds = 20, std::uint64_t seed = 0, const LassoOptions& opts = {},
                               std::vector<std::uint64_t> row_ids = {}, std::vector<LassoFit>* full_fits = nullptr)
{
    const auto m = static_cast<std::size_t>(x.rows());
    if (folds < 2) throw Error(ErrorCode::InvalidConfig, "cross-validation needs at least 2 folds");
    if (m < folds) {
        throw Error(ErrorCode::TooFewRows,
                    std::to_string(m) + " rows cannot be split into " + std::to_string(folds) + " folds");
    }
    detail::check_finite(x, y);
    if (row_ids.empty()) {
        row_ids.resize(m);
        std::iota(row_ids.begin(), row_ids.end(), 0);
    }
    if (row_ids.size() != m) throw Error(ErrorCode::InvalidConfig, "row id count differs from row count");

    CvReport rep;
    const Eigen::Index p = x.cols();
    const bool gram = detail::prefer_gram(static_cast<Eigen::Index>(m), p);
    std::optional<GramStats> full;
    if (gram) full = GramStats::from(x, y);

    rep.lambda_grid = lambda_path(x, y, pen);
    auto path = fit_path(x, y, rep.lambda_grid, pen, opts, true, full ? &*full : nullptr);
    rep.lambda_grid.resize(path.size());
    const std::size_t n_lambda = rep.lambda_grid.size();
    const auto fold_of = assign_folds(row_ids, folds, seed);

    std::vector<std::vector<Eigen::Index>> members(folds);
    for (std::size_t r = 0; r < m; ++r) members[fold_of[r]].push_back(static_cast<Eigen::Index>(r));

    // fold_err[f][l]: held-out mean squared error
    std::vector<std::vector<double>> fold_err(folds, std::vector<double>(n_lambda, 0.0));
    parallel_for(folds, [&](std::size_t f) {
        const auto& test = members[f];
        Eigen::MatrixXd x_test(static_cast<Eigen::Index>(test.size()), p);
        Eigen::VectorXd y_test(static_cast<Eigen::Index>(test.size()));
        for (std::size_t i = 0; i < test.size(); ++i) {
            x_test.row(static_cast<Eigen::Index>(i)) = x.row(test[i]);
            y_test[static_cast<Eigen::Index>(i)] = y[test[i]];
        }

        std::optional<GramStats> train_stats;
        Eigen::MatrixXd x_train;
        Eigen::VectorXd y_train;
        if (gram) {
            const double m_test = static_cast<double>(test.size());
            const double m_train = full->m - m_test;
            GramStats s;
            s.m = m_train;
            s.gram = full->gram * full->m;
            s.gram.selfadjointView<Eigen::Lower>().rankUpdate(x_test.transpose(), -1.0);
            s.gram.triangularView<Eigen::StrictlyUpper>() = s.gram.transpose();
            s.gram /= m_train;
            s.xty = (full->xty * full->m - x_test.transpose() * y_test) / m_train;
            s.yy = (full->yy * full->m - y_test.squaredNorm()) / m_train;
            train_stats = std::move(s);
        } else {
            const Eigen::Index n_train = static_cast<Eigen::Index>(m - test.size());
            x_train.resize(n_train, p);
            y_train.resize(n_train);
            Eigen::Index k = 0;
            for (std::size_t r = 0; r < m; ++r) {
                if (fold_of[r] == f) continue;
                x_train.row(k) = x.row(static_cast<Eigen::Index>(r));
                y_train[k] = y[static_cast<Eigen::Index>(r)];
                ++k;
            }
        }

        detail::ColumnCache cache(x_train);
        detail::PathWarmStart warm(p, pen);
        for (std::size_t l = 0; l < n_lambda; ++l) {
            const double lambda = rep.lambda_grid[l];
            const Eigen::VectorXd start = warm.next(lambda);
            auto res = gram ? fit(*train_stats, lambda, pen, opts, &start)
                            : fit(x_train, y_train, lambda, pen, opts, &start, &cache);
            warm.record(res.beta, lambda);
            Eigen::VectorXd pred = Eigen::VectorXd::Zero(y_test.size());
            for (Eigen::Index j = 0; j < p; ++j) {
                if (res.beta[j] != 0.0) pred.noalias() += res.beta[j] * x_test.col(j);
            }
            fold_err[f][l] = (y_test - pred).squaredNorm() / static_cast<double>(y_test.size());
        }
    });

    rep.mean_error.assign(n_lambda, 0.0);
    rep.std_error.assign(n_lambda, 0.0);
    const double k = static_cast<double>(folds);
    for (std::size_t l = 0; l < n_lambda; ++l) {
        double mean = 0.0;
        for (std::size_t f = 0; f < folds; ++f) mean += fold_err[f][l];
        mean /= k;
        double var = 0.0;
        for (std::size_t f = 0; f < folds; ++f) var += (fold_err[f][l] - mean) * (fold_err[f][l] - mean);
        var /= (k - 1.0);
        rep.mean_error[l] = mean;
        rep.std_error[l] = std::sqrt(var / k);
    }
    rep.index_min = static_cast<std::size_t>(
        std::min_element(rep.mean_error.begin(), rep.mean_error.end()) - rep.mean_error.begin());
    const double cutoff = rep.mean_error[rep.index_min] + rep.std_error[rep.index_min];
    rep.index_1se = rep.index_min;
    for (std::size_t l = 0; l <= rep.index_min; ++l) {
        if (rep.mean_error[l] <= cutoff) {
            rep.index_1se = l;
            break;
        }
    }
    rep.lambda_min = rep.lambda_grid[rep.index_min];
    rep.lambda_1se = rep.lambda_grid[rep.index_1se];
    if (full_fits) *full_fits = std::move(path);
    return rep;
}

inline CvReport cross_validate(const DesignMatrix& d, std::size_t folds = 20, std::uint64_t seed = 0,
                               const LassoOptions& opts = {})
{
    return cross_validate(d.x, d.y, d.penalized_mask(), folds, seed, opts);
}

// ---------------------------------------------------------------------------
// Lambda rules
// ---------------------------------------------------------------------------

struct LambdaRule
{
    enum class Kind { Min, OneSe, Fixed };
    Kind kind = Kind::Min;
    double value = 0.0;

    static LambdaRule min() { return {Kind::Min, 0.0}; }
    static LambdaRule one_se() { return {Kind::OneSe, 0.0}; }
    static LambdaRule fixed(double v) { return {Kind::Fixed, v}; }

    std::string to_string() const
    {
        switch (kind) {
            case Kind::Min: return "min";
            case Kind::OneSe: return "1se";
            case Kind::Fixed: return "fixed:" + detail::format_double(value);
        }
        return "min";
    }

    static LambdaRule parse(const std::string& s)
    {
        if (s == "min") return min();
        if (s == "1se") return one_se();
        if (s.rfind("fixed:", 0) == 0) {
            const double v = detail::parse_double(s.substr(6));
            if (!(v >= 0.0)) throw Error(ErrorCode::InvalidConfig, "fixed lambda must be >= 0");
            return fixed(v);
        }
        throw Error(ErrorCode::InvalidConfig, "unknown lambda rule '" + s + "'");
    }
};

struct RuleFit
{
    LassoFit fit;
    std::optional<CvReport> cv;
};

struct CvOptions
{
    std::size_t folds = 20;
    std::uint64_t seed = 0;
    LassoOptions lasso;
};

/// Chooses lambda by the rule (cross-validating when needed); the fit is the
/// all-rows path fit at the chosen lambda.
inline RuleFit fit_with_rule(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<bool>& pen,
                             const LambdaRule& rule, const CvOptions& cv = {})
{
    RuleFit out;
    if (rule.kind == LambdaRule::Kind::Fixed) {
        out.fit = fit(x, y, rule.value, pen, cv.lasso);
        return out;
    }
    std::vector<LassoFit> path;
    out.cv = cross_validate(x, y, pen, cv.folds, cv.seed, cv.lasso, {}, &path);
    const std::size_t idx = rule.kind == LambdaRule::Kind::Min ? out.cv->index_min : out.cv->index_1se;
    out.fit = std::move(path[idx]);
    return out;
}

inline RuleFit fit_with_rule(const DesignMatrix& d, const LambdaRule& rule, const CvOptions& cv = {})
{
    return fit_with_rule(d.x, d.y, d.penalized_mask(), rule, cv);
}

/// sqrt(v) * beta over the source columns; knockoff and dummy columns dropped.
inline std::vector<double> estimate_ame(const LassoFit& f, const Featurization& feat, std::size_t n_sources)
{
    if (static_cast<std::size_t>(f.beta.size()) < n_sources) {
        throw Error(ErrorCode::InconsistentN, "fit has fewer coefficients than sources");
    }
    std::vector<double> out(n_sources);
    const double s = feat.sqrt_v();
    for (std::size_t n = 0; n < n_sources; ++n) out[n] = s * f.beta[static_cast<Eigen::Index>(n)];
    return out;
}

/// Raw coefficients split by column block, for reporting.
inline EstimationResult estimation_result(const LassoFit& f, const DesignMatrix& d, const Featurization& feat)
{
    EstimationResult r;
    auto block = [&](std::size_t from, std::size_t count) {
        std::vector<double> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = f.beta[static_cast<Eigen::Index>(from + i)];
        return out;
    };
    r.coefficients = block(0, d.n_sources);
    if (d.knockoff_cols) r.knockoff_coefficients = block(d.knockoff_offset(), d.knockoff_cols);
    r.dummy_coefficients = block(d.dummy_offset(), d.dummy_cols);
    r.v = feat.v;
    r.lambda = f.lambda;
    r.featurization = feat.scheme;
    return r;
}

} // namespace ame
