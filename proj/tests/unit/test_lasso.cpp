#include <ame/lasso.hpp>
#include <ame/oracle.hpp>
#include <ame/sampling.hpp>

#include <support/generators.hpp>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <random>

using namespace ame;

namespace {

struct Instance
{
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    Eigen::VectorXd truth;
};

Instance random_instance(std::uint64_t seed, Eigen::Index m, Eigen::Index p, Eigen::Index support, double noise)
{
    std::mt19937_64 g(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    Instance in;
    in.x.resize(m, p);
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) in.x(i, j) = z(g);
    }
    in.truth = Eigen::VectorXd::Zero(p);
    for (Eigen::Index j = 0; j < support; ++j) in.truth[j] = (j % 2 == 0 ? 1.0 : -1.0) * (1.0 + 0.5 * j);
    in.y = in.x * in.truth;
    for (Eigen::Index i = 0; i < m; ++i) in.y[i] += noise * z(g);
    return in;
}

Eigen::VectorXd normal_equations(const Eigen::MatrixXd& x, const Eigen::VectorXd& y)
{
    return (x.transpose() * x).ldlt().solve(x.transpose() * y);
}

std::vector<bool> all_penalized(Eigen::Index p) { return std::vector<bool>(static_cast<std::size_t>(p), true); }

} // namespace

TEST(LassoFit, SingleColumnSoftThreshold)
{
    const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(10, 1);
    const Eigen::VectorXd y = Eigen::VectorXd::Constant(10, 0.9);
    const auto f = fit(x, y, 0.1, {true});
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.beta[0], 0.8, 1e-12);
}

TEST(LassoFit, AboveLambdaMaxIsZero)
{
    const auto in = random_instance(1, 80, 12, 3, 0.5);
    const auto pen = all_penalized(12);
    const double lmax = (in.x.transpose() * in.y / 80.0).cwiseAbs().maxCoeff();
    EXPECT_NEAR(lambda_max(in.x, in.y, pen), lmax, 1e-12);
    for (double scale : {1.0, 1.5, 10.0}) {
        EXPECT_EQ(fit(in.x, in.y, lmax * scale, pen).beta.cwiseAbs().maxCoeff(), 0.0);
    }
    EXPECT_GT(fit(in.x, in.y, lmax * 0.99, pen).beta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LassoFit, ZeroLambdaMatchesNormalEquations)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto in = random_instance(seed, 200, 5, 5, 0.3);
        const Eigen::VectorXd ols = normal_equations(in.x, in.y);
        const auto naive = fit(in.x, in.y, 0.0, all_penalized(5));
        const auto gram = fit(GramStats::from(in.x, in.y), 0.0, all_penalized(5));
        EXPECT_LT((naive.beta - ols).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_LT((gram.beta - ols).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(LassoFit, KktHoldsOnRandomInstances)
{
    auto g = gen::engine(20);
    for (int trial = 0; trial < 40; ++trial) {
        const auto m = static_cast<Eigen::Index>(gen::index(g, 20, 150));
        const auto p = static_cast<Eigen::Index>(gen::index(g, 2, 60));
        const auto in = random_instance(trial, m, p, std::min<Eigen::Index>(p, 4), 0.5);
        std::vector<bool> pen(static_cast<std::size_t>(p), true);
        if (trial % 3 == 0) pen[0] = false;
        const double lambda = lambda_max(in.x, in.y, pen) * gen::uniform(g, 0.01, 0.9);
        const auto naive = fit(in.x, in.y, lambda, pen);
        EXPECT_LE(kkt_residual(in.x, in.y, naive.beta, lambda, pen), 1e-6) << trial;
        if (m >= p) {
            const auto gram = fit(GramStats::from(in.x, in.y), lambda, pen);
            EXPECT_LE(kkt_residual(in.x, in.y, gram.beta, lambda, pen), 1e-6) << trial;
        }
    }
}

TEST(LassoFit, UnpenalizedColumnsAreStationary)
{
    const auto in = random_instance(3, 100, 8, 2, 0.2);
    std::vector<bool> pen(8, true);
    pen[6] = pen[7] = false;
    const double lambda = lambda_max(in.x, in.y, pen) * 2.0;
    const auto f = fit(in.x, in.y, lambda, pen);
    for (int j = 0; j < 6; ++j) EXPECT_EQ(f.beta[j], 0.0);
    const Eigen::VectorXd g = in.x.transpose() * (in.y - in.x * f.beta) / 100.0;
    EXPECT_LT(std::abs(g[6]), 1e-6);
    EXPECT_LT(std::abs(g[7]), 1e-6);
}

TEST(LassoFit, RejectsNonFinite)
{
    Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 2);
    Eigen::VectorXd y = Eigen::VectorXd::Ones(4);
    y[2] = std::nan("");
    try {
        fit(x, y, 0.1, {true, true});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFinite);
    }
}

TEST(LassoFit, NonConvergenceStillReturns)
{
    const auto in = random_instance(5, 60, 30, 10, 0.1);
    LassoOptions opts;
    opts.max_sweeps = 1;
    const auto f = fit(in.x, in.y, 1e-4, all_penalized(30), opts);
    EXPECT_FALSE(f.converged);
    EXPECT_EQ(f.beta.size(), 30);
}

TEST(LambdaPath, ShapeAndFirstValue)
{
    const auto in = random_instance(6, 100, 10, 3, 0.5);
    const auto pen = all_penalized(10);
    const auto grid = lambda_path(in.x, in.y, pen);
    ASSERT_EQ(grid.size(), 100u);
    for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_LT(grid[i], grid[i - 1]);
    EXPECT_NEAR(grid.back() / grid.front(), 1e-4, 1e-12);
    EXPECT_EQ(fit(in.x, in.y, grid.front(), pen).beta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LambdaPath, FirstFitIsNullModelWithFreeColumns)
{
    // four unpenalized level indicators plus pure-noise penalized columns
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto in = random_instance(300 + seed, 180, 60, 0, 1.0);
        Eigen::MatrixXd x(180, 64);
        x.leftCols(60) = in.x;
        x.rightCols(4).setZero();
        for (Eigen::Index i = 0; i < 180; ++i) x(i, 60 + i % 4) = 1.0;
        std::vector<bool> pen(64, true);
        for (std::size_t j = 60; j < 64; ++j) pen[j] = false;
        const auto grid = lambda_path(x, in.y, pen);
        const auto path = fit_path(x, in.y, grid, pen);
        EXPECT_EQ(path.front().beta.head(60).cwiseAbs().maxCoeff(), 0.0) << seed;
        // unpenalized part is the per-level mean of y
        for (Eigen::Index l = 0; l < 4; ++l) {
            double sum = 0.0;
            for (Eigen::Index i = l; i < 180; i += 4) sum += in.y[i];
            EXPECT_NEAR(path.front().beta[60 + l], sum / 45.0, 1e-6) << seed;
        }
        EXPECT_GT(path[1].beta.head(60).cwiseAbs().maxCoeff(), 1e-6) << seed;
    }
}

TEST(LambdaPath, WarmEqualsCold)
{
    const auto in = random_instance(7, 120, 15, 4, 0.5);
    const auto pen = all_penalized(15);
    auto grid = lambda_path(in.x, in.y, pen);
    const auto path = fit_path(in.x, in.y, grid, pen);
    for (std::size_t i = 0; i < grid.size(); i += 9) {
        const auto cold = fit(in.x, in.y, grid[i], pen);
        EXPECT_LT((cold.beta - path[i].beta).cwiseAbs().maxCoeff(), 1e-6) << i;
    }
}

TEST(CrossValidate, RecoversSparseSupport)
{
    const auto in = random_instance(8, 400, 40, 4, 0.0);
    const auto pen = all_penalized(40);
    const auto rep = cross_validate(in.x, in.y, pen, 20, 3);
    const auto path = fit_path(in.x, in.y, std::vector<double>(rep.lambda_grid.begin(),
                                                               rep.lambda_grid.begin() + rep.index_min + 1), pen);
    const auto& beta = path.back().beta;
    for (Eigen::Index j = 0; j < 40; ++j) {
        if (j < 4) EXPECT_GT(std::abs(beta[j]), 0.5) << j;
        else EXPECT_LT(std::abs(beta[j]), 1e-3) << j;
    }
}

TEST(CrossValidate, OneSeNotBelowMin)
{
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const auto in = random_instance(seed, 100, 20, 3, 1.0);
        const auto rep = cross_validate(in.x, in.y, all_penalized(20), 10, seed);
        EXPECT_GE(rep.lambda_1se, rep.lambda_min);
        const auto best = *std::min_element(rep.mean_error.begin(), rep.mean_error.end());
        EXPECT_EQ(rep.mean_error[rep.index_min], best);
        EXPECT_LE(rep.mean_error[rep.index_1se], best + rep.std_error[rep.index_min]);
        for (std::size_t l = 0; l < rep.index_1se; ++l) {
            EXPECT_GT(rep.mean_error[l], best + rep.std_error[rep.index_min]);
        }
    }
}

TEST(CrossValidate, RowOrderDoesNotMatter)
{
    const auto in = random_instance(9, 90, 12, 3, 0.7);
    std::vector<std::uint64_t> ids(90);
    std::iota(ids.begin(), ids.end(), 0);
    const auto a = cross_validate(in.x, in.y, all_penalized(12), 10, 4, {}, ids);

    std::vector<Eigen::Index> perm(90);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 g(1);
    std::shuffle(perm.begin(), perm.end(), g);
    Eigen::MatrixXd xp(90, 12);
    Eigen::VectorXd yp(90);
    std::vector<std::uint64_t> idp(90);
    for (int r = 0; r < 90; ++r) {
        xp.row(r) = in.x.row(perm[r]);
        yp[r] = in.y[perm[r]];
        idp[r] = static_cast<std::uint64_t>(perm[r]);
    }
    const auto b = cross_validate(xp, yp, all_penalized(12), 10, 4, {}, idp);
    EXPECT_EQ(a.index_min, b.index_min);
    EXPECT_EQ(a.index_1se, b.index_1se);
    for (std::size_t l = 0; l < a.mean_error.size(); ++l) EXPECT_NEAR(a.mean_error[l], b.mean_error[l], 1e-9);
}

TEST(CrossValidate, GramAndResidualEnginesAgree)
{
    // 30 rows < 40 columns forces the residual engine inside each fold;
    // compare against the Gram engine on a tall version of the same problem.
    const auto in = random_instance(10, 300, 20, 3, 0.5);
    const auto rep = cross_validate(in.x, in.y, all_penalized(20), 5, 1);
    EXPECT_TRUE(detail::prefer_gram(300, 20));
    for (std::size_t l = 0; l < rep.lambda_grid.size(); l += 11) {
        const auto a = fit(in.x, in.y, rep.lambda_grid[l], all_penalized(20));
        const auto b = fit(GramStats::from(in.x, in.y), rep.lambda_grid[l], all_penalized(20));
        EXPECT_LT((a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(CrossValidate, TooFewRows)
{
    const auto in = random_instance(11, 10, 3, 1, 0.1);
    try {
        cross_validate(in.x, in.y, all_penalized(3), 20, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TooFewRows);
    }
}

TEST(CrossValidate, FoldsBalanced)
{
    std::vector<std::uint64_t> ids(103);
    std::iota(ids.begin(), ids.end(), 0);
    const auto folds = assign_folds(ids, 20, 5);
    std::vector<int> sizes(20, 0);
    for (auto f : folds) ++sizes[f];
    EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1);
}

TEST(LambdaRule, ParseAndPrint)
{
    EXPECT_EQ(LambdaRule::parse("min").to_string(), "min");
    EXPECT_EQ(LambdaRule::parse("1se").to_string(), "1se");
    EXPECT_EQ(LambdaRule::parse("fixed:0.25").to_string(), "fixed:0.25");
    EXPECT_THROW(LambdaRule::parse("fixed:-1"), Error);
    EXPECT_THROW(LambdaRule::parse("median"), Error);
}

namespace {

DesignMatrix threshold_design(std::size_t n, std::size_t m, std::uint64_t seed, const PDistribution& base,
                              FeaturizationScheme scheme, Featurization& feat)
{
    ThresholdGame game(n, 3);
    feat = make_featurization(base, scheme);
    const auto rows = sample_rows(n, sampling_law(base, scheme), m, seed, false);
    std::vector<Observation> obs;
    obs.reserve(m);
    for (const auto& r : rows) obs.push_back({r.mask, r.p, game(r.mask), std::nullopt});
    return build_design(obs, feat);
}

} // namespace

TEST(EstimateAme, NullSourceShrinksToZero)
{
    Featurization feat;
    const auto d = threshold_design(10, 20000, 12, PDistribution::grid({0.2, 0.4, 0.6, 0.8}),
                                    FeaturizationScheme::InverseP, feat);
    const auto f = fit(d.x, d.y, 0.0, d.penalized_mask());
    const auto est = estimate_ame(f, feat, 10);
    for (std::size_t n = 3; n < 10; ++n) EXPECT_LT(std::abs(est[n]), 0.02) << n;
}

TEST(EstimateAme, ThresholdGameOlsMatchesClosedForm)
{
    // For i < 3, AME_i = P(exactly one of the two other members is in S)
    // = E[2 p (1 - p)] = 0.4 on this grid; everyone else is null.
    Featurization feat;
    const auto d = threshold_design(30, 200000, 13, PDistribution::grid({0.2, 0.4, 0.6, 0.8}),
                                    FeaturizationScheme::InverseP, feat);
    const auto f = fit(GramStats::from(d.x, d.y), 0.0, d.penalized_mask());
    const auto est = estimate_ame(f, feat, 30);
    for (std::size_t n = 0; n < 30; ++n) EXPECT_NEAR(est[n], n < 3 ? 0.4 : 0.0, 0.02) << n;
}

TEST(EstimateAme, ScalesWithY)
{
    Featurization feat;
    auto d = threshold_design(6, 500, 14, PDistribution::grid({0.3, 0.7}), FeaturizationScheme::InverseP, feat);
    const auto a = estimate_ame(fit(d.x, d.y, 0.0, d.penalized_mask()), feat, 6);
    d.y *= 0.5;
    const auto b = estimate_ame(fit(d.x, d.y, 0.0, d.penalized_mask()), feat, 6);
    for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(b[n], 0.5 * a[n], 1e-9);
}
