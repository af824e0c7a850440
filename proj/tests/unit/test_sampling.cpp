#include <ame/sampling.hpp>

#include <support/generators.hpp>
#include <support/oracles.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

using namespace ame;

TEST(Normalizer, GridIsArithmeticMean)
{
    const double expected = (6.25 + 1.0 / 0.24 + 1.0 / 0.24 + 6.25) / 4.0;
    EXPECT_NEAR(normalizer(PDistribution::grid({0.2, 0.4, 0.6, 0.8})), expected, 1e-12);
    EXPECT_NEAR(expected, 5.208333, 1e-6);
}

TEST(Normalizer, ClosedFormsMatchQuadrature)
{
    for (double eps : {0.01, 0.05, 0.1, 0.3}) {
        EXPECT_NEAR(normalizer(PDistribution::truncated_uniform(eps)), oracle::v_truncated_uniform(eps), 1e-8) << eps;
    }
    for (double eps : {0.1, 0.25, 0.5, 1.0}) {
        const double v = normalizer(PDistribution::beta(1.0 + eps, 1.0 + eps));
        EXPECT_NEAR(v, 4.0 + 2.0 / eps, 1e-9);
        EXPECT_NEAR(v, oracle::v_beta(1.0 + eps, 1.0 + eps), 1e-6);
    }
    EXPECT_NEAR(normalizer(PDistribution::beta(2.0, 3.0)), oracle::v_beta(2.0, 3.0), 1e-8);
    EXPECT_EQ(normalizer(PDistribution::beta(2.0, 2.0)), 6.0);
}

TEST(Normalizer, RejectsDivergentLaws)
{
    EXPECT_THROW(normalizer(PDistribution::beta(1.0, 1.0)), Error);
    EXPECT_THROW(normalizer(PDistribution::beta(0.5, 2.0)), Error);
    EXPECT_THROW(normalizer(PDistribution::reweighted(PDistribution::truncated_uniform(0.1))), Error);
}

TEST(Featurization, InversePGridExample)
{
    const auto f = make_featurization(PDistribution::grid({0.2, 0.4, 0.6, 0.8}), FeaturizationScheme::InverseP);
    EXPECT_NEAR(f.value(true, 0.2), 2.19089, 1e-5);
}

TEST(Featurization, PFeatBetaExample)
{
    const auto f = make_featurization(PDistribution::beta(1.5, 1.5), FeaturizationScheme::PFeat);
    EXPECT_NEAR(f.v, 8.0, 1e-12);
    EXPECT_NEAR(f.value(false, 0.25), -0.70711, 1e-5);
}

TEST(Featurization, ZeroConditionalMeanSweep)
{
    for (auto scheme : {FeaturizationScheme::InverseP, FeaturizationScheme::PFeat}) {
        const Featurization f{scheme, 5.0};
        for (int i = 1; i < 1000; ++i) {
            const double p = i / 1000.0;
            const double m = p * f.value(true, p) + (1.0 - p) * f.value(false, p);
            ASSERT_NEAR(m, 0.0, 1e-12) << p;
        }
    }
}

TEST(DrawP, GridLevelsAreUniform)
{
    const auto grid = PDistribution::grid({0.2, 0.4, 0.6, 0.8});
    const auto probs = level_probabilities(grid);
    for (double p : probs) EXPECT_DOUBLE_EQ(p, 0.25);
    std::map<double, int> counts;
    const int draws = 40000;
    for (int r = 0; r < draws; ++r) ++counts[draw_p(grid, 5, r)];
    ASSERT_EQ(counts.size(), 4u);
    const double se = std::sqrt(0.25 * 0.75 / draws);
    for (auto [p, c] : counts) EXPECT_NEAR(c / double(draws), 0.25, 4 * se) << p;
}

TEST(DrawP, ReweightedGridLevels)
{
    const auto w = PDistribution::reweighted(PDistribution::grid({0.2, 0.4, 0.6, 0.8}));
    const auto probs = level_probabilities(w);
    ASSERT_EQ(probs.size(), 4u);
    const double expected[] = {0.3, 0.2, 0.2, 0.3};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(probs[i], expected[i], 1e-12);

    std::map<double, int> counts;
    const int draws = 40000;
    for (int r = 0; r < draws; ++r) ++counts[draw_p(w, 6, r)];
    int i = 0;
    for (auto [p, c] : counts) {
        const double se = std::sqrt(expected[i] * (1 - expected[i]) / draws);
        EXPECT_NEAR(c / double(draws), expected[i], 4 * se) << p;
        ++i;
    }
}

TEST(DrawP, TruncatedUniformSupportAndKs)
{
    const auto tu = PDistribution::truncated_uniform(0.05);
    const int draws = 1000000;
    std::vector<double> xs(draws);
    for (int r = 0; r < draws; ++r) xs[r] = draw_p(tu, 11, r);
    EXPECT_GE(*std::min_element(xs.begin(), xs.end()), 0.05);
    EXPECT_LE(*std::max_element(xs.begin(), xs.end()), 0.95);
    std::sort(xs.begin(), xs.end());
    double d = 0.0;
    for (int i = 0; i < draws; ++i) {
        const double cdf = (xs[i] - 0.05) / 0.9;
        d = std::max({d, std::abs(cdf - i / double(draws)), std::abs(cdf - (i + 1) / double(draws))});
    }
    // 1% critical value of the one-sample KS statistic
    EXPECT_LT(d, 1.63 / std::sqrt(double(draws)));
}

TEST(DrawP, ReweightedContinuousLawsMatchDensityMoments)
{
    // Under W the density is f(p) / (p(1-p) v), so E_W[p(1-p)] = 1 / v.
    for (const auto& base : {PDistribution::truncated_uniform(0.05), PDistribution::beta(1.5, 1.5)}) {
        const auto w = PDistribution::reweighted(base);
        const int draws = 200000;
        double s = 0.0, s2 = 0.0;
        for (int r = 0; r < draws; ++r) {
            const double p = draw_p(w, 3, r);
            ASSERT_GT(p, 0.0);
            ASSERT_LT(p, 1.0);
            s += p * (1 - p);
            s2 += p * (1 - p) * p * (1 - p);
        }
        const double mean = s / draws;
        const double se = std::sqrt((s2 / draws - mean * mean) / draws);
        EXPECT_NEAR(mean, 1.0 / normalizer(base), 4 * se) << to_spec_string(base);
    }
}

TEST(DrawP, BetaMean)
{
    const auto b = PDistribution::beta(2.0, 5.0);
    const int draws = 100000;
    double s = 0.0;
    for (int r = 0; r < draws; ++r) s += draw_p(b, 8, r);
    const double var = 2.0 * 5.0 / (49.0 * 8.0);
    EXPECT_NEAR(s / draws, 2.0 / 7.0, 4 * std::sqrt(var / draws));
}

TEST(SampleSubset, BinomialMean)
{
    const auto m = sample_subset(10000, 0.5, 42, 0);
    EXPECT_NEAR(double(m.count()), 5000.0, 3 * std::sqrt(2500.0));
}

TEST(SampleSubset, Deterministic)
{
    EXPECT_EQ(sample_subset(8, 0.5, 42, 3), sample_subset(8, 0.5, 42, 3));
    EXPECT_NE(sample_subset(64, 0.5, 42, 3), sample_subset(64, 0.5, 43, 3));
}

TEST(SampleSubset, PerSourceInclusionRate)
{
    const std::size_t n = 100000;
    std::vector<int> hits(n, 0);
    for (int r = 0; r < 100; ++r) {
        const auto m = sample_subset(n, 0.2, 9, r);
        for (auto i : m.indices()) ++hits[i];
    }
    // pooled rate over all sources and draws
    double total = 0.0;
    for (int h : hits) total += h;
    const double rate = total / (100.0 * n);
    EXPECT_NEAR(rate, 0.2, 3 * std::sqrt(0.2 * 0.8 / (100.0 * n)));
    // per-source rates: the share outside 3 sigma should be near 0.27%
    const double sigma = std::sqrt(0.2 * 0.8 / 100.0);
    int outside = 0;
    for (int h : hits) outside += std::abs(h / 100.0 - 0.2) > 3 * sigma ? 1 : 0;
    EXPECT_LT(outside / double(n), 0.01);
}

TEST(SampleRows, KnockoffMaskIndependentOfMask)
{
    const auto rows = sample_rows(50, PDistribution::grid({0.5}), 2000, 4, true);
    // agreement rate of two independent Bernoulli(1/2) masks is 1/2
    double agree = 0.0;
    for (const auto& r : rows) {
        ASSERT_TRUE(r.knockoff_mask);
        for (std::size_t n = 0; n < 50; ++n) agree += r.mask.test(n) == r.knockoff_mask->test(n) ? 1 : 0;
    }
    const double total = 2000.0 * 50.0;
    EXPECT_NEAR(agree / total, 0.5, 4 * std::sqrt(0.25 / total));
}

TEST(BuildDesign, ShapeWithKnockoffsAndDummies)
{
    const auto grid = PDistribution::grid({0.3, 0.7});
    const auto f = make_featurization(grid, FeaturizationScheme::InverseP);
    std::vector<Observation> obs{
        {SubsetMask::from_indices(2, {0}), 0.3, 0.1, SubsetMask::from_indices(2, {1})},
        {SubsetMask::from_indices(2, {}), 0.7, 0.2, SubsetMask::from_indices(2, {0, 1})},
        {SubsetMask::from_indices(2, {0, 1}), 0.3, 0.3, SubsetMask::from_indices(2, {})},
    };
    DesignOptions opts{.with_knockoffs = true, .with_dummies = true, .levels = {0.3, 0.7}};
    const auto d = build_design(obs, f, opts);
    EXPECT_EQ(d.rows(), 3u);
    EXPECT_EQ(d.cols(), 6u);
    for (Eigen::Index r = 0; r < 3; ++r) {
        EXPECT_DOUBLE_EQ(d.x.row(r).tail(2).sum(), 1.0);
        for (Eigen::Index c = 0; c < 4; ++c) {
            const double p = obs[r].p;
            const double v = d.x(r, c);
            EXPECT_TRUE(v == f.value(true, p) || v == f.value(false, p));
        }
    }
    const auto pen = d.penalized_mask();
    EXPECT_EQ(std::count(pen.begin(), pen.end(), true), 4);
}

TEST(BuildDesign, Errors)
{
    const auto f = make_featurization(PDistribution::grid({0.3, 0.7}), FeaturizationScheme::InverseP);
    std::vector<Observation> obs{{SubsetMask(2), 0.3, 0.1, std::nullopt}};
    try {
        build_design(obs, f, {.with_knockoffs = true, .with_dummies = false, .levels = {}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingKnockoffMask);
    }
    obs.push_back({SubsetMask(3), 0.3, 0.1, std::nullopt});
    try {
        build_design(obs, f);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InconsistentN);
    }
    obs.pop_back();
    obs.push_back({SubsetMask(2), 0.5, 0.1, std::nullopt});
    try {
        build_design(obs, f, {.with_knockoffs = false, .with_dummies = true, .levels = {0.3, 0.7}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InconsistentPLevel);
    }
}

namespace {

void check_moments(FeaturizationScheme scheme, const PDistribution& base)
{
    const std::size_t n = 100, m = 50000;
    const auto f = make_featurization(base, scheme);
    const auto rows = sample_rows(n, sampling_law(base, scheme), m, 21, false);
    std::vector<Observation> obs;
    for (const auto& r : rows) obs.push_back({r.mask, r.p, 0.0, std::nullopt});
    const auto d = build_design(obs, f);
    int mean_out = 0, var_out = 0, cross_out = 0;
    for (Eigen::Index c = 0; c < d.x.cols(); ++c) {
        const auto col = d.x.col(c);
        const double mean = col.mean();
        const double sq = col.squaredNorm() / m;
        const double sd = std::sqrt(sq - mean * mean);
        mean_out += std::abs(mean) > 3 * sd / std::sqrt(double(m)) ? 1 : 0;
        const double fourth = col.array().pow(4).mean();
        var_out += std::abs(sq - 1.0) > 3 * std::sqrt((fourth - sq * sq) / m) ? 1 : 0;
        if (c > 0) {
            const Eigen::ArrayXd prod = col.array() * d.x.col(c - 1).array();
            const double pm = prod.mean();
            const double psd = std::sqrt((prod.square().mean() - pm * pm) / m);
            cross_out += std::abs(pm) > 3 * psd ? 1 : 0;
        }
    }
    // 3 sigma leaves ~0.3% per column; allow a handful out of 100
    EXPECT_LE(mean_out, 4) << to_string(scheme);
    EXPECT_LE(var_out, 4) << to_string(scheme);
    EXPECT_LE(cross_out, 4) << to_string(scheme);
}

} // namespace

TEST(BuildDesign, MomentsInverseP) { check_moments(FeaturizationScheme::InverseP, PDistribution::grid({0.2, 0.4, 0.6, 0.8})); }

TEST(BuildDesign, MomentsPFeat) { check_moments(FeaturizationScheme::PFeat, PDistribution::truncated_uniform(0.05)); }

TEST(BuildDesign, Deterministic)
{
    const auto base = PDistribution::grid({0.2, 0.8});
    const auto f = make_featurization(base, FeaturizationScheme::InverseP);
    auto make = [&] {
        std::vector<Observation> obs;
        for (const auto& r : sample_rows(30, base, 100, 77, true)) obs.push_back({r.mask, r.p, 0.5, r.knockoff_mask});
        return build_design(obs, f, {.with_knockoffs = true, .with_dummies = true, .levels = {}});
    };
    EXPECT_TRUE(make().x == make().x);
}
