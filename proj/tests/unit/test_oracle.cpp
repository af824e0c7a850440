#include <ame/oracle.hpp>
#include <ame/sampling.hpp>

#include <support/generators.hpp>

#include <gtest/gtest.h>

#include <atomic>

using namespace ame;

TEST(ThresholdGame, Examples)
{
    ThresholdGame g(1000, 3);
    EXPECT_EQ(g(SubsetMask::from_indices(1000, {0, 1})), 1.0);
    std::vector<std::size_t> others{0};
    for (std::size_t i = 3; i < 503; ++i) others.push_back(i);
    EXPECT_EQ(g(SubsetMask::from_indices(1000, others)), 0.0);
    EXPECT_EQ(g(SubsetMask(1000)), 0.0);
    EXPECT_THROW(g(SubsetMask(999)), Error);
}

TEST(ThresholdGame, MonotoneExhaustively)
{
    for (std::size_t n = 1; n <= 12; ++n) {
        ThresholdGame g(n, std::min<std::size_t>(3, n));
        for (std::size_t s = 0; s < (std::size_t{1} << n); ++s) {
            SubsetMask m(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (s >> i & 1U) m.set(i);
            }
            const double base = g(m);
            for (std::size_t i = 0; i < n; ++i) {
                if (m.test(i)) continue;
                auto bigger = m;
                bigger.set(i);
                ASSERT_LE(base, g(bigger));
            }
        }
    }
}

TEST(Oracles, OutputsInUnitIntervalFuzzed)
{
    auto g = gen::engine(10);
    const std::size_t n = 12;
    std::vector<std::unique_ptr<UtilityOracle>> oracles;
    oracles.push_back(std::make_unique<ThresholdGame>(n, 3));
    oracles.push_back(std::make_unique<AdditiveGame>(n, std::vector<std::size_t>{1, 5}));
    oracles.push_back(std::make_unique<PoisonCountGame>(n, std::vector<std::size_t>{2, 3, 4}, 2.0));
    oracles.push_back(std::make_unique<TableGame>(random_bounded_game(n, 3)));
    oracles.push_back(std::make_unique<CoverageGame>(random_monotone_game(n, 4)));
    oracles.push_back(std::make_unique<IndependentUtility>(n));
    oracles.push_back(std::make_unique<NoisyOracle>(std::make_shared<ThresholdGame>(n, 3), 0.3));
    for (const auto& o : oracles) {
        for (int t = 0; t < 500; ++t) {
            Query q;
            q.id = "q" + std::to_string(t % 3);
            const double y = o->evaluate(gen::mask(g, n, gen::uniform(g)), q, t);
            ASSERT_GE(y, 0.0) << o->fingerprint();
            ASSERT_LE(y, 1.0) << o->fingerprint();
        }
    }
}

TEST(RandomMonotoneGame, MonotoneAndNormalized)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto game = random_monotone_game(8, seed);
        std::vector<double> table(256);
        for (std::size_t s = 0; s < 256; ++s) {
            SubsetMask m(8);
            for (std::size_t i = 0; i < 8; ++i) {
                if (s >> i & 1U) m.set(i);
            }
            table[s] = game(m);
        }
        EXPECT_EQ(table[0], 0.0);
        EXPECT_DOUBLE_EQ(table[255], 1.0);
        // all pairs S ⊂ T
        for (std::size_t s = 0; s < 256; ++s) {
            for (std::size_t t = 0; t < 256; ++t) {
                if ((s & t) == s) {
                    ASSERT_LE(table[s], table[t] + 1e-15) << s << " " << t;
                }
            }
        }
        EXPECT_TRUE(TableGame(8, table).is_monotone());
    }
}

TEST(NoisyOracle, DeterministicPerKey)
{
    NoisyOracle noisy(std::make_shared<AdditiveGame>(6, std::vector<std::size_t>{0, 1}), 0.1);
    const auto m = SubsetMask::from_indices(6, {0});
    const Query q{"a", {}, 0};
    EXPECT_EQ(noisy.evaluate(m, q, 3), noisy.evaluate(m, q, 3));
    EXPECT_NE(noisy.evaluate(m, q, 3), noisy.evaluate(m, q, 4));
    // noise is centred when far from the truncation edges
    double s = 0.0;
    for (int seed = 0; seed < 4000; ++seed) s += noisy.evaluate(m, q, seed);
    EXPECT_NEAR(s / 4000.0, 0.5, 4 * 0.1 / std::sqrt(4000.0));
}

TEST(PoisonedTask, DefaultTaskGoldenValues)
{
    const auto task = PoisonedLinearTask::generate({});
    const std::size_t n = task.n_sources();
    EXPECT_EQ(task.poison_indices().size(), 5u);
    EXPECT_GE(task(SubsetMask::full(n)), 0.9);
    SubsetMask none(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (std::find(task.poison_indices().begin(), task.poison_indices().end(), i) == task.poison_indices().end()) {
            none.set(i);
        }
    }
    EXPECT_LE(task.evaluate(none, task.trigger_query(), 0), 0.1);
    EXPECT_EQ(task(SubsetMask(n)), 0.5);
}

TEST(PoisonedTask, SingleClassSubsetIsPrior)
{
    const auto task = PoisonedLinearTask::generate({});
    // one clean point only
    std::size_t clean = 0;
    while (std::find(task.poison_indices().begin(), task.poison_indices().end(), clean) != task.poison_indices().end()) {
        ++clean;
    }
    EXPECT_EQ(task(SubsetMask::from_indices(task.n_sources(), {clean})), 0.5);
}

TEST(PoisonedTask, DeterministicTrainingAndFixtureRoundTrip)
{
    PoisonedTaskParams params;
    params.seed = 5;
    const auto a = PoisonedLinearTask::generate(params);
    const auto b = PoisonedLinearTask::generate(params);
    auto g = gen::engine(11);
    const auto back = PoisonedLinearTask::from_json(a.to_json());
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    EXPECT_EQ(a.fingerprint(), back.fingerprint());
    for (int t = 0; t < 10; ++t) {
        const auto m = gen::mask(g, a.n_sources());
        EXPECT_EQ(a.evaluate(m, a.trigger_query(), 0), b.evaluate(m, b.trigger_query(), 0));
        EXPECT_EQ(a.evaluate(m, a.trigger_query(), 0), back.evaluate(m, back.trigger_query(), 0));
    }
}

namespace {

class CountingOracle final : public UtilityOracle
{
public:
    explicit CountingOracle(std::size_t n) : inner_(n, std::min<std::size_t>(3, n)) {}
    std::size_t n_sources() const override { return inner_.n_sources(); }
    double evaluate(const SubsetMask& m, const Query& q, std::uint64_t s) const override
    {
        ++calls;
        return inner_.evaluate(m, q, s);
    }
    std::string fingerprint() const override { return "counting:" + inner_.fingerprint(); }
    mutable std::atomic<int> calls{0};

private:
    ThresholdGame inner_;
};

std::vector<SampledRow> rows_for(std::size_t n, std::size_t count, std::uint64_t seed)
{
    return sample_rows(n, PDistribution::grid({0.2, 0.5, 0.8}), count, seed, false);
}

} // namespace

TEST(CachedEvaluate, SecondCallIsFree)
{
    CountingOracle oracle(20);
    ObservationStore store({}, StoreHeader{20, "grid", "inverse_p", 1, oracle.fingerprint()});
    const auto rows = rows_for(20, 50, 1);
    const Query q{"q", {}, 0};
    const auto first = cached_evaluate(store, oracle, rows, q);
    const int after_first = oracle.calls;
    const auto second = cached_evaluate(store, oracle, rows, q);
    EXPECT_EQ(second.evaluations, 0u);
    EXPECT_EQ(oracle.calls, after_first);
    ASSERT_EQ(first.observations.size(), second.observations.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(first.observations[i].mask, rows[i].mask);
        EXPECT_EQ(first.observations[i].y, second.observations[i].y);
    }
}

TEST(CachedEvaluate, DisjointListsAndQueryKey)
{
    CountingOracle oracle(40);
    ObservationStore store({}, StoreHeader{40, "grid", "inverse_p", 1, oracle.fingerprint()});
    const Query q{"q", {}, 0};
    const auto a = rows_for(40, 30, 1);
    const auto b = rows_for(40, 25, 2);
    cached_evaluate(store, oracle, a, q);
    EXPECT_EQ(cached_evaluate(store, oracle, b, q).evaluations, 25u);
    EXPECT_EQ(cached_evaluate(store, oracle, a, Query{"other", {}, 0}).evaluations, 30u);
}

TEST(CachedEvaluate, DuplicateMasksEvaluatedOnce)
{
    CountingOracle oracle(5);
    ObservationStore store({}, StoreHeader{5, "", "", 0, oracle.fingerprint()});
    std::vector<SampledRow> rows(4, SampledRow{SubsetMask::from_indices(5, {0, 1}), 0.5, std::nullopt});
    rows[2].mask = SubsetMask(5);
    const auto out = cached_evaluate(store, oracle, rows, Query{});
    EXPECT_EQ(out.evaluations, 2u);
    EXPECT_EQ(store.records().size(), 2u);
    EXPECT_EQ(out.observations[3].y, 1.0);
    EXPECT_EQ(out.observations[2].y, 0.0);
}

TEST(CachedEvaluate, FingerprintMismatchIsCorrupt)
{
    ThresholdGame oracle(5, 3);
    ObservationStore store({}, StoreHeader{5, "", "", 0, "something-else"});
    try {
        cached_evaluate(store, oracle, rows_for(5, 3, 0), Query{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::StoreCorrupt);
    }
}

TEST(CachedEvaluate, IdempotentAndOrderPreservingProperty)
{
    auto g = gen::engine(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = gen::index(g, 2, 30);
        ThresholdGame oracle(n, std::min<std::size_t>(3, n));
        ObservationStore store({}, StoreHeader{n, "", "", 0, oracle.fingerprint()});
        auto rows = rows_for(n, gen::index(g, 1, 60), trial);
        const auto first = cached_evaluate(store, oracle, rows, Query{});
        std::reverse(rows.begin(), rows.end());
        const auto again = cached_evaluate(store, oracle, rows, Query{});
        EXPECT_EQ(again.evaluations, 0u);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            EXPECT_EQ(again.observations[i].mask, rows[i].mask);
            EXPECT_EQ(again.observations[i].y, oracle(rows[i].mask));
        }
    }
}
