#pragma once

#include <ame/core.hpp>
#include <ame/detail/parallel.hpp>
#include <ame/rng.hpp>
#include <ame/sampling.hpp>
#include <ame/serialize.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ame {

struct Query
{
    std::string id = "default";
    std::vector<double> input;
    int label = 0;
};

/// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(const std::string& s) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Black-box utility U(S) = Q(M_S) in [0,1].
/// Implementations must be safe to call concurrently.
class UtilityOracle
{
public:
    virtual ~UtilityOracle() = default;

    virtual std::size_t n_sources() const = 0;
    virtual double evaluate(const SubsetMask& mask, const Query& query, std::uint64_t seed) const = 0;
    virtual bool is_monotone() const { return false; }
    /// Identifies the utility for cache keys; two oracles with the same
    /// fingerprint must agree on every input.
    virtual std::string fingerprint() const = 0;

    double operator()(const SubsetMask& mask) const { return evaluate(mask, Query{}, 0); }

protected:
    void check_length(const SubsetMask& mask) const
    {
        if (mask.size() != n_sources()) {
            throw Error(ErrorCode::InconsistentN, "mask length " + std::to_string(mask.size()) +
                                                      " != oracle N " + std::to_string(n_sources()));
        }
    }
};

// ---------------------------------------------------------------------------
// Synthetic games
// ---------------------------------------------------------------------------

/// U(S) = 1 iff at least `threshold` of the first k sources are in S.
class ThresholdGame final : public UtilityOracle
{
public:
    ThresholdGame(std::size_t n_sources, std::size_t k, std::size_t threshold = 2)
        : n_(n_sources), k_(k), threshold_(threshold)
    {
        if (k > n_sources) throw Error(ErrorCode::InvalidConfig, "threshold game needs k <= N");
    }

    std::size_t n_sources() const override { return n_; }
    std::size_t k() const { return k_; }
    std::size_t threshold() const { return threshold_; }
    bool is_monotone() const override { return true; }

    double evaluate(const SubsetMask& mask, const Query&, std::uint64_t) const override
    {
        check_length(mask);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < k_; ++i) hits += mask.test(i) ? 1 : 0;
        return hits >= threshold_ ? 1.0 : 0.0;
    }

    std::string fingerprint() const override
    {
        return "threshold(n=" + std::to_string(n_) + ",k=" + std::to_string(k_) + ",t=" + std::to_string(threshold_) + ")";
    }

private:
    std::size_t n_, k_, threshold_;
};

/// U(S) = |S ∩ A| / |A|.
class AdditiveGame final : public UtilityOracle
{
public:
    AdditiveGame(std::size_t n_sources, std::vector<std::size_t> members)
        : n_(n_sources), members_(SubsetMask::from_indices(n_sources, members))
    {
        if (members_.empty()) throw Error(ErrorCode::InvalidConfig, "additive game needs a non-empty set");
    }

    std::size_t n_sources() const override { return n_; }
    bool is_monotone() const override { return true; }

    double evaluate(const SubsetMask& mask, const Query&, std::uint64_t) const override
    {
        check_length(mask);
        return static_cast<double>(mask.intersection_count(members_)) / static_cast<double>(members_.count());
    }

    std::string fingerprint() const override { return "additive(n=" + std::to_string(n_) + ",A=" + members_.to_hex() + ")"; }

private:
    std::size_t n_;
    SubsetMask members_;
};

/// U(S) = min(1, |S ∩ P| / saturation). Poison-count utility used for the
/// hierarchical scenario; additive when saturation = |P|.
class PoisonCountGame final : public UtilityOracle
{
public:
    PoisonCountGame(std::size_t n_sources, std::vector<std::size_t> poisons, double saturation)
        : n_(n_sources), poisons_(SubsetMask::from_indices(n_sources, poisons)), saturation_(saturation)
    {
        if (!(saturation > 0.0)) throw Error(ErrorCode::InvalidConfig, "saturation must be positive");
    }

    std::size_t n_sources() const override { return n_; }
    bool is_monotone() const override { return true; }
    const SubsetMask& poisons() const { return poisons_; }

    double evaluate(const SubsetMask& mask, const Query&, std::uint64_t) const override
    {
        check_length(mask);
        return std::min(1.0, static_cast<double>(mask.intersection_count(poisons_)) / saturation_);
    }

    std::string fingerprint() const override
    {
        return "poison_count(n=" + std::to_string(n_) + ",P=" + poisons_.to_hex() + ",s=" +
               detail::format_double(saturation_) + ")";
    }

private:
    std::size_t n_;
    SubsetMask poisons_;
    double saturation_;
};

/// Utility table over all 2^N subsets, indexed by the mask's low word. N <= 20.
class TableGame final : public UtilityOracle
{
public:
    TableGame(std::size_t n_sources, std::vector<double> values, std::string name = "table")
        : n_(n_sources), values_(std::move(values)), name_(std::move(name))
    {
        if (n_sources > 20) throw Error(ErrorCode::TooLarge, "table game needs N <= 20");
        if (values_.size() != (std::size_t{1} << n_sources)) {
            throw Error(ErrorCode::InvalidConfig, "table game needs 2^N values");
        }
    }

    std::size_t n_sources() const override { return n_; }

    double evaluate(const SubsetMask& mask, const Query&, std::uint64_t) const override
    {
        check_length(mask);
        return values_[n_ == 0 ? 0 : mask.words()[0]];
    }

    bool is_monotone() const override
    {
        for (std::size_t s = 0; s < values_.size(); ++s) {
            for (std::size_t i = 0; i < n_; ++i) {
                if (!(s >> i & 1U) && values_[s] > values_[s | (std::size_t{1} << i)]) return false;
            }
        }
        return true;
    }

    std::string fingerprint() const override
    {
        std::uint64_t h = splitmix64(n_);
        for (double v : values_) h = hash_combine(h, std::bit_cast<std::uint64_t>(v));
        return name_ + "(n=" + std::to_string(n_) + ",h=" + std::to_string(h) + ")";
    }

private:
    std::size_t n_;
    std::vector<double> values_;
    std::string name_;
};

/// Arbitrary bounded game: i.i.d. uniform utilities in [0,1] for every subset.
inline TableGame random_bounded_game(std::size_t n_sources, std::uint64_t seed)
{
    const CounterRng rng(seed, Stream::Game);
    std::vector<double> values(std::size_t{1} << n_sources);
    for (std::size_t s = 0; s < values.size(); ++s) values[s] = rng.uniform(s);
    return TableGame(n_sources, std::move(values), "random_bounded");
}

/// Normalized max over random weighted coverage functions: monotone with
/// U(∅) = 0 and U([N]) = 1. Only the first `n_active` sources cover anything,
/// the rest are null players.
class CoverageGame final : public UtilityOracle
{
public:
    static constexpr std::size_t n_functions = 3;

    CoverageGame(std::size_t n_sources, std::uint64_t seed, std::size_t n_active)
        : n_(n_sources), seed_(seed), n_active_(std::min(n_active, n_sources))
    {
        if (n_sources > 20) throw Error(ErrorCode::TooLarge, "random monotone games are for N <= 20");
        if (n_sources == 0 || n_active_ == 0) throw Error(ErrorCode::EmptySources, "coverage game needs sources");
        const CounterRng rng(seed, Stream::Game);
        n_elements_ = std::min<std::size_t>(64, 3 * n_active_);
        for (std::size_t f = 0; f < n_functions; ++f) {
            std::vector<double> weights(n_elements_);
            for (std::size_t e = 0; e < n_elements_; ++e) weights[e] = rng.uniform(f, e);
            std::vector<std::uint64_t> covers(n_, 0);
            for (std::size_t s = 0; s < n_active_; ++s) {
                for (std::size_t e = 0; e < n_elements_; ++e) {
                    if (rng.uniform(1000 + f * 64 + s, e) < 0.3) covers[s] |= std::uint64_t{1} << e;
                }
                // every active source covers something so it is not a null player
                if (covers[s] == 0) covers[s] = std::uint64_t{1} << (rng.bits(5000 + f, s) % n_elements_);
            }
            weights_.push_back(std::move(weights));
            covers_.push_back(std::move(covers));
        }
        total_ = raw(SubsetMask::full(n_));
    }

    std::size_t n_sources() const override { return n_; }
    bool is_monotone() const override { return true; }

    double evaluate(const SubsetMask& mask, const Query&, std::uint64_t) const override
    {
        check_length(mask);
        if (mask.empty()) return 0.0;
        return std::min(1.0, raw(mask) / total_);
    }

    std::string fingerprint() const override
    {
        return "coverage(n=" + std::to_string(n_) + ",seed=" + std::to_string(seed_) + ",active=" +
               std::to_string(n_active_) + ")";
    }

private:
    double raw(const SubsetMask& mask) const
    {
        double best = 0.0;
        for (std::size_t f = 0; f < n_functions; ++f) {
            std::uint64_t covered = 0;
            for (std::size_t s = 0; s < n_; ++s) {
                if (mask.test(s)) covered |= covers_[f][s];
            }
            double value = 0.0;
            for (std::size_t e = 0; e < n_elements_; ++e) {
                if (covered >> e & 1U) value += weights_[f][e];
            }
            best = std::max(best, value);
        }
        return best;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::size_t n_active_;
    std::size_t n_elements_ = 0;
    std::vector<std::vector<double>> weights_;
    std::vector<std::vector<std::uint64_t>> covers_;
    double total_ = 1.0;
};

inline CoverageGame random_monotone_game(std::size_t n_sources, std::uint64_t seed)
{
    return CoverageGame(n_sources, seed, n_sources);
}

/// Utility that ignores membership: pseudo-random y per (mask, query, seed).
/// Every source is neutral; used for null calibration.
class IndependentUtility final : public UtilityOracle
{
public:
    explicit IndependentUtility(std::size_t n_sources) : n_(n_sources) {}

    std::size_t n_sources() const override { return n_; }

    double evaluate(const SubsetMask& mask, const Query& query, std::uint64_t seed) const override
    {
        check_length(mask);
        return to_unit(hash_combine(hash_combine(seed, stable_hash(query.id)), mask.hash()));
    }

    std::string fingerprint() const override { return "independent(n=" + std::to_string(n_) + ")"; }

private:
    std::size_t n_;
};

/// Adds truncated Gaussian noise to another oracle's utility. The draw is
/// keyed on (mask, query, seed), so repeated evaluations agree.
class NoisyOracle final : public UtilityOracle
{
public:
    NoisyOracle(std::shared_ptr<const UtilityOracle> inner, double sigma)
        : inner_(std::move(inner)), sigma_(sigma)
    {}

    std::size_t n_sources() const override { return inner_->n_sources(); }

    double evaluate(const SubsetMask& mask, const Query& query, std::uint64_t seed) const override
    {
        const double base = inner_->evaluate(mask, query, seed);
        if (sigma_ <= 0.0) return base;
        std::mt19937_64 eng(hash_combine(hash_combine(seed, static_cast<std::uint64_t>(Stream::OracleNoise)),
                                         hash_combine(mask.hash(), stable_hash(query.id))));
        std::normal_distribution<double> normal(0.0, sigma_);
        for (int attempt = 0; attempt < 64; ++attempt) {
            const double y = base + normal(eng);
            if (y >= 0.0 && y <= 1.0) return y;
        }
        return base;
    }

    std::string fingerprint() const override
    {
        return "noisy(" + inner_->fingerprint() + ",sigma=" + detail::format_double(sigma_) + ")";
    }

private:
    std::shared_ptr<const UtilityOracle> inner_;
    double sigma_;
};

// ---------------------------------------------------------------------------
// Poisoned linear classification task
// ---------------------------------------------------------------------------

struct LogisticTrainer
{
    double l2 = 0.005;
    std::size_t epochs = 300;
    double learning_rate = 0.5;
};

struct PoisonedTaskParams
{
    std::size_t n_sources = 100;
    std::size_t n_poison = 5;
    std::size_t dim = 5;         // last coordinate is the trigger channel
    double separation = 2.5;
    double trigger = 5.0;
    LogisticTrainer trainer;
    std::uint64_t seed = 0;
};

/// Two-class points in `dim` dimensions. Clean points never touch the trigger
/// coordinate; the k poisons are class-0 points with the trigger set and the
/// label flipped to 1. Utility is the trained model's probability of the
/// poison label on the triggered query.
class PoisonedLinearTask final : public UtilityOracle
{
public:
    static constexpr int num_classes = 2;

    PoisonedLinearTask(std::vector<std::vector<double>> points, std::vector<int> labels,
                       std::vector<std::size_t> poison_indices, Query trigger_query, LogisticTrainer trainer)
        : points_(std::move(points)), labels_(std::move(labels)), poisons_(std::move(poison_indices)),
          query_(std::move(trigger_query)), trainer_(trainer)
    {
        if (points_.empty()) throw Error(ErrorCode::EmptySources, "task has no points");
        if (labels_.size() != points_.size()) throw Error(ErrorCode::InvalidConfig, "labels/points length mismatch");
        dim_ = points_.front().size();
        for (const auto& p : points_) {
            if (p.size() != dim_) throw Error(ErrorCode::InvalidConfig, "ragged point dimensions");
        }
        for (int l : labels_) {
            if (l < 0 || l >= num_classes) throw Error(ErrorCode::InvalidConfig, "label outside {0,1}");
        }
        for (auto i : poisons_) {
            if (i >= points_.size()) throw Error(ErrorCode::InvalidConfig, "poison index out of range");
        }
        if (query_.input.size() != dim_) throw Error(ErrorCode::InvalidConfig, "query dimension mismatch");
        if (query_.label < 0 || query_.label >= num_classes) throw Error(ErrorCode::InvalidConfig, "query label");
    }

    static PoisonedLinearTask generate(const PoisonedTaskParams& params)
    {
        if (params.dim < 2) throw Error(ErrorCode::InvalidConfig, "task needs dim >= 2");
        if (params.n_poison > params.n_sources) throw Error(ErrorCode::InvalidConfig, "more poisons than sources");
        std::mt19937_64 eng(hash_combine(params.seed, static_cast<std::uint64_t>(Stream::Task)));
        std::normal_distribution<double> normal(0.0, 1.0);

        std::vector<std::size_t> order(params.n_sources);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), eng);
        std::vector<std::size_t> poisons(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(params.n_poison));
        std::sort(poisons.begin(), poisons.end());
        std::vector<bool> is_poison(params.n_sources, false);
        for (auto i : poisons) is_poison[i] = true;

        const std::size_t feat = params.dim - 1;
        std::vector<std::vector<double>> points(params.n_sources, std::vector<double>(params.dim, 0.0));
        std::vector<int> labels(params.n_sources, 0);
        std::size_t clean_seen = 0;
        for (std::size_t i = 0; i < params.n_sources; ++i) {
            // clean points alternate classes; poisons are drawn from class 0
            const int cls = is_poison[i] ? 0 : static_cast<int>(clean_seen++ % 2);
            const double center = cls == 0 ? -params.separation : params.separation;
            for (std::size_t d = 0; d < feat; ++d) points[i][d] = center + normal(eng);
            if (is_poison[i]) {
                points[i][feat] = params.trigger;
                labels[i] = 1;
            } else {
                labels[i] = cls;
            }
        }
        Query q;
        q.id = "trigger";
        q.input.assign(params.dim, -params.separation);
        q.input[feat] = params.trigger;
        q.label = 1;
        return PoisonedLinearTask(std::move(points), std::move(labels), std::move(poisons), std::move(q),
                                  params.trainer);
    }

    std::size_t n_sources() const override { return points_.size(); }
    std::size_t dim() const { return dim_; }
    const std::vector<std::size_t>& poison_indices() const { return poisons_; }
    const Query& trigger_query() const { return query_; }
    const LogisticTrainer& trainer() const { return trainer_; }

    /// Weights (last entry is the bias) of the classifier trained on `mask`,
    /// or nullopt when the subset is empty or single-class.
    std::optional<std::vector<double>> train(const SubsetMask& mask) const
    {
        check_length(mask);
        const auto idx = mask.indices();
        bool has[num_classes] = {false, false};
        for (auto i : idx) has[labels_[i]] = true;
        if (!has[0] || !has[1]) return std::nullopt;

        const double inv_n = 1.0 / static_cast<double>(idx.size());
        std::vector<double> w(dim_ + 1, 0.0), grad(dim_ + 1);
        for (std::size_t epoch = 0; epoch < trainer_.epochs; ++epoch) {
            std::fill(grad.begin(), grad.end(), 0.0);
            for (auto i : idx) {
                const auto& x = points_[i];
                double z = w[dim_];
                for (std::size_t d = 0; d < dim_; ++d) z += w[d] * x[d];
                const double err = (1.0 / (1.0 + std::exp(-z)) - labels_[i]) * inv_n;
                for (std::size_t d = 0; d < dim_; ++d) grad[d] += err * x[d];
                grad[dim_] += err;
            }
            for (std::size_t d = 0; d < dim_; ++d) grad[d] += trainer_.l2 * w[d];
            for (std::size_t d = 0; d <= dim_; ++d) w[d] -= trainer_.learning_rate * grad[d];
        }
        return w;
    }

    /// Probability of the query label. Degenerate subsets give the uniform prior.
    double evaluate(const SubsetMask& mask, const Query& query, std::uint64_t) const override
    {
        const auto w = train(mask);
        if (!w) return 1.0 / num_classes;
        const auto& x = query.input.size() == dim_ ? query.input : query_.input;
        double z = (*w)[dim_];
        for (std::size_t d = 0; d < dim_; ++d) z += (*w)[d] * x[d];
        const double p1 = 1.0 / (1.0 + std::exp(-z));
        const int label = query.input.size() == dim_ ? query.label : query_.label;
        return label == 1 ? p1 : 1.0 - p1;
    }

    std::string fingerprint() const override
    {
        std::uint64_t h = splitmix64(points_.size());
        for (const auto& p : points_) {
            for (double x : p) h = hash_combine(h, std::bit_cast<std::uint64_t>(x));
        }
        for (int l : labels_) h = hash_combine(h, static_cast<std::uint64_t>(l));
        h = hash_combine(h, std::bit_cast<std::uint64_t>(trainer_.l2));
        h = hash_combine(h, trainer_.epochs);
        h = hash_combine(h, std::bit_cast<std::uint64_t>(trainer_.learning_rate));
        return "poisoned(n=" + std::to_string(points_.size()) + ",h=" + std::to_string(h) + ")";
    }

    json to_json() const
    {
        return json{{"points", points_},
                    {"labels", labels_},
                    {"poison_indices", poisons_},
                    {"trigger_query", {{"id", query_.id}, {"input", query_.input}, {"label", query_.label}}},
                    {"trainer",
                     {{"l2", trainer_.l2}, {"epochs", trainer_.epochs}, {"learning_rate", trainer_.learning_rate}}}};
    }

    static PoisonedLinearTask from_json(const json& j)
    {
        try {
            Query q;
            const auto& tq = j.at("trigger_query");
            q.id = tq.value("id", std::string("trigger"));
            q.input = tq.at("input").get<std::vector<double>>();
            q.label = tq.at("label").get<int>();
            LogisticTrainer t;
            if (j.contains("trainer")) {
                const auto& tj = j.at("trainer");
                t.l2 = tj.value("l2", t.l2);
                t.epochs = tj.value("epochs", t.epochs);
                t.learning_rate = tj.value("learning_rate", t.learning_rate);
            }
            return PoisonedLinearTask(j.at("points").get<std::vector<std::vector<double>>>(),
                                      j.at("labels").get<std::vector<int>>(),
                                      j.at("poison_indices").get<std::vector<std::size_t>>(), std::move(q), t);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::InvalidConfig, std::string("bad task fixture: ") + e.what());
        }
    }

private:
    std::vector<std::vector<double>> points_;
    std::vector<int> labels_;
    std::vector<std::size_t> poisons_;
    Query query_;
    LogisticTrainer trainer_;
    std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// Offline evaluation with an observation cache
// ---------------------------------------------------------------------------

struct CachedEvaluation
{
    std::vector<Observation> observations;
    std::size_t evaluations = 0;
};

/// Evaluates the utility on every sampled row, reusing stored (mask, query)
/// results. New results are appended to the store in input order.
inline CachedEvaluation cached_evaluate(ObservationStore& store, const UtilityOracle& oracle,
                                        std::span<const SampledRow> rows, const Query& query)
{
    if (store.header().n_sources != oracle.n_sources()) {
        throw Error(ErrorCode::StoreCorrupt, "store N differs from oracle N");
    }
    if (!store.header().oracle.empty() && store.header().oracle != oracle.fingerprint()) {
        throw Error(ErrorCode::StoreCorrupt,
                    "store was built for '" + store.header().oracle + "', not '" + oracle.fingerprint() + "'");
    }
    const std::uint64_t seed = store.header().seed;

    CachedEvaluation out;
    out.observations.resize(rows.size());
    std::vector<std::size_t> misses;
    std::map<std::uint64_t, std::size_t> first_miss;
    std::vector<std::size_t> duplicate_of(rows.size(), SIZE_MAX);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& o = out.observations[i];
        o.mask = rows[i].mask;
        o.p = rows[i].p;
        o.knockoff_mask = rows[i].knockoff_mask;
        if (auto y = store.lookup(rows[i].mask, query.id)) {
            o.y = *y;
            continue;
        }
        auto [it, inserted] = first_miss.emplace(rows[i].mask.hash(), i);
        if (!inserted && rows[it->second].mask == rows[i].mask) duplicate_of[i] = it->second;
        else misses.push_back(i);
    }

    std::vector<double> ys(misses.size());
    parallel_for(misses.size(), [&](std::size_t j) {
        const double y = oracle.evaluate(rows[misses[j]].mask, query, seed);
        if (!(y >= 0.0 && y <= 1.0)) throw Error(ErrorCode::NonFinite, "oracle returned y outside [0,1]");
        ys[j] = y;
    });
    for (std::size_t j = 0; j < misses.size(); ++j) {
        auto& o = out.observations[misses[j]];
        o.y = ys[j];
        store.append(o, query.id);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (duplicate_of[i] != SIZE_MAX) out.observations[i].y = out.observations[duplicate_of[i]].y;
    }
    out.evaluations = misses.size();
    return out;
}

/// Convenience: evaluate without persistence.
inline std::vector<Observation> evaluate_rows(const UtilityOracle& oracle, std::span<const SampledRow> rows,
                                              const Query& query, std::uint64_t seed)
{
    ObservationStore store({}, StoreHeader{oracle.n_sources(), "", "", seed, oracle.fingerprint()});
    return cached_evaluate(store, oracle, rows, query).observations;
}

} // namespace ame
