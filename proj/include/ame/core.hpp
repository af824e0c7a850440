#pragma once

#include <ame/error.hpp>
#include <ame/rng.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace ame {

/// Index of a training-data source in [0, N).
struct SourceId
{
    std::size_t index = 0;

    friend auto operator<=>(const SourceId&, const SourceId&) = default;
};

// ---------------------------------------------------------------------------
// SubsetMask
// ---------------------------------------------------------------------------

/// Fixed-length bit vector with a cached popcount.
/// Bits at positions >= size() are always clear.
class SubsetMask
{
public:
    using word_type = std::uint64_t;
    static constexpr std::size_t word_bits = 64;

    SubsetMask() = default;

    explicit SubsetMask(std::size_t n_sources)
        : n_(n_sources), words_((n_sources + word_bits - 1) / word_bits, 0)
    {}

    static SubsetMask full(std::size_t n_sources)
    {
        SubsetMask m(n_sources);
        for (std::size_t i = 0; i < n_sources; ++i) m.set(i);
        return m;
    }

    static SubsetMask from_indices(std::size_t n_sources, const std::vector<std::size_t>& idx)
    {
        SubsetMask m(n_sources);
        for (auto i : idx) {
            if (i >= n_sources) {
                throw Error(ErrorCode::InconsistentN, "source index " + std::to_string(i) + " >= N");
            }
            m.set(i);
        }
        return m;
    }

    std::size_t size() const noexcept { return n_; }
    std::size_t count() const noexcept { return count_; }
    bool empty() const noexcept { return count_ == 0; }

    bool test(std::size_t i) const noexcept
    {
        return (words_[i / word_bits] >> (i % word_bits)) & 1U;
    }

    void set(std::size_t i, bool value = true) noexcept
    {
        auto& w = words_[i / word_bits];
        const word_type bit = word_type{1} << (i % word_bits);
        const bool was = (w & bit) != 0;
        if (value && !was) {
            w |= bit;
            ++count_;
        } else if (!value && was) {
            w &= ~bit;
            --count_;
        }
    }

    const std::vector<word_type>& words() const noexcept { return words_; }

    bool is_subset_of(const SubsetMask& other) const noexcept
    {
        if (other.n_ != n_) return false;
        for (std::size_t w = 0; w < words_.size(); ++w) {
            if (words_[w] & ~other.words_[w]) return false;
        }
        return true;
    }

    std::size_t intersection_count(const SubsetMask& other) const noexcept
    {
        std::size_t c = 0;
        const auto nw = std::min(words_.size(), other.words_.size());
        for (std::size_t w = 0; w < nw; ++w) c += std::popcount(words_[w] & other.words_[w]);
        return c;
    }

    std::vector<std::size_t> indices() const
    {
        std::vector<std::size_t> out;
        out.reserve(count_);
        for (std::size_t w = 0; w < words_.size(); ++w) {
            word_type bits = words_[w];
            while (bits) {
                out.push_back(w * word_bits + static_cast<std::size_t>(std::countr_zero(bits)));
                bits &= bits - 1;
            }
        }
        return out;
    }

    std::uint64_t hash() const noexcept
    {
        std::uint64_t h = splitmix64(n_);
        for (auto w : words_) h = hash_combine(h, w);
        return h;
    }

    /// Big-endian hex of the integer sum_{n in S} 2^n, zero padded to ceil(N/4) digits.
    std::string to_hex() const
    {
        static constexpr char digits[] = "0123456789abcdef";
        const std::size_t n_digits = (n_ + 3) / 4;
        std::string out(n_digits, '0');
        for (std::size_t d = 0; d < n_digits; ++d) {
            const std::size_t bit = 4 * d;
            const word_type nib = (words_[bit / word_bits] >> (bit % word_bits)) & 0xF;
            out[n_digits - 1 - d] = digits[nib];
        }
        return out;
    }

    static SubsetMask from_hex(std::size_t n_sources, const std::string& hex)
    {
        const std::size_t n_digits = (n_sources + 3) / 4;
        if (hex.size() != n_digits) {
            throw Error(ErrorCode::MalformedRecord, "mask hex has " + std::to_string(hex.size()) +
                                                        " digits, expected " + std::to_string(n_digits));
        }
        SubsetMask m(n_sources);
        for (std::size_t d = 0; d < n_digits; ++d) {
            const char c = hex[n_digits - 1 - d];
            word_type nib = 0;
            if (c >= '0' && c <= '9') nib = static_cast<word_type>(c - '0');
            else if (c >= 'a' && c <= 'f') nib = static_cast<word_type>(c - 'a' + 10);
            else if (c >= 'A' && c <= 'F') nib = static_cast<word_type>(c - 'A' + 10);
            else throw Error(ErrorCode::MalformedRecord, std::string("bad hex digit '") + c + "'");
            for (std::size_t b = 0; b < 4; ++b) {
                if (!((nib >> b) & 1U)) continue;
                const std::size_t i = 4 * d + b;
                if (i >= n_sources) throw Error(ErrorCode::MalformedRecord, "mask has bits beyond N-1");
                m.set(i);
            }
        }
        return m;
    }

    friend bool operator==(const SubsetMask& a, const SubsetMask& b) noexcept
    {
        return a.n_ == b.n_ && a.words_ == b.words_;
    }

private:
    std::size_t n_ = 0;
    std::size_t count_ = 0;
    std::vector<word_type> words_;
};

// ---------------------------------------------------------------------------
// PDistribution: the law of the per-subset inclusion probability p
// ---------------------------------------------------------------------------

struct DiscreteGrid
{
    std::vector<double> values;
    friend bool operator==(const DiscreteGrid&, const DiscreteGrid&) = default;
};

struct TruncatedUniform
{
    double epsilon = 0.05;
    friend bool operator==(const TruncatedUniform&, const TruncatedUniform&) = default;
};

struct BetaLaw
{
    double alpha = 1.0;
    double beta = 1.0;
    friend bool operator==(const BetaLaw&, const BetaLaw&) = default;
};

struct ReweightedW;

using BaseLaw = std::variant<DiscreteGrid, TruncatedUniform, BetaLaw>;

/// The base law reweighted by 1/(p(1-p)); used to draw p under p-featurization.
struct ReweightedW
{
    BaseLaw base;
    friend bool operator==(const ReweightedW&, const ReweightedW&) = default;
};

struct PDistribution
{
    std::variant<DiscreteGrid, TruncatedUniform, BetaLaw, ReweightedW> kind;

    PDistribution() : kind(TruncatedUniform{}) {}
    PDistribution(DiscreteGrid g) : kind(std::move(g)) {}
    PDistribution(TruncatedUniform t) : kind(t) {}
    PDistribution(BetaLaw b) : kind(b) {}
    PDistribution(ReweightedW w) : kind(std::move(w)) {}

    static PDistribution grid(std::vector<double> v) { return DiscreteGrid{std::move(v)}; }
    static PDistribution truncated_uniform(double eps) { return TruncatedUniform{eps}; }
    static PDistribution beta(double a, double b) { return BetaLaw{a, b}; }
    static PDistribution reweighted(const PDistribution& base);

    bool is_reweighted() const noexcept { return std::holds_alternative<ReweightedW>(kind); }

    /// The grid levels when p takes finitely many values, else nullopt.
    std::optional<std::vector<double>> levels() const
    {
        if (auto g = std::get_if<DiscreteGrid>(&kind)) return g->values;
        if (auto w = std::get_if<ReweightedW>(&kind)) {
            if (auto g = std::get_if<DiscreteGrid>(&w->base)) return g->values;
        }
        return std::nullopt;
    }

    friend bool operator==(const PDistribution&, const PDistribution&) = default;
};

inline PDistribution base_to_distribution(const BaseLaw& b)
{
    return std::visit([](const auto& x) { return PDistribution(x); }, b);
}

inline PDistribution PDistribution::reweighted(const PDistribution& base)
{
    return std::visit(
        [](const auto& x) -> PDistribution {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, ReweightedW>) {
                throw Error(ErrorCode::InvalidDistribution, "ReweightedW base must not be ReweightedW");
            } else {
                return ReweightedW{BaseLaw{x}};
            }
        },
        base.kind);
}

/// All invariant violations of a distribution; empty when valid.
inline std::vector<Error> distribution_issues(const PDistribution& dist)
{
    std::vector<Error> issues;
    auto check_base = [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, DiscreteGrid>) {
            if (x.values.empty()) {
                issues.emplace_back(ErrorCode::InvalidGrid, "grid is empty");
                return;
            }
            for (std::size_t i = 0; i < x.values.size(); ++i) {
                const double v = x.values[i];
                if (!(v > 0.0 && v < 1.0)) {
                    issues.emplace_back(ErrorCode::InvalidGrid,
                                        "grid value " + std::to_string(v) + " outside (0,1)");
                }
                if (i > 0 && !(x.values[i] > x.values[i - 1])) {
                    issues.emplace_back(ErrorCode::InvalidGrid, "grid values not strictly increasing");
                }
            }
        } else if constexpr (std::is_same_v<T, TruncatedUniform>) {
            if (!(x.epsilon > 0.0 && x.epsilon < 0.5)) {
                issues.emplace_back(ErrorCode::InvalidEpsilon,
                                    "epsilon " + std::to_string(x.epsilon) + " not in (0, 0.5)");
            }
        } else if constexpr (std::is_same_v<T, BetaLaw>) {
            if (!(x.alpha > 0.0 && x.beta > 0.0) || !std::isfinite(x.alpha) || !std::isfinite(x.beta)) {
                issues.emplace_back(ErrorCode::InvalidBetaParams, "Beta parameters must be positive");
            }
        }
    };
    std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, ReweightedW>) {
                std::visit(check_base, x.base);
            } else {
                check_base(x);
            }
        },
        dist.kind);
    return issues;
}

inline void validate(const PDistribution& dist)
{
    auto issues = distribution_issues(dist);
    if (!issues.empty()) throw issues.front();
}

/// Textual form used by the CLI and store headers:
///   grid:0.2,0.4,0.6,0.8 | tu:0.05 | beta:1.5,1.5 | w:<base>
inline std::string to_spec_string(const PDistribution& dist);
inline PDistribution parse_distribution(const std::string& spec);

// ---------------------------------------------------------------------------
// Featurization scheme, observations, results
// ---------------------------------------------------------------------------

enum class FeaturizationScheme { InverseP, PFeat };

inline std::string to_string(FeaturizationScheme s)
{
    return s == FeaturizationScheme::InverseP ? "inverse_p" : "p_feat";
}

inline FeaturizationScheme parse_featurization(const std::string& s)
{
    if (s == "inverse_p" || s == "inversep" || s == "1/p") return FeaturizationScheme::InverseP;
    if (s == "p_feat" || s == "pfeat" || s == "p") return FeaturizationScheme::PFeat;
    throw Error(ErrorCode::InvalidConfig, "unknown featurization '" + s + "'");
}

/// One (subset, p, utility) sample.
struct Observation
{
    SubsetMask mask;
    double p = 0.5;
    double y = 0.0;
    std::optional<SubsetMask> knockoff_mask;

    friend bool operator==(const Observation&, const Observation&) = default;
};

inline std::vector<Error> observation_issues(const Observation& o)
{
    std::vector<Error> issues;
    if (!(o.y >= 0.0 && o.y <= 1.0)) {
        issues.emplace_back(ErrorCode::MalformedRecord, "utility y=" + std::to_string(o.y) + " outside [0,1]");
    }
    if (!(o.p > 0.0 && o.p < 1.0)) {
        issues.emplace_back(ErrorCode::MalformedRecord, "p=" + std::to_string(o.p) + " outside (0,1)");
    }
    if (o.knockoff_mask && o.knockoff_mask->size() != o.mask.size()) {
        issues.emplace_back(ErrorCode::MalformedRecord, "knockoff mask length differs from mask length");
    }
    return issues;
}

struct EstimationResult
{
    std::vector<double> coefficients;
    std::optional<std::vector<double>> knockoff_coefficients;
    std::vector<double> dummy_coefficients;
    double v = 1.0;
    double lambda = 0.0;
    FeaturizationScheme featurization = FeaturizationScheme::InverseP;
};

} // namespace ame

#include <ame/detail/distribution_text.hpp>
