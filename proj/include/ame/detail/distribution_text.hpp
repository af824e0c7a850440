#pragma once

// Spec-string parsing/printing for PDistribution. Included from core.hpp.

#include <charconv>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace ame {
namespace detail {

inline std::string format_double(double x)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s)
{
    double x = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && last[-1] == ' ') --last;
    auto res = std::from_chars(first, last, x);
    if (res.ec != std::errc() || res.ptr != last) {
        throw Error(ErrorCode::InvalidConfig, "cannot parse number '" + s + "'");
    }
    return x;
}

inline std::vector<double> parse_list(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(item));
    return out;
}

inline std::string base_spec(const BaseLaw& b)
{
    return std::visit(
        [](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, DiscreteGrid>) {
                std::string s = "grid:";
                for (std::size_t i = 0; i < x.values.size(); ++i) {
                    if (i) s += ',';
                    s += format_double(x.values[i]);
                }
                return s;
            } else if constexpr (std::is_same_v<T, TruncatedUniform>) {
                return "tu:" + format_double(x.epsilon);
            } else {
                return "beta:" + format_double(x.alpha) + "," + format_double(x.beta);
            }
        },
        b);
}

} // namespace detail

inline std::string to_spec_string(const PDistribution& dist)
{
    return std::visit(
        [](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, ReweightedW>) {
                return "w:" + detail::base_spec(x.base);
            } else {
                return detail::base_spec(BaseLaw{x});
            }
        },
        dist.kind);
}

inline PDistribution parse_distribution(const std::string& spec)
{
    if (spec.rfind("w:", 0) == 0) return PDistribution::reweighted(parse_distribution(spec.substr(2)));
    const auto colon = spec.find(':');
    if (colon == std::string::npos) {
        throw Error(ErrorCode::InvalidConfig, "distribution spec '" + spec + "' lacks a ':'");
    }
    const std::string kind = spec.substr(0, colon);
    const auto args = detail::parse_list(spec.substr(colon + 1));
    if (kind == "grid") return PDistribution::grid(args);
    if (kind == "tu") {
        if (args.size() != 1) throw Error(ErrorCode::InvalidConfig, "tu takes one argument");
        return PDistribution::truncated_uniform(args[0]);
    }
    if (kind == "beta") {
        if (args.size() != 2) throw Error(ErrorCode::InvalidConfig, "beta takes two arguments");
        return PDistribution::beta(args[0], args[1]);
    }
    throw Error(ErrorCode::InvalidConfig, "unknown distribution kind '" + kind + "'");
}

} // namespace ame
