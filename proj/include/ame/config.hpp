#pragma once

#include <ame/core.hpp>
#include <ame/lasso.hpp>
#include <ame/serialize.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace ame {

enum class OracleKind { Threshold, Monotone, Poisoned, Independent };

inline std::string to_string(OracleKind k)
{
    switch (k) {
        case OracleKind::Threshold: return "threshold";
        case OracleKind::Monotone: return "monotone";
        case OracleKind::Poisoned: return "poisoned";
        case OracleKind::Independent: return "independent";
    }
    return "threshold";
}

inline OracleKind parse_oracle_kind(const std::string& s)
{
    if (s == "threshold") return OracleKind::Threshold;
    if (s == "monotone") return OracleKind::Monotone;
    if (s == "poisoned") return OracleKind::Poisoned;
    if (s == "independent") return OracleKind::Independent;
    throw Error(ErrorCode::InvalidConfig, "unknown oracle '" + s + "'");
}

enum class RunMode { Estimate, Select };

struct OracleSpec
{
    OracleKind kind = OracleKind::Threshold;
    std::size_t n_sources = 1000;
    std::size_t k = 3;
    std::size_t threshold = 2;
    std::string task_file;   // poisoned: fixture path; generated from task params when empty
    std::size_t dim = 5;
    double noise_sigma = 0.0;
};

struct ExperimentConfig
{
    OracleSpec oracle;
    PDistribution p_dist = PDistribution::grid({0.2, 0.4, 0.6, 0.8});
    FeaturizationScheme featurization = FeaturizationScheme::InverseP;
    std::optional<std::size_t> m;
    std::optional<double> c;   // M = ceil(c * k * log2 N) when m is absent
    LambdaRule lambda_rule = LambdaRule::one_se();
    double q = 0.1;
    std::optional<std::uint64_t> seed;
    std::size_t trials = 1;
    std::size_t folds = 20;
    RunMode mode = RunMode::Select;
    std::vector<std::size_t> curve_ms;
    std::string output;
    std::string store_dir;

    std::size_t resolved_m() const
    {
        if (m) return *m;
        if (c) {
            const double n = static_cast<double>(std::max<std::size_t>(2, oracle.n_sources));
            return static_cast<std::size_t>(std::ceil(*c * static_cast<double>(oracle.k) * std::log2(n)));
        }
        return 0;
    }
};

/// Every violated invariant, in a stable order. Empty means valid.
inline std::vector<Error> validate_experiment_issues(const ExperimentConfig& cfg)
{
    std::vector<Error> issues;
    if (cfg.oracle.n_sources == 0) issues.emplace_back(ErrorCode::EmptySources, "N must be at least 1");
    for (auto& e : distribution_issues(cfg.p_dist)) issues.push_back(e);
    if (cfg.p_dist.is_reweighted()) {
        issues.emplace_back(ErrorCode::InvalidDistribution,
                            "give the base law; p-featurization applies the reweighting itself");
    }
    if (!cfg.seed) issues.emplace_back(ErrorCode::InvalidConfig, "seed is mandatory");
    if (!cfg.m && !cfg.c) issues.emplace_back(ErrorCode::InvalidConfig, "one of m or c is required");
    if (cfg.m && *cfg.m < 1) issues.emplace_back(ErrorCode::InvalidConfig, "m must be >= 1");
    if (cfg.c && !(*cfg.c > 0.0)) issues.emplace_back(ErrorCode::InvalidConfig, "c must be > 0");
    if (cfg.trials < 1) issues.emplace_back(ErrorCode::InvalidConfig, "trials must be >= 1");
    if (cfg.folds < 2) issues.emplace_back(ErrorCode::InvalidConfig, "folds must be >= 2");
    if (!(cfg.q >= 0.0 && cfg.q <= 1.0)) issues.emplace_back(ErrorCode::InvalidConfig, "q must lie in [0, 1]");
    if (cfg.oracle.kind == OracleKind::Threshold && cfg.oracle.k > cfg.oracle.n_sources) {
        issues.emplace_back(ErrorCode::InvalidConfig, "threshold game needs k <= N");
    }
    if (cfg.oracle.kind == OracleKind::Monotone && cfg.oracle.n_sources > 16) {
        issues.emplace_back(ErrorCode::TooLarge, "random monotone games are limited to N <= 16");
    }
    if (cfg.oracle.noise_sigma < 0.0) issues.emplace_back(ErrorCode::InvalidConfig, "noise_sigma must be >= 0");
    if (cfg.mode == RunMode::Select && !cfg.p_dist.levels()) {
        issues.emplace_back(ErrorCode::InvalidDistribution,
                            "knockoff selection uses p-level dummies and needs a grid law");
    }
    if (distribution_issues(cfg.p_dist).empty() && !cfg.p_dist.is_reweighted()) {
        try {
            (void)normalizer(cfg.p_dist);
        } catch (const Error& e) {
            issues.push_back(e);
        }
    }
    for (auto m : cfg.curve_ms) {
        if (m < 1) issues.emplace_back(ErrorCode::InvalidConfig, "curve_ms entries must be >= 1");
    }
    return issues;
}

/// Returns the config when it is valid; otherwise throws InvalidConfig listing every violation.
inline ExperimentConfig validate_experiment(const ExperimentConfig& cfg)
{
    const auto issues = validate_experiment_issues(cfg);
    if (issues.empty()) return cfg;
    std::string msg;
    for (const auto& e : issues) {
        if (!msg.empty()) msg += "; ";
        msg += e.what();
    }
    throw Error(ErrorCode::InvalidConfig, msg);
}

inline json config_to_json(const ExperimentConfig& cfg)
{
    json o{{"kind", to_string(cfg.oracle.kind)},
           {"n_sources", cfg.oracle.n_sources},
           {"k", cfg.oracle.k},
           {"threshold", cfg.oracle.threshold},
           {"dim", cfg.oracle.dim},
           {"noise_sigma", cfg.oracle.noise_sigma}};
    if (!cfg.oracle.task_file.empty()) o["task_file"] = cfg.oracle.task_file;
    json j{{"oracle", o},
           {"p_spec", to_spec_string(cfg.p_dist)},
           {"featurization", to_string(cfg.featurization)},
           {"lambda_rule", cfg.lambda_rule.to_string()},
           {"q", cfg.q},
           {"trials", cfg.trials},
           {"folds", cfg.folds},
           {"mode", cfg.mode == RunMode::Select ? "select" : "estimate"},
           {"curve_ms", cfg.curve_ms}};
    if (cfg.seed) j["seed"] = *cfg.seed;
    if (cfg.m) j["m"] = *cfg.m;
    if (cfg.c) j["c"] = *cfg.c;
    if (!cfg.output.empty()) j["output"] = cfg.output;
    if (!cfg.store_dir.empty()) j["store_dir"] = cfg.store_dir;
    return j;
}

inline ExperimentConfig config_from_json(const json& j)
{
    ExperimentConfig cfg;
    try {
        if (j.contains("oracle")) {
            const auto& o = j["oracle"];
            cfg.oracle.kind = parse_oracle_kind(o.value("kind", std::string("threshold")));
            cfg.oracle.n_sources = o.value("n_sources", cfg.oracle.n_sources);
            cfg.oracle.k = o.value("k", cfg.oracle.k);
            cfg.oracle.threshold = o.value("threshold", cfg.oracle.threshold);
            cfg.oracle.task_file = o.value("task_file", std::string{});
            cfg.oracle.dim = o.value("dim", cfg.oracle.dim);
            cfg.oracle.noise_sigma = o.value("noise_sigma", 0.0);
        }
        if (j.contains("p_spec")) cfg.p_dist = parse_distribution(j["p_spec"].get<std::string>());
        if (j.contains("featurization")) cfg.featurization = parse_featurization(j["featurization"].get<std::string>());
        if (j.contains("m")) cfg.m = j["m"].get<std::size_t>();
        if (j.contains("c")) cfg.c = j["c"].get<double>();
        if (j.contains("lambda_rule")) cfg.lambda_rule = LambdaRule::parse(j["lambda_rule"].get<std::string>());
        cfg.q = j.value("q", cfg.q);
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        cfg.trials = j.value("trials", cfg.trials);
        cfg.folds = j.value("folds", cfg.folds);
        if (j.contains("mode")) {
            const auto mode = j["mode"].get<std::string>();
            if (mode == "select") cfg.mode = RunMode::Select;
            else if (mode == "estimate") cfg.mode = RunMode::Estimate;
            else throw Error(ErrorCode::InvalidConfig, "mode must be 'select' or 'estimate'");
        }
        cfg.curve_ms = j.value("curve_ms", std::vector<std::size_t>{});
        cfg.output = j.value("output", std::string{});
        cfg.store_dir = j.value("store_dir", std::string{});
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, e.what());
    }
    return cfg;
}

} // namespace ame
