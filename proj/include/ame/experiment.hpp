#pragma once

#include <ame/config.hpp>
#include <ame/core.hpp>
#include <ame/knockoffs.hpp>
#include <ame/lasso.hpp>
#include <ame/oracle.hpp>
#include <ame/sampling.hpp>
#include <ame/serialize.hpp>
#include <ame/shapley.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace ame {

/// The oracle an experiment runs against plus whatever ground truth is known.
struct ExperimentOracle
{
    std::shared_ptr<const UtilityOracle> oracle;
    std::set<std::size_t> truth;                 // true proponents
    std::optional<std::vector<double>> true_sv;  // when known exactly
    Query query;
};

inline PoisonedTaskParams default_task_params(const OracleSpec& spec, std::uint64_t seed)
{
    PoisonedTaskParams p;
    p.n_sources = spec.n_sources;
    p.n_poison = spec.k;
    p.dim = spec.dim;
    p.seed = seed;
    return p;
}

inline ExperimentOracle make_oracle(const OracleSpec& spec, std::uint64_t seed)
{
    ExperimentOracle out;
    std::shared_ptr<const UtilityOracle> base;
    switch (spec.kind) {
        case OracleKind::Threshold: {
            base = std::make_shared<ThresholdGame>(spec.n_sources, spec.k, spec.threshold);
            for (std::size_t i = 0; i < spec.k; ++i) out.truth.insert(i);
            // symmetric players, efficiency, null players: 1/k each
            if (spec.threshold >= 1 && spec.threshold <= spec.k) {
                out.true_sv = std::vector<double>(spec.n_sources, 0.0);
                for (std::size_t i = 0; i < spec.k; ++i) (*out.true_sv)[i] = 1.0 / static_cast<double>(spec.k);
            }
            break;
        }
        case OracleKind::Monotone: {
            auto game = std::make_shared<CoverageGame>(spec.n_sources, seed, std::min(spec.k, spec.n_sources));
            out.true_sv = exact_sv(*game).values;
            for (std::size_t i = 0; i < spec.n_sources; ++i) {
                if ((*out.true_sv)[i] > 1e-12) out.truth.insert(i);
            }
            base = game;
            break;
        }
        case OracleKind::Poisoned: {
            std::shared_ptr<PoisonedLinearTask> task;
            if (!spec.task_file.empty()) {
                std::ifstream in(spec.task_file);
                if (!in) throw Error(ErrorCode::Io, "cannot read task file " + spec.task_file);
                json j;
                try {
                    in >> j;
                } catch (const json::exception& e) {
                    throw Error(ErrorCode::InvalidConfig, std::string("bad task file: ") + e.what());
                }
                task = std::make_shared<PoisonedLinearTask>(PoisonedLinearTask::from_json(j));
            } else {
                task = std::make_shared<PoisonedLinearTask>(
                    PoisonedLinearTask::generate(default_task_params(spec, seed)));
            }
            for (auto i : task->poison_indices()) out.truth.insert(i);
            out.query = task->trigger_query();
            base = task;
            break;
        }
        case OracleKind::Independent: {
            base = std::make_shared<IndependentUtility>(spec.n_sources);
            out.true_sv = std::vector<double>(spec.n_sources, 0.0);
            break;
        }
    }
    out.oracle = spec.noise_sigma > 0.0 ? std::make_shared<NoisyOracle>(base, spec.noise_sigma) : base;
    return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct TrialReport
{
    std::size_t trial = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> selected;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> l2_error;
    std::optional<bool> support_recovered;
    double lambda = 0.0;
    std::optional<double> tau;
    std::vector<double> estimates;
};

struct CurvePoint
{
    std::size_t m = 0;
    std::optional<double> mean_l2_error;
    std::optional<double> se_l2_error;
    std::optional<double> mean_precision;
    std::optional<double> mean_recall;
};

struct Aggregate
{
    std::optional<double> mean_precision, se_precision;
    std::optional<double> mean_recall, se_recall;
    std::optional<double> mean_l2_error, se_l2_error;
    std::size_t precision_count = 0;
    std::optional<double> support_recovery_rate;
};

struct RunReport
{
    json config;
    std::vector<TrialReport> trials;
    Aggregate aggregate;
    std::vector<CurvePoint> curves;
    // excluded from determinism comparisons
    std::size_t oracle_evaluations = 0;
    double elapsed_seconds = 0.0;
};

namespace detail {

inline json opt(const std::optional<double>& v)
{
    return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

inline std::optional<double> get_opt(const json& j, const char* key)
{
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}

inline std::pair<std::optional<double>, std::optional<double>> mean_se(const std::vector<double>& xs)
{
    if (xs.empty()) return {std::nullopt, std::nullopt};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

} // namespace detail

inline json report_to_json(const RunReport& r, bool include_runtime = true)
{
    json trials = json::array();
    for (const auto& t : r.trials) {
        json tj{{"trial", t.trial},
                {"seed", t.seed},
                {"selected", t.selected},
                {"precision", detail::opt(t.precision)},
                {"recall", detail::opt(t.recall)},
                {"l2_error", detail::opt(t.l2_error)},
                {"support_recovered", t.support_recovered ? json(*t.support_recovered) : json(nullptr)},
                {"lambda", t.lambda},
                {"tau", detail::opt(t.tau)},
                {"estimates", t.estimates}};
        trials.push_back(std::move(tj));
    }
    json curves = json::array();
    for (const auto& c : r.curves) {
        curves.push_back({{"m", c.m},
                          {"mean_l2_error", detail::opt(c.mean_l2_error)},
                          {"se_l2_error", detail::opt(c.se_l2_error)},
                          {"mean_precision", detail::opt(c.mean_precision)},
                          {"mean_recall", detail::opt(c.mean_recall)}});
    }
    const auto& a = r.aggregate;
    json j{{"config", r.config},
           {"trials", trials},
           {"aggregate",
            {{"mean_precision", detail::opt(a.mean_precision)},
             {"se_precision", detail::opt(a.se_precision)},
             {"precision_count", a.precision_count},
             {"mean_recall", detail::opt(a.mean_recall)},
             {"se_recall", detail::opt(a.se_recall)},
             {"mean_l2_error", detail::opt(a.mean_l2_error)},
             {"se_l2_error", detail::opt(a.se_l2_error)},
             {"support_recovery_rate", detail::opt(a.support_recovery_rate)}}},
           {"curves", curves}};
    if (include_runtime) {
        j["runtime"] = {{"oracle_evaluations", r.oracle_evaluations}, {"elapsed_seconds", r.elapsed_seconds}};
    }
    return j;
}

inline RunReport parse_run_report(const json& j)
{
    RunReport r;
    try {
        r.config = j.at("config");
        for (const auto& tj : j.at("trials")) {
            TrialReport t;
            t.trial = tj.at("trial").get<std::size_t>();
            t.seed = tj.at("seed").get<std::uint64_t>();
            t.selected = tj.at("selected").get<std::vector<std::size_t>>();
            t.precision = detail::get_opt(tj, "precision");
            t.recall = detail::get_opt(tj, "recall");
            t.l2_error = detail::get_opt(tj, "l2_error");
            if (!tj.at("support_recovered").is_null()) t.support_recovered = tj["support_recovered"].get<bool>();
            t.lambda = tj.at("lambda").get<double>();
            t.tau = detail::get_opt(tj, "tau");
            if (!t.tau) t.tau = std::numeric_limits<double>::infinity();
            t.estimates = tj.at("estimates").get<std::vector<double>>();
            r.trials.push_back(std::move(t));
        }
        const auto& a = j.at("aggregate");
        r.aggregate.mean_precision = detail::get_opt(a, "mean_precision");
        r.aggregate.se_precision = detail::get_opt(a, "se_precision");
        r.aggregate.precision_count = a.at("precision_count").get<std::size_t>();
        r.aggregate.mean_recall = detail::get_opt(a, "mean_recall");
        r.aggregate.se_recall = detail::get_opt(a, "se_recall");
        r.aggregate.mean_l2_error = detail::get_opt(a, "mean_l2_error");
        r.aggregate.se_l2_error = detail::get_opt(a, "se_l2_error");
        r.aggregate.support_recovery_rate = detail::get_opt(a, "support_recovery_rate");
        for (const auto& cj : j.at("curves")) {
            CurvePoint c;
            c.m = cj.at("m").get<std::size_t>();
            c.mean_l2_error = detail::get_opt(cj, "mean_l2_error");
            c.se_l2_error = detail::get_opt(cj, "se_l2_error");
            c.mean_precision = detail::get_opt(cj, "mean_precision");
            c.mean_recall = detail::get_opt(cj, "mean_recall");
            r.curves.push_back(c);
        }
        if (j.contains("runtime")) {
            r.oracle_evaluations = j["runtime"].value("oracle_evaluations", std::size_t{0});
            r.elapsed_seconds = j["runtime"].value("elapsed_seconds", 0.0);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::MalformedRecord, std::string("bad report: ") + e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct TrialOutcome
{
    std::vector<std::size_t> selected;
    std::vector<double> estimates;
    double lambda = 0.0;
    std::optional<double> tau;
};

/// Online phase on the first m observations: estimate (and select, in select mode).
inline TrialOutcome analyze(std::span<const Observation> observations, const ExperimentConfig& cfg,
                            const Featurization& feat, std::uint64_t fold_seed, std::size_t k_hint)
{
    TrialOutcome out;
    CvOptions cv{cfg.folds, fold_seed, {}};
    const std::size_t n = observations.front().mask.size();
    if (cfg.lambda_rule.kind != LambdaRule::Kind::Fixed && observations.size() < cfg.folds) {
        // too few rows to cross-validate: nothing can be estimated
        out.estimates.assign(n, 0.0);
        return out;
    }
    if (cfg.mode == RunMode::Select) {
        DesignOptions opts{.with_knockoffs = true, .with_dummies = true, .levels = *cfg.p_dist.levels()};
        const auto design = build_design(observations, feat, opts);
        auto sel = select_with_fdr(design, cfg.q, cfg.lambda_rule, cv);
        out.selected = sel.selection.selected;
        out.estimates = estimate_ame(sel.fit.fit, feat, n);
        out.lambda = sel.fit.fit.lambda;
        out.tau = sel.selection.tau;
    } else {
        const auto design = build_design(observations, feat);
        const auto res = fit_with_rule(design, cfg.lambda_rule, cv);
        out.estimates = estimate_ame(res.fit, feat, n);
        out.lambda = res.fit.lambda;
        // report the k largest positive estimates
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return out.estimates[a] > out.estimates[b]; });
        for (std::size_t i = 0; i < std::min(k_hint, n); ++i) {
            if (out.estimates[order[i]] > 0.0) out.selected.push_back(order[i]);
        }
        std::sort(out.selected.begin(), out.selected.end());
    }
    return out;
}

inline void score_trial(TrialReport& t, const ExperimentOracle& eo)
{
    std::size_t hits = 0;
    for (auto n : t.selected) hits += eo.truth.count(n);
    if (!t.selected.empty()) t.precision = static_cast<double>(hits) / static_cast<double>(t.selected.size());
    if (!eo.truth.empty()) t.recall = static_cast<double>(hits) / static_cast<double>(eo.truth.size());
    t.support_recovered = std::set<std::size_t>(t.selected.begin(), t.selected.end()) == eo.truth;
    if (eo.true_sv) {
        double s = 0.0;
        for (std::size_t n = 0; n < t.estimates.size(); ++n) {
            const double d = t.estimates[n] - (*eo.true_sv)[n];
            s += d * d;
        }
        t.l2_error = std::sqrt(s);
    }
}

/// Offline sampling + evaluation, then the online estimate/select phase,
/// for every trial. Deterministic given the config.
inline RunReport run_experiment(const ExperimentConfig& config)
{
    const auto cfg = validate_experiment(config);
    const auto start = std::chrono::steady_clock::now();
    const std::size_t m = cfg.resolved_m();
    const auto base = cfg.p_dist;
    const auto feat = make_featurization(base, cfg.featurization);
    const auto law = sampling_law(base, cfg.featurization);
    const bool knockoffs = cfg.mode == RunMode::Select;

    auto curve_ms = cfg.curve_ms;
    if (curve_ms.empty()) curve_ms.push_back(m);
    std::sort(curve_ms.begin(), curve_ms.end());
    curve_ms.erase(std::unique(curve_ms.begin(), curve_ms.end()), curve_ms.end());
    const std::size_t m_total = std::max(m, curve_ms.back());

    RunReport report;
    report.config = config_to_json(cfg);
    report.trials.resize(cfg.trials);
    std::vector<std::vector<TrialReport>> curve_trials(curve_ms.size(), std::vector<TrialReport>(cfg.trials));
    std::vector<std::size_t> evaluations(cfg.trials, 0);

    for (std::size_t t = 0; t < cfg.trials; ++t) {
        const std::uint64_t seed = derive_seed(*cfg.seed, t);
        const auto eo = make_oracle(cfg.oracle, seed);
        const auto rows = sample_rows(cfg.oracle.n_sources, law, m_total, seed, knockoffs);

        StoreHeader header{cfg.oracle.n_sources, to_spec_string(base), to_string(cfg.featurization), seed,
                           eo.oracle->fingerprint()};
        std::filesystem::path store_path;
        if (!cfg.store_dir.empty()) {
            std::filesystem::create_directories(cfg.store_dir);
            store_path = std::filesystem::path(cfg.store_dir) / ("trial_" + std::to_string(t) + ".jsonl");
        }
        ObservationStore store(store_path, header);
        auto evaluated = cached_evaluate(store, *eo.oracle, rows, eo.query);
        evaluations[t] = evaluated.evaluations;
        const auto& obs = evaluated.observations;

        const std::size_t k_hint = eo.truth.empty() ? cfg.oracle.k : eo.truth.size();
        auto run_at = [&](std::size_t rows_used) {
            TrialReport tr;
            tr.trial = t;
            tr.seed = seed;
            const auto res = analyze(std::span<const Observation>(obs.data(), rows_used), cfg, feat, seed, k_hint);
            tr.selected = res.selected;
            tr.estimates = res.estimates;
            tr.lambda = res.lambda;
            tr.tau = res.tau;
            score_trial(tr, eo);
            return tr;
        };
        report.trials[t] = run_at(m);
        for (std::size_t c = 0; c < curve_ms.size(); ++c) {
            curve_trials[c][t] = curve_ms[c] == m ? report.trials[t] : run_at(curve_ms[c]);
        }
    }

    auto aggregate = [](const std::vector<TrialReport>& trials) {
        Aggregate a;
        std::vector<double> prec, rec, l2;
        std::size_t recovered = 0, recovery_known = 0;
        for (const auto& t : trials) {
            if (t.precision) prec.push_back(*t.precision);
            if (t.recall) rec.push_back(*t.recall);
            if (t.l2_error) l2.push_back(*t.l2_error);
            if (t.support_recovered) {
                ++recovery_known;
                recovered += *t.support_recovered ? 1 : 0;
            }
        }
        std::tie(a.mean_precision, a.se_precision) = detail::mean_se(prec);
        std::tie(a.mean_recall, a.se_recall) = detail::mean_se(rec);
        std::tie(a.mean_l2_error, a.se_l2_error) = detail::mean_se(l2);
        a.precision_count = prec.size();
        if (recovery_known) a.support_recovery_rate = static_cast<double>(recovered) / static_cast<double>(recovery_known);
        return a;
    };
    report.aggregate = aggregate(report.trials);
    for (std::size_t c = 0; c < curve_ms.size(); ++c) {
        const auto a = aggregate(curve_trials[c]);
        report.curves.push_back({curve_ms[c], a.mean_l2_error, a.se_l2_error, a.mean_precision, a.mean_recall});
    }
    for (auto e : evaluations) report.oracle_evaluations += e;
    report.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

inline std::string csv_field(const std::optional<double>& v)
{
    if (!v) return "";
    if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
    return detail::format_double(*v);
}

/// Writes results.json, summary.csv and curves.csv into `dir`.
inline void emit_reports(const RunReport& report, const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
    auto open = [&](const char* name) {
        std::ofstream out(dir / name, std::ios::trunc);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / name).string());
        return out;
    };
    {
        auto out = open("results.json");
        out << report_to_json(report).dump(2) << '\n';
    }
    {
        auto out = open("summary.csv");
        out << "trial,precision,recall,l2_error,lambda,tau\n";
        for (const auto& t : report.trials) {
            out << t.trial << ',' << csv_field(t.precision) << ',' << csv_field(t.recall) << ','
                << csv_field(t.l2_error) << ',' << detail::format_double(t.lambda) << ',' << csv_field(t.tau)
                << '\n';
        }
    }
    {
        auto out = open("curves.csv");
        out << "m,mean_l2_error,se_l2_error,mean_precision,mean_recall\n";
        auto curves = report.curves;
        std::sort(curves.begin(), curves.end(), [](const auto& a, const auto& b) { return a.m < b.m; });
        for (const auto& c : curves) {
            out << c.m << ',' << csv_field(c.mean_l2_error) << ',' << csv_field(c.se_l2_error) << ','
                << csv_field(c.mean_precision) << ',' << csv_field(c.mean_recall) << '\n';
        }
    }
}

} // namespace ame
