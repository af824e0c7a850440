// Command-line front end: one subcommand per pipeline stage.
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <ame/ame.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ame;

namespace {

constexpr int exit_config = 2;
constexpr int exit_runtime = 3;

json read_json(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
    }
}

/// Writes to `path`, or stdout when the path is empty or "-".
void write_text(const std::string& path, const std::string& text)
{
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
    out << text;
}

json selection_json(const Selection& s)
{
    return json{{"selected", s.selected},
                {"tau", std::isfinite(s.tau) ? json(s.tau) : json(nullptr)},
                {"q", s.q},
                {"w", s.w}};
}

std::string cv_csv(const CvReport& cv)
{
    std::ostringstream out;
    out << "lambda,mean_err,std_err\n";
    for (std::size_t l = 0; l < cv.lambda_grid.size(); ++l) {
        out << detail::format_double(cv.lambda_grid[l]) << ',' << detail::format_double(cv.mean_error[l]) << ','
            << detail::format_double(cv.std_error[l]) << '\n';
    }
    return out.str();
}

json estimation_json(const EstimationResult& r, const std::vector<double>& ame)
{
    json j{{"coefficients", r.coefficients},
           {"dummy_coefficients", r.dummy_coefficients},
           {"v", r.v},
           {"lambda", r.lambda},
           {"featurization", to_string(r.featurization)},
           {"ame", ame}};
    if (r.knockoff_coefficients) j["knockoff_coefficients"] = *r.knockoff_coefficients;
    return j;
}

// Shared oracle flags for subcommands that evaluate utilities themselves.
struct OracleFlags
{
    std::string kind = "threshold";
    std::size_t n = 100;
    std::size_t k = 3;
    std::size_t threshold = 2;
    std::string task;
    double noise = 0.0;

    void attach(CLI::App* app)
    {
        app->add_option("--oracle", kind, "threshold | monotone | poisoned | independent")->capture_default_str();
        app->add_option("--n", n, "number of sources N")->capture_default_str();
        app->add_option("--k", k, "proponents (threshold game, poisons)")->capture_default_str();
        app->add_option("--threshold", threshold, "threshold game cutoff")->capture_default_str();
        app->add_option("--task", task, "poisoned-task fixture from gen-task");
        app->add_option("--noise", noise, "additive utility noise sigma")->capture_default_str();
    }

    OracleSpec spec() const
    {
        OracleSpec s;
        s.kind = parse_oracle_kind(kind);
        s.n_sources = n;
        s.k = k;
        s.threshold = threshold;
        s.task_file = task;
        s.noise_sigma = noise;
        if (s.kind == OracleKind::Poisoned && !task.empty()) {
            s.n_sources = PoisonedLinearTask::from_json(read_json(task)).n_sources();
        }
        return s;
    }
};

struct StoreView
{
    StoreHeader header;
    std::vector<Observation> observations;
};

StoreView open_store(const std::string& path, std::string query, std::size_t m)
{
    if (!fs::exists(path)) throw Error(ErrorCode::Io, "no store at " + path);
    StoreView v;
    v.header = ObservationStore::read_header(path);
    ObservationStore store(path, v.header);
    if (query.empty() && !store.records().empty()) query = store.records().front().query;
    v.observations = store.observations(query);
    if (m > 0 && m < v.observations.size()) v.observations.resize(m);
    if (v.observations.empty()) throw Error(ErrorCode::TooFewRows, "store holds no observations for query '" + query + "'");
    return v;
}

Featurization store_featurization(const StoreHeader& h)
{
    return make_featurization(parse_distribution(h.p_spec), parse_featurization(h.featurization));
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"AME data attribution: sample subsets, fit, select, value."};
    app.require_subcommand(1);

    // gen-task
    auto* gen_task = app.add_subcommand("gen-task", "write a poisoned-task fixture (points, labels, poisons, trigger)");
    PoisonedTaskParams task_params;
    std::string task_out = "-";
    gen_task->add_option("--n", task_params.n_sources, "training points (sources)")->capture_default_str();
    gen_task->add_option("--k", task_params.n_poison, "poisoned points")->capture_default_str();
    gen_task->add_option("--dim", task_params.dim, "input dimension")->capture_default_str();
    gen_task->add_option("--seed", task_params.seed, "task seed")->required();
    gen_task->add_option("--out", task_out, "output path, '-' for stdout")->capture_default_str();

    // sample
    auto* sample = app.add_subcommand("sample", "offline phase: draw subsets, evaluate, append to a store");
    OracleFlags sample_oracle;
    sample_oracle.attach(sample);
    std::string sample_p = "grid:0.2,0.4,0.6,0.8", sample_feat = "inverse_p", sample_store;
    std::size_t sample_m = 0;
    std::uint64_t sample_seed = 0;
    bool sample_knockoffs = false;
    sample->add_option("--p", sample_p, "base p law (grid:..., tu:eps, beta:a,b)")->capture_default_str();
    sample->add_option("--featurization", sample_feat, "inverse_p | p_feat")->capture_default_str();
    sample->add_option("--m", sample_m, "rows to draw")->required();
    sample->add_option("--seed", sample_seed, "sampling seed")->required();
    sample->add_flag("--knockoffs", sample_knockoffs, "also draw knockoff masks");
    sample->add_option("--store", sample_store, "store file (JSONL)")->required();

    // estimate
    auto* estimate = app.add_subcommand("estimate", "online phase: LASSO estimate of the AME from a store");
    std::string est_store, est_rule = "min", est_out = "-", est_cv, est_dump, est_query;
    std::size_t est_m = 0, est_folds = 20;
    estimate->add_option("--store", est_store, "store file")->required();
    estimate->add_option("--lambda-rule", est_rule, "min | 1se | fixed:<value>")->capture_default_str();
    estimate->add_option("--folds", est_folds, "CV folds")->capture_default_str();
    estimate->add_option("--m", est_m, "use only the first m rows (0 = all)");
    estimate->add_option("--query", est_query, "query id (default: the store's first)");
    estimate->add_option("--out", est_out, "JSON output, '-' for stdout")->capture_default_str();
    estimate->add_option("--cv-csv", est_cv, "write the CV curve (lambda, mean_err, std_err)");
    estimate->add_option("--dump-design", est_dump, "write the design matrix as CSV");

    // select
    auto* select = app.add_subcommand("select", "knockoff selection with FDR control from a store");
    std::string sel_store, sel_rule = "1se", sel_out = "-", sel_query, sel_dump;
    std::size_t sel_m = 0, sel_folds = 20;
    double sel_q = 0.1;
    select->add_option("--store", sel_store, "store file sampled with --knockoffs")->required();
    select->add_option("--q", sel_q, "target FDR")->capture_default_str();
    select->add_option("--lambda-rule", sel_rule, "min | 1se | fixed:<value>")->capture_default_str();
    select->add_option("--folds", sel_folds, "CV folds")->capture_default_str();
    select->add_option("--m", sel_m, "use only the first m rows (0 = all)");
    select->add_option("--query", sel_query, "query id (default: the store's first)");
    select->add_option("--out", sel_out, "JSON output, '-' for stdout")->capture_default_str();
    select->add_option("--dump-design", sel_dump, "write the design matrix as CSV");

    // sv
    auto* sv = app.add_subcommand("sv", "Shapley values: exact, permutation Monte Carlo, or via AME");
    OracleFlags sv_oracle;
    sv_oracle.attach(sv);
    std::string sv_method = "exact", sv_dist = "tu:0.05", sv_out = "-", sv_bounds, sv_rule = "min";
    std::size_t sv_m = 1000;
    std::uint64_t sv_seed = 0;
    sv->add_option("--method", sv_method, "exact | mc | ame")->capture_default_str();
    sv->add_option("--dist", sv_dist, "p law for ame (tu:eps or beta:a,b)")->capture_default_str();
    sv->add_option("--m", sv_m, "samples: permutations for mc, rows for ame")->capture_default_str();
    sv->add_option("--seed", sv_seed, "seed")->capture_default_str();
    sv->add_option("--lambda-rule", sv_rule, "lambda rule for ame")->capture_default_str();
    sv->add_option("--out", sv_out, "CSV output (source,value), '-' for stdout")->capture_default_str();
    sv->add_option("--bounds", sv_bounds, "write the AME-vs-SV bound report as JSON");

    // hier
    auto* hier = app.add_subcommand("hier", "two-level estimate-then-refine selection");
    std::string hier_tree, hier_obs, hier_out = "-", hier_rule = "1se", hier_p1 = "grid:0.3,0.5,0.7",
                                     hier_p2 = "grid:0.3,0.5,0.7", hier_save;
    std::vector<std::size_t> hier_poisons;
    std::size_t hier_m = 600, hier_folds = 20;
    std::uint64_t hier_seed = 0;
    double hier_q = 0.2;
    hier->add_option("--tree", hier_tree, "tree file {\"children\": [[...], ...]}")->required();
    hier->add_option("--q", hier_q, "target FDR at both levels")->capture_default_str();
    hier->add_option("--lambda-rule", hier_rule, "min | 1se | fixed:<value>")->capture_default_str();
    hier->add_option("--folds", hier_folds, "CV folds")->capture_default_str();
    hier->add_option("--observations", hier_obs, "JSONL of hierarchical records");
    hier->add_option("--simulate", hier_poisons, "simulate rows whose utility counts these poisoned children")
        ->delimiter(',');
    hier->add_option("--m", hier_m, "simulated rows")->capture_default_str();
    hier->add_option("--seed", hier_seed, "simulation seed")->capture_default_str();
    hier->add_option("--p1", hier_p1, "top-level p law (grid)")->capture_default_str();
    hier->add_option("--p2", hier_p2, "second-level p law")->capture_default_str();
    hier->add_option("--save-observations", hier_save, "write simulated rows as JSONL");
    hier->add_option("--out", hier_out, "JSON output, '-' for stdout")->capture_default_str();

    // experiment
    auto* experiment = app.add_subcommand("experiment", "run a full seeded experiment from a JSON config");
    std::string exp_config, exp_out, exp_store;
    std::optional<std::uint64_t> exp_seed;
    std::optional<std::size_t> exp_trials, exp_m;
    experiment->add_option("--config", exp_config, "experiment config JSON")->required();
    experiment->add_option("--out", exp_out, "output directory (overrides config.output)");
    experiment->add_option("--seed", exp_seed, "override seed");
    experiment->add_option("--trials", exp_trials, "override trial count");
    experiment->add_option("--m", exp_m, "override row count");
    experiment->add_option("--store-dir", exp_store, "persist observations per trial here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_config;
    }

    try {
        if (*gen_task) {
            write_text(task_out, PoisonedLinearTask::generate(task_params).to_json().dump(2) + "\n");
        } else if (*sample) {
            const auto spec = sample_oracle.spec();
            const auto base = parse_distribution(sample_p);
            const auto scheme = parse_featurization(sample_feat);
            (void)make_featurization(base, scheme);
            if (sample_m < 1) throw Error(ErrorCode::InvalidConfig, "--m must be >= 1");
            const auto eo = make_oracle(spec, sample_seed);
            StoreHeader header{spec.n_sources, to_spec_string(base), to_string(scheme), sample_seed,
                               eo.oracle->fingerprint()};
            ObservationStore store(sample_store, header);
            const auto rows =
                sample_rows(spec.n_sources, sampling_law(base, scheme), sample_m, sample_seed, sample_knockoffs);
            const auto res = cached_evaluate(store, *eo.oracle, rows, eo.query);
            std::cout << json{{"store", sample_store}, {"rows", rows.size()}, {"evaluations", res.evaluations}}.dump()
                      << '\n';
        } else if (*estimate) {
            const auto rule = LambdaRule::parse(est_rule);
            const auto view = open_store(est_store, est_query, est_m);
            const auto feat = store_featurization(view.header);
            const auto design = build_design(view.observations, feat);
            if (!est_dump.empty()) {
                std::ostringstream csv;
                dump_design_csv(design, csv);
                write_text(est_dump, csv.str());
            }
            const auto res = fit_with_rule(design, rule, {est_folds, view.header.seed, {}});
            if (!est_cv.empty() && res.cv) write_text(est_cv, cv_csv(*res.cv));
            const auto result = estimation_result(res.fit, design, feat);
            write_text(est_out, estimation_json(result, estimate_ame(res.fit, feat, design.n_sources)).dump(2) + "\n");
        } else if (*select) {
            const auto rule = LambdaRule::parse(sel_rule);
            if (!(sel_q >= 0.0 && sel_q <= 1.0)) throw Error(ErrorCode::InvalidConfig, "--q must lie in [0, 1]");
            const auto view = open_store(sel_store, sel_query, sel_m);
            const auto base = parse_distribution(view.header.p_spec);
            const auto feat = store_featurization(view.header);
            DesignOptions opts{.with_knockoffs = true, .with_dummies = true, .levels = base.levels().value_or(std::vector<double>{})};
            const auto design = build_design(view.observations, feat, opts);
            if (!sel_dump.empty()) {
                std::ostringstream csv;
                dump_design_csv(design, csv);
                write_text(sel_dump, csv.str());
            }
            const auto res = select_with_fdr(design, sel_q, rule, {sel_folds, view.header.seed, {}});
            auto out = selection_json(res.selection);
            out["lambda"] = res.fit.fit.lambda;
            write_text(sel_out, out.dump(2) + "\n");
        } else if (*sv) {
            const auto spec = sv_oracle.spec();
            const auto eo = make_oracle(spec, sv_seed);
            ShapleyVector values;
            std::optional<BoundReport> bounds;
            if (sv_method == "exact") {
                values = exact_sv(*eo.oracle);
            } else if (sv_method == "mc") {
                values = permutation_mc_sv(*eo.oracle, sv_m, sv_seed);
            } else if (sv_method == "ame") {
                const auto dist = parse_distribution(sv_dist);
                bounds = bound_report(dist);
                const auto feat = make_featurization(dist, FeaturizationScheme::PFeat);
                const auto rows = sample_rows(spec.n_sources, sampling_law(dist, FeaturizationScheme::PFeat), sv_m,
                                              sv_seed, false);
                const auto obs = evaluate_rows(*eo.oracle, rows, eo.query, sv_seed);
                values = sv_via_ame(obs, feat, dist, LambdaRule::parse(sv_rule), {20, sv_seed, {}});
            } else {
                throw Error(ErrorCode::InvalidConfig, "--method must be exact, mc or ame");
            }
            std::ostringstream csv;
            csv << "source,value\n";
            for (std::size_t n = 0; n < values.values.size(); ++n) {
                csv << n << ',' << detail::format_double(values.values[n]) << '\n';
            }
            write_text(sv_out, csv.str());
            if (!sv_bounds.empty()) {
                if (!bounds) bounds = bound_report(parse_distribution(sv_dist));
                write_text(sv_bounds, json{{"method", to_string(values.method)},
                                           {"epsilon", bounds->epsilon},
                                           {"l2_bound", bounds->l2_bound},
                                           {"linf_bound", bounds->linf_bound},
                                           {"delta_cap", bounds->delta_cap}}
                                              .dump(2) +
                                          "\n");
            }
        } else if (*hier) {
            const auto tree = SourceTree::from_json(read_json(hier_tree));
            const auto rule = LambdaRule::parse(hier_rule);
            const auto p1 = parse_distribution(hier_p1);
            const auto p2 = parse_distribution(hier_p2);
            std::vector<HierObservation> rows;
            if (!hier_obs.empty()) {
                std::ifstream in(hier_obs);
                if (!in) throw Error(ErrorCode::Io, "cannot read " + hier_obs);
                for (std::string line; std::getline(in, line);) {
                    if (!line.empty()) rows.push_back(hier_observation_from_json(detail::parse_line(line), tree));
                }
            } else if (!hier_poisons.empty()) {
                const PoisonCountGame game(tree.n_second(), hier_poisons, static_cast<double>(hier_poisons.size()));
                for (std::size_t r = 0; r < hier_m; ++r) {
                    auto o = sample_hier(tree, p1, p2, hier_seed, r);
                    o.y = game(o.second_mask);
                    rows.push_back(std::move(o));
                }
                if (!hier_save.empty()) {
                    std::ostringstream lines;
                    for (const auto& o : rows) lines << hier_observation_to_json(o).dump() << '\n';
                    write_text(hier_save, lines.str());
                }
            } else {
                throw Error(ErrorCode::InvalidConfig, "give --observations or --simulate");
            }
            const auto feat = make_featurization(p1, FeaturizationScheme::InverseP);
            const auto res = two_stage_estimate(rows, tree, feat, hier_q, rule, {hier_folds, hier_seed, {}});
            json out{{"top", selection_json(res.top)},
                     {"second", selection_json(res.second)},
                     {"second_columns", res.second_columns},
                     {"stage_two_ran", res.stage_two_ran}};
            write_text(hier_out, out.dump(2) + "\n");
        } else if (*experiment) {
            auto cfg = config_from_json(read_json(exp_config));
            if (exp_seed) cfg.seed = *exp_seed;
            if (exp_trials) cfg.trials = *exp_trials;
            if (exp_m) cfg.m = *exp_m;
            if (!exp_store.empty()) cfg.store_dir = exp_store;
            if (!exp_out.empty()) cfg.output = exp_out;
            if (cfg.output.empty()) throw Error(ErrorCode::InvalidConfig, "no output directory (config.output or --out)");
            const auto report = run_experiment(cfg);
            emit_reports(report, cfg.output);
            const auto& a = report.aggregate;
            std::cout << json{{"output", cfg.output},
                              {"trials", report.trials.size()},
                              {"mean_precision", detail::opt(a.mean_precision)},
                              {"mean_recall", detail::opt(a.mean_recall)},
                              {"mean_l2_error", detail::opt(a.mean_l2_error)},
                              {"oracle_evaluations", report.oracle_evaluations}}
                             .dump()
                      << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return is_config_error(e.code()) ? exit_config : exit_runtime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_runtime;
    }
    return 0;
}
