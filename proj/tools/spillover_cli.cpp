#include "spillover/choice.hpp"
#include "spillover/csv.hpp"
#include "spillover/errors.hpp"
#include "spillover/evaluate.hpp"
#include "spillover/learning.hpp"
#include "spillover/panel.hpp"
#include "spillover/random.hpp"
#include "spillover/scenario.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spillover;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Globals {
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out_dir = ".";
};

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return hex64(hash_tag(ss.str()));
}

/// Collects written files and emits manifest.json next to them.
class Run {
public:
    Run(const Globals& g, std::string command) : g_(g), command_(std::move(command)) {
        fs::create_directories(g_.out_dir);
    }

    std::string path(const std::string& name) { return (fs::path(g_.out_dir) / name).string(); }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream out(path(name), std::ios::binary);
        if (!out) throw InputError("cannot write '" + path(name) + "'");
        out << text;
        if (!out) throw InputError("failed writing '" + path(name) + "'");
        record(name);
    }
    void write_json(const std::string& name, const json& j) { write_text(name, j.dump(2) + "\n"); }
    void record(const std::string& name) { outputs_.push_back(name); }

    json& config() { return config_; }

    void finish() {
        json files = json::object();
        for (const auto& name : outputs_) files[name] = file_hash(path(name));
        json manifest = {{"command", command_},
                         {"version", kVersion},
                         {"seed", g_.seed},
                         {"config", config_},
                         {"outputs", files}};
        std::ofstream out(path("manifest.json"), std::ios::binary);
        out << manifest.dump(2) << "\n";
    }

private:
    const Globals& g_;
    std::string command_;
    json config_ = json::object();
    std::vector<std::string> outputs_;
};

std::vector<LearningRule> parse_rules(const std::string& text) {
    if (text == "all") {
        return {LearningRule::ShortMemory, LearningRule::Independent, LearningRule::PoolingSimple,
                LearningRule::HierSimple, LearningRule::PoolingRegression, LearningRule::HierRegression};
    }
    std::vector<LearningRule> rules;
    std::stringstream ss(text);
    for (std::string tok; std::getline(ss, tok, ',');) rules.push_back(parse_rule(tok));
    return rules;
}

std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------- fit-learning

struct FitLearningOptions {
    std::string panel;
    std::string rule = "hier-simple";
    std::string prior;
    std::string config;
    int pre_periods = 24;
    int gibbs_total = 1000;
    int gibbs_burnin = 500;
    std::string belief_variance = "draws";
    bool shared_sigma2 = false;
};

void cmd_fit_learning(const Globals& g, const FitLearningOptions& o) {
    Run run(g, "fit-learning");
    const auto panel = read_panel_csv(o.panel);
    LearningSpec base;
    base.pre_estimation_periods = o.pre_periods;
    base.gibbs_total = o.gibbs_total;
    base.gibbs_burnin = o.gibbs_burnin;
    base.independent_shared_sigma2 = o.shared_sigma2;
    if (o.belief_variance == "closed-form") {
        base.belief_variance = BeliefVariance::ClosedForm;
    } else if (o.belief_variance != "draws") {
        throw InputError("--belief-variance must be draws or closed-form");
    }
    if (!o.config.empty()) base = learning_spec_from_json(read_json(o.config), base);
    const PriorHyper prior = o.prior.empty() ? PriorHyper{} : prior_from_json(read_json(o.prior));

    const auto rules = parse_rules(o.rule);
    const bool all = o.rule == "all";
    json summary = json::array();
    std::vector<std::string> skipped;
    for (auto rule : rules) {
        LearningSpec spec = base;
        spec.rule = rule;
        LearningPass pass;
        try {
            pass = run_learning_pass(panel, spec, prior, g.seed, g.threads);
        } catch (const InputError& e) {
            if (!all || !is_regression(rule)) throw;
            skipped.push_back(rule_name(rule) + ": " + e.what());
            continue;
        }
        const auto name = rule_name(rule);
        write_trajectory_csv(panel, pass, run.path("trajectory_" + name + ".csv"));
        run.record("trajectory_" + name + ".csv");
        json fit = {{"rule", name}, {"learning", learning_spec_to_json(spec)}};
        if (rule != LearningRule::ShortMemory) {
            const double ll = quality_loglik(panel, pass);
            const auto dic = quality_dic(panel, pass);
            fit["neg_loglik"] = -ll;
            fit["dic"] = dic.dic;
            fit["d_bar"] = dic.d_bar;
            fit["d_hat"] = dic.d_hat;
            fit["p_d"] = dic.p_d;
        }
        run.write_json("learning_fit_" + name + ".json", fit);
        summary.push_back(fit);
    }
    if (rules.size() > 1) {
        std::ostringstream md;
        md << "| rule | -LL | DIC |\n|---|---|---|\n";
        for (const auto& f : summary) {
            md << "| " << f["rule"].get<std::string>() << " | "
               << (f.contains("neg_loglik") ? fmt(f["neg_loglik"].get<double>()) : "-") << " | "
               << (f.contains("dic") ? fmt(f["dic"].get<double>()) : "-") << " |\n";
        }
        for (const auto& s : skipped) md << "\nskipped " << s << "\n";
        run.write_text("learning_comparison.md", md.str());
    }
    for (const auto& s : skipped) std::cerr << "skipped " << s << "\n";
    run.config() = {{"panel", o.panel}, {"rule", o.rule}, {"learning", learning_spec_to_json(base)},
                    {"prior", prior_to_json(prior)}};
    run.finish();
}

// ---------------------------------------------------------------- fit-choice

struct FitChoiceOptions {
    std::string panel;
    std::string trajectory;
    std::string rule = "hier-simple";
    std::string spec = "a+era+bua";
    std::string utility;
    std::string output;
    int draws = 100;
    int max_iterations = 1000;
    int multistarts = 3;
    bool no_months = false;
    bool omega_zero = false;
    bool no_se = false;
    std::vector<std::string> random;
    std::vector<std::string> extras;
};

json choice_fit_json(const FittedChoice& fit, const std::string& rule) {
    auto j = fitted_to_json(fit);
    j["learning_rule"] = rule;
    return j;
}

void cmd_fit_choice(const Globals& g, const FitChoiceOptions& o) {
    Run run(g, "fit-choice");
    const auto panel = read_panel_csv(o.panel);
    const auto rule = parse_rule(o.rule);
    const auto pass = read_trajectory_csv(panel, o.trajectory, rule);
    UtilitySpec spec = o.utility.empty() ? UtilitySpec{} : utility_spec_from_json(read_json(o.utility));
    spec = with_quality_label(spec, o.spec);
    if (o.no_months) spec.months = false;
    if (!o.random.empty()) spec.random = o.random;
    if (o.omega_zero) spec.random.clear();
    if (!o.extras.empty()) spec.extras = o.extras;
    LikelihoodConfig cfg;
    cfg.draws = o.draws;
    cfg.max_iterations = o.max_iterations;
    cfg.multistarts = o.multistarts;
    cfg.compute_se = !o.no_se;
    cfg.threads = g.threads;
    cfg.seed = g.seed;
    const auto data = build_choice_data(panel, pass, spec);
    const auto fit = estimate_sml(data, cfg);
    const auto name = o.output.empty() ? "choice_" + rule_name(rule) + "_" + spec.label() + ".json" : o.output;
    run.write_json(name, choice_fit_json(fit, rule_name(rule)));
    run.config() = {{"panel", o.panel}, {"trajectory", o.trajectory}, {"rule", o.rule},
                    {"utility", utility_spec_to_json(spec)}, {"draws", o.draws}, {"multistarts", o.multistarts},
                    {"max_iterations", o.max_iterations}, {"compute_se", !o.no_se}};
    run.finish();
    std::cout << spec.label() << " loglik " << fmt(fit.loglik) << (fit.converged ? "" : " (not converged)") << "\n";
}

// ---------------------------------------------------------------- compare

void cmd_compare(const Globals& g, const std::vector<std::string>& fits) {
    Run run(g, "compare");
    std::vector<FitReport> reports;
    std::vector<std::string> rules, utilities;
    const auto remember = [](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    for (const auto& path : fits) {
        const auto j = read_json(path);
        if (!j.contains("loglik") || !j.contains("num_parameters")) {
            throw InputError(path + ": not a fitted choice model");
        }
        const auto rule = j.value("learning_rule", std::string("unknown"));
        const auto utility = j.contains("spec") ? j["spec"].value("label", std::string("?")) : std::string("?");
        auto r = make_report(rule + ":" + utility, j["loglik"].get<double>(), j["num_parameters"].get<int>());
        r.learning_rule = rule;
        r.utility = utility;
        remember(rules, rule);
        remember(utilities, utility);
        reports.push_back(r);
    }
    const auto ranked = rank_models(reports);
    run.write_text("rank_table.md", rank_table_markdown(ranked, rules, utilities));
    run.write_text("rank_table.csv", reports_csv(ranked));
    run.config() = {{"fits", fits}};
    run.finish();
    std::cout << rank_table_markdown(ranked, rules, utilities);
}

// ---------------------------------------------------------------- simulate

void cmd_simulate(const Globals& g, const std::string& scenario_path, const std::string& rule_override) {
    Run run(g, "simulate");
    auto spec = read_scenario_json(scenario_path);
    if (!rule_override.empty()) spec.learning.rule = parse_rule(rule_override);
    const auto result = run_policy_scenario(spec, g.seed, g.threads);
    write_scenario_csv(result, run.path("scenario_result.csv"));
    run.record("scenario_result.csv");
    const auto loss = revenue_loss(result, spec.loss_period);
    const double total = loss.direct + loss.indirect;
    json summary = {{"rule", rule_name(spec.learning.rule)},
                    {"period", spec.loss_period},
                    {"price", spec.price},
                    {"direct_loss", loss.direct},
                    {"indirect_loss", loss.indirect},
                    {"indirect_share", total != 0.0 ? loss.indirect / total : 0.0}};
    run.write_json("loss_summary.json", summary);
    run.config() = scenario_to_json(spec);
    run.finish();
    std::cout << "direct " << fmt(loss.direct) << " indirect " << fmt(loss.indirect) << "\n";
}

// ---------------------------------------------------------------- generate / recover

SyntheticConfig load_synthetic(const std::string& path) {
    return path.empty() ? SyntheticConfig::recovery_default() : synthetic_config_from_json(read_json(path));
}

void cmd_generate(const Globals& g, const std::string& config_path) {
    Run run(g, "generate");
    const auto config = load_synthetic(config_path);
    const auto result = generate_synthetic_panel(config, g.seed, g.threads);
    write_panel_csv(result.panel, run.path("panel.csv"));
    run.record("panel.csv");
    run.write_json("truth.json", truth_to_json(result.truth, result.panel));
    run.config() = synthetic_config_to_json(config);
    run.finish();
}

void cmd_recover(const Globals& g, const std::string& config_path, int draws, bool no_se) {
    Run run(g, "recover");
    const auto config = load_synthetic(config_path);
    const auto synth = generate_synthetic_panel(config, g.seed, g.threads);
    write_panel_csv(synth.panel, run.path("panel.csv"));
    run.record("panel.csv");
    run.write_json("truth.json", truth_to_json(synth.truth, synth.panel));
    const auto pass = run_learning_pass(synth.panel, config.learning, config.prior, g.seed, g.threads);
    write_trajectory_csv(synth.panel, pass, run.path("trajectory.csv"));
    run.record("trajectory.csv");
    LikelihoodConfig cfg;
    cfg.draws = draws;
    cfg.threads = g.threads;
    cfg.seed = g.seed;
    cfg.compute_se = !no_se;
    const auto data = build_choice_data(synth.panel, pass, config.utility);
    const auto fit = estimate_sml(data, cfg);
    run.write_json("fit.json", choice_fit_json(fit, rule_name(config.learning.rule)));
    const auto report = recovery_report(synth.truth, fit);
    run.write_json("recovery.json", recovery_to_json(report));

    std::ostringstream md;
    md << "| parameter | truth | estimate | se | flag |\n|---|---|---|---|---|\n";
    for (const auto& r : report.rows) {
        md << "| " << r.name << " | " << fmt(r.truth) << " | " << fmt(r.estimate) << " | " << fmt(r.se) << " | "
           << (r.flagged ? "OFF >3se" : "") << " |\n";
    }
    md << "\narrival parameters: correlation " << fmt(report.arrival_correlation) << ", mean abs error "
       << fmt(report.arrival_mean_abs_error) << "\n";
    run.write_text("recovery.md", md.str());

    std::ostringstream arrival;
    arrival << "customer_id,route_id,true_m_bar,estimated_m_bar,se\n";
    for (std::size_t i = 0; i < fit.customer_ids.size(); ++i) {
        for (std::size_t j = 0; j < fit.route_ids[i].size(); ++j) {
            const auto e = static_cast<Eigen::Index>(j);
            arrival << fit.customer_ids[i] << ',' << fit.route_ids[i][j] << ',' << fmt(synth.truth.m_bar[i](e)) << ','
                    << fmt(fit.m_bar[i](e)) << ',' << fmt(fit.m_bar_se[i](e)) << '\n';
        }
    }
    run.write_text("arrival_recovery.csv", arrival.str());
    run.config() = {{"synthetic", synthetic_config_to_json(config)}, {"draws", draws}, {"compute_se", !no_se}};
    run.finish();
    std::cout << md.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spillover learning: belief updating, choice estimation and policy simulation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Global random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker thread cap")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

    FitLearningOptions fl;
    auto* learn = app.add_subcommand("fit-learning", "Run quality-learning models over a panel");
    learn->add_option("--panel", fl.panel, "Panel CSV")->required();
    learn->add_option("--rule", fl.rule, "Learning rule, comma list, or 'all'")->capture_default_str();
    learn->add_option("--prior", fl.prior, "Prior hyper-parameters JSON");
    learn->add_option("--config", fl.config, "Learning spec JSON (overrides flags)");
    learn->add_option("--pre-periods", fl.pre_periods, "Pre-estimation periods")->capture_default_str();
    learn->add_option("--gibbs-total", fl.gibbs_total)->capture_default_str();
    learn->add_option("--gibbs-burnin", fl.gibbs_burnin)->capture_default_str();
    learn->add_option("--belief-variance", fl.belief_variance, "draws or closed-form")->capture_default_str();
    learn->add_flag("--shared-sigma2", fl.shared_sigma2, "Independent rule: one sigma2 per customer");

    FitChoiceOptions fc;
    auto* choice = app.add_subcommand("fit-choice", "Estimate the purchase model by simulated maximum likelihood");
    choice->add_option("--panel", fc.panel, "Panel CSV")->required();
    choice->add_option("--trajectory", fc.trajectory, "Trajectory CSV from fit-learning")->required();
    choice->add_option("--rule", fc.rule, "Learning rule that produced the trajectory")->capture_default_str();
    choice->add_option("--spec", fc.spec, "Utility label: null, s, a, a+era, a+era+bua, a+era+bua+q")->capture_default_str();
    choice->add_option("--utility", fc.utility, "Utility spec JSON (controls, scalings, random set)");
    choice->add_option("--output", fc.output, "Output file name");
    choice->add_option("--draws", fc.draws, "Halton draws per customer")->capture_default_str();
    choice->add_option("--max-iterations", fc.max_iterations)->capture_default_str();
    choice->add_option("--multistarts", fc.multistarts)->capture_default_str();
    choice->add_option("--random", fc.random, "Predictors with random coefficients");
    choice->add_option("--extras", fc.extras, "Panel covariates entering utility");
    choice->add_flag("--no-months", fc.no_months, "Drop month dummies");
    choice->add_flag("--omega-zero", fc.omega_zero, "No random coefficients");
    choice->add_flag("--no-se", fc.no_se, "Skip the Hessian");

    std::vector<std::string> fits;
    auto* compare = app.add_subcommand("compare", "Rank fitted choice models by LL and AIC");
    compare->add_option("fits", fits, "Fitted model JSON files")->required()->expected(2, -1);

    std::string scenario_path, rule_override;
    auto* simulate = app.add_subcommand("simulate", "Run a policy scenario against its baseline");
    simulate->add_option("--scenario", scenario_path, "Scenario JSON")->required();
    simulate->add_option("--rule", rule_override, "Override the scenario's learning rule");

    std::string gen_config;
    auto* generate = app.add_subcommand("generate", "Generate a synthetic panel with known parameters");
    generate->add_option("--config", gen_config, "Synthetic config JSON (default: recovery setup)");

    std::string rec_config;
    int rec_draws = 100;
    bool rec_no_se = false;
    auto* recover = app.add_subcommand("recover", "Generate, learn, estimate and compare with the truth");
    recover->add_option("--config", rec_config, "Synthetic config JSON (default: recovery setup)");
    recover->add_option("--draws", rec_draws, "Halton draws per customer")->capture_default_str();
    recover->add_flag("--no-se", rec_no_se, "Skip the Hessian");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (learn->parsed()) cmd_fit_learning(g, fl);
        if (choice->parsed()) cmd_fit_choice(g, fc);
        if (compare->parsed()) cmd_compare(g, fits);
        if (simulate->parsed()) cmd_simulate(g, scenario_path, rule_override);
        if (generate->parsed()) cmd_generate(g, gen_config);
        if (recover->parsed()) cmd_recover(g, rec_config, rec_draws, rec_no_se);
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
