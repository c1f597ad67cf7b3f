#include "spillover/scenario.hpp"

#include "spillover/csv.hpp"
#include "spillover/errors.hpp"
#include "spillover/random.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>

namespace spillover {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    return j.at(key).get<T>();
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
}

/// Coefficient vector over the design's predictors, fixed part only.
Eigen::VectorXd coefficient_means(const Design& design, const FittedChoice& fit) {
    Eigen::VectorXd b(static_cast<Eigen::Index>(design.size()));
    for (std::size_t k = 0; k < design.size(); ++k) {
        const auto& name = design.names()[k];
        if (std::find(fit.names.begin(), fit.names.end(), name) == fit.names.end()) {
            throw InputError("coefficients lack predictor '" + name + "'");
        }
        b(static_cast<Eigen::Index>(k)) = fit.coefficient(name);
    }
    return b;
}

double dot_row(const std::vector<double>& row, const Eigen::VectorXd& b) {
    double v = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) v += row[k] * b(static_cast<Eigen::Index>(k));
    return v;
}

}  // namespace

nlohmann::json prior_to_json(const PriorHyper& p) {
    nlohmann::json j = {{"alpha_sigma", p.alpha_sigma}, {"delta_sigma", p.delta_sigma}, {"mu0", p.mu0},
                        {"sigma_mu2", p.sigma_mu2},     {"alpha_xi", p.alpha_xi},       {"delta_xi", p.delta_xi},
                        {"gamma0", p.gamma0},           {"sigma_gamma2", p.sigma_gamma2}};
    if (!p.routes.empty()) {
        j["routes"] = nlohmann::json::array();
        for (const auto& r : p.routes) {
            j["routes"].push_back({{"mu0", r.mu0},
                                   {"var", r.var},
                                   {"alpha_sigma", r.alpha_sigma},
                                   {"delta_sigma", r.delta_sigma}});
        }
    }
    return j;
}

PriorHyper prior_from_json(const nlohmann::json& j, PriorHyper p) {
    try {
        p.alpha_sigma = get_or(j, "alpha_sigma", p.alpha_sigma);
        p.delta_sigma = get_or(j, "delta_sigma", p.delta_sigma);
        p.mu0 = get_or(j, "mu0", p.mu0);
        p.sigma_mu2 = get_or(j, "sigma_mu2", p.sigma_mu2);
        p.alpha_xi = get_or(j, "alpha_xi", p.alpha_xi);
        p.delta_xi = get_or(j, "delta_xi", p.delta_xi);
        p.gamma0 = get_or(j, "gamma0", p.gamma0);
        p.sigma_gamma2 = get_or(j, "sigma_gamma2", p.sigma_gamma2);
        if (j.contains("routes")) {
            p.routes.clear();
            for (const auto& r : j.at("routes")) {
                RoutePrior rp;
                rp.mu0 = get_or(r, "mu0", p.mu0);
                rp.var = get_or(r, "var", p.sigma_mu2);
                rp.alpha_sigma = get_or(r, "alpha_sigma", p.alpha_sigma);
                rp.delta_sigma = get_or(r, "delta_sigma", p.delta_sigma);
                p.routes.push_back(rp);
            }
        }
        p.validate();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("prior: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("prior: ") + e.what());
    }
    return p;
}

nlohmann::json learning_spec_to_json(const LearningSpec& s) {
    return {{"rule", rule_name(s.rule)},
            {"gibbs_total", s.gibbs_total},
            {"gibbs_burnin", s.gibbs_burnin},
            {"pre_estimation_periods", s.pre_estimation_periods},
            {"belief_variance", s.belief_variance == BeliefVariance::Draws ? "draws" : "closed-form"},
            {"independent_shared_sigma2", s.independent_shared_sigma2},
            {"check_slope_identification", s.check_slope_identification},
            {"distance_unit_km", s.distance_unit_km}};
}

LearningSpec learning_spec_from_json(const nlohmann::json& j, LearningSpec s) {
    try {
        if (j.contains("rule")) s.rule = parse_rule(j.at("rule").get<std::string>());
        s.gibbs_total = get_or(j, "gibbs_total", s.gibbs_total);
        s.gibbs_burnin = get_or(j, "gibbs_burnin", s.gibbs_burnin);
        s.pre_estimation_periods = get_or(j, "pre_estimation_periods", s.pre_estimation_periods);
        if (j.contains("belief_variance")) {
            const auto v = j.at("belief_variance").get<std::string>();
            if (v == "draws") {
                s.belief_variance = BeliefVariance::Draws;
            } else if (v == "closed-form") {
                s.belief_variance = BeliefVariance::ClosedForm;
            } else {
                throw InputError("belief_variance must be 'draws' or 'closed-form'");
            }
        }
        s.independent_shared_sigma2 = get_or(j, "independent_shared_sigma2", s.independent_shared_sigma2);
        s.check_slope_identification = get_or(j, "check_slope_identification", s.check_slope_identification);
        s.distance_unit_km = get_or(j, "distance_unit_km", s.distance_unit_km);
        s.validate();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("learning spec: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("learning spec: ") + e.what());
    }
    return s;
}

const Regime& regime_at(const std::vector<Regime>& regimes, int t) {
    const Regime* current = nullptr;
    for (const auto& r : regimes) {
        if (r.start_period <= t) current = &r;
    }
    if (current == nullptr) throw InputError("no delay regime covers period " + std::to_string(t));
    return *current;
}

void ScenarioSpec::validate() const {
    if (routes.empty()) throw InputError("scenario needs at least one route");
    if (arrival.size() != routes.size()) throw InputError("arrival probabilities must match the route list");
    double total = 0.0;
    for (double m : arrival) {
        if (!(m >= 0.0)) throw InputError("arrival probabilities must be non-negative");
        total += m;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InputError("arrival probabilities must sum to 1");
    if (periods < 1 || cohort < 1) throw InputError("scenario needs periods >= 1 and cohort >= 1");
    if (loss_period < 1 || loss_period > periods) throw InputError("loss_period outside 1..periods");
    if (!(price >= 0.0)) throw InputError("price must be non-negative");
    const auto check_tiling = [&](const std::vector<Regime>& regimes, const std::string& what) {
        if (regimes.empty()) throw InputError(what + ": no regimes");
        if (regimes.front().start_period != 1) throw InputError(what + ": regimes must start at period 1");
        for (std::size_t k = 0; k < regimes.size(); ++k) {
            if (regimes[k].start_period > periods) throw InputError(what + ": regime starts after the horizon");
            if (k > 0 && regimes[k].start_period <= regimes[k - 1].start_period) {
                throw InputError(what + ": regimes overlap or are out of order");
            }
            if (!(regimes[k].sd >= 0.0) || !std::isfinite(regimes[k].mean)) {
                throw InputError(what + ": regime needs a finite mean and sd >= 0");
            }
        }
    };
    for (const auto& r : routes) {
        check_tiling(r.baseline, "route '" + r.id + "' baseline");
        if (!r.scenario.empty()) check_tiling(r.scenario, "route '" + r.id + "' scenario");
    }
    try {
        learning.validate();
        if (learning.rule != LearningRule::ShortMemory) prior.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("scenario: ") + e.what());
    }
}

namespace {

Eigen::MatrixXd simulate_member(const ScenarioSpec& spec, bool counterfactual, std::size_t member,
                                const Design& design, const Eigen::VectorXd& b, std::uint64_t seed) {
    const auto J = spec.routes.size();
    const auto root = SeededStream(seed, 0).child({hash_tag("scenario"), static_cast<std::uint64_t>(member)});
    RouteSetup setup;
    for (const auto& r : spec.routes) {
        setup.distance_km.push_back(r.distance_km);
        setup.tags.push_back(hash_tag(r.id));
    }
    CustomerLearner learner(spec.learning, spec.prior, setup, root.child(hash_tag("gibbs")),
                            prior_belief(spec.learning, spec.prior, setup));
    std::vector<double> extra;
    for (const auto& name : design.spec().extras) {
        const auto it = spec.covariates.extra.find(name);
        extra.push_back(it == spec.covariates.extra.end() ? 0.0 : it->second);
    }
    std::vector<double> row(design.size());
    std::vector<double> prob(J);
    Eigen::MatrixXd out(spec.periods, static_cast<Eigen::Index>(J));
    for (int t = 1; t <= spec.periods; ++t) {
        const auto& belief = learner.belief();
        for (std::size_t j = 0; j < J; ++j) {
            CellInputs in;
            in.price = spec.covariates.price;
            in.weight_kg = spec.covariates.weight_kg;
            in.second_half = spec.covariates.second_half;
            in.month = spec.covariates.month;
            in.extra = extra;
            in.quality = {belief.mu_j[j], belief.sigma2_j[j], belief.var_mu_j[j]};
            design.fill(in, row);
            prob[j] = choice_probability(dot_row(row, b));
            out(t - 1, static_cast<Eigen::Index>(j)) = prob[j];
        }
        auto demand_stream = root.child({hash_tag("demand"), static_cast<std::uint64_t>(t)});
        const auto d = categorical_draw(demand_stream, spec.arrival);
        auto purchase_stream = root.child({hash_tag("purchase"), setup.tags[d], static_cast<std::uint64_t>(t)});
        if (uniform_draw(purchase_stream) < prob[d]) {
            const auto& regime = regime_at(spec.routes[d].regimes(counterfactual), t);
            auto delay_stream = root.child({hash_tag("delay"), setup.tags[d], static_cast<std::uint64_t>(t)});
            learner.observe(d, t, normal_draw(delay_stream, regime.mean, regime.sd));
        }
        learner.end_period(t);
    }
    return out;
}

}  // namespace

ScenarioResult run_policy_scenario(const ScenarioSpec& spec, std::uint64_t seed, int threads) {
    spec.validate();
    UtilitySpec utility = spec.coefficients.spec;
    utility.months = false;
    const Design design(utility, {}, utility.extras);
    const Eigen::VectorXd b_mean = coefficient_means(design, spec.coefficients);

    const auto J = spec.routes.size();
    const auto N = static_cast<std::size_t>(spec.cohort);
    std::vector<Eigen::MatrixXd> base(N), scen(N);
    std::vector<std::exception_ptr> errors(N);
    const auto n = static_cast<long>(N);
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            Eigen::VectorXd b = b_mean;
            if (spec.draw_sensitivities) {
                auto coef_stream = SeededStream(seed, 0)
                                       .child({hash_tag("scenario"), static_cast<std::uint64_t>(k)})
                                       .child(hash_tag("coef"));
                for (std::size_t r = 0; r < spec.coefficients.random_names.size(); ++r) {
                    const auto col = design.index(spec.coefficients.random_names[r]);
                    const double z = coef_stream.standard_normal();
                    const double sd = std::sqrt(spec.coefficients.omega(static_cast<Eigen::Index>(r)));
                    if (col) b(static_cast<Eigen::Index>(*col)) += sd * z;
                }
            }
            base[k] = simulate_member(spec, false, k, design, b, seed);
            scen[k] = simulate_member(spec, true, k, design, b, seed);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    ScenarioResult res;
    res.periods = spec.periods;
    res.price = spec.price;
    for (const auto& r : spec.routes) {
        res.route_ids.push_back(r.id);
        const auto& a = r.regimes(false);
        const auto& c = r.regimes(true);
        bool same = a.size() == c.size();
        for (std::size_t k = 0; same && k < a.size(); ++k) {
            same = a[k].start_period == c[k].start_period && a[k].mean == c[k].mean && a[k].sd == c[k].sd;
        }
        res.changed.push_back(!same);
    }
    const auto summarise = [&](const std::vector<Eigen::MatrixXd>& runs, Eigen::MatrixXd& mean, Eigen::MatrixXd& se) {
        mean = Eigen::MatrixXd::Zero(spec.periods, static_cast<Eigen::Index>(J));
        Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(spec.periods, static_cast<Eigen::Index>(J));
        for (const auto& m : runs) {
            mean += m;
            sq += m.cwiseProduct(m);
        }
        mean /= static_cast<double>(N);
        sq /= static_cast<double>(N);
        const double scale = N > 1 ? static_cast<double>(N) / static_cast<double>(N - 1) : 0.0;
        se = ((sq - mean.cwiseProduct(mean)).cwiseMax(0.0) * scale / static_cast<double>(N)).cwiseSqrt();
    };
    summarise(base, res.prob_baseline, res.se_baseline);
    summarise(scen, res.prob_scenario, res.se_scenario);
    return res;
}

RevenueLoss revenue_loss(const ScenarioResult& result, int period) {
    if (period < 1 || period > result.periods) {
        throw std::out_of_range("loss period " + std::to_string(period) + " outside 1.." + std::to_string(result.periods));
    }
    RevenueLoss loss;
    for (std::size_t j = 0; j < result.route_ids.size(); ++j) {
        const auto c = static_cast<Eigen::Index>(j);
        const double delta = result.price * (result.prob_baseline(period - 1, c) - result.prob_scenario(period - 1, c));
        (result.changed[j] ? loss.direct : loss.indirect) += delta;
    }
    return loss;
}

void write_scenario_csv(const ScenarioResult& result, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << "period,route,avg_prob_baseline,avg_prob_scenario,revenue_delta\n";
    for (int t = 1; t <= result.periods; ++t) {
        for (std::size_t j = 0; j < result.route_ids.size(); ++j) {
            const auto c = static_cast<Eigen::Index>(j);
            const double b = result.prob_baseline(t - 1, c);
            const double s = result.prob_scenario(t - 1, c);
            out << t << ',' << result.route_ids[j] << ',' << format_double(b) << ',' << format_double(s) << ','
                << format_double(result.price * (b - s)) << '\n';
        }
    }
    if (!out) throw InputError("failed writing '" + path + "'");
}

namespace {

std::vector<Regime> regimes_from_json(const nlohmann::json& j) {
    std::vector<Regime> out;
    for (const auto& r : j) {
        Regime g;
        g.start_period = r.at("start").get<int>();
        g.mean = r.at("mean").get<double>();
        g.sd = r.at("sd").get<double>();
        out.push_back(g);
    }
    return out;
}

nlohmann::json regimes_to_json(const std::vector<Regime>& regimes) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : regimes) out.push_back({{"start", r.start_period}, {"mean", r.mean}, {"sd", r.sd}});
    return out;
}

}  // namespace

ScenarioSpec scenario_from_json(const nlohmann::json& j, const std::string& base_dir) {
    ScenarioSpec s;
    try {
        for (const auto& r : j.at("routes")) {
            ScenarioRoute route;
            route.id = r.at("id").get<std::string>();
            route.distance_km = get_or(r, "distance_km", kNaN);
            route.baseline = regimes_from_json(r.at("baseline"));
            if (r.contains("scenario")) route.scenario = regimes_from_json(r.at("scenario"));
            s.routes.push_back(std::move(route));
        }
        s.arrival = j.at("arrival").get<std::vector<double>>();
        s.periods = get_or(j, "periods", s.periods);
        s.cohort = get_or(j, "cohort", s.cohort);
        s.price = get_or(j, "price", s.price);
        s.loss_period = get_or(j, "loss_period", s.periods);
        if (j.contains("learning")) s.learning = learning_spec_from_json(j.at("learning"), s.learning);
        if (j.contains("prior")) s.prior = prior_from_json(j.at("prior"));
        const auto& coef = j.at("coefficients");
        if (coef.is_string()) {
            auto path = std::filesystem::path(coef.get<std::string>());
            if (path.is_relative()) path = std::filesystem::path(base_dir) / path;
            s.coefficients = fitted_from_json(read_json_file(path.string()));
        } else {
            s.coefficients = fitted_from_json(coef);
        }
        s.covariates.price = s.price;
        if (j.contains("covariates")) {
            const auto& c = j.at("covariates");
            s.covariates.price = get_or(c, "price", s.covariates.price);
            s.covariates.weight_kg = get_or(c, "weight_kg", s.covariates.weight_kg);
            s.covariates.second_half = get_or(c, "second_half", s.covariates.second_half);
            s.covariates.month = get_or(c, "month", s.covariates.month);
            if (c.contains("extra")) s.covariates.extra = c.at("extra").get<std::map<std::string, double>>();
        }
        s.draw_sensitivities = get_or(j, "draw_sensitivities", s.draw_sensitivities);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("scenario JSON: ") + e.what());
    }
    s.validate();
    return s;
}

ScenarioSpec read_scenario_json(const std::string& path) {
    const auto dir = std::filesystem::path(path).parent_path();
    return scenario_from_json(read_json_file(path), dir.empty() ? "." : dir.string());
}

nlohmann::json scenario_to_json(const ScenarioSpec& s) {
    nlohmann::json routes = nlohmann::json::array();
    for (const auto& r : s.routes) {
        nlohmann::json route = {{"id", r.id}, {"baseline", regimes_to_json(r.baseline)}};
        if (std::isfinite(r.distance_km)) route["distance_km"] = r.distance_km;
        if (!r.scenario.empty()) route["scenario"] = regimes_to_json(r.scenario);
        routes.push_back(route);
    }
    auto coef = fitted_to_json(s.coefficients);
    coef.erase("arrival");
    return {{"routes", routes},
            {"arrival", s.arrival},
            {"periods", s.periods},
            {"cohort", s.cohort},
            {"price", s.price},
            {"loss_period", s.loss_period},
            {"learning", learning_spec_to_json(s.learning)},
            {"prior", prior_to_json(s.prior)},
            {"coefficients", coef},
            {"covariates",
             {{"price", s.covariates.price},
              {"weight_kg", s.covariates.weight_kg},
              {"second_half", s.covariates.second_half},
              {"month", s.covariates.month},
              {"extra", s.covariates.extra}}},
            {"draw_sensitivities", s.draw_sensitivities}};
}

SyntheticConfig SyntheticConfig::recovery_default() {
    SyntheticConfig c;
    c.learning.rule = LearningRule::HierSimple;
    c.learning.pre_estimation_periods = 0;
    c.utility.shape = QualityShape::Symmetric;
    c.utility.price = c.utility.weight = c.utility.second_half = c.utility.months = false;
    c.utility.extras = {"x2"};
    c.utility.random = {"intercept", "mu"};
    c.utility.scalings.mu = 1.0;
    c.beta = {{"intercept", -0.5}, {"mu", 0.3}, {"x2", -0.4}};
    c.omega = {{"intercept", 0.6}, {"mu", 0.5}};
    return c;
}

void SyntheticConfig::validate() const {
    if (customers < 1 || periods < 1) throw InputError("synthetic panel needs customers >= 1 and periods >= 1");
    if (min_routes < 1 || max_routes < min_routes) throw InputError("synthetic route range is empty");
    if (!(delay_sd >= 0.0) || !(route_mean_sd >= 0.0) || !(arrival_sd >= 0.0)) {
        throw InputError("synthetic spreads must be non-negative");
    }
    if (learning.pre_estimation_periods != 0) {
        throw InputError("synthetic beliefs evolve from the configured prior; set pre_estimation_periods to 0");
    }
    if (learning.rule == LearningRule::HierRegression || learning.rule == LearningRule::PoolingRegression) {
        if (!(max_distance_km > min_distance_km)) throw InputError("regression rules need a distance range");
    }
    for (const auto& [name, v] : omega) {
        if (!(v >= 0.0)) throw InputError("omega for '" + name + "' is negative");
    }
    try {
        learning.validate();
        utility.validate();
        prior.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("synthetic config: ") + e.what());
    }
}

namespace {

template <typename T>
std::vector<T> keep_entries(const std::vector<T>& v, const std::vector<std::size_t>& keep) {
    std::vector<T> out;
    for (auto j : keep) out.push_back(v[j]);
    return out;
}

Eigen::MatrixXd keep_columns(const Eigen::MatrixXd& m, const std::vector<std::size_t>& keep) {
    if (m.size() == 0) return m;
    Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(keep[k]));
    return out;
}

// Routes a customer never bought leave no trace in observed data; customers without any purchase vanish.
void drop_unused_routes(SyntheticResult& r) {
    auto& customers = r.panel.customers;
    auto& truth = r.truth;
    std::vector<std::size_t> kept_customers;
    for (std::size_t i = 0; i < customers.size(); ++i) {
        auto& c = customers[i];
        std::vector<std::size_t> keep;
        for (std::size_t j = 0; j < c.routes.size(); ++j) {
            if (std::any_of(c.cells.begin(), c.cells.end(), [&](const auto& period) { return period[j].y; })) {
                keep.push_back(j);
            }
        }
        if (keep.empty()) continue;
        kept_customers.push_back(i);
        if (keep.size() == c.routes.size()) continue;
        c.routes = keep_entries(c.routes, keep);
        for (auto& period : c.cells) period = keep_entries(period, keep);
        const auto anchor = static_cast<std::size_t>(std::find(keep.begin(), keep.end(), truth.anchor[i]) - keep.begin());
        Eigen::VectorXd m(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t k = 0; k < keep.size(); ++k) m(static_cast<Eigen::Index>(k)) = truth.m_bar[i](static_cast<Eigen::Index>(keep[k]));
        truth.m_bar[i] = m;
        truth.anchor[i] = anchor;
        truth.route_means[i] = keep_entries(truth.route_means[i], keep);
        auto& traj = r.beliefs.customers[i];
        for (auto& st : traj.states) {
            st.mu_j = keep_entries(st.mu_j, keep);
            st.var_mu_j = keep_entries(st.var_mu_j, keep);
            st.sigma2_j = keep_entries(st.sigma2_j, keep);
            if (!st.theta_j.empty()) st.theta_j = keep_entries(st.theta_j, keep);
            if (!st.observed.empty()) st.observed = keep_entries(st.observed, keep);
        }
        traj.final_draws.route_mean = keep_columns(traj.final_draws.route_mean, keep);
        traj.final_draws.route_sigma2 = keep_columns(traj.final_draws.route_sigma2, keep);
    }
    if (kept_customers.size() == customers.size()) return;
    customers = keep_entries(customers, kept_customers);
    r.beliefs.customers = keep_entries(r.beliefs.customers, kept_customers);
    truth.customer_coefficients = keep_entries(truth.customer_coefficients, kept_customers);
    truth.m_bar = keep_entries(truth.m_bar, kept_customers);
    truth.anchor = keep_entries(truth.anchor, kept_customers);
    truth.route_means = keep_entries(truth.route_means, kept_customers);
}

}  // namespace

SyntheticResult generate_synthetic_panel(const SyntheticConfig& config, std::uint64_t seed, int threads) {
    config.validate();
    const Design design(config.utility, {}, config.covariates);
    const auto K = design.size();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
    Eigen::VectorXd omega = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) {
        const auto& name = design.names()[k];
        if (auto it = config.beta.find(name); it != config.beta.end()) beta(static_cast<Eigen::Index>(k)) = it->second;
        if (auto it = config.omega.find(name); it != config.omega.end()) omega(static_cast<Eigen::Index>(k)) = it->second;
    }
    for (const auto& [name, v] : config.beta) {
        if (!design.index(name)) throw InputError("synthetic coefficient '" + name + "' is not in the utility design");
    }

    SyntheticResult out;
    auto& panel = out.panel;
    panel.num_periods = config.periods;
    panel.epoch = parse_iso8601("2021-01-04T00:00:00Z");
    panel.covariate_names = config.covariates;
    for (int t = 0; t < config.periods; ++t) {
        panel.month.push_back(utc_month(*panel.epoch + t * kPeriodSeconds));
        panel.second_half_week.push_back(t % 2);
    }
    const auto N = static_cast<std::size_t>(config.customers);
    panel.customers.resize(N);
    out.beliefs.spec = config.learning;
    out.beliefs.customers.resize(N);
    auto& truth = out.truth;
    truth.names = design.names();
    truth.beta = beta;
    truth.omega = omega;
    truth.customer_coefficients.resize(N);
    truth.m_bar.resize(N);
    truth.anchor.resize(N);
    truth.route_means.resize(N);

    std::vector<std::exception_ptr> errors(N);
    const auto n = static_cast<long>(N);
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
    for (long ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        try {
            auto& c = panel.customers[i];
            c.id = "C" + std::to_string(i + 1);
            auto root = SeededStream(seed, 0).child({hash_tag("synthetic"), hash_tag(c.id)});
            auto setup_stream = root.child(hash_tag("setup"));
            const int J = config.min_routes +
                          static_cast<int>(uniform_draw(setup_stream) * (config.max_routes - config.min_routes + 1));
            const auto Ju = static_cast<std::size_t>(std::min(J, config.max_routes));
            RouteSetup setup;
            std::vector<double> means(Ju);
            Eigen::VectorXd m_bar(static_cast<Eigen::Index>(Ju));
            for (std::size_t j = 0; j < Ju; ++j) {
                RouteInfo r;
                r.id = "R" + std::to_string(j + 1);
                r.distance_km = config.min_distance_km +
                                uniform_draw(setup_stream) * (config.max_distance_km - config.min_distance_km);
                means[j] = normal_draw(setup_stream, config.grand_mean, config.route_mean_sd);
                m_bar(static_cast<Eigen::Index>(j)) = normal_draw(setup_stream, 0.0, config.arrival_sd);
                setup.distance_km.push_back(r.distance_km);
                setup.tags.push_back(hash_tag(r.id));
                c.routes.push_back(r);
            }
            Eigen::VectorXd b = beta;
            auto coef_stream = root.child(hash_tag("coef"));
            for (std::size_t k = 0; k < K; ++k) {
                const double z = coef_stream.standard_normal();
                const auto e = static_cast<Eigen::Index>(k);
                b(e) += std::sqrt(omega(e)) * z;
            }
            const Eigen::VectorXd m = arrival_softmax(m_bar);
            std::vector<double> m_prob(m.data(), m.data() + m.size());

            auto& traj = out.beliefs.customers[i];
            traj.customer_id = c.id;
            traj.first_period = 0;
            traj.prior = config.prior;
            CustomerLearner learner(config.learning, config.prior, setup, learner_stream(seed, c.id),
                                    prior_belief(config.learning, config.prior, setup));
            c.cells.assign(static_cast<std::size_t>(config.periods), std::vector<PanelCell>(Ju));
            std::vector<double> row(K);
            std::vector<double> v(Ju);
            int anchor = -1;
            for (int t = 0; t < config.periods; ++t) {
                traj.states.push_back(learner.belief());
                const auto& belief = traj.states.back();
                auto cov_stream = root.child({hash_tag("covariates"), static_cast<std::uint64_t>(t)});
                for (std::size_t j = 0; j < Ju; ++j) {
                    auto& cell = c.cells[static_cast<std::size_t>(t)][j];
                    cell.price = 1000.0 + 3000.0 * uniform_draw(cov_stream);
                    cell.weight_kg = 50.0 + 3000.0 * uniform_draw(cov_stream);
                    cell.pieces = 1.0;
                    for (std::size_t q = 0; q < config.covariates.size(); ++q) cell.extra.push_back(cov_stream.standard_normal());
                    CellInputs in;
                    in.price = cell.price;
                    in.weight_kg = cell.weight_kg;
                    in.second_half = panel.second_half_week[static_cast<std::size_t>(t)];
                    in.month = panel.month[static_cast<std::size_t>(t)];
                    in.extra = cell.extra;
                    in.quality = {belief.mu_j[j], belief.sigma2_j[j], belief.var_mu_j[j]};
                    design.fill(in, row);
                    v[j] = dot_row(row, b);
                }
                auto period_stream = root.child({hash_tag("period"), static_cast<std::uint64_t>(t)});
                const auto d = categorical_draw(period_stream, m_prob);
                if (uniform_draw(period_stream) < choice_probability(v[d])) {
                    auto& cell = c.cells[static_cast<std::size_t>(t)][d];
                    const double q = normal_draw(period_stream, means[d], config.delay_sd);
                    cell.y = true;
                    cell.y_star = true;
                    cell.delays.push_back(q);
                    learner.observe(d, t, q);
                    if (anchor < 0) anchor = static_cast<int>(d);
                }
                learner.end_period(t);
            }
            traj.final_draws = learner.draws();
            truth.anchor[i] = anchor < 0 ? 0 : static_cast<std::size_t>(anchor);
            truth.m_bar[i] = m_bar.array() - m_bar(static_cast<Eigen::Index>(truth.anchor[i]));
            truth.customer_coefficients[i] = b;
            truth.route_means[i] = means;
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    if (config.drop_unused_routes) drop_unused_routes(out);
    panel.validate();
    return out;
}

nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
    return {{"customers", c.customers},
            {"periods", c.periods},
            {"min_routes", c.min_routes},
            {"drop_unused_routes", c.drop_unused_routes},
            {"max_routes", c.max_routes},
            {"grand_mean", c.grand_mean},
            {"route_mean_sd", c.route_mean_sd},
            {"delay_sd", c.delay_sd},
            {"arrival_sd", c.arrival_sd},
            {"min_distance_km", c.min_distance_km},
            {"max_distance_km", c.max_distance_km},
            {"covariates", c.covariates},
            {"learning", learning_spec_to_json(c.learning)},
            {"prior", prior_to_json(c.prior)},
            {"utility", utility_spec_to_json(c.utility)},
            {"beta", c.beta},
            {"omega", c.omega}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
    SyntheticConfig c = SyntheticConfig::recovery_default();
    try {
        c.customers = get_or(j, "customers", c.customers);
        c.periods = get_or(j, "periods", c.periods);
        c.min_routes = get_or(j, "min_routes", c.min_routes);
        c.drop_unused_routes = get_or(j, "drop_unused_routes", c.drop_unused_routes);
        c.max_routes = get_or(j, "max_routes", c.max_routes);
        c.grand_mean = get_or(j, "grand_mean", c.grand_mean);
        c.route_mean_sd = get_or(j, "route_mean_sd", c.route_mean_sd);
        c.delay_sd = get_or(j, "delay_sd", c.delay_sd);
        c.arrival_sd = get_or(j, "arrival_sd", c.arrival_sd);
        c.min_distance_km = get_or(j, "min_distance_km", c.min_distance_km);
        c.max_distance_km = get_or(j, "max_distance_km", c.max_distance_km);
        c.covariates = get_or(j, "covariates", c.covariates);
        if (j.contains("learning")) c.learning = learning_spec_from_json(j.at("learning"), c.learning);
        if (j.contains("prior")) c.prior = prior_from_json(j.at("prior"));
        if (j.contains("utility")) c.utility = utility_spec_from_json(j.at("utility"));
        if (j.contains("beta")) c.beta = j.at("beta").get<std::map<std::string, double>>();
        if (j.contains("omega")) c.omega = j.at("omega").get<std::map<std::string, double>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("synthetic config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json truth_to_json(const SyntheticTruth& truth, const ChoicePanel& panel) {
    nlohmann::json coefs = nlohmann::json::array();
    for (std::size_t k = 0; k < truth.names.size(); ++k) {
        const auto e = static_cast<Eigen::Index>(k);
        coefs.push_back({{"name", truth.names[k]}, {"mean", truth.beta(e)}, {"omega", truth.omega(e)}});
    }
    nlohmann::json customers = nlohmann::json::array();
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        const auto& c = panel.customers[i];
        nlohmann::json routes = nlohmann::json::array();
        for (std::size_t j = 0; j < c.routes.size(); ++j) {
            routes.push_back({{"route_id", c.routes[j].id},
                              {"true_mean_delay", truth.route_means[i][j]},
                              {"m_bar", truth.m_bar[i](static_cast<Eigen::Index>(j))}});
        }
        std::vector<double> b(truth.customer_coefficients[i].data(),
                              truth.customer_coefficients[i].data() + truth.customer_coefficients[i].size());
        customers.push_back({{"customer_id", c.id},
                             {"anchor_route", c.routes[truth.anchor[i]].id},
                             {"coefficients", b},
                             {"routes", routes}});
    }
    return {{"coefficients", coefs}, {"customers", customers}};
}

RecoveryReport recovery_report(const SyntheticTruth& truth, const FittedChoice& fit) {
    RecoveryReport rep;
    rep.loglik = fit.loglik;
    rep.converged = fit.converged;
    const auto flag = [](RecoveryRow& r) {
        r.flagged = !(std::isfinite(r.se) && r.se > 0.0) || std::abs(r.estimate - r.truth) > 3.0 * r.se;
    };
    for (std::size_t k = 0; k < truth.names.size(); ++k) {
        const auto& name = truth.names[k];
        RecoveryRow row{name, truth.beta(static_cast<Eigen::Index>(k)), fit.coefficient(name), kNaN, false};
        for (std::size_t q = 0; q < fit.names.size(); ++q) {
            if (fit.names[q] == name && fit.beta_se.size() > static_cast<Eigen::Index>(q)) {
                row.se = fit.beta_se(static_cast<Eigen::Index>(q));
            }
        }
        flag(row);
        rep.rows.push_back(row);
    }
    for (std::size_t k = 0; k < truth.names.size(); ++k) {
        const auto& name = truth.names[k];
        const auto it = std::find(fit.random_names.begin(), fit.random_names.end(), name);
        const double t = truth.omega(static_cast<Eigen::Index>(k));
        if (it == fit.random_names.end() && t == 0.0) continue;
        RecoveryRow row{"Omega(" + name + ")", t, 0.0, kNaN, false};
        if (it != fit.random_names.end()) {
            const auto q = static_cast<Eigen::Index>(it - fit.random_names.begin());
            row.estimate = fit.omega(q);
            row.se = fit.omega_se.size() > q ? fit.omega_se(q) : kNaN;
        }
        flag(row);
        rep.rows.push_back(row);
    }
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < fit.customer_ids.size() && i < truth.m_bar.size(); ++i) {
        if (fit.anchor[i] != truth.anchor[i]) continue;
        for (Eigen::Index j = 0; j < fit.m_bar[i].size(); ++j) {
            if (static_cast<std::size_t>(j) == fit.anchor[i]) continue;
            xs.push_back(truth.m_bar[i](j));
            ys.push_back(fit.m_bar[i](j));
        }
    }
    if (xs.size() >= 2) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0, mae = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            mx += xs[k];
            my += ys[k];
            mae += std::abs(xs[k] - ys[k]);
        }
        mx /= static_cast<double>(xs.size());
        my /= static_cast<double>(xs.size());
        for (std::size_t k = 0; k < xs.size(); ++k) {
            sxx += (xs[k] - mx) * (xs[k] - mx);
            syy += (ys[k] - my) * (ys[k] - my);
            sxy += (xs[k] - mx) * (ys[k] - my);
        }
        rep.arrival_correlation = sxy / std::sqrt(sxx * syy);
        rep.arrival_mean_abs_error = mae / static_cast<double>(xs.size());
    }
    return rep;
}

nlohmann::json recovery_to_json(const RecoveryReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"parameter", r.name},
                        {"truth", r.truth},
                        {"estimate", r.estimate},
                        {"se", r.se},
                        {"flagged", r.flagged}});
    }
    return {{"parameters", rows},
            {"arrival_correlation", report.arrival_correlation},
            {"arrival_mean_abs_error", report.arrival_mean_abs_error},
            {"loglik", report.loglik},
            {"converged", report.converged}};
}

}  // namespace spillover
