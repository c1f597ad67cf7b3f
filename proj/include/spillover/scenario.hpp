#pragma once

#include "spillover/choice.hpp"
#include "spillover/learning.hpp"
#include "spillover/panel.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace spillover {

nlohmann::json prior_to_json(const PriorHyper& prior);
/// Missing keys keep their defaults.
PriorHyper prior_from_json(const nlohmann::json& j, PriorHyper base = {});
nlohmann::json learning_spec_to_json(const LearningSpec& spec);
LearningSpec learning_spec_from_json(const nlohmann::json& j, LearningSpec base = {});

/// Delay distribution N(mean, sd^2) in force from `start_period` (1-based) onward.
struct Regime {
    int start_period = 1;
    double mean = 0.0;
    double sd = 1.0;
};

struct ScenarioRoute {
    std::string id;
    double distance_km = std::numeric_limits<double>::quiet_NaN();
    std::vector<Regime> baseline;
    /// Empty means "same as baseline".
    std::vector<Regime> scenario;

    const std::vector<Regime>& regimes(bool counterfactual) const {
        return counterfactual && !scenario.empty() ? scenario : baseline;
    }
};

/// Non-quality covariates used when evaluating utilities, in raw (unscaled) units.
struct CovariateValues {
    double price = 0.0;
    double weight_kg = 0.0;
    double second_half = 0.0;
    int month = 0;
    std::map<std::string, double> extra;
};

struct ScenarioSpec {
    std::vector<ScenarioRoute> routes;
    std::vector<double> arrival;
    int periods = 40;
    int cohort = 200;
    double price = 2288.0;
    int loss_period = 40;
    LearningSpec learning;
    PriorHyper prior;
    FittedChoice coefficients;
    CovariateValues covariates;
    /// Draw each simulated customer's random coefficients from the fitted distribution.
    bool draw_sensitivities = true;

    /// Throws InputError on bad tiling, arrival not summing to 1, or size mismatches.
    void validate() const;
};

/// Regime in force at period t (1-based).
const Regime& regime_at(const std::vector<Regime>& regimes, int t);

struct ScenarioResult {
    std::vector<std::string> route_ids;
    std::vector<bool> changed;         ///< route's regimes differ between the two runs
    int periods = 0;
    double price = 0.0;
    Eigen::MatrixXd prob_baseline;     ///< periods x routes, cohort-average purchase probability given demand
    Eigen::MatrixXd prob_scenario;
    Eigen::MatrixXd se_baseline;       ///< Monte Carlo standard error of the cohort average
    Eigen::MatrixXd se_scenario;
};

/// Simulates the cohort under both regime sets with common random numbers.
ScenarioResult run_policy_scenario(const ScenarioSpec& spec, std::uint64_t seed, int threads = 1);

struct RevenueLoss {
    double direct = 0.0;
    double indirect = 0.0;
};

/// price x (baseline - scenario) probability at `period` (1-based), summed over changed and unchanged routes.
RevenueLoss revenue_loss(const ScenarioResult& result, int period);

/// Rows period,route,avg_prob_baseline,avg_prob_scenario,revenue_delta.
void write_scenario_csv(const ScenarioResult& result, const std::string& path);

/// `base_dir` resolves a coefficients file given by relative path.
ScenarioSpec scenario_from_json(const nlohmann::json& j, const std::string& base_dir = ".");
ScenarioSpec read_scenario_json(const std::string& path);
nlohmann::json scenario_to_json(const ScenarioSpec& spec);

struct SyntheticConfig {
    int customers = 100;
    int periods = 50;
    int min_routes = 2;
    int max_routes = 6;
    /// True route means are N(grand_mean, route_mean_sd^2); delays are N(route mean, delay_sd^2).
    double grand_mean = 0.0;
    double route_mean_sd = 0.0;
    double delay_sd = 1.0;
    /// Arrival parameters are N(0, arrival_sd^2) before anchoring.
    double arrival_sd = 0.5;
    double min_distance_km = 300.0;
    double max_distance_km = 9000.0;
    /// Extra covariates drawn N(0,1) per cell, stored in the panel under these names.
    std::vector<std::string> covariates = {"x2"};
    /// Remove routes a customer never purchased, and customers who never purchased, from the output.
    bool drop_unused_routes = true;
    LearningSpec learning;
    PriorHyper prior;
    UtilitySpec utility;
    /// Coefficient means and random-coefficient variances by predictor name.
    std::map<std::string, double> beta;
    std::map<std::string, double> omega;

    /// The parameter-recovery setup: 100 x 50, 2-6 routes, N(0,1) delays,
    /// utility intercept + belief mean + x2 with means (-0.5, 0.3, -0.4) and variances (0.6, 0.5, 0).
    static SyntheticConfig recovery_default();
    void validate() const;
};

struct SyntheticTruth {
    std::vector<std::string> names;
    Eigen::VectorXd beta;
    Eigen::VectorXd omega;
    std::vector<Eigen::VectorXd> customer_coefficients;
    std::vector<Eigen::VectorXd> m_bar;  ///< anchored at the first purchased route
    std::vector<std::size_t> anchor;
    std::vector<std::vector<double>> route_means;
};

struct SyntheticResult {
    ChoicePanel panel;
    SyntheticTruth truth;
    /// Beliefs used to generate the choices, restricted to the kept routes. Identical to
    /// run_learning_pass with the same seed and spec when no route was dropped.
    LearningPass beliefs;
};

SyntheticResult generate_synthetic_panel(const SyntheticConfig& config, std::uint64_t seed, int threads = 1);

nlohmann::json synthetic_config_to_json(const SyntheticConfig& config);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);
nlohmann::json truth_to_json(const SyntheticTruth& truth, const ChoicePanel& panel);

struct RecoveryRow {
    std::string name;
    double truth = 0.0;
    double estimate = 0.0;
    double se = 0.0;
    bool flagged = false;  ///< |estimate - truth| > 3 se, or se unavailable
};

struct RecoveryReport {
    std::vector<RecoveryRow> rows;
    double arrival_correlation = 0.0;  ///< correlation of true and estimated non-anchor arrival parameters
    double arrival_mean_abs_error = 0.0;
    double loglik = 0.0;
    bool converged = false;
};

/// Compares a fit against the generating truth; arrival parameters are summarised.
RecoveryReport recovery_report(const SyntheticTruth& truth, const FittedChoice& fit);
nlohmann::json recovery_to_json(const RecoveryReport& report);

}  // namespace spillover
