#pragma once

#include "spillover/learning.hpp"
#include "spillover/panel.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace spillover {

enum class QualityShape { None, Symmetric, Asymmetric };

/// Predictors are divided by these before entering utility.
struct Scalings {
    double price = 5000.0;
    double weight = 3000.0;
    double mu = 2.0;
    double sigma2 = 10.0;
    double var_mu = 10.0;
};

/** Which predictors enter the purchase utility.
 *
 * Predictor names: intercept, price, weight, second_half, month_<m>, each name in
 * `extras`, then mu (symmetric) or mu_plus/mu_minus (asymmetric), mu_plus_sq/mu_minus_sq
 * (quadratic), sigma2 (era) and var_mu (bua).
 */
struct UtilitySpec {
    QualityShape shape = QualityShape::Asymmetric;
    bool quadratic = false;
    bool era = false;
    bool bua = false;
    bool intercept = true;
    bool price = true;
    bool weight = true;
    bool second_half = true;
    bool months = true;
    std::vector<std::string> extras;
    /// Predictors with a normally distributed random coefficient; names absent from the design are ignored.
    std::vector<std::string> random = {"intercept", "sigma2", "var_mu"};
    Scalings scalings;

    void validate() const;
    /// null, S, A, A+ERA, A+ERA+BUA, A+ERA+BUA+Q, or a flag list for other combinations.
    std::string label() const;
};

/// Applies a ladder label (case-insensitive: null, s/symmetric, a, a+era, a+era+bua, a+era+bua+q) to `base`.
UtilitySpec with_quality_label(UtilitySpec base, const std::string& label);
/// S, A, A+ERA, A+ERA+BUA, A+ERA+BUA+Q.
std::vector<std::string> utility_ladder();

struct QualityInputs {
    double mu = 0.0;
    double sigma2 = 0.0;
    double var_mu = 0.0;
};

struct QualityCoefficients {
    double mu = 0.0;
    double mu_plus = 0.0;
    double mu_minus = 0.0;
    double mu_plus_sq = 0.0;
    double mu_minus_sq = 0.0;
    double sigma2 = 0.0;
    double var_mu = 0.0;
};

/// Quality part f of the utility, on scaled predictors.
double quality_utility(const QualityInputs& belief, const UtilitySpec& spec, const QualityCoefficients& coef);

/// Logistic function, exact in both tails.
double choice_probability(double v);
/// log(choice_probability(v)) without underflow.
double log_choice_probability(double v);
double purchase_probability(double lambda, double m, double v);
/// Softmax of arrival parameters.
Eigen::VectorXd arrival_softmax(const Eigen::VectorXd& m_bar);

/// Everything a utility row can depend on. Unused fields may stay NaN.
struct CellInputs {
    double price = std::numeric_limits<double>::quiet_NaN();
    double weight_kg = std::numeric_limits<double>::quiet_NaN();
    double second_half = 0.0;
    int month = 0;
    std::span<const double> extra;
    QualityInputs quality;
};

/// Maps a UtilitySpec onto an ordered predictor list.
class Design {
public:
    /// `month_levels` are the months present; the lowest is the reference level.
    Design(const UtilitySpec& spec, std::vector<int> month_levels, std::vector<std::string> covariate_names);

    const UtilitySpec& spec() const { return spec_; }
    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    std::optional<std::size_t> index(const std::string& name) const;
    /// Positions of spec().random that exist in this design.
    std::vector<std::size_t> random_columns() const;

    /// Throws InputError when a required input is NaN.
    void fill(const CellInputs& cell, std::span<double> row) const;

private:
    UtilitySpec spec_;
    std::vector<int> months_;
    std::vector<std::size_t> extra_source_;
    std::vector<std::string> names_;
};

/// Estimation rows of one customer; row t*J + j of X is route j in window period t.
struct CustomerChoiceData {
    std::string id;
    std::vector<std::string> route_ids;
    int first_period = 0;
    int num_periods = 0;
    Eigen::MatrixXd X;
    std::vector<int> chosen;  ///< route index purchased in the period, -1 for none
    std::size_t anchor = 0;   ///< first route ever purchased (route 0 if none)

    std::size_t num_routes() const { return route_ids.size(); }
};

struct ChoiceData {
    Design design;
    std::vector<CustomerChoiceData> customers;
};

/// Rows for every period covered by the trajectories; beliefs are start-of-period states.
ChoiceData build_choice_data(const ChoicePanel& panel, const LearningPass& pass, const UtilitySpec& spec);

struct LikelihoodConfig {
    int draws = 100;
    int halton_skip = 0;
    double tolerance = 1e-8;
    int max_iterations = 1000;
    double lambda = 1.0;
    int multistarts = 3;
    double jitter = 0.1;
    double fd_step = 1e-5;
    bool compute_se = true;
    int threads = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Unconstrained parameters: coefficient means, log standard deviations of the random
/// coefficients (ordered like Design::random_columns) and per-customer arrival parameters.
struct ChoiceParams {
    Eigen::VectorXd beta;
    Eigen::VectorXd log_sd;
    std::vector<Eigen::VectorXd> m_bar;  ///< anchor entry held at 0
};

/// Simulated log-likelihood with Halton heterogeneity draws; threads only split customers.
double simulated_loglik(const ChoiceData& data, const ChoiceParams& params, const LikelihoodConfig& config);

/** Simulated log-likelihood as a function of a packed parameter vector.
 *
 * Halton draws are fixed at construction. Packing order: beta, log_sd, then the
 * non-anchor arrival parameters of each customer in route order.
 */
class SmlObjective {
public:
    SmlObjective(const ChoiceData& data, const LikelihoodConfig& config);

    std::size_t dimension() const { return dimension_; }
    Eigen::VectorXd pack(const ChoiceParams& params) const;
    ChoiceParams unpack(const Eigen::VectorXd& theta) const;
    std::vector<std::string> parameter_names() const;

    double loglik(const Eigen::VectorXd& theta) const;
    /// Log-likelihood and its gradient.
    double loglik(const Eigen::VectorXd& theta, Eigen::VectorXd& gradient) const;
    /// Per-customer contributions, in customer order.
    std::vector<double> customer_logliks(const Eigen::VectorXd& theta) const;

private:
    double customer_term(std::size_t i, const ChoiceParams& p, Eigen::VectorXd* grad_beta, Eigen::VectorXd* grad_sd,
                         Eigen::VectorXd* grad_m) const;

    const ChoiceData& data_;
    LikelihoodConfig config_;
    std::vector<std::size_t> random_;
    std::vector<Eigen::MatrixXd> z_;  ///< per customer: draws x random dimensions
    std::vector<std::size_t> offset_;
    std::size_t dimension_ = 0;
};

struct OptimizerResult {
    Eigen::VectorXd x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// BFGS with Armijo backtracking, minimising f. `fg` returns f(x) and writes the gradient.
OptimizerResult minimize_bfgs(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
                              Eigen::VectorXd x0, double tolerance, int max_iterations);

struct FittedChoice {
    UtilitySpec spec;
    std::vector<std::string> names;
    Eigen::VectorXd beta;
    Eigen::VectorXd beta_se;
    std::vector<std::string> random_names;
    Eigen::VectorXd omega;     ///< variances of the random coefficients
    Eigen::VectorXd omega_se;
    std::vector<std::string> customer_ids;
    std::vector<std::vector<std::string>> route_ids;
    std::vector<Eigen::VectorXd> m_bar;
    std::vector<Eigen::VectorXd> m_bar_se;
    std::vector<std::size_t> anchor;
    double loglik = std::numeric_limits<double>::quiet_NaN();
    int num_parameters = 0;
    int iterations = 0;
    bool converged = false;
    bool se_available = false;
    LikelihoodConfig config;

    /// Estimate of a named coefficient mean; 0 when absent.
    double coefficient(const std::string& name) const;
    /// Variance of a named random coefficient; 0 when fixed or absent.
    double omega_of(const std::string& name) const;
};

/// Default start: zero coefficients, log_sd = log(0.5), arrival parameters from purchase shares.
ChoiceParams default_start(const ChoiceData& data);

FittedChoice estimate_sml(const ChoiceData& data, const LikelihoodConfig& config,
                          const std::optional<ChoiceParams>& init = std::nullopt);

nlohmann::json utility_spec_to_json(const UtilitySpec& spec);
UtilitySpec utility_spec_from_json(const nlohmann::json& j);
nlohmann::json fitted_to_json(const FittedChoice& fit);
/// Accepts the output of fitted_to_json; arrival parameters and SEs are optional.
FittedChoice fitted_from_json(const nlohmann::json& j);

}  // namespace spillover
