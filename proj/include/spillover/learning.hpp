#pragma once

#include "spillover/panel.hpp"
#include "spillover/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace spillover {

enum class LearningRule { ShortMemory, Independent, PoolingSimple, PoolingRegression, HierSimple, HierRegression };

/// CLI names: short-memory, independent, pooling, pooling-regression, hier-simple, hier-regression.
std::string rule_name(LearningRule rule);
LearningRule parse_rule(const std::string& name);
bool is_regression(LearningRule rule);

/// Prior on one route's mean and experience variance under independent learning.
struct RoutePrior {
    double mu0 = 0.0;
    double var = 900.0;
    double alpha_sigma = 1.05;
    double delta_sigma = 10.0;
};

/** Hyper-parameters of a customer's beliefs.
 *
 * sigma2 ~ IG(alpha_sigma, delta_sigma), mu ~ N(mu0, sigma_mu2), xi2 ~ IG(alpha_xi, delta_xi),
 * gamma ~ N(gamma0, sigma_gamma2). Defaults are the common flat start-of-sample priors.
 * `routes` optionally overrides the per-route prior used by independent learning; by default
 * a route mean gets the marginal prior N(mu0, sigma_mu2 + E[xi2]).
 */
struct PriorHyper {
    double alpha_sigma = 1.05;
    double delta_sigma = 10.0;
    double mu0 = 0.0;
    double sigma_mu2 = 900.0;
    double alpha_xi = 1.05;
    double delta_xi = 3.0;
    double gamma0 = 0.0;
    double sigma_gamma2 = 900.0;
    std::vector<RoutePrior> routes;

    /// Throws std::invalid_argument unless shapes > 1 (finite prior means) and scales, variances > 0.
    void validate() const;
    RoutePrior route_prior(std::size_t j) const;
};

enum class BeliefVariance {
    Draws,      ///< sample variance of the route-mean draws
    ClosedForm  ///< xi2 plus posterior variance of the grand mean (hierarchical rules only)
};

struct LearningSpec {
    LearningRule rule = LearningRule::HierSimple;
    int gibbs_total = 1000;
    int gibbs_burnin = 500;
    int pre_estimation_periods = 24;
    BeliefVariance belief_variance = BeliefVariance::Draws;
    /// Independent rule: one sigma2 per customer instead of one per route.
    bool independent_shared_sigma2 = false;
    /// Regression rules: reject customers whose routes all share one distance.
    bool check_slope_identification = true;
    /// Distances enter the regression in these units.
    double distance_unit_km = 1000.0;

    void validate() const;
};

/** A customer's beliefs at the start of a period.
 *
 * Route vectors are indexed like CustomerPanel::routes. Scalars that a rule does
 * not carry are NaN (mu and xi2 for independent learning, every variance for short memory).
 */
struct BeliefState {
    std::vector<double> mu_j;      ///< reported mean quality, theta_j + gamma * d_j under regression
    std::vector<double> var_mu_j;  ///< belief uncertainty Var(mu_j)
    std::vector<double> sigma2_j;  ///< experience variance used for route j
    std::vector<double> theta_j;   ///< route intercepts (regression rules)
    double mu = std::numeric_limits<double>::quiet_NaN();
    double xi2 = std::numeric_limits<double>::quiet_NaN();
    double gamma = std::numeric_limits<double>::quiet_NaN();
    /// Short memory: whether route j has ever been delivered.
    std::vector<bool> observed;
};

/// Post-burn-in draws of the per-route signal mean and variance; rows are draws, columns routes.
struct PosteriorDraws {
    Eigen::MatrixXd route_mean;
    Eigen::MatrixXd route_sigma2;
    Eigen::VectorXd sigma2;
    Eigen::VectorXd mu;
    Eigen::VectorXd xi2;
    Eigen::VectorXd gamma;
    /// Independent rule: route-mean draws only; scalar vectors above are empty.
};

/// Per-route count, mean and centred sum of squares of delivered delays.
struct RouteStats {
    int n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double q);
    /// Sum over signals of (Q - m)^2.
    double sum_sq(double m) const { return m2 + n * (mean - m) * (mean - m); }
};

std::vector<RouteStats> route_stats(std::span<const QualitySignal> signals, std::size_t num_routes);

/// Mean of mu_j given (mu, sigma2, xi2) and n signals averaging qbar.
double conditional_route_mean(int n, double qbar, double mu, double sigma2, double xi2);
double conditional_route_variance(int n, double sigma2, double xi2);
/// E[sigma2 | route means, signals] for the IG conjugate block.
double expected_sigma2(const PriorHyper& prior, std::span<const RouteStats> stats,
                       std::span<const double> route_means);

struct BeliefUpdate {
    BeliefState state;
    PosteriorDraws draws;
};

/// Route geometry for a customer: distances in km (NaN allowed unless a regression rule is used).
struct RouteSetup {
    std::vector<double> distance_km;
    std::vector<std::uint64_t> tags;  ///< stream tags, normally hash_tag(route_id)

    std::size_t size() const { return distance_km.size(); }
    static RouteSetup from_customer(const CustomerPanel& customer);
};

/// Start state implied by the prior alone.
BeliefState prior_belief(const LearningSpec& spec, const PriorHyper& prior, const RouteSetup& routes);

BeliefUpdate gibbs_update_simple(const BeliefState& start, const PriorHyper& prior,
                                 std::span<const QualitySignal> signals, const RouteSetup& routes,
                                 const LearningSpec& spec, SeededStream& stream);
BeliefUpdate gibbs_update_regression(const BeliefState& start, const PriorHyper& prior,
                                     std::span<const QualitySignal> signals, const RouteSetup& routes,
                                     const LearningSpec& spec, SeededStream& stream);
BeliefUpdate update_pooling(const BeliefState& start, const PriorHyper& prior,
                            std::span<const QualitySignal> signals, const RouteSetup& routes,
                            const LearningSpec& spec, SeededStream& stream);
/// Updates only the route(s) in `routes_to_update`; the others keep their previous state.
BeliefUpdate update_independent(const BeliefState& start, const PriorHyper& prior,
                                std::span<const QualitySignal> signals, const RouteSetup& routes,
                                const LearningSpec& spec, SeededStream& stream,
                                std::span<const std::size_t> routes_to_update);
BeliefState update_short_memory(const BeliefState& state, std::span<const QualitySignal> signals_this_period);

/// Moment-match a positive sample to IG: alpha = m^2/v + 2, delta = m (alpha - 1).
std::pair<double, double> match_inverse_gamma(std::span<const double> draws);

/// Posterior at the end of the pre-estimation window, expressed as a prior.
PriorHyper pre_estimate(std::span<const QualitySignal> pre_sample, const RouteSetup& routes,
                        const LearningSpec& spec, const PriorHyper& initial, SeededStream stream);

/** Incremental belief tracker for one customer.
 *
 * belief() is the state at the start of the current period. Deliveries passed to
 * observe() during period t are folded in by end_period(t), so they shape the belief
 * from period t+1 on. A period without deliveries leaves the state untouched.
 */
class CustomerLearner {
public:
    CustomerLearner(const LearningSpec& spec, PriorHyper prior, RouteSetup routes, SeededStream stream,
                    BeliefState start);

    const BeliefState& belief() const { return state_; }
    const PosteriorDraws& draws() const { return draws_; }
    bool has_draws() const { return draws_.route_mean.size() > 0; }
    std::span<const QualitySignal> signals() const { return signals_; }

    void observe(std::size_t route, int period, double delay);
    void end_period(int period);

private:
    LearningSpec spec_;
    PriorHyper prior_;
    RouteSetup routes_;
    SeededStream stream_;
    BeliefState state_;
    PosteriorDraws draws_;
    std::vector<QualitySignal> signals_;
    std::vector<QualitySignal> pending_;
};

struct BeliefTrajectory {
    std::string customer_id;
    int first_period = 0;
    /// states[k] is the belief at the start of period first_period + k.
    std::vector<BeliefState> states;
    PriorHyper prior;
    PosteriorDraws final_draws;

    const BeliefState& at(int period) const;
};

struct LearningPass {
    LearningSpec spec;
    std::vector<BeliefTrajectory> customers;
};

/// Stream for one customer's learning, derived from the global seed.
SeededStream learning_stream(std::uint64_t seed, const std::string& customer_id);
/// Stream handed to the customer's CustomerLearner by run_learning_pass.
SeededStream learner_stream(std::uint64_t seed, const std::string& customer_id);

/// Pre-estimate each customer's prior (when the window is non-empty) and run the sequential pass.
LearningPass run_learning_pass(const ChoicePanel& panel, const LearningSpec& spec, const PriorHyper& initial,
                               std::uint64_t seed, int threads = 1);

/// Sum over estimation-window signals of the one-step-ahead predictive log density.
double quality_loglik(const ChoicePanel& panel, const LearningPass& pass);

struct DicResult {
    double dic = 0.0;
    double d_bar = 0.0;
    double d_hat = 0.0;
    double p_d = 0.0;
};

/// DIC from each customer's final chain over estimation-window signals.
DicResult quality_dic(const ChoicePanel& panel, const LearningPass& pass);

void write_trajectory_csv(const ChoicePanel& panel, const LearningPass& pass, const std::string& path);
/// Trajectories keyed positionally like `panel.customers`; only the state fields are restored.
LearningPass read_trajectory_csv(const ChoicePanel& panel, const std::string& path, LearningRule rule);

}  // namespace spillover
