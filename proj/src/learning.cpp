#include "spillover/learning.hpp"

#include "spillover/csv.hpp"
#include "spillover/errors.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

namespace spillover {

namespace {

constexpr std::uint64_t kTagPre = 0x505245u;    // "PRE"
constexpr std::uint64_t kTagGibbs = 0x474942u;  // "GIB"
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double ig_mean(double alpha, double delta) { return delta / (alpha - 1.0); }

double sample_variance(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double m = v.mean();
    return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

int kept_draws(const LearningSpec& spec) { return spec.gibbs_total - spec.gibbs_burnin; }

double draw_ig_checked(SeededStream& stream, double shape, double scale, const char* block) {
    if (!std::isfinite(scale)) {
        throw NumericalError(std::string(block) + " block: inverse-gamma scale overflowed (shape=" +
                             std::to_string(shape) + ", scale=" + std::to_string(scale) + ")");
    }
    return inverse_gamma_draw(stream, shape, scale);
}

double or_default(double value, double fallback) { return std::isfinite(value) ? value : fallback; }

std::vector<double> scaled_distances(const RouteSetup& routes, const LearningSpec& spec) {
    std::vector<double> d(routes.size());
    for (std::size_t j = 0; j < routes.size(); ++j) {
        if (!std::isfinite(routes.distance_km[j])) {
            throw InputError("regression learning needs a distance for every route");
        }
        d[j] = routes.distance_km[j] / spec.distance_unit_km;
    }
    return d;
}

void require_routes(const RouteSetup& routes) {
    if (routes.size() == 0) throw std::invalid_argument("belief update needs a non-empty route set");
}

/// Fill the reported route summaries from route-mean draws.
void summarise_routes(const PosteriorDraws& draws, BeliefState& state) {
    const auto J = static_cast<std::size_t>(draws.route_mean.cols());
    state.mu_j.assign(J, kNaN);
    state.var_mu_j.assign(J, kNaN);
    state.sigma2_j.assign(J, kNaN);
    for (std::size_t j = 0; j < J; ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        state.mu_j[j] = draws.route_mean.col(col).mean();
        state.var_mu_j[j] = sample_variance(draws.route_mean.col(col));
        state.sigma2_j[j] = draws.route_sigma2.col(col).mean();
    }
}

PosteriorDraws allocate_draws(int kept, std::size_t J) {
    PosteriorDraws d;
    d.route_mean.resize(kept, static_cast<Eigen::Index>(J));
    d.route_sigma2.resize(kept, static_cast<Eigen::Index>(J));
    d.sigma2.resize(kept);
    d.mu.resize(kept);
    d.xi2.resize(kept);
    d.gamma.resize(kept);
    return d;
}

}  // namespace

std::string rule_name(LearningRule rule) {
    switch (rule) {
        case LearningRule::ShortMemory: return "short-memory";
        case LearningRule::Independent: return "independent";
        case LearningRule::PoolingSimple: return "pooling";
        case LearningRule::PoolingRegression: return "pooling-regression";
        case LearningRule::HierSimple: return "hier-simple";
        case LearningRule::HierRegression: return "hier-regression";
    }
    return "unknown";
}

LearningRule parse_rule(const std::string& name) {
    for (auto rule : {LearningRule::ShortMemory, LearningRule::Independent, LearningRule::PoolingSimple,
                      LearningRule::PoolingRegression, LearningRule::HierSimple, LearningRule::HierRegression}) {
        if (rule_name(rule) == name) return rule;
    }
    if (name == "spillover") return LearningRule::HierSimple;
    throw InputError("unknown learning rule '" + name + "'");
}

bool is_regression(LearningRule rule) {
    return rule == LearningRule::PoolingRegression || rule == LearningRule::HierRegression;
}

void PriorHyper::validate() const {
    const auto check_ig = [](double alpha, double delta, const char* what) {
        if (!(alpha > 1.0 && delta > 0.0) || !std::isfinite(alpha) || !std::isfinite(delta)) {
            throw std::invalid_argument(std::string(what) + " prior needs shape > 1 and scale > 0");
        }
    };
    check_ig(alpha_sigma, delta_sigma, "sigma2");
    check_ig(alpha_xi, delta_xi, "xi2");
    if (!(sigma_mu2 > 0.0) || !(sigma_gamma2 > 0.0) || !std::isfinite(mu0) || !std::isfinite(gamma0)) {
        throw std::invalid_argument("normal priors need a finite mean and positive variance");
    }
    for (const auto& r : routes) {
        check_ig(r.alpha_sigma, r.delta_sigma, "route sigma2");
        if (!(r.var > 0.0) || !std::isfinite(r.mu0)) throw std::invalid_argument("route prior needs var > 0");
    }
}

RoutePrior PriorHyper::route_prior(std::size_t j) const {
    if (j < routes.size()) return routes[j];
    return {mu0, sigma_mu2 + delta_xi / (alpha_xi - 1.0), alpha_sigma, delta_sigma};
}

void LearningSpec::validate() const {
    if (gibbs_burnin < 0 || gibbs_total <= gibbs_burnin) {
        throw std::invalid_argument("gibbs schedule needs 0 <= burnin < total");
    }
    if (pre_estimation_periods < 0) throw std::invalid_argument("pre_estimation_periods must be >= 0");
    if (!(distance_unit_km > 0.0)) throw std::invalid_argument("distance_unit_km must be positive");
}

void RouteStats::add(double q) {
    ++n;
    const double delta = q - mean;
    mean += delta / n;
    m2 += delta * (q - mean);
}

std::vector<RouteStats> route_stats(std::span<const QualitySignal> signals, std::size_t num_routes) {
    std::vector<RouteStats> stats(num_routes);
    for (const auto& s : signals) {
        if (s.route >= num_routes) throw std::invalid_argument("signal route index out of range");
        if (!std::isfinite(s.delay)) throw std::invalid_argument("signal delay must be finite");
        stats[s.route].add(s.delay);
    }
    return stats;
}

double conditional_route_mean(int n, double qbar, double mu, double sigma2, double xi2) {
    if (n == 0) return mu;
    return (n * xi2 * qbar + sigma2 * mu) / (n * xi2 + sigma2);
}

double conditional_route_variance(int n, double sigma2, double xi2) {
    return xi2 * sigma2 / (n * xi2 + sigma2);
}

double expected_sigma2(const PriorHyper& prior, std::span<const RouteStats> stats,
                       std::span<const double> route_means) {
    double ss = 0.0;
    double n = 0.0;
    for (std::size_t j = 0; j < stats.size(); ++j) {
        ss += stats[j].sum_sq(route_means[j]);
        n += stats[j].n;
    }
    return (prior.delta_sigma + 0.5 * ss) / (prior.alpha_sigma - 1.0 + 0.5 * n);
}

RouteSetup RouteSetup::from_customer(const CustomerPanel& customer) {
    RouteSetup setup;
    for (const auto& r : customer.routes) {
        setup.distance_km.push_back(r.distance_km);
        setup.tags.push_back(hash_tag(r.id));
    }
    return setup;
}

BeliefState prior_belief(const LearningSpec& spec, const PriorHyper& prior, const RouteSetup& routes) {
    const auto J = routes.size();
    BeliefState s;
    s.observed.assign(J, false);
    const double sigma2 = ig_mean(prior.alpha_sigma, prior.delta_sigma);
    const double xi2 = ig_mean(prior.alpha_xi, prior.delta_xi);
    switch (spec.rule) {
        case LearningRule::ShortMemory:
            s.mu_j.assign(J, 0.0);
            s.var_mu_j.assign(J, kNaN);
            s.sigma2_j.assign(J, kNaN);
            break;
        case LearningRule::Independent:
            for (std::size_t j = 0; j < J; ++j) {
                const auto rp = prior.route_prior(j);
                s.mu_j.push_back(rp.mu0);
                s.var_mu_j.push_back(rp.var);
                s.sigma2_j.push_back(spec.independent_shared_sigma2 ? sigma2 : ig_mean(rp.alpha_sigma, rp.delta_sigma));
            }
            break;
        case LearningRule::PoolingSimple:
            s.mu_j.assign(J, prior.mu0);
            s.var_mu_j.assign(J, prior.sigma_mu2);
            s.sigma2_j.assign(J, sigma2);
            s.mu = prior.mu0;
            break;
        case LearningRule::HierSimple:
            s.mu_j.assign(J, prior.mu0);
            s.var_mu_j.assign(J, xi2 + prior.sigma_mu2);
            s.sigma2_j.assign(J, sigma2);
            s.mu = prior.mu0;
            s.xi2 = xi2;
            break;
        case LearningRule::PoolingRegression:
        case LearningRule::HierRegression: {
            const auto d = scaled_distances(routes, spec);
            const bool hier = spec.rule == LearningRule::HierRegression;
            for (std::size_t j = 0; j < J; ++j) {
                s.theta_j.push_back(prior.mu0);
                s.mu_j.push_back(prior.mu0 + prior.gamma0 * d[j]);
                s.var_mu_j.push_back((hier ? xi2 : 0.0) + prior.sigma_mu2 + d[j] * d[j] * prior.sigma_gamma2);
            }
            s.sigma2_j.assign(J, sigma2);
            s.mu = prior.mu0;
            s.gamma = prior.gamma0;
            if (hier) s.xi2 = xi2;
            break;
        }
    }
    return s;
}

BeliefUpdate gibbs_update_simple(const BeliefState& start, const PriorHyper& prior,
                                 std::span<const QualitySignal> signals, const RouteSetup& routes,
                                 const LearningSpec& spec, SeededStream& stream) {
    require_routes(routes);
    if (spec.rule != LearningRule::HierSimple) throw std::invalid_argument("gibbs_update_simple needs hier-simple");
    const auto J = routes.size();
    const auto stats = route_stats(signals, J);
    int n_total = 0;
    for (const auto& st : stats) n_total += st.n;

    std::vector<double> mu_j(J);
    for (std::size_t j = 0; j < J; ++j) {
        mu_j[j] = j < start.mu_j.size() ? or_default(start.mu_j[j], prior.mu0) : prior.mu0;
    }
    double sigma2 = start.sigma2_j.empty() ? kNaN : start.sigma2_j[0];
    sigma2 = or_default(sigma2, ig_mean(prior.alpha_sigma, prior.delta_sigma));
    double mu = or_default(start.mu, prior.mu0);
    double xi2 = or_default(start.xi2, ig_mean(prior.alpha_xi, prior.delta_xi));

    const int kept = kept_draws(spec);
    auto draws = allocate_draws(kept, J);
    const double shape_sigma = prior.alpha_sigma + 0.5 * n_total;
    const double shape_xi = prior.alpha_xi + 0.5 * static_cast<double>(J);
    for (int it = 0; it < spec.gibbs_total; ++it) {
        for (std::size_t j = 0; j < J; ++j) {
            const auto& st = stats[j];
            mu_j[j] = normal_draw(stream, conditional_route_mean(st.n, st.mean, mu, sigma2, xi2),
                                  std::sqrt(conditional_route_variance(st.n, sigma2, xi2)));
        }
        double ss = 0.0;
        for (std::size_t j = 0; j < J; ++j) ss += stats[j].sum_sq(mu_j[j]);
        sigma2 = draw_ig_checked(stream, shape_sigma, prior.delta_sigma + 0.5 * ss, "sigma2");

        double mu_bar = 0.0;
        for (double m : mu_j) mu_bar += m;
        mu_bar /= static_cast<double>(J);
        const double denom = J * prior.sigma_mu2 + xi2;
        mu = normal_draw(stream, (J * prior.sigma_mu2 * mu_bar + xi2 * prior.mu0) / denom,
                         std::sqrt(prior.sigma_mu2 * xi2 / denom));

        double spread = 0.0;
        for (double m : mu_j) spread += (m - mu) * (m - mu);
        xi2 = draw_ig_checked(stream, shape_xi, prior.delta_xi + 0.5 * spread, "xi2");

        if (it >= spec.gibbs_burnin) {
            const int k = it - spec.gibbs_burnin;
            for (std::size_t j = 0; j < J; ++j) {
                draws.route_mean(k, static_cast<Eigen::Index>(j)) = mu_j[j];
                draws.route_sigma2(k, static_cast<Eigen::Index>(j)) = sigma2;
            }
            draws.sigma2(k) = sigma2;
            draws.mu(k) = mu;
            draws.xi2(k) = xi2;
            draws.gamma(k) = kNaN;
        }
    }

    BeliefUpdate out;
    summarise_routes(draws, out.state);
    out.state.mu = draws.mu.mean();
    out.state.xi2 = draws.xi2.mean();
    out.state.observed.assign(J, false);
    if (spec.belief_variance == BeliefVariance::ClosedForm) {
        const double v = out.state.xi2 + sample_variance(draws.mu);
        out.state.var_mu_j.assign(J, v);
    }
    out.draws = std::move(draws);
    return out;
}

BeliefUpdate gibbs_update_regression(const BeliefState& start, const PriorHyper& prior,
                                     std::span<const QualitySignal> signals, const RouteSetup& routes,
                                     const LearningSpec& spec, SeededStream& stream) {
    require_routes(routes);
    if (spec.rule != LearningRule::HierRegression) {
        throw std::invalid_argument("gibbs_update_regression needs hier-regression");
    }
    const auto J = routes.size();
    const auto d = scaled_distances(routes, spec);
    const auto stats = route_stats(signals, J);
    int n_total = 0;
    double n_d = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
        n_total += stats[j].n;
        n_d += stats[j].n * d[j] * d[j];
    }

    std::vector<double> theta(J);
    for (std::size_t j = 0; j < J; ++j) {
        theta[j] = j < start.theta_j.size() ? or_default(start.theta_j[j], prior.mu0) : prior.mu0;
    }
    double gamma = or_default(start.gamma, prior.gamma0);
    double sigma2 = start.sigma2_j.empty() ? kNaN : start.sigma2_j[0];
    sigma2 = or_default(sigma2, ig_mean(prior.alpha_sigma, prior.delta_sigma));
    double mu = or_default(start.mu, prior.mu0);
    double xi2 = or_default(start.xi2, ig_mean(prior.alpha_xi, prior.delta_xi));

    const int kept = kept_draws(spec);
    auto draws = allocate_draws(kept, J);
    Eigen::MatrixXd theta_draws(kept, static_cast<Eigen::Index>(J));
    const double shape_sigma = prior.alpha_sigma + 0.5 * n_total;
    const double shape_xi = prior.alpha_xi + 0.5 * static_cast<double>(J);
    for (int it = 0; it < spec.gibbs_total; ++it) {
        for (std::size_t j = 0; j < J; ++j) {
            const auto& st = stats[j];
            const double g_bar = st.mean - gamma * d[j];
            theta[j] = normal_draw(stream, conditional_route_mean(st.n, g_bar, mu, sigma2, xi2),
                                   std::sqrt(conditional_route_variance(st.n, sigma2, xi2)));
        }
        double g_d = 0.0;
        for (std::size_t j = 0; j < J; ++j) g_d += stats[j].n * (stats[j].mean - theta[j]) * d[j];
        const double gdenom = n_d * prior.sigma_gamma2 + sigma2;
        gamma = normal_draw(stream, (prior.sigma_gamma2 * g_d + sigma2 * prior.gamma0) / gdenom,
                            std::sqrt(prior.sigma_gamma2 * sigma2 / gdenom));

        double ss = 0.0;
        for (std::size_t j = 0; j < J; ++j) ss += stats[j].sum_sq(theta[j] + gamma * d[j]);
        sigma2 = draw_ig_checked(stream, shape_sigma, prior.delta_sigma + 0.5 * ss, "sigma2");

        double theta_bar = 0.0;
        for (double t : theta) theta_bar += t;
        theta_bar /= static_cast<double>(J);
        const double denom = J * prior.sigma_mu2 + xi2;
        mu = normal_draw(stream, (J * prior.sigma_mu2 * theta_bar + xi2 * prior.mu0) / denom,
                         std::sqrt(prior.sigma_mu2 * xi2 / denom));

        double spread = 0.0;
        for (double t : theta) spread += (t - mu) * (t - mu);
        xi2 = draw_ig_checked(stream, shape_xi, prior.delta_xi + 0.5 * spread, "xi2");

        if (it >= spec.gibbs_burnin) {
            const int k = it - spec.gibbs_burnin;
            for (std::size_t j = 0; j < J; ++j) {
                const auto c = static_cast<Eigen::Index>(j);
                theta_draws(k, c) = theta[j];
                draws.route_mean(k, c) = theta[j] + gamma * d[j];
                draws.route_sigma2(k, c) = sigma2;
            }
            draws.sigma2(k) = sigma2;
            draws.mu(k) = mu;
            draws.xi2(k) = xi2;
            draws.gamma(k) = gamma;
        }
    }

    BeliefUpdate out;
    summarise_routes(draws, out.state);
    for (std::size_t j = 0; j < J; ++j) out.state.theta_j.push_back(theta_draws.col(static_cast<Eigen::Index>(j)).mean());
    out.state.mu = draws.mu.mean();
    out.state.xi2 = draws.xi2.mean();
    out.state.gamma = draws.gamma.mean();
    out.state.observed.assign(J, false);
    if (spec.belief_variance == BeliefVariance::ClosedForm) {
        const double vm = sample_variance(draws.mu);
        const double vg = sample_variance(draws.gamma);
        for (std::size_t j = 0; j < J; ++j) out.state.var_mu_j[j] = out.state.xi2 + vm + d[j] * d[j] * vg;
    }
    out.draws = std::move(draws);
    return out;
}

BeliefUpdate update_pooling(const BeliefState& start, const PriorHyper& prior,
                            std::span<const QualitySignal> signals, const RouteSetup& routes,
                            const LearningSpec& spec, SeededStream& stream) {
    require_routes(routes);
    const bool regression = spec.rule == LearningRule::PoolingRegression;
    if (!regression && spec.rule != LearningRule::PoolingSimple) {
        throw std::invalid_argument("update_pooling needs a pooling rule");
    }
    const auto J = routes.size();
    const std::vector<double> d = regression ? scaled_distances(routes, spec) : std::vector<double>(J, 0.0);
    const auto stats = route_stats(signals, J);
    int n_total = 0;
    double n_d = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
        n_total += stats[j].n;
        n_d += stats[j].n * d[j] * d[j];
    }

    double theta = or_default(start.mu, prior.mu0);
    double gamma = regression ? or_default(start.gamma, prior.gamma0) : 0.0;
    double sigma2 = start.sigma2_j.empty() ? kNaN : start.sigma2_j[0];
    sigma2 = or_default(sigma2, ig_mean(prior.alpha_sigma, prior.delta_sigma));

    const int kept = kept_draws(spec);
    auto draws = allocate_draws(kept, J);
    const double shape_sigma = prior.alpha_sigma + 0.5 * n_total;
    for (int it = 0; it < spec.gibbs_total; ++it) {
        double resid_sum = 0.0;
        for (std::size_t j = 0; j < J; ++j) resid_sum += stats[j].n * (stats[j].mean - gamma * d[j]);
        const double denom = n_total * prior.sigma_mu2 + sigma2;
        theta = normal_draw(stream, (prior.sigma_mu2 * resid_sum + sigma2 * prior.mu0) / denom,
                            std::sqrt(prior.sigma_mu2 * sigma2 / denom));
        if (regression) {
            double g_d = 0.0;
            for (std::size_t j = 0; j < J; ++j) g_d += stats[j].n * (stats[j].mean - theta) * d[j];
            const double gdenom = n_d * prior.sigma_gamma2 + sigma2;
            gamma = normal_draw(stream, (prior.sigma_gamma2 * g_d + sigma2 * prior.gamma0) / gdenom,
                                std::sqrt(prior.sigma_gamma2 * sigma2 / gdenom));
        }
        double ss = 0.0;
        for (std::size_t j = 0; j < J; ++j) ss += stats[j].sum_sq(theta + gamma * d[j]);
        sigma2 = draw_ig_checked(stream, shape_sigma, prior.delta_sigma + 0.5 * ss, "sigma2");

        if (it >= spec.gibbs_burnin) {
            const int k = it - spec.gibbs_burnin;
            for (std::size_t j = 0; j < J; ++j) {
                draws.route_mean(k, static_cast<Eigen::Index>(j)) = theta + gamma * d[j];
                draws.route_sigma2(k, static_cast<Eigen::Index>(j)) = sigma2;
            }
            draws.sigma2(k) = sigma2;
            draws.mu(k) = theta;
            draws.xi2(k) = kNaN;
            draws.gamma(k) = regression ? gamma : kNaN;
        }
    }

    BeliefUpdate out;
    summarise_routes(draws, out.state);
    out.state.mu = draws.mu.mean();
    out.state.observed.assign(J, false);
    if (regression) {
        out.state.gamma = draws.gamma.mean();
        out.state.theta_j.assign(J, out.state.mu);
    }
    out.draws = std::move(draws);
    return out;
}

BeliefUpdate update_independent(const BeliefState& start, const PriorHyper& prior,
                                std::span<const QualitySignal> signals, const RouteSetup& routes,
                                const LearningSpec& spec, SeededStream& stream,
                                std::span<const std::size_t> routes_to_update) {
    require_routes(routes);
    if (spec.rule != LearningRule::Independent) throw std::invalid_argument("update_independent needs independent");
    const auto J = routes.size();
    const auto stats = route_stats(signals, J);
    const int kept = kept_draws(spec);

    BeliefUpdate out;
    out.state = start.mu_j.size() == J ? start : prior_belief(spec, prior, routes);
    out.draws = allocate_draws(kept, J);
    out.draws.route_mean.setConstant(kNaN);
    out.draws.route_sigma2.setConstant(kNaN);
    out.draws.sigma2.resize(0);
    out.draws.mu.resize(0);
    out.draws.xi2.resize(0);
    out.draws.gamma.resize(0);

    if (spec.independent_shared_sigma2) {
        std::vector<double> mu_j(J);
        for (std::size_t j = 0; j < J; ++j) mu_j[j] = or_default(out.state.mu_j[j], prior.route_prior(j).mu0);
        double sigma2 = or_default(out.state.sigma2_j.empty() ? kNaN : out.state.sigma2_j[0],
                                   ig_mean(prior.alpha_sigma, prior.delta_sigma));
        int n_total = 0;
        for (const auto& st : stats) n_total += st.n;
        out.draws.sigma2.resize(kept);
        for (int it = 0; it < spec.gibbs_total; ++it) {
            for (std::size_t j = 0; j < J; ++j) {
                const auto rp = prior.route_prior(j);
                mu_j[j] = normal_draw(stream, conditional_route_mean(stats[j].n, stats[j].mean, rp.mu0, sigma2, rp.var),
                                      std::sqrt(conditional_route_variance(stats[j].n, sigma2, rp.var)));
            }
            double ss = 0.0;
            for (std::size_t j = 0; j < J; ++j) ss += stats[j].sum_sq(mu_j[j]);
            sigma2 = draw_ig_checked(stream, prior.alpha_sigma + 0.5 * n_total, prior.delta_sigma + 0.5 * ss, "sigma2");
            if (it >= spec.gibbs_burnin) {
                const int k = it - spec.gibbs_burnin;
                for (std::size_t j = 0; j < J; ++j) {
                    out.draws.route_mean(k, static_cast<Eigen::Index>(j)) = mu_j[j];
                    out.draws.route_sigma2(k, static_cast<Eigen::Index>(j)) = sigma2;
                }
                out.draws.sigma2(k) = sigma2;
            }
        }
        summarise_routes(out.draws, out.state);
        out.state.observed.assign(J, false);
        return out;
    }

    for (std::size_t j : routes_to_update) {
        if (j >= J) throw std::invalid_argument("route index out of range");
        const auto rp = prior.route_prior(j);
        const auto& st = stats[j];
        auto route_stream = stream.child(routes.tags[j]);
        double mu_j = or_default(out.state.mu_j[j], rp.mu0);
        double sigma2 = or_default(out.state.sigma2_j[j], ig_mean(rp.alpha_sigma, rp.delta_sigma));
        const auto col = static_cast<Eigen::Index>(j);
        for (int it = 0; it < spec.gibbs_total; ++it) {
            mu_j = normal_draw(route_stream, conditional_route_mean(st.n, st.mean, rp.mu0, sigma2, rp.var),
                               std::sqrt(conditional_route_variance(st.n, sigma2, rp.var)));
            sigma2 = draw_ig_checked(route_stream, rp.alpha_sigma + 0.5 * st.n,
                                     rp.delta_sigma + 0.5 * st.sum_sq(mu_j), "sigma2");
            if (it >= spec.gibbs_burnin) {
                out.draws.route_mean(it - spec.gibbs_burnin, col) = mu_j;
                out.draws.route_sigma2(it - spec.gibbs_burnin, col) = sigma2;
            }
        }
        out.state.mu_j[j] = out.draws.route_mean.col(col).mean();
        out.state.var_mu_j[j] = sample_variance(out.draws.route_mean.col(col));
        out.state.sigma2_j[j] = out.draws.route_sigma2.col(col).mean();
    }
    return out;
}

BeliefState update_short_memory(const BeliefState& state, std::span<const QualitySignal> signals_this_period) {
    BeliefState out = state;
    if (out.observed.size() < out.mu_j.size()) out.observed.resize(out.mu_j.size(), false);
    for (const auto& s : signals_this_period) {
        if (s.route >= out.mu_j.size()) throw std::invalid_argument("signal route index out of range");
        out.mu_j[s.route] = s.delay;
        out.observed[s.route] = true;
    }
    return out;
}

std::pair<double, double> match_inverse_gamma(std::span<const double> draws) {
    if (draws.size() < 2) throw NumericalError("moment matching needs at least two draws");
    double m = 0.0;
    for (double x : draws) m += x;
    m /= static_cast<double>(draws.size());
    double v = 0.0;
    for (double x : draws) v += (x - m) * (x - m);
    v /= static_cast<double>(draws.size() - 1);
    if (!(v > 0.0) || !std::isfinite(v)) {
        throw NumericalError("degenerate chain (zero draw variance) while moment matching; use a longer chain");
    }
    const double alpha = m * m / v + 2.0;
    return {alpha, m * (alpha - 1.0)};
}

namespace {

std::pair<double, double> match_normal(const Eigen::VectorXd& draws) {
    const double v = sample_variance(draws);
    if (!(v > 0.0)) {
        throw NumericalError("degenerate chain (zero draw variance) while moment matching; use a longer chain");
    }
    return {draws.mean(), v};
}

std::pair<double, double> match_ig(const Eigen::VectorXd& draws) {
    return match_inverse_gamma(std::span<const double>(draws.data(), static_cast<std::size_t>(draws.size())));
}

std::vector<std::size_t> routes_with_data(std::span<const QualitySignal> signals) {
    std::set<std::size_t> seen;
    for (const auto& s : signals) seen.insert(s.route);
    return {seen.begin(), seen.end()};
}

BeliefUpdate dispatch_update(const BeliefState& start, const PriorHyper& prior,
                             std::span<const QualitySignal> all_signals, std::span<const QualitySignal> fresh,
                             const RouteSetup& routes, const LearningSpec& spec, SeededStream& stream) {
    switch (spec.rule) {
        case LearningRule::HierSimple: return gibbs_update_simple(start, prior, all_signals, routes, spec, stream);
        case LearningRule::HierRegression:
            return gibbs_update_regression(start, prior, all_signals, routes, spec, stream);
        case LearningRule::PoolingSimple:
        case LearningRule::PoolingRegression: return update_pooling(start, prior, all_signals, routes, spec, stream);
        case LearningRule::Independent: {
            const auto touched = routes_with_data(fresh);
            return update_independent(start, prior, all_signals, routes, spec, stream, touched);
        }
        case LearningRule::ShortMemory: break;
    }
    throw std::invalid_argument("rule has no sampler");
}

}  // namespace

PriorHyper pre_estimate(std::span<const QualitySignal> pre_sample, const RouteSetup& routes,
                        const LearningSpec& spec, const PriorHyper& initial, SeededStream stream) {
    initial.validate();
    if (pre_sample.empty() || spec.rule == LearningRule::ShortMemory) return initial;
    const auto start = prior_belief(spec, initial, routes);
    const auto update = dispatch_update(start, initial, pre_sample, pre_sample, routes, spec, stream);
    const auto& dr = update.draws;

    PriorHyper out = initial;
    switch (spec.rule) {
        case LearningRule::HierSimple:
        case LearningRule::HierRegression:
            std::tie(out.alpha_xi, out.delta_xi) = match_ig(dr.xi2);
            [[fallthrough]];
        case LearningRule::PoolingSimple:
        case LearningRule::PoolingRegression:
            std::tie(out.alpha_sigma, out.delta_sigma) = match_ig(dr.sigma2);
            std::tie(out.mu0, out.sigma_mu2) = match_normal(dr.mu);
            if (is_regression(spec.rule)) std::tie(out.gamma0, out.sigma_gamma2) = match_normal(dr.gamma);
            break;
        case LearningRule::Independent: {
            out.routes.clear();
            for (std::size_t j = 0; j < routes.size(); ++j) out.routes.push_back(initial.route_prior(j));
            if (spec.independent_shared_sigma2) {
                std::tie(out.alpha_sigma, out.delta_sigma) = match_ig(dr.sigma2);
                for (auto& rp : out.routes) {
                    rp.alpha_sigma = out.alpha_sigma;
                    rp.delta_sigma = out.delta_sigma;
                }
            }
            for (std::size_t j : routes_with_data(pre_sample)) {
                const auto col = static_cast<Eigen::Index>(j);
                auto& rp = out.routes[j];
                std::tie(rp.mu0, rp.var) = match_normal(dr.route_mean.col(col));
                if (!spec.independent_shared_sigma2) {
                    std::tie(rp.alpha_sigma, rp.delta_sigma) = match_ig(dr.route_sigma2.col(col));
                }
            }
            break;
        }
        case LearningRule::ShortMemory: break;
    }
    return out;
}

CustomerLearner::CustomerLearner(const LearningSpec& spec, PriorHyper prior, RouteSetup routes,
                                 SeededStream stream, BeliefState start)
    : spec_(spec), prior_(std::move(prior)), routes_(std::move(routes)), stream_(stream), state_(std::move(start)) {
    spec_.validate();
    if (spec_.rule != LearningRule::ShortMemory) prior_.validate();
}

void CustomerLearner::observe(std::size_t route, int period, double delay) {
    if (route >= routes_.size()) throw std::invalid_argument("observe: route index out of range");
    if (!std::isfinite(delay)) throw std::invalid_argument("observe: delay must be finite");
    pending_.push_back({route, period, delay});
}

void CustomerLearner::end_period(int period) {
    if (pending_.empty()) return;
    signals_.insert(signals_.end(), pending_.begin(), pending_.end());
    if (spec_.rule == LearningRule::ShortMemory) {
        state_ = update_short_memory(state_, pending_);
        pending_.clear();
        return;
    }
    auto stream = stream_.child(static_cast<std::uint64_t>(period));
    auto update = dispatch_update(state_, prior_, signals_, pending_, routes_, spec_, stream);
    if (spec_.rule == LearningRule::Independent && !spec_.independent_shared_sigma2) {
        const auto J = static_cast<Eigen::Index>(routes_.size());
        if (!has_draws()) {
            draws_.route_mean.resize(update.draws.route_mean.rows(), J);
            draws_.route_sigma2.resize(update.draws.route_mean.rows(), J);
            for (Eigen::Index j = 0; j < J; ++j) {
                draws_.route_mean.col(j).setConstant(state_.mu_j[static_cast<std::size_t>(j)]);
                draws_.route_sigma2.col(j).setConstant(state_.sigma2_j[static_cast<std::size_t>(j)]);
            }
        }
        for (std::size_t j : routes_with_data(pending_)) {
            const auto col = static_cast<Eigen::Index>(j);
            draws_.route_mean.col(col) = update.draws.route_mean.col(col);
            draws_.route_sigma2.col(col) = update.draws.route_sigma2.col(col);
        }
    } else {
        draws_ = std::move(update.draws);
    }
    state_ = std::move(update.state);
    pending_.clear();
}

const BeliefState& BeliefTrajectory::at(int period) const {
    const int k = period - first_period;
    if (k < 0 || k >= static_cast<int>(states.size())) {
        throw std::out_of_range("customer " + customer_id + ": no belief for period " + std::to_string(period));
    }
    return states[static_cast<std::size_t>(k)];
}

SeededStream learning_stream(std::uint64_t seed, const std::string& customer_id) {
    return SeededStream(seed, 0).child({hash_tag("learning"), hash_tag(customer_id)});
}

SeededStream learner_stream(std::uint64_t seed, const std::string& customer_id) {
    return learning_stream(seed, customer_id).child(kTagGibbs);
}

namespace {

BeliefTrajectory learn_customer(const ChoicePanel& panel, const CustomerPanel& c, const LearningSpec& spec,
                                const PriorHyper& initial, std::uint64_t seed) {
    auto routes = RouteSetup::from_customer(c);
    if (is_regression(spec.rule)) {
        for (std::size_t j = 0; j < routes.size(); ++j) {
            if (!std::isfinite(routes.distance_km[j])) {
                throw InputError("customer '" + c.id + "' route '" + c.routes[j].id +
                                 "' has no distance_km; regression learning needs one");
            }
        }
        if (spec.check_slope_identification) {
            const auto [lo, hi] = std::minmax_element(routes.distance_km.begin(), routes.distance_km.end());
            if (*hi - *lo <= 1e-9 * std::max(1.0, std::abs(*hi))) {
                throw InputError("customer '" + c.id +
                                 "': all routes share one distance, so the distance slope is unidentified");
            }
        }
    }
    const int P = spec.pre_estimation_periods;
    const auto signals = customer_signals(c);
    std::vector<QualitySignal> pre;
    for (const auto& s : signals) {
        if (s.period < P) pre.push_back(s);
    }
    const auto stream = learning_stream(seed, c.id);

    BeliefTrajectory traj;
    traj.customer_id = c.id;
    traj.first_period = P;
    traj.prior = pre_estimate(pre, routes, spec, initial, stream.child(kTagPre));
    auto start = prior_belief(spec, traj.prior, routes);
    if (spec.rule == LearningRule::ShortMemory) start = update_short_memory(start, pre);

    CustomerLearner learner(spec, traj.prior, routes, learner_stream(seed, c.id), start);
    std::size_t next = 0;
    while (next < signals.size() && signals[next].period < P) ++next;
    for (int t = P; t < panel.num_periods; ++t) {
        traj.states.push_back(learner.belief());
        for (; next < signals.size() && signals[next].period == t; ++next) {
            learner.observe(signals[next].route, t, signals[next].delay);
        }
        try {
            learner.end_period(t);
        } catch (const NumericalError& e) {
            throw NumericalError("customer '" + c.id + "' period " + std::to_string(t) + ": " + e.what());
        }
    }
    traj.final_draws = learner.draws();
    return traj;
}

}  // namespace

LearningPass run_learning_pass(const ChoicePanel& panel, const LearningSpec& spec, const PriorHyper& initial,
                               std::uint64_t seed, int threads) {
    spec.validate();
    initial.validate();
    if (spec.pre_estimation_periods >= panel.num_periods) {
        throw InputError("pre-estimation window (" + std::to_string(spec.pre_estimation_periods) +
                         " periods) leaves no estimation periods in a " + std::to_string(panel.num_periods) +
                         "-period panel");
    }
    LearningPass pass;
    pass.spec = spec;
    const auto n = static_cast<long>(panel.customers.size());
    pass.customers.resize(panel.customers.size());
    std::vector<std::exception_ptr> errors(panel.customers.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            pass.customers[k] = learn_customer(panel, panel.customers[k], spec, initial, seed);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return pass;
}

double quality_loglik(const ChoicePanel& panel, const LearningPass& pass) {
    if (pass.spec.rule == LearningRule::ShortMemory) {
        throw std::invalid_argument("short-memory learning has no predictive distribution");
    }
    double ll = 0.0;
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        const auto& traj = pass.customers.at(i);
        for (const auto& s : customer_signals(panel.customers[i])) {
            if (s.period < traj.first_period) continue;
            const auto& b = traj.at(s.period);
            const double mean = b.mu_j[s.route];
            const double var = b.sigma2_j[s.route] + b.var_mu_j[s.route];
            if (!(var > 0.0) || !std::isfinite(var) || !std::isfinite(mean)) {
                throw NumericalError("customer '" + traj.customer_id + "' period " + std::to_string(s.period) +
                                     ": non-positive predictive variance");
            }
            ll += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * (s.delay - mean) * (s.delay - mean) / var;
        }
    }
    return ll;
}

DicResult quality_dic(const ChoicePanel& panel, const LearningPass& pass) {
    if (pass.spec.rule == LearningRule::ShortMemory) {
        throw std::invalid_argument("short-memory learning has no posterior for DIC");
    }
    DicResult out;
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        const auto& traj = pass.customers.at(i);
        std::vector<QualitySignal> est;
        for (const auto& s : customer_signals(panel.customers[i])) {
            if (s.period >= traj.first_period) est.push_back(s);
        }
        if (est.empty()) continue;
        const auto& dr = traj.final_draws;
        if (dr.route_mean.size() == 0) {
            throw NumericalError("customer '" + traj.customer_id + "' has signals but no posterior draws");
        }
        const auto J = panel.customers[i].routes.size();
        const auto stats = route_stats(est, J);
        const auto deviance = [&](auto&& mean_of, auto&& var_of) {
            double d = 0.0;
            for (std::size_t j = 0; j < J; ++j) {
                if (stats[j].n == 0) continue;
                const double s2 = var_of(j);
                if (!(s2 > 0.0)) throw NumericalError("non-positive variance draw in DIC");
                d += stats[j].n * std::log(2.0 * std::numbers::pi * s2) + stats[j].sum_sq(mean_of(j)) / s2;
            }
            return d;
        };
        double d_bar = 0.0;
        for (Eigen::Index k = 0; k < dr.route_mean.rows(); ++k) {
            d_bar += deviance([&](std::size_t j) { return dr.route_mean(k, static_cast<Eigen::Index>(j)); },
                              [&](std::size_t j) { return dr.route_sigma2(k, static_cast<Eigen::Index>(j)); });
        }
        d_bar /= static_cast<double>(dr.route_mean.rows());
        const Eigen::VectorXd m = dr.route_mean.colwise().mean().transpose();
        const Eigen::VectorXd v = dr.route_sigma2.colwise().mean().transpose();
        const double d_hat = deviance([&](std::size_t j) { return m(static_cast<Eigen::Index>(j)); },
                                      [&](std::size_t j) { return v(static_cast<Eigen::Index>(j)); });
        out.d_bar += d_bar;
        out.d_hat += d_hat;
    }
    out.p_d = out.d_bar - out.d_hat;
    out.dic = out.d_hat + 2.0 * out.p_d;
    return out;
}

void write_trajectory_csv(const ChoicePanel& panel, const LearningPass& pass, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << "customer_id,route_id,period,mu_j_E,var_mu_j,mu_E,sigma2_E,xi2_E,gamma_E\n";
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        const auto& c = panel.customers[i];
        const auto& traj = pass.customers.at(i);
        for (std::size_t k = 0; k < traj.states.size(); ++k) {
            const auto& s = traj.states[k];
            for (std::size_t j = 0; j < c.routes.size(); ++j) {
                out << c.id << ',' << c.routes[j].id << ',' << traj.first_period + static_cast<int>(k) << ','
                    << format_double(s.mu_j[j]) << ',' << format_double(s.var_mu_j[j]) << ','
                    << format_double(s.mu) << ',' << format_double(s.sigma2_j[j]) << ','
                    << format_double(s.xi2) << ',' << format_double(s.gamma) << '\n';
            }
        }
    }
    if (!out) throw InputError("failed writing '" + path + "'");
}

LearningPass read_trajectory_csv(const ChoicePanel& panel, const std::string& path, LearningRule rule) {
    const auto table = read_csv(path);
    const auto c_customer = table.column("customer_id");
    const auto c_route = table.column("route_id");
    const auto c_period = table.column("period");
    const auto c_mu_j = table.column("mu_j_E");
    const auto c_var = table.column("var_mu_j");
    const auto c_mu = table.column("mu_E");
    const auto c_sigma2 = table.column("sigma2_E");
    const auto c_xi2 = table.column("xi2_E");
    const auto c_gamma = table.column("gamma_E");

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < panel.customers.size(); ++i) index[panel.customers[i].id] = i;

    LearningPass pass;
    pass.spec.rule = rule;
    pass.customers.resize(panel.customers.size());
    std::vector<int> first(panel.customers.size(), std::numeric_limits<int>::max());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto it = index.find(table.rows[r][c_customer]);
        if (it == index.end()) continue;
        const int t = static_cast<int>(parse_int(table.rows[r][c_period], table, r, "period"));
        first[it->second] = std::min(first[it->second], t);
    }
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        if (first[i] == std::numeric_limits<int>::max()) {
            throw InputError(path + ": no trajectory rows for customer '" + panel.customers[i].id + "'");
        }
        auto& traj = pass.customers[i];
        traj.customer_id = panel.customers[i].id;
        traj.first_period = first[i];
        const auto J = panel.customers[i].routes.size();
        const auto periods = static_cast<std::size_t>(std::max(panel.num_periods - first[i], 0));
        BeliefState blank;
        blank.mu_j.assign(J, kNaN);
        blank.var_mu_j.assign(J, kNaN);
        blank.sigma2_j.assign(J, kNaN);
        blank.observed.assign(J, false);
        traj.states.assign(periods, blank);
    }
    const auto value = [&](std::size_t r, std::size_t col, const char* name) {
        const auto& text = table.rows[r][col];
        return text.empty() ? kNaN : parse_double(text, table, r, name);
    };
    std::vector<std::vector<std::vector<bool>>> seen(panel.customers.size());
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        seen[i].assign(pass.customers[i].states.size(), std::vector<bool>(panel.customers[i].routes.size(), false));
    }
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto it = index.find(row[c_customer]);
        if (it == index.end()) continue;
        const auto i = it->second;
        const auto j = panel.customers[i].route_index(row[c_route]);
        const int t = static_cast<int>(parse_int(row[c_period], table, r, "period"));
        const auto k = static_cast<std::size_t>(t - pass.customers[i].first_period);
        if (k >= pass.customers[i].states.size()) {
            throw InputError(path + ":" + std::to_string(table.line_numbers[r]) + ": period beyond the panel");
        }
        auto& s = pass.customers[i].states[k];
        s.mu_j[j] = value(r, c_mu_j, "mu_j_E");
        s.var_mu_j[j] = value(r, c_var, "var_mu_j");
        s.sigma2_j[j] = value(r, c_sigma2, "sigma2_E");
        s.mu = value(r, c_mu, "mu_E");
        s.xi2 = value(r, c_xi2, "xi2_E");
        s.gamma = value(r, c_gamma, "gamma_E");
        seen[i][k][j] = true;
    }
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        for (std::size_t k = 0; k < seen[i].size(); ++k) {
            for (std::size_t j = 0; j < seen[i][k].size(); ++j) {
                if (!seen[i][k][j]) {
                    throw InputError(path + ": missing trajectory row for customer '" + panel.customers[i].id +
                                     "' route '" + panel.customers[i].routes[j].id + "' period " +
                                     std::to_string(pass.customers[i].first_period + static_cast<int>(k)));
                }
            }
        }
    }
    return pass;
}

}  // namespace spillover
