#include "spillover/errors.hpp"
#include "spillover/learning.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

using namespace spillover;

namespace {

RouteSetup setup(std::size_t J, double km = 1000.0) {
    RouteSetup r;
    for (std::size_t j = 0; j < J; ++j) {
        r.distance_km.push_back(km * static_cast<double>(j + 1));
        r.tags.push_back(hash_tag("route" + std::to_string(j)));
    }
    return r;
}

LearningSpec spec_for(LearningRule rule, int total = 1000, int burnin = 500) {
    LearningSpec s;
    s.rule = rule;
    s.gibbs_total = total;
    s.gibbs_burnin = burnin;
    s.pre_estimation_periods = 0;
    return s;
}

/// One customer, `J` routes, delays keyed by (period, route).
ChoicePanel panel_from(const std::vector<QualitySignal>& signals, std::size_t J, int periods,
                       std::vector<double> km = {}) {
    ChoicePanel p;
    p.num_periods = periods;
    p.month.assign(static_cast<std::size_t>(periods), 1);
    p.second_half_week.assign(static_cast<std::size_t>(periods), 0);
    CustomerPanel c;
    c.id = "C1";
    for (std::size_t j = 0; j < J; ++j) {
        RouteInfo r;
        r.id = "R" + std::to_string(j);
        r.distance_km = km.empty() ? 1000.0 * static_cast<double>(j + 1) : km[j];
        c.routes.push_back(r);
    }
    c.cells.assign(static_cast<std::size_t>(periods), std::vector<PanelCell>(J));
    for (const auto& s : signals) {
        auto& cell = c.cells[static_cast<std::size_t>(s.period)][s.route];
        cell.y_star = true;
        cell.delays.push_back(s.delay);
    }
    p.customers.push_back(c);
    p.validate();
    return p;
}

double mc_se(const Eigen::VectorXd& v) {
    const double m = v.mean();
    return std::sqrt((v.array() - m).square().sum() / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("rule names round trip") {
    for (auto rule : {LearningRule::ShortMemory, LearningRule::Independent, LearningRule::PoolingSimple,
                      LearningRule::PoolingRegression, LearningRule::HierSimple, LearningRule::HierRegression}) {
        CHECK(parse_rule(rule_name(rule)) == rule);
    }
    CHECK(rule_name(LearningRule::HierSimple) == "hier-simple");
    CHECK_THROWS(parse_rule("bogus"));
    CHECK(is_regression(LearningRule::PoolingRegression));
    CHECK_FALSE(is_regression(LearningRule::PoolingSimple));
}

TEST_CASE("prior and spec validation") {
    PriorHyper p;
    CHECK_NOTHROW(p.validate());
    p.alpha_sigma = 1.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.delta_xi = 0.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = {};
    p.sigma_mu2 = -1.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);

    LearningSpec s;
    CHECK_NOTHROW(s.validate());
    s.gibbs_burnin = s.gibbs_total;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = {};
    s.pre_estimation_periods = -1;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("conditional route mean is a convex combination with the shrinkage weight") {
    SeededStream s(21, 0);
    for (int k = 0; k < 2000; ++k) {
        const int n = 1 + static_cast<int>(uniform_draw(s) * 50);
        const double qbar = normal_draw(s, 0.0, 10.0);
        double mu = normal_draw(s, 0.0, 10.0);
        if (mu == qbar) mu += 1.0;
        const double sigma2 = 0.01 + 50.0 * uniform_draw(s);
        const double xi2 = 0.01 + 50.0 * uniform_draw(s);
        const double m = conditional_route_mean(n, qbar, mu, sigma2, xi2);
        REQUIRE(m > std::min(qbar, mu));
        REQUIRE(m < std::max(qbar, mu));
        const double w = n * xi2 / (n * xi2 + sigma2);
        REQUIRE(std::abs(m - (w * qbar + (1.0 - w) * mu)) < 1e-9 * (1.0 + std::abs(qbar) + std::abs(mu)));
    }
}

TEST_CASE("conditional route mean limits in the heterogeneity variance") {
    CHECK(conditional_route_mean(3, 4.0, -2.0, 1.0, 1e-8) == doctest::Approx(-2.0).epsilon(1e-6));
    CHECK(conditional_route_mean(3, 4.0, -2.0, 1.0, 1e8) == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(conditional_route_mean(0, 4.0, -2.0, 1.0, 1.0) == -2.0);
    CHECK(conditional_route_variance(2, 1.0, 1.0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("route stats match a two-pass computation") {
    std::vector<QualitySignal> sig = {{0, 0, 1.0}, {1, 0, 4.0}, {0, 1, 3.0}, {0, 2, -7.5}};
    const auto st = route_stats(sig, 3);
    CHECK(st[0].n == 3);
    CHECK(st[0].mean == doctest::Approx(-3.5 / 3.0));
    double ss = 0.0;
    for (double q : {1.0, 3.0, -7.5}) ss += (q - 2.0) * (q - 2.0);
    CHECK(st[0].sum_sq(2.0) == doctest::Approx(ss));
    CHECK(st[2].n == 0);
    sig.push_back({5, 0, 1.0});
    CHECK_THROWS_AS(route_stats(sig, 3), std::invalid_argument);
}

TEST_CASE("an outlying signal raises the expected experience variance") {
    PriorHyper prior;
    prior.alpha_sigma = 3.0;
    prior.delta_sigma = 8.0;
    SeededStream s(22, 0);
    for (int k = 0; k < 500; ++k) {
        const std::size_t J = 1 + static_cast<std::size_t>(uniform_draw(s) * 4);
        std::vector<RouteStats> stats(J);
        std::vector<double> means(J);
        for (std::size_t j = 0; j < J; ++j) {
            means[j] = normal_draw(s, 0.0, 3.0);
            const int n = static_cast<int>(uniform_draw(s) * 10);
            for (int i = 0; i < n; ++i) stats[j].add(normal_draw(s, means[j], 2.0));
        }
        const double before = expected_sigma2(prior, stats, means);
        const std::size_t j = static_cast<std::size_t>(uniform_draw(s) * J);
        const double dev = std::sqrt(2.0 * before) * (1.0 + 1e-6 + uniform_draw(s));
        auto grown = stats;
        grown[j].add(means[j] + (uniform_draw(s) < 0.5 ? dev : -dev));
        REQUIRE(expected_sigma2(prior, grown, means) > before);
    }
}

TEST_CASE("hierarchical chain keeps every variance draw positive") {
    auto spec = spec_for(LearningRule::HierSimple, 10500, 500);
    PriorHyper prior;
    const auto routes = setup(3);
    const std::vector<QualitySignal> sig = {{0, 0, 2.0}, {2, 0, -40.0}};
    SeededStream s(23, 0);
    const auto up = gibbs_update_simple(prior_belief(spec, prior, routes), prior, sig, routes, spec, s);
    REQUIRE(up.draws.sigma2.size() == 10000);
    CHECK((up.draws.sigma2.array() > 0.0).all());
    CHECK((up.draws.xi2.array() > 0.0).all());
    CHECK(up.draws.sigma2.allFinite());
}

TEST_CASE("hierarchical posterior is consistent with many signals") {
    const std::vector<double> truth = {-1.0, 0.5, 2.0};
    const double s2 = 4.0;
    SeededStream data(24, 0);
    std::vector<QualitySignal> sig;
    for (int i = 0; i < 500; ++i) {
        for (std::size_t j = 0; j < 3; ++j) sig.push_back({j, 0, normal_draw(data, truth[j], std::sqrt(s2))});
    }
    auto spec = spec_for(LearningRule::HierSimple, 4000, 1000);
    PriorHyper prior;
    const auto routes = setup(3);
    SeededStream s(25, 0);
    const auto up = gibbs_update_simple(prior_belief(spec, prior, routes), prior, sig, routes, spec, s);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(std::abs(up.state.mu_j[j] - truth[j]) < 3.0 * std::sqrt(up.state.var_mu_j[j]));
    }
    const auto& d = up.draws.sigma2;
    const double sd = std::sqrt((d.array() - d.mean()).square().sum() / static_cast<double>(d.size() - 1));
    CHECK(std::abs(up.state.sigma2_j[0] - s2) < 3.0 * sd);
}

TEST_CASE("signal order within a period does not move the posterior") {
    SeededStream data(26, 0);
    std::vector<QualitySignal> sig;
    for (int i = 0; i < 30; ++i) sig.push_back({static_cast<std::size_t>(i % 3), 0, normal_draw(data, 1.0, 3.0)});
    auto shuffled = sig;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 11, shuffled.end());
    auto spec = spec_for(LearningRule::HierSimple, 3000, 500);
    PriorHyper prior;
    const auto routes = setup(3);
    const auto start = prior_belief(spec, prior, routes);
    SeededStream s1(27, 0), s2(27, 0);
    const auto a = gibbs_update_simple(start, prior, sig, routes, spec, s1);
    const auto b = gibbs_update_simple(start, prior, shuffled, routes, spec, s2);
    for (std::size_t j = 0; j < 3; ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        CHECK(std::abs(a.state.mu_j[j] - b.state.mu_j[j]) < 3.0 * mc_se(a.draws.route_mean.col(col)));
    }
    CHECK(std::abs(a.state.mu - b.state.mu) < 3.0 * mc_se(a.draws.mu));
}

TEST_CASE("a period without deliveries leaves the belief untouched") {
    for (auto rule : {LearningRule::HierSimple, LearningRule::PoolingSimple, LearningRule::Independent,
                      LearningRule::ShortMemory, LearningRule::HierRegression}) {
        auto spec = spec_for(rule, 200, 100);
        PriorHyper prior;
        const auto routes = setup(2);
        CustomerLearner learner(spec, prior, routes, SeededStream(28, 0), prior_belief(spec, prior, routes));
        learner.observe(0, 0, 3.0);
        learner.observe(1, 0, -1.0);
        learner.end_period(0);
        const auto before = learner.belief();
        learner.end_period(1);
        learner.end_period(2);
        const auto& after = learner.belief();
        CHECK(after.mu_j == before.mu_j);
        CHECK(after.sigma2_j.size() == before.sigma2_j.size());
        for (std::size_t j = 0; j < before.var_mu_j.size(); ++j) {
            CHECK(std::isnan(after.var_mu_j[j]) == std::isnan(before.var_mu_j[j]));
            if (!std::isnan(before.var_mu_j[j])) CHECK(after.var_mu_j[j] == before.var_mu_j[j]);
        }
    }
}

TEST_CASE("learning pass copies beliefs through empty periods") {
    const std::vector<QualitySignal> sig = {{0, 1, 2.0}, {1, 1, 5.0}, {0, 4, -1.0}};
    const auto panel = panel_from(sig, 2, 7);
    const auto pass = run_learning_pass(panel, spec_for(LearningRule::HierSimple, 300, 100), PriorHyper{}, 5);
    const auto& tr = pass.customers[0];
    REQUIRE(tr.states.size() == 7);
    CHECK(tr.at(0).mu_j == tr.at(1).mu_j);
    CHECK(tr.at(2).mu_j != tr.at(1).mu_j);
    CHECK(tr.at(2).mu_j == tr.at(3).mu_j);
    CHECK(tr.at(3).mu_j == tr.at(4).mu_j);
    CHECK(tr.at(5).mu_j != tr.at(4).mu_j);
    CHECK(tr.at(5).mu_j == tr.at(6).mu_j);
    CHECK_THROWS_AS(tr.at(7), std::out_of_range);

    const auto again = run_learning_pass(panel, spec_for(LearningRule::HierSimple, 300, 100), PriorHyper{}, 5);
    CHECK(again.customers[0].states.back().mu_j == tr.states.back().mu_j);
}

TEST_CASE("independent learning leaves other routes bit-identical") {
    auto spec = spec_for(LearningRule::Independent, 400, 200);
    PriorHyper prior;
    const auto routes = setup(3);
    const auto start = prior_belief(spec, prior, routes);
    const std::vector<QualitySignal> sig = {{0, 0, 4.0}, {0, 0, 6.0}};
    SeededStream s(29, 0);
    const std::vector<std::size_t> touched = {0};
    const auto up = update_independent(start, prior, sig, routes, spec, s, touched);
    CHECK(up.state.mu_j[0] != start.mu_j[0]);
    for (std::size_t j = 1; j < 3; ++j) {
        CHECK(up.state.mu_j[j] == start.mu_j[j]);
        CHECK(up.state.var_mu_j[j] == start.var_mu_j[j]);
        CHECK(up.state.sigma2_j[j] == start.sigma2_j[j]);
    }

    // route 1's chain is the same whether or not route 0 ever saw data
    const std::vector<QualitySignal> with0 = {{0, 0, 4.0}, {1, 0, -3.0}};
    const std::vector<QualitySignal> without0 = {{1, 0, -3.0}};
    const std::vector<std::size_t> only1 = {1};
    SeededStream a(30, 0), b(30, 0);
    const auto ua = update_independent(start, prior, with0, routes, spec, a, only1);
    const auto ub = update_independent(start, prior, without0, routes, spec, b, only1);
    CHECK(ua.state.mu_j[1] == ub.state.mu_j[1]);
    CHECK(ua.state.var_mu_j[1] == ub.state.var_mu_j[1]);
}

TEST_CASE("independent route prior defaults to the marginal of the hierarchy") {
    PriorHyper prior;
    prior.mu0 = -0.5;
    prior.sigma_mu2 = 2.0;
    prior.alpha_xi = 3.0;
    prior.delta_xi = 4.0;
    const auto rp = prior.route_prior(4);
    CHECK(rp.mu0 == -0.5);
    CHECK(rp.var == doctest::Approx(4.0));
    prior.routes = {{1.0, 2.0, 3.0, 4.0}};
    CHECK(prior.route_prior(0).var == 2.0);
}

TEST_CASE("pooling gives every route the shared mean") {
    auto spec = spec_for(LearningRule::PoolingSimple, 2000, 500);
    PriorHyper prior;
    const auto routes = setup(3);
    const std::vector<QualitySignal> sig = {{0, 0, 1.0}, {0, 0, 3.0}, {2, 0, 8.0}};
    SeededStream s(31, 0);
    const auto up = update_pooling(prior_belief(spec, prior, routes), prior, sig, routes, spec, s);
    CHECK(up.state.mu_j[0] == up.state.mu_j[1]);
    CHECK(up.state.mu_j[1] == up.state.mu_j[2]);
    CHECK(up.state.var_mu_j[0] == up.state.var_mu_j[2]);
    CHECK(up.state.mu_j[0] == doctest::Approx(4.0).epsilon(0.1));
}

TEST_CASE("pooling regression tracks the distance slope") {
    auto spec = spec_for(LearningRule::PoolingRegression, 3000, 1000);
    PriorHyper prior;
    const auto routes = setup(3);
    std::vector<QualitySignal> sig;
    SeededStream data(32, 0);
    for (int i = 0; i < 200; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            sig.push_back({j, 0, 1.0 + 2.0 * static_cast<double>(j + 1) + normal_draw(data, 0.0, 0.5)});
        }
    }
    SeededStream s(33, 0);
    const auto up = update_pooling(prior_belief(spec, prior, routes), prior, sig, routes, spec, s);
    CHECK(up.state.gamma == doctest::Approx(2.0).epsilon(0.05));
    CHECK(up.state.mu == doctest::Approx(1.0).epsilon(0.15));
    CHECK(up.state.mu_j[2] == doctest::Approx(7.0).epsilon(0.02));
}

TEST_CASE("regression learning rejects customers with one distance") {
    const std::vector<QualitySignal> sig = {{0, 0, 2.0}, {1, 1, 1.0}};
    const auto flat = panel_from(sig, 2, 3, {500.0, 500.0});
    auto spec = spec_for(LearningRule::HierRegression, 200, 100);
    CHECK_THROWS_AS(run_learning_pass(flat, spec, PriorHyper{}, 1), InputError);
    try {
        run_learning_pass(flat, spec, PriorHyper{}, 1);
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("distance") != std::string::npos);
    }
    spec.check_slope_identification = false;
    CHECK_NOTHROW(run_learning_pass(flat, spec, PriorHyper{}, 1));
    CHECK_NOTHROW(run_learning_pass(panel_from(sig, 2, 3), spec_for(LearningRule::HierRegression, 200, 100),
                                    PriorHyper{}, 1));
}

TEST_CASE("short memory remembers the latest delivery") {
    auto spec = spec_for(LearningRule::ShortMemory);
    const auto start = prior_belief(spec, PriorHyper{}, setup(2));
    CHECK(start.mu_j == std::vector<double>{0.0, 0.0});
    const std::vector<QualitySignal> a = {{1, 0, 4.0}};
    const auto s1 = update_short_memory(start, a);
    CHECK(s1.mu_j[1] == 4.0);
    CHECK(s1.observed[1]);
    CHECK_FALSE(s1.observed[0]);
    const std::vector<QualitySignal> b = {{1, 1, -2.0}};
    CHECK(update_short_memory(s1, b).mu_j[1] == -2.0);
}

TEST_CASE("moment matching recovers an inverse gamma") {
    SeededStream s(34, 0);
    std::vector<double> x(200000);
    for (auto& v : x) v = inverse_gamma_draw(s, 6.0, 50.0);
    const auto [alpha, delta] = match_inverse_gamma(x);
    CHECK(alpha == doctest::Approx(6.0).epsilon(0.05));
    CHECK(delta == doctest::Approx(50.0).epsilon(0.05));
    const std::vector<double> flat = {2.0, 2.0, 2.0};
    CHECK_THROWS_AS(match_inverse_gamma(flat), NumericalError);
}

TEST_CASE("pre-estimation turns the window posterior into a prior") {
    auto spec = spec_for(LearningRule::HierSimple, 3000, 1000);
    PriorHyper flat;
    const auto routes = setup(3);
    SeededStream data(35, 0);
    std::vector<QualitySignal> pre;
    for (int i = 0; i < 60; ++i) pre.push_back({static_cast<std::size_t>(i % 3), 0, normal_draw(data, 2.0, 1.0)});
    const auto prior = pre_estimate(pre, routes, spec, flat, SeededStream(36, 0));
    CHECK_NOTHROW(prior.validate());
    CHECK(prior.mu0 == doctest::Approx(2.0).epsilon(0.25));
    CHECK(prior.sigma_mu2 < flat.sigma_mu2);
    CHECK(prior.delta_sigma / (prior.alpha_sigma - 1.0) == doctest::Approx(1.0).epsilon(0.4));
    CHECK(prior.alpha_sigma > flat.alpha_sigma);
    CHECK(pre_estimate({}, routes, spec, flat, SeededStream(36, 0)).mu0 == flat.mu0);

    auto ind = spec_for(LearningRule::Independent, 2000, 500);
    const std::vector<QualitySignal> one = {{1, 0, 3.0}, {1, 0, 5.0}, {1, 0, 4.0}};
    const auto ip = pre_estimate(one, routes, ind, flat, SeededStream(37, 0));
    REQUIRE(ip.routes.size() == 3);
    CHECK(ip.routes[0].var == flat.route_prior(0).var);
    CHECK(ip.routes[1].var < flat.route_prior(1).var);
}

TEST_CASE("closed-form belief variance adds the grand-mean uncertainty to xi2") {
    auto spec = spec_for(LearningRule::HierSimple, 2000, 500);
    spec.belief_variance = BeliefVariance::ClosedForm;
    PriorHyper prior;
    const auto routes = setup(2);
    const std::vector<QualitySignal> sig = {{0, 0, 1.0}, {1, 0, 2.0}, {0, 0, 0.0}};
    SeededStream s(38, 0);
    const auto up = gibbs_update_simple(prior_belief(spec, prior, routes), prior, sig, routes, spec, s);
    const auto& mu = up.draws.mu;
    const double var = (mu.array() - mu.mean()).square().sum() / static_cast<double>(mu.size() - 1);
    CHECK(up.state.var_mu_j[0] == doctest::Approx(up.state.xi2 + var));
    CHECK(up.state.var_mu_j[0] == up.state.var_mu_j[1]);
}

TEST_CASE("quality log likelihood at the predictive mean") {
    const std::vector<QualitySignal> sig = {{0, 1, 3.0}};
    const auto panel = panel_from(sig, 1, 2);
    LearningPass pass;
    pass.spec = spec_for(LearningRule::HierSimple);
    BeliefTrajectory tr;
    tr.customer_id = "C1";
    BeliefState b;
    b.mu_j = {3.0};
    b.sigma2_j = {0.75};
    b.var_mu_j = {0.25};
    tr.states = {b, b};
    pass.customers.push_back(tr);
    CHECK(quality_loglik(panel, pass) == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)));
    CHECK(quality_loglik(panel, pass) == doctest::Approx(-0.9189).epsilon(1e-4));
    pass.customers[0].states[1].sigma2_j = {-0.25};
    CHECK_THROWS_AS(quality_loglik(panel, pass), NumericalError);
}

TEST_CASE("a degenerate chain has no effective parameters") {
    const std::vector<QualitySignal> sig = {{0, 0, 1.0}, {0, 1, 2.0}, {1, 1, -1.0}};
    const auto panel = panel_from(sig, 2, 2);
    LearningPass pass;
    pass.spec = spec_for(LearningRule::HierSimple);
    BeliefTrajectory tr;
    tr.customer_id = "C1";
    tr.states.resize(2);
    tr.final_draws.route_mean = Eigen::MatrixXd::Constant(50, 2, 0.5);
    tr.final_draws.route_sigma2 = Eigen::MatrixXd::Constant(50, 2, 2.0);
    pass.customers.push_back(tr);
    const auto d = quality_dic(panel, pass);
    CHECK(d.p_d == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(d.dic == doctest::Approx(d.d_hat));
    const double expected = 3.0 * std::log(2.0 * std::numbers::pi * 2.0) + (0.25 + 2.25 + 2.25) / 2.0;
    CHECK(d.d_hat == doctest::Approx(expected));
}

TEST_CASE("DIC of a real chain has positive effective parameters") {
    SeededStream data(39, 0);
    std::vector<QualitySignal> sig;
    for (int t = 0; t < 20; ++t) sig.push_back({static_cast<std::size_t>(t % 3), t, normal_draw(data, 1.0, 2.0)});
    const auto panel = panel_from(sig, 3, 20);
    const auto pass = run_learning_pass(panel, spec_for(LearningRule::HierSimple), PriorHyper{}, 3);
    const auto d = quality_dic(panel, pass);
    CHECK(d.p_d > 0.0);
    CHECK(d.dic == doctest::Approx(d.d_bar + d.p_d));
    CHECK_THROWS_AS(quality_dic(panel, run_learning_pass(panel, spec_for(LearningRule::ShortMemory), PriorHyper{}, 3)),
                    std::invalid_argument);
}

TEST_CASE("trajectory csv round trip") {
    const std::vector<QualitySignal> sig = {{0, 0, 1.0}, {1, 2, -3.0}};
    const auto panel = panel_from(sig, 2, 4);
    const auto pass = run_learning_pass(panel, spec_for(LearningRule::HierSimple, 200, 100), PriorHyper{}, 2);
    const auto path = test_util::temp_path("traj.csv");
    write_trajectory_csv(panel, pass, path);
    const auto back = read_trajectory_csv(panel, path, LearningRule::HierSimple);
    REQUIRE(back.customers.size() == 1);
    REQUIRE(back.customers[0].states.size() == pass.customers[0].states.size());
    for (std::size_t k = 0; k < back.customers[0].states.size(); ++k) {
        CHECK(back.customers[0].states[k].mu_j == pass.customers[0].states[k].mu_j);
        CHECK(back.customers[0].states[k].var_mu_j == pass.customers[0].states[k].var_mu_j);
    }
}

TEST_CASE("pre-estimation window must leave periods to estimate") {
    const auto panel = panel_from({{0, 0, 1.0}}, 1, 3);
    auto spec = spec_for(LearningRule::HierSimple);
    spec.pre_estimation_periods = 3;
    CHECK_THROWS_AS(run_learning_pass(panel, spec, PriorHyper{}, 1), InputError);
}
