#include "spillover/random.hpp"

#include <doctest.h>

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <vector>

using namespace spillover;

namespace {

double cdf_by_erfc(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double bisect_quantile(double p) {
    double lo = -10.0, hi = 10.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (cdf_by_erfc(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("same seed and stream id reproduce the sequence bit for bit") {
    SeededStream a(42, 7), b(42, 7);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    SeededStream c(42, 7);
    auto d = c;
    for (int i = 0; i < 100; ++i) CHECK(normal_draw(c, 0.0, 1.0) == normal_draw(d, 0.0, 1.0));
}

TEST_CASE("children do not advance the parent and differ by tag") {
    SeededStream root(9, 0);
    auto before = root;
    auto x = root.child(1);
    auto y = root.child(2);
    auto z = root.child({1});
    CHECK(root.next_u64() == before.next_u64());
    CHECK(x.stream_id() != y.stream_id());
    CHECK(x.stream_id() == z.stream_id());
    CHECK(root.child({1, 2}).stream_id() != root.child({2, 1}).stream_id());
}

TEST_CASE("distinct streams are uncorrelated at lag 1") {
    SeededStream a(5, 100), b(5, 101);
    const int n = 100000;
    std::vector<double> u(n), v(n);
    for (int i = 0; i < n; ++i) {
        u[i] = a.uniform();
        v[i] = b.uniform();
    }
    double su = 0, sv = 0, suv = 0, suu = 0, svv = 0;
    for (int i = 0; i + 1 < n; ++i) {
        const double p = u[i] - 0.5, q = v[i + 1] - 0.5;
        su += p;
        sv += q;
        suv += p * q;
        suu += p * p;
        svv += q * q;
    }
    const double m = n - 1;
    const double corr = (suv / m - su / m * sv / m) / std::sqrt((suu / m - su * su / m / m) * (svv / m - sv * sv / m / m));
    CHECK(std::abs(corr) < 3.0 / std::sqrt(m));
}

TEST_CASE("uniform draws stay in the open unit interval") {
    SeededStream s(1, 1);
    for (int i = 0; i < 100000; ++i) {
        const double u = s.uniform();
        REQUIRE(u > 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("normal draws") {
    SeededStream s(3, 0);
    CHECK(normal_draw(s, 5.0, 0.0) == 5.0);
    CHECK_THROWS_AS(normal_draw(s, 0.0, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(normal_draw(s, std::nan(""), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(normal_draw(s, 0.0, INFINITY), std::invalid_argument);

    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += normal_draw(s, 0.0, 1.0);
    CHECK(std::abs(sum / n) < 0.01);

    std::vector<double> x(n);
    for (auto& v : x) v = normal_draw(s, 0.0, 5.0);
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    CHECK(ss / (n - 1) == doctest::Approx(25.0).epsilon(1.2 / 25.0));
}

TEST_CASE("inverse gamma draws") {
    SeededStream s(11, 0);
    CHECK_THROWS_AS(inverse_gamma_draw(s, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(inverse_gamma_draw(s, 1.0, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(gamma_draw(s, -1.0, 1.0), std::invalid_argument);

    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += inverse_gamma_draw(s, 3.0, 4.0);
    CHECK(std::abs(sum / n - 2.0) < 0.05);

    std::vector<double> flat(n);
    for (auto& v : flat) {
        v = inverse_gamma_draw(s, 1.05, 10.0);
        REQUIRE(v > 0.0);
    }
    std::sort(flat.begin(), flat.end());
    CHECK(flat[static_cast<std::size_t>(0.99 * n)] > 100.0);
}

TEST_CASE("inverse gamma passes a Kolmogorov-Smirnov test against the incomplete-gamma CDF") {
    SeededStream s(12, 0);
    const int n = 10000;
    std::vector<double> x(n);
    for (auto& v : x) v = inverse_gamma_draw(s, 5.0, 5.0);
    std::sort(x.begin(), x.end());
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
        const double f = boost::math::gamma_q(5.0, 5.0 / x[i]);
        d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(f - static_cast<double>(i + 1) / n)});
    }
    CHECK(d < 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("gamma draws with shape below one") {
    SeededStream s(13, 0);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = gamma_draw(s, 0.4, 2.0);
        REQUIRE(g > 0.0);
        sum += g;
    }
    CHECK(sum / n == doctest::Approx(0.8).epsilon(0.02));
}

TEST_CASE("categorical draws follow their weights") {
    SeededStream s(14, 0);
    const std::vector<double> p = {0.2, 0.0, 0.8};
    std::vector<int> counts(3, 0);
    const int n = 50000;
    for (int i = 0; i < n; ++i) ++counts[categorical_draw(s, p)];
    CHECK(counts[1] == 0);
    CHECK(std::abs(counts[0] / static_cast<double>(n) - 0.2) < 3.0 * std::sqrt(0.16 / n));
    const std::vector<double> bad = {0.0, 0.0};
    CHECK_THROWS_AS(categorical_draw(s, bad), std::invalid_argument);
}

TEST_CASE("normal quantile") {
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(std::abs(normal_quantile(0.975) - 1.959964) < 1e-5);
    CHECK(std::abs(normal_quantile(0.975) - bisect_quantile(0.975)) < 1e-9);
    for (double p : {0.01, 0.3, 0.99}) CHECK(std::abs(normal_cdf(normal_quantile(p)) - p) < 1e-9);
    for (double p : {1e-10, 1e-4, 0.02425, 0.2, 0.7, 0.97575, 1 - 1e-6}) {
        CHECK(std::abs(normal_quantile(p) - bisect_quantile(p)) < 1e-9);
    }
    CHECK_THROWS_AS(normal_quantile(0.0), std::invalid_argument);
    CHECK_THROWS_AS(normal_quantile(1.0), std::invalid_argument);
}

TEST_CASE("normal cdf matches erfc") {
    for (double x : {-8.0, -2.5, -0.1, 0.0, 1.3, 6.0}) CHECK(normal_cdf(x) == doctest::Approx(cdf_by_erfc(x)).epsilon(1e-12));
}

TEST_CASE("halton golden values") {
    const auto h = halton_sequence({2, 4, 0});
    CHECK(h(0, 0) == 0.5);
    CHECK(h(1, 0) == 0.25);
    CHECK(h(2, 0) == 0.75);
    CHECK(h(3, 0) == 0.125);
    CHECK(h(0, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(h(1, 1) == doctest::Approx(2.0 / 3.0));
    CHECK(h(2, 1) == doctest::Approx(1.0 / 9.0));

    const auto skipped = halton_sequence({1, 2, 2});
    CHECK(skipped(0, 0) == 0.75);
    CHECK(skipped(1, 0) == 0.125);

    CHECK(first_primes(5) == std::vector<int>{2, 3, 5, 7, 11});
    CHECK_THROWS_AS(halton_sequence({0, 1, 0}), std::invalid_argument);
}

TEST_CASE("halton points are distinct and strictly inside the unit interval") {
    const auto h = halton_sequence({3, 100000, 0});
    CHECK(h.col(0).head(1000).mean() == doctest::Approx(0.5).epsilon(0.01));
    for (int d = 0; d < 3; ++d) {
        std::set<double> seen;
        for (int k = 0; k < h.rows(); ++k) {
            const double v = h(k, d);
            REQUIRE(v > 0.0);
            REQUIRE(v < 1.0);
            seen.insert(v);
        }
        CHECK(seen.size() == static_cast<std::size_t>(h.rows()));
    }
}

TEST_CASE("hash tags are stable") {
    CHECK(hash_tag("") == 0xcbf29ce484222325ULL);
    CHECK(hash_tag("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(hash_tag("C1") != hash_tag("C2"));
}
