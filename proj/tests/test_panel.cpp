#include "spillover/csv.hpp"
#include "spillover/errors.hpp"
#include "spillover/panel.hpp"
#include "spillover/random.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace spillover;

namespace {

ShipmentRecord shipment(std::string customer, std::string route, UtcSeconds start, double hours_in_transit,
                        double delay_hours = 0.0, double weight = 100.0) {
    ShipmentRecord r;
    r.customer_id = std::move(customer);
    r.route_id = std::move(route);
    r.start = start;
    r.delivery = start + static_cast<UtcSeconds>(hours_in_transit * 3600);
    r.planned = r.delivery - static_cast<UtcSeconds>(delay_hours * 3600);
    r.weight_kg = weight;
    r.pieces = 1;
    r.origin_lat = 50.0;
    r.origin_lon = 8.0;
    r.dest_lat = 40.0;
    r.dest_lon = -74.0;
    return r;
}

double haversine_oracle(double lat1, double lon1, double lat2, double lon2) {
    const double k = std::numbers::pi / 180.0;
    const double a = std::pow(std::sin((lat2 - lat1) * k / 2), 2) +
                     std::cos(lat1 * k) * std::cos(lat2 * k) * std::pow(std::sin((lon2 - lon1) * k / 2), 2);
    return 2.0 * 6371.0 * std::asin(std::sqrt(a));
}

}  // namespace

TEST_CASE("csv parsing handles quotes and reports line numbers") {
    std::istringstream in("a,b\n1,\"x,y\"\n\n2,\"he said \"\"hi\"\"\"\n");
    const auto t = parse_csv(in, "mem");
    const auto b = t.column("b");
    CHECK(t.rows[0][b] == "x,y");
    CHECK(t.rows[1][b] == "he said \"hi\"");
    CHECK(t.line_numbers[1] == 4);
    CHECK_THROWS_AS(t.column("missing"), InputError);

    std::istringstream ragged("a,b\n1\n");
    try {
        parse_csv(ragged, "bad.csv");
        FAIL("expected an error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("bad.csv:2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_double("abc", t, 0, "a"), InputError);
    CHECK(parse_double("2.5", t, 0, "a") == 2.5);
    CHECK(format_double(std::nan("")).empty());
    CHECK(std::stod(format_double(0.1)) == 0.1);
}

TEST_CASE("timestamps") {
    CHECK(parse_iso8601("1970-01-01T00:00:00Z") == 0);
    CHECK(parse_iso8601("2021-01-04 12:30") == parse_iso8601("2021-01-04T12:30:00Z"));
    CHECK(parse_iso8601("2021-01-04T14:30:00+02:00") == parse_iso8601("2021-01-04T12:30:00Z"));
    CHECK(format_iso8601(parse_iso8601("2024-02-29T23:59:59Z")) == "2024-02-29T23:59:59Z");
    CHECK(utc_month(parse_iso8601("2021-12-31T23:00:00Z")) == 12);
    CHECK_THROWS_AS(parse_iso8601("2021-13-01"), InputError);
    CHECK_THROWS_AS(parse_iso8601("yesterday"), InputError);
}

TEST_CASE("great-circle distance") {
    CHECK(great_circle_distance(10, 20, 10, 20) == 0.0);
    CHECK(great_circle_distance(0, 0, 0, 180) == doctest::Approx(std::numbers::pi * 6371.0).epsilon(1e-9));
    CHECK(std::abs(great_circle_distance(52.31, 4.76, 40.64, -73.78) - haversine_oracle(52.31, 4.76, 40.64, -73.78)) < 0.1);
    CHECK_THROWS_AS(great_circle_distance(91, 0, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(great_circle_distance(0, 0, 0, 181), std::invalid_argument);
}

TEST_CASE("records are gridded into 84-hour periods") {
    const UtcSeconds t0 = parse_iso8601("2021-01-04T00:00:00Z");
    BuildOptions opt;
    opt.epoch = t0;

    const auto r = build_periods({shipment("C", "R1", t0, 10), shipment("C", "R1", t0 + 7 * 86400, 10)}, opt);
    const auto& c = r.panel.customers.at(0);
    CHECK(c.cells[0][0].y);
    CHECK_FALSE(c.cells[1][0].y);
    CHECK(c.cells[2][0].y);

    const auto lag = build_periods({shipment("C", "R1", t0 + 80 * 3600, 10)}, opt);
    CHECK(lag.panel.customers[0].cells[0][0].y);
    CHECK_FALSE(lag.panel.customers[0].cells[0][0].y_star);
    CHECK(lag.panel.customers[0].cells[1][0].y_star);

    auto rejected = build_periods({shipment("C", "R1", t0 - 3600, 10), shipment("C", "R1", t0, 10)}, opt);
    CHECK(rejected.diagnostics.rejected_before_epoch == 1);
    CHECK_FALSE(rejected.diagnostics.messages.empty());

    auto backwards = shipment("C", "R1", t0 + 3600, 10);
    backwards.delivery = t0;
    CHECK(build_periods({backwards, shipment("C", "R1", t0, 10)}, opt).diagnostics.rejected_negative_duration == 1);
}

TEST_CASE("multiple arrivals in one period keep the most used route") {
    const UtcSeconds t0 = parse_iso8601("2021-01-04T00:00:00Z");
    std::vector<ShipmentRecord> recs;
    for (int k = 0; k < 30; ++k) recs.push_back(shipment("C", "r1", t0 + k * kPeriodSeconds, 5));
    for (int k = 0; k < 10; ++k) recs.push_back(shipment("C", "r2", t0 + k * kPeriodSeconds + 3600, 5));
    BuildOptions opt;
    opt.epoch = t0;
    const auto r = build_periods(recs, opt);
    // r2 never survives a shared period, so it vanishes from the route set
    const auto& c = r.panel.customers[0];
    REQUIRE(c.routes.size() == 1);
    CHECK(c.routes[0].id == "r1");
    CHECK(r.diagnostics.dropped_multi_arrivals == 10);
    int count = 0;
    for (const auto& row : c.cells) count += row[0].y;
    CHECK(count == 30);
}

TEST_CASE("default epoch is the earliest start at midnight and output ignores record order") {
    const UtcSeconds t0 = parse_iso8601("2021-03-10T15:20:00Z");
    std::vector<ShipmentRecord> recs = {shipment("C0", "R0", t0, 12)};
    SeededStream s(1, 0);
    for (int k = 0; k < 40; ++k) {
        recs.push_back(shipment("C" + std::to_string(k % 3), "R" + std::to_string(k % 4),
                                t0 + static_cast<UtcSeconds>(uniform_draw(s) * 40 * 86400) + 60, 2 + 50 * uniform_draw(s),
                                normal_draw(s, 0, 5), 10 + 500 * uniform_draw(s)));
    }
    const auto a = build_periods(recs);
    CHECK(*a.panel.epoch == parse_iso8601("2021-03-10T00:00:00Z"));
    auto shuffled = recs;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 7, shuffled.end());
    const auto b = build_periods(shuffled);
    const auto pa = test_util::temp_path("order_a.csv");
    const auto pb = test_util::temp_path("order_b.csv");
    write_panel_csv(a.panel, pa);
    write_panel_csv(b.panel, pb);
    CHECK(test_util::read_file(pa) == test_util::read_file(pb));
}

TEST_CASE("panel csv round trip") {
    const UtcSeconds t0 = parse_iso8601("2021-01-04T00:00:00Z");
    BuildOptions opt;
    opt.epoch = t0;
    auto r = build_periods({shipment("A", "R1", t0, 10, 2.5), shipment("A", "R2", t0 + 86400 * 4, 100, -1.0),
                            shipment("B", "R1", t0 + 86400 * 2, 10, 0.0)},
                           opt);
    auto panel = interpolate_covariates(r.panel);
    for (auto& c : panel.customers) {
        for (auto& row : c.cells) {
            for (auto& cell : row) cell.price = 2000.0;
        }
    }
    const auto path = test_util::temp_path("panel_rt.csv");
    write_panel_csv(panel, path);
    const auto back = read_panel_csv(path);
    const auto again = test_util::temp_path("panel_rt2.csv");
    write_panel_csv(back, again);
    CHECK(test_util::read_file(path) == test_util::read_file(again));
    CHECK(back.customers.size() == 2);
    CHECK(back.month == panel.month);
}

TEST_CASE("malformed panel csv names the line") {
    const auto path = test_util::temp_path("panel_bad.csv");
    test_util::write_file(path,
                          "customer_id,route_id,period,y,y_star,delay_h,price,weight_kg,second_half_week,month\n"
                          "C1,R1,0,1,1,2.0,100,10,0,1\n"
                          "C1,R1,1,2,0,,100,10,1,1\n");
    try {
        read_panel_csv(path);
        FAIL("expected an error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
    CHECK_THROWS_AS(read_panel_csv(test_util::temp_path("does_not_exist.csv")), InputError);
}

TEST_CASE("customer filtering rules") {
    auto make = [](std::string id, std::vector<int> early_by_route, std::vector<int> late_by_route) {
        CustomerPanel c;
        c.id = std::move(id);
        const auto J = early_by_route.size();
        for (std::size_t j = 0; j < J; ++j) c.routes.push_back({"R" + std::to_string(j), 1000.0, {}});
        c.cells.assign(104, std::vector<PanelCell>(J));
        int t = 0;
        for (std::size_t j = 0; j < J; ++j) {
            for (int k = 0; k < early_by_route[j]; ++k) c.cells[static_cast<std::size_t>(t++)][j].y = true;
        }
        t = 24;
        for (std::size_t j = 0; j < J; ++j) {
            for (int k = 0; k < late_by_route[j]; ++k) c.cells[static_cast<std::size_t>(t++)][j].y = true;
        }
        return c;
    };
    ChoicePanel p;
    p.num_periods = 104;
    p.month.assign(104, 1);
    p.second_half_week.assign(104, 0);
    p.customers.push_back(make("one_route", {10}, {20}));
    p.customers.push_back(make("too_many", {10, 10, 10}, {25, 25, 25}));
    p.customers.push_back(make("keeper", {2, 2, 2}, {10, 3, 2}));
    p.customers.push_back(make("few_early", {1, 1}, {20, 20}));
    p.customers.push_back(make("dominant", {5, 0}, {40, 2}));
    const auto r = filter_customers(p);
    REQUIRE(r.panel.customers.size() == 1);
    CHECK(r.panel.customers[0].id == "keeper");
    CHECK(r.report.too_few_routes == 1);
    CHECK(r.report.too_many_shipments == 1);
    CHECK(r.report.too_few_early == 1);
    CHECK(r.report.top_route_dominant == 1);
    const auto twice = filter_customers(r.panel);
    CHECK(twice.panel.customers.size() == r.panel.customers.size());
    CHECK(twice.report.retained == r.report.retained);
}

TEST_CASE("covariate interpolation") {
    ChoicePanel p;
    p.num_periods = 4;
    p.month.assign(4, 1);
    p.second_half_week = {0, 1, 0, 1};
    CustomerPanel c;
    c.id = "C";
    c.routes.push_back({"R", 100.0, {}});
    c.cells.assign(4, std::vector<PanelCell>(1));
    c.cells[0][0] = {true, true, {1.0}, 1.0, 100.0, 1.0, {}};
    c.cells[2][0] = {true, true, {1.0}, 1.0, 300.0, 3.0, {}};
    p.customers.push_back(c);
    const auto out = interpolate_covariates(p);
    CHECK(out.customers[0].cells[1][0].weight_kg == 200.0);
    CHECK(out.customers[0].cells[3][0].pieces == 2.0);
    CHECK(out.customers[0].cells[0][0].weight_kg == 100.0);
    CHECK(out.customers[0].cells[2][0].weight_kg == 300.0);
    const auto again = interpolate_covariates(out);
    for (int t = 0; t < 4; ++t) CHECK(again.customers[0].cells[static_cast<std::size_t>(t)][0].weight_kg ==
                                      out.customers[0].cells[static_cast<std::size_t>(t)][0].weight_kg);

    p.customers[0].cells[0][0].weight_kg = std::nan("");
    p.customers[0].cells[2][0].weight_kg = std::nan("");
    CHECK_THROWS_AS(interpolate_covariates(p), InputError);
}

TEST_CASE("price model recovers noiseless coefficients and matches the normal equations") {
    SeededStream s(2, 0);
    const std::vector<std::string> breaks = {"a", "b", "c"};
    const std::vector<std::string> countries = {"DE", "US"};
    std::vector<PriceRow> rows;
    for (int k = 0; k < 60; ++k) {
        PriceRow r;
        r.distance_km = 500 + 9000 * uniform_draw(s);
        r.weight_kg = 10 + 3000 * uniform_draw(s);
        r.weight_break = breaks[static_cast<std::size_t>(k % 3)];
        r.month = k % 2 ? "01" : "02";
        r.to_country = countries[static_cast<std::size_t>((k / 3) % 2)];
        r.pieces = "1";
        const double effect = (r.weight_break == "b" ? 0.2 : r.weight_break == "c" ? -0.1 : 0.0) +
                              (r.month == "02" ? 0.05 : 0.0) + (r.to_country == "US" ? 0.3 : 0.0);
        r.ln_price = 4.50 + 1.15e-5 * r.distance_km + 1.65e-6 * r.weight_kg + effect;
        rows.push_back(r);
    }
    const auto m = fit_price_model(rows);
    CHECK(std::abs(m.intercept - 4.50) < 1e-8);
    CHECK(std::abs(m.distance_slope - 1.15e-5) < 1e-8);
    CHECK(std::abs(m.weight_slope - 1.65e-6) < 1e-8);
    CHECK(std::abs(m.weight_break_effect.at("b") - 0.2) < 1e-8);
    CHECK(std::abs(m.to_country_effect.at("US") - 0.3) < 1e-8);
    CHECK(m.r_squared == doctest::Approx(1.0).epsilon(1e-10));
    for (const auto& r : rows) CHECK(std::abs(m.predict_log_price(r) - r.ln_price) < 1e-9);

    // noisy 10-row instance against an explicit normal-equation solve
    std::vector<PriceRow> small;
    Eigen::MatrixXd x(10, 3);
    Eigen::VectorXd y(10);
    for (int k = 0; k < 10; ++k) {
        PriceRow r;
        r.distance_km = 1000 + 500 * k;
        r.weight_kg = 50 + 37.0 * ((k * 7) % 10);
        r.weight_break = "x";
        r.month = "01";
        r.to_country = k < 5 ? "A" : "B";
        r.pieces = "1";
        r.ln_price = 5.0 + normal_draw(s, 0.0, 0.1);
        small.push_back(r);
        x.row(k) << 1.0, r.distance_km, r.weight_kg;
        y(k) = r.ln_price;
    }
    Eigen::MatrixXd xfull(10, 4);
    xfull << x, Eigen::VectorXd::NullaryExpr(10, [](Eigen::Index k) { return k < 5 ? 0.0 : 1.0; });
    const Eigen::VectorXd oracle = (xfull.transpose() * xfull).inverse() * xfull.transpose() * y;
    const auto ms = fit_price_model(small);
    CHECK(std::abs(ms.intercept - oracle(0)) < 1e-10);
    CHECK(std::abs(ms.distance_slope - oracle(1)) < 1e-10);
    CHECK(std::abs(ms.weight_slope - oracle(2)) < 1e-10);
    CHECK(std::abs(ms.to_country_effect.at("B") - oracle(3)) < 1e-10);

    std::vector<std::string> warnings;
    PriceRow unseen = small[0];
    unseen.to_country = "ZZ";
    CHECK(ms.predict_log_price(unseen, &warnings) == doctest::Approx(ms.predict_log_price(small[0]) -
                                                                     ms.to_country_effect.at("A")));
    CHECK(warnings.size() == 1);
}

TEST_CASE("rank-deficient price design names the collinear column") {
    std::vector<PriceRow> rows;
    for (int k = 0; k < 6; ++k) {
        PriceRow r;
        r.distance_km = 100.0 * k;
        r.weight_kg = 200.0 * k;
        r.weight_break = "a";
        r.month = "01";
        r.to_country = "X";
        r.pieces = "1";
        r.ln_price = 1.0 + 0.01 * k;
        rows.push_back(r);
    }
    try {
        fit_price_model(rows);
        FAIL("expected rank deficiency");
    } catch (const InputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("collinear") != std::string::npos);
        CHECK((msg.find("distance_km") != std::string::npos || msg.find("weight_kg") != std::string::npos));
    }
}

TEST_CASE("signals are ordered by period then route") {
    CustomerPanel c;
    c.routes = {{"A", 1.0, {}}, {"B", 1.0, {}}};
    c.cells.assign(3, std::vector<PanelCell>(2));
    c.cells[2][0].y_star = true;
    c.cells[2][0].delays = {1.0};
    c.cells[0][1].y_star = true;
    c.cells[0][1].delays = {2.0, 3.0};
    const auto s = customer_signals(c);
    REQUIRE(s.size() == 3);
    CHECK(s[0].period == 0);
    CHECK(s[0].route == 1);
    CHECK(s[2].period == 2);
    CHECK(s[2].delay == 1.0);
}
