#include "spillover/panel.hpp"

#include "spillover/csv.hpp"
#include "spillover/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>
#include <tuple>

namespace spillover {

namespace {

// Howard Hinnant's civil-calendar algorithms.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y += m <= 2;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int read_digits(const std::string& text, std::size_t& pos, int count) {
    int value = 0;
    for (int k = 0; k < count; ++k, ++pos) {
        if (pos >= text.size() || text[pos] < '0' || text[pos] > '9') {
            throw InputError("malformed timestamp '" + text + "'");
        }
        value = value * 10 + (text[pos] - '0');
    }
    return value;
}

void expect_char(const std::string& text, std::size_t& pos, char c) {
    if (pos >= text.size() || text[pos] != c) throw InputError("malformed timestamp '" + text + "'");
    ++pos;
}

double mean_of(const std::vector<double>& values) {
    double total = 0.0;
    for (double v : values) total += v;
    return values.empty() ? std::numeric_limits<double>::quiet_NaN()
                          : total / static_cast<double>(values.size());
}

}  // namespace

UtcSeconds parse_iso8601(const std::string& text) {
    std::size_t pos = 0;
    const int year = read_digits(text, pos, 4);
    expect_char(text, pos, '-');
    const int month = read_digits(text, pos, 2);
    expect_char(text, pos, '-');
    const int day = read_digits(text, pos, 2);
    int hour = 0, minute = 0, second = 0;
    if (pos < text.size()) {
        if (text[pos] != 'T' && text[pos] != ' ') throw InputError("malformed timestamp '" + text + "'");
        ++pos;
        hour = read_digits(text, pos, 2);
        expect_char(text, pos, ':');
        minute = read_digits(text, pos, 2);
        if (pos < text.size() && text[pos] == ':') {
            ++pos;
            second = read_digits(text, pos, 2);
            if (pos < text.size() && text[pos] == '.') {
                ++pos;
                while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
            }
        }
    }
    int offset_seconds = 0;
    if (pos < text.size()) {
        if (text[pos] == 'Z') {
            ++pos;
        } else if (text[pos] == '+' || text[pos] == '-') {
            const int sign = text[pos] == '-' ? -1 : 1;
            ++pos;
            const int oh = read_digits(text, pos, 2);
            if (pos < text.size() && text[pos] == ':') ++pos;
            const int om = read_digits(text, pos, 2);
            offset_seconds = sign * (oh * 3600 + om * 60);
        }
    }
    if (pos != text.size() || month < 1 || month > 12 || day < 1 || day > 31 || hour > 23 ||
        minute > 59 || second > 60) {
        throw InputError("malformed timestamp '" + text + "'");
    }
    const auto days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
    return days * 86400 + hour * 3600 + minute * 60 + second - offset_seconds;
}

std::string format_iso8601(UtcSeconds t) {
    const auto days = floor_div(t, 86400);
    const auto rem = t - days * 86400;
    std::int64_t y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%04lld-%02u-%02uT%02d:%02d:%02dZ", static_cast<long long>(y),
                  m, d, static_cast<int>(rem / 3600), static_cast<int>((rem / 60) % 60),
                  static_cast<int>(rem % 60));
    return buffer;
}

UtcSeconds truncate_to_midnight(UtcSeconds t) { return floor_div(t, 86400) * 86400; }

int utc_month(UtcSeconds t) {
    std::int64_t y;
    unsigned m, d;
    civil_from_days(floor_div(t, 86400), y, m, d);
    return static_cast<int>(m);
}

double great_circle_distance(double lat1, double lon1, double lat2, double lon2) {
    for (double lat : {lat1, lat2}) {
        if (!(lat >= -90.0 && lat <= 90.0)) throw std::invalid_argument("latitude out of [-90, 90]");
    }
    for (double lon : {lon1, lon2}) {
        if (!(lon >= -180.0 && lon <= 180.0)) throw std::invalid_argument("longitude out of [-180, 180]");
    }
    constexpr double radius_km = 6371.0;
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (lat2 - lat1) * rad;
    const double dlon = (lon2 - lon1) * rad;
    const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * radius_km * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<ShipmentRecord> read_shipments_csv(const std::string& path) {
    const auto table = read_csv(path);
    const auto c_customer = table.column("customer_id");
    const auto c_route = table.column("route_id");
    const auto c_start = table.column("start_ts");
    const auto c_delivery = table.column("delivery_ts");
    const auto c_planned = table.column("planned_ts");
    const auto c_weight = table.column("weight_kg");
    const auto c_pieces = table.column("pieces");
    const auto c_olat = table.column("olat");
    const auto c_olon = table.column("olon");
    const auto c_dlat = table.column("dlat");
    const auto c_dlon = table.column("dlon");

    std::vector<ShipmentRecord> records;
    records.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto where = path + ":" + std::to_string(table.line_numbers[r]) + ": ";
        ShipmentRecord rec;
        rec.customer_id = row[c_customer];
        rec.route_id = row[c_route];
        if (rec.customer_id.empty() || rec.route_id.empty()) {
            throw InputError(where + "empty customer_id or route_id");
        }
        try {
            rec.start = parse_iso8601(row[c_start]);
            rec.delivery = parse_iso8601(row[c_delivery]);
            rec.planned = parse_iso8601(row[c_planned]);
        } catch (const InputError& e) {
            throw InputError(where + e.what());
        }
        rec.weight_kg = parse_double(row[c_weight], table, r, "weight_kg");
        rec.pieces = static_cast<int>(parse_int(row[c_pieces], table, r, "pieces"));
        rec.origin_lat = parse_double(row[c_olat], table, r, "olat");
        rec.origin_lon = parse_double(row[c_olon], table, r, "olon");
        rec.dest_lat = parse_double(row[c_dlat], table, r, "dlat");
        rec.dest_lon = parse_double(row[c_dlon], table, r, "dlon");
        if (rec.weight_kg < 0.0) throw InputError(where + "negative weight_kg");
        if (rec.pieces < 1) throw InputError(where + "pieces must be positive");
        records.push_back(std::move(rec));
    }
    return records;
}

std::size_t CustomerPanel::route_index(const std::string& route_id) const {
    for (std::size_t j = 0; j < routes.size(); ++j) {
        if (routes[j].id == route_id) return j;
    }
    throw InputError("customer '" + id + "' has no route '" + route_id + "'");
}

void ChoicePanel::validate() const {
    const auto periods = static_cast<std::size_t>(num_periods);
    if (month.size() != periods || second_half_week.size() != periods) {
        throw InputError("panel calendar arrays do not match the period count");
    }
    for (const auto& c : customers) {
        if (c.routes.empty()) throw InputError("customer '" + c.id + "' has an empty route set");
        if (c.cells.size() != periods) throw InputError("customer '" + c.id + "' has a ragged period grid");
        for (std::size_t t = 0; t < periods; ++t) {
            if (c.cells[t].size() != c.routes.size()) {
                throw InputError("customer '" + c.id + "' has a ragged route grid");
            }
            int arrivals = 0;
            for (const auto& cell : c.cells[t]) {
                arrivals += cell.y ? 1 : 0;
                if (cell.y_star != !cell.delays.empty()) {
                    throw InputError("customer '" + c.id + "' period " + std::to_string(t) +
                                     ": delay present iff delivered");
                }
                if (cell.extra.size() != covariate_names.size()) {
                    throw InputError("customer '" + c.id + "': covariate count mismatch");
                }
            }
            if (arrivals > 1) {
                throw InputError("customer '" + c.id + "' period " + std::to_string(t) +
                                 ": more than one arrival");
            }
        }
    }
}

std::vector<QualitySignal> customer_signals(const CustomerPanel& customer) {
    std::vector<QualitySignal> out;
    for (std::size_t t = 0; t < customer.cells.size(); ++t) {
        for (std::size_t j = 0; j < customer.cells[t].size(); ++j) {
            for (double q : customer.cells[t][j].delays) {
                out.push_back({j, static_cast<int>(t), q});
            }
        }
    }
    return out;
}

BuildResult build_periods(std::vector<ShipmentRecord> records, const BuildOptions& options) {
    BuildResult result;
    auto& diag = result.diagnostics;
    diag.records_in = records.size();
    for (auto& rec : records) {
        if (auto it = options.route_alias.find(rec.route_id); it != options.route_alias.end()) {
            rec.route_id = it->second;
        }
    }
    // Canonical order so the output does not depend on input order.
    std::sort(records.begin(), records.end(), [](const ShipmentRecord& a, const ShipmentRecord& b) {
        return std::tie(a.customer_id, a.start, a.route_id, a.delivery, a.planned, a.weight_kg, a.pieces) <
               std::tie(b.customer_id, b.start, b.route_id, b.delivery, b.planned, b.weight_kg, b.pieces);
    });

    UtcSeconds epoch = 0;
    if (options.epoch) {
        epoch = *options.epoch;
    } else if (!records.empty()) {
        UtcSeconds earliest = records.front().start;
        for (const auto& rec : records) earliest = std::min(earliest, rec.start);
        epoch = truncate_to_midnight(earliest);
    }

    struct Placed {
        const ShipmentRecord* rec;
        int start_period;
        int delivery_period;
    };
    std::map<std::string, std::vector<Placed>> by_customer;
    int last_period = -1;
    for (const auto& rec : records) {
        if (rec.start < epoch) {
            ++diag.rejected_before_epoch;
            diag.messages.push_back("customer " + rec.customer_id + " route " + rec.route_id +
                                    ": start " + format_iso8601(rec.start) + " precedes epoch");
            continue;
        }
        if (rec.delivery < rec.start) {
            ++diag.rejected_negative_duration;
            diag.messages.push_back("customer " + rec.customer_id + " route " + rec.route_id +
                                    ": delivery precedes start");
            continue;
        }
        const auto sp = static_cast<int>(floor_div(rec.start - epoch, kPeriodSeconds));
        const auto dp = static_cast<int>(floor_div(rec.delivery - epoch, kPeriodSeconds));
        last_period = std::max(last_period, dp);
        by_customer[rec.customer_id].push_back({&rec, sp, dp});
    }

    auto& panel = result.panel;
    panel.epoch = epoch;
    panel.num_periods = last_period + 1;
    for (int t = 0; t < panel.num_periods; ++t) {
        panel.month.push_back(utc_month(epoch + static_cast<UtcSeconds>(t) * kPeriodSeconds));
        panel.second_half_week.push_back(t % 2);
    }

    for (const auto& [customer_id, placed] : by_customer) {
        std::map<std::string, int> totals;
        for (const auto& p : placed) ++totals[p.rec->route_id];

        // Per period, keep only the arrivals on the customer's most used route.
        std::map<int, std::string> kept_route;
        for (const auto& p : placed) {
            auto [it, inserted] = kept_route.emplace(p.start_period, p.rec->route_id);
            if (inserted) continue;
            const auto& current = it->second;
            const int tc = totals[current];
            const int tn = totals[p.rec->route_id];
            if (tn > tc || (tn == tc && p.rec->route_id < current)) it->second = p.rec->route_id;
        }
        std::set<std::string> route_set;
        for (const auto& [t, route] : kept_route) route_set.insert(route);

        CustomerPanel customer;
        customer.id = customer_id;
        std::map<std::string, std::size_t> index;
        for (const auto& route : route_set) {
            index[route] = customer.routes.size();
            customer.routes.push_back({route, std::numeric_limits<double>::quiet_NaN(), {}});
        }
        for (const auto& [route, count] : totals) {
            if (!route_set.count(route)) {
                ++diag.dropped_routes;
                diag.messages.push_back("customer " + customer_id + ": route " + route +
                                        " has no arrival after collapsing and is dropped");
            }
        }
        customer.cells.assign(static_cast<std::size_t>(panel.num_periods),
                              std::vector<PanelCell>(customer.routes.size()));

        std::vector<std::vector<double>> distances(customer.routes.size());
        std::map<std::pair<int, std::size_t>, std::pair<std::vector<double>, std::vector<double>>> loads;
        for (const auto& p : placed) {
            const bool purchased = kept_route.at(p.start_period) == p.rec->route_id;
            if (!purchased) ++diag.dropped_multi_arrivals;
            const auto it = index.find(p.rec->route_id);
            if (it == index.end()) continue;
            const auto j = it->second;
            distances[j].push_back(great_circle_distance(p.rec->origin_lat, p.rec->origin_lon,
                                                         p.rec->dest_lat, p.rec->dest_lon));
            auto& delivered = customer.cells[static_cast<std::size_t>(p.delivery_period)][j];
            delivered.y_star = true;
            delivered.delays.push_back(p.rec->transport_delay_hours());
            if (purchased) {
                customer.cells[static_cast<std::size_t>(p.start_period)][j].y = true;
                auto& load = loads[{p.start_period, j}];
                load.first.push_back(p.rec->weight_kg);
                load.second.push_back(static_cast<double>(p.rec->pieces));
            }
        }
        for (const auto& [key, load] : loads) {
            auto& cell = customer.cells[static_cast<std::size_t>(key.first)][key.second];
            cell.weight_kg = mean_of(load.first);
            cell.pieces = mean_of(load.second);
        }
        for (std::size_t j = 0; j < customer.routes.size(); ++j) {
            customer.routes[j].distance_km = mean_of(distances[j]);
        }
        panel.customers.push_back(std::move(customer));
    }
    panel.validate();
    return result;
}

FilterResult filter_customers(const ChoicePanel& panel, const FilterRules& rules) {
    FilterResult result;
    result.panel = panel;
    result.panel.customers.clear();
    auto& report = result.report;
    report.customers_in = panel.customers.size();
    for (const auto& c : panel.customers) {
        int early = 0, late = 0;
        std::vector<int> per_route(c.routes.size(), 0);
        for (std::size_t t = 0; t < c.cells.size(); ++t) {
            for (std::size_t j = 0; j < c.routes.size(); ++j) {
                if (!c.cells[t][j].y) continue;
                ++per_route[j];
                (static_cast<int>(t) < rules.early_periods ? early : late) += 1;
            }
        }
        const int total = early + late;
        const int used_routes =
            static_cast<int>(std::count_if(per_route.begin(), per_route.end(), [](int n) { return n > 0; }));
        const int top = per_route.empty() ? 0 : *std::max_element(per_route.begin(), per_route.end());
        const double top_share = total > 0 ? static_cast<double>(top) / total : 1.0;
        if (early < rules.min_early_shipments) {
            ++report.too_few_early;
        } else if (late < rules.min_late_shipments) {
            ++report.too_few_late;
        } else if (used_routes < rules.min_routes) {
            ++report.too_few_routes;
        } else if (used_routes > rules.max_routes) {
            ++report.too_many_routes;
        } else if (top_share > rules.max_top_route_share) {
            ++report.top_route_dominant;
        } else if (total > rules.max_total_shipments) {
            ++report.too_many_shipments;
        } else {
            result.panel.customers.push_back(c);
        }
    }
    report.retained = result.panel.customers.size();
    return result;
}

ChoicePanel interpolate_covariates(const ChoicePanel& panel) {
    ChoicePanel out = panel;
    for (auto& c : out.customers) {
        for (std::size_t j = 0; j < c.routes.size(); ++j) {
            std::vector<double> weights, pieces;
            for (const auto& row : c.cells) {
                if (!std::isnan(row[j].weight_kg)) weights.push_back(row[j].weight_kg);
                if (!std::isnan(row[j].pieces)) pieces.push_back(row[j].pieces);
            }
            if (weights.empty() || pieces.empty()) {
                throw InputError("customer '" + c.id + "' route '" + c.routes[j].id +
                                 "' has no observed shipment to interpolate from");
            }
            const double w = mean_of(weights);
            const double p = mean_of(pieces);
            for (auto& row : c.cells) {
                if (std::isnan(row[j].weight_kg)) row[j].weight_kg = w;
                if (std::isnan(row[j].pieces)) row[j].pieces = p;
            }
        }
    }
    return out;
}

std::string weight_break_label(double weight_kg) {
    if (weight_kg < 45.0) return "-45";
    if (weight_kg < 100.0) return "+45";
    if (weight_kg < 300.0) return "+100";
    if (weight_kg < 500.0) return "+300";
    if (weight_kg < 1000.0) return "+500";
    return "+1000";
}

double PriceModel::predict_log_price(const PriceRow& row, std::vector<std::string>* warnings) const {
    double value = intercept + distance_slope * row.distance_km + weight_slope * row.weight_kg;
    const auto add = [&](const std::map<std::string, double>& table, const std::string& level,
                         const char* factor) {
        if (table.empty()) return;
        if (auto it = table.find(level); it != table.end()) {
            value += it->second;
        } else if (warnings) {
            warnings->push_back(std::string("unseen ") + factor + " level '" + level + "', effect 0");
        }
    };
    add(weight_break_effect, row.weight_break, "weight_break");
    add(month_effect, row.month, "month");
    add(to_country_effect, row.to_country, "to_country");
    add(pieces_effect, row.pieces, "pieces");
    return value;
}

double PriceModel::predict_price(const PriceRow& row, std::vector<std::string>* warnings) const {
    return std::exp(predict_log_price(row, warnings));
}

PriceModel fit_price_model(const std::vector<PriceRow>& rows) {
    if (rows.empty()) throw InputError("price model needs at least one row");
    using Getter = std::string PriceRow::*;
    const std::vector<std::pair<std::string, Getter>> factors = {{"weight_break", &PriceRow::weight_break},
                                                                 {"month", &PriceRow::month},
                                                                 {"to_country", &PriceRow::to_country},
                                                                 {"pieces", &PriceRow::pieces}};
    std::vector<std::string> names = {"intercept", "distance_km", "weight_kg"};
    std::vector<std::vector<std::string>> levels;
    for (const auto& [name, member] : factors) {
        std::set<std::string> seen;
        for (const auto& row : rows) seen.insert(row.*member);
        levels.emplace_back(seen.begin(), seen.end());
        for (std::size_t k = 1; k < levels.back().size(); ++k) names.push_back(name + "=" + levels.back()[k]);
    }

    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto p = static_cast<Eigen::Index>(names.size());
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, p);
    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        y(r) = row.ln_price;
        x(r, 0) = 1.0;
        x(r, 1) = row.distance_km;
        x(r, 2) = row.weight_kg;
        Eigen::Index col = 3;
        for (std::size_t f = 0; f < factors.size(); ++f) {
            const auto& lv = levels[f];
            const auto pos = std::lower_bound(lv.begin(), lv.end(), row.*(factors[f].second)) - lv.begin();
            if (pos > 0) x(r, col + pos - 1) = 1.0;
            col += static_cast<Eigen::Index>(lv.size()) - 1;
        }
    }

    // Column equilibration keeps the rank decision independent of units (km vs kg).
    Eigen::VectorXd norms = x.colwise().norm().transpose();
    for (Eigen::Index k = 0; k < p; ++k) {
        if (norms(k) == 0.0) norms(k) = 1.0;
    }
    const Eigen::MatrixXd xs = x * norms.cwiseInverse().asDiagonal();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
        std::string cols;
        for (Eigen::Index k = qr.rank(); k < p; ++k) {
            if (!cols.empty()) cols += ", ";
            cols += names[static_cast<std::size_t>(qr.colsPermutation().indices()(k))];
        }
        throw InputError("price design matrix is rank deficient; collinear columns: " + cols);
    }
    const Eigen::VectorXd beta = qr.solve(y).cwiseQuotient(norms);

    PriceModel model;
    model.intercept = beta(0);
    model.distance_slope = beta(1);
    model.weight_slope = beta(2);
    std::map<std::string, double>* tables[] = {&model.weight_break_effect, &model.month_effect,
                                               &model.to_country_effect, &model.pieces_effect};
    Eigen::Index col = 3;
    for (std::size_t f = 0; f < factors.size(); ++f) {
        const auto& lv = levels[f];
        (*tables[f])[lv[0]] = 0.0;
        for (std::size_t k = 1; k < lv.size(); ++k) (*tables[f])[lv[k]] = beta(col++);
    }
    const Eigen::VectorXd fitted = x * beta;
    const double ss_res = (y - fitted).squaredNorm();
    const double ss_tot = (y.array() - y.mean()).square().sum();
    model.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return model;
}

std::vector<PriceRow> read_price_rows_csv(const std::string& path) {
    const auto table = read_csv(path);
    const auto c_price = table.column("ln_price");
    const auto c_dist = table.column("distance_km");
    const auto c_weight = table.column("weight_kg");
    const auto c_break = table.column("weight_break");
    const auto c_month = table.column("month");
    const auto c_country = table.column("to_country");
    const auto c_pieces = table.column("pieces");
    std::vector<PriceRow> rows;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        PriceRow out;
        out.ln_price = parse_double(row[c_price], table, r, "ln_price");
        out.distance_km = parse_double(row[c_dist], table, r, "distance_km");
        out.weight_kg = parse_double(row[c_weight], table, r, "weight_kg");
        out.weight_break = row[c_break].empty() ? weight_break_label(out.weight_kg) : row[c_break];
        out.month = row[c_month];
        out.to_country = row[c_country];
        out.pieces = row[c_pieces];
        rows.push_back(std::move(out));
    }
    return rows;
}

void impute_prices(ChoicePanel& panel, const PriceModel& model, std::vector<std::string>* warnings) {
    std::set<std::string> seen;
    std::vector<std::string> local;
    for (auto& c : panel.customers) {
        for (std::size_t j = 0; j < c.routes.size(); ++j) {
            if (std::isnan(c.routes[j].distance_km)) {
                throw InputError("customer '" + c.id + "' route '" + c.routes[j].id +
                                 "' has no distance for price imputation");
            }
            for (std::size_t t = 0; t < c.cells.size(); ++t) {
                auto& cell = c.cells[t][j];
                PriceRow row;
                row.distance_km = c.routes[j].distance_km;
                row.weight_kg = std::isnan(cell.weight_kg) ? 0.0 : cell.weight_kg;
                row.weight_break = weight_break_label(row.weight_kg);
                row.month = std::to_string(panel.month[t]);
                row.to_country = c.routes[j].to_country;
                row.pieces = std::isnan(cell.pieces) ? "1" : std::to_string(std::lround(cell.pieces));
                cell.price = model.predict_price(row, &local);
            }
        }
    }
    if (warnings) {
        for (auto& w : local) {
            if (seen.insert(w).second) warnings->push_back(std::move(w));
        }
    }
}

void write_panel_csv(const ChoicePanel& panel, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << "customer_id,route_id,period,y,y_star,delay_h,price,weight_kg,second_half_week,month,"
           "distance_km,pieces";
    for (const auto& name : panel.covariate_names) out << ',' << name;
    out << '\n';
    for (const auto& c : panel.customers) {
        for (std::size_t t = 0; t < c.cells.size(); ++t) {
            for (std::size_t j = 0; j < c.routes.size(); ++j) {
                const auto& cell = c.cells[t][j];
                const auto emit = [&](double delay, bool has_delay) {
                    out << c.id << ',' << c.routes[j].id << ',' << t << ',' << (cell.y ? 1 : 0) << ','
                        << (cell.y_star ? 1 : 0) << ',' << (has_delay ? format_double(delay) : "") << ','
                        << format_double(cell.price) << ',' << format_double(cell.weight_kg) << ','
                        << panel.second_half_week[t] << ',' << panel.month[t] << ','
                        << format_double(c.routes[j].distance_km) << ',' << format_double(cell.pieces);
                    for (double v : cell.extra) out << ',' << format_double(v);
                    out << '\n';
                };
                if (cell.delays.empty()) {
                    emit(0.0, false);
                } else {
                    for (double q : cell.delays) emit(q, true);
                }
            }
        }
    }
    if (!out) throw InputError("failed writing '" + path + "'");
}

ChoicePanel read_panel_csv(const std::string& path) {
    const auto table = read_csv(path);
    const auto c_customer = table.column("customer_id");
    const auto c_route = table.column("route_id");
    const auto c_period = table.column("period");
    const auto c_y = table.column("y");
    const auto c_ystar = table.column("y_star");
    const auto c_delay = table.column("delay_h");
    const auto c_price = table.column("price");
    const auto c_weight = table.column("weight_kg");
    const auto c_half = table.column("second_half_week");
    const auto c_month = table.column("month");
    const std::set<std::string> known = {"customer_id", "route_id", "period", "y", "y_star", "delay_h",
                                         "price", "weight_kg", "second_half_week", "month",
                                         "distance_km", "pieces"};
    const bool has_distance = table.has_column("distance_km");
    const bool has_pieces = table.has_column("pieces");

    ChoicePanel panel;
    std::vector<std::size_t> extra_cols;
    for (std::size_t k = 0; k < table.header.size(); ++k) {
        if (!known.count(table.header[k])) {
            panel.covariate_names.push_back(table.header[k]);
            extra_cols.push_back(k);
        }
    }
    const auto optional_double = [&](const std::string& text, std::size_t r, const char* column) {
        return text.empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double(text, table, r, column);
    };

    std::vector<std::string> customer_order;
    std::map<std::string, std::size_t> customer_index;
    std::vector<std::vector<std::string>> route_order;
    std::vector<std::map<std::string, std::size_t>> route_index;
    std::vector<std::vector<RouteInfo>> route_info;
    std::map<std::tuple<std::size_t, std::size_t, int>, PanelCell> cells;
    std::map<int, std::pair<int, int>> calendar;
    int max_period = -1;

    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto where = path + ":" + std::to_string(table.line_numbers[r]) + ": ";
        auto [cit, cnew] = customer_index.emplace(row[c_customer], customer_order.size());
        if (cnew) {
            customer_order.push_back(row[c_customer]);
            route_order.emplace_back();
            route_index.emplace_back();
            route_info.emplace_back();
        }
        const auto ci = cit->second;
        auto [rit, rnew] = route_index[ci].emplace(row[c_route], route_order[ci].size());
        if (rnew) {
            route_order[ci].push_back(row[c_route]);
            route_info[ci].push_back({row[c_route], std::numeric_limits<double>::quiet_NaN(), {}});
        }
        const auto rj = rit->second;
        const auto period = parse_int(row[c_period], table, r, "period");
        if (period < 0) throw InputError(where + "negative period");
        const int t = static_cast<int>(period);
        max_period = std::max(max_period, t);

        const int month = static_cast<int>(parse_int(row[c_month], table, r, "month"));
        const int half = static_cast<int>(parse_int(row[c_half], table, r, "second_half_week"));
        if (month < 1 || month > 12) throw InputError(where + "month outside 1..12");
        if (half != 0 && half != 1) throw InputError(where + "second_half_week must be 0 or 1");
        auto [calit, calnew] = calendar.emplace(t, std::make_pair(month, half));
        if (!calnew && calit->second != std::make_pair(month, half)) {
            throw InputError(where + "inconsistent calendar for period " + std::to_string(t));
        }
        if (has_distance) {
            const double d = optional_double(row[table.column("distance_km")], r, "distance_km");
            auto& info = route_info[ci][rj];
            if (!std::isnan(d)) {
                if (!std::isnan(info.distance_km) && info.distance_km != d) {
                    throw InputError(where + "inconsistent distance_km for route " + info.id);
                }
                info.distance_km = d;
            }
        }

        const auto parse_flag = [&](std::size_t col, const char* name) {
            const auto v = parse_int(row[col], table, r, name);
            if (v != 0 && v != 1) throw InputError(where + name + " must be 0 or 1");
            return v == 1;
        };
        const bool y = parse_flag(c_y, "y");
        const bool y_star = parse_flag(c_ystar, "y_star");
        const auto key = std::make_tuple(ci, rj, t);
        auto [cell_it, fresh] = cells.try_emplace(key);
        auto& cell = cell_it->second;
        if (fresh) {
            cell.y = y;
            cell.y_star = y_star;
            cell.price = optional_double(row[c_price], r, "price");
            cell.weight_kg = optional_double(row[c_weight], r, "weight_kg");
            if (has_pieces) cell.pieces = optional_double(row[table.column("pieces")], r, "pieces");
            for (std::size_t k = 0; k < extra_cols.size(); ++k) {
                cell.extra.push_back(optional_double(row[extra_cols[k]], r, table.header[extra_cols[k]].c_str()));
            }
        } else if (cell.y != y || cell.y_star != y_star) {
            throw InputError(where + "repeated cell disagrees on y / y_star");
        }
        if (!row[c_delay].empty()) {
            if (!y_star) throw InputError(where + "delay_h given on a row with y_star = 0");
            const double q = parse_double(row[c_delay], table, r, "delay_h");
            if (!std::isfinite(q)) throw InputError(where + "non-finite delay_h");
            cell.delays.push_back(q);
        } else if (y_star) {
            throw InputError(where + "y_star = 1 without delay_h");
        }
    }

    panel.num_periods = max_period + 1;
    for (int t = 0; t < panel.num_periods; ++t) {
        const auto it = calendar.find(t);
        if (it == calendar.end()) throw InputError(path + ": no rows for period " + std::to_string(t));
        panel.month.push_back(it->second.first);
        panel.second_half_week.push_back(it->second.second);
    }
    for (std::size_t ci = 0; ci < customer_order.size(); ++ci) {
        CustomerPanel c;
        c.id = customer_order[ci];
        c.routes = route_info[ci];
        c.cells.assign(static_cast<std::size_t>(panel.num_periods), std::vector<PanelCell>(c.routes.size()));
        for (auto& row : c.cells) {
            for (auto& cell : row) cell.extra.assign(panel.covariate_names.size(),
                                                     std::numeric_limits<double>::quiet_NaN());
        }
        panel.customers.push_back(std::move(c));
    }
    for (auto& [key, cell] : cells) {
        const auto [ci, rj, t] = key;
        panel.customers[ci].cells[static_cast<std::size_t>(t)][rj] = std::move(cell);
    }
    panel.validate();
    return panel;
}

}  // namespace spillover
