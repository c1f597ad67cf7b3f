#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spillover {

/// Seconds since 1970-01-01T00:00:00Z.
using UtcSeconds = std::int64_t;

/// Parses `YYYY-MM-DD[T| ]HH:MM[:SS][Z|(+|-)HH:MM]` into UTC seconds. A missing zone means UTC.
UtcSeconds parse_iso8601(const std::string& text);
std::string format_iso8601(UtcSeconds t);
UtcSeconds truncate_to_midnight(UtcSeconds t);
/// Calendar month 1..12 of a UTC instant.
int utc_month(UtcSeconds t);

inline constexpr UtcSeconds kPeriodSeconds = 84 * 3600;

struct ShipmentRecord {
    std::string customer_id;
    std::string route_id;
    UtcSeconds start = 0;
    UtcSeconds delivery = 0;
    UtcSeconds planned = 0;
    double weight_kg = 0.0;
    int pieces = 1;
    double origin_lat = 0.0;
    double origin_lon = 0.0;
    double dest_lat = 0.0;
    double dest_lon = 0.0;

    /// Actual minus planned delivery, in hours; negative means early.
    double transport_delay_hours() const {
        return static_cast<double>(delivery - planned) / 3600.0;
    }
};

std::vector<ShipmentRecord> read_shipments_csv(const std::string& path);

/// Haversine distance on a sphere of radius 6371 km; arguments in degrees.
double great_circle_distance(double lat1, double lon1, double lat2, double lon2);

struct RouteInfo {
    std::string id;
    double distance_km = std::numeric_limits<double>::quiet_NaN();
    /// Destination-country level for the price model; empty when unknown.
    std::string to_country;
};

struct PanelCell {
    bool y = false;
    bool y_star = false;
    /// Delays (hours) of every shipment delivered in this cell; non-empty iff y_star.
    std::vector<double> delays;
    double price = std::numeric_limits<double>::quiet_NaN();
    double weight_kg = std::numeric_limits<double>::quiet_NaN();
    double pieces = std::numeric_limits<double>::quiet_NaN();
    /// Optional covariates named by ChoicePanel::covariate_names.
    std::vector<double> extra;
};

struct CustomerPanel {
    std::string id;
    std::vector<RouteInfo> routes;
    /// cells[period][route]
    std::vector<std::vector<PanelCell>> cells;

    std::size_t route_index(const std::string& route_id) const;
};

/** Period-gridded purchase and delivery panel.
 *
 * Periods are 0-based half-week slots. At most one route per (customer, period)
 * carries y = 1; deliveries (y_star) are recorded in the period they land in,
 * which may differ from the period the shipment started.
 */
struct ChoicePanel {
    int num_periods = 0;
    std::optional<UtcSeconds> epoch;
    std::vector<int> month;            ///< per period, 1..12
    std::vector<int> second_half_week; ///< per period, 0 or 1
    std::vector<std::string> covariate_names;
    std::vector<CustomerPanel> customers;

    void validate() const;
};

struct QualitySignal {
    std::size_t route = 0;
    int period = 0;
    double delay = 0.0;
};

/// Every delivered shipment of one customer, ordered by period then route.
std::vector<QualitySignal> customer_signals(const CustomerPanel& customer);

struct BuildOptions {
    /// Period-0 anchor; defaults to the earliest start truncated to midnight UTC.
    std::optional<UtcSeconds> epoch;
    /// Optional route_id -> alias (e.g. destination country) relabelling applied before gridding.
    std::map<std::string, std::string> route_alias;
};

struct BuildDiagnostics {
    std::size_t records_in = 0;
    std::size_t rejected_before_epoch = 0;
    std::size_t rejected_negative_duration = 0;
    std::size_t dropped_multi_arrivals = 0;
    std::size_t dropped_routes = 0;
    std::vector<std::string> messages;
};

struct BuildResult {
    ChoicePanel panel;
    BuildDiagnostics diagnostics;
};

/// Grid records into 84-hour periods, collapsing multiple arrivals per customer-period
/// onto the customer's most frequently used route.
BuildResult build_periods(std::vector<ShipmentRecord> records, const BuildOptions& options = {});

struct FilterRules {
    int early_periods = 24;          ///< length of the "first three months" window
    int min_early_shipments = 5;
    int min_late_shipments = 15;
    int min_routes = 2;
    int max_routes = 10;
    double max_top_route_share = 0.70;
    int max_total_shipments = 100;
};

struct FilterReport {
    std::size_t customers_in = 0;
    std::size_t too_few_early = 0;
    std::size_t too_few_late = 0;
    std::size_t too_few_routes = 0;
    std::size_t too_many_routes = 0;
    std::size_t top_route_dominant = 0;
    std::size_t too_many_shipments = 0;
    std::size_t retained = 0;
};

struct FilterResult {
    ChoicePanel panel;
    FilterReport report;
};

FilterResult filter_customers(const ChoicePanel& panel, const FilterRules& rules = {});

/// Fill weight and pieces of non-purchase cells with the customer-route mean of observed cells.
ChoicePanel interpolate_covariates(const ChoicePanel& panel);

struct PriceRow {
    double ln_price = 0.0;
    double distance_km = 0.0;
    double weight_kg = 0.0;
    std::string weight_break;
    std::string month;
    std::string to_country;
    std::string pieces;
};

/** Log-linear price forecast with dummy-coded categorical effects.
 *
 * ln(price) = intercept + distance_slope * km + weight_slope * kg + sum of level effects.
 * The first (lexicographically smallest) level of each factor is the reference.
 */
struct PriceModel {
    double intercept = 4.50;
    double distance_slope = 1.15e-5;
    double weight_slope = 1.65e-6;
    std::map<std::string, double> weight_break_effect;
    std::map<std::string, double> month_effect;
    std::map<std::string, double> to_country_effect;
    std::map<std::string, double> pieces_effect;
    double r_squared = std::numeric_limits<double>::quiet_NaN();

    /// Unseen levels contribute 0; a warning is appended when `warnings` is given.
    double predict_log_price(const PriceRow& row, std::vector<std::string>* warnings = nullptr) const;
    double predict_price(const PriceRow& row, std::vector<std::string>* warnings = nullptr) const;
};

PriceModel fit_price_model(const std::vector<PriceRow>& rows);
std::vector<PriceRow> read_price_rows_csv(const std::string& path);
/// IATA-style weight break label for a chargeable weight.
std::string weight_break_label(double weight_kg);

/// Impute the price of every cell from the model (distance, weight, period month, pieces).
void impute_prices(ChoicePanel& panel, const PriceModel& model,
                   std::vector<std::string>* warnings = nullptr);

void write_panel_csv(const ChoicePanel& panel, const std::string& path);
ChoicePanel read_panel_csv(const std::string& path);

}  // namespace spillover
