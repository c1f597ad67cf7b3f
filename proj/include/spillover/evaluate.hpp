#pragma once

#include <optional>
#include <string>
#include <vector>

namespace spillover {

struct FitReport {
    std::string label;
    /// Grid coordinates for the rank table; optional for flat lists.
    std::string learning_rule;
    std::string utility;
    double loglik = 0.0;
    int num_parameters = 0;
    double aic = 0.0;
    std::optional<double> dic;
    int ll_rank = 0;
    int aic_rank = 0;
};

double aic(double loglik, int num_parameters);

FitReport make_report(std::string label, double loglik, int num_parameters, std::optional<double> dic = std::nullopt);

/// Ranks by LL (descending) and AIC (ascending); ties go to fewer parameters, then label.
std::vector<FitReport> rank_models(std::vector<FitReport> reports);

/// Rank grid with utility specs as rows and learning rules as columns, each cell "LL rank/AIC rank".
std::string rank_table_markdown(const std::vector<FitReport>& ranked, const std::vector<std::string>& rule_order,
                                const std::vector<std::string>& utility_order);
std::string reports_csv(const std::vector<FitReport>& ranked);

}  // namespace spillover
