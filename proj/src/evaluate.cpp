#include "spillover/evaluate.hpp"

#include "spillover/csv.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace spillover {

double aic(double loglik, int num_parameters) {
    if (num_parameters < 0) throw std::invalid_argument("parameter count must be >= 0");
    return 2.0 * num_parameters - 2.0 * loglik;
}

FitReport make_report(std::string label, double loglik, int num_parameters, std::optional<double> dic) {
    FitReport r;
    r.label = std::move(label);
    r.loglik = loglik;
    r.num_parameters = num_parameters;
    r.aic = aic(loglik, num_parameters);
    r.dic = dic;
    return r;
}

std::vector<FitReport> rank_models(std::vector<FitReport> reports) {
    if (reports.size() < 2) throw std::invalid_argument("ranking needs at least two reports");
    std::vector<std::size_t> order(reports.size());
    const auto assign = [&](auto better, int FitReport::*field) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const auto& x = reports[a];
            const auto& y = reports[b];
            if (better(x, y)) return true;
            if (better(y, x)) return false;
            if (x.num_parameters != y.num_parameters) return x.num_parameters < y.num_parameters;
            return x.label < y.label;
        });
        for (std::size_t k = 0; k < order.size(); ++k) reports[order[k]].*field = static_cast<int>(k + 1);
    };
    assign([](const FitReport& a, const FitReport& b) { return a.loglik > b.loglik; }, &FitReport::ll_rank);
    assign([](const FitReport& a, const FitReport& b) { return a.aic < b.aic; }, &FitReport::aic_rank);
    return reports;
}

std::string rank_table_markdown(const std::vector<FitReport>& ranked, const std::vector<std::string>& rule_order,
                                const std::vector<std::string>& utility_order) {
    std::ostringstream out;
    out << "| LL/AIC |";
    for (const auto& r : rule_order) out << ' ' << r << " |";
    out << "\n|---|";
    for (std::size_t k = 0; k < rule_order.size(); ++k) out << "---|";
    out << '\n';
    for (const auto& u : utility_order) {
        out << "| " << u << " |";
        for (const auto& r : rule_order) {
            const auto it = std::find_if(ranked.begin(), ranked.end(), [&](const FitReport& f) {
                return f.learning_rule == r && f.utility == u;
            });
            if (it == ranked.end()) {
                out << " - |";
            } else {
                out << ' ' << it->ll_rank << '/' << it->aic_rank << " |";
            }
        }
        out << '\n';
    }
    return out.str();
}

std::string reports_csv(const std::vector<FitReport>& ranked) {
    std::ostringstream out;
    out << "label,learning_rule,utility,neg_loglik,num_parameters,aic,dic,ll_rank,aic_rank\n";
    for (const auto& r : ranked) {
        out << r.label << ',' << r.learning_rule << ',' << r.utility << ',' << format_double(-r.loglik) << ','
            << r.num_parameters << ',' << format_double(r.aic) << ',' << (r.dic ? format_double(*r.dic) : "") << ','
            << r.ll_rank << ',' << r.aic_rank << '\n';
    }
    return out.str();
}

}  // namespace spillover
