#include "spillover/choice.hpp"

#include "spillover/errors.hpp"
#include "spillover/random.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace spillover {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

double log_sum_exp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace

void UtilitySpec::validate() const {
    if (quadratic && shape != QualityShape::Asymmetric) {
        throw std::invalid_argument("quadratic quality terms need the asymmetric shape");
    }
    for (double s : {scalings.price, scalings.weight, scalings.mu, scalings.sigma2, scalings.var_mu}) {
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("predictor scalings must be positive");
    }
}

std::string UtilitySpec::label() const {
    std::string out;
    switch (shape) {
        case QualityShape::None: out = "null"; break;
        case QualityShape::Symmetric: out = "S"; break;
        case QualityShape::Asymmetric: out = "A"; break;
    }
    if (era) out += "+ERA";
    if (bua) out += "+BUA";
    if (quadratic) out += "+Q";
    return out;
}

UtilitySpec with_quality_label(UtilitySpec base, const std::string& label) {
    std::vector<std::string> parts;
    std::stringstream ss(lower(label));
    for (std::string tok; std::getline(ss, tok, '+');) parts.push_back(tok);
    if (parts.empty()) throw InputError("empty utility label");
    base.era = base.bua = base.quadratic = false;
    const auto& head = parts[0];
    if (head == "null" || head == "none") {
        base.shape = QualityShape::None;
    } else if (head == "s" || head == "symmetric") {
        base.shape = QualityShape::Symmetric;
    } else if (head == "a" || head == "asymmetric") {
        base.shape = QualityShape::Asymmetric;
    } else {
        throw InputError("unknown utility label '" + label + "'");
    }
    for (std::size_t k = 1; k < parts.size(); ++k) {
        if (parts[k] == "era") {
            base.era = true;
        } else if (parts[k] == "bua") {
            base.bua = true;
        } else if (parts[k] == "q") {
            base.quadratic = true;
        } else {
            throw InputError("unknown utility term '" + parts[k] + "' in '" + label + "'");
        }
    }
    try {
        base.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(label + ": " + e.what());
    }
    return base;
}

std::vector<std::string> utility_ladder() { return {"S", "A", "A+ERA", "A+ERA+BUA", "A+ERA+BUA+Q"}; }

double quality_utility(const QualityInputs& belief, const UtilitySpec& spec, const QualityCoefficients& coef) {
    const auto& sc = spec.scalings;
    double f = 0.0;
    if (spec.shape == QualityShape::Symmetric) {
        f += coef.mu * belief.mu / sc.mu;
    } else if (spec.shape == QualityShape::Asymmetric) {
        const double plus = std::max(belief.mu, 0.0) / sc.mu;
        const double minus = std::min(belief.mu, 0.0) / sc.mu;
        f += coef.mu_plus * plus + coef.mu_minus * minus;
        if (spec.quadratic) f += coef.mu_plus_sq * plus * plus + coef.mu_minus_sq * minus * minus;
    }
    if (spec.era) f += coef.sigma2 * belief.sigma2 / sc.sigma2;
    if (spec.bua) f += coef.var_mu * belief.var_mu / sc.var_mu;
    return f;
}

double choice_probability(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

double log_choice_probability(double v) {
    if (v >= 0.0) return -std::log1p(std::exp(-v));
    return v - std::log1p(std::exp(v));
}

double purchase_probability(double lambda, double m, double v) { return lambda * m * choice_probability(v); }

Eigen::VectorXd arrival_softmax(const Eigen::VectorXd& m_bar) {
    if (m_bar.size() == 0) throw std::invalid_argument("arrival_softmax needs at least one route");
    const double mx = m_bar.maxCoeff();
    Eigen::VectorXd e = (m_bar.array() - mx).exp();
    return e / e.sum();
}

Design::Design(const UtilitySpec& spec, std::vector<int> month_levels, std::vector<std::string> covariate_names)
    : spec_(spec) {
    spec_.validate();
    if (spec_.intercept) names_.push_back("intercept");
    if (spec_.price) names_.push_back("price");
    if (spec_.weight) names_.push_back("weight");
    if (spec_.second_half) names_.push_back("second_half");
    if (spec_.months) {
        std::sort(month_levels.begin(), month_levels.end());
        month_levels.erase(std::unique(month_levels.begin(), month_levels.end()), month_levels.end());
        for (std::size_t k = 1; k < month_levels.size(); ++k) {
            months_.push_back(month_levels[k]);
            names_.push_back("month_" + std::to_string(month_levels[k]));
        }
    }
    for (const auto& name : spec_.extras) {
        const auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
        if (it == covariate_names.end()) throw InputError("covariate '" + name + "' is not in the panel");
        extra_source_.push_back(static_cast<std::size_t>(it - covariate_names.begin()));
        names_.push_back(name);
    }
    if (spec_.shape == QualityShape::Symmetric) names_.push_back("mu");
    if (spec_.shape == QualityShape::Asymmetric) {
        names_.push_back("mu_plus");
        names_.push_back("mu_minus");
        if (spec_.quadratic) {
            names_.push_back("mu_plus_sq");
            names_.push_back("mu_minus_sq");
        }
    }
    if (spec_.era) names_.push_back("sigma2");
    if (spec_.bua) names_.push_back("var_mu");
}

std::optional<std::size_t> Design::index(const std::string& name) const {
    for (std::size_t k = 0; k < names_.size(); ++k) {
        if (names_[k] == name) return k;
    }
    return std::nullopt;
}

std::vector<std::size_t> Design::random_columns() const {
    std::vector<std::size_t> cols;
    for (const auto& name : spec_.random) {
        if (auto k = index(name); k && std::find(cols.begin(), cols.end(), *k) == cols.end()) cols.push_back(*k);
    }
    return cols;
}

void Design::fill(const CellInputs& cell, std::span<double> row) const {
    if (row.size() != names_.size()) throw std::invalid_argument("design row has the wrong length");
    const auto& sc = spec_.scalings;
    const auto need = [](double v, const char* what) {
        if (!std::isfinite(v)) throw InputError(std::string("missing ") + what);
        return v;
    };
    std::size_t k = 0;
    if (spec_.intercept) row[k++] = 1.0;
    if (spec_.price) row[k++] = need(cell.price, "price") / sc.price;
    if (spec_.weight) row[k++] = need(cell.weight_kg, "weight_kg") / sc.weight;
    if (spec_.second_half) row[k++] = cell.second_half;
    for (int m : months_) row[k++] = cell.month == m ? 1.0 : 0.0;
    for (auto src : extra_source_) {
        if (src >= cell.extra.size()) throw InputError("missing covariate value");
        row[k++] = need(cell.extra[src], "covariate value");
    }
    const double mu = need(cell.quality.mu, "belief mean");
    if (spec_.shape == QualityShape::Symmetric) row[k++] = mu / sc.mu;
    if (spec_.shape == QualityShape::Asymmetric) {
        const double plus = std::max(mu, 0.0) / sc.mu;
        const double minus = std::min(mu, 0.0) / sc.mu;
        row[k++] = plus;
        row[k++] = minus;
        if (spec_.quadratic) {
            row[k++] = plus * plus;
            row[k++] = minus * minus;
        }
    }
    if (spec_.era) row[k++] = need(cell.quality.sigma2, "experience variance (sigma2)") / sc.sigma2;
    if (spec_.bua) row[k++] = need(cell.quality.var_mu, "belief uncertainty (var_mu)") / sc.var_mu;
}

ChoiceData build_choice_data(const ChoicePanel& panel, const LearningPass& pass, const UtilitySpec& spec) {
    if (pass.customers.size() != panel.customers.size()) {
        throw InputError("trajectories cover " + std::to_string(pass.customers.size()) + " customers, panel has " +
                         std::to_string(panel.customers.size()));
    }
    std::set<int> months;
    for (const auto& traj : pass.customers) {
        for (int t = traj.first_period; t < panel.num_periods; ++t) {
            if (static_cast<std::size_t>(t) < panel.month.size()) months.insert(panel.month[static_cast<std::size_t>(t)]);
        }
    }
    ChoiceData data{Design(spec, {months.begin(), months.end()}, panel.covariate_names), {}};
    const auto K = data.design.size();
    std::vector<double> row(K);
    for (std::size_t i = 0; i < panel.customers.size(); ++i) {
        const auto& c = panel.customers[i];
        const auto& traj = pass.customers[i];
        if (traj.customer_id != c.id) {
            throw InputError("trajectory customer '" + traj.customer_id + "' does not match panel customer '" + c.id + "'");
        }
        CustomerChoiceData cd;
        cd.id = c.id;
        for (const auto& r : c.routes) cd.route_ids.push_back(r.id);
        cd.first_period = traj.first_period;
        cd.num_periods = panel.num_periods - traj.first_period;
        const auto J = c.routes.size();
        cd.X.resize(static_cast<Eigen::Index>(cd.num_periods * J), static_cast<Eigen::Index>(K));
        bool anchored = false;
        for (int t = 0; t < panel.num_periods && !anchored; ++t) {
            for (std::size_t j = 0; j < J; ++j) {
                if (c.cells[static_cast<std::size_t>(t)][j].y) {
                    cd.anchor = j;
                    anchored = true;
                    break;
                }
            }
        }
        for (int k = 0; k < cd.num_periods; ++k) {
            const int t = traj.first_period + k;
            const auto tu = static_cast<std::size_t>(t);
            const auto& belief = traj.at(t);
            int chosen = -1;
            for (std::size_t j = 0; j < J; ++j) {
                const auto& cell = c.cells[tu][j];
                if (cell.y) {
                    if (chosen >= 0) {
                        throw InputError("customer '" + c.id + "' purchases on two routes in period " + std::to_string(t));
                    }
                    chosen = static_cast<int>(j);
                }
                CellInputs in;
                in.price = cell.price;
                in.weight_kg = cell.weight_kg;
                in.second_half = tu < panel.second_half_week.size() ? panel.second_half_week[tu] : 0.0;
                in.month = tu < panel.month.size() ? panel.month[tu] : 0;
                in.extra = cell.extra;
                in.quality = {belief.mu_j.at(j), belief.sigma2_j.at(j), belief.var_mu_j.at(j)};
                try {
                    data.design.fill(in, row);
                } catch (const InputError& e) {
                    throw InputError("customer '" + c.id + "' route '" + c.routes[j].id + "' period " +
                                     std::to_string(t) + ": " + e.what());
                }
                const auto r = static_cast<Eigen::Index>(static_cast<std::size_t>(k) * J + j);
                for (std::size_t q = 0; q < K; ++q) cd.X(r, static_cast<Eigen::Index>(q)) = row[q];
            }
            cd.chosen.push_back(chosen);
        }
        data.customers.push_back(std::move(cd));
    }
    return data;
}

void LikelihoodConfig::validate() const {
    if (draws < 1) throw std::invalid_argument("heterogeneity draws must be >= 1");
    if (halton_skip < 0) throw std::invalid_argument("halton_skip must be >= 0");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in (0, 1]");
    if (multistarts < 1) throw std::invalid_argument("multistarts must be >= 1");
    if (!(tolerance > 0.0) || max_iterations < 1) throw std::invalid_argument("optimizer settings must be positive");
    if (!(fd_step > 0.0)) throw std::invalid_argument("fd_step must be positive");
}

SmlObjective::SmlObjective(const ChoiceData& data, const LikelihoodConfig& config)
    : data_(data), config_(config), random_(data.design.random_columns()) {
    config_.validate();
    const auto D = static_cast<int>(random_.size());
    const int R = D == 0 ? 1 : config_.draws;
    const auto N = static_cast<int>(data_.customers.size());
    if (D > 0 && N > 0) {
        const auto grid = halton_sequence({D, N * R, config_.halton_skip});
        // Halton blocks are assigned in customer-id order.
        std::vector<int> order(static_cast<std::size_t>(N));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return data_.customers[static_cast<std::size_t>(a)].id < data_.customers[static_cast<std::size_t>(b)].id;
        });
        std::vector<int> block(static_cast<std::size_t>(N));
        for (int k = 0; k < N; ++k) block[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k;
        for (int i = 0; i < N; ++i) {
            Eigen::MatrixXd z(R, D);
            const int b = block[static_cast<std::size_t>(i)];
            for (int r = 0; r < R; ++r) {
                for (int d = 0; d < D; ++d) z(r, d) = normal_quantile(grid(b * R + r, d));
            }
            z_.push_back(std::move(z));
        }
    } else {
        z_.assign(static_cast<std::size_t>(N), Eigen::MatrixXd::Zero(1, 0));
    }
    dimension_ = data_.design.size() + random_.size();
    for (const auto& c : data_.customers) {
        offset_.push_back(dimension_);
        dimension_ += c.num_routes() - 1;
    }
}

Eigen::VectorXd SmlObjective::pack(const ChoiceParams& p) const {
    const auto K = static_cast<Eigen::Index>(data_.design.size());
    const auto D = static_cast<Eigen::Index>(random_.size());
    if (p.beta.size() != K || p.log_sd.size() != D || p.m_bar.size() != data_.customers.size()) {
        throw std::invalid_argument("choice parameters do not match the design");
    }
    Eigen::VectorXd theta(static_cast<Eigen::Index>(dimension_));
    theta.head(K) = p.beta;
    theta.segment(K, D) = p.log_sd;
    for (std::size_t i = 0; i < data_.customers.size(); ++i) {
        const auto& c = data_.customers[i];
        if (static_cast<std::size_t>(p.m_bar[i].size()) != c.num_routes()) {
            throw std::invalid_argument("arrival parameters do not match customer routes");
        }
        auto pos = static_cast<Eigen::Index>(offset_[i]);
        for (std::size_t j = 0; j < c.num_routes(); ++j) {
            if (j == c.anchor) continue;
            theta(pos++) = p.m_bar[i](static_cast<Eigen::Index>(j)) - p.m_bar[i](static_cast<Eigen::Index>(c.anchor));
        }
    }
    return theta;
}

ChoiceParams SmlObjective::unpack(const Eigen::VectorXd& theta) const {
    if (static_cast<std::size_t>(theta.size()) != dimension_) throw std::invalid_argument("parameter vector length");
    const auto K = static_cast<Eigen::Index>(data_.design.size());
    const auto D = static_cast<Eigen::Index>(random_.size());
    ChoiceParams p;
    p.beta = theta.head(K);
    p.log_sd = theta.segment(K, D);
    for (std::size_t i = 0; i < data_.customers.size(); ++i) {
        const auto& c = data_.customers[i];
        Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.num_routes()));
        auto pos = static_cast<Eigen::Index>(offset_[i]);
        for (std::size_t j = 0; j < c.num_routes(); ++j) {
            if (j != c.anchor) m(static_cast<Eigen::Index>(j)) = theta(pos++);
        }
        p.m_bar.push_back(std::move(m));
    }
    return p;
}

std::vector<std::string> SmlObjective::parameter_names() const {
    auto names = data_.design.names();
    for (auto k : random_) names.push_back("log_sd(" + data_.design.names()[k] + ")");
    for (const auto& c : data_.customers) {
        for (std::size_t j = 0; j < c.num_routes(); ++j) {
            if (j != c.anchor) names.push_back("m_bar(" + c.id + "," + c.route_ids[j] + ")");
        }
    }
    return names;
}

double SmlObjective::customer_term(std::size_t i, const ChoiceParams& p, Eigen::VectorXd* grad_beta,
                                   Eigen::VectorXd* grad_sd, Eigen::VectorXd* grad_m) const {
    const auto& c = data_.customers[i];
    const auto& z = z_[i];
    const auto J = static_cast<Eigen::Index>(c.num_routes());
    const auto D = static_cast<Eigen::Index>(random_.size());
    const auto R = static_cast<Eigen::Index>(D == 0 ? 1 : z.rows());
    const double lambda = config_.lambda;

    Eigen::MatrixXd B = p.beta.replicate(1, R);
    Eigen::VectorXd sd = p.log_sd.array().exp();
    for (Eigen::Index d = 0; d < D; ++d) {
        B.row(static_cast<Eigen::Index>(random_[static_cast<std::size_t>(d)])).array() += sd(d) * z.col(d).transpose().array();
    }
    const Eigen::MatrixXd V = c.X * B;
    const Eigen::VectorXd m = arrival_softmax(p.m_bar[i]);
    const Eigen::VectorXd log_m = m.array().log();

    const bool want_grad = grad_beta != nullptr;
    Eigen::MatrixXd GV;
    Eigen::MatrixXd GM;
    if (want_grad) {
        GV = Eigen::MatrixXd::Zero(V.rows(), R);
        GM = Eigen::MatrixXd::Zero(J, R);
    }
    std::vector<double> ell(static_cast<std::size_t>(R), 0.0);
    std::vector<double> terms(static_cast<std::size_t>(J));
    for (Eigen::Index r = 0; r < R; ++r) {
        double l = 0.0;
        for (int t = 0; t < c.num_periods; ++t) {
            const Eigen::Index base = static_cast<Eigen::Index>(t) * J;
            const int chosen = c.chosen[static_cast<std::size_t>(t)];
            if (chosen >= 0) {
                const double v = V(base + chosen, r);
                l += std::log(lambda) + log_m(chosen) + log_choice_probability(v);
                if (want_grad) {
                    GV(base + chosen, r) += choice_probability(-v);
                    GM.col(r) -= m;
                    GM(chosen, r) += 1.0;
                }
                continue;
            }
            double log_s = 0.0;
            if (lambda == 1.0) {
                for (Eigen::Index j = 0; j < J; ++j) {
                    terms[static_cast<std::size_t>(j)] = log_m(j) + log_choice_probability(-V(base + j, r));
                }
                log_s = log_sum_exp(terms);
            } else {
                double s = 1.0 - lambda;
                for (Eigen::Index j = 0; j < J; ++j) s += lambda * m(j) * choice_probability(-V(base + j, r));
                if (!(s > 0.0)) {
                    throw NumericalError("customer '" + c.id + "' period " + std::to_string(c.first_period + t) +
                                         ": no-purchase probability is not positive");
                }
                log_s = std::log(s);
                for (Eigen::Index j = 0; j < J; ++j) {
                    terms[static_cast<std::size_t>(j)] =
                        std::log(lambda) + log_m(j) + log_choice_probability(-V(base + j, r));
                }
            }
            l += log_s;
            if (want_grad) {
                double mix = 0.0;
                for (Eigen::Index j = 0; j < J; ++j) {
                    const double q = std::exp(terms[static_cast<std::size_t>(j)] - log_s);
                    GV(base + j, r) -= q * choice_probability(V(base + j, r));
                    GM(j, r) += q;
                    mix += q;
                }
                GM.col(r) -= mix * m;
            }
        }
        ell[static_cast<std::size_t>(r)] = l;
    }
    const double lse = log_sum_exp(ell);
    if (!std::isfinite(lse)) {
        throw NumericalError("customer '" + c.id + "': simulated likelihood is not finite");
    }
    if (want_grad) {
        Eigen::VectorXd w(R);
        for (Eigen::Index r = 0; r < R; ++r) w(r) = std::exp(ell[static_cast<std::size_t>(r)] - lse);
        *grad_beta = c.X.transpose() * (GV * w);
        grad_sd->setZero(D);
        if (D > 0) {
            for (Eigen::Index d = 0; d < D; ++d) {
                const auto col = static_cast<Eigen::Index>(random_[static_cast<std::size_t>(d)]);
                const Eigen::VectorXd xg = GV.transpose() * c.X.col(col);
                (*grad_sd)(d) = sd(d) * (w.array() * z.col(d).array() * xg.array()).sum();
            }
        }
        *grad_m = GM * w;
    }
    return lse - std::log(static_cast<double>(R));
}

std::vector<double> SmlObjective::customer_logliks(const Eigen::VectorXd& theta) const {
    const auto p = unpack(theta);
    const auto n = static_cast<long>(data_.customers.size());
    std::vector<double> out(data_.customers.size());
    std::vector<std::exception_ptr> errors(data_.customers.size());
#pragma omp parallel for schedule(static) num_threads(std::max(config_.threads, 1))
    for (long i = 0; i < n; ++i) {
        try {
            out[static_cast<std::size_t>(i)] = customer_term(static_cast<std::size_t>(i), p, nullptr, nullptr, nullptr);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

double SmlObjective::loglik(const Eigen::VectorXd& theta) const {
    double ll = 0.0;
    for (double v : customer_logliks(theta)) ll += v;
    return ll;
}

double SmlObjective::loglik(const Eigen::VectorXd& theta, Eigen::VectorXd& gradient) const {
    const auto p = unpack(theta);
    const auto N = data_.customers.size();
    const auto K = static_cast<Eigen::Index>(data_.design.size());
    const auto D = static_cast<Eigen::Index>(random_.size());
    std::vector<double> values(N);
    std::vector<Eigen::VectorXd> gb(N), gs(N), gm(N);
    std::vector<std::exception_ptr> errors(N);
    const auto n = static_cast<long>(N);
#pragma omp parallel for schedule(static) num_threads(std::max(config_.threads, 1))
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            values[k] = customer_term(k, p, &gb[k], &gs[k], &gm[k]);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension_));
    double ll = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        ll += values[i];
        gradient.head(K) += gb[i];
        gradient.segment(K, D) += gs[i];
        const auto& c = data_.customers[i];
        auto pos = static_cast<Eigen::Index>(offset_[i]);
        for (std::size_t j = 0; j < c.num_routes(); ++j) {
            if (j != c.anchor) gradient(pos++) = gm[i](static_cast<Eigen::Index>(j));
        }
    }
    return ll;
}

double simulated_loglik(const ChoiceData& data, const ChoiceParams& params, const LikelihoodConfig& config) {
    SmlObjective objective(data, config);
    return objective.loglik(objective.pack(params));
}

OptimizerResult minimize_bfgs(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
                              Eigen::VectorXd x0, double tolerance, int max_iterations) {
    const auto n = x0.size();
    OptimizerResult res;
    res.x = std::move(x0);
    Eigen::VectorXd g(n);
    double f = fg(res.x, g);
    if (!std::isfinite(f)) throw NumericalError("objective is not finite at the starting point");
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    bool fresh = true;
    Eigen::VectorXd x_new(n), g_new(n);
    for (int it = 0; it < max_iterations; ++it) {
        res.iterations = it + 1;
        const double gnorm = n ? g.lpNorm<Eigen::Infinity>() : 0.0;
        if (gnorm < 1e-8) {
            res.converged = true;
            break;
        }
        Eigen::VectorXd dir = -H * g;
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            H.setIdentity();
            fresh = true;
            dir = -g;
            slope = -g.squaredNorm();
        }
        double step = 1.0;
        double f_new = f;
        bool accepted = false;
        for (int k = 0; k < 60; ++k) {
            x_new = res.x + step * dir;
            try {
                f_new = fg(x_new, g_new);
            } catch (const NumericalError&) {
                f_new = std::numeric_limits<double>::infinity();
            }
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (fresh) {
                res.converged = gnorm < 1e-3;
                break;
            }
            H.setIdentity();
            fresh = true;
            continue;
        }
        const Eigen::VectorXd s = x_new - res.x;
        const Eigen::VectorXd y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (fresh) {
                H = Eigen::MatrixXd::Identity(n, n) * (sy / y.squaredNorm());
                fresh = false;
            }
            const double rho = 1.0 / sy;
            const Eigen::VectorXd Hy = H * y;
            H += ((sy + y.dot(Hy)) * rho * rho) * (s * s.transpose()) - rho * (Hy * s.transpose() + s * Hy.transpose());
        }
        const double rel = std::abs(f - f_new) / std::max(1.0, std::abs(f));
        res.x = x_new;
        g = g_new;
        f = f_new;
        if (rel < tolerance && g.lpNorm<Eigen::Infinity>() < 1e-3) {
            res.converged = true;
            break;
        }
    }
    res.value = f;
    return res;
}

double FittedChoice::coefficient(const std::string& name) const {
    for (std::size_t k = 0; k < names.size(); ++k) {
        if (names[k] == name) return beta(static_cast<Eigen::Index>(k));
    }
    return 0.0;
}

double FittedChoice::omega_of(const std::string& name) const {
    for (std::size_t k = 0; k < random_names.size(); ++k) {
        if (random_names[k] == name) return omega(static_cast<Eigen::Index>(k));
    }
    return 0.0;
}

ChoiceParams default_start(const ChoiceData& data) {
    ChoiceParams p;
    p.beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.design.size()));
    p.log_sd = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(data.design.random_columns().size()), std::log(0.5));
    for (const auto& c : data.customers) {
        Eigen::VectorXd counts = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(c.num_routes()), 0.5);
        for (int ch : c.chosen) {
            if (ch >= 0) counts(ch) += 1.0;
        }
        const double ref = counts(static_cast<Eigen::Index>(c.anchor));
        p.m_bar.push_back((counts.array() / ref).log().matrix());
    }
    return p;
}

FittedChoice estimate_sml(const ChoiceData& data, const LikelihoodConfig& config,
                          const std::optional<ChoiceParams>& init) {
    SmlObjective objective(data, config);
    const auto fg = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        const double ll = objective.loglik(x, g);
        g = -g;
        return -ll;
    };
    const Eigen::VectorXd x0 = objective.pack(init ? *init : default_start(data));
    auto jitter_stream = SeededStream(config.seed, 0).child(hash_tag("multistart"));
    OptimizerResult best;
    bool have_best = false;
    for (int s = 0; s < config.multistarts; ++s) {
        Eigen::VectorXd start = x0;
        if (s > 0) {
            for (Eigen::Index k = 0; k < start.size(); ++k) start(k) += normal_draw(jitter_stream, 0.0, config.jitter);
        }
        auto res = minimize_bfgs(fg, start, config.tolerance, config.max_iterations);
        if (!have_best || res.value < best.value) {
            best = std::move(res);
            have_best = true;
        }
    }

    FittedChoice fit;
    fit.spec = data.design.spec();
    fit.names = data.design.names();
    fit.config = config;
    fit.loglik = -best.value;
    fit.iterations = best.iterations;
    fit.converged = best.converged;
    fit.num_parameters = static_cast<int>(objective.dimension());
    const auto p = objective.unpack(best.x);
    const auto K = static_cast<Eigen::Index>(data.design.size());
    const auto D = static_cast<Eigen::Index>(p.log_sd.size());
    fit.beta = p.beta;
    for (auto k : data.design.random_columns()) fit.random_names.push_back(data.design.names()[k]);
    fit.omega = (2.0 * p.log_sd.array()).exp();
    for (std::size_t i = 0; i < data.customers.size(); ++i) {
        fit.customer_ids.push_back(data.customers[i].id);
        fit.route_ids.push_back(data.customers[i].route_ids);
        fit.anchor.push_back(data.customers[i].anchor);
    }
    fit.m_bar = p.m_bar;

    const auto n = static_cast<Eigen::Index>(objective.dimension());
    Eigen::VectorXd se = Eigen::VectorXd::Constant(n, kNaN);
    if (config.compute_se && n > 0) {
        Eigen::MatrixXd info(n, n);
        Eigen::VectorXd gp(n), gm(n);
        for (Eigen::Index k = 0; k < n; ++k) {
            Eigen::VectorXd x = best.x;
            x(k) += config.fd_step;
            objective.loglik(x, gp);
            x(k) = best.x(k) - config.fd_step;
            objective.loglik(x, gm);
            info.col(k) = -(gp - gm) / (2.0 * config.fd_step);
        }
        info = 0.5 * (info + info.transpose()).eval();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
        if (eig.info() == Eigen::Success && eig.eigenvalues().minCoeff() > 0.0) {
            const Eigen::MatrixXd cov =
                eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
            se = cov.diagonal().cwiseSqrt();
            fit.se_available = true;
        }
    }
    fit.beta_se = se.head(K);
    fit.omega_se = 2.0 * fit.omega.array() * se.segment(K, D).array();
    const auto se_params = objective.unpack(se);
    for (std::size_t i = 0; i < data.customers.size(); ++i) {
        Eigen::VectorXd s = se_params.m_bar[i];
        s(static_cast<Eigen::Index>(data.customers[i].anchor)) = 0.0;
        fit.m_bar_se.push_back(std::move(s));
    }
    return fit;
}

namespace {

double json_number(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string shape_name(QualityShape s) {
    switch (s) {
        case QualityShape::None: return "none";
        case QualityShape::Symmetric: return "symmetric";
        case QualityShape::Asymmetric: return "asymmetric";
    }
    return "none";
}

}  // namespace

nlohmann::json utility_spec_to_json(const UtilitySpec& spec) {
    return {{"label", spec.label()},
            {"shape", shape_name(spec.shape)},
            {"quadratic", spec.quadratic},
            {"era", spec.era},
            {"bua", spec.bua},
            {"intercept", spec.intercept},
            {"price", spec.price},
            {"weight", spec.weight},
            {"second_half", spec.second_half},
            {"months", spec.months},
            {"extras", spec.extras},
            {"random", spec.random},
            {"scalings",
             {{"price", spec.scalings.price},
              {"weight", spec.scalings.weight},
              {"mu", spec.scalings.mu},
              {"sigma2", spec.scalings.sigma2},
              {"var_mu", spec.scalings.var_mu}}}};
}

UtilitySpec utility_spec_from_json(const nlohmann::json& j) {
    UtilitySpec s;
    try {
        if (j.contains("shape")) {
            const auto shape = j.at("shape").get<std::string>();
            if (shape == "none") {
                s.shape = QualityShape::None;
            } else if (shape == "symmetric") {
                s.shape = QualityShape::Symmetric;
            } else if (shape == "asymmetric") {
                s.shape = QualityShape::Asymmetric;
            } else {
                throw InputError("unknown quality shape '" + shape + "'");
            }
        } else if (j.contains("label")) {
            s = with_quality_label(s, j.at("label").get<std::string>());
        }
        s.quadratic = j.value("quadratic", s.quadratic);
        s.era = j.value("era", s.era);
        s.bua = j.value("bua", s.bua);
        s.intercept = j.value("intercept", s.intercept);
        s.price = j.value("price", s.price);
        s.weight = j.value("weight", s.weight);
        s.second_half = j.value("second_half", s.second_half);
        s.months = j.value("months", s.months);
        s.extras = j.value("extras", s.extras);
        s.random = j.value("random", s.random);
        if (j.contains("scalings")) {
            const auto& sc = j.at("scalings");
            s.scalings.price = sc.value("price", s.scalings.price);
            s.scalings.weight = sc.value("weight", s.scalings.weight);
            s.scalings.mu = sc.value("mu", s.scalings.mu);
            s.scalings.sigma2 = sc.value("sigma2", s.scalings.sigma2);
            s.scalings.var_mu = sc.value("var_mu", s.scalings.var_mu);
        }
        s.validate();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("utility spec: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("utility spec: ") + e.what());
    }
    return s;
}

nlohmann::json fitted_to_json(const FittedChoice& fit) {
    nlohmann::json coefs = nlohmann::json::array();
    for (std::size_t k = 0; k < fit.names.size(); ++k) {
        const auto e = static_cast<Eigen::Index>(k);
        coefs.push_back({{"name", fit.names[k]},
                         {"estimate", fit.beta(e)},
                         {"se", fit.beta_se.size() > e ? fit.beta_se(e) : kNaN}});
    }
    nlohmann::json omega = nlohmann::json::array();
    for (std::size_t k = 0; k < fit.random_names.size(); ++k) {
        const auto e = static_cast<Eigen::Index>(k);
        omega.push_back({{"name", fit.random_names[k]},
                         {"variance", fit.omega(e)},
                         {"se", fit.omega_se.size() > e ? fit.omega_se(e) : kNaN}});
    }
    nlohmann::json arrival = nlohmann::json::array();
    for (std::size_t i = 0; i < fit.customer_ids.size(); ++i) {
        nlohmann::json routes = nlohmann::json::array();
        for (std::size_t j = 0; j < fit.route_ids[i].size(); ++j) {
            const auto e = static_cast<Eigen::Index>(j);
            routes.push_back({{"route_id", fit.route_ids[i][j]},
                              {"m_bar", fit.m_bar[i](e)},
                              {"se", i < fit.m_bar_se.size() ? fit.m_bar_se[i](e) : kNaN}});
        }
        arrival.push_back({{"customer_id", fit.customer_ids[i]},
                           {"anchor_route", fit.route_ids[i][fit.anchor[i]]},
                           {"routes", routes}});
    }
    return {{"spec", utility_spec_to_json(fit.spec)},
            {"coefficients", coefs},
            {"omega", omega},
            {"loglik", fit.loglik},
            {"num_parameters", fit.num_parameters},
            {"iterations", fit.iterations},
            {"converged", fit.converged},
            {"se_available", fit.se_available},
            {"draws",
             {{"count", fit.config.draws},
              {"halton_skip", fit.config.halton_skip},
              {"lambda", fit.config.lambda},
              {"multistarts", fit.config.multistarts},
              {"tolerance", fit.config.tolerance}}},
            {"arrival", arrival}};
}

FittedChoice fitted_from_json(const nlohmann::json& j) {
    FittedChoice fit;
    try {
        fit.spec = j.contains("spec") ? utility_spec_from_json(j.at("spec")) : UtilitySpec{};
        const auto& coefs = j.at("coefficients");
        fit.beta.resize(static_cast<Eigen::Index>(coefs.size()));
        fit.beta_se.resize(static_cast<Eigen::Index>(coefs.size()));
        for (std::size_t k = 0; k < coefs.size(); ++k) {
            fit.names.push_back(coefs[k].at("name").get<std::string>());
            fit.beta(static_cast<Eigen::Index>(k)) = coefs[k].at("estimate").get<double>();
            fit.beta_se(static_cast<Eigen::Index>(k)) = coefs[k].contains("se") ? json_number(coefs[k]["se"]) : kNaN;
        }
        const auto omega = j.value("omega", nlohmann::json::array());
        fit.omega.resize(static_cast<Eigen::Index>(omega.size()));
        fit.omega_se.resize(static_cast<Eigen::Index>(omega.size()));
        for (std::size_t k = 0; k < omega.size(); ++k) {
            fit.random_names.push_back(omega[k].at("name").get<std::string>());
            const double v = omega[k].at("variance").get<double>();
            if (!(v >= 0.0)) throw InputError("omega variance of '" + fit.random_names.back() + "' is negative");
            fit.omega(static_cast<Eigen::Index>(k)) = v;
            fit.omega_se(static_cast<Eigen::Index>(k)) = omega[k].contains("se") ? json_number(omega[k]["se"]) : kNaN;
        }
        fit.loglik = j.contains("loglik") ? json_number(j["loglik"]) : kNaN;
        fit.num_parameters = j.value("num_parameters", 0);
        fit.iterations = j.value("iterations", 0);
        fit.converged = j.value("converged", false);
        fit.se_available = j.value("se_available", false);
        for (const auto& a : j.value("arrival", nlohmann::json::array())) {
            fit.customer_ids.push_back(a.at("customer_id").get<std::string>());
            std::vector<std::string> ids;
            const auto& routes = a.at("routes");
            Eigen::VectorXd m(static_cast<Eigen::Index>(routes.size()));
            Eigen::VectorXd s(static_cast<Eigen::Index>(routes.size()));
            const auto anchor = a.at("anchor_route").get<std::string>();
            std::size_t anchor_index = 0;
            for (std::size_t r = 0; r < routes.size(); ++r) {
                ids.push_back(routes[r].at("route_id").get<std::string>());
                if (ids.back() == anchor) anchor_index = r;
                m(static_cast<Eigen::Index>(r)) = routes[r].at("m_bar").get<double>();
                s(static_cast<Eigen::Index>(r)) = routes[r].contains("se") ? json_number(routes[r]["se"]) : kNaN;
            }
            fit.route_ids.push_back(std::move(ids));
            fit.m_bar.push_back(std::move(m));
            fit.m_bar_se.push_back(std::move(s));
            fit.anchor.push_back(anchor_index);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("fitted model JSON: ") + e.what());
    }
    return fit;
}

}  // namespace spillover
