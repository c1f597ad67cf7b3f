#include "spillover/random.hpp"

#include "spillover/errors.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace spillover {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(product >> 32);
    lo = static_cast<std::uint32_t>(product);
}

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
        mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kPhiloxW0;
        key[1] += kPhiloxW1;
    }
    return ctr;
}

void require_finite(double value, const char* what) {
    if (!std::isfinite(value)) {
        throw std::invalid_argument(std::string(what) + " must be finite");
    }
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t hash_tag(std::string_view text) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

SeededStream::SeededStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
    : seed_(seed), stream_id_(stream_id) {}

SeededStream SeededStream::child(std::uint64_t tag) const noexcept {
    return SeededStream(seed_, mix64(stream_id_ ^ mix64(tag)));
}

SeededStream SeededStream::child(std::initializer_list<std::uint64_t> tags) const noexcept {
    SeededStream out = *this;
    for (auto tag : tags) out = out.child(tag);
    return out;
}

void SeededStream::refill() noexcept {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
        static_cast<std::uint32_t>(stream_id_), static_cast<std::uint32_t>(stream_id_ >> 32)};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                              static_cast<std::uint32_t>(seed_ >> 32)};
    buffer_ = philox4x32_10(ctr, key);
    ++block_;
    buffer_pos_ = 0;
}

std::uint32_t SeededStream::next_u32() noexcept {
    if (buffer_pos_ >= 4) refill();
    return buffer_[buffer_pos_++];
}

std::uint64_t SeededStream::next_u64() noexcept {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
}

double SeededStream::uniform() noexcept {
    const std::uint64_t bits = next_u64() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double SeededStream::standard_normal() noexcept {
    if (spare_normal_) {
        const double z = *spare_normal_;
        spare_normal_.reset();
        return z;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_normal_ = radius * std::sin(angle);
    return radius * std::cos(angle);
}

double uniform_draw(SeededStream& stream) { return stream.uniform(); }

double normal_draw(SeededStream& stream, double mean, double sd) {
    require_finite(mean, "normal mean");
    require_finite(sd, "normal sd");
    if (sd < 0.0) throw std::invalid_argument("normal sd must be non-negative");
    if (sd == 0.0) return mean;
    return mean + sd * stream.standard_normal();
}

double gamma_draw(SeededStream& stream, double shape, double scale) {
    require_finite(shape, "gamma shape");
    require_finite(scale, "gamma scale");
    if (shape <= 0.0 || scale <= 0.0) {
        throw std::invalid_argument("gamma shape and scale must be positive");
    }
    if (shape < 1.0) {
        // Boost: G(a) = G(a + 1) * U^(1/a).
        const double boosted = gamma_draw(stream, shape + 1.0, 1.0);
        return scale * boosted * std::pow(stream.uniform(), 1.0 / shape);
    }
    // Marsaglia-Tsang squeeze/rejection.
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = stream.standard_normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = stream.uniform();
        const double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return scale * d * v;
        if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return scale * d * v;
    }
}

double inverse_gamma_draw(SeededStream& stream, double shape, double scale) {
    require_finite(shape, "inverse-gamma shape");
    require_finite(scale, "inverse-gamma scale");
    if (shape <= 0.0 || scale <= 0.0) {
        throw std::invalid_argument("inverse-gamma shape and scale must be positive");
    }
    const double g = gamma_draw(stream, shape, 1.0);
    const double x = scale / g;
    if (!std::isfinite(x) || x <= 0.0) {
        throw NumericalError("inverse-gamma draw overflowed (shape=" + std::to_string(shape) +
                             ", scale=" + std::to_string(scale) + ")");
    }
    return x;
}

std::size_t categorical_draw(SeededStream& stream, std::span<const double> probabilities) {
    if (probabilities.empty()) throw std::invalid_argument("categorical draw needs outcomes");
    double total = 0.0;
    for (double p : probabilities) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw std::invalid_argument("categorical probabilities must be finite and >= 0");
        }
        total += p;
    }
    if (total <= 0.0) throw std::invalid_argument("categorical probabilities sum to zero");
    const double target = stream.uniform() * total;
    double cumulative = 0.0;
    for (std::size_t k = 0; k < probabilities.size(); ++k) {
        cumulative += probabilities[k];
        if (target < cumulative) return k;
    }
    for (std::size_t k = probabilities.size(); k-- > 0;) {
        if (probabilities[k] > 0.0) return k;
    }
    return probabilities.size() - 1;
}

double normal_cdf(double x) noexcept { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile requires 0 < p < 1");
    // Acklam rational approximation, then Halley refinement on erfc.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Refine against whichever tail keeps the residual well conditioned.
    for (int iter = 0; iter < 2; ++iter) {
        double e;
        if (x < 0.0) {
            e = normal_cdf(x) - p;
        } else {
            e = (1.0 - p) - 0.5 * std::erfc(x / std::numbers::sqrt2);
        }
        const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
        x = x - u / (1.0 + 0.5 * x * u);
    }
    return x;
}

std::vector<int> first_primes(int n) {
    std::vector<int> primes;
    primes.reserve(static_cast<std::size_t>(std::max(n, 0)));
    for (int candidate = 2; static_cast<int>(primes.size()) < n; ++candidate) {
        bool is_prime = true;
        for (int p : primes) {
            if (p * p > candidate) break;
            if (candidate % p == 0) {
                is_prime = false;
                break;
            }
        }
        if (is_prime) primes.push_back(candidate);
    }
    return primes;
}

double radical_inverse(std::uint64_t index, int base) noexcept {
    const double inv_base = 1.0 / base;
    double factor = inv_base;
    double result = 0.0;
    while (index > 0) {
        result += static_cast<double>(index % static_cast<std::uint64_t>(base)) * factor;
        index /= static_cast<std::uint64_t>(base);
        factor *= inv_base;
    }
    return result;
}

Eigen::MatrixXd halton_sequence(const HaltonGrid& grid) {
    if (grid.dimension < 1 || grid.count < 1 || grid.skip < 0) {
        throw std::invalid_argument("halton grid needs dimension >= 1, count >= 1, skip >= 0");
    }
    const auto bases = first_primes(grid.dimension);
    Eigen::MatrixXd points(grid.count, grid.dimension);
    for (int k = 0; k < grid.count; ++k) {
        const auto index = static_cast<std::uint64_t>(grid.skip) + static_cast<std::uint64_t>(k) + 1;
        for (int dim = 0; dim < grid.dimension; ++dim) {
            points(k, dim) = radical_inverse(index, bases[static_cast<std::size_t>(dim)]);
        }
    }
    return points;
}

}  // namespace spillover
