#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace spillover {

/** Counter-based random stream (Philox4x32-10).
 *
 * The 64-bit seed is the cipher key; the 128-bit counter is split into the
 * 64-bit stream id (high half) and the draw position (low half). Two streams
 * with different ids therefore never share a counter block, so substreams are
 * disjoint by construction rather than statistically. A stream is a small value
 * type: copying it forks an identical sequence.
 */
class SeededStream {
public:
    SeededStream(std::uint64_t seed, std::uint64_t stream_id) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }

    /// Derive a stream whose id mixes this id with `tag`; the parent is not advanced.
    SeededStream child(std::uint64_t tag) const noexcept;
    SeededStream child(std::initializer_list<std::uint64_t> tags) const noexcept;

    std::uint32_t next_u32() noexcept;
    std::uint64_t next_u64() noexcept;

    /// Uniform on the open interval (0,1) with 53-bit resolution.
    double uniform() noexcept;

    /// Standard normal via Box-Muller; the spare value is cached in the stream.
    double standard_normal() noexcept;

private:
    void refill() noexcept;

    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t block_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int buffer_pos_ = 4;
    std::optional<double> spare_normal_;
};

/// 64-bit mixing (splitmix64 finaliser), used to turn structured tags into stream ids.
std::uint64_t mix64(std::uint64_t x) noexcept;
/// FNV-1a hash of a string, for keying streams by customer or route identifiers.
std::uint64_t hash_tag(std::string_view text) noexcept;

double uniform_draw(SeededStream& stream);
double normal_draw(SeededStream& stream, double mean, double sd);
/// Gamma(shape, scale) with E[x] = shape * scale.
double gamma_draw(SeededStream& stream, double shape, double scale);
/// Inverse-gamma with density b^a / Gamma(a) x^(-a-1) exp(-b/x); E[x] = b/(a-1).
double inverse_gamma_draw(SeededStream& stream, double shape, double scale);
/// Index drawn from a discrete distribution; `probabilities` must be non-negative with positive sum.
std::size_t categorical_draw(SeededStream& stream, std::span<const double> probabilities);

double normal_cdf(double x) noexcept;
/// Inverse standard normal CDF, absolute error below 1e-12 on (0,1).
double normal_quantile(double p);

struct HaltonGrid {
    int dimension = 1;
    int count = 1;
    int skip = 0;
};

/// First `n` primes.
std::vector<int> first_primes(int n);
/// Radical inverse of `index` in `base` (van der Corput digit reversal).
double radical_inverse(std::uint64_t index, int base) noexcept;
/// count x dimension matrix; row k, column d is point skip+k+1 in the d-th prime base.
Eigen::MatrixXd halton_sequence(const HaltonGrid& grid);

}  // namespace spillover
