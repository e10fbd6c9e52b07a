#pragma once

// Uplink model: all active devices transmit their codeword rows at once, the
// channel adds them up and the receiver sees real AWGN.

#include "airfeel/common.hpp"
#include "airfeel/ura_codebook.hpp"

#include <cmath>
#include <limits>

namespace airfeel {

struct ChannelConfig {
    double snr_db = 20.0;
    std::uint64_t seed = 0;
};

/// sigma^2 = (K_a / d) / 10^(snr_db / 10).
///
/// Unit-norm codewords spread power 1 over d symbols, so K_a roughly
/// orthogonal codewords give a per-symbol signal power of K_a / d.
inline double noise_variance(double snr_db, long active, Eigen::Index d) {
    require(active >= 1 && d >= 1, "noise variance needs K_a >= 1 and d >= 1");
    if (snr_db == std::numeric_limits<double>::infinity()) return 0.0;
    return (double(active) / double(d)) / std::pow(10.0, snr_db / 10.0);
}

template <typename Scalar = double>
struct Transmission {
    RowVector<Scalar> y;
    RowVector<Scalar> noise;
    double sigma2 = 0.0;
};

/// y = x C + w with w ~ N(0, sigma^2 I), sigma^2 set from the true K_a = sum(x).
template <typename Scalar>
Transmission<Scalar> transmit(const CountVector& x, const UraCodebook<Scalar>& codebook, const ChannelConfig& cfg) {
    require(x.size() == codebook.n(), "activity vector length must equal codebook size");
    require((x.array() >= 0).all(), "activity counts must be non-negative");
    require(std::isfinite(cfg.snr_db) || cfg.snr_db == std::numeric_limits<double>::infinity(),
            "snr must be finite");
    const long active = x.template cast<long>().sum();
    if (active == 0) throw InvalidArgument("no active devices");

    Transmission<Scalar> out;
    out.sigma2 = noise_variance(cfg.snr_db, active, codebook.d());
    out.noise = RowVector<Scalar>::Zero(codebook.d());
    if (out.sigma2 > 0.0) {
        Rng rng(cfg.seed);
        std::normal_distribution<double> normal(0.0, std::sqrt(out.sigma2));
        for (Eigen::Index j = 0; j < out.noise.size(); ++j) out.noise(j) = Scalar(normal(rng));
    }
    out.y = x.cast<Scalar>() * codebook.matrix() + out.noise;
    return out;
}

}  // namespace airfeel
