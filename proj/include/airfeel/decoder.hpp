#pragma once

// Unrolled AMP decoder for non-negative integer activity vectors.
//
// Each layer runs an output block (measurement-domain estimate Z and its
// variance V), an input block (scalar pseudo-channel, spike-and-Poisson-slab
// posterior, optional CNN refinement) and EM refinement of K_a, pi and
// sigma^2. A post-processing step turns the soft estimate into counts.
//
// Learnable scalars are stored raw and mapped into their admissible ranges:
//   gamma in [0.3, 2]  : 0.3 + 1.7 (tanh(raw) + 1) / 2
//   eta, rho, EM steps : sigmoid(raw)
//   alpha_scale, tau   : softplus(raw)

#include "airfeel/common.hpp"
#include "airfeel/ura_codebook.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace airfeel {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double gamma_from_raw(double raw) { return 0.3 + 1.7 * (std::tanh(raw) + 1.0) / 2.0; }
inline double gamma_to_raw(double gamma) { return std::atanh(2.0 * (gamma - 0.3) / 1.7 - 1.0); }

class DecoderDiverged : public NumericalError {
public:
    DecoderDiverged(const std::string& what, int layer) : NumericalError(what), layer_(layer) {}
    int layer() const { return layer_; }

private:
    int layer_;
};

inline constexpr int kFeatureChannels = 6;

/// conv(6 -> F, kernel k, zero pad) -> ReLU -> conv(F -> 1, kernel k, zero pad).
///
/// w1(f, c * k + t) is tap t of the filter from input channel c to hidden
/// channel f; tap t reads position j + t - k/2.
template <typename Scalar = double>
struct CnnWeights {
    Matrix<Scalar> w1;
    RowVector<Scalar> b1;
    RowVector<Scalar> w2;
    Scalar b2 = 0;
    int kernel = 3;

    static CnnWeights zeros(int filters = 32, int kernel = 3) {
        CnnWeights c;
        c.kernel = kernel;
        c.w1 = Matrix<Scalar>::Zero(filters, kFeatureChannels * kernel);
        c.b1 = RowVector<Scalar>::Zero(filters);
        c.w2 = RowVector<Scalar>::Zero(filters * kernel);
        c.b2 = 0;
        return c;
    }
    int filters() const { return static_cast<int>(w1.rows()); }
    // The network is the zero map exactly when its output layer is zero.
    bool output_is_zero() const { return b2 == Scalar(0) && w2.isZero(0); }
    void validate() const {
        require(kernel >= 1 && kernel % 2 == 1, "cnn kernel must be odd and positive");
        require(w1.cols() == kFeatureChannels * kernel, "cnn conv1 shape mismatch");
        require(b1.size() == w1.rows(), "cnn conv1 bias shape mismatch");
        require(w2.size() == w1.rows() * kernel, "cnn conv2 shape mismatch");
        require(w1.allFinite() && b1.allFinite() && w2.allFinite() && std::isfinite(double(b2)),
                "cnn weights must be finite");
    }
};

namespace detail {

// Rows (c * k + t) hold channel c shifted by t - k/2 with zero padding.
template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& in, int kernel) {
    const Eigen::Index channels = in.rows();
    const Eigen::Index n = in.cols();
    const int half = kernel / 2;
    Matrix<Scalar> out = Matrix<Scalar>::Zero(channels * kernel, n);
    for (Eigen::Index c = 0; c < channels; ++c) {
        for (int t = 0; t < kernel; ++t) {
            const Eigen::Index shift = t - half;
            const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
            const Eigen::Index hi = std::min<Eigen::Index>(n, n - shift);
            if (hi > lo) out.row(c * kernel + t).segment(lo, hi - lo) = in.row(c).segment(lo + shift, hi - lo);
        }
    }
    return out;
}

}  // namespace detail

/// Forward pass of the per-layer denoiser on a (6 x n) feature map.
template <typename Scalar>
RowVector<Scalar> cnn_forward(const Matrix<Scalar>& features, const CnnWeights<Scalar>& weights) {
    require(features.rows() == kFeatureChannels, "feature map must have 6 channels");
    require(features.allFinite(), "feature map must be finite");
    weights.validate();
    Matrix<Scalar> hidden = weights.w1 * detail::im2col(features, weights.kernel);
    hidden.colwise() += weights.b1.transpose();
    hidden = hidden.cwiseMax(Scalar(0));
    RowVector<Scalar> out = weights.w2 * detail::im2col(hidden, weights.kernel);
    out.array() += weights.b2;
    return out;
}

/// Raw (pre-squash) per-layer parameters.
template <typename Scalar = double>
struct LayerParams {
    double gamma_raw = 0.0;
    double eta_raw = 0.0;
    double alpha_raw = inverse_softplus(1.0);
    double tau_raw = inverse_softplus(1.0);
    double rho_raw = 0.0;
    double step_ka_raw = 0.0;
    double step_pi_raw = 0.0;
    double step_sigma_raw = 0.0;
    CnnWeights<Scalar> cnn = CnnWeights<Scalar>::zeros();

    double gamma() const { return gamma_from_raw(gamma_raw); }
    double eta() const { return sigmoid(eta_raw); }
    double alpha_scale() const { return softplus(alpha_raw); }
    double tau() const { return softplus(tau_raw); }
    double rho() const { return sigmoid(rho_raw); }
    double step_ka() const { return sigmoid(step_ka_raw); }
    double step_pi() const { return sigmoid(step_pi_raw); }
    double step_sigma() const { return sigmoid(step_sigma_raw); }
};

enum class DecoderMode { learnt, baseline };

struct PostprocessConfig {
    // 0 keeps min(round(K_a_hat), n) entries; a positive value fixes the support size.
    Eigen::Index support_size = 0;
    int refit_iters = 2;
};

template <typename Scalar = double>
struct DecoderParams {
    std::vector<LayerParams<Scalar>> layers;
    DecoderMode mode = DecoderMode::learnt;
    int kmax_floor = 32;
    PostprocessConfig postproc;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

/// The un-learnt comparator: gamma = 1, eta = 0.5, alpha_scale = 1, tau = 1,
/// rho = 0 and EM steps 0.5, with no CNN.
template <typename Scalar = double>
DecoderParams<Scalar> baseline_params(int num_layers = 10) {
    require(num_layers >= 1, "decoder needs at least one layer");
    LayerParams<Scalar> layer;
    layer.gamma_raw = gamma_to_raw(1.0);
    layer.eta_raw = 0.0;
    layer.alpha_raw = inverse_softplus(1.0);
    layer.tau_raw = inverse_softplus(1.0);
    layer.rho_raw = -std::numeric_limits<double>::infinity();
    DecoderParams<Scalar> p;
    p.layers.assign(static_cast<std::size_t>(num_layers), layer);
    p.mode = DecoderMode::baseline;
    return p;
}

template <typename Scalar = double>
struct DecoderState {
    RowVector<Scalar> x_hat;  // n
    RowVector<Scalar> nu;     // n
    RowVector<Scalar> Z;      // d
    RowVector<Scalar> V;      // d
    double ka = 1.0;
    Eigen::VectorXd pi;       // n
    double sigma2 = 1.0;
    int layer = 0;

    static DecoderState initial(const RowVector<Scalar>& y, Eigen::Index n, const Eigen::VectorXd& pi0,
                                double sigma2, double ka) {
        DecoderState s;
        s.x_hat = RowVector<Scalar>::Zero(n);
        s.nu = RowVector<Scalar>::Ones(n);
        s.Z = y;
        s.V = RowVector<Scalar>::Ones(y.size());
        s.pi = pi0;
        s.sigma2 = sigma2;
        s.ka = ka;
        return s;
    }
};

inline constexpr double kSigma2Floor = 1e-8;
inline constexpr double kMassFloor = 1e-12;
inline constexpr double kVar1Floor = 1e-12;
inline constexpr double kDivergenceThreshold = 1e6;

namespace detail {

template <typename Derived>
void check_finite(const Eigen::DenseBase<Derived>& v, const char* what, int layer) {
    if (!v.allFinite()) {
        throw NumericalError(std::string("non-finite ") + what + " at layer " + std::to_string(layer));
    }
}

}  // namespace detail

/// Measurement-domain update with learnable gain gamma and damping eta.
template <typename Scalar>
DecoderState<Scalar> output_block(const DecoderState<Scalar>& state, const UraCodebook<Scalar>& codebook,
                                  const RowVector<Scalar>& y, const LayerParams<Scalar>& p) {
    const Scalar gamma = Scalar(p.gamma());
    const Scalar eta = Scalar(p.eta());
    const Scalar sigma2 = Scalar(state.sigma2);

    const RowVector<Scalar> z_tmp = state.x_hat * codebook.matrix();
    const RowVector<Scalar> v_new = state.nu * codebook.squared();
    const RowVector<Scalar> z_tilde =
        z_tmp.array() - gamma * (y - state.Z).array() * v_new.array() / (sigma2 + state.V.array());

    DecoderState<Scalar> out = state;
    out.Z = eta * state.Z + (Scalar(1) - eta) * z_tilde;
    out.V = eta * state.V + (Scalar(1) - eta) * v_new;
    detail::check_finite(out.Z, "measurement estimate", state.layer);
    detail::check_finite(out.V, "measurement variance", state.layer);
    return out;
}

template <typename Scalar = double>
struct PseudoChannel {
    RowVector<Scalar> R;       // pseudo-observation per codeword
    RowVector<Scalar> sigma;   // pseudo-noise variance per codeword (1 / var1)
    int floored = 0;           // entries of var1 lifted to the floor
};

/// Per-codeword scalar pseudo-channel R_j = x_hat_j + var2_j / var1_j with
/// gamma_inv = alpha_scale / (sigma^2 + V), var1 = C^2 gamma_inv and
/// var2 = C ((y - Z) .* gamma_inv).
template <typename Scalar>
PseudoChannel<Scalar> pseudo_channel(const DecoderState<Scalar>& state, const UraCodebook<Scalar>& codebook,
                                     const RowVector<Scalar>& y, const LayerParams<Scalar>& p) {
    const Scalar alpha = Scalar(p.alpha_scale());
    const RowVector<Scalar> gamma_inv = alpha / (Scalar(state.sigma2) + state.V.array());
    RowVector<Scalar> var1 = (codebook.squared() * gamma_inv.transpose()).transpose();
    const RowVector<Scalar> weighted = (y - state.Z).cwiseProduct(gamma_inv);
    const RowVector<Scalar> var2 = (codebook.matrix() * weighted.transpose()).transpose();

    PseudoChannel<Scalar> out;
    for (Eigen::Index j = 0; j < var1.size(); ++j) {
        if (!(var1(j) >= Scalar(kVar1Floor))) {
            var1(j) = Scalar(kVar1Floor);
            ++out.floored;
        }
    }
    out.R = state.x_hat + var2.cwiseQuotient(var1);
    out.sigma = var1.cwiseInverse();
    detail::check_finite(out.R, "pseudo-observation", state.layer);
    return out;
}

/// Posterior mean and variance of a count under the prior
/// (1 - a) delta_0 + a Pois(lambda), a = 1 - exp(-lambda), observed through
/// R = x + N(0, tau * Sigma), truncated to {0, ..., k_max}.
class SpikeSlabPosterior {
public:
    explicit SpikeSlabPosterior(int k_max = 64) { reserve(k_max); }

    void reserve(int k_max) {
        const int old = static_cast<int>(log_factorial_.size());
        if (k_max + 1 <= old) return;
        log_factorial_.resize(static_cast<std::size_t>(k_max) + 1);
        for (int k = std::max(old, 0); k <= k_max; ++k) log_factorial_[k] = std::lgamma(double(k) + 1.0);
    }

    struct Moments {
        double mean;
        double var;
    };

    Moments operator()(double R, double sigma, double lambda, double tau, int k_max) {
        if (!(lambda > 0.0)) return {0.0, 0.0};
        reserve(k_max);
        const double alpha = -std::expm1(-lambda);
        const double inv_two_var = 1.0 / (2.0 * tau * sigma);
        // p(0) = (1 - a) + a e^{-lambda}
        const double score0 = std::log(1.0 - alpha + alpha * std::exp(-lambda)) - R * R * inv_two_var;
        if (k_max < 1) return {0.0, 0.0};

        const double slab_offset = std::log(alpha) - lambda;
        const double log_lambda = std::log(lambda);
        auto score = [&](int k) {
            const double diff = R - double(k);
            return slab_offset + double(k) * log_lambda - log_factorial_[k] - diff * diff * inv_two_var;
        };

        // Over k >= 1 the log-weights are concave in k (log-concave Poisson
        // times Gaussian), so climb to the peak and expand outwards until
        // terms fall e^-40 below the overall maximum; the dropped mass
        // changes the moments by < 1e-15.
        int peak = std::clamp(static_cast<int>(std::lround(R)), 1, k_max);
        double peak_score = score(peak);
        while (peak < k_max) {
            const double s = score(peak + 1);
            if (s <= peak_score) break;
            ++peak;
            peak_score = s;
        }
        while (peak > 1) {
            const double s = score(peak - 1);
            if (s <= peak_score) break;
            --peak;
            peak_score = s;
        }
        const double best = std::max(score0, peak_score);
        constexpr double cutoff = -40.0;

        double z = 0.0, m1 = 0.0, m2 = 0.0;
        if (score0 - best >= cutoff) z = std::exp(score0 - best);
        for (int k = peak; k <= k_max; ++k) {
            const double rel = score(k) - best;
            if (rel < cutoff) break;
            const double w = std::exp(rel);
            z += w;
            m1 += w * k;
            m2 += w * double(k) * double(k);
        }
        for (int k = peak - 1; k >= 1; --k) {
            const double rel = score(k) - best;
            if (rel < cutoff) break;
            const double w = std::exp(rel);
            z += w;
            m1 += w * k;
            m2 += w * double(k) * double(k);
        }
        const double mean = m1 / z;
        return {mean, std::max(0.0, m2 / z - mean * mean)};
    }

private:
    std::vector<double> log_factorial_;
};

/// max(floor, ceil(K + 10 sqrt(K + 1))).
inline int posterior_kmax(double ka, int floor_value = 32) {
    return std::max(floor_value, static_cast<int>(std::ceil(ka + 10.0 * std::sqrt(ka + 1.0))));
}

template <typename Scalar = double>
struct InputBlockResult {
    DecoderState<Scalar> state;
    RowVector<Scalar> m;
    RowVector<Scalar> v;
    Matrix<Scalar> features;  // 6 x n, empty when the CNN was skipped
    int floored = 0;
};

/// Codeword-domain denoising: pseudo-channel, spike-slab posterior, feature
/// map [R, sqrt(Sigma), m, sqrt(v), alpha, lambda], residual CNN and the
/// rho blend. nu becomes the posterior variance.
template <typename Scalar>
InputBlockResult<Scalar> input_block(const DecoderState<Scalar>& state, const UraCodebook<Scalar>& codebook,
                                     const RowVector<Scalar>& y, const LayerParams<Scalar>& p,
                                     DecoderMode mode = DecoderMode::learnt, int kmax_floor = 32,
                                     SpikeSlabPosterior* posterior = nullptr) {
    const PseudoChannel<Scalar> pc = pseudo_channel(state, codebook, y, p);
    const Eigen::Index n = codebook.n();
    const int k_max = posterior_kmax(state.ka, kmax_floor);
    SpikeSlabPosterior local(k_max);
    SpikeSlabPosterior& post = posterior ? *posterior : local;
    const double tau = p.tau();

    InputBlockResult<Scalar> out;
    out.m.resize(n);
    out.v.resize(n);
    out.floored = pc.floored;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double lambda = state.ka * state.pi(j);
        const auto mom = post(double(pc.R(j)), double(pc.sigma(j)), lambda, tau, k_max);
        out.m(j) = Scalar(mom.mean);
        out.v(j) = Scalar(mom.var);
    }

    out.state = state;
    const bool use_cnn = mode == DecoderMode::learnt && !p.cnn.output_is_zero();
    if (use_cnn) {
        out.features.resize(kFeatureChannels, n);
        out.features.row(0) = pc.R;
        out.features.row(1) = pc.sigma.cwiseSqrt();
        out.features.row(2) = out.m;
        out.features.row(3) = out.v.cwiseSqrt();
        for (Eigen::Index j = 0; j < n; ++j) {
            const double lambda = state.ka * state.pi(j);
            out.features(4, j) = Scalar(-std::expm1(-lambda));
            out.features(5, j) = Scalar(lambda);
        }
        const RowVector<Scalar> refined = out.m + cnn_forward(out.features, p.cnn);
        const Scalar rho = Scalar(p.rho());
        out.state.x_hat = (Scalar(1) - rho) * out.m + rho * refined;
    } else {
        out.state.x_hat = out.m;
    }
    out.state.nu = out.v;
    detail::check_finite(out.state.x_hat, "count estimate", state.layer);
    return out;
}

/// Smoothed EM refresh of K_a, pi and sigma^2 from the posterior means.
template <typename Scalar>
DecoderState<Scalar> em_update(const DecoderState<Scalar>& state, const RowVector<Scalar>& m,
                               const UraCodebook<Scalar>& codebook, const RowVector<Scalar>& y,
                               const LayerParams<Scalar>& p) {
    require(m.size() == codebook.n(), "posterior mean length must equal n");
    DecoderState<Scalar> out = state;
    const double s_k = p.step_ka();
    const double s_pi = p.step_pi();
    const double s_sigma = p.step_sigma();

    const double mass = double(m.template cast<double>().cwiseAbs().sum());
    out.ka = std::max(1.0, (1.0 - s_k) * state.ka + s_k * double(m.template cast<double>().sum()));

    const Eigen::VectorXd share = m.template cast<double>().transpose() / std::max(mass, kMassFloor);
    Eigen::VectorXd pi = ((1.0 - s_pi) * state.pi + s_pi * share).cwiseMax(0.0);
    const double total = pi.sum();
    out.pi = total > 0.0 ? Eigen::VectorXd(pi / total) : state.pi;

    const double resid = double((y - state.x_hat * codebook.matrix()).squaredNorm()) / double(y.size());
    const double target = std::max(kSigma2Floor, resid - double(state.V.mean()));
    const double log_sigma2 = (1.0 - s_sigma) * std::log(state.sigma2) + s_sigma * std::log(target);
    out.sigma2 = std::max(kSigma2Floor, std::exp(log_sigma2));
    return out;
}

/// Turns a soft estimate into counts: clamp at zero, keep the K largest
/// entries, least-squares refit of y ~ x C on that support (clamped at zero,
/// repeated refit_iters times on the surviving support) and greedy rounding
/// to a total of round(K_a_hat).
template <typename Scalar>
CountVector postprocess(const RowVector<Scalar>& x_hat, double ka_hat, const RowVector<Scalar>& y,
                        const UraCodebook<Scalar>& codebook, const PostprocessConfig& cfg = {}) {
    const Eigen::Index n = codebook.n();
    require(x_hat.size() == n, "estimate length must equal n");
    require(y.size() == codebook.d(), "measurement length must equal d");
    require(x_hat.allFinite() && std::isfinite(ka_hat), "estimate must be finite");
    const long target = std::max(1L, std::lround(ka_hat));
    const Eigen::Index k = cfg.support_size > 0 ? std::min(cfg.support_size, n)
                                                : std::min<Eigen::Index>(target, n);

    const RowVector<Scalar> clamped = x_hat.cwiseMax(Scalar(0));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return clamped(a) > clamped(b); });
    std::vector<Eigen::Index> support(order.begin(), order.begin() + k);
    std::sort(support.begin(), support.end());

    // Least-squares refit on the support, dropping entries that go negative.
    Eigen::VectorXd values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(support.size()));
    for (std::size_t i = 0; i < support.size(); ++i) values(i) = double(clamped(support[i]));
    std::vector<bool> active(support.size(), true);
    const Eigen::VectorXd yd = y.template cast<double>().transpose();
    for (int iter = 0; iter < std::max(1, cfg.refit_iters); ++iter) {
        std::vector<Eigen::Index> cols;
        for (std::size_t i = 0; i < support.size(); ++i)
            if (active[i]) cols.push_back(static_cast<Eigen::Index>(i));
        if (cols.empty()) break;
        Eigen::MatrixXd A(codebook.d(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c)
            A.col(static_cast<Eigen::Index>(c)) = codebook.row(support[cols[c]]).template cast<double>().transpose();
        const Eigen::VectorXd sol = A.colPivHouseholderQr().solve(yd);
        bool dropped = false;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const double v = sol(static_cast<Eigen::Index>(c));
            values(cols[c]) = std::max(0.0, v);
            if (v < 0.0) {
                active[cols[c]] = false;
                dropped = true;
            }
        }
        if (!dropped) break;
    }
    for (std::size_t i = 0; i < support.size(); ++i)
        if (!active[i]) values(i) = 0.0;

    // Greedy rounding: start from the floor, then move one unit at a time on
    // the entry with the largest (or, when over target, smallest) remainder.
    Eigen::VectorXd counts = values.array().floor();
    long total = static_cast<long>(counts.sum());
    while (total < target) {
        Eigen::Index best = 0;
        (values - counts).maxCoeff(&best);
        counts(best) += 1.0;
        ++total;
    }
    while (total > target) {
        Eigen::Index best = -1;
        double best_rem = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < counts.size(); ++i) {
            const double rem = values(i) - counts(i);
            if (counts(i) >= 1.0 && rem < best_rem) {
                best_rem = rem;
                best = i;
            }
        }
        counts(best) -= 1.0;
        --total;
    }

    CountVector x = CountVector::Zero(n);
    for (std::size_t i = 0; i < support.size(); ++i) x(support[i]) = static_cast<int>(counts(i));
    return x;
}

struct DecodeDiagnostics {
    std::vector<double> residual_norm;  // ||y - x_hat C|| after each layer
    std::vector<double> ka;             // K_a estimate after each layer
    std::vector<double> sigma2;         // sigma^2 estimate after each layer
    int var1_floored = 0;
};

template <typename Scalar = double>
struct DecodeResult {
    CountVector x;
    double ka = 0.0;
    RowVector<Scalar> soft;  // x_hat before post-processing
    double sigma2 = 0.0;
    DecodeDiagnostics diagnostics;
};

/// Default K_a initialisation from received energy: max(1, ||y||^2 - d sigma0^2).
template <typename Scalar>
double initial_ka(const RowVector<Scalar>& y, double sigma2) {
    return std::max(1.0, double(y.squaredNorm()) - double(y.size()) * sigma2);
}

/// Runs every layer (output block, input block, EM) and post-processes.
template <typename Scalar>
DecodeResult<Scalar> decode(const RowVector<Scalar>& y, const UraCodebook<Scalar>& codebook,
                            const Eigen::VectorXd& pi0, const DecoderParams<Scalar>& params, double sigma2_0,
                            std::optional<double> ka0 = std::nullopt) {
    require(y.size() == codebook.d(), "measurement length must equal codeword length");
    require(pi0.size() == codebook.n(), "prior length must equal codebook size");
    require((pi0.array() >= 0.0).all() && std::abs(pi0.sum() - 1.0) <= 1e-9, "prior must lie on the simplex");
    require(params.num_layers() >= 1, "decoder needs at least one layer");
    require(y.allFinite(), "measurement must be finite");

    const double sigma2 = std::max(kSigma2Floor, sigma2_0);
    DecoderState<Scalar> state =
        DecoderState<Scalar>::initial(y, codebook.n(), pi0, sigma2, ka0 ? std::max(1.0, *ka0) : initial_ka(y, sigma2));
    SpikeSlabPosterior posterior(posterior_kmax(state.ka, params.kmax_floor));

    DecodeResult<Scalar> result;
    auto& diag = result.diagnostics;
    for (int t = 0; t < params.num_layers(); ++t) {
        const LayerParams<Scalar>& p = params.layers[static_cast<std::size_t>(t)];
        state.layer = t;
        state = output_block(state, codebook, y, p);
        InputBlockResult<Scalar> in = input_block(state, codebook, y, p, params.mode, params.kmax_floor, &posterior);
        diag.var1_floored += in.floored;
        state = em_update(in.state, in.m, codebook, y, p);

        const double resid = double((y - state.x_hat * codebook.matrix()).norm());
        if (!std::isfinite(resid) || resid > kDivergenceThreshold) {
            throw DecoderDiverged("decoder diverged at layer " + std::to_string(t), t);
        }
        diag.residual_norm.push_back(resid);
        diag.ka.push_back(state.ka);
        diag.sigma2.push_back(state.sigma2);
    }
    result.soft = state.x_hat;
    result.ka = state.ka;
    result.sigma2 = state.sigma2;
    result.x = postprocess(state.x_hat, state.ka, y, codebook, params.postproc);
    return result;
}

}  // namespace airfeel
