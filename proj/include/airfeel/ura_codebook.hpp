#pragma once

// Shared URA codebook: construction of the base matrix D, synthesis of the
// unit-norm codebook C = rownorm(D W), and coherence / conditioning analysis.
//
// Codewords are rows. A device that selects codeword i transmits row i of C,
// so the noiseless received signal is x * C for an activity (count) vector x.

#include "airfeel/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace airfeel {

enum class InitScheme { gaussian, bernoulli, data_driven_pinv };

inline std::string to_string(InitScheme s) {
    switch (s) {
        case InitScheme::gaussian: return "gaussian";
        case InitScheme::bernoulli: return "bernoulli";
        case InitScheme::data_driven_pinv: return "data_driven";
    }
    return "unknown";
}

inline InitScheme parse_init_scheme(const std::string& s) {
    if (s == "gaussian") return InitScheme::gaussian;
    if (s == "bernoulli") return InitScheme::bernoulli;
    if (s == "data_driven" || s == "data_driven_pinv" || s == "data-driven") {
        return InitScheme::data_driven_pinv;
    }
    throw InvalidArgument("unknown codebook init scheme '" + s + "'");
}

template <typename Scalar = double>
struct BaseMatrix {
    Matrix<Scalar> D;
    InitScheme scheme = InitScheme::gaussian;

    Eigen::Index n() const { return D.rows(); }
    Eigen::Index d() const { return D.cols(); }
};

template <typename Scalar = double>
struct ShearMatrix {
    Matrix<Scalar> W;

    static ShearMatrix identity(Eigen::Index d) {
        return ShearMatrix{Matrix<Scalar>::Identity(d, d)};
    }
    Eigen::Index d() const { return W.rows(); }
};

/// Immutable n x d matrix of unit-norm codeword rows.
///
/// Instances are only produced by synthesize() or from_rows(); both enforce
/// the row-norm invariant. The elementwise square is cached because every
/// decoder layer needs it.
template <typename Scalar = double>
class UraCodebook {
public:
    static constexpr double kNormTolerance = 1e-9;

    UraCodebook() = default;

    /// Wraps an existing matrix whose rows must already have unit norm.
    static UraCodebook from_rows(Matrix<Scalar> rows) {
        require(rows.rows() >= 1 && rows.cols() >= 1, "codebook must be non-empty");
        require(rows.allFinite(), "codebook entries must be finite");
        for (Eigen::Index i = 0; i < rows.rows(); ++i) {
            const double norm = static_cast<double>(rows.row(i).norm());
            if (std::abs(norm - 1.0) > kNormTolerance) {
                throw InvalidArgument("codebook row " + std::to_string(i) +
                                      " does not have unit norm");
            }
        }
        return UraCodebook(std::move(rows));
    }

    const Matrix<Scalar>& matrix() const { return C_; }
    const Matrix<Scalar>& squared() const { return C2_; }
    Eigen::Index n() const { return C_.rows(); }
    Eigen::Index d() const { return C_.cols(); }
    auto row(Eigen::Index i) const { return C_.row(i); }

private:
    explicit UraCodebook(Matrix<Scalar> c) : C_(std::move(c)), C2_(C_.array().square().matrix()) {}

    template <typename S>
    friend UraCodebook<S> synthesize(const BaseMatrix<S>&, const ShearMatrix<S>&);

    Matrix<Scalar> C_;
    Matrix<Scalar> C2_;
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> stack_fragments(const std::vector<RowVector<Scalar>>& fragments, Eigen::Index d) {
    Matrix<Scalar> F(static_cast<Eigen::Index>(fragments.size()), d);
    for (std::size_t r = 0; r < fragments.size(); ++r) {
        require(fragments[r].size() == d, "calibration fragment length must equal d");
        if (!fragments[r].allFinite()) throw InvalidArgument("calibration fragment has non-finite entries");
        F.row(static_cast<Eigen::Index>(r)) = fragments[r];
    }
    return F;
}

template <typename Scalar>
Matrix<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix<Scalar> M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = static_cast<Scalar>(normal(rng));
    return M;
}

}  // namespace detail

/// Builds the base matrix D.
///
/// gaussian: i.i.d. N(0,1). bernoulli: i.i.d. +-1 with equal probability.
/// data_driven_pinv: least-squares codebook for the calibration fragments F
/// against a seeded Gaussian code matrix A (one code row per fragment),
/// D = (A^T A + eps I)^-1 A^T F, computed through the pseudo-inverse of A.
/// Rows of D then live in the span of the calibration data.
template <typename Scalar = double>
BaseMatrix<Scalar> init_base(Eigen::Index n, Eigen::Index d, InitScheme scheme, std::uint64_t seed,
                             const std::vector<RowVector<Scalar>>& fragments = {}) {
    require(n >= 1 && d >= 1, "codebook dimensions must be positive");
    Rng rng(derive_seed(seed, 0xC0DEB00CULL));
    BaseMatrix<Scalar> base;
    base.scheme = scheme;
    switch (scheme) {
        case InitScheme::gaussian:
            base.D = detail::gaussian_matrix<Scalar>(n, d, rng);
            break;
        case InitScheme::bernoulli: {
            std::bernoulli_distribution coin(0.5);
            base.D.resize(n, d);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < d; ++j) base.D(i, j) = coin(rng) ? Scalar(1) : Scalar(-1);
            break;
        }
        case InitScheme::data_driven_pinv: {
            if (fragments.empty()) throw InvalidArgument("missing calibration data");
            const Matrix<Scalar> F = detail::stack_fragments(fragments, d);
            const Matrix<Scalar> A = detail::gaussian_matrix<Scalar>(F.rows(), n, rng);
            constexpr double eps = 1e-6;
            const Matrix<Scalar> gram =
                A.transpose() * A + Scalar(eps) * Matrix<Scalar>::Identity(n, n);
            base.D = gram.ldlt().solve(A.transpose() * F);
            break;
        }
    }
    return base;
}

/// C = row-normalised (D W). Rows whose norm before normalisation is below
/// 1e-12 are rejected.
template <typename Scalar>
UraCodebook<Scalar> synthesize(const BaseMatrix<Scalar>& base, const ShearMatrix<Scalar>& shear) {
    if (base.D.cols() != shear.W.rows() || shear.W.rows() != shear.W.cols()) {
        throw InvalidArgument("shape mismatch: D is " + std::to_string(base.D.rows()) + "x" +
                              std::to_string(base.D.cols()) + ", W is " +
                              std::to_string(shear.W.rows()) + "x" + std::to_string(shear.W.cols()));
    }
    require(base.D.rows() >= 1 && base.D.cols() >= 1, "codebook must be non-empty");
    require(base.D.allFinite() && shear.W.allFinite(), "codebook parameters must be finite");
    Matrix<Scalar> C = base.D * shear.W;
    for (Eigen::Index i = 0; i < C.rows(); ++i) {
        const Scalar norm = C.row(i).norm();
        if (!(static_cast<double>(norm) >= 1e-12)) {
            throw InvalidArgument("degenerate codeword at row " + std::to_string(i));
        }
        C.row(i) /= norm;
    }
    return UraCodebook<Scalar>(std::move(C));
}

struct CoherenceReport {
    double max_cross = 0.0;
    double mean_cross = 0.0;
    Eigen::Index top_count = 0;
    double top_max_cross = 0.0;
    double top_mean_cross = 0.0;
    double sigma_max = 0.0;
    double sigma_min = 0.0;
    double sigma_ratio = 0.0;
};

/// Pairwise absolute cross-correlation of codeword rows (overall and among
/// the most popular rows) plus the singular-value spread of C.
///
/// Without a popularity vector the rows are taken to be in popularity order.
template <typename Scalar>
CoherenceReport coherence_stats(const UraCodebook<Scalar>& codebook,
                                const std::optional<Eigen::VectorXd>& popularity = std::nullopt,
                                double top_fraction = 0.1) {
    const Eigen::Index n = codebook.n();
    if (n < 2) throw InvalidArgument("coherence needs at least two codewords");
    require(top_fraction > 0.0 && top_fraction <= 1.0, "top fraction must lie in (0, 1]");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    if (popularity) {
        require(popularity->size() == n, "popularity length must equal n");
        require(std::abs(popularity->sum() - 1.0) <= 1e-9, "popularity must sum to 1");
        std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            return (*popularity)(a) > (*popularity)(b);
        });
    }

    const Eigen::MatrixXd C = codebook.matrix().template cast<double>();
    const Eigen::MatrixXd gram = C * C.transpose();

    CoherenceReport rep;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double c = std::abs(gram(i, j));
            rep.max_cross = std::max(rep.max_cross, c);
            sum += c;
        }
    }
    rep.mean_cross = sum / (0.5 * double(n) * double(n - 1));

    rep.top_count = std::max<Eigen::Index>(2, static_cast<Eigen::Index>(std::ceil(top_fraction * double(n))));
    rep.top_count = std::min(rep.top_count, n);
    double top_sum = 0.0;
    for (Eigen::Index a = 0; a < rep.top_count; ++a) {
        for (Eigen::Index b = a + 1; b < rep.top_count; ++b) {
            const double c = std::abs(gram(order[a], order[b]));
            rep.top_max_cross = std::max(rep.top_max_cross, c);
            top_sum += c;
        }
    }
    rep.top_mean_cross = top_sum / (0.5 * double(rep.top_count) * double(rep.top_count - 1));

    Eigen::BDCSVD<Eigen::MatrixXd> svd(C);
    const Eigen::VectorXd& s = svd.singularValues();
    rep.sigma_max = s.maxCoeff();
    rep.sigma_min = s.minCoeff();
    rep.sigma_ratio = rep.sigma_min > 0.0 ? rep.sigma_max / rep.sigma_min
                                          : std::numeric_limits<double>::infinity();
    return rep;
}

}  // namespace airfeel
