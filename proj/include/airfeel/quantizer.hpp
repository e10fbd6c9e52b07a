#pragma once

// Device-side compression: k-means++ quantisation codebook, popularity
// ordering, nearest-neighbour VQ and error-feedback accumulation.

#include "airfeel/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace airfeel {

/// Centroid matrix (row i = centroid i) plus its popularity distribution.
template <typename Scalar = double>
struct QuantCodebook {
    Matrix<Scalar> Q;
    Eigen::VectorXd pi;

    Eigen::Index n() const { return Q.rows(); }
    Eigen::Index d() const { return Q.cols(); }
};

/// Per-device quantisation residual e_k, carried between rounds.
template <typename Scalar = double>
struct ErrorAccumulator {
    RowVector<Scalar> e;
    int device_id = 0;

    static ErrorAccumulator zeros(Eigen::Index length, int device) {
        return ErrorAccumulator{RowVector<Scalar>::Zero(length), device};
    }
};

/// Nearest centroid by Euclidean distance; ties go to the smallest index.
template <typename Scalar, typename Derived>
Eigen::Index quantize(const Eigen::MatrixBase<Derived>& u, const QuantCodebook<Scalar>& codebook) {
    require(u.size() == codebook.d(), "fragment length must equal codebook dimension");
    require(codebook.n() >= 1, "codebook is empty");
    Eigen::Index best = 0;
    Scalar best_dist = std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index i = 0; i < codebook.n(); ++i) {
        const Scalar dist = (codebook.Q.row(i) - u.reshaped().transpose()).squaredNorm();
        if (dist < best_dist) {
            best_dist = dist;
            best = i;
        }
    }
    return best;
}

namespace detail {

// Squared distances between every row of F and every row of Q (|F| x |Q|).
template <typename Scalar>
Matrix<Scalar> pairwise_sq_dist(const Matrix<Scalar>& F, const Matrix<Scalar>& Q) {
    Matrix<Scalar> dist = -2 * (F * Q.transpose());
    dist.colwise() += F.rowwise().squaredNorm();
    dist.rowwise() += Q.rowwise().squaredNorm().transpose();
    return dist.cwiseMax(Scalar(0));
}

template <typename Scalar>
std::vector<Eigen::Index> distinct_rows(const Matrix<Scalar>& F) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(F.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    auto less = [&](Eigen::Index a, Eigen::Index b) {
        for (Eigen::Index j = 0; j < F.cols(); ++j) {
            if (F(a, j) != F(b, j)) return F(a, j) < F(b, j);
        }
        return a < b;
    };
    std::sort(idx.begin(), idx.end(), less);
    std::vector<Eigen::Index> out;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (k == 0 || F.row(idx[k]) != F.row(idx[k - 1])) out.push_back(idx[k]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

template <typename Scalar>
Matrix<Scalar> kmeanspp_seed(const Matrix<Scalar>& F, Eigen::Index k, Rng& rng) {
    const Eigen::Index m = F.rows();
    Matrix<Scalar> centers(k, F.cols());
    std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
    centers.row(0) = F.row(pick(rng));
    Eigen::VectorXd closest(m);
    for (Eigen::Index r = 0; r < m; ++r) closest(r) = (F.row(r) - centers.row(0)).squaredNorm();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index c = 1; c < k; ++c) {
        const double total = closest.sum();
        Eigen::Index chosen = m - 1;
        if (total > 0.0) {
            double target = unit(rng) * total;
            for (Eigen::Index r = 0; r < m; ++r) {
                target -= closest(r);
                if (target < 0.0) {
                    chosen = r;
                    break;
                }
            }
            // Guard against the rounding tail landing on an already-covered point.
            while (closest(chosen) == 0.0 && chosen > 0) --chosen;
        } else {
            chosen = pick(rng);
        }
        centers.row(c) = F.row(chosen);
        for (Eigen::Index r = 0; r < m; ++r) {
            closest(r) = std::min(closest(r), double((F.row(r) - centers.row(c)).squaredNorm()));
        }
    }
    return centers;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or max_iters is reached. Empty clusters are repaired by moving the
/// centroid onto the worst-fit point of the highest-inertia cluster.
///
/// With fewer distinct fragments than n, clustering runs on the distinct
/// points and the remaining rows are copies of the most used centroid plus
/// 1e-6 noise, so the codebook always has n rows. pi is uniform on return.
template <typename Scalar = double>
QuantCodebook<Scalar> build_codebook(const Matrix<Scalar>& fragments, Eigen::Index n, std::uint64_t seed,
                                     int max_iters = 100) {
    if (fragments.rows() == 0) throw InvalidArgument("no fragments to cluster");
    require(n >= 1, "codebook size must be positive");
    require(fragments.allFinite(), "fragments must be finite");
    Rng rng(derive_seed(seed, 0x4B4D45414E53ULL));

    const Eigen::Index m = fragments.rows();
    const Eigen::Index distinct = static_cast<Eigen::Index>(detail::distinct_rows(fragments).size());
    const Eigen::Index k = std::min(n, distinct);

    Matrix<Scalar> centers = detail::kmeanspp_seed(fragments, k, rng);
    std::vector<Eigen::Index> assign(static_cast<std::size_t>(m), -1);
    Eigen::VectorXi sizes = Eigen::VectorXi::Zero(k);

    for (int iter = 0; iter < std::max(1, max_iters); ++iter) {
        const Matrix<Scalar> dist = detail::pairwise_sq_dist(fragments, centers);
        bool changed = false;
        for (Eigen::Index r = 0; r < m; ++r) {
            Eigen::Index best = 0;
            dist.row(r).minCoeff(&best);
            if (assign[r] != best) {
                assign[r] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;

        sizes.setZero();
        Matrix<Scalar> sums = Matrix<Scalar>::Zero(k, fragments.cols());
        for (Eigen::Index r = 0; r < m; ++r) {
            sums.row(assign[r]) += fragments.row(r);
            ++sizes(assign[r]);
        }
        for (Eigen::Index c = 0; c < k; ++c) {
            if (sizes(c) > 0) centers.row(c) = sums.row(c) / Scalar(sizes(c));
        }
        // Empty-cluster repair: split the cluster with the largest inertia.
        for (Eigen::Index c = 0; c < k; ++c) {
            if (sizes(c) > 0) continue;
            Eigen::VectorXd inertia = Eigen::VectorXd::Zero(k);
            Eigen::Index worst_point = -1;
            double worst_dist = -1.0;
            for (Eigen::Index r = 0; r < m; ++r) {
                inertia(assign[r]) += double((fragments.row(r) - centers.row(assign[r])).squaredNorm());
            }
            Eigen::Index donor = 0;
            inertia.maxCoeff(&donor);
            for (Eigen::Index r = 0; r < m; ++r) {
                if (assign[r] != donor || sizes(donor) < 2) continue;
                const double dd = double((fragments.row(r) - centers.row(donor)).squaredNorm());
                if (dd > worst_dist) {
                    worst_dist = dd;
                    worst_point = r;
                }
            }
            if (worst_point < 0) continue;
            centers.row(c) = fragments.row(worst_point);
            --sizes(donor);
            ++sizes(c);
            assign[worst_point] = c;
            changed = true;
        }
    }

    QuantCodebook<Scalar> out;
    out.Q.resize(n, fragments.cols());
    out.Q.topRows(k) = centers;
    if (k < n) {
        sizes.setZero();
        for (Eigen::Index r = 0; r < m; ++r) ++sizes(assign[r]);
        Eigen::Index popular = 0;
        sizes.maxCoeff(&popular);
        std::normal_distribution<double> noise(0.0, 1e-6);
        for (Eigen::Index c = k; c < n; ++c) {
            out.Q.row(c) = centers.row(popular);
            for (Eigen::Index j = 0; j < out.Q.cols(); ++j) out.Q(c, j) += Scalar(noise(rng));
        }
    }
    out.pi = Eigen::VectorXd::Constant(n, 1.0 / double(n));
    return out;
}

/// Quantises every fragment row; same tie-break as quantize().
template <typename Scalar>
std::vector<Eigen::Index> quantize_rows(const Matrix<Scalar>& fragments, const QuantCodebook<Scalar>& codebook) {
    require(fragments.cols() == codebook.d(), "fragment length must equal codebook dimension");
    std::vector<Eigen::Index> out(static_cast<std::size_t>(fragments.rows()));
    for (Eigen::Index r = 0; r < fragments.rows(); ++r) out[r] = quantize(fragments.row(r), codebook);
    return out;
}

/// Counts how often each centroid is used by the fragments, sets
/// pi_i = N_i / sum_j N_j and reorders rows so pi is non-increasing (stable).
template <typename Scalar>
QuantCodebook<Scalar> popularity_order(const QuantCodebook<Scalar>& codebook, const Matrix<Scalar>& fragments) {
    require(fragments.rows() > 0, "popularity ordering needs fragments");
    const Eigen::Index n = codebook.n();
    std::vector<long> counts(static_cast<std::size_t>(n), 0);
    for (Eigen::Index idx : quantize_rows(fragments, codebook)) ++counts[idx];

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return counts[a] > counts[b]; });

    const double total = double(fragments.rows());
    QuantCodebook<Scalar> out;
    out.Q.resize(n, codebook.d());
    out.pi.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.Q.row(i) = codebook.Q.row(order[i]);
        out.pi(i) = double(counts[order[i]]) / total;
    }
    return out;
}

/// Splits a flat vector into rows of length frag_len, zero padding the tail.
template <typename Scalar, typename Derived>
Matrix<Scalar> fragment(const Eigen::MatrixBase<Derived>& flat, Eigen::Index frag_len) {
    require(frag_len >= 1, "fragment length must be positive");
    const Eigen::Index len = flat.size();
    const Eigen::Index rows = (len + frag_len - 1) / frag_len;
    Matrix<Scalar> out = Matrix<Scalar>::Zero(rows, frag_len);
    for (Eigen::Index i = 0; i < len; ++i) out(i / frag_len, i % frag_len) = flat(i);
    return out;
}

/// Inverse of fragment(): concatenates rows and drops the padding.
template <typename Scalar>
RowVector<Scalar> defragment(const Matrix<Scalar>& rows, Eigen::Index length) {
    require(length <= rows.size(), "requested length exceeds fragment payload");
    RowVector<Scalar> out(length);
    for (Eigen::Index i = 0; i < length; ++i) out(i) = rows(i / rows.cols(), i % rows.cols());
    return out;
}

template <typename Scalar>
struct FeedbackResult {
    std::vector<Eigen::Index> indices;
    ErrorAccumulator<Scalar> accumulator;
    RowVector<Scalar> transmitted;  // Q(s), padding stripped
};

/// s = delta_w + e; every fragment of s is quantised; e' = s - Q(s).
template <typename Scalar>
FeedbackResult<Scalar> apply_error_feedback(const RowVector<Scalar>& delta_w, const ErrorAccumulator<Scalar>& acc,
                                            const QuantCodebook<Scalar>& codebook, Eigen::Index frag_len) {
    require(frag_len == codebook.d(), "fragment length must equal the quantisation codebook dimension");
    require(acc.e.size() == delta_w.size(), "accumulator length must equal the update length");
    if (!delta_w.allFinite() || !acc.e.allFinite()) throw InvalidArgument("non-finite update or accumulator");

    const RowVector<Scalar> s = delta_w + acc.e;
    const Matrix<Scalar> frags = fragment<Scalar>(s, frag_len);
    FeedbackResult<Scalar> out;
    out.indices = quantize_rows(frags, codebook);
    Matrix<Scalar> q(frags.rows(), frag_len);
    for (Eigen::Index r = 0; r < frags.rows(); ++r) q.row(r) = codebook.Q.row(out.indices[r]);
    out.transmitted = defragment(q, s.size());
    out.accumulator = ErrorAccumulator<Scalar>{s - out.transmitted, acc.device_id};
    return out;
}

/// sum_i counts_i * Q_i (unnormalised aggregate).
template <typename Scalar>
RowVector<Scalar> dequantize(const CountVector& counts, const QuantCodebook<Scalar>& codebook) {
    require(counts.size() == codebook.n(), "count vector length must equal codebook size");
    require((counts.array() >= 0).all(), "counts must be non-negative");
    return counts.cast<Scalar>() * codebook.Q;
}

}  // namespace airfeel
