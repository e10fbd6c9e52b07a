#include "airfeel/channel.hpp"
#include "airfeel/ura_codebook.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace airfeel;

TEST(InitBase, GaussianAndBernoulliShapes) {
    const auto g = init_base<double>(50, 12, InitScheme::gaussian, 3);
    EXPECT_EQ(g.D.rows(), 50);
    EXPECT_EQ(g.D.cols(), 12);
    const auto b = init_base<double>(50, 12, InitScheme::bernoulli, 3);
    EXPECT_TRUE((b.D.array().abs() == 1.0).all());
    EXPECT_EQ(init_base<double>(50, 12, InitScheme::gaussian, 3).D, g.D);
    EXPECT_NE(init_base<double>(50, 12, InitScheme::gaussian, 4).D, g.D);
}

TEST(InitBase, DataDrivenMatchesPseudoInverseOracle) {
    Rng rng(1);
    std::normal_distribution<double> g;
    std::vector<RowVectorXd> frags(40, RowVectorXd(6));
    for (auto& f : frags)
        for (auto& v : f) v = g(rng);
    const Eigen::Index n = 10;
    const auto base = init_base<double>(n, 6, InitScheme::data_driven_pinv, 7, frags);

    // Rebuild the code matrix from the same stream and solve through the SVD.
    Rng code_rng(derive_seed(7, 0xC0DEB00CULL));
    std::normal_distribution<double> h;
    Eigen::MatrixXd A(40, n);
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j) A(i, j) = h(code_rng);
    Eigen::MatrixXd F(40, 6);
    for (int r = 0; r < 40; ++r) F.row(r) = frags[std::size_t(r)];
    const Eigen::MatrixXd want = A.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(F);
    EXPECT_LE((base.D - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(InitBase, DataDrivenNeedsCalibration) {
    EXPECT_THROW(init_base<double>(10, 4, InitScheme::data_driven_pinv, 1), InvalidArgument);
    std::vector<RowVectorXd> wrong(5, RowVectorXd::Ones(3));
    EXPECT_THROW(init_base<double>(10, 4, InitScheme::data_driven_pinv, 1, wrong), InvalidArgument);
}

TEST(Synthesize, RowsHaveUnitNorm) {
    const auto base = init_base<double>(30, 8, InitScheme::gaussian, 2);
    ShearMatrix<double> shear = ShearMatrix<double>::identity(8);
    shear.W(0, 3) = 0.7;
    shear.W(5, 1) = -1.2;
    const auto C = synthesize(base, shear);
    for (Eigen::Index i = 0; i < C.n(); ++i) EXPECT_NEAR(C.row(i).norm(), 1.0, 1e-12);
    const Eigen::MatrixXd DW = base.D * shear.W;
    for (Eigen::Index i = 0; i < C.n(); ++i) EXPECT_LE((C.row(i) - DW.row(i) / DW.row(i).norm()).norm(), 1e-12);
    EXPECT_EQ(C.squared(), C.matrix().array().square().matrix());
}

TEST(Synthesize, ShapeMismatchAndDegenerateRows) {
    const auto base = init_base<double>(5, 4, InitScheme::gaussian, 2);
    try {
        synthesize(base, ShearMatrix<double>::identity(3));
        FAIL() << "expected a shape mismatch";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
    BaseMatrix<double> zero;
    zero.D = MatrixXd::Zero(3, 4);
    zero.D(0, 0) = 1.0;
    EXPECT_THROW(synthesize(zero, ShearMatrix<double>::identity(4)), InvalidArgument);
}

TEST(CoherenceStats, MatchesBruteForce) {
    const auto C = synthesize(init_base<double>(20, 6, InitScheme::gaussian, 9), ShearMatrix<double>::identity(6));
    const auto rep = coherence_stats(C);
    double mx = 0.0, sum = 0.0;
    int pairs = 0;
    for (Eigen::Index i = 0; i < 20; ++i) {
        for (Eigen::Index j = i + 1; j < 20; ++j) {
            const double c = std::abs(C.row(i).dot(C.row(j)));
            mx = std::max(mx, c);
            sum += c;
            ++pairs;
        }
    }
    EXPECT_NEAR(rep.max_cross, mx, 1e-12);
    EXPECT_NEAR(rep.mean_cross, sum / pairs, 1e-12);
    const Eigen::VectorXd sv = Eigen::MatrixXd(C.matrix()).jacobiSvd().singularValues();
    EXPECT_NEAR(rep.sigma_max, sv.maxCoeff(), 1e-9);
    EXPECT_NEAR(rep.sigma_min, sv.minCoeff(), 1e-9);
    EXPECT_LE(rep.top_max_cross, rep.max_cross);
}

TEST(CoherenceStats, OrthonormalRowsHaveZeroCrossCorrelation) {
    BaseMatrix<double> base;
    base.D = MatrixXd::Identity(6, 6);
    const auto rep = coherence_stats(synthesize(base, ShearMatrix<double>::identity(6)));
    EXPECT_EQ(rep.max_cross, 0.0);
    EXPECT_NEAR(rep.sigma_ratio, 1.0, 1e-12);
}

TEST(Channel, NoiseVarianceFormula) {
    EXPECT_NEAR(noise_variance(10.0, 8, 64), (8.0 / 64.0) / 10.0, 1e-15);
    EXPECT_EQ(noise_variance(std::numeric_limits<double>::infinity(), 3, 16), 0.0);
    EXPECT_THROW(noise_variance(0.0, 0, 16), InvalidArgument);
}

TEST(Channel, MonteCarloNoiseVariance) {
    const auto C = synthesize(init_base<double>(32, 64, InitScheme::gaussian, 1), ShearMatrix<double>::identity(64));
    CountVector x = CountVector::Zero(32);
    x(0) = 3;
    x(7) = 2;
    double acc = 0.0;
    const int trials = 4000;
    for (int t = 0; t < trials; ++t) {
        const auto tx = transmit(x, C, ChannelConfig{3.0, std::uint64_t(t) + 1});
        acc += tx.noise.squaredNorm();
        ASSERT_LE((tx.y - x.cast<double>() * C.matrix() - tx.noise).cwiseAbs().maxCoeff(), 1e-14);
    }
    const double want = noise_variance(3.0, 5, 64);
    EXPECT_NEAR(acc / (trials * 64.0), want, 0.03 * want);
}

TEST(Channel, DeterministicAndValidated) {
    const auto C = synthesize(init_base<double>(8, 4, InitScheme::gaussian, 1), ShearMatrix<double>::identity(4));
    CountVector x = CountVector::Zero(8);
    x(2) = 1;
    EXPECT_EQ(transmit(x, C, ChannelConfig{0.0, 5}).y, transmit(x, C, ChannelConfig{0.0, 5}).y);
    EXPECT_NE(transmit(x, C, ChannelConfig{0.0, 5}).y, transmit(x, C, ChannelConfig{0.0, 6}).y);
    EXPECT_THROW(transmit(CountVector::Zero(8), C, ChannelConfig{0.0, 5}), InvalidArgument);
    EXPECT_THROW(transmit(CountVector::Ones(7), C, ChannelConfig{0.0, 5}), InvalidArgument);
    EXPECT_THROW(transmit(x, C, ChannelConfig{std::nan(""), 5}), InvalidArgument);
}
