#include "airfeel/channel.hpp"
#include "airfeel/decoder.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace airfeel;
using namespace airfeel::oracle;


TEST(SpikeSlabPosterior, MatchesTruncatedSumOracle) {
    Rng rng(2024);
    std::uniform_real_distribution<double> R(-2.0, 12.0), logs(-4.0, 1.5), lam(0.01, 8.0), tau(0.3, 3.0);
    SpikeSlabPosterior post;
    for (int trial = 0; trial < 1000; ++trial) {
        const double r = R(rng), s = std::exp(logs(rng)), l = lam(rng), t = tau(rng);
        const int k_max = posterior_kmax(l * 3.0);
        const auto fast = post(r, s, l, t, k_max);
        const auto [mean, var] = truncated_sum_moments(r, s, l, t, k_max);
        ASSERT_NEAR(fast.mean, mean, 1e-12) << "trial " << trial;
        ASSERT_NEAR(fast.var, var, 1e-12) << "trial " << trial;
    }
}

TEST(SpikeSlabPosterior, ZeroRateGivesZero) {
    SpikeSlabPosterior post;
    const auto m = post(3.0, 0.1, 0.0, 1.0, 32);
    EXPECT_EQ(m.mean, 0.0);
    EXPECT_EQ(m.var, 0.0);
}

TEST(SpikeSlabPosterior, MeanWithinSupport) {
    Rng rng(5);
    std::uniform_real_distribution<double> R(-50.0, 80.0);
    SpikeSlabPosterior post;
    for (int i = 0; i < 500; ++i) {
        const auto m = post(R(rng), 0.5, 3.0, 1.0, 40);
        EXPECT_GE(m.mean, 0.0);
        EXPECT_LE(m.mean, 40.0);
        EXPECT_GE(m.var, 0.0);
    }
}

TEST(PosteriorKmax, FloorAndGrowth) {
    EXPECT_EQ(posterior_kmax(1.0), 32);
    EXPECT_EQ(posterior_kmax(100.0), static_cast<int>(std::ceil(100.0 + 10.0 * std::sqrt(101.0))));
}

TEST(CnnForward, MatchesNaiveConvolution) {
    Rng rng(77);
    std::normal_distribution<double> g;
    for (int kernel : {1, 3, 5}) {
        auto w = CnnWeights<double>::zeros(7, kernel);
        for (Eigen::Index i = 0; i < w.w1.size(); ++i) w.w1.data()[i] = g(rng);
        for (Eigen::Index i = 0; i < w.b1.size(); ++i) w.b1(i) = g(rng);
        for (Eigen::Index i = 0; i < w.w2.size(); ++i) w.w2(i) = g(rng);
        w.b2 = g(rng);
        MatrixXd features(kFeatureChannels, 19);
        for (Eigen::Index i = 0; i < features.size(); ++i) features.data()[i] = g(rng);

        const Eigen::Index n = features.cols();
        const RowVectorXd expect = naive_cnn(features, w);
        const RowVectorXd got = cnn_forward(features, w);
        ASSERT_EQ(got.size(), n);
        for (Eigen::Index j = 0; j < n; ++j) EXPECT_NEAR(got(j), expect(j), 1e-10) << "kernel " << kernel << " pos " << j;
    }
}

TEST(CnnForward, RejectsBadShapes) {
    auto w = CnnWeights<double>::zeros(4, 3);
    EXPECT_THROW(cnn_forward(MatrixXd(MatrixXd::Zero(5, 8)), w), InvalidArgument);
    w.w2 = RowVectorXd::Zero(5);
    EXPECT_THROW(cnn_forward(MatrixXd(MatrixXd::Zero(6, 8)), w), InvalidArgument);
    EXPECT_THROW((void)CnnWeights<double>::zeros(4, 2).validate(), InvalidArgument);
}

TEST(LayerParams, RawConversionsRoundTrip) {
    for (double g : {0.35, 0.8, 1.0, 1.9}) EXPECT_NEAR(gamma_from_raw(gamma_to_raw(g)), g, 1e-12);
    for (double p : {0.01, 0.5, 0.93}) EXPECT_NEAR(sigmoid(logit(p)), p, 1e-12);
    for (double a : {0.1, 1.0, 7.0, 50.0}) EXPECT_NEAR(softplus(inverse_softplus(a)), a, 1e-12);
}

TEST(BaselineParams, FixedValues) {
    const auto p = baseline_params<double>(10);
    ASSERT_EQ(p.num_layers(), 10);
    EXPECT_EQ(p.mode, DecoderMode::baseline);
    for (const auto& l : p.layers) {
        EXPECT_NEAR(l.gamma(), 1.0, 1e-12);
        EXPECT_NEAR(l.eta(), 0.5, 1e-12);
        EXPECT_NEAR(l.alpha_scale(), 1.0, 1e-12);
        EXPECT_NEAR(l.tau(), 1.0, 1e-12);
        EXPECT_EQ(l.rho(), 0.0);
        EXPECT_NEAR(l.step_ka(), 0.5, 1e-12);
        EXPECT_NEAR(l.step_pi(), 0.5, 1e-12);
        EXPECT_NEAR(l.step_sigma(), 0.5, 1e-12);
        EXPECT_TRUE(l.cnn.output_is_zero());
    }
}

TEST(Postprocess, MatchesExhaustiveSearchOnSmallInstances) {
    Rng rng(31);
    std::normal_distribution<double> g;
    int checked = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const Eigen::Index n = 2 + trial % 5;  // 2..6
        const Eigen::Index d = n + 2;
        const auto C = random_codebook(n, d, 100 + trial);
        CountVector x = CountVector::Zero(n);
        std::uniform_int_distribution<int> pick(0, int(n) - 1), k(1, 5);
        const int ka = k(rng);
        for (int i = 0; i < ka; ++i) x(pick(rng)) += 1;
        RowVectorXd y = x.cast<double>() * C.matrix();
        for (Eigen::Index j = 0; j < d; ++j) y(j) += 0.02 * g(rng);
        RowVectorXd soft = x.cast<double>();
        for (Eigen::Index j = 0; j < n; ++j) soft(j) += 0.2 * g(rng);
        PostprocessConfig cfg;
        cfg.support_size = n;
        const CountVector got = postprocess(soft, double(ka) + 0.3, y, C, cfg);
        const CountVector want = exhaustive_best(y, C, ka);
        EXPECT_EQ(got, want) << "trial " << trial << " n " << n;
        ++checked;
    }
    EXPECT_EQ(checked, 300);
}

TEST(Postprocess, TotalsMatchRoundedKa) {
    Rng rng(8);
    std::normal_distribution<double> g;
    const auto C = random_codebook(30, 16, 4);
    for (int trial = 0; trial < 100; ++trial) {
        RowVectorXd soft(30), y(16);
        for (auto& v : soft) v = g(rng);
        for (auto& v : y) v = g(rng);
        const double ka = 1.0 + std::abs(5.0 * g(rng));
        const CountVector x = postprocess(soft, ka, y, C);
        EXPECT_EQ(x.sum(), std::max(1L, std::lround(ka)));
        EXPECT_TRUE((x.array() >= 0).all());
    }
}

TEST(Decode, OneHotOrthonormalNoiselessIsExact) {
    Rng rng(99);
    const Eigen::Index n = 16;
    int exact = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto C = orthonormal_codebook(n, 500 + trial);
        CountVector x = CountVector::Zero(n);
        std::uniform_int_distribution<int> pick(0, int(n) - 1);
        x(pick(rng)) = 1;
        const auto tx = transmit(x, C, ChannelConfig{std::numeric_limits<double>::infinity(), 1});
        const Eigen::VectorXd pi = Eigen::VectorXd::Constant(n, 1.0 / double(n));
        const auto r = decode(tx.y, C, pi, baseline_params<double>(10), 0.0);
        exact += r.x == x;
    }
    EXPECT_EQ(exact, 200);
}

TEST(Decode, PopularityPriorDoesNotHurtSupportRecovery) {
    const Eigen::Index n = 128, d = 48;
    const auto C = random_codebook(n, d, 3);
    Eigen::VectorXd pop(n);
    for (Eigen::Index i = 0; i < n; ++i) pop(i) = std::pow(0.9, double(i));
    pop /= pop.sum();
    const Eigen::VectorXd prior = 0.95 * pop.array() + 0.05 / double(n);
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / double(n));
    std::discrete_distribution<int> draw(pop.data(), pop.data() + n);
    Rng rng(12);
    double f1_pop = 0.0, f1_uni = 0.0;
    auto f1 = [](const CountVector& a, const CountVector& b) {
        double hit = 0, na = 0, nb = 0;
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            hit += a(i) > 0 && b(i) > 0;
            na += a(i) > 0;
            nb += b(i) > 0;
        }
        return 2.0 * hit / (na + nb);
    };
    for (int trial = 0; trial < 200; ++trial) {
        CountVector x = CountVector::Zero(n);
        for (int k = 0; k < 8; ++k) x(draw(rng)) += 1;
        const auto tx = transmit(x, C, ChannelConfig{5.0, std::uint64_t(trial)});
        f1_pop += f1(x, decode(tx.y, C, prior, baseline_params<double>(), tx.sigma2, 8.0).x);
        f1_uni += f1(x, decode(tx.y, C, uniform, baseline_params<double>(), tx.sigma2, 8.0).x);
    }
    EXPECT_GE(f1_pop, f1_uni);
}

TEST(Decode, RejectsInvalidInputs) {
    const auto C = random_codebook(10, 6, 1);
    const Eigen::VectorXd pi = Eigen::VectorXd::Constant(10, 0.1);
    EXPECT_THROW(decode(RowVectorXd(RowVectorXd::Zero(5)), C, pi, baseline_params<double>(), 0.1), InvalidArgument);
    EXPECT_THROW(decode(RowVectorXd(RowVectorXd::Zero(6)), C, Eigen::VectorXd(Eigen::VectorXd::Constant(10, 0.2)), baseline_params<double>(), 0.1),
                 InvalidArgument);
    DecoderParams<double> empty;
    EXPECT_THROW(decode(RowVectorXd(RowVectorXd::Zero(6)), C, pi, empty, 0.1), InvalidArgument);
}

TEST(Decode, DeterministicAndFinite) {
    const auto C = random_codebook(64, 24, 9);
    CountVector x = CountVector::Zero(64);
    x(3) = 2;
    x(10) = 1;
    x(40) = 1;
    const auto tx = transmit(x, C, ChannelConfig{10.0, 4});
    const Eigen::VectorXd pi = Eigen::VectorXd::Constant(64, 1.0 / 64.0);
    const auto a = decode(tx.y, C, pi, baseline_params<double>(), tx.sigma2);
    const auto b = decode(tx.y, C, pi, baseline_params<double>(), tx.sigma2);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.ka, b.ka);
    EXPECT_TRUE(a.soft.allFinite());
    EXPECT_EQ(a.diagnostics.ka.size(), 10u);
}

TEST(EmUpdate, PiStaysOnSimplex) {
    const auto C = random_codebook(20, 10, 2);
    auto s = DecoderState<double>::initial(RowVectorXd::Ones(10), 20, Eigen::VectorXd::Constant(20, 0.05), 0.1, 3.0);
    RowVectorXd m = RowVectorXd::Zero(20);
    m(1) = 2.0;
    m(4) = -0.5;
    const auto out = em_update(s, m, C, RowVectorXd(RowVectorXd::Ones(10)), baseline_params<double>().layers[0]);
    EXPECT_NEAR(out.pi.sum(), 1.0, 1e-12);
    EXPECT_TRUE((out.pi.array() >= 0.0).all());
    EXPECT_GE(out.ka, 1.0);
    EXPECT_GT(out.sigma2, 0.0);
}
