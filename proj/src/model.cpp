#include "airfeel/model.hpp"

#include <cmath>

namespace airfeel {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct MlpView {
    Eigen::Map<const RowMajor> W1;
    Eigen::Map<const Eigen::RowVectorXd> b1;
    Eigen::Map<const RowMajor> W2;
    Eigen::Map<const Eigen::RowVectorXd> b2;
};

MlpView view(const MlpShape& s, const double* p) {
    const Eigen::Index w1 = Eigen::Index(s.hidden) * s.inputs;
    const Eigen::Index w2 = Eigen::Index(s.classes) * s.hidden;
    return MlpView{Eigen::Map<const RowMajor>(p, s.hidden, s.inputs),
                   Eigen::Map<const Eigen::RowVectorXd>(p + w1, s.hidden),
                   Eigen::Map<const RowMajor>(p + w1 + s.hidden, s.classes, s.hidden),
                   Eigen::Map<const Eigen::RowVectorXd>(p + w1 + s.hidden + w2, s.classes)};
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& features, const std::vector<int>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    return out;
}

// Row-wise log-softmax.
Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out = logits;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double mx = out.row(r).maxCoeff();
        const double lse = mx + std::log((out.row(r).array() - mx).exp().sum());
        out.row(r).array() -= lse;
    }
    return out;
}

}  // namespace

SyntheticTask make_synthetic_task(const SyntheticTaskConfig& cfg) {
    require(cfg.classes >= 2 && cfg.features >= 1, "task needs at least two classes and one feature");
    require(cfg.train_samples >= cfg.classes && cfg.test_samples >= 1, "task needs samples");
    Rng rng(derive_seed(cfg.seed, 0xDA7AULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd means(cfg.classes, cfg.features);
    for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = cfg.class_separation * normal(rng);

    auto draw = [&](int count) {
        LabelledData d;
        d.features.resize(count, cfg.features);
        d.labels.resize(count);
        std::uniform_int_distribution<int> label(0, cfg.classes - 1);
        for (int i = 0; i < count; ++i) {
            const int c = label(rng);
            d.labels(i) = c;
            for (int j = 0; j < cfg.features; ++j) d.features(i, j) = means(c, j) + normal(rng);
        }
        return d;
    };
    SyntheticTask task;
    task.train = draw(cfg.train_samples);
    task.test = draw(cfg.test_samples);
    return task;
}

double MlpClassifier::loss_and_gradient(const RowVectorXd& w, const std::vector<int>& batch, RowVectorXd& grad) const {
    require(w.size() == num_params(), "parameter vector has the wrong length");
    require(!batch.empty(), "empty minibatch");
    const MlpView p = view(shape_, w.data());
    const Eigen::MatrixXd X = gather(data_->features, batch);
    const double inv_b = 1.0 / double(batch.size());

    Eigen::MatrixXd pre = X * p.W1.transpose();
    pre.rowwise() += p.b1;
    const Eigen::MatrixXd H = pre.cwiseMax(0.0);
    Eigen::MatrixXd logits = H * p.W2.transpose();
    logits.rowwise() += p.b2;
    const Eigen::MatrixXd logp = log_softmax(logits);

    double loss = 0.0;
    Eigen::MatrixXd dlogits = logp.array().exp();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int y = data_->labels(batch[i]);
        loss -= logp(static_cast<Eigen::Index>(i), y);
        dlogits(static_cast<Eigen::Index>(i), y) -= 1.0;
    }
    dlogits *= inv_b;

    grad.resize(num_params());
    const Eigen::Index w1 = Eigen::Index(shape_.hidden) * shape_.inputs;
    const Eigen::Index w2 = Eigen::Index(shape_.classes) * shape_.hidden;
    Eigen::Map<RowMajor> gW1(grad.data(), shape_.hidden, shape_.inputs);
    Eigen::Map<Eigen::RowVectorXd> gb1(grad.data() + w1, shape_.hidden);
    Eigen::Map<RowMajor> gW2(grad.data() + w1 + shape_.hidden, shape_.classes, shape_.hidden);
    Eigen::Map<Eigen::RowVectorXd> gb2(grad.data() + w1 + shape_.hidden + w2, shape_.classes);

    gW2 = dlogits.transpose() * H;
    gb2 = dlogits.colwise().sum();
    const Eigen::MatrixXd dH = ((dlogits * p.W2).array() * (pre.array() > 0.0).cast<double>()).matrix();
    gW1 = dH.transpose() * X;
    gb1 = dH.colwise().sum();
    return loss * inv_b;
}

double MlpClassifier::loss(const RowVectorXd& w, const std::vector<int>& batch) const {
    RowVectorXd unused;
    return loss_and_gradient(w, batch, unused);
}

double MlpClassifier::accuracy(const RowVectorXd& w, const LabelledData& data) const {
    const MlpView p = view(shape_, w.data());
    Eigen::MatrixXd pre = data.features * p.W1.transpose();
    pre.rowwise() += p.b1;
    Eigen::MatrixXd logits = pre.cwiseMax(0.0) * p.W2.transpose();
    logits.rowwise() += p.b2;
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        logits.row(i).maxCoeff(&best);
        correct += best == data.labels(i);
    }
    return double(correct) / double(data.size());
}

RowVectorXd MlpClassifier::initial_params(std::uint64_t seed) const {
    Rng rng(derive_seed(seed, 0x1417ULL));
    RowVectorXd w = RowVectorXd::Zero(num_params());
    std::normal_distribution<double> first(0.0, std::sqrt(2.0 / shape_.inputs));
    std::normal_distribution<double> second(0.0, std::sqrt(1.0 / shape_.hidden));
    const Eigen::Index w1 = Eigen::Index(shape_.hidden) * shape_.inputs;
    const Eigen::Index w2 = Eigen::Index(shape_.classes) * shape_.hidden;
    for (Eigen::Index i = 0; i < w1; ++i) w(i) = first(rng);
    for (Eigen::Index i = 0; i < w2; ++i) w(w1 + shape_.hidden + i) = second(rng);
    return w;
}

}  // namespace airfeel
