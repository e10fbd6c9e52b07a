#pragma once

// Small feed-forward classifier used as the federated global model, plus the
// synthetic labelled data it is trained on.

#include "airfeel/common.hpp"

#include <vector>

namespace airfeel {

struct LabelledData {
    Eigen::MatrixXd features;  // one sample per row
    Eigen::VectorXi labels;

    Eigen::Index size() const { return features.rows(); }
};

struct SyntheticTaskConfig {
    int classes = 10;
    int features = 32;
    int train_samples = 4100;
    int test_samples = 2000;
    double class_separation = 0.5;
    std::uint64_t seed = 7;
};

struct SyntheticTask {
    LabelledData train;
    LabelledData test;
};

/// Gaussian class-conditional data: class means drawn once from
/// N(0, separation^2 I), samples = mean + N(0, I).
SyntheticTask make_synthetic_task(const SyntheticTaskConfig& cfg);

/// Anything local SGD can minimise: a loss over a minibatch of sample indices
/// and its gradient with respect to a flat parameter vector.
class Objective {
public:
    virtual ~Objective() = default;
    virtual Eigen::Index num_params() const = 0;
    virtual double loss_and_gradient(const RowVectorXd& w, const std::vector<int>& batch, RowVectorXd& grad) const = 0;
};

struct MlpShape {
    int inputs = 32;
    int hidden = 256;
    int classes = 10;

    Eigen::Index num_params() const {
        return Eigen::Index(hidden) * inputs + hidden + Eigen::Index(classes) * hidden + classes;
    }
};

/// One hidden ReLU layer, softmax cross-entropy. Parameters are packed as
/// [W1 (hidden x inputs, row-major), b1, W2 (classes x hidden, row-major), b2].
class MlpClassifier final : public Objective {
public:
    MlpClassifier(MlpShape shape, const LabelledData* data) : shape_(shape), data_(data) {}

    Eigen::Index num_params() const override { return shape_.num_params(); }
    double loss_and_gradient(const RowVectorXd& w, const std::vector<int>& batch, RowVectorXd& grad) const override;

    double loss(const RowVectorXd& w, const std::vector<int>& batch) const;
    double accuracy(const RowVectorXd& w, const LabelledData& data) const;
    RowVectorXd initial_params(std::uint64_t seed) const;

    const MlpShape& shape() const { return shape_; }

private:
    MlpShape shape_;
    const LabelledData* data_;
};

}  // namespace airfeel
