#pragma once

// Federated edge learning loop: partitioning, local SGD, error-feedback VQ,
// per-fragment over-the-air transmission and decoding, global update.

#include "airfeel/channel.hpp"
#include "airfeel/decoder.hpp"
#include "airfeel/model.hpp"
#include "airfeel/quantizer.hpp"
#include "airfeel/ura_codebook.hpp"

#include <optional>
#include <string>
#include <vector>

namespace airfeel {

struct DeviceShard {
    int device_id = 0;
    std::vector<int> indices;  // rows of the shared training set

    std::size_t size() const { return indices.size(); }
};

/// Splits data into `shards` equal shards of B = floor(N / shards) samples.
/// A random iid_fraction of each shard is drawn uniformly; the rest comes from
/// the label-sorted remainder, cut into contiguous blocks dealt in device
/// order. The N mod shards tail of a random permutation is dropped.
std::vector<DeviceShard> partition_dataset(const LabelledData& data, int shards, double iid_fraction,
                                           std::uint64_t seed);

/// E minibatch SGD steps from w on the shard; returns w_E - w.
/// Minibatches walk a per-call shuffled order of the shard, reshuffling
/// after every pass.
RowVectorXd local_train(const Objective& objective, const RowVectorXd& w, const DeviceShard& shard, int steps,
                        double lr, int batch_size, std::uint64_t seed);

/// Solves K (1 + 10^(-snr/10)) + K (K - 1) c = E for K >= 1, the mean of
/// ||x C + w||^2 when K devices pick codewords i.i.d. with sum_i pi_i^2 = c
/// and unit-norm codewords are nearly orthogonal.
double energy_ka_estimate(double mean_energy, double snr_db, double collision);

/// Range of K_a consistent with a mean received energy: no collisions gives
/// the upper end, all devices on one codeword the lower.
struct KaBounds {
    double lo = 1.0;
    double hi = 1.0;
};
KaBounds energy_ka_bounds(double mean_energy, double snr_db);

/// Shared integer K_a for all fragments of one round. Starts from the mean
/// count of un-learnt probe decodes on up to `probes` evenly spaced
/// fragments, then descends on the probe residual ||y - xC||^2 plus
/// 2 K_a sigma^2(K_a), decoding with `params` at fixed K_a. The result
/// stays within energy_ka_bounds rounded outwards.
double round_ka_estimate(const std::vector<RowVectorXd>& y, const UraCodebook<double>& codebook,
                         const Eigen::VectorXd& prior, const DecoderParams<double>& params, double snr_db,
                         int probes = 128, int threads = 1);

enum class AggregationMode { pa, baseline, learnt };
enum class QuantizerKind { vq, exact };

std::string to_string(AggregationMode m);
AggregationMode parse_aggregation_mode(const std::string& s);
std::string to_string(QuantizerKind q);
QuantizerKind parse_quantizer_kind(const std::string& s);

struct SimConfig {
    SyntheticTaskConfig task;
    int hidden = 1024;
    int devices = 40;
    int rounds = 150;
    int ka_min = 7;
    int ka_max = 13;
    double iid_fraction = 0.2;
    int local_steps = 5;
    double local_lr = 0.05;
    int batch_size = 20;
    double global_lr = 1.0;
    Eigen::Index quant_size = 256;  // n
    Eigen::Index frag_len = 20;
    QuantizerKind quantizer = QuantizerKind::vq;
    int kmeans_iters = 100;
    std::uint64_t seed = 1;
    int threads = 0;  // 0: worker_threads()
};

/// What sits behind the channel. PA passes activity vectors through; the
/// other modes transmit every fragment over the URA channel and decode it.
/// Every fragment of a round carries the same K_a, so the decoder's initial
/// K_a is the round_ka_estimate over all fragments, and
/// sigma_0^2 = (K_a0 / d) / snr.
struct Receiver {
    AggregationMode mode = AggregationMode::pa;
    double snr_db = 20.0;
    UraCodebook<double> codebook;
    DecoderParams<double> params;
    bool popularity_prior = true;  // false: uniform decoder prior
    double prior_floor = 0.05;     // prior = (1 - floor) pi + floor / n
    int ka_probes = 128;
};

struct DeviceUpdate {
    int device_id = 0;
    RowVectorXd delta_w;
    RowVectorXd transmitted;
};

struct RoundRecord {
    int round = 0;
    int ka = 0;
    std::vector<int> active;
    Eigen::VectorXd pi;
    QuantCodebook<double> codebook;
    std::uint64_t channel_seed = 0;
    int fragments = 0;
    double frag_recovery = 1.0;
    double support_f1 = 1.0;
    double ka_mae = 0.0;      // mean over fragments of |unrounded K_a_hat - K_a|
    double ka_scale = 0.0;    // K_a_hat used in the 1 / K_a_hat aggregation
    double sigma2_hat = 0.0;  // mean decoder sigma^2 estimate
    double test_acc = 0.0;
    bool failed = false;
    std::string failure;
    std::vector<CountVector> activity;  // per fragment, when requested
    std::vector<DeviceUpdate> updates;  // per active device, when requested
};

struct RecordOptions {
    bool activity = false;
    bool updates = false;
};

struct SimState {
    RowVectorXd w;
    std::vector<ErrorAccumulator<double>> accumulators;
    // The BS quantises its own update with error feedback too, so the
    // fragments it clusters look like the devices' fragments.
    ErrorAccumulator<double> bs_accumulator;
    int round = 0;
};

class FeelSimulator {
public:
    explicit FeelSimulator(SimConfig cfg);

    const SimConfig& config() const { return cfg_; }
    const SyntheticTask& task() const { return task_; }
    const std::vector<DeviceShard>& shards() const { return shards_; }
    const DeviceShard& bs_shard() const { return shards_.back(); }
    Eigen::Index num_params() const { return train_model_.num_params(); }
    const MlpClassifier& model() const { return train_model_; }

    SimState initial_state() const;
    double test_accuracy(const RowVectorXd& w) const;

    /// One communication round; advances state.round. A decoder divergence
    /// marks the record failed and leaves state.w unchanged.
    RoundRecord run_round(SimState& state, const Receiver& receiver, const RecordOptions& opts = {}) const;

private:
    int threads() const;

    SimConfig cfg_;
    SyntheticTask task_;
    std::vector<DeviceShard> shards_;  // devices, then the BS
    MlpClassifier train_model_;
};

/// T rounds from the initial state at one receiver setting.
std::vector<RoundRecord> run_experiment(const SimConfig& cfg, const Receiver& receiver,
                                        const RecordOptions& opts = {});

struct DatasetSample {
    int round = 0;
    int ka = 0;
    Eigen::VectorXd pi;
    CountVector x;
};

struct DatasetSplit {
    Eigen::Index n = 0;
    Eigen::Index d = 0;
    int fragment_count = 0;
    std::vector<DatasetSample> train;
    std::vector<DatasetSample> validation;
    std::vector<DatasetSample> test;
    MatrixXd calibration;  // length-d chunks of PA aggregates, for data-driven init
};

struct CollectConfig {
    int samples_per_round = 100;  // fragment positions sampled per round; <= 0 keeps all
    double validation_fraction = 0.1;
    double test_fraction = 0.2;
    Eigen::Index codeword_len = 64;
    int calibration_rows = 1024;
};

/// PA run that records (round, K_a, pi, x) per sampled fragment and splits by
/// round into train / validation / test.
DatasetSplit collect_dataset(const SimConfig& cfg, const CollectConfig& collect);

}  // namespace airfeel
