#pragma once

// Experiment configuration, sweeps and the command-line front end.

#include "airfeel/feel_sim.hpp"
#include "airfeel/io.hpp"

#include <optional>
#include <string>
#include <vector>

namespace airfeel {

struct DecoderSetup {
    int layers = 10;                               // baseline depth
    InitScheme baseline_codebook = InitScheme::gaussian;
    std::uint64_t codebook_seed = 1;
    std::optional<bool> popularity_prior;          // default: on for learnt, off for baseline
    double prior_floor = 0.05;
};

struct BenchSetup {
    int trials = 500;                              // samples drawn from the test split
    int codebook_seed = 1;
    // Weight files for the fixed-codebook rows, keyed by init scheme name;
    // rows without one reuse the learnt decoder scalars on the fixed codebook.
    std::vector<std::pair<std::string, std::string>> fixed_weights;
};

struct ExperimentPaths {
    std::string weights;
    std::string dataset;
    std::string output = "out";
};

struct ExperimentConfig {
    std::vector<double> snr_db{0.0, 10.0, 20.0};
    AggregationMode mode = AggregationMode::pa;
    SimConfig sim;
    Eigen::Index codeword_len = 64;  // d of the URA codebook
    DecoderSetup decoder;
    CollectConfig collect;
    BenchSetup bench;
    ExperimentPaths paths;
    int final_window = 10;  // rounds averaged into the reported final accuracy

    void validate() const;
};

/// Parses JSON text; unknown fields and invalid values throw InvalidArgument
/// naming the field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

/// Builds the receiver for one SNR point. Learnt mode needs loaded weights.
Receiver make_receiver(const ExperimentConfig& cfg, double snr_db, const LoadedWeights* weights);

/// Mean test accuracy over the last `window` rounds.
double final_accuracy(const std::vector<RoundRecord>& records, int window);

struct BenchRow {
    std::string codebook;  // learnt, gaussian, bernoulli, data_driven_pinv
    bool learnt_codebook = false;
    bool ordering = false;
    double snr_db = 0.0;
    double recovery = 0.0;  // exact count-vector match rate
    double support_f1 = 0.0;
    double ka_mae = 0.0;
    int trials = 0;
};

/// Decoder-only ablation over {learnt, fixed gaussian / bernoulli /
/// data-driven} x {ordering on, off} on test-split samples.
std::vector<BenchRow> decode_bench(const ExperimentConfig& cfg, const std::vector<DatasetSample>& samples,
                                   const MatrixXd& calibration, const LoadedWeights& learnt,
                                   const std::vector<std::pair<std::string, LoadedWeights>>& fixed);

/// Entry point for the airfeel binary; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace airfeel
