#pragma once

// Text file formats shared with the offline trainer: weight files, collected
// datasets, and the per-round metrics CSV.

#include "airfeel/decoder.hpp"
#include "airfeel/feel_sim.hpp"
#include "airfeel/ura_codebook.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace airfeel {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kWeightFileVersion = 1;
inline constexpr int kDatasetFileVersion = 1;

/// Everything the trainer exports: codebook factors and raw decoder
/// parameters. The decoder mode is always learnt.
struct WeightFile {
    int version = kWeightFileVersion;
    BaseMatrix<double> base;
    ShearMatrix<double> shear;
    DecoderParams<double> params;

    Eigen::Index n() const { return base.D.rows(); }
    Eigen::Index d() const { return base.D.cols(); }
};

struct LoadedWeights {
    WeightFile file;
    UraCodebook<double> codebook;  // synthesize(D, W)
};

void write_weights(std::ostream& os, const WeightFile& w);
void save_weights(const std::string& path, const WeightFile& w);
/// Parses and validates a whole file before returning; any problem throws
/// FormatError naming the offending field.
WeightFile read_weights(std::istream& is);
LoadedWeights load_weights(const std::string& path);

struct DatasetFile {
    int version = kDatasetFileVersion;
    Eigen::Index n = 0;
    Eigen::Index d = 0;
    int fragment_count = 0;
    std::vector<DatasetSample> samples;
};

void write_dataset(std::ostream& os, const DatasetFile& data);
void save_dataset(const std::string& path, const DatasetFile& data);
DatasetFile read_dataset(std::istream& is);
DatasetFile load_dataset(const std::string& path);

void save_matrix(const std::string& path, const MatrixXd& m);
MatrixXd load_matrix(const std::string& path);

/// Writes train.txt, validation.txt, test.txt and calibration.txt into dir.
void save_dataset_split(const std::string& dir, const DatasetSplit& split);

struct MetricsRow {
    double snr_db = 0.0;
    int round = 0;
    double test_acc = 0.0;
    double ka_mae = 0.0;
    double frag_recovery = 0.0;
    double sigma2_hat = 0.0;
};

extern const char* const kMetricsHeader;

MetricsRow metrics_row(double snr_db, const RoundRecord& rec);
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& is);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace airfeel
