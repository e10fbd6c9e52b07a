#include "airfeel/io.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace airfeel {

namespace {

// Whitespace-separated tokens with line numbers for error messages.
class TokenReader {
public:
    TokenReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

    bool next(std::string& tok) {
        while (true) {
            if (pos_ < line_.size()) {
                const auto start = line_.find_first_not_of(" \t\r", pos_);
                if (start != std::string::npos) {
                    auto end = line_.find_first_of(" \t\r", start);
                    if (end == std::string::npos) end = line_.size();
                    tok = line_.substr(start, end - start);
                    pos_ = end;
                    return true;
                }
            }
            if (!std::getline(is_, line_)) return false;
            ++line_no_;
            pos_ = 0;
            const auto hash = line_.find('#');
            if (hash != std::string::npos) line_.erase(hash);
        }
    }

    std::string take(const std::string& field) {
        std::string tok;
        if (!next(tok)) fail("truncated file: missing " + field);
        return tok;
    }

    // Expects a literal key; a number in its place means the previous
    // section carried more entries than it declared.
    void key(const std::string& expected, const std::string& previous = "") {
        const std::string tok = take("'" + expected + "'");
        if (tok == expected) return;
        double unused;
        if (!previous.empty() && parse(tok, unused)) {
            fail("shape mismatch: " + previous + " has more entries than declared");
        }
        fail("expected '" + expected + "', got '" + tok + "'");
    }

    long integer(const std::string& field) {
        const std::string tok = take(field);
        long v = 0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
            fail(field + ": expected an integer, got '" + tok + "'");
        }
        return v;
    }

    double real(const std::string& field, bool allow_inf = false) {
        const std::string tok = take(field);
        double v = 0.0;
        if (!parse(tok, v)) fail(field + ": expected a number, got '" + tok + "'");
        if (std::isnan(v) || (!allow_inf && std::isinf(v))) fail("non-finite entry in " + field);
        return v;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(what_ + ": " + msg + " (line " + std::to_string(line_no_) + ")");
    }

    static bool parse(const std::string& tok, double& v) {
        // strtod accepts inf/nan spellings, which the finiteness check reports.
        char* end = nullptr;
        v = std::strtod(tok.c_str(), &end);
        return !tok.empty() && end == tok.c_str() + tok.size();
    }

private:
    std::istream& is_;
    std::string what_;
    std::string line_;
    std::size_t pos_ = 0;
    long line_no_ = 0;
};

void write_row(std::ostream& os, const double* data, Eigen::Index count) {
    for (Eigen::Index j = 0; j < count; ++j) os << (j ? " " : "") << format_double(data[j]);
    os << '\n';
}

void write_matrix(std::ostream& os, const std::string& name, const MatrixXd& m) {
    os << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) write_row(os, m.row(i).data(), m.cols());
}

MatrixXd read_matrix(TokenReader& in, const std::string& name, Eigen::Index rows, Eigen::Index cols,
                     const std::string& row_field, const std::string& col_field) {
    const long r = in.integer(name + " rows");
    const long c = in.integer(name + " cols");
    if (r != rows) {
        in.fail("shape mismatch: " + name + " declares " + std::to_string(r) + " rows but " + row_field + " = " +
                std::to_string(rows));
    }
    if (c != cols) {
        in.fail("shape mismatch: " + name + " declares " + std::to_string(c) + " cols but " + col_field + " = " +
                std::to_string(cols));
    }
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = in.real(name);
    return m;
}

RowVectorXd read_vector(TokenReader& in, const std::string& name, Eigen::Index len, const std::string& len_field) {
    const long l = in.integer(name + " length");
    if (l != len) {
        in.fail("shape mismatch: " + name + " declares " + std::to_string(l) + " entries but " + len_field + " = " +
                std::to_string(len));
    }
    RowVectorXd v(len);
    for (Eigen::Index i = 0; i < len; ++i) v(i) = in.real(name);
    return v;
}

const char* const kLayerScalars[] = {"gamma_raw", "eta_raw",     "alpha_raw",   "tau_raw",
                                     "rho_raw",   "step_ka_raw", "step_pi_raw", "step_sigma_raw"};

double* layer_scalar(LayerParams<double>& p, int i) {
    double* fields[] = {&p.gamma_raw, &p.eta_raw,     &p.alpha_raw,   &p.tau_raw,
                        &p.rho_raw,   &p.step_ka_raw, &p.step_pi_raw, &p.step_sigma_raw};
    return fields[i];
}

std::ofstream open_out(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream os(path);
    if (!os) throw FormatError(path + ": cannot open for writing");
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open for reading");
    return is;
}

// Writes to a temporary sibling and renames, so readers never see a partial file.
template <typename WriteFn>
void write_atomically(const std::string& path, WriteFn&& fn) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os = open_out(tmp);
        fn(os);
        os.flush();
        if (!os) throw FormatError(path + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_weights(std::ostream& os, const WeightFile& w) {
    const auto& layers = w.params.layers;
    const CnnWeights<double> shape = layers.empty() ? CnnWeights<double>::zeros() : layers.front().cnn;
    os << "airfeel-weights\n";
    os << "version " << w.version << '\n';
    os << "n " << w.n() << '\n';
    os << "d " << w.d() << '\n';
    os << "T_layers " << layers.size() << '\n';
    os << "init_scheme " << to_string(w.base.scheme) << '\n';
    os << "cnn " << kFeatureChannels << ' ' << shape.filters() << " 1 " << shape.kernel << '\n';
    os << "kmax_floor " << w.params.kmax_floor << '\n';
    os << "support_size " << w.params.postproc.support_size << '\n';
    os << "refit_iters " << w.params.postproc.refit_iters << '\n';
    write_matrix(os, "D", w.base.D);
    write_matrix(os, "W", w.shear.W);
    for (std::size_t t = 0; t < layers.size(); ++t) {
        LayerParams<double> p = layers[t];
        os << "layer " << t << '\n';
        for (int i = 0; i < 8; ++i) os << kLayerScalars[i] << ' ' << format_double(*layer_scalar(p, i)) << '\n';
        write_matrix(os, "cnn_w1", p.cnn.w1);
        os << "cnn_b1 " << p.cnn.b1.size() << '\n';
        write_row(os, p.cnn.b1.data(), p.cnn.b1.size());
        os << "cnn_w2 " << p.cnn.w2.size() << '\n';
        write_row(os, p.cnn.w2.data(), p.cnn.w2.size());
        os << "cnn_b2 " << format_double(p.cnn.b2) << '\n';
    }
    os << "end\n";
}

void save_weights(const std::string& path, const WeightFile& w) {
    write_atomically(path, [&](std::ostream& os) { write_weights(os, w); });
}

WeightFile read_weights(std::istream& is) {
    TokenReader in(is, "weight file");
    in.key("airfeel-weights");
    WeightFile w;
    in.key("version");
    w.version = static_cast<int>(in.integer("version"));
    if (w.version != kWeightFileVersion) {
        in.fail("version mismatch: expected " + std::to_string(kWeightFileVersion) + ", got " +
                std::to_string(w.version));
    }
    in.key("n");
    const long n = in.integer("n");
    in.key("d");
    const long d = in.integer("d");
    in.key("T_layers");
    const long layers = in.integer("T_layers");
    if (n < 1 || d < 1) in.fail("n and d must be positive");
    if (layers < 1) in.fail("T_layers must be at least 1");
    in.key("init_scheme");
    const std::string scheme = in.take("init_scheme");
    try {
        w.base.scheme = parse_init_scheme(scheme);
    } catch (const InvalidArgument&) {
        in.fail("init_scheme: unknown value '" + scheme + "'");
    }
    in.key("cnn");
    const long cin = in.integer("cnn input channels");
    const long filters = in.integer("cnn filters");
    const long cout = in.integer("cnn output channels");
    const long kernel = in.integer("cnn kernel");
    if (cin != kFeatureChannels) in.fail("shape mismatch: cnn input channels must be 6");
    if (cout != 1) in.fail("shape mismatch: cnn output channels must be 1");
    if (filters < 1 || kernel < 1 || kernel % 2 == 0) in.fail("cnn filters must be positive and kernel odd");
    in.key("kmax_floor");
    w.params.kmax_floor = static_cast<int>(in.integer("kmax_floor"));
    in.key("support_size");
    w.params.postproc.support_size = in.integer("support_size");
    in.key("refit_iters");
    w.params.postproc.refit_iters = static_cast<int>(in.integer("refit_iters"));
    if (w.params.kmax_floor < 1 || w.params.postproc.support_size < 0 || w.params.postproc.refit_iters < 0) {
        in.fail("kmax_floor, support_size and refit_iters must be non-negative");
    }

    in.key("D");
    w.base.D = read_matrix(in, "D", n, d, "header n", "header d");
    in.key("W", "D");
    w.shear.W = read_matrix(in, "W", d, d, "header d", "header d");

    w.params.mode = DecoderMode::learnt;
    std::string previous = "W";
    for (long t = 0; t < layers; ++t) {
        const std::string tag = "layer " + std::to_string(t);
        in.key("layer", previous);
        if (in.integer("layer index") != t) in.fail("layers out of order at " + tag);
        LayerParams<double> p;
        for (int i = 0; i < 8; ++i) {
            in.key(kLayerScalars[i]);
            // rho and the EM steps are sigmoid-mapped and may sit at +-inf.
            *layer_scalar(p, i) = in.real(tag + " " + kLayerScalars[i], i >= 4);
        }
        in.key("cnn_w1");
        p.cnn.kernel = static_cast<int>(kernel);
        p.cnn.w1 = read_matrix(in, tag + " cnn_w1", filters, cin * kernel, "header cnn filters",
                               "6 x header cnn kernel");
        in.key("cnn_b1", tag + " cnn_w1");
        p.cnn.b1 = read_vector(in, tag + " cnn_b1", filters, "header cnn filters");
        in.key("cnn_w2", tag + " cnn_b1");
        p.cnn.w2 = read_vector(in, tag + " cnn_w2", filters * kernel, "header cnn filters x kernel");
        in.key("cnn_b2", tag + " cnn_w2");
        p.cnn.b2 = in.real(tag + " cnn_b2");
        w.params.layers.push_back(std::move(p));
        previous = tag + " cnn_b2";
    }
    in.key("end", previous);
    std::string extra;
    if (in.next(extra)) in.fail("unexpected content after 'end': '" + extra + "'");
    return w;
}

LoadedWeights load_weights(const std::string& path) {
    std::ifstream is = open_in(path);
    LoadedWeights out;
    try {
        out.file = read_weights(is);
        out.codebook = synthesize(out.file.base, out.file.shear);
    } catch (const InvalidArgument& e) {
        throw FormatError(path + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
    return out;
}

void write_dataset(std::ostream& os, const DatasetFile& data) {
    os << "airfeel-dataset\n";
    os << "version " << data.version << '\n';
    os << "n " << data.n << '\n';
    os << "d " << data.d << '\n';
    os << "fragment_count " << data.fragment_count << '\n';
    os << "samples " << data.samples.size() << '\n';
    os << "# round K_a pi[0..n) x[0..n)\n";
    for (const auto& s : data.samples) {
        require(s.pi.size() == data.n && s.x.size() == data.n, "sample length must equal n");
        os << s.round << ' ' << s.ka;
        for (Eigen::Index i = 0; i < data.n; ++i) os << ' ' << format_double(s.pi(i));
        for (Eigen::Index i = 0; i < data.n; ++i) os << ' ' << s.x(i);
        os << '\n';
    }
}

void save_dataset(const std::string& path, const DatasetFile& data) {
    write_atomically(path, [&](std::ostream& os) { write_dataset(os, data); });
}

DatasetFile read_dataset(std::istream& is) {
    TokenReader in(is, "dataset file");
    in.key("airfeel-dataset");
    DatasetFile data;
    in.key("version");
    data.version = static_cast<int>(in.integer("version"));
    if (data.version != kDatasetFileVersion) {
        in.fail("version mismatch: expected " + std::to_string(kDatasetFileVersion) + ", got " +
                std::to_string(data.version));
    }
    in.key("n");
    data.n = in.integer("n");
    in.key("d");
    data.d = in.integer("d");
    in.key("fragment_count");
    data.fragment_count = static_cast<int>(in.integer("fragment_count"));
    in.key("samples");
    const long count = in.integer("samples");
    if (data.n < 1 || data.d < 1 || count < 0) in.fail("n, d must be positive and samples non-negative");
    data.samples.reserve(static_cast<std::size_t>(count));
    for (long k = 0; k < count; ++k) {
        DatasetSample s;
        s.round = static_cast<int>(in.integer("round"));
        s.ka = static_cast<int>(in.integer("K_a"));
        s.pi.resize(data.n);
        s.x.resize(data.n);
        for (Eigen::Index i = 0; i < data.n; ++i) s.pi(i) = in.real("pi");
        for (Eigen::Index i = 0; i < data.n; ++i) s.x(i) = static_cast<int>(in.integer("x"));
        if (s.x.sum() != s.ka) in.fail("sample " + std::to_string(k) + ": sum of x differs from K_a");
        data.samples.push_back(std::move(s));
    }
    std::string extra;
    if (in.next(extra)) in.fail("shape mismatch: more samples than the declared " + std::to_string(count));
    return data;
}

DatasetFile load_dataset(const std::string& path) {
    std::ifstream is = open_in(path);
    try {
        return read_dataset(is);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

void save_matrix(const std::string& path, const MatrixXd& m) {
    write_atomically(path, [&](std::ostream& os) { write_matrix(os, "matrix", m); });
}

MatrixXd load_matrix(const std::string& path) {
    std::ifstream is = open_in(path);
    TokenReader in(is, path);
    in.key("matrix");
    const long r = in.integer("rows");
    const long c = in.integer("cols");
    if (r < 0 || c < 0) in.fail("negative matrix shape");
    MatrixXd m(r, c);
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) m(i, j) = in.real("matrix");
    return m;
}

void save_dataset_split(const std::string& dir, const DatasetSplit& split) {
    std::filesystem::create_directories(dir);
    const std::pair<const char*, const std::vector<DatasetSample>*> parts[] = {
        {"train.txt", &split.train}, {"validation.txt", &split.validation}, {"test.txt", &split.test}};
    for (const auto& [name, samples] : parts) {
        DatasetFile f;
        f.n = split.n;
        f.d = split.d;
        f.fragment_count = split.fragment_count;
        f.samples = *samples;
        save_dataset((std::filesystem::path(dir) / name).string(), f);
    }
    save_matrix((std::filesystem::path(dir) / "calibration.txt").string(), split.calibration);
}

const char* const kMetricsHeader =
    "snr_db[dB],round[count],test_acc[ratio],ka_mae[count],frag_recovery[ratio],sigma2_hat[power]";

MetricsRow metrics_row(double snr_db, const RoundRecord& rec) {
    return MetricsRow{snr_db, rec.round, rec.test_acc, rec.ka_mae, rec.frag_recovery, rec.sigma2_hat};
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        os << format_double(r.snr_db) << ',' << r.round << ',' << format_double(r.test_acc) << ','
           << format_double(r.ka_mae) << ',' << format_double(r.frag_recovery) << ',' << format_double(r.sigma2_hat)
           << '\n';
    }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kMetricsHeader) throw FormatError("metrics csv: unexpected header");
    std::vector<MetricsRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell[6];
        for (auto& c : cell) {
            if (!std::getline(ss, c, ',')) throw FormatError("metrics csv: short row '" + line + "'");
        }
        MetricsRow r;
        r.snr_db = std::stod(cell[0]);
        r.round = std::stoi(cell[1]);
        r.test_acc = std::stod(cell[2]);
        r.ka_mae = std::stod(cell[3]);
        r.frag_recovery = std::stod(cell[4]);
        r.sigma2_hat = std::stod(cell[5]);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace airfeel
