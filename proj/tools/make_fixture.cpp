// Offline calibration of a weight file from a collected dataset: codebook
// shaping against the mean popularity profile, then coordinate search over
// the shared per-layer decoder scalars on the validation split.

#include "airfeel/harness.hpp"
#include "airfeel/parallel.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>

using namespace airfeel;

namespace {

struct Score {
    double recovery = 0.0;
    double f1 = 0.0;
    double l1 = 0.0;
    double ka_mae = 0.0;
    double value() const { return recovery + f1 - 0.5 * l1 - 0.5 * ka_mae; }
};

struct Trial {
    std::size_t sample;
    double snr;
    double ka0;
};

class Evaluator {
public:
    Evaluator(std::vector<DatasetSample> samples, std::vector<double> snrs, double floor, std::uint64_t seed)
        : samples_(std::move(samples)), snrs_(std::move(snrs)), floor_(floor), seed_(seed) {}

    Score operator()(const UraCodebook<double>& C, const DecoderParams<double>& params) const {
        const Eigen::Index n = C.n();
        std::vector<RowVectorXd> y;
        std::vector<Trial> trials;
        std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> groups;
        for (std::size_t s = 0; s < snrs_.size(); ++s) {
            for (std::size_t i = 0; i < samples_.size(); ++i) {
                const auto& smp = samples_[i];
                y.push_back(transmit(smp.x, C, ChannelConfig{snrs_[s], derive_seed(seed_, s, i)}).y);
                trials.push_back({i, snrs_[s], 0.0});
                groups[{smp.round, s}].push_back(trials.size() - 1);
            }
        }
        for (const auto& [key, idx] : groups) {
            std::vector<RowVectorXd> group;
            for (std::size_t t : idx) group.push_back(y[t]);
            const double k0 = round_ka_estimate(group, C, prior(samples_[trials[idx.front()].sample].pi, n), params,
                                                snrs_[key.second], 128, worker_threads());
            for (std::size_t t : idx) trials[t].ka0 = k0;
        }
        std::vector<Score> per(trials.size());
        parallel_for(trials.size(), worker_threads(), [&](std::size_t t) {
            const auto& smp = samples_[trials[t].sample];
            const double d = double(C.d());
            Score& sc = per[t];
            CountVector est = CountVector::Zero(n);
            double ka = 0.0;
            try {
                const auto r = decode(y[t], C, prior(smp.pi, n), params,
                                      trials[t].ka0 / d / std::pow(10.0, trials[t].snr / 10.0), trials[t].ka0);
                est = r.x;
                ka = r.ka;
            } catch (const DecoderDiverged&) {
            }
            long hit = 0, a = 0, b = 0;
            for (Eigen::Index i = 0; i < n; ++i) {
                a += smp.x(i) > 0;
                b += est(i) > 0;
                hit += smp.x(i) > 0 && est(i) > 0;
            }
            sc.recovery = est == smp.x;
            sc.f1 = a + b == 0 ? 1.0 : 2.0 * double(hit) / double(a + b);
            sc.l1 = double((est - smp.x).cwiseAbs().sum()) / double(smp.ka);
            sc.ka_mae = std::abs(ka - double(smp.ka));
        });
        Score total;
        for (const auto& s : per) {
            total.recovery += s.recovery;
            total.f1 += s.f1;
            total.l1 += s.l1;
            total.ka_mae += s.ka_mae;
        }
        const double m = double(per.size());
        total.recovery /= m;
        total.f1 /= m;
        total.l1 /= m;
        total.ka_mae /= m;
        return total;
    }

private:
    Eigen::VectorXd prior(const Eigen::VectorXd& pi, Eigen::Index n) const {
        return (1.0 - floor_) * pi.array() + floor_ / double(n);
    }

    std::vector<DatasetSample> samples_;
    std::vector<double> snrs_;
    double floor_;
    std::uint64_t seed_;
};

// Popularity-weighted coherence potential sum_{i != j} w_i w_j (c_i . c_j)^(2p),
// minimised by normalised gradient steps on the unit sphere.
MatrixXd shape_codebook(MatrixXd C, const Eigen::VectorXd& w, int power, int iters, double lr) {
    for (Eigen::Index i = 0; i < C.rows(); ++i) C.row(i).normalize();
    const MatrixXd ww = w * w.transpose();
    for (int it = 0; it < iters; ++it) {
        MatrixXd M = ww.cwiseProduct((C * C.transpose()).array().pow(2 * power - 1).matrix());
        M.diagonal().setZero();
        MatrixXd g = M * C;
        for (Eigen::Index i = 0; i < C.rows(); ++i) g.row(i) -= g.row(i).dot(C.row(i)) * C.row(i);
        const double gn = g.norm();
        if (gn < 1e-14) break;
        C -= lr * std::sqrt(double(C.rows())) * g / gn;
        for (Eigen::Index i = 0; i < C.rows(); ++i) C.row(i).normalize();
    }
    return C;
}

double coherence_potential(const MatrixXd& C, const Eigen::VectorXd& w, int power) {
    MatrixXd M = (w * w.transpose()).cwiseProduct((C * C.transpose()).array().pow(2 * power).matrix());
    M.diagonal().setZero();
    return M.sum();
}

using Setter = void (*)(LayerParams<double>&, double);

struct Knob {
    const char* name;
    Setter set;
    std::vector<double> grid;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Calibrate a decoder weight file from a collected dataset"};
    std::string config, dataset, out, codebook = "learnt";
    std::vector<double> snrs{-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0};
    int samples = 200, sweeps = 2, shape_iters = 1000, shape_power = 2;
    double shape_floor = 1.0, shape_lr = 0.05;
    std::uint64_t seed = 11;
    app.add_option("--config", config, "JSON experiment config");
    app.add_option("--dataset", dataset, "dataset directory (collected when missing)")->required();
    app.add_option("--out", out, "weight file to write")->required();
    app.add_option("--codebook", codebook, "learnt, gaussian, bernoulli or data_driven")
        ->check(CLI::IsMember({"learnt", "gaussian", "bernoulli", "data_driven"}));
    app.add_option("--snr", snrs, "tuning SNRs in dB")->delimiter(',');
    app.add_option("--samples", samples, "validation samples per SNR");
    app.add_option("--sweeps", sweeps, "coordinate-search sweeps");
    app.add_option("--shape-iters", shape_iters, "codebook shaping iterations");
    app.add_option("--shape-power", shape_power, "coherence exponent p in the shaping potential");
    app.add_option("--shape-floor", shape_floor, "uniform weight added to the popularity profile, in units of 1/n");
    app.add_option("--shape-lr", shape_lr, "codebook shaping step");
    app.add_option("--seed", seed, "tuning seed");
    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = config.empty() ? ExperimentConfig{} : load_config(config);
        const Eigen::Index n = cfg.sim.quant_size, d = cfg.codeword_len;
        if (!std::filesystem::exists(std::filesystem::path(dataset) / "validation.txt")) {
            std::cerr << "collecting dataset into " << dataset << '\n';
            save_dataset_split(dataset, collect_dataset(cfg.sim, cfg.collect));
        }
        const DatasetFile train = load_dataset((std::filesystem::path(dataset) / "train.txt").string());
        DatasetFile val = load_dataset((std::filesystem::path(dataset) / "validation.txt").string());
        const MatrixXd calib = load_matrix((std::filesystem::path(dataset) / "calibration.txt").string());
        require(train.n == n && val.n == n, "dataset n differs from config n");
        if (val.samples.size() > std::size_t(samples)) {
            Rng rng(derive_seed(seed, 0x5A));
            std::shuffle(val.samples.begin(), val.samples.end(), rng);
            val.samples.resize(std::size_t(samples));
        }

        WeightFile wf;
        std::vector<RowVectorXd> rows;
        for (Eigen::Index r = 0; r < calib.rows(); ++r) rows.push_back(calib.row(r));
        const InitScheme scheme = codebook == "learnt" ? InitScheme::gaussian : parse_init_scheme(codebook);
        wf.base = init_base<double>(n, d, scheme, cfg.decoder.codebook_seed, rows);
        wf.shear = ShearMatrix<double>::identity(d);
        if (codebook == "learnt") {
            Eigen::VectorXd pop = Eigen::VectorXd::Zero(n);
            for (const auto& s : train.samples) pop += s.pi;
            pop /= double(train.samples.size());
            const Eigen::VectorXd w = pop.array() + shape_floor / double(n);
            const double before = coherence_potential(synthesize(wf.base, wf.shear).matrix(), w, shape_power);
            wf.base.D = shape_codebook(wf.base.D, w, shape_power, shape_iters, shape_lr);
            std::cerr << "coherence potential " << before << " -> "
                      << coherence_potential(synthesize(wf.base, wf.shear).matrix(), w, shape_power) << '\n';
        }
        const UraCodebook<double> C = synthesize(wf.base, wf.shear);

        wf.params = baseline_params<double>(cfg.decoder.layers);
        wf.params.mode = DecoderMode::learnt;
        const Evaluator eval(val.samples, snrs, cfg.decoder.prior_floor, seed);

        const std::vector<Knob> knobs{
            {"eta", [](LayerParams<double>& l, double v) { l.eta_raw = logit(v); }, {0.1, 0.3, 0.5, 0.7}},
            {"gamma", [](LayerParams<double>& l, double v) { l.gamma_raw = gamma_to_raw(v); }, {0.6, 0.8, 1.0, 1.3, 1.6}},
            {"alpha", [](LayerParams<double>& l, double v) { l.alpha_raw = inverse_softplus(v); }, {0.5, 1.0, 2.0}},
            {"tau", [](LayerParams<double>& l, double v) { l.tau_raw = inverse_softplus(v); }, {0.5, 1.0, 2.0}},
            {"rho", [](LayerParams<double>& l, double v) { l.rho_raw = v > 0 ? logit(v) : -40.0; }, {0.0, 0.1, 0.3}},
            {"step_ka", [](LayerParams<double>& l, double v) { l.step_ka_raw = logit(v); }, {0.0, 0.002, 0.01, 0.05, 0.2}},
            {"step_pi", [](LayerParams<double>& l, double v) { l.step_pi_raw = logit(v); }, {0.01, 0.05, 0.2, 0.5}},
            {"step_sigma", [](LayerParams<double>& l, double v) { l.step_sigma_raw = logit(v); }, {0.02, 0.1, 0.5}},
        };
        for (auto& l : wf.params.layers) {
            l.rho_raw = -40.0;
            l.step_ka_raw = logit(0.0);
        }
        Score best = eval(C, wf.params);
        std::cerr << "start score " << best.value() << " rec " << best.recovery << " f1 " << best.f1 << '\n';
        for (int sweep = 0; sweep < sweeps; ++sweep) {
            for (const Knob& k : knobs) {
                for (double v : k.grid) {
                    DecoderParams<double> cand = wf.params;
                    for (auto& l : cand.layers) k.set(l, v);
                    const Score s = eval(C, cand);
                    if (s.value() > best.value() + 1e-9) {
                        best = s;
                        wf.params = cand;
                        std::cerr << "sweep " << sweep << ' ' << k.name << '=' << v << " score " << s.value()
                                  << " rec " << s.recovery << " f1 " << s.f1 << " l1 " << s.l1 << " ka_mae "
                                  << s.ka_mae << '\n';
                    }
                }
            }
        }
        save_weights(out, wf);
        std::cout << "wrote " << out << " score " << best.value() << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
