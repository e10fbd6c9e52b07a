// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [criterion ...]
//
// Criteria: oracles degenerate telescoping ka_mae snr_trend ablation range
// determinism. No arguments runs all of them. The learnt decoder and the
// fixed-codebook decoders come from the committed fixture weights.

#include "oracles.hpp"

#include "airfeel/harness.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace airfeel;
using namespace airfeel::oracle;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
    if (!ok) ++failures;
    std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string snr_label(double snr) { return fmt("%g dB", snr); }

// Shared state: one full simulation per (mode, SNR) point.
struct Runs {
    ExperimentConfig cfg;
    LoadedWeights learnt;
    std::map<std::pair<int, double>, std::vector<RoundRecord>> cache;
    std::map<std::pair<int, double>, double> runtime;
    std::optional<double> a_pa;

    Runs() : cfg(parse_config("{}")), learnt(load_weights(AIRFEEL_FIXTURE_DIR "/learnt.txt")) {}

    const std::vector<RoundRecord>& run(AggregationMode mode, double snr) {
        const auto key = std::make_pair(int(mode), mode == AggregationMode::pa ? 0.0 : snr);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        ExperimentConfig c = cfg;
        c.mode = mode;
        const auto t0 = Clock::now();
        auto recs = run_experiment(c.sim, make_receiver(c, snr, &learnt));
        runtime[key] = seconds_since(t0);
        std::fprintf(stderr, "  [%s %s] final accuracy %.4f in %.0f s\n", to_string(mode).c_str(),
                     snr_label(snr).c_str(), final_accuracy(recs, c.final_window), runtime[key]);
        return cache.emplace(key, std::move(recs)).first->second;
    }

    double accuracy(AggregationMode mode, double snr) { return final_accuracy(run(mode, snr), cfg.final_window); }
    double seconds(AggregationMode mode, double snr) {
        run(mode, snr);
        return runtime[std::make_pair(int(mode), mode == AggregationMode::pa ? 0.0 : snr)];
    }
    double pa() {
        if (!a_pa) a_pa = accuracy(AggregationMode::pa, 0.0);
        return *a_pa;
    }
};

void check_oracles() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    std::uniform_real_distribution<double> R(-2.0, 12.0), logs(-4.0, 1.5), lam(0.01, 8.0), tau(0.3, 3.0);
    SpikeSlabPosterior post;
    double post_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double r = R(rng), s = std::exp(logs(rng)), l = lam(rng), t = tau(rng);
        const int k_max = posterior_kmax(l * 3.0);
        const auto fast = post(r, s, l, t, k_max);
        const auto [mean, var] = truncated_sum_moments(r, s, l, t, k_max);
        post_err = std::max({post_err, std::abs(fast.mean - mean), std::abs(fast.var - var)});
    }

    std::normal_distribution<double> g;
    double cnn_err = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        const int kernel = 1 + 2 * (trial % 3);
        auto w = CnnWeights<double>::zeros(4 + trial % 5, kernel);
        for (Eigen::Index i = 0; i < w.w1.size(); ++i) w.w1.data()[i] = g(rng);
        for (Eigen::Index i = 0; i < w.b1.size(); ++i) w.b1(i) = g(rng);
        for (Eigen::Index i = 0; i < w.w2.size(); ++i) w.w2(i) = g(rng);
        w.b2 = g(rng);
        MatrixXd features(kFeatureChannels, 16 + trial);
        for (Eigen::Index i = 0; i < features.size(); ++i) features.data()[i] = g(rng);
        cnn_err = std::max(cnn_err, (cnn_forward(features, w) - naive_cnn(features, w)).cwiseAbs().maxCoeff());
    }

    int pp_ok = 0;
    const int pp_trials = 300;
    for (int trial = 0; trial < pp_trials; ++trial) {
        const Eigen::Index n = 2 + trial % 5;
        const auto C = random_codebook(n, n + 2, 100 + std::uint64_t(trial));
        CountVector x = CountVector::Zero(n);
        std::uniform_int_distribution<int> pick(0, int(n) - 1), k(1, 5);
        const int ka = k(rng);
        for (int i = 0; i < ka; ++i) x(pick(rng)) += 1;
        RowVectorXd y = x.cast<double>() * C.matrix();
        for (auto& v : y) v += 0.02 * g(rng);
        RowVectorXd soft = x.cast<double>();
        for (auto& v : soft) v += 0.2 * g(rng);
        PostprocessConfig pc;
        pc.support_size = n;
        pp_ok += postprocess(soft, double(ka) + 0.3, y, C, pc) == exhaustive_best(y, C, ka);
    }
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << "posterior max err " << post_err << " (1000 draws), cnn max err " << cnn_err << ", postprocess "
       << pp_ok << "/" << pp_trials << " match exhaustive search, " << fmt("%.1f s", secs);
    report(post_err <= 1e-12 && cnn_err <= 1e-10 && pp_ok == pp_trials && secs < 60.0, "oracle equivalence", os.str());
}

SimConfig degenerate_config() {
    SimConfig cfg;
    cfg.task.train_samples = 1400;
    cfg.task.test_samples = 400;
    cfg.task.features = 8;
    cfg.task.classes = 4;
    cfg.task.class_separation = 1.5;
    cfg.hidden = 16;
    cfg.devices = 8;
    cfg.ka_min = 2;
    cfg.ka_max = 4;
    cfg.rounds = 10;
    cfg.quant_size = 16;
    cfg.frag_len = 4;
    cfg.kmeans_iters = 30;
    cfg.threads = 1;
    return cfg;
}

void check_degenerate() {
    const auto t0 = Clock::now();
    const SimConfig cfg = degenerate_config();
    const Eigen::Index n = cfg.quant_size;
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / double(n));

    // Decoder alone on noiseless superpositions from the configured K_a range.
    Rng rng(99);
    int exact = 0, exact_single = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto C = orthonormal_codebook(n, 500 + std::uint64_t(trial));
        std::uniform_int_distribution<int> pick(0, int(n) - 1), k(cfg.ka_min, cfg.ka_max);
        CountVector x = CountVector::Zero(n);
        const int ka = k(rng);
        for (int i = 0; i < ka; ++i) x(pick(rng)) += 1;
        const auto y = transmit(x, C, ChannelConfig{std::numeric_limits<double>::infinity(), 1}).y;
        exact += decode(y, C, uniform, baseline_params<double>(10), 0.0).x == x;
        CountVector one = CountVector::Zero(n);
        one(pick(rng)) = 1;
        const auto y1 = transmit(one, C, ChannelConfig{std::numeric_limits<double>::infinity(), 1}).y;
        exact_single += decode(y1, C, uniform, baseline_params<double>(10), 0.0).x == one;
    }

    // Full pipeline against PA on the same seeds.
    Receiver rx;
    rx.mode = AggregationMode::baseline;
    rx.snr_db = std::numeric_limits<double>::infinity();
    rx.codebook = orthonormal_codebook(n, 3);
    rx.params = baseline_params<double>(10);
    rx.popularity_prior = false;
    FeelSimulator sim(cfg);
    SimState a = sim.initial_state(), b = sim.initial_state();
    double gap = 0.0, recovery = 0.0;
    for (int t = 0; t < cfg.rounds; ++t) {
        sim.run_round(a, Receiver{});
        const auto rec = sim.run_round(b, rx);
        recovery += rec.frag_recovery / cfg.rounds;
        gap = std::max(gap, (a.w - b.w).cwiseAbs().maxCoeff());
    }
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << "decoder exact " << exact << "/200 at K_a " << cfg.ka_min << "-" << cfg.ka_max << " (one-hot " << exact_single
       << "/200); pipeline mean fragment recovery " << recovery << ", max |w - w_PA| " << gap << " over "
       << cfg.rounds << " rounds, " << fmt("%.1f s", secs);
    report(exact == 200 && gap <= 1e-9 && secs < 300.0, "degenerate exactness", os.str());
}

void check_telescoping(Runs& runs) {
    SimConfig cfg = runs.cfg.sim;
    cfg.rounds = 20;
    FeelSimulator sim(cfg);
    SimState state = sim.initial_state();
    const Eigen::Index W = state.w.size();
    std::vector<RowVectorXd> sum_q(std::size_t(cfg.devices), RowVectorXd::Zero(W));
    std::vector<RowVectorXd> sum_dw = sum_q;
    std::vector<RowVectorXd> e0;
    for (const auto& acc : state.accumulators) e0.push_back(acc.e);
    ExperimentConfig c = runs.cfg;
    c.mode = AggregationMode::learnt;
    const Receiver rx = make_receiver(c, 5.0, &runs.learnt);
    for (int t = 0; t < cfg.rounds; ++t) {
        const auto rec = sim.run_round(state, rx, RecordOptions{false, true});
        for (const auto& u : rec.updates) {
            sum_q[std::size_t(u.device_id)] += u.transmitted;
            sum_dw[std::size_t(u.device_id)] += u.delta_w;
        }
    }
    double worst = 0.0;
    for (int k = 0; k < cfg.devices; ++k) {
        const RowVectorXd gap = sum_q[std::size_t(k)] - sum_dw[std::size_t(k)] - e0[std::size_t(k)] +
                                state.accumulators[std::size_t(k)].e;
        worst = std::max(worst, gap.cwiseAbs().maxCoeff());
    }
    report(worst <= 1e-9, "error-feedback telescoping",
           "max residual " + fmt("%.3g", worst) + " over " + std::to_string(cfg.devices) + " devices, 20 rounds");
}

void check_ka_mae(Runs& runs) {
    std::ostringstream os;
    bool ok = true;
    for (double snr : {5.0, 10.0, 20.0}) {
        const double mae = runs.run(AggregationMode::learnt, snr).back().ka_mae;
        ok = ok && mae <= 0.5;
        os << snr_label(snr) << " " << fmt("%.3f", mae) << "  ";
    }
    report(ok, "final-round K_a MAE (learnt, <= 0.5)", os.str());
}

void check_snr_trend(Runs& runs) {
    const double pa = runs.pa();
    const double b0 = runs.accuracy(AggregationMode::baseline, 0.0);
    const double l0 = runs.accuracy(AggregationMode::learnt, 0.0);
    std::ostringstream os;
    os << "A_PA " << fmt("%.4f", pa) << "; 0 dB baseline " << fmt("%.4f", b0) << " (need < "
       << fmt("%.4f", 0.5 * pa) << "), learnt " << fmt("%.4f", l0) << " (need >= " << fmt("%.4f", 0.85 * pa) << ")";
    bool ok = b0 < 0.5 * pa && l0 >= 0.85 * pa;
    double slowest = std::max(runs.seconds(AggregationMode::baseline, 0.0), runs.seconds(AggregationMode::learnt, 0.0));
    for (double snr : {10.0, 20.0}) {
        const double b = runs.accuracy(AggregationMode::baseline, snr);
        const double l = runs.accuracy(AggregationMode::learnt, snr);
        ok = ok && std::abs(b - pa) <= 0.02 && std::abs(l - pa) <= 0.02;
        slowest = std::max({slowest, runs.seconds(AggregationMode::baseline, snr),
                            runs.seconds(AggregationMode::learnt, snr)});
        os << "; " << snr_label(snr) << " baseline " << fmt("%.4f", b) << ", learnt " << fmt("%.4f", l);
    }
    os << " (within 0.02 of A_PA at >= 10 dB); slowest point " << fmt("%.0f s", slowest);
    report(ok && slowest < 1800.0, "accuracy versus SNR trend", os.str());
}

void check_ablation(Runs& runs) {
    ExperimentConfig cfg = runs.cfg;
    cfg.snr_db = {5.0};
    cfg.sim.threads = runs.cfg.sim.threads;
    CollectConfig cc = cfg.collect;
    cc.codeword_len = cfg.codeword_len;
    const auto t0 = Clock::now();
    const DatasetSplit split = collect_dataset(cfg.sim, cc);
    // Each fixed codebook brings its own tuned decoder scalars.
    std::vector<std::pair<std::string, LoadedWeights>> fixed;
    for (const char* scheme : {"gaussian", "bernoulli", "data_driven"}) {
        fixed.emplace_back(scheme, load_weights(std::string(AIRFEEL_FIXTURE_DIR) + "/" + scheme + ".txt"));
    }
    const auto rows = decode_bench(cfg, split.test, split.calibration, runs.learnt, fixed);
    double learnt = -1.0, best_fixed = -1.0;
    std::string best_name;
    std::ostringstream table;
    for (const auto& r : rows) {
        table << " " << r.codebook << (r.ordering ? "+ord" : "") << "=" << fmt("%.3f", r.recovery);
        if (r.learnt_codebook && r.ordering) learnt = r.recovery;
        if (!r.learnt_codebook && r.recovery > best_fixed) {
            best_fixed = r.recovery;
            best_name = r.codebook + (r.ordering ? "+ord" : "");
        }
    }
    std::ostringstream os;
    os << "5 dB recovery: learnt+ordering " << fmt("%.3f", learnt) << ", best fixed " << best_name << " "
       << fmt("%.3f", best_fixed) << ", margin " << fmt("%.3f", learnt - best_fixed) << " (need >= 0.1);"
       << table.str() << "; " << fmt("%.0f s", seconds_since(t0));
    report(learnt - best_fixed >= 0.1, "codebook and ordering ablation", os.str());
}

// Lowest SNR on the descending 5 dB grid down to which every point keeps
// final accuracy >= 0.95 A_PA; nullopt when the top point already fails.
std::optional<double> lowest_reliable(Runs& runs, AggregationMode mode, std::ostringstream& os) {
    const double need = 0.95 * runs.pa();
    std::optional<double> lowest;
    os << to_string(mode) << ":";
    for (double snr = 10.0; snr >= -30.0; snr -= 5.0) {
        const double acc = runs.accuracy(mode, snr);
        os << " " << fmt("%g", snr) << "->" << fmt("%.3f", acc);
        if (acc < need) break;
        lowest = snr;
    }
    os << "; ";
    return lowest;
}

void check_range(Runs& runs) {
    std::ostringstream os;
    os << "threshold " << fmt("%.4f", 0.95 * runs.pa()) << "; ";
    const auto b = lowest_reliable(runs, AggregationMode::baseline, os);
    const auto l = lowest_reliable(runs, AggregationMode::learnt, os);
    bool ok = false;
    if (b && l) {
        const double gap = *b - *l;
        ok = gap >= 5.0;
        os << "lowest reliable SNR baseline " << *b << " dB, learnt " << *l << " dB, measured gap " << gap << " dB";
    } else {
        os << "no reliable point for " << (b ? "learnt" : "baseline");
    }
    report(ok, "operating range extension (>= 5 dB)", os.str());
}

void check_determinism(Runs& runs) {
    ExperimentConfig c = runs.cfg;
    c.mode = AggregationMode::learnt;
    c.sim.rounds = 4;
    c.sim.threads = 1;
    const Receiver rx = make_receiver(c, 5.0, &runs.learnt);
    auto dump = [&]() {
        std::ostringstream os;
        std::vector<MetricsRow> rows;
        for (const auto& r : run_experiment(c.sim, rx)) {
            rows.push_back({5.0, r.round, r.test_acc, r.ka_mae, r.frag_recovery, r.sigma2_hat});
            os << r.ka << ' ' << format_double(r.ka_scale) << ' ' << format_double(r.support_f1) << '\n';
        }
        write_metrics_csv(os, rows);
        return os.str();
    };
    const std::string first = dump();
    const std::string second = dump();
    report(first == second, "determinism (fixed seed, 1 thread)",
           first == second ? "two runs produced identical records (" + std::to_string(first.size()) + " bytes)"
                           : "records differ between runs");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> all{"oracles", "ablation",    "degenerate", "telescoping",
                                       "ka_mae",  "determinism", "snr_trend",  "range"};
    std::set<std::string> wanted(argv + 1, argv + argc);
    if (wanted.empty()) wanted.insert(all.begin(), all.end());
    for (const auto& w : wanted) {
        if (std::find(all.begin(), all.end(), w) == all.end()) {
            std::cerr << "unknown criterion '" << w << "'\n";
            return 2;
        }
    }
    try {
        Runs runs;
        for (const auto& name : all) {
            if (!wanted.count(name)) continue;
            if (name == "oracles") check_oracles();
            if (name == "degenerate") check_degenerate();
            if (name == "telescoping") check_telescoping(runs);
            if (name == "ka_mae") check_ka_mae(runs);
            if (name == "snr_trend") check_snr_trend(runs);
            if (name == "ablation") check_ablation(runs);
            if (name == "range") check_range(runs);
            if (name == "determinism") check_determinism(runs);
        }
    } catch (const std::exception& e) {
        std::printf("FAIL acceptance run aborted: %s\n", e.what());
        return 1;
    }
    return failures == 0 ? 0 : 1;
}
