#include "airfeel/harness.hpp"

#include "airfeel/parallel.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace airfeel {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw InvalidArgument("config field '" + where + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!ok.count(it.key())) {
            throw InvalidArgument("unknown config field '" + (where.empty() ? "" : where + ".") + it.key() + "'");
        }
    }
}

template <typename T>
void get(const json& obj, const char* key, const std::string& where, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidArgument("config field '" + (where.empty() ? "" : where + ".") + key + "' has the wrong type");
    }
}

void field_check(bool ok, const std::string& field, const std::string& rule) {
    if (!ok) throw InvalidArgument("config field '" + field + "' " + rule);
}

std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream os(path);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os << text;
}

double support_f1(const CountVector& truth, const CountVector& est) {
    long hit = 0, t = 0, e = 0;
    for (Eigen::Index i = 0; i < truth.size(); ++i) {
        t += truth(i) > 0;
        e += est(i) > 0;
        hit += truth(i) > 0 && est(i) > 0;
    }
    return t + e == 0 ? 1.0 : 2.0 * double(hit) / double(t + e);
}

}  // namespace

void ExperimentConfig::validate() const {
    field_check(!snr_db.empty(), "snr_db", "must list at least one SNR");
    for (double s : snr_db) field_check(!std::isnan(s), "snr_db", "must not contain NaN");
    field_check(sim.rounds >= 1, "rounds", "must be >= 1");
    field_check(sim.devices >= 1, "devices", "must be >= 1");
    field_check(sim.ka_min >= 1 && sim.ka_min <= sim.ka_max, "ka_range", "must satisfy 1 <= min <= max");
    field_check(sim.ka_max <= sim.devices, "ka_range", "max must not exceed devices");
    field_check(sim.quant_size >= 1, "n", "must be >= 1");
    field_check(sim.frag_len >= 1, "frag_len", "must be >= 1");
    field_check(codeword_len >= 1, "d", "must be >= 1");
    field_check(sim.iid_fraction >= 0.0 && sim.iid_fraction <= 1.0, "iid_fraction", "must lie in [0, 1]");
    field_check(sim.local_steps >= 1, "local_steps", "must be >= 1");
    field_check(sim.local_lr >= 0.0, "local_lr", "must be >= 0");
    field_check(sim.batch_size >= 1, "batch_size", "must be >= 1");
    field_check(sim.hidden >= 1, "hidden", "must be >= 1");
    field_check(sim.threads >= 0, "threads", "must be >= 0");
    field_check(decoder.layers >= 1, "decoder.layers", "must be >= 1");
    field_check(decoder.prior_floor >= 0.0 && decoder.prior_floor <= 1.0, "decoder.prior_floor", "must lie in [0, 1]");
    field_check(final_window >= 1, "final_window", "must be >= 1");
    field_check(bench.trials >= 1, "bench.trials", "must be >= 1");
    field_check(collect.validation_fraction >= 0.0 && collect.test_fraction >= 0.0 &&
                    collect.validation_fraction + collect.test_fraction < 1.0,
                "collect", "split fractions must be non-negative and sum below 1");
    field_check(sim.quantizer == QuantizerKind::vq || mode == AggregationMode::pa, "quantizer",
                "exact is only allowed in pa mode");
    field_check(mode != AggregationMode::learnt || !paths.weights.empty(), "paths.weights",
                "is required in learnt mode");
    const std::vector<std::pair<std::string, std::string>> named{
        {"paths.weights", paths.weights}, {"paths.dataset", paths.dataset}, {"paths.output", paths.output}};
    for (std::size_t i = 0; i < named.size(); ++i) {
        for (std::size_t j = i + 1; j < named.size(); ++j) {
            if (named[i].second.empty() || named[j].second.empty()) continue;
            field_check(std::filesystem::path(named[i].second).lexically_normal() !=
                            std::filesystem::path(named[j].second).lexically_normal(),
                        named[j].first, "must differ from " + named[i].first);
        }
    }
}

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, "", {"snr_db", "mode", "rounds", "ka_range", "n", "d", "frag_len", "seed", "devices", "hidden",
                       "iid_fraction", "local_steps", "local_lr", "batch_size", "global_lr", "quantizer",
                       "kmeans_iters", "threads", "final_window", "task", "decoder", "collect", "bench", "paths"});
    ExperimentConfig c;
    SimConfig& s = c.sim;
    get(j, "snr_db", "", c.snr_db);
    std::string mode = to_string(c.mode);
    get(j, "mode", "", mode);
    c.mode = parse_aggregation_mode(mode);
    get(j, "rounds", "", s.rounds);
    if (j.contains("ka_range")) {
        std::vector<int> r;
        get(j, "ka_range", "", r);
        field_check(r.size() == 2, "ka_range", "must be [min, max]");
        s.ka_min = r[0];
        s.ka_max = r[1];
    }
    long n = s.quant_size, d = c.codeword_len, frag = s.frag_len;
    get(j, "n", "", n);
    get(j, "d", "", d);
    get(j, "frag_len", "", frag);
    s.quant_size = n;
    c.codeword_len = d;
    s.frag_len = frag;
    get(j, "seed", "", s.seed);
    get(j, "devices", "", s.devices);
    get(j, "hidden", "", s.hidden);
    get(j, "iid_fraction", "", s.iid_fraction);
    get(j, "local_steps", "", s.local_steps);
    get(j, "local_lr", "", s.local_lr);
    get(j, "batch_size", "", s.batch_size);
    get(j, "global_lr", "", s.global_lr);
    std::string quant = to_string(s.quantizer);
    get(j, "quantizer", "", quant);
    s.quantizer = parse_quantizer_kind(quant);
    get(j, "kmeans_iters", "", s.kmeans_iters);
    get(j, "threads", "", s.threads);
    get(j, "final_window", "", c.final_window);

    if (j.contains("task")) {
        const json& t = j["task"];
        check_keys(t, "task", {"classes", "features", "train_samples", "test_samples", "class_separation", "seed"});
        get(t, "classes", "task", s.task.classes);
        get(t, "features", "task", s.task.features);
        get(t, "train_samples", "task", s.task.train_samples);
        get(t, "test_samples", "task", s.task.test_samples);
        get(t, "class_separation", "task", s.task.class_separation);
        get(t, "seed", "task", s.task.seed);
    }
    if (j.contains("decoder")) {
        const json& dj = j["decoder"];
        check_keys(dj, "decoder", {"layers", "baseline_codebook", "codebook_seed", "popularity_prior", "prior_floor"});
        get(dj, "layers", "decoder", c.decoder.layers);
        std::string scheme = to_string(c.decoder.baseline_codebook);
        get(dj, "baseline_codebook", "decoder", scheme);
        c.decoder.baseline_codebook = parse_init_scheme(scheme);
        get(dj, "codebook_seed", "decoder", c.decoder.codebook_seed);
        if (dj.contains("popularity_prior") && !dj["popularity_prior"].is_null()) {
            bool v = true;
            get(dj, "popularity_prior", "decoder", v);
            c.decoder.popularity_prior = v;
        }
        get(dj, "prior_floor", "decoder", c.decoder.prior_floor);
    }
    if (j.contains("collect")) {
        const json& cj = j["collect"];
        check_keys(cj, "collect", {"samples_per_round", "validation_fraction", "test_fraction", "calibration_rows"});
        get(cj, "samples_per_round", "collect", c.collect.samples_per_round);
        get(cj, "validation_fraction", "collect", c.collect.validation_fraction);
        get(cj, "test_fraction", "collect", c.collect.test_fraction);
        get(cj, "calibration_rows", "collect", c.collect.calibration_rows);
    }
    if (j.contains("bench")) {
        const json& bj = j["bench"];
        check_keys(bj, "bench", {"trials", "codebook_seed", "fixed_weights"});
        get(bj, "trials", "bench", c.bench.trials);
        get(bj, "codebook_seed", "bench", c.bench.codebook_seed);
        if (bj.contains("fixed_weights")) {
            std::map<std::string, std::string> fw;
            get(bj, "fixed_weights", "bench", fw);
            for (const auto& [k, v] : fw) {
                parse_init_scheme(k);
                c.bench.fixed_weights.emplace_back(k, v);
            }
        }
    }
    if (j.contains("paths")) {
        const json& pj = j["paths"];
        check_keys(pj, "paths", {"weights", "dataset", "output"});
        get(pj, "weights", "paths", c.paths.weights);
        get(pj, "dataset", "paths", c.paths.dataset);
        get(pj, "output", "paths", c.paths.output);
    }
    c.collect.codeword_len = c.codeword_len;
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidArgument("config file '" + path + "' cannot be opened");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
    const SimConfig& s = c.sim;
    json j;
    j["snr_db"] = c.snr_db;
    j["mode"] = to_string(c.mode);
    j["rounds"] = s.rounds;
    j["ka_range"] = {s.ka_min, s.ka_max};
    j["n"] = s.quant_size;
    j["d"] = c.codeword_len;
    j["frag_len"] = s.frag_len;
    j["seed"] = s.seed;
    j["devices"] = s.devices;
    j["hidden"] = s.hidden;
    j["iid_fraction"] = s.iid_fraction;
    j["local_steps"] = s.local_steps;
    j["local_lr"] = s.local_lr;
    j["batch_size"] = s.batch_size;
    j["global_lr"] = s.global_lr;
    j["quantizer"] = to_string(s.quantizer);
    j["kmeans_iters"] = s.kmeans_iters;
    j["threads"] = s.threads;
    j["final_window"] = c.final_window;
    j["task"] = {{"classes", s.task.classes},
                 {"features", s.task.features},
                 {"train_samples", s.task.train_samples},
                 {"test_samples", s.task.test_samples},
                 {"class_separation", s.task.class_separation},
                 {"seed", s.task.seed}};
    j["decoder"] = {{"layers", c.decoder.layers},
                    {"baseline_codebook", to_string(c.decoder.baseline_codebook)},
                    {"codebook_seed", c.decoder.codebook_seed},
                    {"popularity_prior", c.decoder.popularity_prior ? json(*c.decoder.popularity_prior) : json()},
                    {"prior_floor", c.decoder.prior_floor}};
    j["collect"] = {{"samples_per_round", c.collect.samples_per_round},
                    {"validation_fraction", c.collect.validation_fraction},
                    {"test_fraction", c.collect.test_fraction},
                    {"calibration_rows", c.collect.calibration_rows}};
    json fw = json::object();
    for (const auto& [k, v] : c.bench.fixed_weights) fw[k] = v;
    j["bench"] = {{"trials", c.bench.trials}, {"codebook_seed", c.bench.codebook_seed}, {"fixed_weights", fw}};
    j["paths"] = {{"weights", c.paths.weights}, {"dataset", c.paths.dataset}, {"output", c.paths.output}};
    return j.dump(2) + "\n";
}

Receiver make_receiver(const ExperimentConfig& cfg, double snr_db, const LoadedWeights* weights) {
    Receiver r;
    r.mode = cfg.mode;
    r.snr_db = snr_db;
    r.prior_floor = cfg.decoder.prior_floor;
    switch (cfg.mode) {
        case AggregationMode::pa:
            break;
        case AggregationMode::baseline:
            r.codebook = synthesize(init_base<double>(cfg.sim.quant_size, cfg.codeword_len, cfg.decoder.baseline_codebook,
                                                      cfg.decoder.codebook_seed),
                                    ShearMatrix<double>::identity(cfg.codeword_len));
            r.params = baseline_params<double>(cfg.decoder.layers);
            r.popularity_prior = cfg.decoder.popularity_prior.value_or(false);
            break;
        case AggregationMode::learnt:
            require(weights != nullptr, "learnt mode needs a weight file");
            require(weights->codebook.n() == cfg.sim.quant_size, "weight file n differs from config n");
            require(weights->codebook.d() == cfg.codeword_len, "weight file d differs from config d");
            r.codebook = weights->codebook;
            r.params = weights->file.params;
            r.popularity_prior = cfg.decoder.popularity_prior.value_or(true);
            break;
    }
    return r;
}

double final_accuracy(const std::vector<RoundRecord>& records, int window) {
    require(!records.empty(), "no rounds recorded");
    const std::size_t w = std::min<std::size_t>(records.size(), std::size_t(std::max(1, window)));
    double acc = 0.0;
    for (std::size_t i = records.size() - w; i < records.size(); ++i) acc += records[i].test_acc;
    return acc / double(w);
}

std::vector<BenchRow> decode_bench(const ExperimentConfig& cfg, const std::vector<DatasetSample>& samples,
                                   const MatrixXd& calibration, const LoadedWeights& learnt,
                                   const std::vector<std::pair<std::string, LoadedWeights>>& fixed) {
    require(!samples.empty(), "decode-bench needs samples");
    const Eigen::Index n = learnt.codebook.n();
    const Eigen::Index d = learnt.codebook.d();
    const std::size_t trials = std::min<std::size_t>(samples.size(), std::size_t(cfg.bench.trials));
    const std::vector<DatasetSample> used(samples.begin(), samples.begin() + std::ptrdiff_t(trials));

    struct Variant {
        std::string name;
        bool learnt_codebook;
        UraCodebook<double> codebook;
        DecoderParams<double> params;
    };
    std::vector<Variant> variants;
    variants.push_back({"learnt", true, learnt.codebook, learnt.file.params});
    std::vector<RowVectorXd> calib;
    for (Eigen::Index r = 0; r < calibration.rows(); ++r) calib.push_back(calibration.row(r));
    for (InitScheme scheme : {InitScheme::gaussian, InitScheme::bernoulli, InitScheme::data_driven_pinv}) {
        const std::string name = to_string(scheme);
        auto it = std::find_if(fixed.begin(), fixed.end(), [&](const auto& p) { return p.first == name; });
        if (it != fixed.end()) {
            variants.push_back({name, false, it->second.codebook, it->second.file.params});
        } else {
            const auto base = init_base<double>(n, d, scheme, std::uint64_t(cfg.bench.codebook_seed), calib);
            variants.push_back({name, false, synthesize(base, ShearMatrix<double>::identity(d)), learnt.file.params});
        }
    }

    // Samples of one round share K_a, so the initial K_a is pooled per round.
    std::map<int, std::vector<std::size_t>> by_round;
    for (std::size_t i = 0; i < used.size(); ++i) by_round[used[i].round].push_back(i);

    std::vector<BenchRow> rows;
    const int workers = cfg.sim.threads > 0 ? cfg.sim.threads : worker_threads();
    for (double snr : cfg.snr_db) {
        for (const Variant& v : variants) {
            for (bool ordering : {true, false}) {
                std::vector<CountVector> truth(used.size()), est(used.size());
                std::vector<double> ka_hat(used.size());
                std::vector<RowVectorXd> y(used.size());
                std::vector<Eigen::VectorXd> prior(used.size());
                for (const auto& [round, idx] : by_round) {
                    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
                    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
                    if (!ordering) {
                        Rng rng(derive_seed(cfg.sim.seed, 0xBE9CULL, std::uint64_t(round)));
                        std::shuffle(perm.begin(), perm.end(), rng);
                    }
                    for (std::size_t i : idx) {
                        truth[i] = CountVector::Zero(n);
                        for (Eigen::Index k = 0; k < n; ++k) truth[i](perm[std::size_t(k)]) = used[i].x(k);
                        prior[i] = ordering ? Eigen::VectorXd((1.0 - cfg.decoder.prior_floor) * used[i].pi.array() +
                                                              cfg.decoder.prior_floor / double(n))
                                            : Eigen::VectorXd::Constant(n, 1.0 / double(n));
                        y[i] = transmit(truth[i], v.codebook,
                                        ChannelConfig{snr, derive_seed(cfg.sim.seed, 0xC4A7ULL, std::uint64_t(i)) ^
                                                               std::uint64_t(std::llround(snr * 1000.0))})
                                   .y;
                    }
                }
                std::vector<double> ka0(used.size());
                for (const auto& [round, idx] : by_round) {
                    std::vector<RowVectorXd> group;
                    for (std::size_t i : idx) group.push_back(y[i]);
                    const double k0 = round_ka_estimate(group, v.codebook, prior[idx.front()], v.params, snr, 128, workers);
                    for (std::size_t i : idx) ka0[i] = k0;
                }
                parallel_for(used.size(), workers, [&](std::size_t i) {
                    const double sigma2_0 = ka0[i] / double(d) / std::pow(10.0, snr / 10.0);
                    try {
                        const auto r = decode(y[i], v.codebook, prior[i], v.params, sigma2_0, ka0[i]);
                        est[i] = r.x;
                        ka_hat[i] = r.ka;
                    } catch (const DecoderDiverged&) {
                        est[i] = CountVector::Zero(n);
                        ka_hat[i] = 0.0;
                    }
                });
                BenchRow row;
                row.codebook = v.name;
                row.learnt_codebook = v.learnt_codebook;
                row.ordering = ordering;
                row.snr_db = snr;
                row.trials = static_cast<int>(used.size());
                for (std::size_t i = 0; i < used.size(); ++i) {
                    row.recovery += est[i] == truth[i];
                    row.support_f1 += support_f1(truth[i], est[i]);
                    row.ka_mae += std::abs(ka_hat[i] - double(used[i].ka));
                }
                row.recovery /= double(used.size());
                row.support_f1 /= double(used.size());
                row.ka_mae /= double(used.size());
                rows.push_back(row);
            }
        }
    }
    return rows;
}

namespace {

struct CliOptions {
    std::string config;
    std::vector<double> snr;
    std::string mode;
    std::string weights;
    std::string out;
    std::optional<std::uint64_t> seed;
};

ExperimentConfig resolve(const CliOptions& o) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (!o.snr.empty()) cfg.snr_db = o.snr;
    if (!o.mode.empty()) cfg.mode = parse_aggregation_mode(o.mode);
    if (!o.weights.empty()) cfg.paths.weights = o.weights;
    if (!o.out.empty()) cfg.paths.output = o.out;
    if (o.seed) cfg.sim.seed = *o.seed;
    cfg.collect.codeword_len = cfg.codeword_len;
    cfg.validate();
    return cfg;
}

void write_resolved(const ExperimentConfig& cfg, const std::string& dir) {
    write_text(join(dir, "config.resolved.json"), config_to_json(cfg));
}

json round_json(double snr, const RoundRecord& r) {
    std::vector<double> pi(r.pi.data(), r.pi.data() + r.pi.size());
    return json{{"snr_db", snr},
                {"round", r.round},
                {"ka", r.ka},
                {"active", r.active},
                {"channel_seed", r.channel_seed},
                {"fragments", r.fragments},
                {"frag_recovery", r.frag_recovery},
                {"support_f1", r.support_f1},
                {"ka_mae", r.ka_mae},
                {"ka_scale", r.ka_scale},
                {"sigma2_hat", r.sigma2_hat},
                {"test_acc", r.test_acc},
                {"failed", r.failed},
                {"failure", r.failure},
                {"pi", pi}};
}

int cmd_simulate(const ExperimentConfig& cfg) {
    const std::string dir = cfg.paths.output;
    std::filesystem::create_directories(dir);
    write_resolved(cfg, dir);
    std::optional<LoadedWeights> weights;
    if (cfg.mode == AggregationMode::learnt) weights = load_weights(cfg.paths.weights);

    std::vector<double> snrs = cfg.snr_db;
    if (cfg.mode == AggregationMode::pa) snrs = {std::numeric_limits<double>::infinity()};
    std::vector<MetricsRow> rows;
    json summary = json::array();
    std::ofstream rounds(join(dir, "rounds.jsonl"));
    for (double snr : snrs) {
        const Receiver rx = make_receiver(cfg, snr, weights ? &*weights : nullptr);
        const auto records = run_experiment(cfg.sim, rx);
        for (const auto& r : records) {
            rows.push_back(metrics_row(snr, r));
            rounds << round_json(snr, r).dump() << '\n';
        }
        const double acc = final_accuracy(records, cfg.final_window);
        const long failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.failed; });
        summary.push_back({{"snr_db", format_double(snr)}, {"final_accuracy", acc}, {"failed_rounds", failed}});
        std::cout << "snr_db=" << format_double(snr) << " final_accuracy=" << format_double(acc)
                  << " failed_rounds=" << failed << '\n';
    }
    std::ofstream csv(join(dir, "metrics.csv"));
    write_metrics_csv(csv, rows);
    write_text(join(dir, "summary.json"), summary.dump(2) + "\n");
    return 0;
}

int cmd_collect(const ExperimentConfig& cfg) {
    const std::string dir = cfg.paths.dataset.empty() ? cfg.paths.output : cfg.paths.dataset;
    require(cfg.mode == AggregationMode::pa, "collect runs the PA pipeline; use --mode pa");
    std::filesystem::create_directories(dir);
    write_resolved(cfg, dir);
    const DatasetSplit split = collect_dataset(cfg.sim, cfg.collect);
    save_dataset_split(dir, split);
    std::cout << "train=" << split.train.size() << " validation=" << split.validation.size()
              << " test=" << split.test.size() << " fragment_count=" << split.fragment_count << '\n';
    return 0;
}

void load_or_collect(const ExperimentConfig& cfg, std::vector<DatasetSample>& test, MatrixXd& calibration) {
    if (!cfg.paths.dataset.empty()) {
        test = load_dataset(join(cfg.paths.dataset, "test.txt")).samples;
        calibration = load_matrix(join(cfg.paths.dataset, "calibration.txt"));
    } else {
        const DatasetSplit split = collect_dataset(cfg.sim, cfg.collect);
        test = split.test;
        calibration = split.calibration;
    }
}

int cmd_decode_bench(const ExperimentConfig& cfg) {
    require(!cfg.paths.weights.empty(), "decode-bench needs --weights");
    const std::string dir = cfg.paths.output;
    std::filesystem::create_directories(dir);
    write_resolved(cfg, dir);
    const LoadedWeights learnt = load_weights(cfg.paths.weights);
    std::vector<std::pair<std::string, LoadedWeights>> fixed;
    for (const auto& [scheme, path] : cfg.bench.fixed_weights) fixed.emplace_back(scheme, load_weights(path));
    std::vector<DatasetSample> test;
    MatrixXd calibration;
    load_or_collect(cfg, test, calibration);
    const auto rows = decode_bench(cfg, test, calibration, learnt, fixed);
    std::ofstream csv(join(dir, "bench.csv"));
    csv << "snr_db[dB],codebook,learnt_codebook,ordering,recovery[ratio],support_f1[ratio],ka_mae[count],trials[count]\n";
    for (const auto& r : rows) {
        csv << format_double(r.snr_db) << ',' << r.codebook << ',' << (r.learnt_codebook ? 1 : 0) << ','
            << (r.ordering ? 1 : 0) << ',' << format_double(r.recovery) << ',' << format_double(r.support_f1) << ','
            << format_double(r.ka_mae) << ',' << r.trials << '\n';
        std::cout << "snr_db=" << format_double(r.snr_db) << " codebook=" << r.codebook
                  << " ordering=" << (r.ordering ? "on" : "off") << " recovery=" << format_double(r.recovery)
                  << '\n';
    }
    return 0;
}

int cmd_codebook_stats(const ExperimentConfig& cfg) {
    const std::string dir = cfg.paths.output;
    std::filesystem::create_directories(dir);
    write_resolved(cfg, dir);
    std::optional<Eigen::VectorXd> popularity;
    std::vector<RowVectorXd> calib;
    if (!cfg.paths.dataset.empty()) {
        const DatasetFile train = load_dataset(join(cfg.paths.dataset, "train.txt"));
        if (!train.samples.empty()) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(train.n);
            for (const auto& s : train.samples) mean += s.pi;
            popularity = mean / double(train.samples.size());
        }
        const MatrixXd c = load_matrix(join(cfg.paths.dataset, "calibration.txt"));
        for (Eigen::Index r = 0; r < c.rows(); ++r) calib.push_back(c.row(r));
    }
    std::vector<std::pair<std::string, UraCodebook<double>>> books;
    if (!cfg.paths.weights.empty()) books.emplace_back("learnt", load_weights(cfg.paths.weights).codebook);
    for (InitScheme s : {InitScheme::gaussian, InitScheme::bernoulli, InitScheme::data_driven_pinv}) {
        if (s == InitScheme::data_driven_pinv && calib.empty()) continue;
        books.emplace_back(to_string(s),
                           synthesize(init_base<double>(cfg.sim.quant_size, cfg.codeword_len, s,
                                                        std::uint64_t(cfg.bench.codebook_seed), calib),
                                      ShearMatrix<double>::identity(cfg.codeword_len)));
    }
    std::ofstream csv(join(dir, "codebook_stats.csv"));
    csv << "codebook,max_cross[ratio],mean_cross[ratio],top_max_cross[ratio],top_mean_cross[ratio],"
           "sigma_max,sigma_min,sigma_ratio[ratio]\n";
    for (const auto& [name, book] : books) {
        if (popularity && popularity->size() != book.n()) popularity.reset();
        const CoherenceReport r = coherence_stats(book, popularity);
        csv << name << ',' << format_double(r.max_cross) << ',' << format_double(r.mean_cross) << ','
            << format_double(r.top_max_cross) << ',' << format_double(r.top_mean_cross) << ','
            << format_double(r.sigma_max) << ',' << format_double(r.sigma_min) << ',' << format_double(r.sigma_ratio)
            << '\n';
        std::cout << name << " max_cross=" << format_double(r.max_cross) << " mean_cross=" << format_double(r.mean_cross)
                  << " sigma_ratio=" << format_double(r.sigma_ratio) << '\n';
    }
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Federated edge learning over an unsourced random access uplink"};
    app.require_subcommand(1);
    CliOptions opts;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config, "JSON experiment config");
        sub->add_option("--snr", opts.snr, "SNR list in dB (comma separated)")->delimiter(',');
        sub->add_option("--mode", opts.mode, "pa, baseline or learnt")
            ->check(CLI::IsMember({"pa", "baseline", "learnt"}));
        sub->add_option("--weights", opts.weights, "weight file");
        sub->add_option("--out", opts.out, "output directory");
        sub->add_option("--seed", opts.seed, "base seed");
    };
    CLI::App* simulate = app.add_subcommand("simulate", "run the federated loop and write metrics.csv");
    CLI::App* collect = app.add_subcommand("collect", "run the PA pipeline and write the training dataset");
    CLI::App* bench = app.add_subcommand("decode-bench", "decoder-only codebook / ordering ablation");
    CLI::App* stats = app.add_subcommand("codebook-stats", "coherence and conditioning report");
    for (CLI::App* sub : {simulate, collect, bench, stats}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        const ExperimentConfig cfg = resolve(opts);
        if (simulate->parsed()) return cmd_simulate(cfg);
        if (collect->parsed()) return cmd_collect(cfg);
        if (bench->parsed()) return cmd_decode_bench(cfg);
        if (stats->parsed()) return cmd_codebook_stats(cfg);
    } catch (const InvalidArgument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace airfeel
