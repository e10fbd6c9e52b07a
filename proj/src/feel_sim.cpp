#include "airfeel/feel_sim.hpp"

#include "airfeel/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace airfeel {

namespace {

enum : std::uint64_t {
    kStreamPartition = 1,
    kStreamBs = 2,
    kStreamDevice = 3,
    kStreamActive = 4,
    kStreamChannel = 5,
    kStreamKmeans = 6,
    kStreamInit = 7,
    kStreamCollect = 8,
};

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

std::vector<DeviceShard> partition_dataset(const LabelledData& data, int shards, double iid_fraction,
                                           std::uint64_t seed) {
    require(shards >= 1, "need at least one shard");
    require(iid_fraction >= 0.0 && iid_fraction <= 1.0, "iid_fraction must lie in [0, 1]");
    const int total = static_cast<int>(data.size());
    const int per = total / shards;
    require(per >= 1, "dataset too small for the requested number of shards");

    std::vector<int> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, kStreamPartition));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(per) * shards);

    const int iid_per = static_cast<int>(std::lround(iid_fraction * per));
    const auto iid_end = order.begin() + std::ptrdiff_t(iid_per) * shards;
    std::stable_sort(iid_end, order.end(), [&](int a, int b) { return data.labels(a) < data.labels(b); });

    const int rest_per = per - iid_per;
    std::vector<DeviceShard> out(static_cast<std::size_t>(shards));
    for (int k = 0; k < shards; ++k) {
        DeviceShard& s = out[static_cast<std::size_t>(k)];
        s.device_id = k;
        s.indices.assign(order.begin() + std::ptrdiff_t(k) * iid_per, order.begin() + std::ptrdiff_t(k + 1) * iid_per);
        s.indices.insert(s.indices.end(), iid_end + std::ptrdiff_t(k) * rest_per,
                         iid_end + std::ptrdiff_t(k + 1) * rest_per);
    }
    return out;
}

double energy_ka_estimate(double mean_energy, double snr_db, double collision) {
    require(collision >= 0.0 && collision <= 1.0, "collision probability must lie in [0, 1]");
    const double a = 1.0 + std::pow(10.0, -snr_db / 10.0);
    double k = mean_energy / a;
    if (collision > 0.0) {
        const double b = a - collision;
        k = (-b + std::sqrt(b * b + 4.0 * collision * mean_energy)) / (2.0 * collision);
    }
    return std::max(1.0, k);
}

KaBounds energy_ka_bounds(double mean_energy, double snr_db) {
    const double a = 1.0 + std::pow(10.0, -snr_db / 10.0);
    const double inv = a - 1.0;
    KaBounds b;
    b.hi = std::max(1.0, mean_energy / a);
    b.lo = std::max(1.0, (-inv + std::sqrt(inv * inv + 4.0 * mean_energy)) / 2.0);
    b.lo = std::min(b.lo, b.hi);
    return b;
}

double round_ka_estimate(const std::vector<RowVectorXd>& y, const UraCodebook<double>& codebook,
                         const Eigen::VectorXd& prior, const DecoderParams<double>& params, double snr_db, int probes,
                         int threads) {
    require(!y.empty(), "no received fragments");
    double energy = 0.0;
    for (const auto& yf : y) energy += yf.squaredNorm();
    energy /= double(y.size());
    const KaBounds bounds = energy_ka_bounds(energy, snr_db);
    const double snr_lin = std::pow(10.0, snr_db / 10.0);
    const double d = double(codebook.d());
    const std::size_t count = std::min(y.size(), std::size_t(std::max(1, probes)));

    auto probe_decodes = [&](const DecoderParams<double>& p, double ka, auto&& use) {
        std::vector<double> v(count, 0.0);
        std::vector<char> ok(count, 0);
        parallel_for(count, threads, [&](std::size_t i) {
            const RowVectorXd& yi = y[i * y.size() / count];
            try {
                v[i] = use(yi, decode(yi, codebook, prior, p, ka / d / snr_lin, ka));
                ok[i] = 1;
            } catch (const NumericalError&) {
            }
        });
        double sum = 0.0, used = 0.0;
        for (std::size_t i = 0; i < count; ++i) {
            if (ok[i]) {
                sum += v[i];
                used += 1.0;
            }
        }
        return used > 0.0 ? sum / used : std::numeric_limits<double>::infinity();
    };

    const double ka0 = energy_ka_estimate(energy, snr_db, prior.squaredNorm());
    const double mean_sum = probe_decodes(baseline_params<double>(), ka0,
                                          [](const RowVectorXd&, const DecodeResult<double>& r) { return double(r.x.sum()); });
    const int lo = std::max(1, int(std::floor(bounds.lo)));
    const int hi = std::max(lo, int(std::ceil(bounds.hi)));
    int k = std::clamp(int(std::lround(std::isfinite(mean_sum) ? mean_sum : ka0)), lo, hi);

    // Penalised residual over integer K_a, with K_a held fixed inside the decoder.
    DecoderParams<double> fixed = params;
    for (auto& l : fixed.layers) l.step_ka_raw = -std::numeric_limits<double>::infinity();
    std::map<int, double> score;
    auto score_of = [&](int ka) {
        auto it = score.find(ka);
        if (it != score.end()) return it->second;
        const double r = probe_decodes(fixed, double(ka), [&](const RowVectorXd& yi, const DecodeResult<double>& res) {
            return (yi - res.x.cast<double>() * codebook.matrix()).squaredNorm();
        });
        const double s = r + 2.0 * double(ka) * double(ka) / d / snr_lin;
        score.emplace(ka, s);
        return s;
    };
    for (;;) {
        const double here = score_of(k);
        if (k > lo && score_of(k - 1) < here) {
            --k;
        } else if (k < hi && score_of(k + 1) < here) {
            ++k;
        } else {
            break;
        }
    }
    return double(k);
}

RowVectorXd local_train(const Objective& objective, const RowVectorXd& w, const DeviceShard& shard, int steps,
                        double lr, int batch_size, std::uint64_t seed) {
    require(steps >= 1, "local training needs E >= 1");
    require(batch_size >= 1, "batch size must be positive");
    require(!shard.indices.empty(), "empty shard");
    Rng rng(seed);
    std::vector<int> order = shard.indices;
    std::size_t cursor = order.size();
    const std::size_t b = std::min<std::size_t>(std::size_t(batch_size), order.size());

    RowVectorXd local = w;
    RowVectorXd grad;
    std::vector<int> batch(b);
    for (int step = 0; step < steps; ++step) {
        for (std::size_t i = 0; i < b; ++i) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch[i] = order[cursor++];
        }
        const double loss = objective.loss_and_gradient(local, batch, grad);
        if (!std::isfinite(loss)) throw NumericalError("local divergence");
        local -= lr * grad;
    }
    return local - w;
}

std::string to_string(AggregationMode m) {
    switch (m) {
        case AggregationMode::pa: return "pa";
        case AggregationMode::baseline: return "baseline";
        case AggregationMode::learnt: return "learnt";
    }
    return "?";
}

AggregationMode parse_aggregation_mode(const std::string& s) {
    if (s == "pa") return AggregationMode::pa;
    if (s == "baseline") return AggregationMode::baseline;
    if (s == "learnt") return AggregationMode::learnt;
    throw InvalidArgument("mode: expected pa, baseline or learnt, got '" + s + "'");
}

std::string to_string(QuantizerKind q) { return q == QuantizerKind::vq ? "vq" : "exact"; }

QuantizerKind parse_quantizer_kind(const std::string& s) {
    if (s == "vq") return QuantizerKind::vq;
    if (s == "exact") return QuantizerKind::exact;
    throw InvalidArgument("quantizer: expected vq or exact, got '" + s + "'");
}

FeelSimulator::FeelSimulator(SimConfig cfg)
    : cfg_(std::move(cfg)),
      task_(make_synthetic_task(cfg_.task)),
      train_model_(MlpShape{cfg_.task.features, cfg_.hidden, cfg_.task.classes}, &task_.train) {
    require(cfg_.devices >= 1, "devices must be positive");
    require(cfg_.ka_min >= 1 && cfg_.ka_min <= cfg_.ka_max && cfg_.ka_max <= cfg_.devices,
            "K_a range must satisfy 1 <= ka_min <= ka_max <= devices");
    require(cfg_.rounds >= 0, "rounds must be non-negative");
    require(cfg_.quant_size >= 1 && cfg_.frag_len >= 1, "quantiser size and fragment length must be positive");
    shards_ = partition_dataset(task_.train, cfg_.devices + 1, cfg_.iid_fraction, cfg_.seed);
}

int FeelSimulator::threads() const { return cfg_.threads > 0 ? cfg_.threads : worker_threads(); }

SimState FeelSimulator::initial_state() const {
    SimState s;
    s.w = train_model_.initial_params(derive_seed(cfg_.seed, kStreamInit));
    for (int k = 0; k < cfg_.devices; ++k) s.accumulators.push_back(ErrorAccumulator<double>::zeros(s.w.size(), k));
    s.bs_accumulator = ErrorAccumulator<double>::zeros(s.w.size(), cfg_.devices);
    return s;
}

double FeelSimulator::test_accuracy(const RowVectorXd& w) const { return train_model_.accuracy(w, task_.test); }

RoundRecord FeelSimulator::run_round(SimState& state, const Receiver& receiver, const RecordOptions& opts) const {
    const int t = state.round;
    const bool exact = cfg_.quantizer == QuantizerKind::exact;
    require(!exact || receiver.mode == AggregationMode::pa, "exact quantiser is only defined in PA mode");
    if (receiver.mode != AggregationMode::pa) {
        require(receiver.codebook.n() == cfg_.quant_size, "URA codebook size must equal the quantiser size");
    }
    const Eigen::Index W = state.w.size();
    const int workers = threads();

    RoundRecord rec;
    rec.round = t;
    rec.channel_seed = derive_seed(cfg_.seed, kStreamChannel, std::uint64_t(t));

    // BS: local update on its own shard, codebook from its fragments.
    QuantCodebook<double> cb;
    if (!exact) {
        const RowVectorXd bs_delta = local_train(train_model_, state.w, bs_shard(), cfg_.local_steps, cfg_.local_lr,
                                                 cfg_.batch_size, derive_seed(cfg_.seed, kStreamBs, std::uint64_t(t)));
        const MatrixXd bs_frags = fragment<double>(RowVectorXd(bs_delta + state.bs_accumulator.e), cfg_.frag_len);
        cb = build_codebook(bs_frags, cfg_.quant_size, derive_seed(cfg_.seed, kStreamKmeans, std::uint64_t(t)),
                            cfg_.kmeans_iters);
        cb = popularity_order(cb, bs_frags);
        rec.pi = cb.pi;
        state.bs_accumulator = apply_error_feedback(bs_delta, state.bs_accumulator, cb, cfg_.frag_len).accumulator;
    }

    Rng rng(derive_seed(cfg_.seed, kStreamActive, std::uint64_t(t)));
    rec.ka = std::uniform_int_distribution<int>(cfg_.ka_min, cfg_.ka_max)(rng);
    std::vector<int> devices(static_cast<std::size_t>(cfg_.devices));
    std::iota(devices.begin(), devices.end(), 0);
    std::shuffle(devices.begin(), devices.end(), rng);
    devices.resize(static_cast<std::size_t>(rec.ka));
    std::sort(devices.begin(), devices.end());
    rec.active = devices;

    // Devices: local update, error feedback, quantisation.
    const std::size_t K = devices.size();
    std::vector<RowVectorXd> deltas(K);
    std::vector<FeedbackResult<double>> feedback(K);
    parallel_for(K, workers, [&](std::size_t i) {
        const int k = devices[i];
        deltas[i] = local_train(train_model_, state.w, shards_[static_cast<std::size_t>(k)], cfg_.local_steps,
                                cfg_.local_lr, cfg_.batch_size, derive_seed(cfg_.seed, kStreamDevice, std::uint64_t(t),
                                                                            std::uint64_t(k)));
        if (!exact) feedback[i] = apply_error_feedback(deltas[i], state.accumulators[std::size_t(k)], cb, cfg_.frag_len);
    });

    if (opts.updates) {
        for (std::size_t i = 0; i < K; ++i) {
            rec.updates.push_back(DeviceUpdate{devices[i], deltas[i], exact ? deltas[i] : feedback[i].transmitted});
        }
    }
    if (!exact) {
        for (std::size_t i = 0; i < K; ++i) state.accumulators[std::size_t(devices[i])] = feedback[i].accumulator;
    }

    RowVectorXd update;
    if (exact) {
        update = RowVectorXd::Zero(W);
        for (const auto& d : deltas) update += d;
        update /= double(rec.ka);
        rec.codebook = cb;
        rec.fragments = static_cast<int>((W + cfg_.frag_len - 1) / cfg_.frag_len);
    } else {
        const Eigen::Index F = (W + cfg_.frag_len - 1) / cfg_.frag_len;
        rec.fragments = static_cast<int>(F);
        std::vector<CountVector> truth(static_cast<std::size_t>(F), CountVector::Zero(cfg_.quant_size));
        for (const auto& fb : feedback) {
            for (Eigen::Index f = 0; f < F; ++f) ++truth[std::size_t(f)](fb.indices[std::size_t(f)]);
        }

        std::vector<CountVector> decoded(static_cast<std::size_t>(F));
        std::vector<double> ka_hat(static_cast<std::size_t>(F), double(rec.ka));
        std::vector<double> sigma2_hat(static_cast<std::size_t>(F), 0.0);
        bool diverged = false;
        if (receiver.mode == AggregationMode::pa) {
            decoded = truth;
        } else {
            const Eigen::Index n = cfg_.quant_size;
            const Eigen::VectorXd prior =
                receiver.popularity_prior
                    ? Eigen::VectorXd((1.0 - receiver.prior_floor) * cb.pi.array() + receiver.prior_floor / double(n))
                    : Eigen::VectorXd::Constant(n, 1.0 / double(n));
            std::vector<RowVectorXd> y(static_cast<std::size_t>(F));
            parallel_for(std::size_t(F), workers, [&](std::size_t f) {
                y[f] = transmit(truth[f], receiver.codebook,
                                ChannelConfig{receiver.snr_db, derive_seed(rec.channel_seed, f)})
                           .y;
            });
            const double snr_lin = std::pow(10.0, receiver.snr_db / 10.0);
            const double ka0 = round_ka_estimate(y, receiver.codebook, prior, receiver.params, receiver.snr_db, receiver.ka_probes, workers);
            const double sigma2_0 = ka0 / double(receiver.codebook.d()) / snr_lin;
            try {
                parallel_for(std::size_t(F), workers, [&](std::size_t f) {
                    const DecodeResult<double> r = decode(y[f], receiver.codebook, prior, receiver.params, sigma2_0, ka0);
                    decoded[f] = r.x;
                    ka_hat[f] = r.ka;
                    sigma2_hat[f] = r.sigma2;
                });
            } catch (const DecoderDiverged& e) {
                diverged = true;
                rec.failed = true;
                rec.failure = e.what();
            }
        }

        if (!diverged) {
            double hits = 0.0, f1 = 0.0, kerr = 0.0, s2 = 0.0, count_sum = 0.0;
            for (std::size_t f = 0; f < std::size_t(F); ++f) {
                hits += decoded[f] == truth[f];
                f1 += support_f1(truth[f], decoded[f]);
                kerr += std::abs(ka_hat[f] - double(rec.ka));
                s2 += sigma2_hat[f];
                count_sum += double(decoded[f].sum());
            }
            rec.frag_recovery = hits / double(F);
            rec.support_f1 = f1 / double(F);
            rec.ka_mae = kerr / double(F);
            rec.sigma2_hat = s2 / double(F);
            rec.ka_scale = receiver.mode == AggregationMode::pa ? double(rec.ka) : count_sum / double(F);

            if (rec.ka_scale > 0.0) {
                MatrixXd rows(F, cfg_.frag_len);
                for (Eigen::Index f = 0; f < F; ++f) rows.row(f) = dequantize(decoded[std::size_t(f)], cb) / rec.ka_scale;
                update = defragment(rows, W);
            } else {
                rec.failed = true;
                rec.failure = "no codewords decoded";
            }
        }
        if (opts.activity) rec.activity = std::move(truth);
        rec.codebook = std::move(cb);
    }

    if (!rec.failed) state.w += cfg_.global_lr * update;
    state.round = t + 1;
    rec.test_acc = test_accuracy(state.w);
    return rec;
}

std::vector<RoundRecord> run_experiment(const SimConfig& cfg, const Receiver& receiver, const RecordOptions& opts) {
    FeelSimulator sim(cfg);
    SimState state = sim.initial_state();
    std::vector<RoundRecord> out;
    out.reserve(static_cast<std::size_t>(cfg.rounds));
    for (int t = 0; t < cfg.rounds; ++t) out.push_back(sim.run_round(state, receiver, opts));
    return out;
}

DatasetSplit collect_dataset(const SimConfig& cfg, const CollectConfig& collect) {
    require(cfg.quantizer == QuantizerKind::vq, "dataset collection needs the VQ quantiser");
    require(collect.validation_fraction >= 0.0 && collect.test_fraction >= 0.0 &&
                collect.validation_fraction + collect.test_fraction < 1.0,
            "split fractions must be non-negative and sum below 1");
    FeelSimulator sim(cfg);
    SimState state = sim.initial_state();
    Receiver pa;

    // Round-disjoint split from a seeded permutation of round indices.
    std::vector<int> rounds(static_cast<std::size_t>(cfg.rounds));
    std::iota(rounds.begin(), rounds.end(), 0);
    Rng rng(derive_seed(cfg.seed, kStreamCollect));
    std::shuffle(rounds.begin(), rounds.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::lround(collect.test_fraction * cfg.rounds));
    const auto n_val = static_cast<std::size_t>(std::lround(collect.validation_fraction * cfg.rounds));
    std::vector<int> split(static_cast<std::size_t>(cfg.rounds), 0);
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        split[std::size_t(rounds[i])] = i < n_test ? 2 : (i < n_test + n_val ? 1 : 0);
    }

    DatasetSplit out;
    out.n = cfg.quant_size;
    out.d = collect.codeword_len;
    std::vector<RowVectorXd> calib;
    Eigen::Index calib_rows = 0;
    for (int t = 0; t < cfg.rounds; ++t) {
        const RowVectorXd before = state.w;
        RoundRecord rec = sim.run_round(state, pa, RecordOptions{true, false});
        out.fragment_count = rec.fragments;

        std::vector<std::size_t> picks(rec.activity.size());
        std::iota(picks.begin(), picks.end(), std::size_t{0});
        if (collect.samples_per_round > 0 && std::size_t(collect.samples_per_round) < picks.size()) {
            Rng pick_rng(derive_seed(cfg.seed, kStreamCollect, std::uint64_t(t)));
            std::shuffle(picks.begin(), picks.end(), pick_rng);
            picks.resize(std::size_t(collect.samples_per_round));
            std::sort(picks.begin(), picks.end());
        }
        auto& dest = split[std::size_t(t)] == 0 ? out.train : (split[std::size_t(t)] == 1 ? out.validation : out.test);
        for (std::size_t f : picks) dest.push_back(DatasetSample{t, rec.ka, rec.pi, rec.activity[f]});

        if (calib_rows < collect.calibration_rows) {
            calib.push_back(state.w - before);
            calib_rows += (state.w.size() + collect.codeword_len - 1) / collect.codeword_len;
        }
    }

    std::vector<MatrixXd> blocks;
    Eigen::Index rows = 0;
    for (const auto& s : calib) {
        blocks.push_back(fragment<double>(s, collect.codeword_len));
        rows += blocks.back().rows();
    }
    rows = std::min<Eigen::Index>(rows, collect.calibration_rows);
    out.calibration.resize(rows, collect.codeword_len);
    Eigen::Index r = 0;
    for (const auto& b : blocks) {
        const Eigen::Index take = std::min(b.rows(), rows - r);
        out.calibration.middleRows(r, take) = b.topRows(take);
        r += take;
    }
    return out;
}

}  // namespace airfeel
