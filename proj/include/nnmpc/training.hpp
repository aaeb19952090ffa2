#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "model_io.hpp"
#include "nnarx.hpp"
#include "plant.hpp"

namespace nnmpc {

// ---------------------------------------------------------------------------
// Excitation and datasets
// ---------------------------------------------------------------------------

/// Multilevel pseudo-random signal: hold a uniformly drawn level for a uniformly drawn number of
/// steps in [dwell_min, dwell_max]. Consecutive plateaus use different levels when more than one
/// level is available.
inline std::vector<double> generate_mprs(const std::vector<double>& levels, int dwell_min, int dwell_max, Index length,
                                         std::uint64_t seed, const InputBox& box = benchmark_input_box()) {
    if (levels.empty()) throw ValidationError("generate_mprs: no levels");
    if (dwell_min < 1 || dwell_max < dwell_min) throw ValidationError("generate_mprs: need 1 <= dwell_min <= dwell_max");
    for (double l : levels)
        if (!box.contains(Vec::Constant(1, l))) throw ValidationError("generate_mprs: level outside the input box");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, levels.size() - 1);
    std::uniform_int_distribution<int> dwell(dwell_min, dwell_max);
    std::vector<double> out;
    out.reserve(static_cast<size_t>(length));
    size_t prev = levels.size();
    while (static_cast<Index>(out.size()) < length) {
        size_t i = pick(rng);
        while (levels.size() > 1 && i == prev) i = pick(rng);
        prev = i;
        for (int d = dwell(rng); d > 0 && static_cast<Index>(out.size()) < length; --d) out.push_back(levels[i]);
    }
    return out;
}

/// `count` evenly spaced levels spanning the box.
inline std::vector<double> default_mprs_levels(const InputBox& box = benchmark_input_box(), int count = 8) {
    std::vector<double> levels;
    for (int i = 0; i < count; ++i) levels.push_back(box.lower(0) + (box.upper(0) - box.lower(0)) * i / (count - 1));
    return levels;
}

/// Windows of length `window` with uniformly random start offsets (overlap allowed).
inline std::vector<IoSequence> extract_subsequences(const IoSequence& seq, Index window, int count,
                                                    std::uint64_t seed) {
    seq.validate();
    if (window > seq.length()) throw ValidationError("extract_subsequences: window longer than the record");
    if (window < 1 || count < 0) throw ValidationError("extract_subsequences: bad window/count");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Index> start(0, seq.length() - window);
    std::vector<IoSequence> out;
    for (int i = 0; i < count; ++i) out.push_back(seq.slice(start(rng), window));
    return out;
}

struct Dataset {
    std::vector<IoSequence> train, validation, test;

    void validate() const {
        for (const auto* part : {&train, &validation, &test}) {
            for (const auto& s : *part) {
                s.validate();
                if (s.length() != part->front().length())
                    throw ValidationError("Dataset: subsequences of one partition must share their length");
            }
        }
    }
};

/// Per-channel zero-mean / unit-variance scaling estimated on the training partition.
inline Scaling fit_scaling(const std::vector<IoSequence>& train) {
    if (train.empty()) throw ValidationError("fit_scaling: empty training partition");
    const Index m = train.front().u.rows(), p = train.front().y.rows();
    Vec su = Vec::Zero(m), sy = Vec::Zero(p), su2 = Vec::Zero(m), sy2 = Vec::Zero(p);
    double count = 0;
    for (const auto& s : train) {
        su += s.u.rowwise().sum();
        sy += s.y.rowwise().sum();
        su2 += s.u.array().square().matrix().rowwise().sum();
        sy2 += s.y.array().square().matrix().rowwise().sum();
        count += s.length();
    }
    Vec mu = su / count, my = sy / count;
    Vec vu = (su2 / count - mu.cwiseAbs2()).cwiseMax(0.0), vy = (sy2 / count - my.cwiseAbs2()).cwiseMax(0.0);
    Vec scale_u = vu.cwiseSqrt(), scale_y = vy.cwiseSqrt();
    for (Index i = 0; i < m; ++i)
        if (!(scale_u(i) > 0)) scale_u(i) = 1.0;
    for (Index i = 0; i < p; ++i)
        if (!(scale_y(i) > 0)) scale_y(i) = 1.0;
    return {mu, scale_u, my, scale_y};
}

inline IoSequence normalize(const IoSequence& s, const Scaling& sc) {
    IoSequence out = s;
    for (Index k = 0; k < s.length(); ++k) {
        out.u.col(k) = sc.normalize_u(s.u.col(k));
        out.y.col(k) = sc.normalize_y(s.y.col(k));
    }
    return out;
}

inline IoSequence denormalize(const IoSequence& s, const Scaling& sc) {
    IoSequence out = s;
    for (Index k = 0; k < s.length(); ++k) {
        out.u.col(k) = sc.denormalize_u(s.u.col(k));
        out.y.col(k) = sc.denormalize_y(s.y.col(k));
    }
    return out;
}

inline std::vector<IoSequence> normalize(const std::vector<IoSequence>& v, const Scaling& sc) {
    std::vector<IoSequence> out;
    for (const auto& s : v) out.push_back(normalize(s, sc));
    return out;
}

// ---------------------------------------------------------------------------
// Open-loop simulation from a measured washout
// ---------------------------------------------------------------------------

/// The first N+1 samples (indices 0..N) fix the measured initial state x_N; the model then runs
/// open loop on u_N.. and predicts y_{N+1}..y_{T-1}. Returned matrix is p x (T - N - 1).
inline Mat simulate_from_washout(const NnarxModel& model, const IoSequence& s) {
    const Index N = model.horizon(), T = s.length();
    if (T < N + 2) throw ValidationError("simulate_from_washout: subsequence shorter than N + 2");
    Vec x = model.state_from_history(s.y.middleCols(1, N), s.u.middleCols(0, N));
    Mat y(model.output_dim(), T - N - 1);
    for (Index k = N; k + 1 < T; ++k) {
        x = model.step(x, s.u.col(k));
        y.col(k - N) = model.output(x);
    }
    return y;
}

inline double softplus(double z) { return z > 30 ? z : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct LossResult {
    double loss = 0.0;     // mse + penalty term
    double mse = 0.0;
    double margin = 0.0;   // contraction margin of the evaluated weights
    FfnnParams gradient;   // d loss / d params
};

struct PenaltyConfig {
    double weight = 0.1;
    double target = 0.95;
};

namespace detail {

/// Squared-error sum and its BPTT gradient for one subsequence (already normalized).
inline double subsequence_sse(const NnarxModel& model, const IoSequence& s, double grad_scale, FfnnParams* grad) {
    const Index N = model.horizon(), T = s.length(), n = model.state_dim(), blk = model.block_dim();
    const Index p = model.output_dim();
    Vec x = model.state_from_history(s.y.middleCols(1, N), s.u.middleCols(0, N));
    const Index steps = T - N - 1;
    std::vector<EtaTape> tapes(static_cast<size_t>(steps));
    std::vector<Vec> resid(static_cast<size_t>(steps));
    double sse = 0.0;
    for (Index k = 0; k < steps; ++k) {
        Vec y_hat = model.eta(x, s.u.col(N + k), grad ? &tapes[k] : nullptr);
        resid[k] = y_hat - s.y.col(N + k + 1);
        sse += resid[k].squaredNorm();
        x = model.shift_in(x, y_hat, s.u.col(N + k));
    }
    if (!grad) return sse;
    Vec lam = Vec::Zero(n);  // adjoint of x_{k+1}
    for (Index k = steps; k-- > 0;) {
        Vec lam_y = lam.segment(n - blk, p) + 2.0 * grad_scale * resid[k];
        Vec lam_prev = Vec::Zero(n);
        lam_prev.tail(n - blk) = lam.head(n - blk);
        model.eta_vjp(tapes[k], lam_y, &lam_prev, nullptr, grad);
        lam = std::move(lam_prev);
    }
    return sse;
}

/// Runs fn(i) for i in [0, count) on up to hardware_concurrency threads.
inline void parallel_for(size_t count, const std::function<void(size_t)>& fn) {
    const size_t workers = std::min<size_t>(count, std::max(1u, std::thread::hardware_concurrency()));
    if (workers <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (size_t i = w; i < count; i += workers) fn(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace detail

/// Simulation mean squared error over the batch plus penalty * softplus(margin - target), with the
/// gradient by back-propagation through every rollout. Per-subsequence gradients are computed
/// independently and summed in index order, so the result does not depend on thread scheduling.
inline LossResult simulation_loss(const NnarxModel& model, const std::vector<IoSequence>& batch,
                                  const PenaltyConfig& penalty = {}, bool with_gradient = true) {
    if (batch.empty()) throw ValidationError("simulation_loss: empty batch");
    double count = 0;
    for (const auto& s : batch) {
        if (s.length() < model.horizon() + 2)
            throw ValidationError("simulation_loss: subsequence shorter than N + 2 samples");
        count += double(s.length() - model.horizon() - 1) * model.output_dim();
    }
    std::vector<double> sse(batch.size());
    std::vector<FfnnParams> grads(with_gradient ? batch.size() : 0);
    detail::parallel_for(batch.size(), [&](size_t i) {
        FfnnParams* g = nullptr;
        if (with_gradient) {
            grads[i] = model.params();
            grads[i].set_zero();
            g = &grads[i];
        }
        sse[i] = detail::subsequence_sse(model, batch[i], 1.0 / count, g);
    });
    LossResult out;
    out.gradient = model.params();
    out.gradient.set_zero();
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        total += sse[i];
        if (with_gradient) out.gradient += grads[i];
    }
    out.mse = total / count;
    out.loss = out.mse;
    if (penalty.weight > 0.0) {
        FfnnParams gm = model.params();
        gm.set_zero();
        out.margin = contraction_margin_gradient(model.params(), 1.0, gm);
        const double z = out.margin - penalty.target;
        out.loss += penalty.weight * softplus(z);
        if (with_gradient) {
            const double s = penalty.weight * sigmoid(z);
            Vec g = out.gradient.flatten() + s * gm.flatten();
            out.gradient.unflatten(g);
        }
    } else {
        out.margin = contraction_margin(model.params());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fit index
// ---------------------------------------------------------------------------

/// 100 * (1 - sum_k ||y_k - yp_k|| / sum_k ||yp_k - yp_avg||); columns are time samples.
inline double fit_index(const Mat& y_model, const Mat& y_plant) {
    if (y_model.rows() != y_plant.rows() || y_model.cols() != y_plant.cols())
        throw DimensionError("fit_index: sequences differ in shape");
    if (y_plant.cols() < 2) throw ValidationError("fit_index: need at least two samples");
    Vec avg = y_plant.rowwise().mean();
    double num = 0, den = 0;
    for (Index k = 0; k < y_plant.cols(); ++k) {
        num += (y_model.col(k) - y_plant.col(k)).norm();
        den += (y_plant.col(k) - avg).norm();
    }
    if (den == 0.0) throw ValidationError("fit_index: constant plant output");
    return 100.0 * (1.0 - num / den);
}

/// FIT of the open-loop simulation against a raw (physical-unit) record.
inline double model_fit(const NnarxModel& model, const IoSequence& raw) {
    IoSequence s = normalize(raw, model.scaling());
    Mat y_hat = simulate_from_washout(model, s);
    Mat y_hat_phys(y_hat.rows(), y_hat.cols());
    for (Index k = 0; k < y_hat.cols(); ++k) y_hat_phys.col(k) = model.scaling().denormalize_y(y_hat.col(k));
    const Index N = model.horizon();
    return fit_index(y_hat_phys, raw.y.middleCols(N + 1, raw.length() - N - 1));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ModelConfig {
    Index horizon = 5;
    std::vector<Index> hidden{30};
    Activation activation = Activation::Tanh;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int max_epochs = 2000;
    int patience = 150;
    int batch_size = 20;
    PenaltyConfig penalty{};
    std::uint64_t seed = 1;
    int max_gate_retries = 3;  // retrain with 10x penalty while the margin is >= 1
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ValidationError("TrainConfig: learning rate must be >= 0");
        if (patience < 1) throw ValidationError("TrainConfig: patience must be >= 1");
        if (max_epochs < 1 || batch_size < 1) throw ValidationError("TrainConfig: max_epochs and batch_size must be >= 1");
    }
};

/// Uniform weights in +-0.5/sqrt(fan_in), zero biases.
inline FfnnParams init_params(Index n, Index m, Index p, const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto f = FfnnParams::zeros(n, m, m == p ? p : p, cfg.hidden, cfg.activation);
    auto fill = [&](Mat& M, double fan_in) {
        std::uniform_real_distribution<double> d(-0.5 / std::sqrt(fan_in), 0.5 / std::sqrt(fan_in));
        for (Index i = 0; i < M.size(); ++i) M.data()[i] = d(rng);
    };
    for (auto& l : f.layers) {
        const double fan_in = double(l.U.cols() + l.W.cols());
        fill(l.W, fan_in);
        fill(l.U, fan_in);
    }
    fill(f.U0, double(f.U0.cols()));
    return f;
}

class Adam {
   public:
    Adam(Index size, double lr, double b1, double b2, double eps)
        : m_(Vec::Zero(size)), v_(Vec::Zero(size)), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(Vec& theta, const Vec& g) {
        ++t_;
        m_ = b1_ * m_ + (1 - b1_) * g;
        v_ = b2_ * v_ + (1 - b2_) * g.cwiseAbs2();
        const double c1 = 1 - std::pow(b1_, t_), c2 = 1 - std::pow(b2_, t_);
        theta.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

   private:
    Vec m_, v_;
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
    double margin = 0.0;
};

struct TrainResult {
    NnarxModel model;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_validation_loss = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
    double final_margin = 0.0;
    double penalty_weight = 0.0;  // weight actually used by the accepted run
    int gate_retries = 0;
};

/// Adam on the simulation loss over shuffled minibatches of the (normalized) training partition.
/// Validation MSE is recorded every epoch; the weights with the lowest validation MSE are returned.
/// Stops after `patience` epochs without strict improvement or at `max_epochs`.
inline TrainResult train_once(const NnarxModel& init, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty() || data.validation.empty())
        throw ValidationError("train: training and validation partitions must be nonempty");
    std::mt19937_64 rng(cfg.seed);
    NnarxModel model = init;
    Vec theta = model.params().flatten();
    Adam opt(theta.size(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    TrainResult res;
    res.model = init;
    res.penalty_weight = cfg.penalty.weight;
    std::vector<size_t> order(data.train.size());
    int since_best = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<IoSequence> batch;
            for (size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                batch.push_back(data.train[order[i]]);
            auto lr = simulation_loss(model, batch, cfg.penalty);
            if (!std::isfinite(lr.loss))
                throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch));
            epoch_loss += lr.loss;
            ++batches;
            opt.step(theta, lr.gradient.flatten());
            FfnnParams f = model.params();
            f.unflatten(theta);
            model = model.with_params(std::move(f));
        }
        auto val = simulation_loss(model, data.validation, {0.0, 0.0}, false);
        if (!std::isfinite(val.mse))
            throw TrainingDiverged("train: validation loss became non-finite at epoch " + std::to_string(epoch));
        res.history.push_back({epoch, epoch_loss / batches, val.mse, val.margin});
        res.epochs_run = epoch;
        if (val.mse < res.best_validation_loss) {
            res.best_validation_loss = val.mse;
            res.best_epoch = epoch;
            res.model = model;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    res.final_margin = contraction_margin(res.model.params());
    return res;
}

/// train_once, repeated with a 10x larger contraction penalty while the returned margin is >= 1.
inline TrainResult train(const NnarxModel& init, const Dataset& data, TrainConfig cfg) {
    for (int attempt = 0;; ++attempt) {
        auto res = train_once(init, data, cfg);
        res.gate_retries = attempt;
        if (res.final_margin < 1.0) return res;
        if (attempt >= cfg.max_gate_retries)
            throw TrainingDiverged("train: contraction margin " + std::to_string(res.final_margin) +
                                   " >= 1 after penalty retries");
        cfg.penalty.weight = cfg.penalty.weight > 0 ? 10.0 * cfg.penalty.weight : 0.1;
    }
}

// ---------------------------------------------------------------------------
// Benchmark data generation
// ---------------------------------------------------------------------------

struct DataGenConfig {
    double sample_time = 120.0;
    Index train_length = 2500;
    Index validation_length = 1000;
    Index test_length = 400;
    Index window = 400;
    int train_windows = 120;
    int validation_windows = 30;
    int test_windows = 1;
    std::vector<double> levels = default_mprs_levels();
    int dwell_min = 10;
    int dwell_max = 50;
    double initial_input = 0.1;
    int substeps = 32;
    double noise_std = 0.0;
    std::uint64_t seed = 1;
};

struct Experiments {
    IoSequence train, validation, test;
};

/// Three independent MPRS experiments on the plant at nominal disturbances, each started at the
/// steady state of `initial_input`.
inline Experiments run_identification_experiments(const DataGenConfig& cfg, const PlantParams& params = {}) {
    const Disturbance nominal{params.nominal_demand, params.nominal_inlet_temp};
    const PlantState x0 = plant_equilibrium(cfg.initial_input, nominal, params);
    auto run = [&](Index len, std::uint64_t seed) {
        auto u = generate_mprs(cfg.levels, cfg.dwell_min, cfg.dwell_max, len, seed);
        ExperimentOptions opt;
        opt.substeps = cfg.substeps;
        opt.noise_std = cfg.noise_std;
        opt.noise_seed = seed + 1000;
        return open_loop_experiment(u, {}, x0, params, cfg.sample_time, opt);
    };
    return {run(cfg.train_length, cfg.seed), run(cfg.validation_length, cfg.seed + 1),
            run(cfg.test_length, cfg.seed + 2)};
}

inline Dataset build_dataset(const Experiments& e, const DataGenConfig& cfg) {
    Dataset d;
    d.train = extract_subsequences(e.train, cfg.window, cfg.train_windows, cfg.seed + 10);
    d.validation = extract_subsequences(e.validation, std::min(cfg.window, e.validation.length()),
                                        cfg.validation_windows, cfg.seed + 11);
    d.test = extract_subsequences(e.test, std::min(cfg.window, e.test.length()), cfg.test_windows, cfg.seed + 12);
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// CSV and report I/O
// ---------------------------------------------------------------------------

/// CSV with header `t,u,y`, one row per sample (single input/output channel).
inline void write_io_csv(const IoSequence& s, const std::string& path) {
    if (s.u.rows() != 1 || s.y.rows() != 1) throw DimensionError("write_io_csv: single-channel records only");
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "t,u,y\n" << std::setprecision(17);
    for (Index k = 0; k < s.length(); ++k) out << k * s.sample_time << ',' << s.u(0, k) << ',' << s.y(0, k) << '\n';
}

inline IoSequence read_io_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line.rfind("t,u,y", 0) != 0) throw ValidationError("read_io_csv: expected header 't,u,y'");
    std::vector<double> t, u, y;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string a, b, c;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, c, ',');
        t.push_back(std::stod(a));
        u.push_back(std::stod(b));
        y.push_back(std::stod(c));
    }
    if (t.size() < 2) throw ValidationError("read_io_csv: need at least two samples");
    IoSequence s{t[1] - t[0], Mat(1, t.size()), Mat(1, t.size())};
    for (size_t k = 0; k < t.size(); ++k) {
        s.u(0, k) = u[k];
        s.y(0, k) = y[k];
    }
    s.validate();
    return s;
}

inline json train_config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"max_epochs", c.max_epochs},
            {"patience", c.patience},           {"batch_size", c.batch_size},
            {"penalty_weight", c.penalty.weight}, {"penalty_target", c.penalty.target},
            {"seed", c.seed},                   {"max_gate_retries", c.max_gate_retries}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.penalty.weight = j.value("penalty_weight", c.penalty.weight);
    c.penalty.target = j.value("penalty_target", c.penalty.target);
    c.seed = j.value("seed", c.seed);
    c.max_gate_retries = j.value("max_gate_retries", c.max_gate_retries);
    c.validate();
    return c;
}

/// Run report: seed, config, epochs run, best epoch, final FIT, final contraction margin.
inline json training_report(const TrainResult& r, const TrainConfig& cfg, double fit) {
    json hist = json::array();
    for (const auto& e : r.history)
        hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss}});
    return {{"seed", cfg.seed},
            {"config", train_config_to_json(cfg)},
            {"epochs_run", r.epochs_run},
            {"best_epoch", r.best_epoch},
            {"best_validation_loss", r.best_validation_loss},
            {"final_fit", fit},
            {"final_contraction_margin", r.final_margin},
            {"penalty_weight_used", r.penalty_weight},
            {"gate_retries", r.gate_retries},
            {"history", std::move(hist)}};
}

}  // namespace nnmpc
