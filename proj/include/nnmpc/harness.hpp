#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "deb_mpc.hpp"
#include "errors.hpp"
#include "model_io.hpp"
#include "mpc.hpp"
#include "nnarx.hpp"
#include "plant.hpp"
#include "training.hpp"

namespace nnmpc {

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

namespace io {

inline json schedule_to_json(const std::vector<std::pair<double, double>>& s) {
    json a = json::array();
    for (const auto& [t, v] : s) a.push_back({t, v});
    return a;
}

inline std::vector<std::pair<double, double>> schedule_from_json(const json& j) {
    std::vector<std::pair<double, double>> s;
    for (const auto& e : j) {
        if (!e.is_array() || e.size() != 2) throw ValidationError("schedule entries must be [time, value] pairs");
        s.emplace_back(e[0].get<double>(), e[1].get<double>());
    }
    return s;
}

inline json plant_params_to_json(const PlantParams& p) {
    return {{"tank_area", p.tank_area},         {"water_density", p.water_density},
            {"water_heat", p.water_heat},       {"plate_mass", p.plate_mass},
            {"metal_heat", p.metal_heat},       {"radiation", p.radiation},
            {"k_lm", p.k_lm},                   {"flame_temp", p.flame_temp},
            {"k_f", p.k_f},                     {"water_level", p.water_level},
            {"nominal_demand", p.nominal_demand}, {"nominal_inlet_temp", p.nominal_inlet_temp}};
}

/// Missing keys keep the benchmark values.
inline PlantParams plant_params_from_json(const json& j) {
    PlantParams p;
    p.tank_area = j.value("tank_area", p.tank_area);
    p.water_density = j.value("water_density", p.water_density);
    p.water_heat = j.value("water_heat", p.water_heat);
    p.plate_mass = j.value("plate_mass", p.plate_mass);
    p.metal_heat = j.value("metal_heat", p.metal_heat);
    p.radiation = j.value("radiation", p.radiation);
    p.k_lm = j.value("k_lm", p.k_lm);
    p.flame_temp = j.value("flame_temp", p.flame_temp);
    p.k_f = j.value("k_f", p.k_f);
    p.water_level = j.value("water_level", p.water_level);
    p.nominal_demand = j.value("nominal_demand", p.nominal_demand);
    p.nominal_inlet_temp = j.value("nominal_inlet_temp", p.nominal_inlet_temp);
    p.validate();
    return p;
}

inline json profile_to_json(const DisturbanceProfile& d) {
    return {{"demand", schedule_to_json(d.demand)}, {"inlet_temp", schedule_to_json(d.inlet_temp)}};
}

inline DisturbanceProfile profile_from_json(const json& j) {
    DisturbanceProfile d;
    if (j.contains("demand")) d.demand = schedule_from_json(j.at("demand"));
    if (j.contains("inlet_temp")) d.inlet_temp = schedule_from_json(j.at("inlet_temp"));
    d.validate();
    return d;
}

inline json data_config_to_json(const DataGenConfig& c) {
    return {{"sample_time", c.sample_time},
            {"train_length", c.train_length},
            {"validation_length", c.validation_length},
            {"test_length", c.test_length},
            {"window", c.window},
            {"train_windows", c.train_windows},
            {"validation_windows", c.validation_windows},
            {"test_windows", c.test_windows},
            {"levels", c.levels},
            {"dwell_min", c.dwell_min},
            {"dwell_max", c.dwell_max},
            {"initial_input", c.initial_input},
            {"substeps", c.substeps},
            {"noise_std", c.noise_std},
            {"seed", c.seed}};
}

inline DataGenConfig data_config_from_json(const json& j) {
    DataGenConfig c;
    c.sample_time = j.value("sample_time", c.sample_time);
    c.train_length = j.value("train_length", c.train_length);
    c.validation_length = j.value("validation_length", c.validation_length);
    c.test_length = j.value("test_length", c.test_length);
    c.window = j.value("window", c.window);
    c.train_windows = j.value("train_windows", c.train_windows);
    c.validation_windows = j.value("validation_windows", c.validation_windows);
    c.test_windows = j.value("test_windows", c.test_windows);
    if (j.contains("levels")) c.levels = j.at("levels").get<std::vector<double>>();
    c.dwell_min = j.value("dwell_min", c.dwell_min);
    c.dwell_max = j.value("dwell_max", c.dwell_max);
    c.initial_input = j.value("initial_input", c.initial_input);
    c.substeps = j.value("substeps", c.substeps);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.seed = j.value("seed", c.seed);
    if (!(c.sample_time > 0) || c.window < 3 || c.train_length < c.window || c.substeps < 1)
        throw ValidationError("data config: need sample_time > 0, window >= 3, train_length >= window, substeps >= 1");
    return c;
}

inline json model_config_to_json(const ModelConfig& c) {
    return {{"horizon", c.horizon}, {"hidden", c.hidden}, {"activation", to_string(c.activation)}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.horizon = j.value("horizon", c.horizon);
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<Index>>();
    if (j.contains("activation")) c.activation = activation_from_string(j.at("activation").get<std::string>());
    if (c.horizon < 1 || c.hidden.empty()) throw ValidationError("model config: horizon >= 1 and one hidden layer at least");
    return c;
}

inline json tuning_config_to_json(const TuningConfig& c) {
    json j = {{"mu_fraction", c.mu_fraction},
              {"resolution", c.resolution},
              {"equilibrium_max_iterations", c.equilibrium.max_iterations},
              {"equilibrium_tolerance", c.equilibrium.tolerance}};
    if (c.mu_tilde) j["mu_tilde"] = *c.mu_tilde;
    return j;
}

inline TuningConfig tuning_config_from_json(const json& j) {
    TuningConfig c;
    if (j.contains("mu_tilde") && !j.at("mu_tilde").is_null()) c.mu_tilde = j.at("mu_tilde").get<double>();
    c.mu_fraction = j.value("mu_fraction", c.mu_fraction);
    c.resolution = j.value("resolution", c.resolution);
    c.equilibrium.max_iterations = j.value("equilibrium_max_iterations", c.equilibrium.max_iterations);
    c.equilibrium.tolerance = j.value("equilibrium_tolerance", c.equilibrium.tolerance);
    if (!(c.mu_fraction > 0 && c.mu_fraction < 1)) throw ValidationError("tuning config: mu_fraction must lie in (0, 1)");
    return c;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Scenario and pipeline configuration
// ---------------------------------------------------------------------------

struct Scenario {
    std::vector<std::pair<double, double>> reference;  // (start time s, setpoint K)
    DisturbanceProfile disturbances;
    double duration = 0.0;  // s
    double initial_input = 0.1;  // plant starts at the steady state of this input
    double settling_band = 0.1;  // K

    void validate() const {
        if (reference.empty()) throw ValidationError("Scenario: empty reference schedule");
        if (reference.front().first != 0.0) throw ValidationError("Scenario: the reference must start at t = 0");
        for (size_t i = 1; i < reference.size(); ++i)
            if (!(reference[i].first > reference[i - 1].first))
                throw ValidationError("Scenario: reference times must be strictly increasing");
        disturbances.validate();
        double last = reference.back().first;
        for (const auto* s : {&disturbances.demand, &disturbances.inlet_temp})
            if (!s->empty()) last = std::max(last, s->back().first);
        if (!(duration > last)) throw ValidationError("Scenario: duration must cover every schedule point");
        if (!(settling_band > 0)) throw ValidationError("Scenario: settling band must be > 0");
    }

    double reference_at(double t) const {
        double v = reference.front().second;
        for (const auto& [start, value] : reference) {
            if (start <= t) v = value;
            else break;
        }
        return v;
    }
};

inline json scenario_to_json(const Scenario& s) {
    return {{"reference", io::schedule_to_json(s.reference)},
            {"disturbances", io::profile_to_json(s.disturbances)},
            {"duration", s.duration},
            {"initial_input", s.initial_input},
            {"settling_band", s.settling_band}};
}

inline Scenario scenario_from_json(const json& j) {
    Scenario s;
    s.reference = io::schedule_from_json(j.at("reference"));
    if (j.contains("disturbances")) s.disturbances = io::profile_from_json(j.at("disturbances"));
    s.duration = j.at("duration").get<double>();
    s.initial_input = j.value("initial_input", s.initial_input);
    s.settling_band = j.value("settling_band", s.settling_band);
    s.validate();
    return s;
}

struct ControllerSettings {
    MpcConfig mpc;
    double r_e = 10.0;
    double r_u = 0.1;
    double q_xi = 1.0;
    double q_theta = 1e-5;
    TuningConfig tuning;
    MheConfig mhe;
    int max_consecutive_failures = 5;

    MpcWeights weights(const NnarxModel& model) const {
        auto w = MpcWeights::defaults(model.horizon(), model.input_dim(), model.output_dim(), r_e, r_u);
        w.Q_xi = q_xi * Mat::Identity(model.input_dim(), model.input_dim());
        w.Q_theta = q_theta * Mat::Identity(model.input_dim(), model.input_dim());
        return w;
    }
};

inline json controller_settings_to_json(const ControllerSettings& c) {
    return {{"mpc", mpc_config_to_json(c.mpc)},
            {"r_e", c.r_e},
            {"r_u", c.r_u},
            {"q_xi", c.q_xi},
            {"q_theta", c.q_theta},
            {"tuning", io::tuning_config_to_json(c.tuning)},
            {"mhe", mhe_config_to_json(c.mhe)},
            {"max_consecutive_failures", c.max_consecutive_failures}};
}

inline ControllerSettings controller_settings_from_json(const json& j) {
    ControllerSettings c;
    if (j.contains("mpc")) c.mpc = mpc_config_from_json(j.at("mpc"));
    c.r_e = j.value("r_e", c.r_e);
    c.r_u = j.value("r_u", c.r_u);
    c.q_xi = j.value("q_xi", c.q_xi);
    c.q_theta = j.value("q_theta", c.q_theta);
    if (j.contains("tuning")) c.tuning = io::tuning_config_from_json(j.at("tuning"));
    if (j.contains("mhe")) c.mhe = mhe_config_from_json(j.at("mhe"));
    c.max_consecutive_failures = j.value("max_consecutive_failures", c.max_consecutive_failures);
    if (!(c.r_e >= 0 && c.r_u >= 0 && c.q_xi >= 0 && c.q_theta >= 0))
        throw ValidationError("controller config: weights must be >= 0");
    if (c.max_consecutive_failures < 0) throw ValidationError("controller config: failure cap must be >= 0");
    return c;
}

struct PipelineConfig {
    std::uint64_t seed = 1;
    PlantParams plant;
    DataGenConfig data;
    ModelConfig model;
    TrainConfig train;
    ControllerSettings controller;
    Scenario scenario;

    /// The top-level seed drives data generation and training.
    void apply_seed(std::uint64_t s) {
        seed = s;
        data.seed = s;
        train.seed = s;
    }
};

inline json pipeline_config_to_json(const PipelineConfig& c) {
    return {{"seed", c.seed},
            {"plant", io::plant_params_to_json(c.plant)},
            {"data", io::data_config_to_json(c.data)},
            {"model", io::model_config_to_json(c.model)},
            {"train", train_config_to_json(c.train)},
            {"controller", controller_settings_to_json(c.controller)},
            {"scenario", scenario_to_json(c.scenario)}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    if (j.contains("plant")) c.plant = io::plant_params_from_json(j.at("plant"));
    if (j.contains("data")) c.data = io::data_config_from_json(j.at("data"));
    if (j.contains("model")) c.model = io::model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("controller")) c.controller = controller_settings_from_json(j.at("controller"));
    if (!j.contains("scenario")) throw ValidationError("pipeline config: missing 'scenario'");
    c.scenario = scenario_from_json(j.at("scenario"));
    c.apply_seed(j.value("seed", c.seed));
    return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    return pipeline_config_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Closed-loop simulation
// ---------------------------------------------------------------------------

enum class ControllerKind { Proposed, DisturbanceEstimation };

inline std::string to_string(ControllerKind k) {
    return k == ControllerKind::Proposed ? "proposed" : "deb";
}

struct TraceRow {
    Index k = 0;
    double t = 0.0;
    double reference = 0.0;
    double y = 0.0;
    double error = 0.0;  // reference - y
    double u = 0.0;      // applied gas flow
    double xi = std::numeric_limits<double>::quiet_NaN();
    double gamma = std::numeric_limits<double>::quiet_NaN();
    double d_hat = std::numeric_limits<double>::quiet_NaN();
    double w = 0.0;
    double Ti = 0.0;
    double Tm = 0.0;
    double cost = 0.0;
    double terminal_residual = 0.0;
    double optimality = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct EventMetrics {
    Index sample = 0;
    std::string kind;  // setpoint, demand, inlet_temp
    int settling_samples = -1;  // first sample after which |e| stays inside the band; -1 if never
    double post_offset = 0.0;  // mean |e| over the last 10% of the interval up to the next event
};

struct SegmentMetrics {
    Index start = 0;
    double reference = 0.0;
    double steady_offset = 0.0;  // mean |e| over the last 10% of the segment
};

struct RunMetrics {
    std::string controller;
    std::vector<SegmentMetrics> segments;
    std::vector<EventMetrics> events;
    double max_violation = 0.0;
    double total_squared_increment = 0.0;
    double fit = std::numeric_limits<double>::quiet_NaN();
    int non_converged_steps = 0;
    bool aborted = false;
};

inline double tail_mean_abs(const std::vector<TraceRow>& tr, Index begin, Index end) {
    const Index len = end - begin;
    if (len <= 0) return std::numeric_limits<double>::quiet_NaN();
    const Index tail = std::max<Index>(1, static_cast<Index>(std::ceil(0.1 * len)));
    double s = 0.0;
    for (Index i = end - tail; i < end; ++i) s += std::abs(tr[i].error);
    return s / tail;
}

inline RunMetrics compute_metrics(const std::vector<TraceRow>& tr, const Scenario& sc, double sample_time,
                                  const InputBox& box, double fit = std::numeric_limits<double>::quiet_NaN()) {
    RunMetrics m;
    m.fit = fit;
    const Index T = static_cast<Index>(tr.size());
    auto sample_of = [&](double t) { return static_cast<Index>(std::ceil(t / sample_time - 1e-9)); };

    std::vector<std::pair<Index, std::string>> events;
    for (const auto& [t, v] : sc.reference) events.emplace_back(sample_of(t), "setpoint");
    for (const auto& [t, v] : sc.disturbances.demand) events.emplace_back(sample_of(t), "demand");
    for (const auto& [t, v] : sc.disturbances.inlet_temp) events.emplace_back(sample_of(t), "inlet_temp");
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 0; i < events.size(); ++i) {
        const Index s = events[i].first;
        if (s >= T) break;
        Index end = T;
        for (size_t j = i + 1; j < events.size(); ++j)
            if (events[j].first > s) {
                end = std::min(T, events[j].first);
                break;
            }
        EventMetrics em;
        em.sample = s;
        em.kind = events[i].second;
        Index first_in = end;
        while (first_in > s && std::abs(tr[first_in - 1].error) < sc.settling_band) --first_in;
        em.settling_samples = first_in < end ? static_cast<int>(first_in - s) : -1;
        em.post_offset = tail_mean_abs(tr, s, end);
        m.events.push_back(em);
    }
    for (size_t i = 0; i < sc.reference.size(); ++i) {
        const Index s = sample_of(sc.reference[i].first);
        if (s >= T) break;
        const Index end = i + 1 < sc.reference.size() ? std::min(T, sample_of(sc.reference[i + 1].first)) : T;
        m.segments.push_back({s, sc.reference[i].second, tail_mean_abs(tr, s, end)});
    }
    for (Index k = 0; k < T; ++k) {
        m.max_violation = std::max(m.max_violation, box.violation(Vec::Constant(1, tr[k].u)));
        if (k > 0) m.total_squared_increment += std::pow(tr[k].u - tr[k - 1].u, 2);
        if (!tr[k].converged) ++m.non_converged_steps;
    }
    return m;
}

inline json run_metrics_to_json(const RunMetrics& m) {
    json seg = json::array(), ev = json::array();
    for (const auto& s : m.segments)
        seg.push_back({{"start_sample", s.start}, {"reference", s.reference}, {"steady_offset", s.steady_offset}});
    for (const auto& e : m.events)
        ev.push_back({{"sample", e.sample},
                      {"kind", e.kind},
                      {"settling_samples", e.settling_samples},
                      {"post_offset", e.post_offset}});
    json j = {{"controller", m.controller},
              {"segments", seg},
              {"events", ev},
              {"max_violation", m.max_violation},
              {"total_squared_increment", m.total_squared_increment},
              {"non_converged_steps", m.non_converged_steps},
              {"aborted", m.aborted}};
    j["fit"] = std::isfinite(m.fit) ? json(m.fit) : json(nullptr);
    return j;
}

struct ClosedLoopResult {
    ControllerKind kind = ControllerKind::Proposed;
    std::vector<TraceRow> trace;
    RunMetrics metrics;
    bool aborted = false;
    std::string abort_reason;
    json tunings = json::array();
    std::vector<std::string> warnings;
    double wall_time = 0.0;
};

/// Runs the plant under one controller for the whole scenario. Measurements and inputs are mapped
/// through the model's scaling; on every reference change the target (and, for the proposed
/// controller, the integral gain) is recomputed.
inline ClosedLoopResult closed_loop(const Scenario& sc, const NnarxModel& model, const PlantParams& params,
                                    const ControllerSettings& cs, double sample_time, int substeps, ControllerKind kind,
                                    double fit = std::numeric_limits<double>::quiet_NaN()) {
    sc.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const Scaling& S = model.scaling();
    const InputBox box = benchmark_input_box();
    const InputBox nbox = box.normalized(S);
    const Index N = model.horizon();
    const Index T = static_cast<Index>(std::llround(sc.duration / sample_time));

    PlantSimulator sim(params, sc.disturbances, plant_equilibrium(sc.initial_input, sc.disturbances.at(0.0, params), params),
                       sample_time, substeps, box);
    const Vec u0 = S.normalize_u(Vec::Constant(1, sc.initial_input));
    Mat yh = S.normalize_y(Vec::Constant(1, sim.state().T)).replicate(1, N);
    Mat uh = u0.replicate(1, N);

    ClosedLoopResult res;
    res.kind = kind;
    const MpcWeights weights = cs.weights(model);
    std::optional<MpcController> prop;
    std::optional<DebMpcController> deb;
    if (kind == ControllerKind::Proposed) {
        prop.emplace(model, cs.mpc, weights, nbox);
        prop->reset_states(u0, u0);
    } else {
        deb.emplace(model, cs.mpc, weights, nbox, cs.mhe);
    }

    double current_ref = std::numeric_limits<double>::quiet_NaN();
    Vec u_last = u0;
    int failures = 0;
    for (Index k = 0; k < T; ++k) {
        const double t = k * sample_time;
        const double ref = sc.reference_at(t);
        if (ref != current_ref) {
            const Vec ybar = S.normalize_y(Vec::Constant(1, ref));
            try {
                if (prop) {
                    auto rep = tune_setpoint(model, ybar, u_last, nbox, cs.tuning);
                    prop->set_target(rep.equilibrium, rep.gain.mu);
                    json tj = tuning_report_to_json(rep, S);
                    tj["sample"] = k;
                    res.tunings.push_back(std::move(tj));
                } else {
                    deb->set_setpoint(ybar, u_last, cs.tuning.equilibrium);
                    res.tunings.push_back({{"sample", k},
                                           {"setpoint", ref},
                                           {"equilibrium_input", S.denormalize_u(deb->target().u)(0)}});
                }
            } catch (const Error& e) {
                throw StageError("closed-loop", "retargeting to " + std::to_string(ref) + " K at sample " +
                                                    std::to_string(k) + " failed: " + e.what());
            }
            current_ref = ref;
        }

        const Vec x = model.state_from_history(yh, uh);
        TraceRow row;
        row.k = k;
        row.t = t;
        row.reference = ref;
        row.y = sim.state().T;
        row.error = ref - row.y;
        row.Tm = sim.state().Tm;
        const Disturbance dist = sim.disturbance();
        row.w = dist.w;
        row.Ti = dist.Ti;
        StepDiagnostics diag;
        Vec u_cmd;
        if (prop) {
            auto mv = prop->step(x);
            u_cmd = mv.u;
            diag = mv.diag;
            row.xi = S.denormalize_u(mv.xi)(0);
            row.gamma = ((mv.v - mv.theta).cwiseProduct(S.u_scale))(0);
        } else {
            auto mv = deb->step(x);
            u_cmd = mv.u;
            diag = mv.diag;
            row.d_hat = mv.d_hat.cwiseProduct(S.u_scale)(0);
        }
        row.cost = diag.cost;
        row.terminal_residual = diag.terminal_residual;
        row.optimality = diag.optimality;
        row.iterations = diag.inner_iterations;
        row.converged = diag.converged;
        if (!diag.warning.empty()) res.warnings.push_back("sample " + std::to_string(k) + ": " + diag.warning);

        const double applied = sim.advance(S.denormalize_u(u_cmd)(0));
        if (!std::isfinite(sim.state().T) || !std::isfinite(sim.state().Tm))
            throw StageError("closed-loop", "plant state became non-finite at sample " + std::to_string(k));
        row.u = applied;
        res.trace.push_back(row);

        u_last = S.normalize_u(Vec::Constant(1, applied));
        yh.leftCols(N - 1) = yh.rightCols(N - 1).eval();
        yh.col(N - 1) = S.normalize_y(Vec::Constant(1, sim.state().T));
        uh.leftCols(N - 1) = uh.rightCols(N - 1).eval();
        uh.col(N - 1) = u_last;

        failures = diag.converged ? 0 : failures + 1;
        if (failures > cs.max_consecutive_failures) {
            res.aborted = true;
            res.abort_reason = "more than " + std::to_string(cs.max_consecutive_failures) +
                               " consecutive solver failures at sample " + std::to_string(k);
            break;
        }
    }
    res.metrics = compute_metrics(res.trace, sc, sample_time, box, fit);
    res.metrics.controller = to_string(kind);
    res.metrics.aborted = res.aborted;
    res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

namespace detail {
inline std::string fmt_num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}
}  // namespace detail

inline void write_trace_csv(const std::vector<TraceRow>& tr, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "k,t,reference,y,error,u,xi,gamma,d_hat,w,Ti,Tm,cost,terminal_residual,optimality,iterations,converged\n";
    using detail::fmt_num;
    for (const auto& r : tr)
        out << r.k << ',' << fmt_num(r.t) << ',' << fmt_num(r.reference) << ',' << fmt_num(r.y) << ','
            << fmt_num(r.error) << ',' << fmt_num(r.u) << ',' << fmt_num(r.xi) << ',' << fmt_num(r.gamma) << ','
            << fmt_num(r.d_hat) << ',' << fmt_num(r.w) << ',' << fmt_num(r.Ti) << ',' << fmt_num(r.Tm) << ','
            << fmt_num(r.cost) << ',' << fmt_num(r.terminal_residual) << ',' << fmt_num(r.optimality) << ','
            << r.iterations << ',' << (r.converged ? 1 : 0) << '\n';
}

/// Open-loop plant run with header `t,u_applied,w,Ti,T,Tm`.
inline void write_plant_csv(const std::vector<double>& u_seq, const DisturbanceProfile& profile, const PlantState& x0,
                            const PlantParams& params, double sample_time, int substeps, const std::string& path) {
    PlantSimulator sim(params, profile, x0, sample_time, substeps);
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "t,u_applied,w,Ti,T,Tm\n";
    using detail::fmt_num;
    for (double u : u_seq) {
        const double t = sim.time();
        const Disturbance d = sim.disturbance();
        const PlantState x = sim.state();
        const double applied = sim.advance(u);
        out << fmt_num(t) << ',' << fmt_num(applied) << ',' << fmt_num(d.w) << ',' << fmt_num(d.Ti) << ','
            << fmt_num(x.T) << ',' << fmt_num(x.Tm) << '\n';
    }
}

/// One line per controller: worst settling time, worst post-event offset, violation, control effort.
inline std::string metrics_table(const std::vector<RunMetrics>& runs) {
    std::string s = "controller,worst_settling_samples,max_post_event_offset_K,max_steady_offset_K,"
                    "max_violation,total_squared_increment,non_converged_steps,aborted,fit\n";
    using detail::fmt_num;
    for (const auto& m : runs) {
        int worst = 0;
        double off = 0.0, seg = 0.0;
        for (const auto& e : m.events) {
            worst = (e.settling_samples < 0 || worst < 0) ? -1 : std::max(worst, e.settling_samples);
            off = std::max(off, e.post_offset);
        }
        for (const auto& g : m.segments) seg = std::max(seg, g.steady_offset);
        s += m.controller + ',' + std::to_string(worst) + ',' + fmt_num(off) + ',' + fmt_num(seg) + ',' +
             fmt_num(m.max_violation) + ',' + fmt_num(m.total_squared_increment) + ',' +
             std::to_string(m.non_converged_steps) + ',' + (m.aborted ? "1" : "0") + ',' + fmt_num(m.fit) + '\n';
    }
    return s;
}

// ---------------------------------------------------------------------------
// Pipeline stages with on-disk caching
// ---------------------------------------------------------------------------

struct PipelineOptions {
    bool use_cache = true;
    bool run_proposed = true;
    bool run_deb = true;
    std::ostream* log = nullptr;
};

struct TrainedModel {
    NnarxModel model;
    double fit = std::numeric_limits<double>::quiet_NaN();
    double margin = std::numeric_limits<double>::quiet_NaN();
    json report;
    bool from_cache = false;
};

struct PipelineResult {
    Experiments experiments;
    TrainedModel trained;
    json tuning;
    std::optional<ClosedLoopResult> proposed, deb;
};

namespace detail {

inline void log_line(const PipelineOptions& o, const std::string& s) {
    if (o.log) *o.log << s << std::endl;
}

/// A cached stage is reused only when the inputs it was produced from are unchanged.
inline bool cache_matches(const std::filesystem::path& stamp, const json& inputs) {
    if (!std::filesystem::exists(stamp)) return false;
    try {
        return read_json_file(stamp.string()) == inputs;
    } catch (const std::exception&) {
        return false;
    }
}

template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

}  // namespace detail

inline Experiments stage_generate(const PipelineConfig& cfg, const std::filesystem::path& dir,
                                  const PipelineOptions& opt = {}) {
    return detail::run_stage("generate", [&] {
        namespace fs = std::filesystem;
        const fs::path d = dir / "data";
        const json inputs = {{"plant", io::plant_params_to_json(cfg.plant)}, {"data", io::data_config_to_json(cfg.data)}};
        if (opt.use_cache && detail::cache_matches(d / "inputs.json", inputs)) {
            detail::log_line(opt, "generate: using cached records in " + d.string());
            return Experiments{read_io_csv((d / "train.csv").string()), read_io_csv((d / "validation.csv").string()),
                               read_io_csv((d / "test.csv").string())};
        }
        detail::log_line(opt, "generate: simulating identification experiments");
        auto ex = run_identification_experiments(cfg.data, cfg.plant);
        fs::create_directories(d);
        write_io_csv(ex.train, (d / "train.csv").string());
        write_io_csv(ex.validation, (d / "validation.csv").string());
        write_io_csv(ex.test, (d / "test.csv").string());
        write_json_file(inputs, (d / "inputs.json").string());
        // reload so that cached and fresh runs see identical numbers
        return Experiments{read_io_csv((d / "train.csv").string()), read_io_csv((d / "validation.csv").string()),
                           read_io_csv((d / "test.csv").string())};
    });
}

inline TrainedModel stage_train(const PipelineConfig& cfg, const Experiments& ex, const std::filesystem::path& dir,
                                const PipelineOptions& opt = {}) {
    return detail::run_stage("train", [&] {
        namespace fs = std::filesystem;
        const json inputs = {{"plant", io::plant_params_to_json(cfg.plant)},
                             {"data", io::data_config_to_json(cfg.data)},
                             {"model", io::model_config_to_json(cfg.model)},
                             {"train", train_config_to_json(cfg.train)}};
        TrainedModel tm;
        const fs::path model_path = dir / "model.json", report_path = dir / "training_report.json";
        if (opt.use_cache && detail::cache_matches(dir / "model_inputs.json", inputs) && fs::exists(model_path) &&
            fs::exists(report_path)) {
            detail::log_line(opt, "train: using cached model " + model_path.string());
            tm.model = load_model(model_path.string());
            tm.report = read_json_file(report_path.string());
            tm.from_cache = true;
        } else {
            auto ds = build_dataset(ex, cfg.data);
            const Scaling sc = fit_scaling(ds.train);
            const Dataset nd{normalize(ds.train, sc), normalize(ds.validation, sc), normalize(ds.test, sc)};
            const Index N = cfg.model.horizon, n = N * 2;
            NnarxModel init(N, init_params(n, 1, 1, cfg.model, cfg.train.seed), sc);
            detail::log_line(opt, "train: fitting the network (" + std::to_string(cfg.train.max_epochs) +
                                      " epochs max, " + std::to_string(nd.train.size()) + " subsequences)");
            auto res = train(init, nd, cfg.train);
            fs::create_directories(dir);
            save_model(res.model, model_path.string());
            const NnarxModel reloaded = load_model(model_path.string());
            double fit = 0.0;
            for (const auto& s : ds.test) fit += model_fit(reloaded, s);
            fit /= static_cast<double>(ds.test.size());
            tm.report = training_report(res, cfg.train, fit);
            write_json_file(tm.report, report_path.string());
            {
                std::ofstream h((dir / "training_history.csv").string());
                h << "epoch,train_loss,validation_loss,margin\n";
                for (const auto& e : res.history)
                    h << e.epoch << ',' << detail::fmt_num(e.train_loss) << ',' << detail::fmt_num(e.validation_loss)
                      << ',' << detail::fmt_num(e.margin) << '\n';
            }
            write_json_file(inputs, (dir / "model_inputs.json").string());
            tm.model = reloaded;
        }
        tm.fit = tm.report.value("final_fit", std::numeric_limits<double>::quiet_NaN());
        tm.margin = contraction_margin(tm.model.params());
        detail::log_line(opt, "train: test FIT " + detail::fmt_num(tm.fit) + " %, contraction margin " +
                                  detail::fmt_num(tm.margin));
        return tm;
    });
}

/// Equilibrium, checks and integral gain at every setpoint of the scenario.
inline json stage_tune(const PipelineConfig& cfg, const NnarxModel& model, const std::filesystem::path& dir,
                       const PipelineOptions& opt = {}) {
    return detail::run_stage("tune", [&] {
        const Scaling& S = model.scaling();
        const InputBox nbox = benchmark_input_box().normalized(S);
        json out = json::array();
        Vec u_guess = S.normalize_u(Vec::Constant(1, cfg.scenario.initial_input));
        for (const auto& [t, ref] : cfg.scenario.reference) {
            auto rep = tune_setpoint(model, S.normalize_y(Vec::Constant(1, ref)), u_guess, nbox, cfg.controller.tuning);
            json j = tuning_report_to_json(rep, S);
            j["time"] = t;
            out.push_back(std::move(j));
            u_guess = rep.equilibrium.u;
            detail::log_line(opt, "tune: setpoint " + detail::fmt_num(ref) + " K -> u " +
                                      detail::fmt_num(S.denormalize_u(rep.equilibrium.u)(0)) + ", mu_tilde_max " +
                                      detail::fmt_num(rep.search.mu_tilde_max));
        }
        std::filesystem::create_directories(dir);
        write_json_file(out, (dir / "tuning.json").string());
        return out;
    });
}

inline ClosedLoopResult stage_closed_loop(const PipelineConfig& cfg, const TrainedModel& tm, ControllerKind kind,
                                          const std::filesystem::path& dir, const PipelineOptions& opt = {}) {
    const std::string stage = "closed-loop-" + to_string(kind);
    return detail::run_stage(stage, [&] {
        detail::log_line(opt, stage + ": simulating " +
                                  std::to_string(std::llround(cfg.scenario.duration / cfg.data.sample_time)) +
                                  " samples");
        auto res = closed_loop(cfg.scenario, tm.model, cfg.plant, cfg.controller, cfg.data.sample_time,
                               cfg.data.substeps, kind, tm.fit);
        std::filesystem::create_directories(dir);
        write_trace_csv(res.trace, (dir / ("trace_" + to_string(kind) + ".csv")).string());
        json j = run_metrics_to_json(res.metrics);
        j["abort_reason"] = res.abort_reason;
        j["tunings"] = res.tunings;
        j["warnings"] = res.warnings;
        write_json_file(j, (dir / ("metrics_" + to_string(kind) + ".json")).string());
        detail::log_line(opt, stage + ": done in " + detail::fmt_num(res.wall_time) + " s" +
                                  (res.aborted ? " (aborted: " + res.abort_reason + ")" : ""));
        return res;
    });
}

/// generate -> train -> tune -> closed loop (proposed) -> closed loop (baseline) -> metrics table.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& dir,
                                   const PipelineOptions& opt = {}) {
    std::filesystem::create_directories(dir);
    write_json_file(pipeline_config_to_json(cfg), (dir / "config.json").string());
    PipelineResult r;
    r.experiments = stage_generate(cfg, dir, opt);
    r.trained = stage_train(cfg, r.experiments, dir, opt);
    r.tuning = stage_tune(cfg, r.trained.model, dir, opt);
    std::vector<RunMetrics> runs;
    if (opt.run_proposed) {
        r.proposed = stage_closed_loop(cfg, r.trained, ControllerKind::Proposed, dir, opt);
        runs.push_back(r.proposed->metrics);
    }
    if (opt.run_deb) {
        r.deb = stage_closed_loop(cfg, r.trained, ControllerKind::DisturbanceEstimation, dir, opt);
        runs.push_back(r.deb->metrics);
    }
    if (!runs.empty()) {
        std::ofstream((dir / "metrics.csv").string()) << metrics_table(runs);
    }
    return r;
}

}  // namespace nnmpc
