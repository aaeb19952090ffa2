#pragma once

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"
#include "nnarx.hpp"

namespace nnmpc {

// Water-heater benchmark: a tank heated through a metal plate by a gas burner.
// States: served water temperature T and plate temperature Tm (K). Input: gas flow w_c (kg/s).
// Disturbances: water demand w (kg/s) and inlet temperature Ti (K).

struct PlantParams {
    double tank_area = std::numbers::pi / 4.0;  // A_t, m^2
    double water_density = 997.8;               // rho_w, kg/m^3
    double water_heat = 4180.0;                 // c_w, J/(kg K)
    double plate_mass = 617.32;                 // M_m, kg
    double metal_heat = 481.0;                  // c_m, J/(kg K)
    double radiation = 5.67e-8;                 // sigma, W/(m^2 K^4)
    double k_lm = 3326.4;                       // plate/water exchange, kg/(s^3 K)
    double flame_temp = 1200.0;                 // T_f, K
    double k_f = 8.0;                           // flame exchange, m^2 s/kg
    double water_level = 2.0;                   // z_w, m
    double nominal_demand = 1.0;                // w bar, kg/s
    double nominal_inlet_temp = 298.0;          // Ti bar, K

    void validate() const {
        for (double v : {tank_area, water_density, water_heat, plate_mass, metal_heat, radiation, k_lm, flame_temp,
                         k_f, water_level, nominal_demand, nominal_inlet_temp})
            if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("PlantParams: every parameter must be > 0");
    }
};

struct PlantState {
    double T = 0.0;
    double Tm = 0.0;
};

struct Disturbance {
    double w = 0.0;
    double Ti = 0.0;
};

/// Gas-flow saturation of the benchmark.
inline InputBox benchmark_input_box() { return InputBox::scalar(0.05, 0.18); }

/// Piecewise-constant (zero-order hold) schedules of (start time [s], value).
/// Before the first entry, and for an empty schedule, the nominal value applies.
struct DisturbanceProfile {
    std::vector<std::pair<double, double>> demand;
    std::vector<std::pair<double, double>> inlet_temp;

    void validate() const {
        for (const auto* sched : {&demand, &inlet_temp})
            for (size_t i = 1; i < sched->size(); ++i)
                if (!((*sched)[i].first > (*sched)[i - 1].first))
                    throw ValidationError("DisturbanceProfile: times must be strictly increasing");
        for (const auto& [t, w] : demand)
            if (!(w > 0.0)) throw ValidationError("DisturbanceProfile: demand must be > 0");
    }

    Disturbance at(double t, const PlantParams& p) const {
        return {hold(demand, t, p.nominal_demand), hold(inlet_temp, t, p.nominal_inlet_temp)};
    }

   private:
    static double hold(const std::vector<std::pair<double, double>>& s, double t, double nominal) {
        double v = nominal;
        for (const auto& [start, value] : s) {
            if (start <= t) v = value;
            else break;
        }
        return v;
    }
};

/// Right-hand side of the two-state energy balance.
inline PlantState plant_derivatives(const PlantState& x, double gas_flow, const Disturbance& d,
                                    const PlantParams& p) {
    const double exchange = p.k_lm * p.tank_area * (x.Tm - x.T);
    const double dT = (d.w * (d.Ti - x.T) + exchange / p.water_heat) / (p.water_density * p.tank_area * p.water_level);
    const double Tf4 = std::pow(p.flame_temp, 4), Tm4 = std::pow(x.Tm, 4);
    const double dTm = (-exchange + p.radiation * p.k_f * gas_flow * (Tf4 - Tm4)) / (p.plate_mass * p.metal_heat);
    return {dT, dTm};
}

/// One sampling period of classical RK4 with `substeps` internal steps. The gas flow is clamped
/// into `box` first; disturbances are read from the profile at the start of every substep.
inline PlantState plant_step(const PlantState& x, double gas_flow, const DisturbanceProfile& profile, double t,
                             const PlantParams& p, double sample_time, int substeps = 32,
                             const InputBox& box = benchmark_input_box()) {
    if (!(sample_time > 0.0) || substeps < 1) throw ValidationError("plant_step: need sample_time > 0, substeps >= 1");
    const double wc = std::clamp(gas_flow, box.lower(0), box.upper(0));
    const double h = sample_time / substeps;
    auto axpy = [](const PlantState& a, double s, const PlantState& k) { return PlantState{a.T + s * k.T, a.Tm + s * k.Tm}; };
    PlantState s = x;
    for (int i = 0; i < substeps; ++i) {
        const Disturbance d = profile.at(t + i * h, p);
        auto k1 = plant_derivatives(s, wc, d, p);
        auto k2 = plant_derivatives(axpy(s, h / 2, k1), wc, d, p);
        auto k3 = plant_derivatives(axpy(s, h / 2, k2), wc, d, p);
        auto k4 = plant_derivatives(axpy(s, h, k3), wc, d, p);
        s.T += h / 6 * (k1.T + 2 * k2.T + 2 * k3.T + k4.T);
        s.Tm += h / 6 * (k1.Tm + 2 * k2.Tm + 2 * k3.Tm + k4.Tm);
    }
    if (!std::isfinite(s.T) || !std::isfinite(s.Tm) || s.T <= 0.0 || s.Tm <= 0.0)
        throw SimulationFault("plant_step: non-finite or non-physical state");
    return s;
}

/// Steady state for constant (w_c, w, Ti): water balance solved in closed form for T given Tm,
/// plate balance by bisection on Tm in [Ti, T_f].
inline PlantState plant_equilibrium(double gas_flow, const Disturbance& d, const PlantParams& p) {
    const double kappa = p.k_lm * p.tank_area / p.water_heat;
    auto water_T = [&](double Tm) { return (d.w * d.Ti + kappa * Tm) / (d.w + kappa); };
    auto plate_rate = [&](double Tm) {
        return plant_derivatives({water_T(Tm), Tm}, gas_flow, d, p).Tm;
    };
    double lo = d.Ti, hi = p.flame_temp;
    if (plate_rate(lo) < 0.0 || plate_rate(hi) > 0.0) throw EquilibriumNotFound("plant_equilibrium: no bracket");
    for (int it = 0; it < 200 && hi - lo > 1e-13 * hi; ++it) {
        double mid = 0.5 * (lo + hi);
        (plate_rate(mid) > 0.0 ? lo : hi) = mid;
    }
    const double Tm = 0.5 * (lo + hi);
    return {water_T(Tm), Tm};
}

/// Uniformly sampled input/output record.
struct IoSequence {
    double sample_time = 0.0;
    Mat u;  // m x T
    Mat y;  // p x T

    Index length() const { return u.cols(); }

    void validate(Index min_length = 1) const {
        if (!(sample_time > 0.0)) throw ValidationError("IoSequence: sample time must be > 0");
        if (u.cols() != y.cols()) throw DimensionError("IoSequence: u and y lengths differ");
        if (u.cols() < min_length) throw ValidationError("IoSequence: record too short");
    }

    IoSequence slice(Index start, Index len) const {
        return {sample_time, u.middleCols(start, len), y.middleCols(start, len)};
    }
};

/// Stateful wrapper owning one simulation run.
class PlantSimulator {
   public:
    PlantSimulator(PlantParams params, DisturbanceProfile profile, PlantState x0, double sample_time,
                   int substeps = 32, InputBox box = benchmark_input_box())
        : params_(std::move(params)), profile_(std::move(profile)), x_(x0), tau_(sample_time), substeps_(substeps),
          box_(std::move(box)) {
        params_.validate();
        profile_.validate();
    }

    double time() const { return t_; }
    const PlantState& state() const { return x_; }
    Disturbance disturbance() const { return profile_.at(t_, params_); }
    const InputBox& box() const { return box_; }

    /// Applies `gas_flow` (clamped) for one sample and returns the value actually applied.
    double advance(double gas_flow) {
        const double applied = std::clamp(gas_flow, box_.lower(0), box_.upper(0));
        x_ = plant_step(x_, applied, profile_, t_, params_, tau_, substeps_, box_);
        t_ += tau_;
        return applied;
    }

   private:
    PlantParams params_;
    DisturbanceProfile profile_;
    PlantState x_;
    double tau_;
    int substeps_;
    InputBox box_;
    double t_ = 0.0;
};

struct ExperimentOptions {
    int substeps = 32;
    double noise_std = 0.0;  // additive output noise, K
    std::uint64_t noise_seed = 0;
};

/// Forces the plant with `u_seq`; y_k is the temperature at t_k = k * sample_time, u_k is applied on [t_k, t_k+1).
inline IoSequence open_loop_experiment(const std::vector<double>& u_seq, const DisturbanceProfile& profile,
                                       const PlantState& x0, const PlantParams& params, double sample_time,
                                       const ExperimentOptions& opt = {}) {
    PlantSimulator sim(params, profile, x0, sample_time, opt.substeps);
    std::mt19937_64 rng(opt.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    IoSequence seq{sample_time, Mat(1, u_seq.size()), Mat(1, u_seq.size())};
    for (size_t k = 0; k < u_seq.size(); ++k) {
        double y = sim.state().T;
        if (opt.noise_std > 0.0) y += opt.noise_std * noise(rng);
        seq.y(0, k) = y;
        seq.u(0, k) = sim.advance(u_seq[k]);
    }
    return seq;
}

}  // namespace nnmpc
