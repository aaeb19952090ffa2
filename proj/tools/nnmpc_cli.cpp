#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "nnmpc/harness.hpp"

using namespace nnmpc;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out = "artifacts";
    std::optional<std::uint64_t> seed;
    bool no_cache = false;
    bool quiet = false;

    PipelineConfig load() const {
        auto cfg = load_pipeline_config(config);
        if (seed) cfg.apply_seed(*seed);
        return cfg;
    }

    PipelineOptions options() const {
        PipelineOptions o;
        o.use_cache = !no_cache;
        o.log = quiet ? nullptr : &std::cerr;
        return o;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("-c,--config", c.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    app->add_option("-o,--out", c.out, "Artifacts directory")->capture_default_str();
    app->add_option("-s,--seed", c.seed, "Override the config seed");
    app->add_flag("--no-cache", c.no_cache, "Recompute every stage instead of reusing artifacts");
    app->add_flag("-q,--quiet", c.quiet, "No progress output");
}

void print_summary(const ClosedLoopResult& r) {
    std::cout << to_string(r.kind) << ": " << r.trace.size() << " samples, " << r.metrics.non_converged_steps
              << " non-converged solves, max violation " << r.metrics.max_violation << (r.aborted ? ", ABORTED" : "")
              << "\n";
    for (const auto& e : r.metrics.events)
        std::cout << "  event " << e.kind << " @" << e.sample << ": settling "
                  << (e.settling_samples < 0 ? std::string("never") : std::to_string(e.settling_samples))
                  << " samples, post-event |e| " << e.post_offset << " K\n";
}

std::vector<double> input_sequence(const json& j, Index samples) {
    std::vector<double> u(samples, 0.1);
    if (!j.contains("inputs")) return u;
    const auto sched = io::schedule_from_json(j.at("inputs"));
    for (Index k = 0; k < samples; ++k)
        for (const auto& [start, value] : sched)
            if (start <= static_cast<double>(k)) u[k] = value;
    return u;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Offset-free neural MPC: identification, tuning and closed-loop experiments"};
    app.require_subcommand(1);

    Common gen, trn, tun, run, cmp;
    auto* g = app.add_subcommand("generate", "Simulate the identification experiments and write t,u,y CSVs");
    add_common(g, gen);
    auto* t = app.add_subcommand("train", "Generate (or reuse) data and train the NNARX model");
    add_common(t, trn);
    auto* tu = app.add_subcommand("tune", "Equilibria, checks and integral gains at the scenario setpoints");
    add_common(tu, tun);
    auto* r = app.add_subcommand("run", "Closed loop of the proposed controller on the scenario");
    add_common(r, run);
    auto* c = app.add_subcommand("compare", "Full pipeline: both controllers on the scenario and a metrics table");
    add_common(c, cmp);

    std::string report_dir = "artifacts";
    auto* rep = app.add_subcommand("report", "Print the metrics of an artifacts directory");
    rep->add_option("-o,--out", report_dir, "Artifacts directory")->capture_default_str();

    std::string sim_cfg, sim_out = "plant.csv";
    auto* sim = app.add_subcommand("simulate", "Open-loop plant run; writes t,u_applied,w,Ti,T,Tm");
    sim->add_option("-c,--config", sim_cfg, "Plant run description (JSON)")->required()->check(CLI::ExistingFile);
    sim->add_option("-o,--out", sim_out, "Output CSV")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (g->parsed()) {
            auto cfg = gen.load();
            auto ex = stage_generate(cfg, gen.out, gen.options());
            std::cout << "records: train " << ex.train.length() << ", validation " << ex.validation.length()
                      << ", test " << ex.test.length() << " samples in " << (fs::path(gen.out) / "data") << "\n";
        } else if (t->parsed()) {
            auto cfg = trn.load();
            auto ex = stage_generate(cfg, trn.out, trn.options());
            auto tm = stage_train(cfg, ex, trn.out, trn.options());
            std::cout << "test FIT " << tm.fit << " %, contraction margin " << tm.margin << "\n";
        } else if (tu->parsed()) {
            auto cfg = tun.load();
            auto ex = stage_generate(cfg, tun.out, tun.options());
            auto tm = stage_train(cfg, ex, tun.out, tun.options());
            std::cout << stage_tune(cfg, tm.model, tun.out, tun.options()).dump(2) << "\n";
        } else if (r->parsed()) {
            auto cfg = run.load();
            auto o = run.options();
            o.run_deb = false;
            auto res = run_pipeline(cfg, run.out, o);
            print_summary(*res.proposed);
        } else if (c->parsed()) {
            auto res = run_pipeline(cmp.load(), cmp.out, cmp.options());
            print_summary(*res.proposed);
            print_summary(*res.deb);
            std::ifstream table((fs::path(cmp.out) / "metrics.csv").string());
            std::cout << table.rdbuf();
        } else if (rep->parsed()) {
            const fs::path dir(report_dir);
            bool any = false;
            for (const char* name : {"metrics_proposed.json", "metrics_deb.json"}) {
                if (!fs::exists(dir / name)) continue;
                any = true;
                const json m = read_json_file((dir / name).string());
                std::cout << m.at("controller").get<std::string>() << ":\n";
                for (const auto& e : m.at("events"))
                    std::cout << "  " << e.at("kind").get<std::string>() << " @" << e.at("sample") << ": settling "
                              << e.at("settling_samples") << " samples, post-event |e| " << e.at("post_offset")
                              << " K\n";
                std::cout << "  max violation " << m.at("max_violation") << ", total squared increment "
                          << m.at("total_squared_increment") << ", non-converged " << m.at("non_converged_steps")
                          << "\n";
            }
            if (fs::exists(dir / "training_report.json")) {
                const json tr = read_json_file((dir / "training_report.json").string());
                std::cout << "model: FIT " << tr.at("final_fit") << " %, margin " << tr.at("final_contraction_margin")
                          << ", epochs " << tr.at("epochs_run") << "\n";
            }
            if (!any) throw Error("no metrics found in '" + report_dir + "'");
        } else if (sim->parsed()) {
            const json j = read_json_file(sim_cfg);
            const PlantParams params = j.contains("plant") ? io::plant_params_from_json(j.at("plant")) : PlantParams{};
            const DisturbanceProfile prof =
                j.contains("disturbances") ? io::profile_from_json(j.at("disturbances")) : DisturbanceProfile{};
            const double tau = j.value("sample_time", 120.0);
            PlantState x0;
            if (j.contains("initial_state")) {
                x0 = {j.at("initial_state").at("T").get<double>(), j.at("initial_state").at("Tm").get<double>()};
            } else {
                x0 = plant_equilibrium(j.value("initial_input", 0.1), prof.at(0.0, params), params);
            }
            const Index samples = j.value("samples", Index{100});
            write_plant_csv(input_sequence(j, samples), prof, x0, params, tau, j.value("substeps", 32), sim_out);
            std::cout << "wrote " << samples << " samples to " << sim_out << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
