#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <nnmpc/training.hpp>

#include "test_util.hpp"

using namespace nnmpc;
using namespace nnmpc::testing;

namespace {

IoSequence random_record(Index T, std::mt19937_64& rng) {
    IoSequence s{120.0, random_matrix(1, T, rng), random_matrix(1, T, rng)};
    return s;
}

// Record generated by a known model from a random washout, in the model's own (normalized) units.
IoSequence model_record(const NnarxModel& model, const std::vector<double>& u, std::mt19937_64& rng) {
    const Index N = model.horizon(), T = static_cast<Index>(u.size());
    IoSequence s{1.0, Mat(1, T), Mat(1, T)};
    for (Index k = 0; k < T; ++k) s.u(0, k) = u[k];
    s.y.leftCols(N + 1) = random_matrix(1, N + 1, rng, 0.1);
    Vec x = model.state_from_history(s.y.middleCols(1, N), s.u.middleCols(0, N));
    for (Index k = N; k + 1 < T; ++k) {
        x = model.step(x, s.u.col(k));
        s.y.col(k + 1) = model.output(x);
    }
    return s;
}

}  // namespace

TEST(Mprs, ForcedDwellGivesExactPlateaus) {
    auto u = generate_mprs({0.05, 0.18}, 10, 10, 30, 3);
    ASSERT_EQ(u.size(), 30u);
    int plateaus = 1;
    for (size_t k = 1; k < u.size(); ++k)
        if (u[k] != u[k - 1]) ++plateaus;
    EXPECT_EQ(plateaus, 3);
    for (size_t k = 0; k < u.size(); k += 10)
        for (size_t j = 1; j < 10; ++j) EXPECT_EQ(u[k + j], u[k]);
}

TEST(Mprs, DeterministicAndWithinBox) {
    auto levels = default_mprs_levels();
    ASSERT_EQ(levels.size(), 8u);
    EXPECT_DOUBLE_EQ(levels.front(), 0.05);
    EXPECT_DOUBLE_EQ(levels.back(), 0.18);
    auto a = generate_mprs(levels, 10, 50, 2500, 42);
    auto b = generate_mprs(levels, 10, 50, 2500, 42);
    auto c = generate_mprs(levels, 10, 50, 2500, 43);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    for (double v : a) {
        EXPECT_GE(v, 0.05);
        EXPECT_LE(v, 0.18);
    }
    // every plateau except possibly the truncated last one lasts 10..50 samples
    size_t start = 0;
    for (size_t k = 1; k <= a.size(); ++k) {
        if (k == a.size() || a[k] != a[k - 1]) {
            if (k < a.size()) {
                EXPECT_GE(k - start, 10u);
                EXPECT_LE(k - start, 50u);
            }
            start = k;
        }
    }
}

TEST(Mprs, RejectsBadArguments) {
    EXPECT_THROW(generate_mprs({}, 1, 2, 10, 0), ValidationError);
    EXPECT_THROW(generate_mprs({0.1}, 0, 2, 10, 0), ValidationError);
    EXPECT_THROW(generate_mprs({0.1}, 5, 2, 10, 0), ValidationError);
    EXPECT_THROW(generate_mprs({0.3}, 1, 2, 10, 0), ValidationError);
}

TEST(Subsequences, AreSlicesOfTheRecord) {
    std::mt19937_64 rng(5);
    auto rec = random_record(200, rng);
    auto windows = extract_subsequences(rec, 40, 25, 9);
    ASSERT_EQ(windows.size(), 25u);
    for (const auto& w : windows) {
        ASSERT_EQ(w.length(), 40);
        bool found = false;
        for (Index s = 0; s + 40 <= rec.length() && !found; ++s)
            found = w.u == rec.u.middleCols(s, 40) && w.y == rec.y.middleCols(s, 40);
        EXPECT_TRUE(found);
    }
    EXPECT_THROW(extract_subsequences(rec, 201, 1, 0), ValidationError);
}

TEST(Scaling, TrainingPartitionHasZeroMeanUnitVariance) {
    std::mt19937_64 rng(6);
    std::vector<IoSequence> train;
    for (int i = 0; i < 4; ++i) {
        auto s = random_record(50, rng);
        s.u.array() = 0.1 + 0.03 * s.u.array();
        s.y.array() = 320 + 5 * s.y.array();
        train.push_back(s);
    }
    auto sc = fit_scaling(train);
    auto n = normalize(train, sc);
    double su = 0, sy = 0, su2 = 0, sy2 = 0, cnt = 0;
    for (const auto& s : n) {
        su += s.u.sum();
        sy += s.y.sum();
        su2 += s.u.squaredNorm();
        sy2 += s.y.squaredNorm();
        cnt += s.length();
    }
    EXPECT_NEAR(su / cnt, 0.0, 1e-12);
    EXPECT_NEAR(sy / cnt, 0.0, 1e-12);
    EXPECT_NEAR(su2 / cnt, 1.0, 1e-10);
    EXPECT_NEAR(sy2 / cnt, 1.0, 1e-10);
    auto back = denormalize(n[0], sc);
    EXPECT_LT((back.y - train[0].y).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FitIndex, HandValues) {
    Mat yp(1, 3), ym(1, 3);
    yp << 1, 2, 3;
    ym << 1, 2, 4;
    // sum |e| = 1, sum |yp - 2| = 2
    EXPECT_DOUBLE_EQ(fit_index(ym, yp), 50.0);
    EXPECT_DOUBLE_EQ(fit_index(yp, yp), 100.0);
    EXPECT_DOUBLE_EQ(fit_index(Mat::Constant(1, 3, 2.0), yp), 0.0);
    EXPECT_THROW(fit_index(Mat::Constant(1, 3, 2.0), Mat::Constant(1, 3, 2.0)), ValidationError);
    EXPECT_THROW(fit_index(Mat::Zero(1, 2), Mat::Zero(1, 3)), DimensionError);
}

TEST(Washout, MatchesModelSimulation) {
    std::mt19937_64 rng(7);
    auto model = random_model(3, 1, {6}, rng);
    auto rec = random_record(30, rng);
    Mat y = simulate_from_washout(model, rec);
    Vec x0 = model.state_from_history(rec.y.middleCols(1, 3), rec.u.middleCols(0, 3));
    Mat ys = model.simulate(x0, rec.u.middleCols(3, 26));
    ASSERT_EQ(y.cols(), 26);
    EXPECT_LT((y - ys.rightCols(26)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SimulationLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    for (auto act : {Activation::Tanh, Activation::Identity}) {
        auto model = random_model(3, 1, {5, 4}, rng, act, 0.4);
        std::vector<IoSequence> batch{random_record(25, rng), random_record(25, rng)};
        PenaltyConfig pen{0.3, 0.2};
        auto res = simulation_loss(model, batch, pen);
        Vec theta = model.params().flatten();
        auto loss_at = [&](const Vec& th) {
            FfnnParams f = model.params();
            f.unflatten(th);
            return simulation_loss(model.with_params(f), batch, pen, false).loss;
        };
        Vec fd = fd_gradient(loss_at, theta, 1e-6);
        EXPECT_LT(rel_error(res.gradient.flatten(), fd), 1e-4) << to_string(act);
    }
}

TEST(SimulationLoss, PenaltyIsAdditive) {
    std::mt19937_64 rng(9);
    auto model = random_model(2, 1, {8}, rng);
    std::vector<IoSequence> batch{random_record(20, rng)};
    auto plain = simulation_loss(model, batch, {0.0, 0.0});
    PenaltyConfig pen{0.1, 0.95};
    auto with = simulation_loss(model, batch, pen);
    const double r = contraction_margin(model.params());
    EXPECT_NEAR(with.loss - plain.loss, 0.1 * std::log1p(std::exp(r - 0.95)), 1e-12);
    EXPECT_DOUBLE_EQ(with.mse, plain.mse);
}

TEST(SimulationLoss, ZeroOnExactModel) {
    std::mt19937_64 rng(10);
    auto model = contractive_model(3, 1, {6}, rng, 0.8);
    auto u = generate_mprs({-1.0, 0.0, 1.0}, 2, 6, 60, 1, InputBox::scalar(-2, 2));
    std::vector<IoSequence> batch{model_record(model, u, rng)};
    auto res = simulation_loss(model, batch, {0.0, 0.0});
    EXPECT_LT(res.mse, 1e-28);
    EXPECT_LT(res.gradient.flatten().norm(), 1e-12);
}

TEST(Training, PatienceOneWithZeroLearningRateStopsAfterTwoEpochs) {
    std::mt19937_64 rng(11);
    auto model = random_model(2, 1, {4}, rng);
    Dataset d;
    d.train = {random_record(20, rng), random_record(20, rng)};
    d.validation = {random_record(20, rng)};
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.patience = 1;
    cfg.max_epochs = 50;
    auto res = train_once(model, d, cfg);
    EXPECT_EQ(res.epochs_run, 2);
    EXPECT_EQ(res.best_epoch, 1);
}

TEST(Training, ReturnsBestValidationSnapshot) {
    std::mt19937_64 rng(12);
    auto teacher = contractive_model(2, 1, {6}, rng, 0.7);
    auto u = generate_mprs({-1.0, -0.3, 0.4, 1.0}, 2, 8, 400, 2, InputBox::scalar(-2, 2));
    auto rec = model_record(teacher, u, rng);
    Dataset d;
    d.train = extract_subsequences(rec, 40, 16, 1);
    d.validation = extract_subsequences(rec, 40, 4, 2);
    ModelConfig mc{2, {6}, Activation::Tanh};
    NnarxModel init(2, init_params(4, 1, 1, mc, 3));
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.max_epochs = 40;
    cfg.batch_size = 4;
    auto res = train_once(init, d, cfg);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : res.history) best = std::min(best, e.validation_loss);
    EXPECT_EQ(res.best_validation_loss, best);
    EXPECT_EQ(simulation_loss(res.model, d.validation, {0, 0}, false).mse, best);
    EXPECT_LT(best, res.history.front().validation_loss);
}

TEST(Training, LinearPlantIsLearnedWithIdentityActivation) {
    std::mt19937_64 rng(13);
    auto teacher = contractive_model(2, 1, {3}, rng, 0.6, Activation::Identity);
    auto u = generate_mprs({-1.0, -0.5, 0.0, 0.5, 1.0}, 1, 6, 600, 4, InputBox::scalar(-2, 2));
    auto rec = model_record(teacher, u, rng);
    Dataset d;
    d.train = extract_subsequences(rec, 50, 20, 5);
    d.validation = extract_subsequences(rec, 50, 5, 6);
    ModelConfig mc{2, {3}, Activation::Identity};
    NnarxModel init(2, init_params(4, 1, 1, mc, 7));
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.max_epochs = 500;
    cfg.patience = 500;
    cfg.batch_size = 5;
    cfg.penalty.weight = 0.0;
    auto res = train_once(init, d, cfg);
    EXPECT_LT(res.best_validation_loss, 1e-6);
}

TEST(Training, ContractionGateRetrainsWithLargerPenalty) {
    std::mt19937_64 rng(14);
    auto model = contractive_model(2, 1, {4}, rng, 3.0);
    Dataset d;
    d.train = {random_record(15, rng)};
    d.validation = {random_record(15, rng)};
    TrainConfig cfg;
    cfg.learning_rate = 0.0;  // weights never move, so the gate cannot be met
    cfg.max_epochs = 2;
    cfg.max_gate_retries = 2;
    EXPECT_THROW(train(model, d, cfg), TrainingDiverged);
    auto ok = contractive_model(2, 1, {4}, rng, 0.5);
    auto res = train(ok, d, cfg);
    EXPECT_EQ(res.gate_retries, 0);
    EXPECT_LT(res.final_margin, 1.0);
}

TEST(Training, NonFiniteLossThrows) {
    std::mt19937_64 rng(15);
    auto model = random_model(2, 1, {4}, rng);
    Dataset d;
    auto bad = random_record(15, rng);
    bad.y(0, 8) = std::nan("");
    d.train = {bad};
    d.validation = {random_record(15, rng)};
    EXPECT_THROW(train_once(model, d, TrainConfig{}), TrainingDiverged);
}

TEST(CsvIo, RoundTrip) {
    std::mt19937_64 rng(16);
    auto rec = random_record(12, rng);
    auto path = (std::filesystem::temp_directory_path() / "nnmpc_io_roundtrip.csv").string();
    write_io_csv(rec, path);
    auto back = read_io_csv(path);
    std::remove(path.c_str());
    EXPECT_EQ(back.sample_time, 120.0);
    EXPECT_EQ(back.u, rec.u);
    EXPECT_EQ(back.y, rec.y);
}

TEST(Report, ContainsRequiredFields) {
    TrainResult r{NnarxModel(1, FfnnParams::zeros(2, 1, 1, {2}, Activation::Tanh))};
    r.epochs_run = 3;
    r.best_epoch = 2;
    r.final_margin = 0.5;
    TrainConfig cfg;
    cfg.seed = 99;
    auto j = training_report(r, cfg, 91.5);
    EXPECT_EQ(j["seed"], 99);
    EXPECT_EQ(j["epochs_run"], 3);
    EXPECT_EQ(j["best_epoch"], 2);
    EXPECT_EQ(j["final_fit"], 91.5);
    EXPECT_EQ(j["final_contraction_margin"], 0.5);
    auto c = train_config_from_json(j["config"]);
    EXPECT_EQ(c.seed, 99u);
}
