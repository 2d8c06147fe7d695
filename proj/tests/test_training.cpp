#include <cmath>
#include <sstream>

#include "doctest.h"
#include "grad_check.hpp"
#include "loraxs/errors.hpp"
#include "loraxs/experiments.hpp"
#include "loraxs/training.hpp"
#include "test_support.hpp"

using namespace loraxs;
using loraxs::testing::random_matrix;

namespace {

LinearStack single_layer(const Matrix& w, std::optional<Adapter> adapter = std::nullopt) {
    LinearStack s;
    s.layers.push_back(Layer{w, std::move(adapter), Activation::none, false});
    return s;
}

TrainConfig aligned_config(std::uint64_t seed) {
    TrainConfig c;
    c.adapter_lr = 0.05;
    c.epochs = 10;
    c.batch_size = 32;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("forward_model examples") {
    const Matrix w = random_matrix(4, 3, 1);
    const Matrix x = random_matrix(3, 5, 2);
    CHECK(forward_model(single_layer(w), x).predictions == matmul(w, x));
    CHECK(predict(single_layer(w, init_loraxs_svd(w, 2, 4.0, 0.0, 1, 1)), x) == matmul(w, x));

    LinearStack two;
    const Matrix w1 = Matrix::from_rows({{1, -2, 0.5}, {0.25, 1, -1}});
    const Matrix w2 = Matrix::from_rows({{2, -1}, {0.5, 3}});
    two.layers.push_back(Layer{w1, std::nullopt, Activation::relu, false});
    two.layers.push_back(Layer{w2, std::nullopt, Activation::none, false});
    const Matrix x32 = Matrix::from_rows({{1, -1}, {0.5, 2}, {-2, 0.25}});
    Matrix hidden = matmul(w1, x32);
    for (double& v : hidden.data()) v = std::max(v, 0.0);
    CHECK(max_abs_diff(predict(two, x32), matmul(w2, hidden)) < 1e-14);

    CHECK_THROWS_AS(predict(two, Matrix(2, 2)), ShapeError);
}

TEST_CASE("gelu uses the exact erf form") {
    LinearStack s = single_layer(Matrix::identity(1));
    s.layers[0].activation = Activation::gelu;
    const double x = 0.7;
    const double want = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    CHECK(predict(s, Matrix::from_rows({{x}}))(0, 0) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("stack validation") {
    LinearStack s;
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.layers.push_back(Layer{Matrix(3, 2), std::nullopt, Activation::none, false});
    s.layers.push_back(Layer{Matrix(2, 2), std::nullopt, Activation::none, false});
    CHECK_THROWS_AS(s.validate(), ShapeError);
    s.layers[1].weight = Matrix(2, 3);
    s.layers[0].weight_trainable = true;
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.layers[0].weight_trainable = false;
    s.layers[0].adapter = init_loraxs_random(4, 2, 1, 1.0, 0.0, 0);
    CHECK_THROWS_AS(s.validate(), ShapeError);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
    const Matrix w = random_matrix(5, 4, 3);
    LinearStack s = single_layer(w, init_loraxs_svd(w, 2, 2.0, 0.4, 1, 2));
    const auto fwd = forward_model(s, random_matrix(4, 3, 4));
    const auto g = backward_adapter_grads(s, fwd.cache, Matrix(5, 3));
    CHECK(*g.layers[0].latent == Matrix(2, 2));
    CHECK(g.input == Matrix(4, 3));
}

TEST_CASE("backward: scalar hand example dL/dr = 4") {
    LoraXsAdapter a(Matrix::from_rows({{1}}), Matrix::from_rows({{2}}), Matrix::from_rows({{0.5}}), 1.0,
                    InitKind::svd, 0, 0.0);
    LinearStack s = single_layer(Matrix::from_rows({{1}}), a);
    const auto fwd = forward_model(s, Matrix::from_rows({{1}}));
    CHECK(fwd.predictions(0, 0) == doctest::Approx(2.0));
    // loss = h^2 / 2, so the upstream is h itself.
    const auto g = backward_adapter_grads(s, fwd.cache, fwd.predictions);
    CHECK((*g.layers[0].latent)(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("backward: random 8x6 rank-3 layer against finite differences") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Matrix w = random_matrix(8, 6, 10 + seed);
        LinearStack s = single_layer(w, init_loraxs_svd(w, 3, 6.0, 0.5, seed, seed));
        Dataset d{random_matrix(6, 7, 20 + seed), random_matrix(8, 7, 30 + seed), {}};
        CHECK(loraxs::testing::worst_gradient_error(s, d) < 1e-6);
    }
}

TEST_CASE("backward: input gradient and cache mismatch") {
    const Matrix w = random_matrix(5, 4, 5);
    LinearStack s = single_layer(w, init_loraxs_svd(w, 2, 2.0, 0.4, 1, 2));
    const Matrix x = random_matrix(4, 3, 6);
    const Matrix y = random_matrix(5, 3, 7);
    Dataset d{x, y, {}};
    const auto fwd = forward_model(s, x);
    const auto g = backward_adapter_grads(s, fwd.cache, compute_loss(Head::mse, fwd.predictions, d).upstream);
    const LossFn fn = [&](const Matrix& xx) { return compute_loss(Head::mse, predict(s, xx), d).loss; };
    CHECK(max_abs_diff(g.input, finite_diff_grad(fn, x, 1e-6)) < 1e-8);

    LinearStack other = s;
    other.layers.push_back(Layer{Matrix::identity(5), std::nullopt, Activation::none, false});
    CHECK_THROWS_AS(backward_adapter_grads(other, fwd.cache, fwd.predictions), StateError);
    CHECK_THROWS_AS(backward_adapter_grads(s, fwd.cache, Matrix(5, 2)), ShapeError);
}

TEST_CASE("finite_diff_grad examples") {
    const Matrix r = random_matrix(3, 3, 8);
    const LossFn quad = [](const Matrix& p) {
        double s = 0.0;
        for (double v : p.data()) s += v * v;
        return 0.5 * s;
    };
    CHECK(max_abs_diff(finite_diff_grad(quad, r, 1e-5), r) < 1e-8);
    CHECK(finite_diff_grad([](const Matrix&) { return 3.0; }, r, 1e-5) == Matrix(3, 3));
    CHECK_THROWS_AS(finite_diff_grad(quad, r, 0.0), ParameterError);
}

TEST_CASE("finite_diff_grad agrees with backprop on a two-layer model") {
    const Matrix w1 = random_matrix(7, 5, 11);
    const Matrix w2 = random_matrix(4, 7, 12);
    LinearStack s;
    s.layers.push_back(Layer{w1, init_loraxs_svd(w1, 3, 4.0, 0.3, 1, 2), Activation::gelu, false});
    s.layers.push_back(Layer{w2, init_loraxs_random(4, 7, 2, 4.0, 0.3, 3), Activation::none, false});
    Dataset d{random_matrix(5, 6, 13), random_matrix(4, 6, 14), {}};
    CHECK(loraxs::testing::worst_gradient_error(s, d) < 1e-6);
}

TEST_CASE("property: gradients of random models match finite differences") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto p = loraxs::testing::random_problem(seed);
        CAPTURE(seed);
        CHECK(loraxs::testing::worst_gradient_error(p.model, p.data) < 1e-6);
    }
}

TEST_CASE("losses") {
    const Matrix pred = Matrix::from_rows({{1, 2}, {3, 4}});
    Dataset d{Matrix(1, 2), Matrix::from_rows({{0, 2}, {3, 2}}), {1, 0}};
    const auto mse = compute_loss(Head::mse, pred, d);
    CHECK(mse.loss == doctest::Approx(5.0 / 4.0));
    CHECK(max_abs_diff(mse.upstream, Matrix::from_rows({{0.5, 0}, {0, 1}})) < 1e-15);

    const auto ce = compute_loss(Head::softmax_cross_entropy, pred, d);
    const double l0 = std::log(std::exp(1.0) + std::exp(3.0)) - 3.0;
    const double l1 = std::log(std::exp(2.0) + std::exp(4.0)) - 2.0;
    CHECK(ce.loss == doctest::Approx((l0 + l1) / 2.0));
    Dataset bad = d;
    bad.labels = {0, 5};
    CHECK_THROWS_AS(compute_loss(Head::softmax_cross_entropy, pred, bad), ParameterError);
}

TEST_CASE("adamw_step examples") {
    const AdamWHyper h{0.1, 0.9, 0.999, 1e-8, 0.0};
    Matrix p = Matrix::from_rows({{1.0}});
    auto st = AdamState::zeros_like(p);
    adamw_step(p, Matrix(1, 1), st, 1, h);
    CHECK(p(0, 0) == 1.0);

    adamw_step(p, Matrix::from_rows({{1.0}}), st, 1, h);
    CHECK(p(0, 0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));

    Matrix q = Matrix::from_rows({{1.0}});
    auto sq = AdamState::zeros_like(q);
    adamw_step(q, Matrix(1, 1), sq, 1, AdamWHyper{0.1, 0.9, 0.999, 1e-8, 0.01});
    CHECK(q(0, 0) == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("adamw_step refuses bad input") {
    Matrix p = Matrix::from_rows({{1.0, 2.0}});
    auto st = AdamState::zeros_like(p);
    const Matrix before = p;
    CHECK_THROWS_AS(adamw_step(p, Matrix::from_rows({{0.5, std::nan("")}}), st, 1, AdamWHyper{}), NumericError);
    CHECK(p == before);
    CHECK(st.m == Matrix(1, 2));
    CHECK_THROWS_AS(adamw_step(p, Matrix(1, 2), st, 0, AdamWHyper{}), ParameterError);
    CHECK_THROWS_AS(adamw_step(p, Matrix(2, 1), st, 1, AdamWHyper{}), ShapeError);
}

TEST_CASE("lr_multiplier examples") {
    CHECK(lr_multiplier(0, 100, 0.06, Scheduler::linear) == 0.0);
    CHECK(warmup_steps(100, 0.06) == 6);
    CHECK(lr_multiplier(6, 100, 0.06, Scheduler::linear) == 1.0);
    CHECK(lr_multiplier(6, 100, 0.06, Scheduler::cosine) == 1.0);
    CHECK(lr_multiplier(3, 100, 0.06, Scheduler::cosine) == doctest::Approx(0.5));
    CHECK(lr_multiplier(100, 100, 0.06, Scheduler::cosine) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lr_multiplier(100, 100, 0.06, Scheduler::linear) == 0.0);
    CHECK(lr_multiplier(53, 100, 0.06, Scheduler::linear) == doctest::Approx(0.5));
    CHECK(lr_multiplier(0, 10, 0.0, Scheduler::linear) == 1.0);
    CHECK_THROWS_AS(lr_multiplier(11, 10, 0.0, Scheduler::linear), ParameterError);
    CHECK_THROWS_AS(lr_multiplier(0, 0, 0.0, Scheduler::linear), ParameterError);
}

TEST_CASE("property: scheduler bounds and continuity at the warmup boundary") {
    for (std::size_t total : {1, 2, 7, 16, 100, 333, 1000}) {
        for (double ratio : {0.0, 0.06, 0.1, 0.5, 0.99}) {
            for (auto sched : {Scheduler::linear, Scheduler::cosine}) {
                for (std::size_t step = 0; step <= total; ++step) {
                    const double m = lr_multiplier(step, total, ratio, sched);
                    CHECK(m >= 0.0);
                    CHECK(m <= 1.0);
                }
                const std::size_t warm = warmup_steps(total, ratio);
                if (warm == 0 || warm >= total) continue;
                // The ramp extended to the boundary meets the decay branch there.
                const double ramp_end = static_cast<double>(warm) / static_cast<double>(warm);
                const double decay_start = lr_multiplier(warm, total, ratio, sched);
                CHECK(std::abs(ramp_end - decay_start) <= 1.0 / static_cast<double>(total));
            }
        }
    }
}

TEST_CASE("train config validation and parsing") {
    TrainConfig c;
    c.validate();
    c.adapter_lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = TrainConfig{};
    c.warmup_ratio = 1.0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = TrainConfig{};
    c.adam_beta2 = 1.0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    CHECK(parse_scheduler("cosine") == Scheduler::cosine);
    CHECK(parse_activation("gelu") == Activation::gelu);
    CHECK(parse_head("softmax_cross_entropy") == Head::softmax_cross_entropy);
    CHECK_THROWS_AS(parse_scheduler("step"), ParameterError);
}

TEST_CASE("epoch_order is a seeded permutation") {
    const auto a = epoch_order(50, 3, 0);
    CHECK(a == epoch_order(50, 3, 0));
    CHECK(a != epoch_order(50, 3, 1));
    CHECK(a != epoch_order(50, 4, 0));
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("train: zero epochs leaves the parameters alone") {
    TaskSpec spec;
    spec.in_dim = spec.out_dim = 16;
    spec.n_samples = 40;
    auto task = gen_task(spec);
    auto model = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 0);
    TrainConfig c = aligned_config(0);
    c.epochs = 0;
    const auto run = train(model, task.train, c);
    CHECK(run.steps == 0);
    CHECK(run.loss_by_epoch.empty());
    CHECK(run.final_params_digest == run.initial_params_digest);
}

TEST_CASE("train: errors") {
    TaskSpec spec;
    spec.in_dim = spec.out_dim = 8;
    spec.n_samples = 20;
    auto task = gen_task(spec);
    auto model = build_model(task, 2, InitKind::svd, 8.0, 1e-5, 0);
    TrainConfig c = aligned_config(0);
    c.batch_size = 17;
    CHECK_THROWS_AS(train(model, task.train, c), ParameterError);
    c.batch_size = 4;
    c.adapter_lr = 1e200;
    c.warmup_ratio = 0.0;
    try {
        train(model, task.train, c);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("train: determinism, frozen invariance and CSV stream") {
    TaskSpec spec;
    spec.in_dim = spec.out_dim = 24;
    spec.n_samples = 100;
    auto task = gen_task(spec);
    auto m1 = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 5);
    auto m2 = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 5);
    const Digest frozen = frozen_digest(m1);
    std::ostringstream csv;
    std::size_t epochs_seen = 0;
    TrainHooks hooks{&csv, [&](std::size_t e, const LinearStack&) { epochs_seen = e; }};
    TrainConfig c = aligned_config(9);
    c.epochs = 3;
    c.scheduler = Scheduler::cosine;
    const auto r1 = train(m1, task.train, c, hooks);
    const auto r2 = train(m2, task.train, c);
    CHECK(r1.final_params_digest == r2.final_params_digest);
    CHECK(r1.loss_by_epoch == r2.loss_by_epoch);
    CHECK(r1.final_params_digest != r1.initial_params_digest);
    CHECK(frozen_digest(m1) == frozen);
    CHECK(epochs_seen == 3);
    CHECK(r1.config_echo.scheduler == Scheduler::cosine);

    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,step,loss,lr_multiplier");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == r1.steps);
    CHECK(r1.steps == 3 * 3);
}

TEST_CASE("train: two parameter groups update the trainable head") {
    const Matrix w1 = random_matrix(6, 5, 1);
    const Matrix w2 = random_matrix(3, 6, 2);
    LinearStack s;
    s.layers.push_back(Layer{w1, init_loraxs_svd(w1, 2, 2.0, 1e-5, 1, 1), Activation::relu, false});
    s.layers.push_back(Layer{w2, std::nullopt, Activation::none, true});
    s.head = Head::softmax_cross_entropy;
    Dataset d{random_matrix(5, 12, 3), Matrix{}, {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}};
    TrainConfig c = aligned_config(1);
    c.head_lr = 0.01;
    c.epochs = 2;
    c.batch_size = 4;
    const Digest frozen = frozen_digest(s);
    train(s, d, c);
    CHECK_FALSE(s.layers[1].weight == w2);
    CHECK(s.layers[0].weight == w1);
    CHECK(frozen_digest(s) == frozen);
}

TEST_CASE("train: aligned task with svd init reaches 1e-3 of the initial loss") {
    auto task = gen_task(TaskSpec{});
    auto model = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 0);
    const auto run = train(model, task.train, aligned_config(0));
    CHECK(run.loss_by_epoch.back() < 1e-3 * run.initial_loss);
}

TEST_CASE("property: aligned task training lowers the loss for >= 95% of seeds") {
    std::size_t improved = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        TaskSpec spec;
        spec.in_dim = spec.out_dim = 32;
        spec.n_samples = 160;
        spec.seed = seed;
        auto task = gen_task(spec);
        auto model = build_model(task, 4, InitKind::svd, 8.0, 1e-5, seed);
        TrainConfig c = aligned_config(seed);
        c.epochs = 4;
        const auto run = train(model, task.train, c);
        if (run.loss_by_epoch.back() < run.initial_loss) ++improved;
    }
    CHECK(improved >= 19);
}
