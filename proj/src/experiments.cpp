#include "loraxs/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <thread>

#include <fmt/format.h>

#include "loraxs/errors.hpp"
#include "loraxs/linalg.hpp"
#include "loraxs/rng.hpp"

namespace loraxs {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Random matrix with orthonormal singular vectors and a geometric spectrum.
Matrix spectral_matrix(std::size_t m, std::size_t n, double top, double decay, Rng& rng) {
    const std::size_t k = std::min(m, n);
    auto basis = [&](std::size_t rows) {
        auto qr = qr_thin(rng.gaussian(rows, k));
        complete_orthonormal(qr.q, qr.deficient_columns);
        return std::move(qr.q);
    };
    Matrix u = basis(m);
    const Matrix v = basis(n);
    double s = top;
    for (std::size_t j = 0; j < k; ++j, s *= decay)
        for (std::size_t i = 0; i < m; ++i) u(i, j) *= s;
    return matmul_nt(u, v);
}

std::size_t train_count(std::size_t n_samples) { return n_samples * 4 / 5; }

}  // namespace

std::string_view to_string(TaskKind k) noexcept {
    switch (k) {
    case TaskKind::random_teacher: return "random_teacher";
    case TaskKind::blobs_classification: return "blobs_classification";
    default: return "aligned_teacher";
    }
}

TaskKind parse_task_kind(std::string_view text) {
    if (text == "aligned_teacher" || text == "aligned") return TaskKind::aligned_teacher;
    if (text == "random_teacher" || text == "random") return TaskKind::random_teacher;
    if (text == "blobs_classification" || text == "blobs") return TaskKind::blobs_classification;
    throw ParameterError(fmt::format("unknown task kind '{}'", text));
}

void TaskSpec::validate() const {
    if (in_dim == 0 || out_dim == 0) throw ParameterError("task dimensions must be positive");
    if (kind == TaskKind::blobs_classification) {
        if (out_dim < 2) throw ParameterError("blobs need at least two classes");
    } else {
        if (!hidden.empty()) throw ParameterError("teacher tasks use a single layer; hidden sizes are for blobs");
        if (rank_star < 1 || rank_star > std::min(in_dim, out_dim)) {
            throw ParameterError(fmt::format("rank_star {} outside [1, {}]", rank_star, std::min(in_dim, out_dim)));
        }
    }
    for (auto h : hidden)
        if (h == 0) throw ParameterError("hidden widths must be positive");
    if (!(noise_std >= 0.0)) throw ParameterError("noise_std must be >= 0");
    if (n_samples < 5) throw ParameterError("need at least 5 samples for an 80/20 split");
    if (!(spectral_decay > 0.0 && spectral_decay <= 1.0)) throw ParameterError("spectral_decay must lie in (0, 1]");
    if (!(top_singular > 0.0)) throw ParameterError("top_singular must be positive");
    if (!(teacher_scale >= 0.0)) throw ParameterError("teacher_scale must be >= 0");
}

SyntheticTask gen_task(const TaskSpec& spec) {
    spec.validate();
    SyntheticTask task;
    task.spec = spec;
    Rng rng(spec.seed, streams::kTask);
    const std::size_t n_train = train_count(spec.n_samples);
    std::vector<std::size_t> train_idx(n_train);
    std::vector<std::size_t> eval_idx(spec.n_samples - n_train);
    for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
    for (std::size_t i = n_train; i < spec.n_samples; ++i) eval_idx[i - n_train] = i;

    Dataset all;
    if (spec.kind == TaskKind::blobs_classification) {
        task.head = Head::softmax_cross_entropy;
        std::vector<std::size_t> dims{spec.in_dim};
        dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
        dims.push_back(spec.out_dim);
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            task.base_weights.push_back(spectral_matrix(dims[l + 1], dims[l], spec.top_singular, spec.spectral_decay, rng));
            task.activations.push_back(l + 2 < dims.size() ? Activation::relu : Activation::none);
        }
        const Matrix centers = rng.gaussian(spec.in_dim, spec.out_dim, 2.0);
        all.inputs = Matrix(spec.in_dim, spec.n_samples);
        for (std::size_t j = 0; j < spec.n_samples; ++j) {
            const auto label = static_cast<std::size_t>(rng.below(spec.out_dim));
            all.labels.push_back(label);
            for (std::size_t i = 0; i < spec.in_dim; ++i) all.inputs(i, j) = centers(i, label) + rng.normal();
        }
    } else {
        task.head = Head::mse;
        const Matrix w = spectral_matrix(spec.out_dim, spec.in_dim, spec.top_singular, spec.spectral_decay, rng);
        task.svd_seed = derive_seed(spec.seed, streams::kTask + 1);
        if (spec.kind == TaskKind::aligned_teacher) {
            const SvdFactors f = truncated_svd(w, spec.rank_star, kDefaultPowerIterations, task.svd_seed);
            task.latent_star = rng.gaussian(spec.rank_star, spec.rank_star, spec.teacher_scale);
            Matrix us = f.u;
            for (std::size_t i = 0; i < us.rows(); ++i)
                for (std::size_t j = 0; j < spec.rank_star; ++j) us(i, j) *= f.s[j];
            task.delta_star = matmul_nt(matmul(us, task.latent_star), f.v);
        } else {
            const Matrix p = rng.gaussian(spec.out_dim, spec.rank_star, 1.0 / std::sqrt(static_cast<double>(spec.out_dim)));
            const Matrix q = rng.gaussian(spec.rank_star, spec.in_dim, 1.0 / std::sqrt(static_cast<double>(spec.in_dim)));
            task.delta_star = matmul(p, q);
            task.delta_star *= spec.teacher_scale * spec.top_singular;
        }
        task.base_weights.push_back(w);
        task.activations.push_back(Activation::none);
        all.inputs = rng.gaussian(spec.in_dim, spec.n_samples);
        all.targets = matmul(w + task.delta_star, all.inputs);
        if (spec.noise_std > 0.0) all.targets += rng.gaussian(spec.out_dim, spec.n_samples, spec.noise_std);
    }
    task.train = all.subset(train_idx);
    task.eval = all.subset(eval_idx);
    return task;
}

LinearStack build_model(const SyntheticTask& task, std::size_t rank, InitKind init, double alpha, double sigma,
                        std::uint64_t seed) {
    LinearStack model;
    model.head = task.head;
    for (std::size_t l = 0; l < task.base_weights.size(); ++l) {
        const Matrix& w = task.base_weights[l];
        const std::uint64_t layer_seed = derive_seed(seed, l);
        Layer layer{w, std::nullopt, task.activations[l], false};
        if (init == InitKind::svd) {
            layer.adapter = init_loraxs_svd(w, rank, alpha, sigma, layer_seed, layer_seed);
        } else {
            layer.adapter = init_loraxs_random(w.rows(), w.cols(), rank, alpha, sigma, layer_seed);
        }
        model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
}

double eval_metric(const SyntheticTask& task, const LinearStack& model) {
    if (task.head == Head::softmax_cross_entropy) return 1.0 - evaluate_accuracy(model, task.eval);
    return evaluate_loss(model, task.eval);
}

std::vector<AblationRecord> run_ablation(const SyntheticTask& task, const std::vector<std::size_t>& ranks,
                                         const std::vector<InitKind>& inits, const std::vector<std::uint64_t>& seeds,
                                         const TrainConfig& config, const AblationOptions& options) {
    if (ranks.empty() || inits.empty() || seeds.empty()) throw ParameterError("ablation needs ranks, inits and seeds");
    config.validate();
    struct Arm {
        std::size_t rank;
        InitKind init;
        std::uint64_t seed;
    };
    std::vector<Arm> arms;
    for (auto r : ranks)
        for (auto i : inits)
            for (auto s : seeds) arms.push_back({r, i, s});
    // Fail fast on ranks that no layer can take.
    for (auto r : ranks) {
        for (const auto& w : task.base_weights) {
            if (r < 1 || r > std::min(w.rows(), w.cols())) {
                throw ParameterError(fmt::format("ablation rank {} does not fit layer {}", r, w.shape_string()));
            }
        }
    }

    std::vector<std::vector<AblationRecord>> results(arms.size());
    auto run_arm = [&](std::size_t a) {
        const Arm& arm = arms[a];
        LinearStack model = build_model(task, arm.rank, arm.init, options.alpha, options.sigma, arm.seed);
        TrainConfig cfg = config;
        cfg.seed = arm.seed;
        std::vector<double> eval_by_epoch;
        TrainHooks hooks;
        hooks.on_epoch_end = [&](std::size_t, const LinearStack& m) { eval_by_epoch.push_back(eval_metric(task, m)); };
        std::vector<double> train_by_epoch;
        try {
            train_by_epoch = train(model, task.train, cfg, hooks).loss_by_epoch;
        } catch (const DivergenceError&) {
            // Completed epochs keep their numbers; the rest are flagged below.
        }
        auto& out = results[a];
        for (std::size_t e = 0; e < config.epochs; ++e) {
            AblationRecord rec{arm.rank, arm.init, arm.seed, e + 1, kNaN, kNaN, true};
            if (e < train_by_epoch.size() && e < eval_by_epoch.size() && std::isfinite(eval_by_epoch[e])) {
                rec.train_loss = train_by_epoch[e];
                rec.eval_loss = eval_by_epoch[e];
                rec.diverged = false;
            }
            out.push_back(rec);
        }
    };

    const unsigned jobs = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(arms.size())));
    if (jobs == 1) {
        for (std::size_t a = 0; a < arms.size(); ++a) run_arm(a);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(jobs);
        {
            std::vector<std::jthread> workers;
            for (unsigned t = 0; t < jobs; ++t) {
                workers.emplace_back([&, t] {
                    try {
                        for (std::size_t a = next++; a < arms.size(); a = next++) run_arm(a);
                    } catch (...) {
                        errors[t] = std::current_exception();
                    }
                });
            }
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<AblationRecord> records;
    records.reserve(arms.size() * config.epochs);
    for (auto& r : results) records.insert(records.end(), r.begin(), r.end());
    return records;
}

double median(std::vector<double> values) {
    std::erase_if(values, [](double v) { return std::isnan(v); });
    if (values.empty()) return kNaN;
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    if (values.size() % 2 == 1) return values[mid];
    return 0.5 * (values[mid - 1] + values[mid]);
}

std::vector<SummaryRow> summarize(const std::vector<AblationRecord>& records) {
    if (records.empty()) throw ParameterError("cannot summarize an empty record list");
    struct PerSeed {
        double best = kNaN;
        double ep1 = kNaN;
        double ep2 = kNaN;
    };
    // (rank, init) -> seed -> stats; init ordered svd first.
    std::map<std::pair<std::size_t, int>, std::map<std::uint64_t, PerSeed>> groups;
    for (const auto& r : records) {
        auto& s = groups[{r.rank, r.init == InitKind::svd ? 0 : 1}][r.seed];
        if (r.diverged || std::isnan(r.eval_loss)) continue;
        if (std::isnan(s.best) || r.eval_loss < s.best) s.best = r.eval_loss;
        if (r.epoch == 1) s.ep1 = r.eval_loss;
        if (r.epoch == 2) s.ep2 = r.eval_loss;
    }
    std::vector<SummaryRow> rows;
    for (const auto& [key, per_seed] : groups) {
        std::vector<double> best;
        std::vector<double> ep1;
        std::vector<double> ep2;
        for (const auto& [seed, s] : per_seed) {
            best.push_back(s.best);
            ep1.push_back(s.ep1);
            ep2.push_back(s.ep2);
        }
        rows.push_back({key.first, key.second == 0 ? InitKind::svd : InitKind::random, per_seed.size(), median(best),
                        median(ep1), median(ep2)});
    }
    return rows;
}

InitComparison compare_inits(const std::vector<AblationRecord>& records, std::size_t rank) {
    std::map<std::uint64_t, std::pair<double, double>> ep1;  // seed -> (svd, random)
    std::map<std::uint64_t, double> best_svd;
    std::map<std::uint64_t, double> best_random;
    for (const auto& r : records) {
        if (r.rank != rank || r.diverged) continue;
        auto& best = r.init == InitKind::svd ? best_svd : best_random;
        auto it = best.find(r.seed);
        if (it == best.end() || r.eval_loss < it->second) best[r.seed] = r.eval_loss;
        if (r.epoch == 1) {
            auto& slot = ep1.try_emplace(r.seed, kNaN, kNaN).first->second;
            (r.init == InitKind::svd ? slot.first : slot.second) = r.eval_loss;
        }
    }
    InitComparison out;
    for (const auto& [seed, pair] : ep1) {
        if (std::isnan(pair.first) || std::isnan(pair.second)) continue;
        ++out.seeds;
        if (pair.first < pair.second) ++out.svd_wins_epoch1;
    }
    auto values = [](const std::map<std::uint64_t, double>& m) {
        std::vector<double> v;
        for (const auto& [k, x] : m) v.push_back(x);
        return v;
    };
    out.median_best_svd = median(values(best_svd));
    out.median_best_random = median(values(best_random));
    return out;
}

void write_records_csv(std::ostream& out, const std::vector<AblationRecord>& records) {
    out << "rank,init,seed,epoch,train_loss,eval_loss,diverged\n";
    for (const auto& r : records) {
        out << fmt::format("{},{},{},{},{:.10g},{:.10g},{}\n", r.rank, to_string(r.init), r.seed, r.epoch, r.train_loss,
                           r.eval_loss, r.diverged ? 1 : 0);
    }
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "rank,init,median_best,median_ep1,median_ep2\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{:.10g},{:.10g},{:.10g}\n", r.rank, to_string(r.init), r.median_best, r.median_ep1,
                           r.median_ep2);
    }
}

void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << fmt::format("{:>5}  {:<7}  {:>5}  {:>14}  {:>14}  {:>14}\n", "rank", "init", "seeds", "median_best",
                       "median_ep1", "median_ep2");
    for (const auto& r : rows) {
        out << fmt::format("{:>5}  {:<7}  {:>5}  {:>14.6e}  {:>14.6e}  {:>14.6e}\n", r.rank, to_string(r.init), r.seeds,
                           r.median_best, r.median_ep1, r.median_ep2);
    }
}

}  // namespace loraxs
