#include "loraxs/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include <fmt/format.h>

#include "loraxs/errors.hpp"
#include "loraxs/linalg.hpp"
#include "loraxs/rng.hpp"

namespace loraxs {

namespace {

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double gelu_grad(double z) {
    const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + z * pdf;
}

Matrix activate(Activation act, const Matrix& z) {
    if (act == Activation::none) return z;
    Matrix out = z;
    for (auto& v : out.data()) v = act == Activation::relu ? std::max(v, 0.0) : gelu(v);
    return out;
}

// In-place G <- G * act'(Z).
void activation_backward(Activation act, const Matrix& z, Matrix& g) {
    if (act == Activation::none) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double zi = z.data()[i];
        g.data()[i] *= act == Activation::relu ? (zi > 0.0 ? 1.0 : 0.0) : gelu_grad(zi);
    }
}

struct ParamRef {
    Matrix* param;
    bool head;
};

std::vector<ParamRef> trainable_params(LinearStack& model) {
    std::vector<ParamRef> out;
    for (auto& layer : model.layers) {
        if (layer.adapter) {
            if (auto* xs = std::get_if<LoraXsAdapter>(&*layer.adapter)) {
                out.push_back({&xs->latent(), false});
            } else {
                auto& lora = std::get<LoraAdapter>(*layer.adapter);
                out.push_back({&lora.a_train, false});
                out.push_back({&lora.b_train, false});
            }
        }
        if (layer.weight_trainable) out.push_back({&layer.weight, true});
    }
    return out;
}

std::vector<const Matrix*> grads_in_order(const GradientSet& g) {
    std::vector<const Matrix*> out;
    for (const auto& lg : g.layers) {
        if (lg.latent) out.push_back(&*lg.latent);
        if (lg.lora_a) out.push_back(&*lg.lora_a);
        if (lg.lora_b) out.push_back(&*lg.lora_b);
        if (lg.weight) out.push_back(&*lg.weight);
    }
    return out;
}

Matrix scaled(Matrix m, double s) {
    m *= s;
    return m;
}

}  // namespace

std::string_view to_string(Activation a) noexcept {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    default: return "none";
    }
}

std::string_view to_string(Head h) noexcept { return h == Head::mse ? "mse" : "softmax_cross_entropy"; }

std::string_view to_string(Scheduler s) noexcept { return s == Scheduler::linear ? "linear" : "cosine"; }

Activation parse_activation(std::string_view text) {
    if (text == "none") return Activation::none;
    if (text == "relu") return Activation::relu;
    if (text == "gelu") return Activation::gelu;
    throw ParameterError(fmt::format("unknown activation '{}'", text));
}

Head parse_head(std::string_view text) {
    if (text == "mse") return Head::mse;
    if (text == "softmax_cross_entropy") return Head::softmax_cross_entropy;
    throw ParameterError(fmt::format("unknown head '{}'", text));
}

Scheduler parse_scheduler(std::string_view text) {
    if (text == "linear") return Scheduler::linear;
    if (text == "cosine") return Scheduler::cosine;
    throw ParameterError(fmt::format("unknown scheduler '{}', expected linear or cosine", text));
}

void LinearStack::validate() const {
    if (layers.empty()) throw ParameterError("model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& layer = layers[i];
        if (layer.weight.empty()) throw ShapeError(fmt::format("layer {} has an empty weight", i));
        if (i > 0 && layers[i - 1].weight.rows() != layer.weight.cols()) {
            throw ShapeError(fmt::format("layer {} expects input dim {}, previous layer produces {}", i,
                                         layer.weight.cols(), layers[i - 1].weight.rows()));
        }
        if (layer.adapter && (adapter_in_dim(*layer.adapter) != layer.weight.cols() ||
                              adapter_out_dim(*layer.adapter) != layer.weight.rows())) {
            throw ShapeError(fmt::format("layer {}: adapter {}x{} does not fit weight {}", i,
                                         adapter_out_dim(*layer.adapter), adapter_in_dim(*layer.adapter),
                                         layer.weight.shape_string()));
        }
        if (layer.weight_trainable && i + 1 != layers.size()) {
            throw ParameterError(fmt::format("layer {}: only the last layer may have a trainable weight", i));
        }
    }
}

std::size_t LinearStack::in_dim() const { return layers.front().weight.cols(); }
std::size_t LinearStack::out_dim() const { return layers.back().weight.rows(); }

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.inputs = inputs.gather_columns(indices);
    if (!targets.empty()) out.targets = targets.gather_columns(indices);
    if (!labels.empty()) {
        out.labels.reserve(indices.size());
        for (auto i : indices) out.labels.push_back(labels.at(i));
    }
    return out;
}

ForwardResult forward_model(const LinearStack& model, const Matrix& x) {
    model.validate();
    if (x.rows() != model.in_dim()) {
        throw ShapeError(fmt::format("model expects {} input rows, got {}", model.in_dim(), x.shape_string()));
    }
    ForwardResult out;
    out.cache.layers.reserve(model.layers.size());
    Matrix current = x;
    for (const auto& layer : model.layers) {
        LayerCache lc;
        Matrix z = matmul(layer.weight, current);
        if (layer.adapter) {
            std::visit(
                [&](const auto& a) {
                    using T = std::decay_t<decltype(a)>;
                    if constexpr (std::is_same_v<T, LoraXsAdapter>) {
                        lc.projected = matmul(a.a_frozen(), current);
                        z += scaled(matmul(a.b_frozen(), matmul(a.latent(), lc.projected)), a.scaling());
                    } else {
                        lc.projected = matmul(a.a_train, current);
                        z += scaled(matmul(a.b_train, lc.projected), a.scaling());
                    }
                },
                *layer.adapter);
        }
        Matrix next = activate(layer.activation, z);
        lc.input = std::move(current);
        lc.pre_activation = std::move(z);
        out.cache.layers.push_back(std::move(lc));
        current = std::move(next);
    }
    out.predictions = std::move(current);
    return out;
}

Matrix predict(const LinearStack& model, const Matrix& x) { return forward_model(model, x).predictions; }

GradientSet backward_adapter_grads(const LinearStack& model, const ForwardCache& cache, const Matrix& upstream) {
    if (cache.layers.size() != model.layers.size()) {
        throw StateError(fmt::format("cache holds {} layers but model has {}", cache.layers.size(), model.layers.size()));
    }
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& lc = cache.layers[i];
        const auto& layer = model.layers[i];
        const bool projected_ok = layer.adapter ? lc.projected.rows() == std::visit([](const auto& a) { return a.rank(); }, *layer.adapter)
                                                : lc.projected.empty();
        if (lc.input.rows() != layer.weight.cols() || lc.pre_activation.rows() != layer.weight.rows() ||
            lc.input.cols() != lc.pre_activation.cols() || !projected_ok) {
            throw StateError(fmt::format("cache entry {} does not match layer {}", i, layer.weight.shape_string()));
        }
    }
    const auto& last = cache.layers.back().pre_activation;
    if (upstream.rows() != last.rows() || upstream.cols() != last.cols()) {
        throw ShapeError(fmt::format("upstream gradient {} does not match predictions {}", upstream.shape_string(),
                                     last.shape_string()));
    }

    GradientSet out;
    out.layers.resize(model.layers.size());
    Matrix g_post = upstream;
    for (std::size_t li = model.layers.size(); li-- > 0;) {
        const auto& layer = model.layers[li];
        const auto& lc = cache.layers[li];
        Matrix g = std::move(g_post);
        activation_backward(layer.activation, lc.pre_activation, g);
        auto& lg = out.layers[li];

        if (layer.weight_trainable) lg.weight = matmul_nt(g, lc.input);
        Matrix g_in = matmul_tn(layer.weight, g);
        if (layer.adapter) {
            std::visit(
                [&](const auto& a) {
                    using T = std::decay_t<decltype(a)>;
                    const double s = a.scaling();
                    if constexpr (std::is_same_v<T, LoraXsAdapter>) {
                        const Matrix btg = matmul_tn(a.b_frozen(), g);
                        lg.latent = scaled(matmul_nt(btg, lc.projected), s);
                        g_in += scaled(matmul_tn(a.a_frozen(), matmul_tn(a.latent(), btg)), s);
                    } else {
                        const Matrix btg = matmul_tn(a.b_train, g);
                        lg.lora_b = scaled(matmul_nt(g, lc.projected), s);
                        lg.lora_a = scaled(matmul_nt(btg, lc.input), s);
                        g_in += scaled(matmul_tn(a.a_train, btg), s);
                    }
                },
                *layer.adapter);
        }
        g_post = std::move(g_in);
    }
    out.input = std::move(g_post);
    return out;
}

Matrix finite_diff_grad(const LossFn& loss_fn, const Matrix& point, double eps) {
    if (!(eps > 0.0)) throw ParameterError(fmt::format("finite-difference step must be positive, got {}", eps));
    Matrix grad(point.rows(), point.cols());
    Matrix probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double orig = point.data()[i];
        probe.data()[i] = orig + eps;
        const double plus = loss_fn(probe);
        probe.data()[i] = orig - eps;
        const double minus = loss_fn(probe);
        probe.data()[i] = orig;
        grad.data()[i] = (plus - minus) / (2.0 * eps);
    }
    return grad;
}

LossValue compute_loss(Head head, const Matrix& predictions, const Dataset& batch) {
    const std::size_t n = predictions.cols();
    LossValue out;
    out.upstream = Matrix(predictions.rows(), n);
    if (head == Head::mse) {
        if (batch.targets.rows() != predictions.rows() || batch.targets.cols() != n) {
            throw ShapeError(fmt::format("targets {} do not match predictions {}", batch.targets.shape_string(),
                                         predictions.shape_string()));
        }
        const double denom = static_cast<double>(predictions.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const double d = predictions.data()[i] - batch.targets.data()[i];
            sum += d * d;
            out.upstream.data()[i] = 2.0 * d / denom;
        }
        out.loss = sum / denom;
        return out;
    }
    if (batch.labels.size() != n) {
        throw ShapeError(fmt::format("{} labels for {} predictions", batch.labels.size(), n));
    }
    const std::size_t classes = predictions.rows();
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t label = batch.labels[j];
        if (label >= classes) throw ParameterError(fmt::format("label {} out of range for {} classes", label, classes));
        double peak = -INFINITY;
        for (std::size_t c = 0; c < classes; ++c) peak = std::max(peak, predictions(c, j));
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(predictions(c, j) - peak);
        const double log_z = peak + std::log(z);
        sum += log_z - predictions(label, j);
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(predictions(c, j) - log_z);
            out.upstream(c, j) = (p - (c == label ? 1.0 : 0.0)) / static_cast<double>(n);
        }
    }
    out.loss = sum / static_cast<double>(n);
    return out;
}

double evaluate_loss(const LinearStack& model, const Dataset& data) {
    return compute_loss(model.head, predict(model, data.inputs), data).loss;
}

double evaluate_accuracy(const LinearStack& model, const Dataset& data) {
    const Matrix pred = predict(model, data.inputs);
    if (data.labels.size() != pred.cols()) throw ShapeError("accuracy needs one label per sample");
    std::size_t hits = 0;
    for (std::size_t j = 0; j < pred.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < pred.rows(); ++c)
            if (pred(c, j) > pred(best, j)) best = c;
        hits += best == data.labels[j] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.cols());
}

AdamState AdamState::zeros_like(const Matrix& param) {
    return AdamState{Matrix(param.rows(), param.cols()), Matrix(param.rows(), param.cols())};
}

void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, std::size_t step_index, const AdamWHyper& hyper) {
    if (step_index < 1) throw ParameterError("adamw_step: step_index counts from 1");
    if (grad.rows() != param.rows() || grad.cols() != param.cols() || state.m.rows() != param.rows() ||
        state.m.cols() != param.cols() || state.v.rows() != param.rows() || state.v.cols() != param.cols()) {
        throw ShapeError(fmt::format("adamw_step: param {}, grad {}, state {} disagree", param.shape_string(),
                                     grad.shape_string(), state.m.shape_string()));
    }
    if (!grad.all_finite()) throw NumericError(fmt::format("adamw_step: non-finite gradient at step {}", step_index));

    const double t = static_cast<double>(step_index);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        double& m = state.m.data()[i];
        double& v = state.v.data()[i];
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        double& p = param.data()[i];
        const double decay = hyper.lr * hyper.weight_decay * p;
        p = p - hyper.lr * (m_hat / (std::sqrt(v_hat) + hyper.eps)) - decay;
    }
}

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
    const double raw = warmup_ratio * static_cast<double>(total_steps);
    // Absorb representation error such as 0.06 * 100 = 6.000000000000001.
    return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

double lr_multiplier(std::size_t step, std::size_t total_steps, double warmup_ratio, Scheduler scheduler) {
    if (total_steps < 1) throw ParameterError("lr_multiplier: total_steps must be >= 1");
    if (step > total_steps) throw ParameterError(fmt::format("lr_multiplier: step {} beyond total {}", step, total_steps));
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
        throw ParameterError(fmt::format("warmup_ratio must lie in [0, 1), got {}", warmup_ratio));
    }
    const std::size_t warm = warmup_steps(total_steps, warmup_ratio);
    if (step < warm) return static_cast<double>(step) / static_cast<double>(warm);
    const std::size_t span = total_steps - warm;
    const double progress = span == 0 ? 1.0 : static_cast<double>(step - warm) / static_cast<double>(span);
    const double mult = scheduler == Scheduler::linear ? 1.0 - progress
                                                       : 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return std::clamp(mult, 0.0, 1.0);
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ParameterError(msg); };
    if (!(adapter_lr > 0.0)) fail(fmt::format("adapter_lr must be positive, got {}", adapter_lr));
    if (head_lr && !(*head_lr > 0.0)) fail(fmt::format("head_lr must be positive, got {}", *head_lr));
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail(fmt::format("warmup_ratio must lie in [0, 1), got {}", warmup_ratio));
    if (!(weight_decay >= 0.0)) fail(fmt::format("weight_decay must be >= 0, got {}", weight_decay));
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) fail(fmt::format("adam_beta1 must lie in (0, 1), got {}", adam_beta1));
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) fail(fmt::format("adam_beta2 must lie in (0, 1), got {}", adam_beta2));
    if (!(adam_eps > 0.0)) fail(fmt::format("adam_eps must be positive, got {}", adam_eps));
    if (!(grad_clip >= 0.0)) fail(fmt::format("grad_clip must be >= 0, got {}", grad_clip));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    Rng rng(derive_seed(seed, streams::kShuffle), epoch);
    return rng.permutation(n);
}

Digest trainable_digest(const LinearStack& model) {
    Sha256 h;
    for (const auto& layer : model.layers) {
        if (layer.adapter) {
            if (const auto* xs = std::get_if<LoraXsAdapter>(&*layer.adapter)) {
                h.update(xs->latent());
            } else {
                const auto& lora = std::get<LoraAdapter>(*layer.adapter);
                h.update(lora.a_train);
                h.update(lora.b_train);
            }
        }
        if (layer.weight_trainable) h.update(layer.weight);
    }
    return h.finish();
}

Digest frozen_digest(const LinearStack& model) {
    Sha256 h;
    for (const auto& layer : model.layers) {
        if (!layer.weight_trainable) h.update(layer.weight);
        if (layer.adapter) {
            if (const auto* xs = std::get_if<LoraXsAdapter>(&*layer.adapter)) {
                h.update(xs->a_frozen());
                h.update(xs->b_frozen());
            }
        }
    }
    return h.finish();
}

TrainRun train(LinearStack& model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    model.validate();
    const std::size_t n = data.size();
    if (n == 0) throw ParameterError("training dataset is empty");
    if (config.batch_size > n) {
        throw ParameterError(fmt::format("batch_size {} exceeds dataset size {}", config.batch_size, n));
    }

    TrainRun run;
    run.config_echo = config;
    run.initial_params_digest = trainable_digest(model);
    run.initial_loss = evaluate_loss(model, data);

    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = config.epochs * steps_per_epoch;

    auto params = trainable_params(model);
    std::vector<AdamState> states;
    states.reserve(params.size());
    for (const auto& p : params) states.push_back(AdamState::zeros_like(*p.param));

    AdamWHyper adapter_hyper{config.adapter_lr, config.adam_beta1, config.adam_beta2, config.adam_eps,
                             config.weight_decay};
    AdamWHyper head_hyper = adapter_hyper;
    head_hyper.lr = config.head_lr.value_or(config.adapter_lr);

    if (hooks.csv) *hooks.csv << "epoch,step,loss,lr_multiplier\n";

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = epoch_order(n, config.seed, epoch);
        double weighted = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, stop - start);
            const Dataset batch = data.subset(idx);

            const auto fwd = forward_model(model, batch.inputs);
            const auto loss = compute_loss(model.head, fwd.predictions, batch);
            if (!std::isfinite(loss.loss)) {
                throw DivergenceError(fmt::format("training diverged: non-finite loss at step {} (epoch {})", step,
                                                  epoch + 1),
                                      step);
            }
            auto grads = backward_adapter_grads(model, fwd.cache, loss.upstream);
            auto grad_list = grads_in_order(grads);

            double clip_scale = 1.0;
            if (config.grad_clip > 0.0) {
                double sq = 0.0;
                for (const auto* g : grad_list)
                    for (double v : g->data()) sq += v * v;
                const double norm = std::sqrt(sq);
                if (norm > config.grad_clip) clip_scale = config.grad_clip / norm;
            }

            const double mult = lr_multiplier(step, total_steps, config.warmup_ratio, config.scheduler);
            for (std::size_t i = 0; i < params.size(); ++i) {
                AdamWHyper hyper = params[i].head ? head_hyper : adapter_hyper;
                hyper.lr *= mult;
                if (clip_scale != 1.0) {
                    adamw_step(*params[i].param, scaled(*grad_list[i], clip_scale), states[i], step + 1, hyper);
                } else {
                    adamw_step(*params[i].param, *grad_list[i], states[i], step + 1, hyper);
                }
            }
            ++step;
            weighted += loss.loss * static_cast<double>(stop - start);
            if (hooks.csv) *hooks.csv << fmt::format("{},{},{:.17g},{:.17g}\n", epoch + 1, step, loss.loss, mult);
        }
        run.loss_by_epoch.push_back(weighted / static_cast<double>(n));
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch + 1, model);
    }
    run.steps = step;
    run.final_params_digest = trainable_digest(model);
    return run;
}

}  // namespace loraxs
