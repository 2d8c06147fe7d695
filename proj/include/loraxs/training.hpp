#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "loraxs/adapter.hpp"
#include "loraxs/digest.hpp"
#include "loraxs/matrix.hpp"

namespace loraxs {

enum class Activation { none, relu, gelu };
enum class Head { mse, softmax_cross_entropy };
enum class Scheduler { linear, cosine };

std::string_view to_string(Activation a) noexcept;
std::string_view to_string(Head h) noexcept;
std::string_view to_string(Scheduler s) noexcept;
Activation parse_activation(std::string_view text);
Head parse_head(std::string_view text);
Scheduler parse_scheduler(std::string_view text);

// One linear map with an optional adapter and a pointwise activation.
// `weight_trainable` puts the weight itself in the head parameter group;
// only the last layer may set it.
struct Layer {
    Matrix weight;
    std::optional<Adapter> adapter;
    Activation activation = Activation::none;
    bool weight_trainable = false;
};

struct LinearStack {
    std::vector<Layer> layers;
    Head head = Head::mse;

    // Throws ShapeError / ParameterError if the stack is malformed.
    void validate() const;
    std::size_t in_dim() const;
    std::size_t out_dim() const;
};

// Columns of `inputs` are samples. `targets` is used by the MSE head,
// `labels` by the cross-entropy head.
struct Dataset {
    Matrix inputs;
    Matrix targets;
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return inputs.cols(); }
    Dataset subset(std::span<const std::size_t> indices) const;
};

struct LayerCache {
    Matrix input;           // X
    Matrix pre_activation;  // Z = W X + s B R A X
    Matrix projected;       // A X (empty without an adapter)
};

struct ForwardCache {
    std::vector<LayerCache> layers;
};

struct ForwardResult {
    Matrix predictions;
    ForwardCache cache;
};

ForwardResult forward_model(const LinearStack& model, const Matrix& x);
// Forward pass without keeping the cache.
Matrix predict(const LinearStack& model, const Matrix& x);

// Gradients for one layer; only the members that apply are set.
struct LayerGrads {
    std::optional<Matrix> latent;  // LoRA-XS R
    std::optional<Matrix> lora_a;
    std::optional<Matrix> lora_b;
    std::optional<Matrix> weight;  // trainable head weight
};

struct GradientSet {
    std::vector<LayerGrads> layers;
    Matrix input;  // dL/dX of the first layer
};

// Backpropagates `upstream` = dL/d(predictions) through the stack.
// Throws StateError if `cache` does not belong to `model`.
GradientSet backward_adapter_grads(const LinearStack& model, const ForwardCache& cache, const Matrix& upstream);

using LossFn = std::function<double(const Matrix&)>;

// Central differences: (L(P + eps E_ij) - L(P - eps E_ij)) / (2 eps).
Matrix finite_diff_grad(const LossFn& loss_fn, const Matrix& point, double eps);

struct LossValue {
    double loss = 0.0;
    Matrix upstream;
};

// MSE is the mean of squared errors over all entries; cross-entropy is the
// mean over samples of -log softmax(prediction)[label].
LossValue compute_loss(Head head, const Matrix& predictions, const Dataset& batch);
double evaluate_loss(const LinearStack& model, const Dataset& data);
double evaluate_accuracy(const LinearStack& model, const Dataset& data);

struct AdamWHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    Matrix m;
    Matrix v;
    static AdamState zeros_like(const Matrix& param);
};

// One decoupled-weight-decay Adam update. `step_index` counts from 1.
// Throws NumericError (and leaves everything untouched) if `grad` holds a
// non-finite entry.
void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, std::size_t step_index, const AdamWHyper& hyper);

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio);
// Linear warmup to 1 over ceil(warmup_ratio * total) steps, then linear or
// cosine decay to 0 at total_steps.
double lr_multiplier(std::size_t step, std::size_t total_steps, double warmup_ratio, Scheduler scheduler);

struct TrainConfig {
    double adapter_lr = 1e-3;
    std::optional<double> head_lr;  // defaults to adapter_lr
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double warmup_ratio = 0.06;
    Scheduler scheduler = Scheduler::linear;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip, 0 disables
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainRun {
    std::vector<double> loss_by_epoch;
    std::size_t steps = 0;
    double initial_loss = 0.0;
    Digest initial_params_digest{};
    Digest final_params_digest{};
    TrainConfig config_echo;
};

struct TrainHooks {
    std::ostream* csv = nullptr;  // epoch,step,loss,lr_multiplier per step
    std::function<void(std::size_t epoch, const LinearStack& model)> on_epoch_end;
};

// Sample order for one epoch; a pure function of (n, seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Mini-batch AdamW over the adapter (and head) parameters of `model`.
// Throws DivergenceError on a non-finite loss.
TrainRun train(LinearStack& model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks = {});

// Digest over every trainable parameter in layer order.
Digest trainable_digest(const LinearStack& model);
// Digest over every frozen tensor: base weights (unless trainable) and
// LoRA-XS projections.
Digest frozen_digest(const LinearStack& model);

}  // namespace loraxs
