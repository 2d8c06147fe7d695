#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "loraxs/linalg.hpp"
#include "loraxs/training.hpp"
#include "loraxs/rng.hpp"

namespace loraxs::testing {

// Worst relative error between backprop and central differences over every
// trainable tensor of `model`.
inline double worst_gradient_error(LinearStack& model, const Dataset& data, double eps = 1e-6) {
    const auto fwd = forward_model(model, data.inputs);
    const auto grads = backward_adapter_grads(model, fwd.cache, compute_loss(model.head, fwd.predictions, data).upstream);

    double worst = 0.0;
    auto check = [&](Matrix& param, const Matrix& analytic) {
        const Matrix saved = param;
        const LossFn fn = [&](const Matrix& p) {
            param = p;
            const double l = compute_loss(model.head, predict(model, data.inputs), data).loss;
            param = saved;
            return l;
        };
        const Matrix numeric = finite_diff_grad(fn, saved, eps);
        const double scale = std::max({frobenius_norm(numeric), frobenius_norm(analytic), 1e-8});
        worst = std::max(worst, frobenius_norm(numeric - analytic) / scale);
    };
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        const auto& g = grads.layers[l];
        if (layer.adapter) {
            if (auto* xs = std::get_if<LoraXsAdapter>(&*layer.adapter)) {
                check(xs->latent(), *g.latent);
            } else {
                auto& lora = std::get<LoraAdapter>(*layer.adapter);
                check(lora.a_train, *g.lora_a);
                check(lora.b_train, *g.lora_b);
            }
        }
        if (layer.weight_trainable) check(layer.weight, *g.weight);
    }
    return worst;
}

// A random stack with dims <= 16 and rank <= 4, and a small matching dataset.
struct RandomProblem {
    LinearStack model;
    Dataset data;
};

inline RandomProblem random_problem(std::uint64_t seed) {
    Rng rng(seed, 0x9ad);
    RandomProblem p;
    const std::size_t depth = 1 + rng.below(3);
    std::vector<std::size_t> dims(depth + 1);
    for (auto& d : dims) d = 2 + rng.below(15);
    p.model.head = rng.below(2) == 0 ? Head::mse : Head::softmax_cross_entropy;
    const Activation acts[] = {Activation::none, Activation::relu, Activation::gelu};
    for (std::size_t l = 0; l < depth; ++l) {
        Layer layer;
        layer.weight = rng.gaussian(dims[l + 1], dims[l], 0.5);
        const std::size_t rank = 1 + rng.below(std::min<std::size_t>({4, dims[l], dims[l + 1]}));
        const auto pick = rng.below(3);
        if (pick == 0) {
            layer.adapter = init_loraxs_svd(layer.weight, rank, 2.0, 0.3, rng.below(1000), rng.below(1000));
        } else if (pick == 1) {
            layer.adapter = init_loraxs_random(dims[l + 1], dims[l], rank, 2.0, 0.3, rng.below(1000));
        } else {
            auto lora = init_lora_baseline(dims[l + 1], dims[l], rank, 2.0, rng.below(1000));
            lora.b_train = rng.gaussian(dims[l + 1], rank, 0.3);
            layer.adapter = lora;
        }
        layer.activation = l + 1 < depth ? acts[rng.below(3)] : Activation::none;
        p.model.layers.push_back(std::move(layer));
    }
    if (rng.below(2) == 0) p.model.layers.back().weight_trainable = true;
    const std::size_t n = 3 + rng.below(6);
    p.data.inputs = rng.gaussian(dims.front(), n);
    p.data.targets = rng.gaussian(dims.back(), n);
    for (std::size_t i = 0; i < n; ++i) p.data.labels.push_back(rng.below(dims.back()));
    return p;
}

}  // namespace loraxs::testing
