#include "loraxs/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "loraxs/accounting.hpp"
#include "loraxs/adapter.hpp"
#include "loraxs/errors.hpp"
#include "loraxs/experiments.hpp"
#include "loraxs/linalg.hpp"
#include "loraxs/registry.hpp"
#include "loraxs/rng.hpp"
#include "loraxs/tensor_io.hpp"
#include "loraxs/train_config.hpp"
#include "loraxs/training.hpp"

namespace loraxs {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Format { table, csv, json };

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<json>> rows;
};

std::string cell_text(const json& v, bool precise) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (std::isnan(d)) return "nan";
        return precise ? fmt::format("{:.17g}", d) : fmt::format("{:.6g}", d);
    }
    return precise ? "" : "-";
}

// NaN has no JSON spelling; it is written as null.
json json_number(double d) { return std::isfinite(d) ? json(d) : json(nullptr); }

void emit(std::ostream& out, Format format, const Table& t) {
    if (format == Format::json) {
        json arr = json::array();
        for (const auto& row : t.rows) {
            json obj = json::object();
            for (std::size_t i = 0; i < t.columns.size(); ++i) obj[t.columns[i]] = row[i];
            arr.push_back(std::move(obj));
        }
        out << arr.dump(2) << '\n';
        return;
    }
    if (format == Format::csv) {
        for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
        out << '\n';
        for (const auto& row : t.rows) {
            for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << cell_text(row[i], true);
            out << '\n';
        }
        return;
    }
    std::vector<std::size_t> width(t.columns.size());
    std::vector<std::vector<std::string>> text;
    for (std::size_t i = 0; i < t.columns.size(); ++i) width[i] = t.columns[i].size();
    for (const auto& row : t.rows) {
        auto& line = text.emplace_back();
        for (std::size_t i = 0; i < row.size(); ++i) {
            line.push_back(cell_text(row[i], false));
            width[i] = std::max(width[i], line.back().size());
        }
    }
    auto print = [&](const std::vector<std::string>& cells) {
        std::string line;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) line += "  ";
            line += fmt::format("{:<{}}", cells[i], width[i]);
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out << line << '\n';
    };
    print(t.columns);
    for (const auto& line : text) print(line);
}

Format parse_format(const std::string& s) {
    if (s == "csv") return Format::csv;
    if (s == "json") return Format::json;
    return Format::table;
}

// Weight files: an LXSW bundle whose tensor names are module names, or a
// plain text matrix read as the single module "weight".
WeightSet load_weights(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "LXSW")) {
        auto bundle = decode_tensor_bundle(bytes);
        return WeightSet(bundle.begin(), bundle.end());
    }
    return WeightSet{{"weight", read_matrix_text_file(path)}};
}

const Matrix& pick_module(const WeightSet& weights, const std::string& module, std::string& chosen) {
    if (!module.empty()) {
        const auto it = weights.find(module);
        if (it == weights.end()) throw ParameterError(fmt::format("--module: no tensor named '{}'", module));
        chosen = it->first;
        return it->second;
    }
    if (weights.size() != 1) {
        throw ParameterError(fmt::format("weights hold {} tensors; choose one with --module", weights.size()));
    }
    chosen = weights.begin()->first;
    return weights.begin()->second;
}

std::vector<std::string> module_order(const WeightSet& weights, const std::vector<std::string>& requested) {
    if (requested.empty()) {
        std::vector<std::string> all;
        for (const auto& [name, w] : weights) all.push_back(name);
        return all;
    }
    for (const auto& name : requested) {
        if (!weights.contains(name)) throw ParameterError(fmt::format("--modules: no weight named '{}'", name));
    }
    return requested;
}

Dataset load_dataset(const fs::path& path) {
    const auto bundle = load_tensor_bundle(path);
    Dataset d;
    const auto in = bundle.find("inputs");
    if (in == bundle.end()) throw FormatError(fmt::format("data file '{}' has no 'inputs' tensor", path.string()));
    d.inputs = in->second;
    if (const auto t = bundle.find("targets"); t != bundle.end()) d.targets = t->second;
    if (const auto l = bundle.find("labels"); l != bundle.end()) {
        for (double v : l->second.data()) {
            if (!(v >= 0.0) || v != std::floor(v)) {
                throw FormatError(fmt::format("data file '{}': label {} is not a class index", path.string(), v));
            }
            d.labels.push_back(static_cast<std::size_t>(v));
        }
    }
    return d;
}

TensorBundle dataset_bundle(const Dataset& d) {
    TensorBundle b{{"inputs", d.inputs}};
    if (d.targets.size() > 0) b["targets"] = d.targets;
    if (!d.labels.empty()) {
        Matrix labels(1, d.labels.size());
        for (std::size_t i = 0; i < d.labels.size(); ++i) labels(0, i) = static_cast<double>(d.labels[i]);
        b["labels"] = labels;
    }
    return b;
}

struct StackOptions {
    std::vector<std::string> modules;
    std::string activation = "relu";
    std::string head = "mse";
};

void add_stack_options(CLI::App* sub, StackOptions& o) {
    sub->add_option("--modules", o.modules, "Weight names in layer order (default: all, sorted)")->delimiter(',');
    sub->add_option("--activation", o.activation, "Activation between layers")
        ->check(CLI::IsMember({"none", "relu", "gelu"}))
        ->capture_default_str();
    sub->add_option("--head", o.head, "Loss head")->check(CLI::IsMember({"mse", "softmax_cross_entropy"}))->capture_default_str();
}

LinearStack build_stack(const WeightSet& weights, const AdapterSet& adapters, const StackOptions& o) {
    const auto order = module_order(weights, o.modules);
    LinearStack model;
    model.head = parse_head(o.head);
    for (std::size_t i = 0; i < order.size(); ++i) {
        Layer layer;
        layer.weight = weights.at(order[i]);
        if (const auto it = adapters.find(order[i]); it != adapters.end()) layer.adapter = it->second;
        layer.activation = i + 1 < order.size() ? parse_activation(o.activation) : Activation::none;
        model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
}

std::string default_base_id(const fs::path& weights_path) {
    const auto bytes = read_file_bytes(weights_path);
    return "sha256:" + to_hex(sha256(bytes)).substr(0, 16);
}

std::vector<std::uint64_t> seed_range(std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i;
    return s;
}

fs::path registry_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("LORAXS_REGISTRY"); env && *env) return env;
    throw ParameterError("no registry root: pass --root or set LORAXS_REGISTRY");
}

class ExitCode : public std::exception {
public:
    explicit ExitCode(int code) : code_(code) {}
    int code() const noexcept { return code_; }

private:
    int code_;
};

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"LoRA-XS adapters: factorize, initialize, train, merge, account and store", "loraxs"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string format_name = "table";
    std::uint64_t seed = 0;
    app.add_option("--format", format_name, "Output encoding")
        ->check(CLI::IsMember({"table", "csv", "json"}))
        ->capture_default_str();
    auto* seed_opt = app.add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

    std::function<void(Format)> action;
    auto run = [&](std::function<void(Format)> f) { return [&action, f] { action = f; }; };

    // svd
    std::string svd_weights, svd_module, svd_out;
    std::size_t svd_rank = 0;
    int svd_iter = kDefaultPowerIterations;
    auto* svd = app.add_subcommand("svd", "Randomized truncated SVD of a weight matrix");
    svd->add_option("--weights", svd_weights, "Weight file (LXSW bundle or text)")->required();
    svd->add_option("--module", svd_module, "Tensor to factorize when the bundle holds several");
    svd->add_option("--rank", svd_rank, "Target rank")->required()->check(CLI::PositiveNumber);
    svd->add_option("--n-iter", svd_iter, "Subspace iterations")->check(CLI::NonNegativeNumber)->capture_default_str();
    svd->add_option("--out", svd_out, "Write U, S, V to this LXSW file");
    svd->callback(run([&](Format fmt_) {
        const auto weights = load_weights(svd_weights);
        std::string name;
        const Matrix& w = pick_module(weights, svd_module, name);
        const auto f = truncated_svd(w, svd_rank, svd_iter, seed);
        if (!svd_out.empty()) {
            Matrix s(1, f.s.size());
            for (std::size_t i = 0; i < f.s.size(); ++i) s(0, i) = f.s[i];
            save_tensor_bundle({{"U", f.u}, {"S", s}, {"V", f.v}}, svd_out);
        }
        Table t{{"index", "singular_value"}, {}};
        for (std::size_t i = 0; i < f.s.size(); ++i) t.rows.push_back({i, f.s[i]});
        emit(out, fmt_, t);
    }));

    // init
    std::string init_weights, init_out, init_kind = "svd", init_base_id, init_dtype = "f64";
    std::vector<std::string> init_modules;
    std::size_t init_rank = 0;
    double init_alpha = 8.0, init_sigma = kDefaultLatentSigma;
    std::uint64_t init_svd_seed = 0;
    int init_iter = kDefaultPowerIterations;
    bool init_self_contained = false;
    auto* init = app.add_subcommand("init", "Build LoRA-XS adapters for the weights and save a checkpoint");
    init->add_option("--weights", init_weights, "Weight file (LXSW bundle or text)")->required();
    init->add_option("--modules", init_modules, "Modules to adapt (default: all)")->delimiter(',');
    init->add_option("--rank", init_rank, "Adapter rank r")->required()->check(CLI::PositiveNumber);
    init->add_option("--alpha", init_alpha, "Scaling numerator; updates are scaled by alpha / r")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    init->add_option("--sigma", init_sigma, "Std of the initial latent R")->check(CLI::NonNegativeNumber)->capture_default_str();
    init->add_option("--init", init_kind, "Projection initialization")->check(CLI::IsMember({"svd", "random"}))->capture_default_str();
    auto* svd_seed_opt = init->add_option("--svd-seed", init_svd_seed, "Seed of the SVD sketch / random projections (default: --seed)");
    init->add_option("--n-iter", init_iter, "Subspace iterations")->check(CLI::NonNegativeNumber)->capture_default_str();
    init->add_option("--base-model-id", init_base_id, "Identifier recorded in the checkpoint (default: weights hash)");
    init->add_option("--dtype", init_dtype, "Latent storage type")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
    init->add_flag("--self-contained", init_self_contained, "Embed A and B in the checkpoint");
    init->add_option("--out", init_out, "Checkpoint path")->required();
    init->callback(run([&](Format fmt_) {
        const auto weights = load_weights(init_weights);
        const auto names = module_order(weights, init_modules);
        const std::uint64_t proj_seed = svd_seed_opt->count() ? init_svd_seed : seed;
        const InitKind kind = parse_init_kind(init_kind);
        AdapterSet adapters;
        for (std::size_t i = 0; i < names.size(); ++i) {
            const Matrix& w = weights.at(names[i]);
            const std::uint64_t module_proj_seed = derive_seed(proj_seed, i);
            const std::uint64_t module_r_seed = derive_seed(seed, streams::kLatent + i);
            if (kind == InitKind::svd) {
                adapters.emplace(names[i], init_loraxs_svd(w, init_rank, init_alpha, init_sigma, module_proj_seed,
                                                           module_r_seed, init_iter));
            } else {
                adapters.emplace(names[i], init_loraxs_random(w.rows(), w.cols(), init_rank, init_alpha, init_sigma,
                                                              module_proj_seed));
            }
        }
        const CheckpointMeta meta{init_base_id.empty() ? default_base_id(init_weights) : init_base_id,
                                  parse_dtype(init_dtype), init_self_contained};
        const auto ck = make_checkpoint(adapters, meta);
        const std::string id = save_checkpoint(ck, init_out);
        std::size_t trainable = 0;
        for (const auto& [n, a] : adapters) trainable += a.trainable_count();
        Table t{{"checkpoint_id", "modules", "trainable_params", "bytes"}, {}};
        t.rows.push_back({id, adapters.size(), trainable, fs::file_size(init_out)});
        emit(out, fmt_, t);
    }));

    // train
    std::string tr_weights, tr_adapters, tr_data, tr_eval, tr_config, tr_out, tr_csv, tr_scheduler;
    StackOptions tr_stack;
    std::optional<double> tr_lr, tr_warmup, tr_wd, tr_clip;
    std::optional<std::size_t> tr_epochs, tr_batch;
    auto* trn = app.add_subcommand("train", "Train the latents of a checkpoint on a dataset");
    trn->add_option("--weights", tr_weights, "Base weight file")->required();
    trn->add_option("--adapters", tr_adapters, "Checkpoint to start from")->required();
    trn->add_option("--data", tr_data, "Training data bundle (inputs, targets or labels)")->required();
    trn->add_option("--eval-data", tr_eval, "Evaluation data bundle, scored after every epoch");
    trn->add_option("--config", tr_config, "Training config file ([train] key = value)");
    trn->add_option("--lr", tr_lr, "Adapter learning rate")->check(CLI::PositiveNumber);
    trn->add_option("--epochs", tr_epochs, "Epochs");
    trn->add_option("--batch-size", tr_batch, "Mini-batch size")->check(CLI::PositiveNumber);
    trn->add_option("--warmup-ratio", tr_warmup, "Warmup fraction of all steps")->check(CLI::Range(0.0, 1.0));
    trn->add_option("--scheduler", tr_scheduler, "linear or cosine")->check(CLI::IsMember({"linear", "cosine"}));
    trn->add_option("--weight-decay", tr_wd, "Decoupled weight decay")->check(CLI::NonNegativeNumber);
    trn->add_option("--grad-clip", tr_clip, "Global gradient-norm clip, 0 disables")->check(CLI::NonNegativeNumber);
    trn->add_option("--csv", tr_csv, "Write per-step epoch,step,loss,lr_multiplier here");
    trn->add_option("--out", tr_out, "Trained checkpoint path")->required();
    add_stack_options(trn, tr_stack);
    trn->callback(run([&](Format fmt_) {
        TrainConfig cfg;
        cfg.seed = seed;
        if (!tr_config.empty()) cfg = load_train_config(tr_config, cfg);
        if (seed_opt->count()) cfg.seed = seed;
        if (tr_lr) cfg.adapter_lr = *tr_lr;
        if (tr_epochs) cfg.epochs = *tr_epochs;
        if (tr_batch) cfg.batch_size = *tr_batch;
        if (tr_warmup) cfg.warmup_ratio = *tr_warmup;
        if (!tr_scheduler.empty()) cfg.scheduler = parse_scheduler(tr_scheduler);
        if (tr_wd) cfg.weight_decay = *tr_wd;
        if (tr_clip) cfg.grad_clip = *tr_clip;
        cfg.validate();

        const auto weights = load_weights(tr_weights);
        const auto ck = load_checkpoint(tr_adapters);
        const auto adapters = attach_checkpoint(ck, weights);
        auto model = build_stack(weights, adapters, tr_stack);
        const Dataset data = load_dataset(tr_data);
        std::optional<Dataset> eval;
        if (!tr_eval.empty()) eval = load_dataset(tr_eval);

        std::ofstream csv;
        TrainHooks hooks;
        if (!tr_csv.empty()) {
            csv.open(tr_csv);
            if (!csv) throw IoError(fmt::format("cannot write '{}'", tr_csv));
            hooks.csv = &csv;
        }
        std::vector<double> eval_by_epoch;
        if (eval) hooks.on_epoch_end = [&](std::size_t, const LinearStack& m) { eval_by_epoch.push_back(evaluate_loss(m, *eval)); };
        const auto result = train(model, data, cfg, hooks);

        const auto order = module_order(weights, tr_stack.modules);
        AdapterSet trained;
        for (std::size_t i = 0; i < order.size(); ++i) {
            const auto& layer = model.layers[i];
            if (layer.adapter) trained.emplace(order[i], std::get<LoraXsAdapter>(*layer.adapter));
        }
        for (const auto& [name, a] : adapters)
            if (!trained.contains(name)) trained.emplace(name, a);
        const std::string id =
            save_checkpoint(trained, CheckpointMeta{ck.base_model_id, ck.storage_dtype, ck.self_contained}, tr_out);

        Table t{{"epoch", "train_loss"}, {}};
        if (eval) t.columns.push_back("eval_loss");
        t.rows.push_back({0, json_number(result.initial_loss)});
        if (eval) t.rows.back().push_back(nullptr);
        for (std::size_t e = 0; e < result.loss_by_epoch.size(); ++e) {
            t.rows.push_back({e + 1, json_number(result.loss_by_epoch[e])});
            if (eval) t.rows.back().push_back(json_number(eval_by_epoch[e]));
        }
        emit(out, fmt_, t);
        if (fmt_ == Format::table) out << fmt::format("checkpoint {} ({} steps)\n", id, result.steps);
    }));

    // eval
    std::string ev_weights, ev_adapters, ev_data;
    StackOptions ev_stack;
    auto* evl = app.add_subcommand("eval", "Score a base model, optionally with a checkpoint attached");
    evl->add_option("--weights", ev_weights, "Base weight file")->required();
    evl->add_option("--adapters", ev_adapters, "Checkpoint to attach");
    evl->add_option("--data", ev_data, "Data bundle")->required();
    add_stack_options(evl, ev_stack);
    evl->callback(run([&](Format fmt_) {
        const auto weights = load_weights(ev_weights);
        AdapterSet adapters;
        if (!ev_adapters.empty()) adapters = attach_checkpoint(load_checkpoint(ev_adapters), weights);
        const auto model = build_stack(weights, adapters, ev_stack);
        const Dataset data = load_dataset(ev_data);
        Table t{{"samples", "loss"}, {}};
        t.rows.push_back({data.size(), json_number(evaluate_loss(model, data))});
        if (model.head == Head::softmax_cross_entropy) {
            t.columns.push_back("accuracy");
            t.rows.back().push_back(evaluate_accuracy(model, data));
        }
        emit(out, fmt_, t);
    }));

    // merge
    std::string mg_weights, mg_adapters, mg_out;
    auto* mrg = app.add_subcommand("merge", "Fold a checkpoint into its base weights");
    mrg->add_option("--weights", mg_weights, "Base weight file")->required();
    mrg->add_option("--adapters", mg_adapters, "Checkpoint")->required();
    mrg->add_option("--out", mg_out, "Merged LXSW weight file")->required();
    mrg->callback(run([&](Format fmt_) {
        const auto weights = load_weights(mg_weights);
        const auto adapters = attach_checkpoint(load_checkpoint(mg_adapters), weights);
        TensorBundle merged;
        Table t{{"module", "shape", "adapted", "max_abs_delta"}, {}};
        for (const auto& [name, w] : weights) {
            const auto it = adapters.find(name);
            merged[name] = it == adapters.end() ? w : merge(w, it->second);
            t.rows.push_back({name, w.shape_string(), it != adapters.end(), max_abs_diff(merged[name], w)});
        }
        save_tensor_bundle(merged, mg_out);
        emit(out, fmt_, t);
    }));

    // count and budget share the model description
    struct SpecFlags {
        std::string method = "all";
        std::uint64_t layers = 0, modules = 0, hidden = 0, rank = 0, bytes_per_param = 2;
        std::optional<std::uint64_t> out_dim;
    };
    auto add_spec_flags = [](CLI::App* sub, SpecFlags& f, bool required) {
        sub->add_option("--method", f.method, "lora, vera, loraxs or all")
            ->check(CLI::IsMember({"all", "lora", "vera", "loraxs", "lora-xs"}))
            ->capture_default_str();
        auto* l = sub->add_option("--layers", f.layers, "Fine-tuned layers L")->check(CLI::PositiveNumber);
        auto* q = sub->add_option("--modules", f.modules, "Adapted matrices per layer q")->check(CLI::PositiveNumber);
        auto* n = sub->add_option("--hidden", f.hidden, "Hidden size n")->check(CLI::PositiveNumber);
        auto* r = sub->add_option("--rank", f.rank, "Rank r")->check(CLI::PositiveNumber);
        sub->add_option("--out-dim", f.out_dim, "Output size m for rectangular modules")->check(CLI::PositiveNumber);
        sub->add_option("--bytes-per-param", f.bytes_per_param, "Bytes per stored parameter")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        if (required) {
            for (auto* o : {l, q, n, r}) o->required();
        }
    };
    auto methods_of = [](const std::string& m) {
        if (m == "all") return std::vector<Method>{Method::lora, Method::vera, Method::loraxs};
        return std::vector<Method>{parse_method(m)};
    };
    auto spec_of = [](const SpecFlags& f) {
        ModelSpec s{f.layers, f.modules, f.hidden, f.rank, f.bytes_per_param, f.out_dim};
        s.validate();
        return s;
    };

    SpecFlags cnt;
    auto* count = app.add_subcommand("count", "Trainable adapter parameters for a model shape");
    add_spec_flags(count, cnt, true);
    count->callback(run([&](Format fmt_) {
        const auto spec = spec_of(cnt);
        const auto methods = methods_of(cnt.method);
        if (methods.size() == 1 && fmt_ == Format::table) {
            out << count_params(methods[0], spec) << '\n';
            return;
        }
        Table t{{"method", "params", "bytes", "ratio_to_loraxs"}, {}};
        for (auto m : methods) {
            const auto p = count_params(m, spec);
            const auto ratio = param_ratio(m, Method::loraxs, spec);
            t.rows.push_back({std::string(to_string(m)), p, storage_budget(p, spec.bytes_per_param, 1).bytes_per_checkpoint,
                              ratio.value()});
        }
        emit(out, fmt_, t);
    }));

    SpecFlags bud;
    std::optional<std::uint64_t> bud_params;
    std::uint64_t bud_models = 1;
    auto* budget = app.add_subcommand("budget", "Checkpoint and fleet storage");
    budget->add_option("--params", bud_params, "Parameters per checkpoint (instead of a model shape)")->check(CLI::PositiveNumber);
    budget->add_option("--models", bud_models, "Number of stored checkpoints")->check(CLI::PositiveNumber)->capture_default_str();
    add_spec_flags(budget, bud, false);
    budget->callback(run([&](Format fmt_) {
        std::vector<BudgetReport> reports;
        if (bud_params) {
            reports.push_back(storage_budget(*bud_params, bud.bytes_per_param, bud_models));
        } else {
            if (!bud.layers || !bud.modules || !bud.hidden || !bud.rank) {
                throw CLI::RequiredError("budget needs --params or all of --layers --modules --hidden --rank");
            }
            const auto spec = spec_of(bud);
            for (auto m : methods_of(bud.method)) {
                auto r = storage_budget(count_params(m, spec), spec.bytes_per_param, bud_models);
                r.method = m;
                reports.push_back(r);
            }
        }
        if (fmt_ == Format::table) {
            for (const auto& r : reports) {
                if (r.method) out << to_string(*r.method) << '\n';
                out << fmt::format("  params          {}\n", r.params);
                out << fmt::format("  per checkpoint  {} B ({})\n", r.bytes_per_checkpoint,
                                   format_binary(r.bytes_per_checkpoint));
                out << fmt::format("  models          {}\n", r.n_models);
                out << fmt::format("  fleet           {} B ({}; nominal {})\n", r.fleet_bytes,
                                   format_binary(r.fleet_bytes), format_fleet_nominal(r));
            }
            return;
        }
        Table t{{"method", "params", "bytes_per_param", "bytes_per_checkpoint", "per_checkpoint", "n_models",
                 "fleet_bytes", "fleet", "fleet_nominal"},
                {}};
        for (const auto& r : reports) {
            t.rows.push_back({r.method ? std::string(to_string(*r.method)) : std::string(), r.params, r.bytes_per_param,
                              r.bytes_per_checkpoint, format_binary(r.bytes_per_checkpoint), r.n_models, r.fleet_bytes,
                              format_binary(r.fleet_bytes), format_fleet_nominal(r)});
        }
        emit(out, fmt_, t);
    }));

    // task
    struct TaskFlags {
        std::string kind = "aligned_teacher";
        TaskSpec spec;
    };
    auto add_task_flags = [](CLI::App* sub, TaskFlags& f) {
        sub->add_option("--task", f.kind, "aligned_teacher, random_teacher or blobs_classification")
            ->check(CLI::IsMember({"aligned_teacher", "random_teacher", "blobs_classification"}))
            ->capture_default_str();
        sub->add_option("--in-dim", f.spec.in_dim, "Input size")->check(CLI::PositiveNumber)->capture_default_str();
        sub->add_option("--out-dim", f.spec.out_dim, "Output size (classes for blobs)")->check(CLI::PositiveNumber)->capture_default_str();
        sub->add_option("--hidden", f.spec.hidden, "Hidden widths (blobs)")->delimiter(',');
        sub->add_option("--rank-star", f.spec.rank_star, "Rank of the hidden update")->check(CLI::PositiveNumber)->capture_default_str();
        sub->add_option("--noise", f.spec.noise_std, "Target noise std")->check(CLI::NonNegativeNumber)->capture_default_str();
        sub->add_option("--samples", f.spec.n_samples, "Samples before the 80/20 split")->check(CLI::PositiveNumber)->capture_default_str();
        sub->add_option("--spectral-decay", f.spec.spectral_decay, "Base singular value decay")->capture_default_str();
    };
    TaskFlags tk;
    std::string tk_dir;
    auto* task = app.add_subcommand("task", "Write a synthetic task as weight and data files");
    add_task_flags(task, tk);
    task->add_option("--out-dir", tk_dir, "Directory for weights.lxsw, train.lxsw, eval.lxsw")->required();
    task->callback(run([&](Format fmt_) {
        TaskSpec spec = tk.spec;
        spec.kind = parse_task_kind(tk.kind);
        spec.seed = seed;
        const auto t = gen_task(spec);
        fs::create_directories(tk_dir);
        TensorBundle weights;
        for (std::size_t l = 0; l < t.base_weights.size(); ++l) weights[fmt::format("layer{}", l)] = t.base_weights[l];
        save_tensor_bundle(weights, fs::path(tk_dir) / "weights.lxsw");
        save_tensor_bundle(dataset_bundle(t.train), fs::path(tk_dir) / "train.lxsw");
        save_tensor_bundle(dataset_bundle(t.eval), fs::path(tk_dir) / "eval.lxsw");
        Table tab{{"file", "contents"}, {}};
        tab.rows.push_back({"weights.lxsw", fmt::format("{} layer(s)", t.base_weights.size())});
        tab.rows.push_back({"train.lxsw", fmt::format("{} samples", t.train.size())});
        tab.rows.push_back({"eval.lxsw", fmt::format("{} samples", t.eval.size())});
        tab.rows.push_back({"head", std::string(to_string(t.head))});
        emit(out, fmt_, tab);
    }));

    // ablate
    TaskFlags ab;
    std::vector<std::size_t> ab_ranks{4, 8, 12, 20};
    std::vector<std::string> ab_inits{"svd", "random"};
    std::vector<std::uint64_t> ab_seeds;
    std::size_t ab_n_seeds = 5;
    TrainConfig ab_cfg;
    ab_cfg.adapter_lr = 0.05;
    ab_cfg.epochs = 10;
    ab_cfg.batch_size = 32;
    std::string ab_config, ab_records, ab_summary, ab_scheduler = "linear";
    AblationOptions ab_opts;
    ab_opts.jobs = std::max(1u, std::thread::hardware_concurrency());
    auto* abl = app.add_subcommand("ablate", "SVD vs random projection initialization sweep");
    add_task_flags(abl, ab);
    abl->add_option("--ranks", ab_ranks, "Adapter ranks")->delimiter(',')->check(CLI::PositiveNumber);
    abl->add_option("--inits", ab_inits, "Initializations")->delimiter(',')->check(CLI::IsMember({"svd", "random"}));
    auto* seeds_opt = abl->add_option("--seeds", ab_seeds, "Training seeds (default 0..n-seeds-1)")->delimiter(',');
    abl->add_option("--n-seeds", ab_n_seeds, "Seed count when --seeds is absent")->check(CLI::PositiveNumber)->capture_default_str();
    abl->add_option("--config", ab_config, "Training config file");
    auto* ab_lr = abl->add_option("--lr", ab_cfg.adapter_lr, "Adapter learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    auto* ab_ep = abl->add_option("--epochs", ab_cfg.epochs, "Epochs")->check(CLI::PositiveNumber)->capture_default_str();
    auto* ab_bs = abl->add_option("--batch-size", ab_cfg.batch_size, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
    auto* ab_sc = abl->add_option("--scheduler", ab_scheduler, "linear or cosine")->check(CLI::IsMember({"linear", "cosine"}));
    abl->add_option("--alpha", ab_opts.alpha, "Scaling numerator")->check(CLI::PositiveNumber)->capture_default_str();
    abl->add_option("--sigma", ab_opts.sigma, "Initial latent std")->check(CLI::NonNegativeNumber)->capture_default_str();
    abl->add_option("--jobs", ab_opts.jobs, "Worker threads")->check(CLI::PositiveNumber);
    abl->add_option("--records", ab_records, "Per-epoch records CSV");
    abl->add_option("--summary", ab_summary, "Summary CSV");
    abl->callback(run([&](Format fmt_) {
        TaskSpec spec = ab.spec;
        spec.kind = parse_task_kind(ab.kind);
        spec.seed = seed;
        TrainConfig cfg = ab_cfg;
        if (!ab_config.empty()) {
            cfg = load_train_config(ab_config);
            if (ab_lr->count()) cfg.adapter_lr = ab_cfg.adapter_lr;
            if (ab_ep->count()) cfg.epochs = ab_cfg.epochs;
            if (ab_bs->count()) cfg.batch_size = ab_cfg.batch_size;
        }
        if (ab_sc->count()) cfg.scheduler = parse_scheduler(ab_scheduler);
        const auto seeds = seeds_opt->count() ? ab_seeds : seed_range(ab_n_seeds);
        std::vector<InitKind> inits;
        for (const auto& s : ab_inits) inits.push_back(parse_init_kind(s));

        const auto t = gen_task(spec);
        const auto records = run_ablation(t, ab_ranks, inits, seeds, cfg, ab_opts);
        const auto rows = summarize(records);
        auto write_csv = [](const std::string& path, auto&& writer) {
            std::ofstream f(path);
            if (!f) throw IoError(fmt::format("cannot write '{}'", path));
            writer(f);
        };
        if (!ab_records.empty()) write_csv(ab_records, [&](std::ostream& f) { write_records_csv(f, records); });
        if (!ab_summary.empty()) write_csv(ab_summary, [&](std::ostream& f) { write_summary_csv(f, rows); });
        if (fmt_ == Format::table) {
            write_summary_table(out, rows);
            return;
        }
        Table tab{{"rank", "init", "seeds", "median_best", "median_ep1", "median_ep2"}, {}};
        for (const auto& r : rows) {
            tab.rows.push_back({r.rank, std::string(to_string(r.init)), r.seeds, json_number(r.median_best),
                                json_number(r.median_ep1), json_number(r.median_ep2)});
        }
        emit(out, fmt_, tab);
    }));

    // registry
    std::string reg_root, reg_add_path;
    bool reg_apply = false;
    auto* reg = app.add_subcommand("registry", "Content-addressed checkpoint store");
    reg->require_subcommand(1);
    reg->add_option("--root", reg_root, "Registry root (default: $LORAXS_REGISTRY)");
    auto* reg_ls = reg->add_subcommand("ls", "List checkpoints");
    reg_ls->callback(run([&](Format fmt_) {
        const Registry r(registry_root(reg_root));
        Table t{{"checkpoint_id", "base_model_id", "byte_size", "created_at", "path"}, {}};
        for (const auto& e : r.manifest().entries)
            t.rows.push_back({e.checkpoint_id, e.base_model_id, e.byte_size, e.created_at, e.path});
        emit(out, fmt_, t);
    }));
    auto* reg_verify = reg->add_subcommand("verify", "Re-check every listed checkpoint");
    reg_verify->callback(run([&](Format fmt_) {
        const Registry r(registry_root(reg_root));
        const auto report = r.verify();
        Table t{{"checkpoint_id", "problem"}, {}};
        for (const auto& f : report.failures) t.rows.push_back({f.checkpoint_id, f.problem});
        emit(out, fmt_, t);
        if (fmt_ == Format::table) out << fmt::format("{} checked, {} failed\n", report.checked, report.failures.size());
        if (!report.ok()) throw ExitCode(1);
    }));
    auto* reg_gc = reg->add_subcommand("gc", "Remove checkpoint files the manifest does not list");
    reg_gc->add_flag("--apply", reg_apply, "Delete instead of only listing");
    reg_gc->callback(run([&](Format fmt_) {
        Registry r(registry_root(reg_root));
        const auto report = r.gc(reg_apply);
        Table t{{"path", "action"}, {}};
        for (const auto& p : report.unreferenced)
            t.rows.push_back({fs::relative(p, r.root()).string(), report.applied ? "removed" : "would remove"});
        emit(out, fmt_, t);
    }));
    auto* reg_add = reg->add_subcommand("add", "Store a checkpoint file (creates the registry if needed)");
    reg_add->add_option("checkpoint", reg_add_path, "Checkpoint file")->required();
    reg_add->callback(run([&](Format fmt_) {
        const auto ck = load_checkpoint(reg_add_path);
        auto r = Registry::create(registry_root(reg_root));
        const auto e = r.add(ck);
        Table t{{"checkpoint_id", "path", "byte_size"}, {}};
        t.rows.push_back({e.checkpoint_id, e.path, e.byte_size});
        emit(out, fmt_, t);
    }));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    try {
        action(parse_format(format_name));
    } catch (const ExitCode& e) {
        return e.code();
    } catch (const CLI::Error& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const ParameterError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    out.flush();
    return 0;
}

}  // namespace loraxs
