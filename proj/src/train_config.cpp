#include "loraxs/train_config.hpp"

#include <fstream>
#include <ostream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "loraxs/errors.hpp"

namespace loraxs {

namespace pt = boost::property_tree;

namespace {

template <class T>
T convert(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        T value{};
        if constexpr (std::is_same_v<T, double>) {
            value = std::stod(text, &used);
        } else {
            if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
            value = static_cast<T>(std::stoull(text, &used));
        }
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return value;
    } catch (const std::exception&) {
        throw ParameterError(fmt::format("config key '{}': cannot parse '{}'", key, text));
    }
}

void apply(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "adapter_lr") c.adapter_lr = convert<double>(key, value);
    else if (key == "head_lr") c.head_lr = convert<double>(key, value);
    else if (key == "epochs") c.epochs = convert<std::size_t>(key, value);
    else if (key == "batch_size") c.batch_size = convert<std::size_t>(key, value);
    else if (key == "warmup_ratio") c.warmup_ratio = convert<double>(key, value);
    else if (key == "scheduler") c.scheduler = parse_scheduler(value);
    else if (key == "weight_decay") c.weight_decay = convert<double>(key, value);
    else if (key == "adam_beta1") c.adam_beta1 = convert<double>(key, value);
    else if (key == "adam_beta2") c.adam_beta2 = convert<double>(key, value);
    else if (key == "adam_eps") c.adam_eps = convert<double>(key, value);
    else if (key == "grad_clip") c.grad_clip = convert<double>(key, value);
    else if (key == "seed") c.seed = convert<std::uint64_t>(key, value);
    else throw ParameterError(fmt::format("unknown config key '{}'", key));
}

}  // namespace

TrainConfig parse_train_config(std::istream& in, const TrainConfig& base) {
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ParameterError(fmt::format("config: {} (line {})", e.message(), e.line()));
    }
    TrainConfig c = base;
    for (const auto& [key, node] : tree) {
        if (node.empty()) {
            apply(c, key, node.data());
        } else if (key == "train") {
            for (const auto& [k, v] : node) apply(c, k, v.data());
        } else {
            throw ParameterError(fmt::format("unknown config section [{}]", key));
        }
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, const TrainConfig& base) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open config '{}'", path.string()));
    return parse_train_config(in, base);
}

void write_train_config(std::ostream& out, const TrainConfig& c) {
    out << "[train]\n";
    out << fmt::format("adapter_lr = {}\n", c.adapter_lr);
    if (c.head_lr) out << fmt::format("head_lr = {}\n", *c.head_lr);
    out << fmt::format("epochs = {}\nbatch_size = {}\nwarmup_ratio = {}\nscheduler = {}\n", c.epochs, c.batch_size,
                       c.warmup_ratio, to_string(c.scheduler));
    out << fmt::format("weight_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n", c.weight_decay,
                       c.adam_beta1, c.adam_beta2, c.adam_eps);
    out << fmt::format("grad_clip = {}\nseed = {}\n", c.grad_clip, c.seed);
}

}  // namespace loraxs
