#include "precofact/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "precofact/dataio.hpp"
#include "precofact/metrics.hpp"

namespace precofact {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("train.lr must be a finite non-negative number");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch_size", c.batch_size}, {"epochs", c.epochs},        {"lr", c.learning_rate},
         {"seed", c.seed},             {"beta1", c.adam.beta1},     {"beta2", c.adam.beta2},
         {"adam_eps", c.adam.eps},     {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw ConfigError("train config must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "batch_size") c.batch_size = value.get<std::size_t>();
            else if (key == "epochs") c.epochs = value.get<std::size_t>();
            else if (key == "lr") c.learning_rate = value.get<double>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "beta1") c.adam.beta1 = value.get<double>();
            else if (key == "beta2") c.adam.beta2 = value.get<double>();
            else if (key == "adam_eps") c.adam.eps = value.get<double>();
            else if (key == "checkpoint_every") c.checkpoint_every = value.get<std::size_t>();
            else throw ConfigError("unknown key 'train." + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for 'train." + key + "': " + e.what());
        }
    }
}

template <typename T>
AdamState<T> make_adam_state(std::span<const NamedParameter<T>> params) {
    AdamState<T> state;
    for (const auto& p : params) {
        state.m.emplace_back(p.var.shape());
        state.v.emplace_back(p.var.shape());
    }
    return state;
}

template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState<T>& state, double learning_rate,
               const AdamOptions& options) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ContractError("optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                            std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = params[i].var.grad();
        if (g.shape() != params[i].var.shape() || state.m[i].shape() != g.shape())
            throw ContractError("gradient for '" + params[i].name + "' is missing or misshapen");
        if (!g.all_finite()) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(options.beta1, t);
    const double c2 = 1.0 - std::pow(options.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].var.mutable_value().data();
        const auto grad = params[i].var.grad().data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t k = 0; k < value.size(); ++k) {
            const double gk = static_cast<double>(grad[k]);
            const double mk = options.beta1 * static_cast<double>(m[k]) + (1.0 - options.beta1) * gk;
            const double vk = options.beta2 * static_cast<double>(v[k]) + (1.0 - options.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = learning_rate * (mk / c1) / (std::sqrt(vk / c2) + options.eps);
            value[k] = static_cast<T>(static_cast<double>(value[k]) - update);
        }
    }
}

nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
    j["val_weighted_f1"] = r.val_weighted_f1 ? nlohmann::json(*r.val_weighted_f1) : nlohmann::json(nullptr);
    j["wall_seconds"] = r.wall_seconds;
    return j;
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.train_loss = j.at("train_loss").get<double>();
    if (!j.at("val_weighted_f1").is_null()) r.val_weighted_f1 = j.at("val_weighted_f1").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    return r;
}

std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

template <typename T>
TrainState<T> TrainState<T>::clone() const {
    TrainState out;
    out.params = params.clone();
    out.adam = adam;
    out.epochs_done = epochs_done;
    out.shuffle_rng = shuffle_rng;
    out.dropout_rng = dropout_rng;
    if (best_params) out.best_params = best_params->clone();
    out.best_weighted_f1 = best_weighted_f1;
    out.best_epoch = best_epoch;
    out.log = log;
    return out;
}

namespace {

Rng derived_rng(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
    return Rng(seq);
}

constexpr std::uint32_t kShuffleStream = 1;
constexpr std::uint32_t kDropoutStream = 2;

void require_labels(std::span<const SampleEmbeddings> samples, const char* what) {
    for (const auto& s : samples)
        if (!s.label) throw InvalidInputError(std::string(what) + " sample '" + s.id + "' has no label");
}

std::vector<int> labels_of(std::span<const SampleEmbeddings> samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(*s.label);
    return out;
}

} // namespace

template <typename T>
TrainState<T> start_training(const ModelConfig& model, const TrainConfig& config) {
    model.validate();
    config.validate();
    TrainState<T> state;
    state.params = init_params<T>(model, config.seed);
    const auto named = state.params.named();
    state.adam = make_adam_state<T>(named);
    state.shuffle_rng = derived_rng(config.seed, kShuffleStream);
    state.dropout_rng = derived_rng(config.seed, kDropoutStream);
    return state;
}

template <typename T>
double train_step(TrainState<T>& state, std::span<const SampleEmbeddings* const> batch, const ModelConfig& model,
                  const TrainConfig& config) {
    if (batch.empty()) throw ContractError("empty batch");
    state.params.zero_grad();
    std::vector<Var<T>> rows;
    std::vector<int> labels;
    rows.reserve(batch.size());
    for (const auto* sample : batch) {
        if (!sample->label) throw InvalidInputError("training sample '" + sample->id + "' has no label");
        rows.push_back(forward(*sample, state.params, model, Mode::train, &state.dropout_rng));
        labels.push_back(*sample->label);
    }
    auto loss = ad::cross_entropy(ad::concat_rows<T>(rows), labels);
    backward(loss);
    auto named = state.params.named();
    adam_step<T>(named, state.adam, config.learning_rate, config.adam);
    return static_cast<double>(loss.value()[0]);
}

template <typename T>
void run_training(TrainState<T>& state, std::span<const SampleEmbeddings> train_set,
                  std::span<const SampleEmbeddings> val_set, const ModelConfig& model, const TrainConfig& config,
                  const TrainHooks& hooks) {
    model.validate();
    config.validate();
    if (train_set.empty()) throw InvalidInputError("training set is empty");
    require_labels(train_set, "training");
    require_labels(val_set, "validation");
    const auto val_labels = labels_of(val_set);

    while (state.epochs_done < config.epochs && (!hooks.stop_after || state.epochs_done < *hooks.stop_after)) {
        const auto start = std::chrono::steady_clock::now();
        const auto order = epoch_order(train_set.size(), state.shuffle_rng);
        double loss_sum = 0.0;
        std::vector<const SampleEmbeddings*> batch;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            batch.clear();
            for (std::size_t k = begin; k < end; ++k) batch.push_back(&train_set[order[k]]);
            loss_sum += train_step<T>(state, batch, model, config) * static_cast<double>(batch.size());
        }

        EpochRecord record;
        record.epoch = state.epochs_done + 1;
        record.train_loss = loss_sum / static_cast<double>(train_set.size());
        if (!val_set.empty()) {
            const auto preds = predict<T>(val_set, state.params, model, "validation", hooks.threads);
            const double f1 = evaluate(argmax_predict(preds.scores), val_labels).weighted_f1;
            record.val_weighted_f1 = f1;
            if (!state.best_weighted_f1 || f1 > *state.best_weighted_f1) {
                state.best_params = state.params.clone();
                state.best_weighted_f1 = f1;
                state.best_epoch = record.epoch;
            }
        }
        state.epochs_done = record.epoch;
        record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        state.log.push_back(record);
        if (hooks.on_epoch) hooks.on_epoch(record);
        if (config.checkpoint_every && state.epochs_done % config.checkpoint_every == 0 && hooks.on_checkpoint)
            hooks.on_checkpoint(state.epochs_done);
    }
}

template <typename T>
TrainResult<T> finish_training(TrainState<T>&& state) {
    TrainResult<T> result;
    result.log = std::move(state.log);
    if (state.best_params) {
        result.params = std::move(*state.best_params);
        result.selected_epoch = state.best_epoch;
    } else {
        result.params = std::move(state.params);
        result.selected_epoch = state.epochs_done;
    }
    return result;
}

template <typename T>
TrainResult<T> train(std::span<const SampleEmbeddings> train_set, std::span<const SampleEmbeddings> val_set,
                     const ModelConfig& model, const TrainConfig& config, const TrainHooks& hooks) {
    auto state = start_training<T>(model, config);
    run_training(state, train_set, val_set, model, config, hooks);
    return finish_training(std::move(state));
}

namespace {

std::string rng_text(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

Rng rng_from_text(const std::string& text) {
    std::istringstream is(text);
    Rng rng;
    is >> rng;
    if (!is) throw FormatError("bad-config", "train state holds an unreadable generator state");
    return rng;
}

} // namespace

template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& state, const ModelConfig& model,
                      const TrainConfig& config) {
    Checkpoint ckpt;
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : state.log) log.push_back(to_json(r));
    nlohmann::json meta{{"format", "precofact-train-state"},
                        {"model", model},
                        {"train", config},
                        {"epochs_done", state.epochs_done},
                        {"adam_step", state.adam.step},
                        {"shuffle_rng", rng_text(state.shuffle_rng)},
                        {"dropout_rng", rng_text(state.dropout_rng)},
                        {"best_epoch", state.best_epoch},
                        {"log", log}};
    meta["best_weighted_f1"] =
        state.best_weighted_f1 ? nlohmann::json(*state.best_weighted_f1) : nlohmann::json(nullptr);
    ckpt.config_text = meta.dump();

    const auto named = state.params.named();
    for (const auto& p : named) ckpt.records.emplace_back("param/" + p.name, p.var.value().template cast<float>());
    for (std::size_t i = 0; i < named.size(); ++i)
        ckpt.records.emplace_back("adam.m/" + named[i].name, state.adam.m[i].template cast<float>());
    for (std::size_t i = 0; i < named.size(); ++i)
        ckpt.records.emplace_back("adam.v/" + named[i].name, state.adam.v[i].template cast<float>());
    if (state.best_params)
        for (const auto& p : state.best_params->named())
            ckpt.records.emplace_back("best/" + p.name, p.var.value().template cast<float>());
    write_checkpoint(path, ckpt);
}

template <typename T>
LoadedTrainState<T> load_train_state(const std::filesystem::path& path) {
    auto ckpt = read_checkpoint(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ckpt.config_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad-config", std::string("train state config is not valid JSON: ") + e.what());
    }
    if (!meta.is_object() || meta.value("format", "") != "precofact-train-state")
        throw FormatError("bad-config", path.string() + " does not hold a training state");

    LoadedTrainState<T> out;
    std::map<std::string, Tensor<float>> records;
    try {
        out.model = meta.at("model").get<ModelConfig>();
        out.model.validate();
        out.config = meta.at("train").get<TrainConfig>();
        out.config.validate();
        auto& s = out.state;
        s.epochs_done = meta.at("epochs_done").get<std::size_t>();
        s.shuffle_rng = rng_from_text(meta.at("shuffle_rng").get<std::string>());
        s.dropout_rng = rng_from_text(meta.at("dropout_rng").get<std::string>());
        s.best_epoch = meta.at("best_epoch").get<std::size_t>();
        if (!meta.at("best_weighted_f1").is_null()) s.best_weighted_f1 = meta.at("best_weighted_f1").get<double>();
        for (const auto& r : meta.at("log")) s.log.push_back(epoch_record_from_json(r));
        s.adam.step = meta.at("adam_step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad-config", std::string("train state metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError("bad-config", std::string("train state metadata: ") + e.what());
    }
    for (auto& [name, t] : ckpt.records)
        if (!records.emplace(name, std::move(t)).second)
            throw FormatError("bad-record", "duplicate record '" + name + "'");

    auto take = [&](const std::string& name, const Shape& shape) {
        auto it = records.find(name);
        if (it == records.end()) throw FormatError("bad-record", "train state lacks record '" + name + "'");
        if (it->second.shape() != shape)
            throw FormatError("bad-record", "record '" + name + "' has shape " + shape_string(it->second.shape()) +
                                                ", expected " + shape_string(shape));
        auto value = it->second.template cast<T>();
        records.erase(it);
        return value;
    };

    auto& s = out.state;
    s.params = init_params<T>(out.model, 0);
    auto named = s.params.named();
    for (auto& p : named) p.var.mutable_value() = take("param/" + p.name, p.var.shape());
    for (auto& p : named) s.adam.m.push_back(take("adam.m/" + p.name, p.var.shape()));
    for (auto& p : named) s.adam.v.push_back(take("adam.v/" + p.name, p.var.shape()));
    if (s.best_weighted_f1) {
        s.best_params = init_params<T>(out.model, 0);
        for (auto& p : s.best_params->named()) p.var.mutable_value() = take("best/" + p.name, p.var.shape());
    }
    if (!records.empty())
        throw FormatError("bad-record", "unexpected record '" + records.begin()->first + "' in train state");
    return out;
}

#define PRECOFACT_INSTANTIATE(T)                                                                                  \
    template AdamState<T> make_adam_state<T>(std::span<const NamedParameter<T>>);                                 \
    template void adam_step<T>(std::span<NamedParameter<T>>, AdamState<T>&, double, const AdamOptions&);          \
    template struct TrainState<T>;                                                                                \
    template TrainState<T> start_training<T>(const ModelConfig&, const TrainConfig&);                             \
    template double train_step<T>(TrainState<T>&, std::span<const SampleEmbeddings* const>, const ModelConfig&,   \
                                  const TrainConfig&);                                                            \
    template void run_training<T>(TrainState<T>&, std::span<const SampleEmbeddings>,                              \
                                  std::span<const SampleEmbeddings>, const ModelConfig&, const TrainConfig&,      \
                                  const TrainHooks&);                                                             \
    template TrainResult<T> finish_training<T>(TrainState<T>&&);                                                  \
    template TrainResult<T> train<T>(std::span<const SampleEmbeddings>, std::span<const SampleEmbeddings>,        \
                                     const ModelConfig&, const TrainConfig&, const TrainHooks&);                  \
    template void save_train_state<T>(const std::filesystem::path&, const TrainState<T>&, const ModelConfig&,     \
                                      const TrainConfig&);                                                        \
    template LoadedTrainState<T> load_train_state<T>(const std::filesystem::path&);

PRECOFACT_INSTANTIATE(float)
PRECOFACT_INSTANTIATE(double)

#undef PRECOFACT_INSTANTIATE

} // namespace precofact
