#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "precofact/model.hpp"
#include "precofact/types.hpp"

namespace precofact {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 30;
    double learning_rate = 3e-5;
    std::uint64_t seed = 41;
    AdamOptions adam;
    // Save a resumable state every this many epochs; 0 disables.
    std::size_t checkpoint_every = 0;

    void validate() const;
};

// Keys: batch_size, epochs, lr, seed, beta1, beta2, adam_eps,
// checkpoint_every. Unknown keys are rejected.
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

template <typename T>
struct AdamState {
    // First and second moments, one per parameter in named() order.
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(std::span<const NamedParameter<T>> params);

// One bias-corrected Adam update from the parameters' accumulated grads.
// A non-finite gradient throws NumericError naming the parameter before
// anything is modified.
template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState<T>& state, double learning_rate,
               const AdamOptions& options = {});

// A uniformly shuffled permutation of 0..n-1.
std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng);

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    std::optional<double> val_weighted_f1;
    double wall_seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

// Everything needed to continue a run exactly where it stopped.
template <typename T>
struct TrainState {
    ModelParams<T> params;
    AdamState<T> adam;
    std::size_t epochs_done = 0;
    Rng shuffle_rng;
    Rng dropout_rng;
    std::optional<ModelParams<T>> best_params;
    std::optional<double> best_weighted_f1;
    std::size_t best_epoch = 0;
    std::vector<EpochRecord> log;

    TrainState clone() const;
};

// Fresh state: parameters, shuffle order and dropout draws each come from
// their own generator derived from config.seed.
template <typename T>
TrainState<T> start_training(const ModelConfig& model, const TrainConfig& config);

// Forward on every sample of the batch, mean cross-entropy, backward, one
// Adam step. Returns the batch loss.
template <typename T>
double train_step(TrainState<T>& state, std::span<const SampleEmbeddings* const> batch, const ModelConfig& model,
                  const TrainConfig& config);

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    // Called with the epoch count after every config.checkpoint_every epochs.
    std::function<void(std::size_t epochs_done)> on_checkpoint;
    // Stop once this many epochs are done (for interrupted runs).
    std::optional<std::size_t> stop_after;
    // Worker threads for validation inference.
    std::size_t threads = 1;
};

// Runs the remaining epochs. Every training sample must carry a label.
template <typename T>
void run_training(TrainState<T>& state, std::span<const SampleEmbeddings> train_set,
                  std::span<const SampleEmbeddings> val_set, const ModelConfig& model, const TrainConfig& config,
                  const TrainHooks& hooks = {});

template <typename T>
struct TrainResult {
    // Best-validation parameters, or the final ones without a validation set.
    ModelParams<T> params;
    std::vector<EpochRecord> log;
    std::size_t selected_epoch = 0;
};

template <typename T>
TrainResult<T> finish_training(TrainState<T>&& state);

template <typename T>
TrainResult<T> train(std::span<const SampleEmbeddings> train_set, std::span<const SampleEmbeddings> val_set,
                     const ModelConfig& model, const TrainConfig& config, const TrainHooks& hooks = {});

// Resumable state as a PCFM container. Records: "param/<name>",
// "adam.m/<name>", "adam.v/<name>" and, once a best epoch exists,
// "best/<name>". Values are stored as f32, so a float state round-trips
// exactly.
template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& state, const ModelConfig& model,
                      const TrainConfig& config);

template <typename T>
struct LoadedTrainState {
    ModelConfig model;
    TrainConfig config;
    TrainState<T> state;
};

template <typename T>
LoadedTrainState<T> load_train_state(const std::filesystem::path& path);

} // namespace precofact
