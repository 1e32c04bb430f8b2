#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclmt/contextizer.hpp"
#include "iclmt/model.hpp"
#include "json.hpp"

namespace iclmt {

enum class TrainStage { baseline, stage1, stage2a, stage2b, stage3 };

std::string to_string(TrainStage stage);
/// Accepts "baseline", "1", "2a", "2b", "3" (and "stage1" etc.).
TrainStage parse_train_stage(std::string_view name);

/// Mean of -log p(target_j) over positions whose mask bit is 1.
/// `log_probs` has one row per prediction. Throws ValidationError on an
/// all-zero mask or mismatched lengths.
double nll_loss(const Matrix& log_probs, std::span<const TokenId> targets, std::span<const std::uint8_t> loss_mask);

enum class StoppingKind { aggressive, convergence };
/// What "decrease" is measured against in the aggressive rule.
enum class StoppingReference { best_so_far, previous };

struct StoppingPolicy {
    StoppingKind kind = StoppingKind::aggressive;
    double min_decrease = 0.1;
    std::size_t patience = 2;
    StoppingReference reference = StoppingReference::best_so_far;

    static StoppingPolicy aggressive(double min_decrease = 0.1, std::size_t patience = 2);
    static StoppingPolicy convergence(std::size_t patience);
};

void validate(const StoppingPolicy& policy);

struct StoppingState {
    std::optional<double> best;
    std::optional<double> previous;
    std::size_t failures = 0;
    std::size_t validations = 0;
};

struct StopDecision {
    StoppingState state;
    bool stop = false;
    /// The new loss is the best seen so far.
    bool improved = false;
};

StopDecision should_stop(const StoppingPolicy& policy, const StoppingState& state, double new_val_loss);

struct TrainConfig {
    TrainStage stage = TrainStage::baseline;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-9;
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;
    double validate_every_fraction = 0.01;
    StoppingPolicy stopping;
    std::size_t max_epochs = 100;
    /// 0 = no cap.
    std::size_t max_steps = 0;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 0.0;
};

/// Defaults per stage: aggressive stopping for 2a/2b, convergence otherwise.
TrainConfig default_train_config(TrainStage stage);
void validate(const TrainConfig& config);

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys fall back to `default_train_config(stage)`.
TrainConfig train_config_from_json(const nlohmann::json& j, std::optional<TrainStage> stage = std::nullopt);

struct TrainLogEntry {
    std::size_t step = 0;
    double epoch_fraction = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
    bool stop = false;
};

struct TrainResult {
    ModelParams params;
    std::vector<TrainLogEntry> log;
    std::size_t steps = 0;
    std::optional<double> best_val_loss;
    std::size_t best_step = 0;
};

/// Throws ValidationError unless every sample carries the stage's format:
/// baseline/stage1 take plain (k = 0) samples, 2a/2b their own stage tag,
/// stage3 any stage-2 serialization.
void check_stage_data(TrainStage stage, std::span<const EncodedSample> samples);

/// Token-weighted mean masked NLL over `samples`.
double evaluate_loss(const ModelParams& params, std::span<const EncodedSample> samples);

/// Adam over the trainable arrays with seeded length-bucketed batches.
/// Validates every `validate_every_fraction` of an epoch and returns the
/// parameters at the best validation loss. With no validation data it trains
/// for `max_epochs` (or `max_steps`) and returns the final parameters.
///
/// stage1/stage3 require injected adapters with a frozen base (StateError
/// otherwise); baseline/2a/2b train the full model and reject adapters.
TrainResult train_stage(const ModelParams& model_in, std::span<const EncodedSample> train,
                        std::span<const EncodedSample> validation, const TrainConfig& config);

std::string serialize_train_log(std::span<const TrainLogEntry> log);

}  // namespace iclmt
