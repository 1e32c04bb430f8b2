#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "iclmt/tokenizer.hpp"
#include "json.hpp"

namespace iclmt {

using Matrix = Eigen::MatrixXd;

/// Encoder-decoder shape. Embedding matrices are never shared between the
/// encoder input, decoder input and output projection.
struct ModelConfig {
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t model_dim = 64;
    std::size_t ffn_dim = 128;
    std::size_t heads = 2;
    std::size_t max_input = 256;
    std::size_t vocab_size = 0;
    bool share_embeddings = false;

    bool operator==(const ModelConfig&) const = default;
};

/// Bottleneck adapters: every decoder layer and the even-indexed encoder layers.
struct AdapterConfig {
    std::size_t bottleneck = 16;

    bool operator==(const AdapterConfig&) const = default;
};

void validate(const ModelConfig& config);

/// Encoder layers that receive an adapter (0, 2, 4, ...).
std::vector<std::size_t> adapter_encoder_layers(std::size_t encoder_layers);

struct ParamArray {
    std::string name;
    Matrix value;
    bool trainable = true;
    bool adapter = false;
};

/// Named dense arrays of one model plus per-array trainable flags.
class ModelParams {
public:
    ModelParams() = default;
    ModelParams(ModelConfig config, std::optional<AdapterConfig> adapters, std::vector<ParamArray> arrays);

    const ModelConfig& config() const noexcept { return config_; }
    const std::optional<AdapterConfig>& adapters() const noexcept { return adapters_; }
    bool has_adapters() const noexcept { return adapters_.has_value(); }

    std::span<ParamArray> arrays() noexcept { return arrays_; }
    std::span<const ParamArray> arrays() const noexcept { return arrays_; }
    std::size_t index_of(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const ParamArray& get(const std::string& name) const { return arrays_[index_of(name)]; }
    ParamArray& get(const std::string& name) { return arrays_[index_of(name)]; }
    std::size_t parameter_count() const;

    void add(ParamArray array);
    void set_adapters(AdapterConfig adapters) { adapters_ = adapters; }

private:
    ModelConfig config_;
    std::optional<AdapterConfig> adapters_;
    std::vector<ParamArray> arrays_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient buffers aligned with ModelParams::arrays().
using Gradients = std::vector<Matrix>;
Gradients zero_gradients(const ModelParams& params);

/// Deterministic initialization; every array trainable.
/// Throws ValidationError for invalid configurations.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Adds adapter arrays (trainable, zero up-projection) and freezes every base
/// array. Throws StateError if adapters are already present.
ModelParams inject_adapters(ModelParams params, const AdapterConfig& adapters, std::uint64_t seed = 7);

/// Per-position log-probabilities, shape (decoder length, vocab size).
/// The decoder is causal. Throws ValidationError for out-of-range ids or
/// sequences longer than `max_input`.
Matrix forward(const ModelParams& params, std::span<const TokenId> encoder_ids, std::span<const TokenId> decoder_ids);

/// Summed masked NLL of one sample and the number of masked positions.
struct LossStats {
    double nll_sum = 0.0;
    std::size_t count = 0;
};

/// Masked NLL of predicting decoder_ids[j+1] from decoder_ids[..j]. Adds
/// d(nll_sum * scale)/d(param) into `grads` for trainable arrays only
/// (frozen arrays keep zero gradients).
LossStats loss_and_gradients(const ModelParams& params, std::span<const TokenId> encoder_ids,
                             std::span<const TokenId> decoder_ids, std::span<const std::uint8_t> loss_mask,
                             Gradients& grads, double scale = 1.0);

struct DecodeResult {
    TokenIds generated_ids;
    bool is_empty = false;

    /// Generated ids without reserved tokens.
    TokenIds text_ids() const;
};

/// Appends the argmax token (lowest id on ties) until <eos>, `max_new` tokens
/// or `max_input` total length. `generated_ids` excludes the prefix and the
/// terminal <eos>.
DecodeResult greedy_decode(const ModelParams& params, std::span<const TokenId> encoder_ids,
                           std::span<const TokenId> decoder_prefix, std::size_t max_new);

/// FNV-1a over the raw bytes of the named arrays (in array order).
std::string hash_arrays(const ModelParams& params, bool adapters_only, bool base_only);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Binary checkpoint: magic, version, JSON header (config, adapter layout),
/// then per array: name, rows, cols, trainable flag, adapter flag,
/// little-endian f32 data.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace iclmt
