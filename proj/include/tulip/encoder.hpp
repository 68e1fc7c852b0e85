#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/corpus.hpp"
#include "tulip/posenc.hpp"
#include "tulip/tensor.hpp"
#include "tulip/tokenizer.hpp"

namespace tulip {

struct EncoderConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 4;
    std::size_t mlp_ratio = 4;
    std::size_t projection_dim = 64;
    // Longest sequence accepted by relative schemes (T_g). Absolute schemes use position.max_positions.
    std::size_t context_length = 248;
    posenc::PositionalScheme position;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t max_sequence() const;
    // Throws ConfigError.
    void validate() const;

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ImageConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t mlp_ratio = 4;
    std::size_t projection_dim = 64;

    std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t patch_pixels() const { return patch_size * patch_size * channels; }
    void validate() const;

    friend bool operator==(const ImageConfig&, const ImageConfig&) = default;
};

// Pre-norm transformer block. T is Tensor for storage and Var while bound to a tape.
template <class T>
struct BlockParams {
    T ln1_gain, ln1_bias;
    T w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    T ln2_gain, ln2_bias;
    T w_fc1, b_fc1, w_fc2, b_fc2;
    std::optional<T> cope_table;  // [(p_max + 1) x d_model], cope scheme only
};

template <class T>
struct TextParamsT {
    T token_embedding;
    std::optional<T> position_embedding;  // [T x d_model], absolute scheme only
    std::vector<BlockParams<T>> blocks;
    T ln_final_gain, ln_final_bias;
    T projection;
};

template <class T>
struct ImageParamsT {
    T patch_weight, patch_bias;
    T position_embedding;
    std::vector<BlockParams<T>> blocks;
    T ln_final_gain, ln_final_bias;
    T projection;
};

using TextParams = TextParamsT<Tensor>;
using ImageParams = ImageParamsT<Tensor>;

// Calls f(name, members...) for every parameter, in the fixed order used by checkpoints and optimizers.
// All structs must share one layout; optional members follow the first argument.
template <class F, class First, class... Rest>
void visit_block(const std::string& prefix, F&& f, First& first, Rest&... rest) {
    f(prefix + "ln1_gain", first.ln1_gain, rest.ln1_gain...);
    f(prefix + "ln1_bias", first.ln1_bias, rest.ln1_bias...);
    f(prefix + "w_q", first.w_q, rest.w_q...);
    f(prefix + "b_q", first.b_q, rest.b_q...);
    f(prefix + "w_k", first.w_k, rest.w_k...);
    f(prefix + "b_k", first.b_k, rest.b_k...);
    f(prefix + "w_v", first.w_v, rest.w_v...);
    f(prefix + "b_v", first.b_v, rest.b_v...);
    f(prefix + "w_o", first.w_o, rest.w_o...);
    f(prefix + "b_o", first.b_o, rest.b_o...);
    f(prefix + "ln2_gain", first.ln2_gain, rest.ln2_gain...);
    f(prefix + "ln2_bias", first.ln2_bias, rest.ln2_bias...);
    f(prefix + "w_fc1", first.w_fc1, rest.w_fc1...);
    f(prefix + "b_fc1", first.b_fc1, rest.b_fc1...);
    f(prefix + "w_fc2", first.w_fc2, rest.w_fc2...);
    f(prefix + "b_fc2", first.b_fc2, rest.b_fc2...);
    if (first.cope_table) {
        (rest.cope_table.emplace(), ...);
        f(prefix + "cope_table", *first.cope_table, *rest.cope_table...);
    }
}

template <class F, class First, class... Rest>
void visit_text(F&& f, First& first, Rest&... rest) {
    f(std::string("token_embedding"), first.token_embedding, rest.token_embedding...);
    if (first.position_embedding) {
        (rest.position_embedding.emplace(), ...);
        f(std::string("position_embedding"), *first.position_embedding, *rest.position_embedding...);
    }
    (rest.blocks.resize(first.blocks.size()), ...);
    for (std::size_t i = 0; i < first.blocks.size(); ++i)
        visit_block("blocks." + std::to_string(i) + ".", f, first.blocks[i], rest.blocks[i]...);
    f(std::string("ln_final_gain"), first.ln_final_gain, rest.ln_final_gain...);
    f(std::string("ln_final_bias"), first.ln_final_bias, rest.ln_final_bias...);
    f(std::string("projection"), first.projection, rest.projection...);
}

template <class F, class First, class... Rest>
void visit_image(F&& f, First& first, Rest&... rest) {
    f(std::string("patch_weight"), first.patch_weight, rest.patch_weight...);
    f(std::string("patch_bias"), first.patch_bias, rest.patch_bias...);
    f(std::string("position_embedding"), first.position_embedding, rest.position_embedding...);
    (rest.blocks.resize(first.blocks.size()), ...);
    for (std::size_t i = 0; i < first.blocks.size(); ++i)
        visit_block("blocks." + std::to_string(i) + ".", f, first.blocks[i], rest.blocks[i]...);
    f(std::string("ln_final_gain"), first.ln_final_gain, rest.ln_final_gain...);
    f(std::string("ln_final_bias"), first.ln_final_bias, rest.ln_final_bias...);
    f(std::string("projection"), first.projection, rest.projection...);
}

// normal(0, 0.02) weights, zero biases, unit gains; draws follow visit order.
TextParams init_text_params(const EncoderConfig& config, std::uint64_t seed);
ImageParams init_image_params(const ImageConfig& config, std::uint64_t seed);

std::size_t parameter_count(const EncoderConfig& config);
std::size_t parameter_count(const TextParams& params);
std::size_t parameter_count(const ImageParams& params);

// Registers every tensor as a leaf. trainable=false makes them constants on the tape.
TextParamsT<Var> bind(Tape& tape, const TextParams& params, bool trainable);
ImageParamsT<Var> bind(Tape& tape, const ImageParams& params, bool trainable);

struct SequenceEmbedding {
    std::vector<double> vector;
    std::size_t source_length = 0;
};

struct TextForwardOptions {
    AttentionCapture* capture = nullptr;
    std::size_t capture_layer = 0;
    bool every_row = false;  // project every packed row instead of the aggregation rows
};

// Projected embeddings [batch x projection_dim] read at each sequence's last (EOS) token.
// Throws OutOfWindowError when a sequence does not fit the configured window.
Var text_forward(Tape& tape, const TextParamsT<Var>& params, const EncoderConfig& config,
                 std::span<const TokenSequence> sequences, const TextForwardOptions& options = {});

// Mean-pooled projected embeddings [batch x projection_dim]. Throws DimensionError for bad image sizes.
Var image_forward(Tape& tape, const ImageParamsT<Var>& params, const ImageConfig& config,
                  std::span<const Image* const> images);

SequenceEmbedding encode_text(const TextParams& params, const EncoderConfig& config, const TokenSequence& tokens);
SequenceEmbedding encode_image(const ImageParams& params, const ImageConfig& config, const Image& image);

// Inference helpers; rows follow input order. Work is chunked to bound tape memory.
Tensor encode_texts(const TextParams& params, const EncoderConfig& config, std::span<const TokenSequence> sequences,
                    std::size_t chunk = 64);
Tensor encode_images(const ImageParams& params, const ImageConfig& config, std::span<const Image* const> images,
                     std::size_t chunk = 128);

// Attention row of the aggregation token in one layer/head; length n, sums to 1.
std::vector<double> extract_attention(const TextParams& params, const EncoderConfig& config,
                                      const TokenSequence& tokens, std::size_t layer, std::size_t head);

// The full dual encoder as stored in a checkpoint.
struct DualEncoder {
    EncoderConfig text_config;
    TextParams text;
    std::optional<ImageConfig> image_config;
    std::optional<ImageParams> image;
    double temperature = 0.07;
};

struct Checkpoint {
    static constexpr int kFormatVersion = 1;
    std::string phase;  // teacher | distilled | expanded
    std::uint64_t seed = 0;
    DualEncoder model;
};

// JSON header line, '\n', then little-endian float64 payloads in header order.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tulip
