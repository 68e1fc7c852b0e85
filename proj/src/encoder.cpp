#include "tulip/encoder.hpp"

#include <algorithm>

#include "tulip/error.hpp"
#include "tulip/rng.hpp"

namespace tulip {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (double& v : t.data()) v = rng.normal(0.0, kInitStd);
    return t;
}

BlockParams<Tensor> init_block(Rng& rng, std::size_t d, std::size_t hidden, std::size_t cope_rows) {
    BlockParams<Tensor> b;
    b.ln1_gain = Tensor({1, d}, 1.0);
    b.ln1_bias = Tensor({1, d});
    b.w_q = normal_tensor(rng, d, d);
    b.b_q = Tensor({1, d});
    b.w_k = normal_tensor(rng, d, d);
    b.b_k = Tensor({1, d});
    b.w_v = normal_tensor(rng, d, d);
    b.b_v = Tensor({1, d});
    b.w_o = normal_tensor(rng, d, d);
    b.b_o = Tensor({1, d});
    b.ln2_gain = Tensor({1, d}, 1.0);
    b.ln2_bias = Tensor({1, d});
    b.w_fc1 = normal_tensor(rng, d, hidden);
    b.b_fc1 = Tensor({1, hidden});
    b.w_fc2 = normal_tensor(rng, hidden, d);
    b.b_fc2 = Tensor({1, d});
    if (cope_rows > 0) b.cope_table = normal_tensor(rng, cope_rows, d);
    return b;
}

struct BlockContext {
    const AttentionLayout* layout = nullptr;
    std::size_t n_heads = 0;
    posenc::Scheme scheme = posenc::Scheme::absolute;
    const posenc::RotaryFrequencies* freqs = nullptr;
    std::span<const double> positions;
    std::size_t cope_pmax = 0;
    AttentionCapture* capture = nullptr;
};

Var linear(Var x, Var w, Var b) { return ops::add_row(ops::matmul(x, w), b); }

Var block_forward(const BlockParams<Var>& b, Var x, const BlockContext& ctx) {
    Var h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
    Var q = linear(h, b.w_q, b.b_q);
    Var k = linear(h, b.w_k, b.b_k);
    Var v = linear(h, b.w_v, b.b_v);
    Var attended;
    if (posenc::is_rotary(ctx.scheme)) {
        q = posenc::ops::rope(q, ctx.positions, *ctx.freqs, ctx.n_heads);
        k = posenc::ops::rope(k, ctx.positions, *ctx.freqs, ctx.n_heads);
        attended = ops::attention(q, k, v, *ctx.layout, ctx.n_heads, ctx.capture);
    } else if (ctx.scheme == posenc::Scheme::cope) {
        attended = posenc::ops::cope_attention(q, k, v, *b.cope_table, *ctx.layout, ctx.n_heads, ctx.cope_pmax,
                                               ctx.capture);
    } else {
        attended = ops::attention(q, k, v, *ctx.layout, ctx.n_heads, ctx.capture);
    }
    x = ops::add(x, linear(attended, b.w_o, b.b_o));
    Var h2 = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);
    return ops::add(x, linear(ops::gelu(linear(h2, b.w_fc1, b.b_fc1)), b.w_fc2, b.b_fc2));
}

}  // namespace

std::size_t EncoderConfig::max_sequence() const {
    return position.kind == posenc::Scheme::absolute ? position.max_positions : context_length;
}

void EncoderConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    if (vocab_size < static_cast<std::size_t>(kByteVocab))
        throw ConfigError("vocab_size must cover the byte tokenizer (" + std::to_string(kByteVocab) + ")");
    if (n_layers == 0 || mlp_ratio == 0 || projection_dim == 0) throw ConfigError("encoder sizes must be positive");
    if (posenc::is_rotary(position.kind) && head_dim() % 2 != 0)
        throw ConfigError("rotary schemes need an even head_dim, got " + std::to_string(head_dim()));
    if (position.kind == posenc::Scheme::rope_ntk && head_dim() <= 2)
        throw ConfigError("rope_ntk needs head_dim above 2");
    if (position.kind == posenc::Scheme::absolute && position.max_positions == 0)
        throw ConfigError("absolute scheme needs max_positions > 0");
    if (max_sequence() < 2) throw ConfigError("window must hold at least BOS and EOS");
    if (position.kind == posenc::Scheme::rope_ntk && !(position.ntk_factor >= 1.0))
        throw ConfigError("ntk_factor must be >= 1");
}

void ImageConfig::validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("image d_model must be divisible by n_heads");
    if (channels == 0 || n_layers == 0 || projection_dim == 0) throw ConfigError("image encoder sizes must be positive");
}

TextParams init_text_params(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.d_model;
    TextParams p;
    p.token_embedding = normal_tensor(rng, config.vocab_size, d);
    if (config.position.kind == posenc::Scheme::absolute)
        p.position_embedding = normal_tensor(rng, config.position.max_positions, d);
    const std::size_t cope_rows = config.position.kind == posenc::Scheme::cope ? config.position.cope_pmax + 1 : 0;
    for (std::size_t i = 0; i < config.n_layers; ++i) p.blocks.push_back(init_block(rng, d, d * config.mlp_ratio, cope_rows));
    p.ln_final_gain = Tensor({1, d}, 1.0);
    p.ln_final_bias = Tensor({1, d});
    p.projection = normal_tensor(rng, d, config.projection_dim);
    return p;
}

ImageParams init_image_params(const ImageConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.d_model;
    ImageParams p;
    p.patch_weight = normal_tensor(rng, config.patch_pixels(), d);
    p.patch_bias = Tensor({1, d});
    p.position_embedding = normal_tensor(rng, config.patches(), d);
    for (std::size_t i = 0; i < config.n_layers; ++i) p.blocks.push_back(init_block(rng, d, d * config.mlp_ratio, 0));
    p.ln_final_gain = Tensor({1, d}, 1.0);
    p.ln_final_bias = Tensor({1, d});
    p.projection = normal_tensor(rng, d, config.projection_dim);
    return p;
}

std::size_t parameter_count(const EncoderConfig& c) {
    const std::size_t d = c.d_model, hidden = d * c.mlp_ratio;
    std::size_t block = 4 * (d * d + d) + 4 * d + (d * hidden + hidden) + (hidden * d + d);
    if (c.position.kind == posenc::Scheme::cope) block += (c.position.cope_pmax + 1) * d;
    std::size_t total = c.vocab_size * d + c.n_layers * block + 2 * d + d * c.projection_dim;
    if (c.position.kind == posenc::Scheme::absolute) total += c.position.max_positions * d;
    return total;
}

std::size_t parameter_count(const TextParams& params) {
    std::size_t total = 0;
    visit_text([&](const std::string&, const Tensor& t) { total += t.size(); }, params);
    return total;
}

std::size_t parameter_count(const ImageParams& params) {
    std::size_t total = 0;
    visit_image([&](const std::string&, const Tensor& t) { total += t.size(); }, params);
    return total;
}

TextParamsT<Var> bind(Tape& tape, const TextParams& params, bool trainable) {
    TextParamsT<Var> out;
    visit_text([&](const std::string&, const Tensor& t, Var& v) { v = tape.leaf(t, trainable); }, params, out);
    return out;
}

ImageParamsT<Var> bind(Tape& tape, const ImageParams& params, bool trainable) {
    ImageParamsT<Var> out;
    visit_image([&](const std::string&, const Tensor& t, Var& v) { v = tape.leaf(t, trainable); }, params, out);
    return out;
}

Var text_forward(Tape& tape, const TextParamsT<Var>& params, const EncoderConfig& config,
                 std::span<const TokenSequence> sequences, const TextForwardOptions& options) {
    (void)tape;
    config.validate();
    if (sequences.empty()) throw ContractError("text_forward: empty batch");
    const std::size_t window = config.max_sequence();

    std::vector<int> ids;
    std::vector<double> positions;
    std::vector<int> position_ids;
    std::vector<std::size_t> aggregation_rows;
    AttentionLayout layout;
    layout.causal = true;
    bool any_pad = false;
    for (const TokenSequence& seq : sequences) {
        if (seq.n() == 0) throw ContractError("text_forward: empty token sequence");
        if (seq.n() > window) throw OutOfWindowError(seq.n(), window);
        layout.segments.push_back({ids.size(), seq.n()});
        for (std::size_t i = 0; i < seq.n(); ++i) {
            const int id = seq.ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
                throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
            any_pad = any_pad || id == kPad;
            ids.push_back(id);
            positions.push_back(static_cast<double>(i));
            position_ids.push_back(static_cast<int>(i));
        }
        aggregation_rows.push_back(ids.size() - 1);
    }
    // PAD tokens are never attended to by other tokens.
    if (any_pad) {
        layout.key_visible.resize(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) layout.key_visible[i] = ids[i] != kPad;
    }

    Var x = ops::embedding(params.token_embedding, ids);
    if (config.position.kind == posenc::Scheme::absolute)
        x = ops::add(x, ops::embedding(*params.position_embedding, position_ids));

    std::optional<posenc::RotaryFrequencies> freqs;
    if (posenc::is_rotary(config.position.kind)) freqs = config.position.frequencies(config.head_dim());

    BlockContext ctx;
    ctx.layout = &layout;
    ctx.n_heads = config.n_heads;
    ctx.scheme = config.position.kind;
    ctx.freqs = freqs ? &*freqs : nullptr;
    ctx.positions = positions;
    ctx.cope_pmax = config.position.cope_pmax;
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
        ctx.capture = (options.capture && options.capture_layer == l) ? options.capture : nullptr;
        x = block_forward(params.blocks[l], x, ctx);
    }
    Var normed = ops::layer_norm(x, params.ln_final_gain, params.ln_final_bias);
    if (options.every_row) return ops::matmul(normed, params.projection);
    return ops::matmul(ops::gather_rows(normed, aggregation_rows), params.projection);
}

Var image_forward(Tape& tape, const ImageParamsT<Var>& params, const ImageConfig& config,
                  std::span<const Image* const> images) {
    config.validate();
    if (images.empty()) throw ContractError("image_forward: empty batch");
    const std::size_t side = config.image_size, ps = config.patch_size, grid = side / ps;
    const std::size_t per_image = config.patches(), width = config.patch_pixels();
    Tensor patches({images.size() * per_image, width});
    std::vector<int> patch_ids;
    AttentionLayout layout;
    layout.causal = false;
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = *images[b];
        if (img.width != side || img.height != side || img.pixels.size() != side * side * config.channels)
            throw DimensionError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                 " does not match the " + std::to_string(side) + "x" + std::to_string(side) +
                                 " encoder with patch size " + std::to_string(ps));
        layout.segments.push_back({b * per_image, per_image});
        for (std::size_t pr = 0; pr < grid; ++pr)
            for (std::size_t pc = 0; pc < grid; ++pc) {
                const std::size_t row = b * per_image + pr * grid + pc;
                std::size_t col = 0;
                for (std::size_t r = 0; r < ps; ++r)
                    for (std::size_t c = 0; c < ps; ++c)
                        for (std::size_t ch = 0; ch < config.channels; ++ch)
                            patches.at(row, col++) =
                                img.pixels[((pr * ps + r) * side + pc * ps + c) * config.channels + ch];
                patch_ids.push_back(static_cast<int>(pr * grid + pc));
            }
    }
    Var x = linear(tape.constant(std::move(patches)), params.patch_weight, params.patch_bias);
    x = ops::add(x, ops::embedding(params.position_embedding, patch_ids));
    BlockContext ctx;
    ctx.layout = &layout;
    ctx.n_heads = config.n_heads;
    ctx.scheme = posenc::Scheme::absolute;
    for (const auto& block : params.blocks) x = block_forward(block, x, ctx);
    Var normed = ops::layer_norm(x, params.ln_final_gain, params.ln_final_bias);
    return ops::matmul(ops::segment_mean(normed, layout.segments), params.projection);
}

SequenceEmbedding encode_text(const TextParams& params, const EncoderConfig& config, const TokenSequence& tokens) {
    Tape tape;
    const auto bound = bind(tape, params, false);
    Var out = text_forward(tape, bound, config, std::span(&tokens, 1));
    const auto data = out.value().data();
    return {std::vector<double>(data.begin(), data.end()), tokens.n()};
}

SequenceEmbedding encode_image(const ImageParams& params, const ImageConfig& config, const Image& image) {
    Tape tape;
    const auto bound = bind(tape, params, false);
    const Image* ptr = &image;
    Var out = image_forward(tape, bound, config, std::span(&ptr, 1));
    const auto data = out.value().data();
    return {std::vector<double>(data.begin(), data.end()), config.patches()};
}

Tensor encode_texts(const TextParams& params, const EncoderConfig& config, std::span<const TokenSequence> sequences,
                    std::size_t chunk) {
    Tensor out({sequences.size(), config.projection_dim});
    for (std::size_t start = 0; start < sequences.size(); start += chunk) {
        const std::size_t len = std::min(chunk, sequences.size() - start);
        Tape tape;
        const auto bound = bind(tape, params, false);
        Var emb = text_forward(tape, bound, config, sequences.subspan(start, len));
        std::copy(emb.value().data().begin(), emb.value().data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(start * config.projection_dim));
    }
    return out;
}

Tensor encode_images(const ImageParams& params, const ImageConfig& config, std::span<const Image* const> images,
                     std::size_t chunk) {
    Tensor out({images.size(), config.projection_dim});
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t len = std::min(chunk, images.size() - start);
        Tape tape;
        const auto bound = bind(tape, params, false);
        Var emb = image_forward(tape, bound, config, images.subspan(start, len));
        std::copy(emb.value().data().begin(), emb.value().data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(start * config.projection_dim));
    }
    return out;
}

std::vector<double> extract_attention(const TextParams& params, const EncoderConfig& config,
                                      const TokenSequence& tokens, std::size_t layer, std::size_t head) {
    if (layer >= config.n_layers)
        throw ContractError("layer " + std::to_string(layer) + " out of range (" + std::to_string(config.n_layers) +
                            " layers)");
    if (head >= config.n_heads)
        throw ContractError("head " + std::to_string(head) + " out of range (" + std::to_string(config.n_heads) +
                            " heads)");
    Tape tape;
    const auto bound = bind(tape, params, false);
    AttentionCapture capture;
    text_forward(tape, bound, config, std::span(&tokens, 1), {&capture, layer});
    return capture.rows.at(0).at(head);
}

}  // namespace tulip
