#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/tensor.hpp"

namespace tulip::posenc {

enum class Scheme { absolute, rope, rope_ntk, cope };

std::string_view to_string(Scheme scheme);
// Accepts the config spellings `absolute`, `rope`, `rope_ntk`, `cope`.
Scheme parse_scheme(std::string_view name);
bool is_rotary(Scheme scheme);

// Angular frequency per coordinate pair of a head: theta[j] = base^(-2j/dim).
struct RotaryFrequencies {
    std::size_t dim = 0;
    double base = 10000.0;
    double ntk_factor = 1.0;
    std::vector<double> theta;

    // Throws ConfigError for an odd or zero dim.
    static RotaryFrequencies make(std::size_t dim, double base = 10000.0);
};

// Rotates each pair (v[2j], v[2j+1]) by position * theta[j].
std::vector<double> rope_rotate(std::span<const double> v, std::size_t position, const RotaryFrequencies& freqs);
// Same rotation in place; a negative position applies the inverse.
void rope_rotate_inplace(std::span<double> v, double position, const RotaryFrequencies& freqs);

// alpha * t_g / t_f - (alpha - 1). Equals 1 when the window is unchanged.
double ntk_scale_factor(double alpha, std::size_t t_f, std::size_t t_g);

// Rebuilds the frequencies from base * factor^(dim / (dim - 2)). theta[0] stays 1; the lowest
// frequencies stretch the most.
RotaryFrequencies apply_ntk(const RotaryFrequencies& freqs, double factor);

// Row `position` of a learned [T x d] table. Throws OutOfWindowError when position >= T.
std::span<const double> absolute_encode(std::size_t position, const Tensor& table);

struct PositionalScheme {
    Scheme kind = Scheme::rope;
    std::size_t max_positions = 77;  // absolute window T
    double rope_base = 10000.0;
    double ntk_factor = 1.0;         // only read for rope_ntk
    std::size_t cope_pmax = 64;

    // Frequencies actually used by attention heads of width head_dim.
    RotaryFrequencies frequencies(std::size_t head_dim) const;

    friend bool operator==(const PositionalScheme&, const PositionalScheme&) = default;
};

// Contextual positions for one query over its causal history of keys (oldest first).
struct CopePositions {
    std::vector<double> gates;
    std::vector<double> positions;  // non-increasing from oldest to newest
    Tensor embeddings;              // [keys x d], interpolated rows of the position table
};

CopePositions cope_positions(std::span<const double> query, const Tensor& keys, const Tensor& position_table,
                             std::size_t p_max);
CopePositions cope_positions_from_gates(std::span<const double> gates, const Tensor& position_table,
                                        std::size_t p_max);

namespace ops {

// Rotary encoding of packed rows; x is [rows x heads*head_dim], positions has one entry per row.
Var rope(Var x, std::span<const double> positions, const RotaryFrequencies& freqs, std::size_t n_heads);

// Causal attention whose logits add a contextual-position term q . e(p) to q . k / sqrt(head_dim).
// position_table is [(p_max + 1) x heads*head_dim]; head h reads its own column block.
Var cope_attention(Var q, Var k, Var v, Var position_table, const AttentionLayout& layout, std::size_t n_heads,
                   std::size_t p_max, AttentionCapture* capture = nullptr);

}  // namespace ops

}  // namespace tulip::posenc
