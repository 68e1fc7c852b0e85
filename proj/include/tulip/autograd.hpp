#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tulip/tensor.hpp"

namespace tulip {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Nodes are stored in creation order, which is a topological order,
// so backward is a single reverse sweep that visits each node once.
class Tape {
public:
    // Receives the gradient of the node's output and accumulates into its parents.
    using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Adds an op output. Throws NumericError if the value holds NaN/Inf.
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward, const char* op);

    void backward(Var loss);

    const Tensor& value(Var v) const { return nodes_[v.id_].value; }
    bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
    // Gradient after backward(); zeros of matching shape if nothing flowed into v.
    Tensor grad(Var v) const;

    // For op implementations: mutable gradient buffer of a parent, allocated on first use.
    std::span<double> grad_buffer(Var v);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// A contiguous run of rows in a packed [tokens x features] matrix that forms one sequence.
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

// How attention is restricted inside packed sequences.
struct AttentionLayout {
    std::vector<Segment> segments;
    bool causal = true;
    // Per packed row; empty means every key is visible. A hidden key is still visible to itself.
    std::vector<unsigned char> key_visible;

    bool visible(std::size_t query_row, std::size_t key_row) const {
        return key_visible.empty() || key_visible[key_row] != 0 || key_row == query_row;
    }
    std::size_t total_rows() const;
};

// Attention weights of the last row of every segment, per head: rows[segment][head][key].
struct AttentionCapture {
    std::vector<std::vector<std::vector<double>>> rows;
};

namespace ops {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a [m x n] + row [1 x n] on every row.
Var add_row(Var a, Var row);
// a [m x n] times scalar s [1 x 1].
Var mul_scalar(Var a, Var s);
Var reciprocal(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var sum(Var a);
Var mean(Var a);
// Row sums, [m x n] -> [m x 1].
Var sum_cols(Var a);
// Rows of table at ids.
Var embedding(Var table, std::span<const int> ids);
Var gather_rows(Var a, std::span<const std::size_t> rows);
// Mean over the rows of each segment, -> [segments x n].
Var segment_mean(Var a, std::span<const Segment> segments);
// out[i] = a[i, cols[i]], -> [m x 1].
Var pick_per_row(Var a, std::span<const std::size_t> cols);
Var l2_normalize_rows(Var a, double eps = 1e-12);
// Cosine similarity of two equally shaped vectors, -> [1 x 1].
Var cosine(Var a, Var b);

// Scaled dot-product attention over packed sequences. q, k, v are [rows x heads*head_dim].
Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::size_t n_heads,
              AttentionCapture* capture = nullptr);

}  // namespace ops

}  // namespace tulip
