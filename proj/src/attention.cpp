#include <Eigen/Core>
#include <cmath>
#include <limits>

#include "tulip/autograd.hpp"
#include "tulip/error.hpp"

namespace tulip::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMat, 0, Stride>;
using MutBlock = Eigen::Map<RowMat, 0, Stride>;

struct HeadView {
    std::size_t width;     // total columns of the packed matrix
    std::size_t head_dim;

    ConstBlock block(const double* base, Segment seg, std::size_t head) const {
        return ConstBlock(base + seg.offset * width + head * head_dim, seg.length, head_dim, Stride(width));
    }
    MutBlock block(double* base, Segment seg, std::size_t head) const {
        return MutBlock(base + seg.offset * width + head * head_dim, seg.length, head_dim, Stride(width));
    }
};

// Softmax-normalised attention weights of one segment and head; hidden entries are exactly 0.
RowMat attention_probs(const ConstBlock& q, const ConstBlock& k, const AttentionLayout& layout, Segment seg) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    const auto n = static_cast<Eigen::Index>(seg.length);
    RowMat scores = (q * k.transpose()) * scale;
    const double hidden = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index len = layout.causal ? i + 1 : n;
        auto row = scores.row(i).head(len);
        const bool masked = !layout.key_visible.empty();
        if (masked)
            for (Eigen::Index j = 0; j < len; ++j)
                if (!layout.visible(seg.offset + i, seg.offset + j)) row(j) = hidden;
        row.array() = (row.array() - row.maxCoeff()).exp();
        // the vectorized exp leaves a denormal rather than 0 at -inf
        if (masked)
            for (Eigen::Index j = 0; j < len; ++j)
                if (!layout.visible(seg.offset + i, seg.offset + j)) row(j) = 0.0;
        row /= row.sum();
        scores.row(i).tail(n - len).setZero();
    }
    return scores;
}

void check_operands(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                    std::size_t n_heads) {
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("attention: q/k/v shapes differ: " + shape_string(q.shape()) + ", " +
                             shape_string(k.shape()) + ", " + shape_string(v.shape()));
    if (n_heads == 0 || q.cols() % n_heads != 0)
        throw DimensionError("attention: width " + std::to_string(q.cols()) + " not divisible into " +
                             std::to_string(n_heads) + " heads");
    if (layout.total_rows() > q.rows()) throw DimensionError("attention: layout exceeds packed rows");
    if (!layout.key_visible.empty() && layout.key_visible.size() != q.rows())
        throw DimensionError("attention: key mask length differs from packed rows");
}

}  // namespace

Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::size_t n_heads, AttentionCapture* capture) {
    const Tensor& qv = q.value();
    check_operands(qv, k.value(), v.value(), layout, n_heads);
    const HeadView view{qv.cols(), qv.cols() / n_heads};
    Tensor out({qv.rows(), qv.cols()});
    if (capture) capture->rows.assign(layout.segments.size(), std::vector<std::vector<double>>(n_heads));
    for (std::size_t s = 0; s < layout.segments.size(); ++s) {
        const Segment seg = layout.segments[s];
        if (seg.length == 0) continue;
        for (std::size_t h = 0; h < n_heads; ++h) {
            RowMat probs = attention_probs(view.block(qv.data().data(), seg, h),
                                           view.block(k.value().data().data(), seg, h), layout, seg);
            view.block(out.data().data(), seg, h).noalias() = probs * view.block(v.value().data().data(), seg, h);
            if (capture) {
                auto last = probs.row(seg.length - 1);
                capture->rows[s][h].assign(last.data(), last.data() + seg.length);
            }
        }
    }
    return q.tape().record(
        std::move(out), {q, k, v},
        [q, k, v, layout, n_heads, view](Tape& t, std::span<const double> g) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(view.head_dim));
            double* gq = q.requires_grad() ? t.grad_buffer(q).data() : nullptr;
            double* gk = k.requires_grad() ? t.grad_buffer(k).data() : nullptr;
            double* gv = v.requires_grad() ? t.grad_buffer(v).data() : nullptr;
            for (const Segment& seg : layout.segments) {
                if (seg.length == 0) continue;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    auto qb = view.block(q.value().data().data(), seg, h);
                    auto kb = view.block(k.value().data().data(), seg, h);
                    auto vb = view.block(v.value().data().data(), seg, h);
                    auto gout = view.block(g.data(), seg, h);
                    RowMat probs = attention_probs(qb, kb, layout, seg);
                    if (gv) view.block(gv, seg, h).noalias() += probs.transpose() * gout;
                    if (!gq && !gk) continue;
                    RowMat dprobs = gout * vb.transpose();
                    // Softmax backward, row by row.
                    Eigen::VectorXd inner = (dprobs.cwiseProduct(probs)).rowwise().sum();
                    RowMat dscores = probs.cwiseProduct(dprobs.colwise() - inner) * scale;
                    if (gq) view.block(gq, seg, h).noalias() += dscores * kb;
                    if (gk) view.block(gk, seg, h).noalias() += dscores.transpose() * qb;
                }
            }
        },
        "attention");
}

}  // namespace tulip::ops
