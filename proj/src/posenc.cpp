#include "tulip/posenc.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "tulip/error.hpp"
#include "tulip/numeric.hpp"

namespace tulip::posenc {

std::string_view to_string(Scheme scheme) {
    switch (scheme) {
        case Scheme::absolute: return "absolute";
        case Scheme::rope: return "rope";
        case Scheme::rope_ntk: return "rope_ntk";
        case Scheme::cope: return "cope";
    }
    return "unknown";
}

Scheme parse_scheme(std::string_view name) {
    if (name == "absolute") return Scheme::absolute;
    if (name == "rope") return Scheme::rope;
    if (name == "rope_ntk") return Scheme::rope_ntk;
    if (name == "cope") return Scheme::cope;
    throw ConfigError("unknown positional scheme '" + std::string(name) + "'");
}

bool is_rotary(Scheme scheme) { return scheme == Scheme::rope || scheme == Scheme::rope_ntk; }

RotaryFrequencies RotaryFrequencies::make(std::size_t dim, double base) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("rotary head dimension must be even, got " + std::to_string(dim));
    if (!(base > 0.0)) throw ConfigError("rotary base must be positive");
    RotaryFrequencies f;
    f.dim = dim;
    f.base = base;
    f.theta.resize(dim / 2);
    for (std::size_t j = 0; j < dim / 2; ++j)
        f.theta[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    return f;
}

void rope_rotate_inplace(std::span<double> v, double position, const RotaryFrequencies& freqs) {
    if (v.size() != freqs.dim)
        throw ConfigError("rope_rotate: vector of " + std::to_string(v.size()) + " entries for frequencies of dim " +
                          std::to_string(freqs.dim));
    for (std::size_t j = 0; j < freqs.theta.size(); ++j) {
        const double angle = position * freqs.theta[j];
        const double c = std::cos(angle), s = std::sin(angle);
        const double x = v[2 * j], y = v[2 * j + 1];
        v[2 * j] = x * c - y * s;
        v[2 * j + 1] = x * s + y * c;
    }
}

std::vector<double> rope_rotate(std::span<const double> v, std::size_t position, const RotaryFrequencies& freqs) {
    if (v.size() % 2 != 0) throw ConfigError("rope_rotate: odd vector dimension " + std::to_string(v.size()));
    std::vector<double> out(v.begin(), v.end());
    rope_rotate_inplace(out, static_cast<double>(position), freqs);
    return out;
}

double ntk_scale_factor(double alpha, std::size_t t_f, std::size_t t_g) {
    if (t_f == 0) throw ContractError("ntk_scale_factor: t_f must be positive");
    if (t_g < t_f)
        throw ContractError("ntk_scale_factor: target window " + std::to_string(t_g) + " is shorter than " +
                            std::to_string(t_f));
    if (!(alpha >= 1.0)) throw ContractError("ntk_scale_factor: alpha must be >= 1");
    return alpha * (static_cast<double>(t_g) / static_cast<double>(t_f)) - (alpha - 1.0);
}

RotaryFrequencies apply_ntk(const RotaryFrequencies& freqs, double factor) {
    if (freqs.dim <= 2) throw ConfigError("apply_ntk needs a head dimension above 2, got " + std::to_string(freqs.dim));
    if (!(factor >= 1.0)) throw ContractError("apply_ntk: factor must be >= 1");
    const double d = static_cast<double>(freqs.dim);
    RotaryFrequencies out = RotaryFrequencies::make(freqs.dim, freqs.base * std::pow(factor, d / (d - 2.0)));
    out.ntk_factor = freqs.ntk_factor * factor;
    return out;
}

std::span<const double> absolute_encode(std::size_t position, const Tensor& table) {
    if (position >= table.rows()) throw OutOfWindowError(position + 1, table.rows());
    return table.row_span(position);
}

RotaryFrequencies PositionalScheme::frequencies(std::size_t head_dim) const {
    RotaryFrequencies f = RotaryFrequencies::make(head_dim, rope_base);
    if (kind == Scheme::rope_ntk) f = apply_ntk(f, ntk_factor);
    return f;
}

CopePositions cope_positions_from_gates(std::span<const double> gates, const Tensor& position_table,
                                        std::size_t p_max) {
    if (position_table.rows() < p_max + 1)
        throw DimensionError("cope: position table needs " + std::to_string(p_max + 1) + " rows");
    const std::size_t n = gates.size(), d = position_table.cols();
    CopePositions out;
    out.gates.assign(gates.begin(), gates.end());
    out.positions.assign(n, 0.0);
    out.embeddings = Tensor({n, d});
    double running = 0.0;
    for (std::size_t j = n; j-- > 0;) {
        running += gates[j];
        out.positions[j] = std::min(running, static_cast<double>(p_max));
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double p = out.positions[j];
        const std::size_t lo = static_cast<std::size_t>(std::floor(p));
        const std::size_t hi = std::min(lo + 1, p_max);
        const double w = p - static_cast<double>(lo);
        for (std::size_t c = 0; c < d; ++c)
            out.embeddings[j * d + c] = (1.0 - w) * position_table.at(lo, c) + w * position_table.at(hi, c);
    }
    return out;
}

CopePositions cope_positions(std::span<const double> query, const Tensor& keys, const Tensor& position_table,
                             std::size_t p_max) {
    if (keys.cols() != query.size()) throw DimensionError("cope: key width differs from query width");
    std::vector<double> gates(keys.rows());
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        const double s = dot(query, keys.row_span(j));
        gates[j] = 1.0 / (1.0 + std::exp(-s));
    }
    return cope_positions_from_gates(gates, position_table, p_max);
}

namespace ops {

Var rope(Var x, std::span<const double> positions, const RotaryFrequencies& freqs, std::size_t n_heads) {
    const Tensor& xv = x.value();
    if (positions.size() != xv.rows()) throw DimensionError("rope: need one position per row");
    if (n_heads == 0 || xv.cols() != n_heads * freqs.dim)
        throw DimensionError("rope: width " + std::to_string(xv.cols()) + " is not " + std::to_string(n_heads) +
                             " heads of " + std::to_string(freqs.dim));
    Tensor out = xv;
    const std::size_t width = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t h = 0; h < n_heads; ++h)
            rope_rotate_inplace(out.data().subspan(r * width + h * freqs.dim, freqs.dim), positions[r], freqs);
    std::vector<double> kept(positions.begin(), positions.end());
    return x.tape().record(
        std::move(out), {x},
        [x, kept = std::move(kept), freqs, n_heads, width](Tape& t, std::span<const double> g) {
            // The rotation is orthogonal, so its adjoint is the rotation by the negated angle.
            std::vector<double> back(g.begin(), g.end());
            auto gx = t.grad_buffer(x);
            for (std::size_t r = 0; r < kept.size(); ++r)
                for (std::size_t h = 0; h < n_heads; ++h)
                    rope_rotate_inplace(std::span(back).subspan(r * width + h * freqs.dim, freqs.dim), -kept[r],
                                        freqs);
            for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
        },
        "rope");
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMat, 0, Stride>;
using MutBlock = Eigen::Map<RowMat, 0, Stride>;

// Per segment/head intermediate values of contextual-position attention.
struct CopeForward {
    RowMat gates;      // sigmoid of scaled q.k, 0 where hidden
    RowMat positions;  // clamped suffix sums of gates
    RowMat pos_logits; // q . e_r for every integer position r
    RowMat probs;      // final attention weights
};

CopeForward cope_forward(const ConstBlock& q, const ConstBlock& k, const ConstBlock& table, const AttentionLayout& layout,
                         Segment seg, std::size_t p_max) {
    const std::size_t n = seg.length;
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    CopeForward f;
    RowMat scores = (q * k.transpose()) * scale;
    f.pos_logits = q * table.transpose();
    f.gates = RowMat::Zero(n, n);
    f.positions = RowMat::Zero(n, n);
    f.probs = RowMat::Zero(n, n);
    const double pmax = static_cast<double>(p_max);
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j)
            if (layout.visible(seg.offset + i, seg.offset + j)) f.gates(i, j) = 1.0 / (1.0 + std::exp(-scores(i, j)));
        double running = 0.0;
        for (std::size_t j = i + 1; j-- > 0;) {
            running += f.gates(i, j);
            f.positions(i, j) = std::min(running, pmax);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j > i || !layout.visible(seg.offset + i, seg.offset + j)) {
                logits[j] = -std::numeric_limits<double>::infinity();
                continue;
            }
            const double p = f.positions(i, j);
            const std::size_t lo = static_cast<std::size_t>(std::floor(p));
            const std::size_t hi = std::min(lo + 1, p_max);
            const double w = p - static_cast<double>(lo);
            logits[j] = scores(i, j) + (1.0 - w) * f.pos_logits(i, lo) + w * f.pos_logits(i, hi);
        }
        softmax_inplace(logits);
        for (std::size_t j = 0; j < n; ++j) f.probs(i, j) = logits[j];
    }
    return f;
}

}  // namespace

Var cope_attention(Var q, Var k, Var v, Var position_table, const AttentionLayout& layout, std::size_t n_heads,
                   std::size_t p_max, AttentionCapture* capture) {
    const Tensor& qv = q.value();
    if (qv.shape() != k.value().shape() || qv.shape() != v.value().shape())
        throw DimensionError("cope_attention: q/k/v shapes differ");
    if (!layout.causal) throw ConfigError("cope_attention requires a causal layout");
    if (n_heads == 0 || qv.cols() % n_heads != 0) throw DimensionError("cope_attention: width not divisible by heads");
    if (position_table.value().rows() != p_max + 1 || position_table.value().cols() != qv.cols())
        throw DimensionError("cope_attention: position table must be [" + std::to_string(p_max + 1) + " x " +
                             std::to_string(qv.cols()) + "], got " + shape_string(position_table.value().shape()));
    const std::size_t width = qv.cols(), hd = width / n_heads, rows_e = p_max + 1;
    auto block = [width, hd](const double* base, Segment seg, std::size_t h) {
        return ConstBlock(base + seg.offset * width + h * hd, seg.length, hd, Stride(width));
    };
    auto mblock = [width, hd](double* base, Segment seg, std::size_t h) {
        return MutBlock(base + seg.offset * width + h * hd, seg.length, hd, Stride(width));
    };
    auto table_block = [width, hd, rows_e](const double* base, std::size_t h) {
        return ConstBlock(base + h * hd, rows_e, hd, Stride(width));
    };

    Tensor out({qv.rows(), width});
    if (capture) capture->rows.assign(layout.segments.size(), std::vector<std::vector<double>>(n_heads));
    for (std::size_t s = 0; s < layout.segments.size(); ++s) {
        const Segment seg = layout.segments[s];
        if (seg.length == 0) continue;
        for (std::size_t h = 0; h < n_heads; ++h) {
            CopeForward f = cope_forward(block(qv.data().data(), seg, h), block(k.value().data().data(), seg, h),
                                         table_block(position_table.value().data().data(), h), layout, seg, p_max);
            mblock(out.data().data(), seg, h).noalias() = f.probs * block(v.value().data().data(), seg, h);
            if (capture) {
                auto last = f.probs.row(seg.length - 1);
                capture->rows[s][h].assign(last.data(), last.data() + seg.length);
            }
        }
    }

    return q.tape().record(
        std::move(out), {q, k, v, position_table},
        [=](Tape& t, std::span<const double> g) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
            const double pmax = static_cast<double>(p_max);
            double* gq = q.requires_grad() ? t.grad_buffer(q).data() : nullptr;
            double* gk = k.requires_grad() ? t.grad_buffer(k).data() : nullptr;
            double* gv = v.requires_grad() ? t.grad_buffer(v).data() : nullptr;
            double* ge = position_table.requires_grad() ? t.grad_buffer(position_table).data() : nullptr;
            for (const Segment& seg : layout.segments) {
                const std::size_t n = seg.length;
                if (n == 0) continue;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    auto qb = block(q.value().data().data(), seg, h);
                    auto kb = block(k.value().data().data(), seg, h);
                    auto vb = block(v.value().data().data(), seg, h);
                    auto eb = table_block(position_table.value().data().data(), h);
                    ConstBlock gout(g.data() + seg.offset * width + h * hd, n, hd, Stride(width));
                    CopeForward f = cope_forward(qb, kb, eb, layout, seg, p_max);
                    if (gv) mblock(gv, seg, h).noalias() += f.probs.transpose() * gout;
                    RowMat dprobs = gout * vb.transpose();
                    Eigen::VectorXd inner = dprobs.cwiseProduct(f.probs).rowwise().sum();
                    RowMat dlogits = f.probs.cwiseProduct(dprobs.colwise() - inner);

                    RowMat dscores = dlogits;  // direct q.k path
                    RowMat dpos_logits = RowMat::Zero(n, rows_e);
                    std::vector<double> dpos(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j <= i; ++j) {
                            dpos[j] = 0.0;
                            if (!layout.visible(seg.offset + i, seg.offset + j)) continue;
                            const double p = f.positions(i, j);
                            const std::size_t lo = static_cast<std::size_t>(std::floor(p));
                            const std::size_t hi = std::min(lo + 1, p_max);
                            const double w = p - static_cast<double>(lo);
                            const double dz = dlogits(i, j);
                            dpos_logits(i, lo) += (1.0 - w) * dz;
                            dpos_logits(i, hi) += w * dz;
                            if (p < pmax) dpos[j] = dz * (f.pos_logits(i, hi) - f.pos_logits(i, lo));
                        }
                        // position(i, j) sums gates(i, j..i), so gate t collects dpos over j <= t.
                        double prefix = 0.0;
                        for (std::size_t tcol = 0; tcol <= i; ++tcol) {
                            prefix += dpos[tcol];
                            const double gate = f.gates(i, tcol);
                            dscores(i, tcol) += prefix * gate * (1.0 - gate);
                        }
                    }
                    dscores *= scale;
                    if (gq) mblock(gq, seg, h).noalias() += dscores * kb + dpos_logits * eb;
                    if (gk) mblock(gk, seg, h).noalias() += dscores.transpose() * qb;
                    if (ge) MutBlock(ge + h * hd, rows_e, hd, Stride(width)).noalias() += dpos_logits.transpose() * qb;
                }
            }
        },
        "cope_attention");
}

}  // namespace ops

}  // namespace tulip::posenc
