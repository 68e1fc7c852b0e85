#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "tulip/autograd.hpp"
#include "tulip/error.hpp"
#include "tulip/numeric.hpp"

namespace tulip::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
ConstMap as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
    return ConstMap(data.data(), rows, cols);
}
MutMap as_matrix(std::span<double> data, std::size_t rows, std::size_t cols) {
    return MutMap(data.data(), rows, cols);
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(Var a, Var b, const char* op) {
    if (a.value().shape() != b.value().shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_string(a.value().shape()) + " and " +
                             shape_string(b.value().shape()) + " differ");
}

void require_scalar(Var s, const char* op) {
    if (s.value().size() != 1)
        throw DimensionError(std::string(op) + " expects a scalar, got " + shape_string(s.value().shape()));
}

// Elementwise op; deriv(x) is evaluated from the input during backward.
template <class Fwd, class Deriv>
Var unary(Var a, const char* name, Fwd fwd, Deriv deriv) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    return a.tape().record(
        std::move(out), {a},
        [a, deriv](Tape& t, std::span<const double> g) {
            const Tensor& xin = a.value();
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < xin.size(); ++i) ga[i] += g[i] * deriv(xin[i]);
        },
        name);
}

constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;


double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    if (av.cols() != bv.rows())
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                             shape_string(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    as_matrix(out.data(), m, n).noalias() = as_matrix(av) * as_matrix(bv);
    return a.tape().record(
        std::move(out), {a, b},
        [a, b, m, k, n](Tape& t, std::span<const double> g) {
            auto gm = as_matrix(g, m, n);
            if (a.requires_grad()) as_matrix(t.grad_buffer(a), m, k).noalias() += gm * as_matrix(b.value()).transpose();
            if (b.requires_grad()) as_matrix(t.grad_buffer(b), k, n).noalias() += as_matrix(a.value()).transpose() * gm;
        },
        "matmul");
}

Var transpose(Var a) {
    const Tensor& av = a.value();
    require_matrix(av, "transpose");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out({n, m});
    as_matrix(out.data(), n, m) = as_matrix(av).transpose();
    return a.tape().record(
        std::move(out), {a},
        [a, m, n](Tape& t, std::span<const double> g) {
            as_matrix(t.grad_buffer(a), m, n) += as_matrix(g, n, m).transpose();
        },
        "transpose");
}

Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.tape().record(
        std::move(out), {a, b},
        [a, b](Tape& t, std::span<const double> g) {
            for (Var p : {a, b}) {
                if (!p.requires_grad()) continue;
                auto gp = t.grad_buffer(p);
                for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
            }
        },
        "add");
}

Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.tape().record(
        std::move(out), {a, b},
        [a, b](Tape& t, std::span<const double> g) {
            if (a.requires_grad()) {
                auto ga = t.grad_buffer(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = t.grad_buffer(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        },
        "sub");
}

Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.tape().record(
        std::move(out), {a, b},
        [a, b](Tape& t, std::span<const double> g) {
            if (a.requires_grad()) {
                auto ga = t.grad_buffer(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
            }
            if (b.requires_grad()) {
                auto gb = t.grad_buffer(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
            }
        },
        "mul");
}

Var scale(Var a, double factor) {
    return unary(a, "scale", [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var add_row(Var a, Var row) {
    const Tensor& av = a.value();
    const Tensor& rv = row.value();
    require_matrix(av, "add_row");
    if (rv.size() != av.cols())
        throw DimensionError("add_row: row " + shape_string(rv.shape()) + " does not match " + shape_string(av.shape()));
    Tensor out = av;
    const std::size_t m = av.rows(), n = av.cols();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += rv[c];
    return a.tape().record(
        std::move(out), {a, row},
        [a, row, m, n](Tape& t, std::span<const double> g) {
            if (a.requires_grad()) {
                auto ga = t.grad_buffer(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (row.requires_grad()) {
                auto gr = t.grad_buffer(row);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
            }
        },
        "add_row");
}

Var mul_scalar(Var a, Var s) {
    require_scalar(s, "mul_scalar");
    const double sv = s.value()[0];
    Tensor out = a.value();
    for (double& x : out.data()) x *= sv;
    return a.tape().record(
        std::move(out), {a, s},
        [a, s](Tape& t, std::span<const double> g) {
            const double sv = s.value()[0];
            if (a.requires_grad()) {
                auto ga = t.grad_buffer(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
            }
            if (s.requires_grad()) {
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
                t.grad_buffer(s)[0] += acc;
            }
        },
        "mul_scalar");
}

Var reciprocal(Var a) {
    return unary(a, "reciprocal", [](double x) { return 1.0 / x; }, [](double x) { return -1.0 / (x * x); });
}

Var gelu(Var a) {
    const Tensor& x = a.value();
    // The normal CDF is kept for backward so erf is evaluated once per element.
    auto cdf = std::make_shared<std::vector<double>>(x.size());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        (*cdf)[i] = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
        out[i] = x[i] * (*cdf)[i];
    }
    return a.tape().record(
        std::move(out), {a},
        [a, cdf](Tape& t, std::span<const double> g) {
            const auto xin = Eigen::Map<const Eigen::ArrayXd>(a.value().data().data(), a.value().size());
            const auto c = Eigen::Map<const Eigen::ArrayXd>(cdf->data(), cdf->size());
            const auto gout = Eigen::Map<const Eigen::ArrayXd>(g.data(), g.size());
            auto ga = Eigen::Map<Eigen::ArrayXd>(t.grad_buffer(a).data(), g.size());
            const Eigen::ArrayXd pdf = (-0.5 * xin.square()).exp() * (std::numbers::inv_sqrtpi * kInvSqrt2);
            ga += gout * (c + xin * pdf);
        },
        "gelu");
}

Var sigmoid(Var a) {
    return unary(a, "sigmoid", sigmoid_value, [](double x) {
        const double s = sigmoid_value(x);
        return s * (1.0 - s);
    });
}

Var exp(Var a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sqrt(Var a) {
    return unary(a, "sqrt", [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Var square(Var a) {
    return unary(a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var softmax_rows(Var a) {
    const Tensor& av = a.value();
    require_matrix(av, "softmax_rows");
    Tensor out = av;
    const std::size_t m = av.rows(), n = av.cols();
    for (std::size_t r = 0; r < m; ++r) softmax_inplace(out.row_span(r));
    return a.tape().record(
        std::move(out), {a},
        [a, m, n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            std::vector<double> p(n);
            for (std::size_t r = 0; r < m; ++r) {
                std::copy_n(a.value().data().begin() + r * n, n, p.begin());
                softmax_inplace(p);
                double inner = 0.0;
                for (std::size_t c = 0; c < n; ++c) inner += g[r * n + c] * p[c];
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += p[c] * (g[r * n + c] - inner);
            }
        },
        "softmax_rows");
}

Var log_softmax_rows(Var a) {
    const Tensor& av = a.value();
    require_matrix(av, "log_softmax_rows");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out({m, n});
    for (std::size_t r = 0; r < m; ++r) {
        auto row = av.row_span(r);
        const double peak = *std::max_element(row.begin(), row.end());
        if (peak == -std::numeric_limits<double>::infinity())
            throw DegenerateInputError("log_softmax over a row with no finite entry");
        double total = 0.0;
        for (double x : row) total += std::exp(x - peak);
        const double lse = peak + std::log(total);
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] - lse;
    }
    return a.tape().record(
        std::move(out), {a},
        [a, m, n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            std::vector<double> p(n);
            for (std::size_t r = 0; r < m; ++r) {
                std::copy_n(a.value().data().begin() + r * n, n, p.begin());
                softmax_inplace(p);
                double gsum = 0.0;
                for (std::size_t c = 0; c < n; ++c) gsum += g[r * n + c];
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] - p[c] * gsum;
            }
        },
        "log_softmax_rows");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = x.value();
    require_matrix(xv, "layer_norm");
    const std::size_t m = xv.rows(), n = xv.cols();
    if (gain.value().size() != n || bias.value().size() != n)
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
    Tensor out({m, n});
    for (std::size_t r = 0; r < m; ++r) {
        auto row = xv.row_span(r);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c)
            out[r * n + c] = gain.value()[c] * (row[c] - mu) * inv + bias.value()[c];
    }
    return x.tape().record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, m, n, eps](Tape& t, std::span<const double> g) {
            const Tensor& xv = x.value();
            std::vector<double> xhat(n), dxhat(n);
            std::span<double> gx = x.requires_grad() ? t.grad_buffer(x) : std::span<double>();
            std::span<double> gg = gain.requires_grad() ? t.grad_buffer(gain) : std::span<double>();
            std::span<double> gb = bias.requires_grad() ? t.grad_buffer(bias) : std::span<double>();
            const double nn = static_cast<double>(n);
            for (std::size_t r = 0; r < m; ++r) {
                auto row = xv.row_span(r);
                double mu = 0.0;
                for (double v : row) mu += v;
                mu /= nn;
                double var = 0.0;
                for (double v : row) var += (v - mu) * (v - mu);
                var /= nn;
                const double inv = 1.0 / std::sqrt(var + eps);
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    const double gy = g[r * n + c];
                    xhat[c] = (row[c] - mu) * inv;
                    dxhat[c] = gy * gain.value()[c];
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat[c];
                    if (!gg.empty()) gg[c] += gy * xhat[c];
                    if (!gb.empty()) gb[c] += gy;
                }
                mean_d /= nn;
                mean_dx /= nn;
                if (!gx.empty())
                    for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
            }
        },
        "layer_norm");
}

Var sum(Var a) {
    double total = 0.0;
    for (double v : a.value().data()) total += v;
    return a.tape().record(
        Tensor::scalar(total), {a},
        [a](Tape& t, std::span<const double> g) {
            for (double& v : t.grad_buffer(a)) v += g[0];
        },
        "sum");
}

Var mean(Var a) {
    const double count = static_cast<double>(a.value().size());
    if (count == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / count);
}

Var sum_cols(Var a) {
    const Tensor& av = a.value();
    require_matrix(av, "sum_cols");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out({m, 1});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r] += av[r * n + c];
    return a.tape().record(
        std::move(out), {a},
        [a, m, n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r];
        },
        "sum_cols");
}

Var embedding(Var table, std::span<const int> ids) {
    const Tensor& tv = table.value();
    require_matrix(tv, "embedding");
    const std::size_t n = tv.cols();
    Tensor out({ids.size(), n});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
            throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(tv.rows()) + " rows");
        std::copy_n(tv.data().begin() + ids[i] * n, n, out.data().begin() + i * n);
    }
    std::vector<int> kept(ids.begin(), ids.end());
    return table.tape().record(
        std::move(out), {table},
        [table, kept = std::move(kept), n](Tape& t, std::span<const double> g) {
            auto gt = t.grad_buffer(table);
            for (std::size_t i = 0; i < kept.size(); ++i)
                for (std::size_t c = 0; c < n; ++c) gt[kept[i] * n + c] += g[i * n + c];
        },
        "embedding");
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
    const Tensor& av = a.value();
    require_matrix(av, "gather_rows");
    const std::size_t n = av.cols();
    Tensor out({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= av.rows())
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_string(av.shape()));
        std::copy_n(av.data().begin() + rows[i] * n, n, out.data().begin() + i * n);
    }
    std::vector<std::size_t> kept(rows.begin(), rows.end());
    return a.tape().record(
        std::move(out), {a},
        [a, kept = std::move(kept), n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < kept.size(); ++i)
                for (std::size_t c = 0; c < n; ++c) ga[kept[i] * n + c] += g[i * n + c];
        },
        "gather_rows");
}

Var segment_mean(Var a, std::span<const Segment> segments) {
    const Tensor& av = a.value();
    require_matrix(av, "segment_mean");
    const std::size_t n = av.cols();
    Tensor out({segments.size(), n});
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const Segment seg = segments[s];
        if (seg.length == 0 || seg.offset + seg.length > av.rows())
            throw DimensionError("segment_mean: segment outside " + shape_string(av.shape()));
        for (std::size_t r = seg.offset; r < seg.offset + seg.length; ++r)
            for (std::size_t c = 0; c < n; ++c) out[s * n + c] += av[r * n + c];
        for (std::size_t c = 0; c < n; ++c) out[s * n + c] /= static_cast<double>(seg.length);
    }
    std::vector<Segment> kept(segments.begin(), segments.end());
    return a.tape().record(
        std::move(out), {a},
        [a, kept = std::move(kept), n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            for (std::size_t s = 0; s < kept.size(); ++s) {
                const double w = 1.0 / static_cast<double>(kept[s].length);
                for (std::size_t r = kept[s].offset; r < kept[s].offset + kept[s].length; ++r)
                    for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += w * g[s * n + c];
            }
        },
        "segment_mean");
}

Var pick_per_row(Var a, std::span<const std::size_t> cols) {
    const Tensor& av = a.value();
    require_matrix(av, "pick_per_row");
    const std::size_t m = av.rows(), n = av.cols();
    if (cols.size() != m) throw DimensionError("pick_per_row: need one column index per row");
    Tensor out({m, 1});
    for (std::size_t r = 0; r < m; ++r) {
        if (cols[r] >= n) throw DimensionError("pick_per_row: column index out of range");
        out[r] = av[r * n + cols[r]];
    }
    std::vector<std::size_t> kept(cols.begin(), cols.end());
    return a.tape().record(
        std::move(out), {a},
        [a, kept = std::move(kept), n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            for (std::size_t r = 0; r < kept.size(); ++r) ga[r * n + kept[r]] += g[r];
        },
        "pick_per_row");
}

Var l2_normalize_rows(Var a, double eps) {
    const Tensor& av = a.value();
    require_matrix(av, "l2_normalize_rows");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out = av;
    for (std::size_t r = 0; r < m; ++r) {
        const double len = norm2(av.row_span(r));
        if (len <= eps) throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(r));
        for (double& v : out.row_span(r)) v /= len;
    }
    return a.tape().record(
        std::move(out), {a},
        [a, m, n](Tape& t, std::span<const double> g) {
            auto ga = t.grad_buffer(a);
            const Tensor& av = a.value();
            for (std::size_t r = 0; r < m; ++r) {
                auto row = av.row_span(r);
                const double len = norm2(row);
                double proj = 0.0;
                for (std::size_t c = 0; c < n; ++c) proj += g[r * n + c] * row[c];
                proj /= len * len;
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += (g[r * n + c] - row[c] * proj) / len;
            }
        },
        "l2_normalize_rows");
}

Var cosine(Var a, Var b) {
    require_same_shape(a, b, "cosine");
    const std::size_t n = a.value().size();
    // Flatten to one row each so any equally shaped pair works.
    Tape& tape = a.tape();
    auto as_row = [&](Var v) {
        if (v.value().rows() == 1) return v;
        return tape.record(
            Tensor({1, n}, std::vector<double>(v.value().data().begin(), v.value().data().end())), {v},
            [v](Tape& t, std::span<const double> g) {
                auto gv = t.grad_buffer(v);
                for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
            },
            "flatten");
    };
    return sum(mul(l2_normalize_rows(as_row(a)), l2_normalize_rows(as_row(b))));
}

}  // namespace tulip::ops
