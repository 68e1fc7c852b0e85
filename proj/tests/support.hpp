#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/error.hpp"
#include "tulip/rng.hpp"
#include "tulip/tensor.hpp"

namespace tulip::test {

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo = -2.0, double hi = 2.0) {
    Tensor t({rows, cols});
    for (auto& x : t.data()) x = rng.uniform(lo, hi);
    return t;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Scalar readout that weighs every output entry, so each one is checked.
inline Var weighted_sum(Var out, const Tensor& weights) {
    Tape& tape = out.tape();
    return ops::sum(ops::mul(out, tape.constant(weights)));
}

using GradFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradReport {
    double worst = 0.0;  // largest per-input ||analytic - numeric|| / (||analytic|| + ||numeric||)
    std::size_t checked = 0;
    std::size_t worst_input = 0;
};

// Central differences on every entry of every input (or `limit` random entries per input).
inline GradReport check_gradients(const GradFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                                  std::size_t limit = 0, std::uint64_t pick_seed = 1) {
    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& x : xs) vars.push_back(tape.leaf(x));
        return f(tape, vars).value().item();
    };

    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    Var loss = f(tape, vars);
    tape.backward(loss);

    GradReport report;
    Rng pick(pick_seed);
    std::vector<Tensor> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = tape.grad(vars[i]);
        std::vector<std::size_t> entries(inputs[i].size());
        for (std::size_t e = 0; e < entries.size(); ++e) entries[e] = e;
        if (limit && entries.size() > limit) {
            pick.shuffle(std::span(entries));
            entries.resize(limit);
        }
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t e : entries) {
            const double x0 = inputs[i][e];
            work[i][e] = x0 + h;
            const double up = eval(work);
            work[i][e] = x0 - h;
            const double down = eval(work);
            work[i][e] = x0;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic[e] - numeric) * (analytic[e] - numeric);
            na += analytic[e] * analytic[e];
            nn += numeric * numeric;
            ++report.checked;
        }
        const double denom = std::sqrt(na) + std::sqrt(nn);
        if (denom > 1e-12 && std::sqrt(diff) / denom > report.worst) {
            report.worst = std::sqrt(diff) / denom;
            report.worst_input = i;
        }
    }
    return report;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("tulip_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace tulip::test
