#include "tulip/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tulip/error.hpp"

namespace tulip {

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine similarity of a zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

void softmax_inplace(std::span<double> row) {
    if (row.empty()) return;
    const double peak = *std::max_element(row.begin(), row.end());
    if (peak == -std::numeric_limits<double>::infinity())
        throw DegenerateInputError("softmax over a row with no finite entry");
    double total = 0.0;
    for (double& x : row) {
        x = std::exp(x - peak);
        total += x;
    }
    for (double& x : row) x /= total;
}

std::vector<double> softmax(std::span<const double> row) {
    std::vector<double> out(row.begin(), row.end());
    softmax_inplace(out);
    return out;
}

}  // namespace tulip
