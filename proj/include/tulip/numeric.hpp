#pragma once

#include <span>
#include <vector>

namespace tulip {

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// Throws DegenerateInputError when either vector has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// In-place softmax with max subtraction. A row whose entries are all -inf is a DegenerateInputError.
void softmax_inplace(std::span<double> row);
std::vector<double> softmax(std::span<const double> row);

}  // namespace tulip
