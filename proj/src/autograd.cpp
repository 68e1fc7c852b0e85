#include "tulip/autograd.hpp"

#include <algorithm>

#include "tulip/error.hpp"

namespace tulip {

const Tensor& Var::value() const { return tape_->value(*this); }

bool Var::requires_grad() const { return tape_->requires_grad(*this); }

std::size_t AttentionLayout::total_rows() const {
    std::size_t total = 0;
    for (const Segment& s : segments) total = std::max(total, s.offset + s.length);
    return total;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    value.set_requires_grad(requires_grad);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    bool needs = false;
    for (const Var& p : parents) {
        if (p.tape_ != this) throw ContractError(std::string(op) + ": operand recorded on a different tape");
        needs = needs || nodes_[p.id_].requires_grad;
    }
    value.set_requires_grad(needs);
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : nullptr});
    return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(Var v) {
    Node& node = nodes_[v.id_];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape_ != this) throw ContractError("backward: loss belongs to another tape");
    if (nodes_[loss.id_].value.size() != 1)
        throw ContractError("backward needs a scalar loss, got shape " + shape_string(nodes_[loss.id_].value.shape()));
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id_].requires_grad) return;
    nodes_[loss.id_].grad.assign(1, 1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.grad.empty() || !node.backward) continue;
        // Callbacks only touch parent buffers, never this node's.
        node.backward(*this, std::span<const double>(node.grad));
    }
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_[v.id_];
    if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
    return Tensor(node.value.shape(), node.grad);
}

}  // namespace tulip
