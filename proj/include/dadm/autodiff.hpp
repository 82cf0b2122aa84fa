#pragma once

#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dadm/tensor.hpp"

namespace dadm {

/// A trainable (or frozen) weight tensor owned by a module.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

class Tape;

/// Handle to one recorded value on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Result of Tape::backward: gradient per node id. Nodes the loss does not
/// reach report zeros of the node's shape.
class Gradients {
public:
    const Tensor& of(const Var& v) const;
    /// Zeros when `p` was never bound to the tape or is not reached.
    Tensor of(const Parameter& p) const;
    bool reached(const Var& v) const;

private:
    friend class Tape;
    std::vector<Tensor> grads_;
    std::vector<bool> reached_;
    std::unordered_map<const Parameter*, int> param_ids_;
};

/// Reverse-mode record of one forward pass.
///
/// Nodes are appended in execution order, so parents always precede children.
/// A tape supports exactly one backward pass. With record=false the tape only
/// evaluates values (no gradient rules are stored).
class Tape {
public:
    /// Receives the tape, the gradient w.r.t. the node's output, and the output.
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);
    /// Leaf bound to `p`; repeated calls within one tape return the same node.
    Var param(const Parameter& p);

    /// Appends an operation result. `op` names the operation in errors.
    /// Throws NumericError if `value` holds NaN or Inf.
    Var record(std::string_view op, Tensor value, std::vector<int> parents, BackwardFn backward);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    bool recording() const { return record_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Gradient accumulator of node `id`, zero-initialized on first access.
    Tensor& grad_buffer(int id);
    void accumulate(int id, const Tensor& g);

    Gradients backward(const Var& loss);

private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };
    Var push(Tensor value, bool requires_grad);

    bool record_;
    bool consumed_ = false;
    std::deque<Node> nodes_;  // stable addresses: Var::value() hands out references
    std::vector<Tensor> grads_;
    std::vector<bool> has_grad_;
    std::unordered_map<const Parameter*, int> param_ids_;
};

}  // namespace dadm
