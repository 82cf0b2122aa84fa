#include "dadm/autodiff.hpp"

#include "dadm/errors.hpp"
#include "dadm/kernels.hpp"

namespace dadm {

const Tensor& Var::value() const {
    if (tape_ == nullptr) throw TapeError("Var: uninitialized handle");
    return tape_->value(id_);
}

const Tensor& Gradients::of(const Var& v) const {
    const auto idx = static_cast<std::size_t>(v.id());
    if (idx >= grads_.size()) throw TapeError("Gradients: node id from another tape");
    return grads_[idx];
}

Tensor Gradients::of(const Parameter& p) const {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return grads_[static_cast<std::size_t>(it->second)];
    return Tensor(p.value.shape());
}

bool Gradients::reached(const Var& v) const {
    const auto idx = static_cast<std::size_t>(v.id());
    return idx < reached_.size() && reached_[idx];
}

Var Tape::push(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad && record_});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NumericError("constant: non-finite input");
    return push(std::move(value), false);
}

Var Tape::variable(Tensor value) {
    if (!value.all_finite()) throw NumericError("variable: non-finite input");
    return push(std::move(value), true);
}

Var Tape::param(const Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
    if (!p.value.all_finite()) throw NumericError("parameter '" + p.name + "' holds non-finite values");
    Var v = push(p.value, p.trainable);
    param_ids_.emplace(&p, v.id());
    return v;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<int> parents, BackwardFn backward) {
    if (consumed_) throw TapeError(std::string(op) + ": tape already consumed by backward");
    if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
    Var out = push(std::move(value), needs);
    if (needs) {
        auto& node = nodes_.back();
        node.parents = std::move(parents);
        node.backward = std::move(backward);
    }
    return out;
}

Tensor& Tape::grad_buffer(int id) {
    const auto idx = static_cast<std::size_t>(id);
    if (!has_grad_[idx]) {
        grads_[idx] = Tensor(nodes_[idx].value.shape());
        has_grad_[idx] = true;
    }
    return grads_[idx];
}

void Tape::accumulate(int id, const Tensor& g) {
    if (!requires_grad(id)) return;
    Tensor& buf = grad_buffer(id);
    kernels::active().add(buf.ptr(), g.ptr(), buf.ptr(), buf.size());
}

Gradients Tape::backward(const Var& loss) {
    if (loss.tape() != this) throw TapeError("backward: loss belongs to another tape");
    if (consumed_) throw TapeError("backward: tape already consumed; re-record the forward pass");
    if (!record_) throw TapeError("backward: tape was created with record=false");
    if (loss.value().size() != 1)
        throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.value().shape()));
    consumed_ = true;

    grads_.assign(nodes_.size(), Tensor{});
    has_grad_.assign(nodes_.size(), false);
    if (requires_grad(loss.id())) grad_buffer(loss.id()).fill(1.0);

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (!has_grad_[i] || !node.backward) continue;
        node.backward(*this, grads_[i], node.value);
    }

    Gradients out;
    out.reached_ = has_grad_;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (!has_grad_[i]) grads_[i] = Tensor(nodes_[i].value.shape());
    out.grads_ = std::move(grads_);
    out.param_ids_ = param_ids_;
    return out;
}

}  // namespace dadm
