#include "flowsr/tape.hpp"

#include "flowsr/errors.hpp"

namespace flowsr {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;
}  // namespace

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_step) {
    nodes_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw UsageError("backward: tape already consumed; re-record the computation");
    if (!loss.defined() || loss.numel() != 1) throw UsageError("backward: loss must be a scalar tensor");
    if (!loss.requires_grad()) {
        throw UsageError("backward: loss is detached from the tape (requires_grad is false)");
    }
    consumed_ = true;
    grads_[loss.id()] = {1.0};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

Tensor Tape::grad(const Tensor& t) const {
    if (!consumed_) throw UsageError("grad: call backward first");
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor::from_data(t.shape(), it->second);
}

std::vector<double>& Tape::grad_buf(const Tensor& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        it = grads_.emplace(t.id(), std::vector<double>(static_cast<size_t>(t.numel()), 0.0)).first;
    }
    return it->second;
}

const std::vector<double>* Tape::grad_if(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

bool grad_recording() { return g_active_tape != nullptr && g_no_grad_depth == 0; }

}  // namespace flowsr
