#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "flowsr/tensor.hpp"

namespace flowsr {

/// Define-by-run reverse-mode tape. While a Tape is alive it is the
/// active tape for the thread; differentiable ops append one backward
/// closure per recorded operation. backward() replays the closures in
/// exact reverse recording order and accumulates d(loss)/d(tensor) per
/// buffer. Gradients are only ever materialized for tensors that were
/// marked requires_grad (leaves) or produced from them (interior nodes).
///
/// One training step owns one tape; a tape can run backward once.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::function<void()> backward_step);
    size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape. loss must be a
    /// scalar recorded on this tape; a second call is a usage error.
    void backward(const Tensor& loss);

    /// Gradient of the given tensor after backward(); zeros if the
    /// tensor did not influence the loss.
    Tensor grad(const Tensor& t) const;

    // Accumulator access for op backward closures.
    std::vector<double>& grad_buf(const Tensor& t);
    const std::vector<double>* grad_if(const Tensor& t) const;

private:
    std::vector<std::function<void()>> nodes_;
    std::unordered_map<const void*, std::vector<double>> grads_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

/// RAII switch that disables recording in its scope (nestable). Used by
/// inverse passes and data-dependent initialization, which are never
/// differentiated through.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool active();
};

/// True when an op invoked now should record onto the active tape.
bool grad_recording();

}  // namespace flowsr
