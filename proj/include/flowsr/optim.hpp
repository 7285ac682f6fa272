#pragma once

#include <cstdint>
#include <vector>

#include "flowsr/tape.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

/// Adam with bias correction, operating on a fixed list of parameter
/// tensors registered at construction. step() pulls the gradients out of
/// a tape that has already run backward() and updates the parameter
/// buffers in place (tensors are shared handles, so the owning module
/// sees the update).
///
/// A parameter without a gradient on the tape is skipped entirely: its
/// moment estimates and its private step counter stay put. That is what
/// makes freezing a sub-network as simple as clearing requires_grad on
/// its tensors for a while -- when it thaws, its Adam state resumes from
/// where it left off instead of having decayed toward zero.
class Adam {
public:
    struct Hyper {
        double lr = 5e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    // Per-parameter state, exposed so checkpoints can round-trip it.
    struct Slot {
        Tensor param;
        std::vector<double> m, v;  // first/second moment, same size as param
        int64_t t = 0;             // updates applied to this parameter
    };

    Adam(std::vector<Tensor> params, Hyper hp);

    /// One update from the gradients on `tape`. When max_grad_norm > 0
    /// and the global L2 norm of all present gradients exceeds it, every
    /// gradient is rescaled by max_grad_norm / norm first.
    void step(const Tape& tape, double max_grad_norm = 0.0);

    void set_lr(double lr) { hp_.lr = lr; }
    double lr() const { return hp_.lr; }
    const Hyper& hyper() const { return hp_; }

    /// Global gradient norm seen by the most recent step(), before any
    /// clipping. Useful for training diagnostics.
    double last_grad_norm() const { return last_norm_; }

    int64_t num_slots() const { return static_cast<int64_t>(slots_.size()); }
    Slot& slot(int64_t i) { return slots_.at(static_cast<size_t>(i)); }
    const Slot& slot(int64_t i) const { return slots_.at(static_cast<size_t>(i)); }

private:
    std::vector<Slot> slots_;
    Hyper hp_;
    double last_norm_ = 0.0;
};

}  // namespace flowsr
