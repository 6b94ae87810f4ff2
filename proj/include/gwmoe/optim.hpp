#pragma once

#include <cstddef>
#include <vector>

#include "gwmoe/tensor.hpp"

namespace gwmoe {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Only the tensors handed to the constructor are
/// ever updated.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

    /// One update with learning rate `lr` from the current gradients.
    /// Tensors without a gradient buffer are left untouched.
    void step(double lr);
    std::size_t steps() const { return t_; }

    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

private:
    std::vector<Tensor> params_;
    std::vector<Tensor> m_, v_;
    AdamConfig config_;
    std::size_t t_ = 0;
};

/// Linear warmup over steps 1..warmup_steps-1, then constant. `step` is 1-based.
double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps);

}  // namespace gwmoe
