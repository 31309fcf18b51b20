#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdfd/data.hpp"
#include "gdfd/tensor.hpp"

namespace gdfd {

// Linear warmup from 0 to base_lr over `warmup` steps, then geometric decay
// by `decay` once per `decay_interval` steps.
struct ScheduleConfig {
    double base_lr = 0.05;
    long warmup = 200;
    long decay_interval = 100;
    double decay = 0.977;
};

double lr_schedule(long step, const ScheduleConfig& cfg);

// Bias-corrected Adam over a fixed parameter list. Gradients are read from
// each tensor's grad buffer; moment buffers are parallel to the list.
template <typename T>
struct AdamState {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    long step = 0;
    std::vector<std::vector<T>> m, v;

    AdamState() = default;
    explicit AdamState(const std::vector<Tensor<T>*>& params);
};

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state, T lr);

// Heavy-ball momentum: v <- momentum*v + g; p <- p - lr*v.
template <typename T>
struct MomentumState {
    T momentum = T(0.9);
    long step = 0;
    std::vector<std::vector<T>> v;

    MomentumState() = default;
    explicit MomentumState(const std::vector<Tensor<T>*>& params);
};

template <typename T>
void momentum_step(const std::vector<Tensor<T>*>& params, MomentumState<T>& state, T lr);

// Optimizer state serialization into a checkpoint under `prefix`; reading
// validates buffer shapes against the given parameter list.
template <typename T>
void add_adam_state(Checkpoint& ck, const std::string& prefix, const AdamState<T>& state);
template <typename T>
AdamState<T> read_adam_state(const Checkpoint& ck, const std::string& prefix,
                             const std::vector<Tensor<T>*>& params);
template <typename T>
void add_momentum_state(Checkpoint& ck, const std::string& prefix, const MomentumState<T>& state);
template <typename T>
MomentumState<T> read_momentum_state(const Checkpoint& ck, const std::string& prefix,
                                     const std::vector<Tensor<T>*>& params);

extern template struct AdamState<float>;
extern template struct AdamState<double>;
extern template struct MomentumState<float>;
extern template struct MomentumState<double>;

} // namespace gdfd
