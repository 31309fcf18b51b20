#include "gdfd/optim.hpp"

#include <cmath>
#include <cstdio>
#include <string>

namespace gdfd {

double lr_schedule(long step, const ScheduleConfig& cfg) {
    if (step < 0) throw ParamError("lr_schedule: negative step");
    if (cfg.decay_interval < 1) throw ParamError("lr_schedule: decay_interval must be >= 1");
    if (!(cfg.decay > 0.0 && cfg.decay <= 1.0))
        throw ParamError("lr_schedule: decay must be in (0, 1]");
    if (cfg.warmup < 0) throw ParamError("lr_schedule: negative warmup");
    if (step < cfg.warmup)
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
    const long exponent = (step - cfg.warmup) / cfg.decay_interval;
    double lr = cfg.base_lr;
    for (long i = 0; i < exponent; ++i) lr *= cfg.decay;
    return lr;
}

template <typename T>
AdamState<T>::AdamState(const std::vector<Tensor<T>*>& params) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Tensor<T>* p : params) {
        m.emplace_back(p->numel(), T(0));
        v.emplace_back(p->numel(), T(0));
    }
}

namespace {

template <typename T>
void check_optimizer_buffers(const std::vector<Tensor<T>*>& params,
                             const std::vector<std::vector<T>>& bufs, const char* what) {
    if (bufs.size() != params.size())
        throw ShapeError(std::string(what) + ": state tracks " + std::to_string(bufs.size()) +
                         " parameters, got " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (bufs[i].size() != params[i]->numel())
            throw ShapeError(std::string(what) + ": buffer " + std::to_string(i) +
                             " size does not match parameter");
        if (params[i]->grad.size() != params[i]->numel())
            throw ShapeError(std::string(what) + ": parameter " + std::to_string(i) +
                             " has no gradient");
    }
}

} // namespace

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state, T lr) {
    check_optimizer_buffers(params, state.m, "adam");
    ++state.step;
    const T bc1 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta1),
                                                static_cast<double>(state.step)));
    const T bc2 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta2),
                                                static_cast<double>(state.step)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        std::vector<T>& m = state.m[i];
        std::vector<T>& v = state.v[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const T g = p.grad[j];
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g * g;
            p.data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
        }
    }
}

template <typename T>
MomentumState<T>::MomentumState(const std::vector<Tensor<T>*>& params) {
    v.reserve(params.size());
    for (const Tensor<T>* p : params) v.emplace_back(p->numel(), T(0));
}

template <typename T>
void momentum_step(const std::vector<Tensor<T>*>& params, MomentumState<T>& state, T lr) {
    check_optimizer_buffers(params, state.v, "momentum");
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        std::vector<T>& v = state.v[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            v[j] = state.momentum * v[j] + p.grad[j];
            p.data[j] -= lr * v[j];
        }
    }
}

namespace {

std::string fmt_opt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double meta_double(const Checkpoint& ck, const std::string& key) {
    const std::string& s = ck.meta(key);
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size())
        throw DataError("checkpoint: metadata '" + key + "' is not a number: '" + s + "'");
    return v;
}

template <typename T>
void add_buffers(Checkpoint& ck, const std::string& prefix, const char* tag,
                 const std::vector<std::vector<T>>& bufs) {
    for (std::size_t i = 0; i < bufs.size(); ++i)
        ck.add(prefix + "/" + tag + std::to_string(i), Tensor<T>({bufs[i].size()}, bufs[i]));
}

template <typename T>
std::vector<std::vector<T>> read_buffers(const Checkpoint& ck, const std::string& prefix,
                                         const char* tag,
                                         const std::vector<Tensor<T>*>& params) {
    std::vector<std::vector<T>> bufs;
    bufs.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = prefix + "/" + tag + std::to_string(i);
        Tensor<T> t;
        if constexpr (std::is_same_v<T, float>) t = ck.get_f32(name);
        else t = ck.get_f64(name);
        if (t.numel() != params[i]->numel())
            throw DataError("checkpoint: optimizer buffer '" + name +
                            "' does not match parameter size");
        bufs.push_back(std::move(t.data));
    }
    return bufs;
}

} // namespace

template <typename T>
void add_adam_state(Checkpoint& ck, const std::string& prefix, const AdamState<T>& state) {
    ck.set_meta(prefix + "/step", std::to_string(state.step));
    ck.set_meta(prefix + "/beta1", fmt_opt(static_cast<double>(state.beta1)));
    ck.set_meta(prefix + "/beta2", fmt_opt(static_cast<double>(state.beta2)));
    ck.set_meta(prefix + "/eps", fmt_opt(static_cast<double>(state.eps)));
    add_buffers(ck, prefix, "m", state.m);
    add_buffers(ck, prefix, "v", state.v);
}

template <typename T>
AdamState<T> read_adam_state(const Checkpoint& ck, const std::string& prefix,
                             const std::vector<Tensor<T>*>& params) {
    AdamState<T> state;
    state.step = std::stol(ck.meta(prefix + "/step"));
    state.beta1 = static_cast<T>(meta_double(ck, prefix + "/beta1"));
    state.beta2 = static_cast<T>(meta_double(ck, prefix + "/beta2"));
    state.eps = static_cast<T>(meta_double(ck, prefix + "/eps"));
    state.m = read_buffers(ck, prefix, "m", params);
    state.v = read_buffers(ck, prefix, "v", params);
    return state;
}

template <typename T>
void add_momentum_state(Checkpoint& ck, const std::string& prefix, const MomentumState<T>& state) {
    ck.set_meta(prefix + "/step", std::to_string(state.step));
    ck.set_meta(prefix + "/momentum", fmt_opt(static_cast<double>(state.momentum)));
    add_buffers(ck, prefix, "v", state.v);
}

template <typename T>
MomentumState<T> read_momentum_state(const Checkpoint& ck, const std::string& prefix,
                                     const std::vector<Tensor<T>*>& params) {
    MomentumState<T> state;
    state.step = std::stol(ck.meta(prefix + "/step"));
    state.momentum = static_cast<T>(meta_double(ck, prefix + "/momentum"));
    state.v = read_buffers(ck, prefix, "v", params);
    return state;
}

template struct AdamState<float>;
template struct AdamState<double>;
template struct MomentumState<float>;
template struct MomentumState<double>;

template void adam_step<float>(const std::vector<Tensor<float>*>&, AdamState<float>&, float);
template void adam_step<double>(const std::vector<Tensor<double>*>&, AdamState<double>&, double);
template void momentum_step<float>(const std::vector<Tensor<float>*>&, MomentumState<float>&,
                                   float);
template void momentum_step<double>(const std::vector<Tensor<double>*>&, MomentumState<double>&,
                                    double);
template void add_adam_state<float>(Checkpoint&, const std::string&, const AdamState<float>&);
template void add_adam_state<double>(Checkpoint&, const std::string&, const AdamState<double>&);
template AdamState<float> read_adam_state<float>(const Checkpoint&, const std::string&,
                                                 const std::vector<Tensor<float>*>&);
template AdamState<double> read_adam_state<double>(const Checkpoint&, const std::string&,
                                                   const std::vector<Tensor<double>*>&);
template void add_momentum_state<float>(Checkpoint&, const std::string&,
                                        const MomentumState<float>&);
template void add_momentum_state<double>(Checkpoint&, const std::string&,
                                         const MomentumState<double>&);
template MomentumState<float> read_momentum_state<float>(const Checkpoint&, const std::string&,
                                                         const std::vector<Tensor<float>*>&);
template MomentumState<double> read_momentum_state<double>(const Checkpoint&, const std::string&,
                                                           const std::vector<Tensor<double>*>&);

} // namespace gdfd
