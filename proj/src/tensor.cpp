#include "gdfd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace gdfd {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    requires_grad = on;
    if (on) {
        grad.assign(data.size(), T(0));
    } else {
        grad.clear();
    }
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (requires_grad) grad.assign(data.size(), T(0));
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : data) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape s, T value) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape s, Rng& rng, T stddev) {
    Tensor t(std::move(s));
    for (T& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
}

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

template <typename T>
int Tape<T>::new_slot_for(Shape shape, int node_index, bool needs_grad) {
    Slot s;
    s.owned = Tensor<T>(std::move(shape));
    s.node = node_index;
    s.needs_grad = needs_grad;
    slots_.push_back(std::move(s));
    return static_cast<int>(slots_.size()) - 1;
}

template <typename T>
void Tape<T>::check_var(Var v, const char* who) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= slots_.size()) {
        throw TapeError(std::string(who) + ": variable is not on this tape");
    }
}

template <typename T>
Var Tape<T>::leaf(Tensor<T>* external) {
    if (external == nullptr) throw TapeError("leaf: null tensor");
    Node n;
    n.kind = OpKind::Leaf;
    n.needs_grad = external->requires_grad;
    nodes_.push_back(n);
    Slot s;
    s.external = external;
    s.node = static_cast<int>(nodes_.size()) - 1;
    s.needs_grad = external->requires_grad;
    slots_.push_back(std::move(s));
    nodes_.back().out = static_cast<int>(slots_.size()) - 1;
    return Var{static_cast<int>(slots_.size()) - 1};
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.kind = OpKind::Leaf;
    nodes_.push_back(n);
    Slot s;
    s.owned = std::move(value);
    s.node = static_cast<int>(nodes_.size()) - 1;
    slots_.push_back(std::move(s));
    nodes_.back().out = static_cast<int>(slots_.size()) - 1;
    return Var{static_cast<int>(slots_.size()) - 1};
}

template <typename T>
Var Tape<T>::constant_scalar(T value) {
    return constant(Tensor<T>({1}, {value}));
}

template <typename T>
Var Tape<T>::record(OpKind kind, std::initializer_list<Var> inputs, Shape out_shape, T a, T b,
                    std::vector<int> ictx) {
    Node n;
    n.kind = kind;
    n.a = a;
    n.b = b;
    n.ictx = std::move(ictx);
    int i = 0;
    bool needs = false;
    for (Var v : inputs) {
        check_var(v, "op input");
        n.in[static_cast<std::size_t>(i++)] = v.id;
        needs = needs || slots_[static_cast<std::size_t>(v.id)].needs_grad;
    }
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    int ni = static_cast<int>(nodes_.size()) - 1;
    int out = new_slot_for(std::move(out_shape), ni, needs);
    nodes_[static_cast<std::size_t>(ni)].out = out;
    forward_node(static_cast<std::size_t>(ni));
    return Var{out};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
    check_var(v, "value");
    return slot_value(v.id);
}

template <typename T>
std::vector<T>& Tape<T>::grad_buf(int id) {
    Slot& s = slots_[static_cast<std::size_t>(id)];
    if (s.external && s.external->requires_grad) {
        if (s.external->grad.size() != s.external->data.size())
            s.external->grad.assign(s.external->data.size(), T(0));
        return s.external->grad;
    }
    if (s.gbuf.empty()) s.gbuf.assign(slot_value(id).numel(), T(0));
    return s.gbuf;
}

template <typename T>
const std::vector<T>& Tape<T>::grad(Var v) const {
    check_var(v, "grad");
    const Slot& s = slots_[static_cast<std::size_t>(v.id)];
    if (s.external && s.external->requires_grad) return s.external->grad;
    return s.gbuf.empty() ? empty_grad_ : s.gbuf;
}

// ---------------------------------------------------------------------------
// Op construction (shape checks happen here, before forward)
// ---------------------------------------------------------------------------

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

// Smallest ox with ox*stride - pad + k >= 0, clamped at 0.
inline long conv_lo(long k, long pad, long stride) {
    long num = pad - k;
    if (num <= 0) return 0;
    return (num + stride - 1) / stride;
}

// One past the largest ox with ox*stride - pad + k <= limit-1.
inline long conv_hi(long k, long pad, long stride, long limit, long out_limit) {
    long num = limit - 1 + pad - k;
    if (num < 0) return 0;
    return std::min(out_limit, num / stride + 1);
}

} // namespace

template <typename T>
Var Tape<T>::linear(Var input, Var weight, Var bias) {
    const Tensor<T>& x = value(input);
    const Tensor<T>& w = value(weight);
    const Tensor<T>& c = value(bias);
    require(x.shape.size() == 2, "linear: input must be 2-d, got " + shape_str(x.shape));
    require(w.shape.size() == 2, "linear: weight must be 2-d, got " + shape_str(w.shape));
    require(c.shape.size() == 1, "linear: bias must be 1-d, got " + shape_str(c.shape));
    require(x.shape[1] == w.shape[0],
            "linear: input " + shape_str(x.shape) + " does not conform with weight " + shape_str(w.shape));
    require(w.shape[1] == c.shape[0],
            "linear: bias " + shape_str(c.shape) + " does not conform with weight " + shape_str(w.shape));
    return record(OpKind::Linear, {input, weight, bias}, {x.shape[0], w.shape[1]});
}

template <typename T>
Var Tape<T>::conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
    const Tensor<T>& x = value(input);
    const Tensor<T>& k = value(kernel);
    const Tensor<T>& c = value(bias);
    require(x.shape.size() == 4, "conv2d: input must be B x C x H x W, got " + shape_str(x.shape));
    require(k.shape.size() == 4, "conv2d: kernel must be F x C x k x k, got " + shape_str(k.shape));
    require(k.shape[2] == k.shape[3], "conv2d: kernel must be square, got " + shape_str(k.shape));
    if (k.shape[2] % 2 == 0) throw ParamError("conv2d: kernel size must be odd");
    if (stride < 1) throw ParamError("conv2d: stride must be >= 1");
    if (padding < 0) throw ParamError("conv2d: padding must be >= 0");
    require(x.shape[1] == k.shape[1],
            "conv2d: input channels " + shape_str(x.shape) + " vs kernel " + shape_str(k.shape));
    require(c.shape.size() == 1 && c.shape[0] == k.shape[0],
            "conv2d: bias " + shape_str(c.shape) + " vs kernel " + shape_str(k.shape));
    long ksz = static_cast<long>(k.shape[2]);
    long h = static_cast<long>(x.shape[2]), w = static_cast<long>(x.shape[3]);
    long hnum = h + 2L * padding - ksz;
    long wnum = w + 2L * padding - ksz;
    if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0) {
        throw ShapeError("conv2d: output size (" + std::to_string(h) + "+2*" + std::to_string(padding) +
                         "-" + std::to_string(ksz) + ")/" + std::to_string(stride) + "+1 is not integral");
    }
    std::size_t oh = static_cast<std::size_t>(hnum / stride + 1);
    std::size_t ow = static_cast<std::size_t>(wnum / stride + 1);
    return record(OpKind::Conv2d, {input, kernel, bias}, {x.shape[0], k.shape[0], oh, ow},
                  static_cast<T>(stride), static_cast<T>(padding));
}

template <typename T>
std::pair<Var, Var> Tape<T>::channel_moments(Var input) {
    const Tensor<T>& x = value(input);
    require(x.shape.size() == 4, "channel_moments: input must be B x C x H x W, got " + shape_str(x.shape));
    std::size_t n = x.shape[0] * x.shape[2] * x.shape[3];
    if (n < 2) throw ParamError("channel_moments: degenerate batch (need B*H*W >= 2, got " + std::to_string(n) + ")");
    Var mean = record(OpKind::ChannelMoments, {input}, {x.shape[1]});
    // attach the variance output to the node just recorded, then run the
    // forward pass for real (record skipped it while out2 was missing)
    Node& node = nodes_.back();
    int vslot = new_slot_for({x.shape[1]}, static_cast<int>(nodes_.size()) - 1, node.needs_grad);
    node.out2 = vslot;
    forward_node(nodes_.size() - 1);
    return {mean, Var{vslot}};
}

template <typename T>
Var Tape<T>::bn_normalize(Var input, Var mean, Var var, Var gamma, Var beta, T eps) {
    const Tensor<T>& x = value(input);
    require(x.shape.size() == 4, "bn_normalize: input must be B x C x H x W, got " + shape_str(x.shape));
    std::size_t ch = x.shape[1];
    for (Var v : {mean, var, gamma, beta}) {
        const Tensor<T>& t = value(v);
        require(t.shape.size() == 1 && t.shape[0] == ch,
                "bn_normalize: per-channel argument " + shape_str(t.shape) + " does not match channels " +
                    std::to_string(ch));
    }
    return record(OpKind::BnNormalize, {input, mean, var, gamma, beta}, x.shape, eps);
}

template <typename T>
Var Tape<T>::leaky_relu(Var input, T alpha) {
    return record(OpKind::LeakyRelu, {input}, value(input).shape, alpha);
}

template <typename T>
Var Tape<T>::tanh_op(Var input) {
    return record(OpKind::Tanh, {input}, value(input).shape);
}

template <typename T>
Var Tape<T>::upsample2x(Var input) {
    const Tensor<T>& x = value(input);
    require(x.shape.size() == 4, "upsample2x: input must be B x C x H x W, got " + shape_str(x.shape));
    return record(OpKind::Upsample2x, {input}, {x.shape[0], x.shape[1], x.shape[2] * 2, x.shape[3] * 2});
}

template <typename T>
Var Tape<T>::avgpool2x2(Var input) {
    const Tensor<T>& x = value(input);
    require(x.shape.size() == 4, "avgpool2x2: input must be B x C x H x W, got " + shape_str(x.shape));
    require(x.shape[2] % 2 == 0 && x.shape[3] % 2 == 0,
            "avgpool2x2: spatial dims must be even, got " + shape_str(x.shape));
    return record(OpKind::AvgPool2x2, {input}, {x.shape[0], x.shape[1], x.shape[2] / 2, x.shape[3] / 2});
}

template <typename T>
Var Tape<T>::global_avg_pool(Var input) {
    const Tensor<T>& x = value(input);
    require(x.shape.size() == 4, "global_avg_pool: input must be B x C x H x W, got " + shape_str(x.shape));
    return record(OpKind::GlobalAvgPool, {input}, {x.shape[0], x.shape[1]});
}

template <typename T>
Var Tape<T>::softmax_temp(Var logits, T temperature) {
    const Tensor<T>& x = value(logits);
    require(x.shape.size() == 2, "softmax_temp: logits must be B x K, got " + shape_str(x.shape));
    if (!(temperature > T(0))) throw ParamError("softmax_temp: temperature must be > 0");
    return record(OpKind::SoftmaxTemp, {logits}, x.shape, temperature);
}

template <typename T>
Var Tape<T>::reshape(Var input, Shape new_shape) {
    const Tensor<T>& x = value(input);
    require(shape_numel(new_shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
    return record(OpKind::Reshape, {input}, std::move(new_shape));
}

template <typename T>
Var Tape<T>::concat_cols(Var left, Var right) {
    const Tensor<T>& a = value(left);
    const Tensor<T>& b = value(right);
    require(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[0] == b.shape[0],
            "concat_cols: need matching 2-d batches, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    return record(OpKind::ConcatCols, {left, right}, {a.shape[0], a.shape[1] + b.shape[1]});
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
    require(value(a).shape == value(b).shape,
            "add: shape mismatch " + shape_str(value(a).shape) + " vs " + shape_str(value(b).shape));
    return record(OpKind::Add, {a, b}, value(a).shape);
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
    require(value(a).shape == value(b).shape,
            "sub: shape mismatch " + shape_str(value(a).shape) + " vs " + shape_str(value(b).shape));
    return record(OpKind::Sub, {a, b}, value(a).shape);
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
    require(value(a).shape == value(b).shape,
            "mul: shape mismatch " + shape_str(value(a).shape) + " vs " + shape_str(value(b).shape));
    return record(OpKind::Mul, {a, b}, value(a).shape);
}

template <typename T>
Var Tape<T>::scale(Var a, T factor) {
    return record(OpKind::Scale, {a}, value(a).shape, factor);
}

template <typename T>
Var Tape<T>::sum(Var a) {
    return record(OpKind::Sum, {a}, {1});
}

template <typename T>
Var Tape<T>::l2_norm(Var a) {
    return record(OpKind::L2Norm, {a}, {1});
}

template <typename T>
Var Tape<T>::kd_loss(Var teacher_logits, Var student_logits, T temperature) {
    const Tensor<T>& t = value(teacher_logits);
    const Tensor<T>& s = value(student_logits);
    require(t.shape.size() == 2 && t.shape == s.shape,
            "kd_loss: logit shapes must match, got " + shape_str(t.shape) + " and " + shape_str(s.shape));
    if (!(temperature > T(0))) throw ParamError("kd_loss: temperature must be > 0");
    return record(OpKind::KdLoss, {teacher_logits, student_logits}, {1}, temperature);
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& x = value(logits);
    require(x.shape.size() == 2, "cross_entropy: logits must be B x K, got " + shape_str(x.shape));
    require(labels.size() == x.shape[0], "cross_entropy: label count " + std::to_string(labels.size()) +
                                             " vs batch " + std::to_string(x.shape[0]));
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= x.shape[1])
            throw ParamError("cross_entropy: label " + std::to_string(l) + " out of range for K=" +
                             std::to_string(x.shape[1]));
    }
    return record(OpKind::CrossEntropy, {logits}, {1}, T(0), T(0), labels);
}

template <typename T>
Var Tape<T>::tv_loss(Var images) {
    const Tensor<T>& x = value(images);
    require(x.shape.size() == 4, "tv_loss: images must be B x C x H x W, got " + shape_str(x.shape));
    return record(OpKind::TvLoss, {images}, {1});
}

template <typename T>
Var Tape<T>::l2_image_loss(Var images) {
    const Tensor<T>& x = value(images);
    require(x.shape.size() == 4, "l2_image_loss: images must be B x C x H x W, got " + shape_str(x.shape));
    return record(OpKind::L2ImageLoss, {images}, {1});
}

template <typename T>
Var Tape<T>::gaussian_kl(Var mean_hat, Var var_hat, Var mean, Var var) {
    const Tensor<T>& mh = value(mean_hat);
    const Tensor<T>& vh = value(var_hat);
    const Tensor<T>& m = value(mean);
    const Tensor<T>& v = value(var);
    require(mh.shape == vh.shape && mh.shape == m.shape && mh.shape == v.shape,
            "gaussian_kl: all four arguments must share a shape");
    for (T x : vh.data)
        if (!(x > T(0))) throw ParamError("gaussian_kl: reference variance must be positive");
    for (T x : v.data)
        if (!(x > T(0))) throw ParamError("gaussian_kl: variance must be positive");
    return record(OpKind::GaussianKl, {mean_hat, var_hat, mean, var}, {1});
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

template <typename T>
void Tape<T>::forward_node(std::size_t ni) {
    Node& n = nodes_[ni];
    const int out = n.out;
    Tensor<T>& o = slot_value(out);
    const T* x0 = n.in[0] >= 0 ? slot_value(n.in[0]).data.data() : nullptr;

    switch (n.kind) {
    case OpKind::Leaf:
        break;
    case OpKind::Linear: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& w = slot_value(n.in[1]);
        const Tensor<T>& c = slot_value(n.in[2]);
        std::size_t bsz = x.shape[0], in_dim = x.shape[1], out_dim = w.shape[1];
        for (std::size_t b = 0; b < bsz; ++b) {
            T* orow = o.data.data() + b * out_dim;
            std::memcpy(orow, c.data.data(), out_dim * sizeof(T));
            const T* xrow = x.data.data() + b * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) {
                const T xi = xrow[i];
                const T* wrow = w.data.data() + i * out_dim;
                for (std::size_t j = 0; j < out_dim; ++j) orow[j] += xi * wrow[j];
            }
        }
        break;
    }
    case OpKind::Conv2d: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& k = slot_value(n.in[1]);
        const Tensor<T>& c = slot_value(n.in[2]);
        const long stride = static_cast<long>(n.a), pad = static_cast<long>(n.b);
        const long bsz = static_cast<long>(x.shape[0]), ch = static_cast<long>(x.shape[1]);
        const long h = static_cast<long>(x.shape[2]), w = static_cast<long>(x.shape[3]);
        const long nf = static_cast<long>(k.shape[0]), ks = static_cast<long>(k.shape[2]);
        const long oh = static_cast<long>(o.shape[2]), ow = static_cast<long>(o.shape[3]);
        for (long b = 0; b < bsz; ++b) {
            for (long f = 0; f < nf; ++f) {
                T* oplane = o.data.data() + ((b * nf + f) * oh) * ow;
                const T bias_v = c.data[static_cast<std::size_t>(f)];
                for (long i = 0; i < oh * ow; ++i) oplane[i] = bias_v;
                for (long cc = 0; cc < ch; ++cc) {
                    const T* xplane = x.data.data() + ((b * ch + cc) * h) * w;
                    const T* kplane = k.data.data() + ((f * ch + cc) * ks) * ks;
                    for (long ky = 0; ky < ks; ++ky) {
                        const long oy_lo = conv_lo(ky, pad, stride);
                        const long oy_hi = conv_hi(ky, pad, stride, h, oh);
                        for (long kx = 0; kx < ks; ++kx) {
                            const T wv = kplane[ky * ks + kx];
                            const long ox_lo = conv_lo(kx, pad, stride);
                            const long ox_hi = conv_hi(kx, pad, stride, w, ow);
                            for (long oy = oy_lo; oy < oy_hi; ++oy) {
                                const long iy = oy * stride - pad + ky;
                                T* orow = oplane + oy * ow;
                                const T* xrow = xplane + iy * w - pad + kx;
                                if (stride == 1) {
                                    for (long ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xrow[ox];
                                } else {
                                    for (long ox = ox_lo; ox < ox_hi; ++ox)
                                        orow[ox] += wv * xplane[iy * w + ox * stride - pad + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        break;
    }
    case OpKind::ChannelMoments: {
        if (n.out2 < 0) break; // variance slot not attached yet; rerun follows
        const Tensor<T>& x = slot_value(n.in[0]);
        Tensor<T>& vout = slot_value(n.out2);
        const std::size_t bsz = x.shape[0], ch = x.shape[1], sp = x.shape[2] * x.shape[3];
        const T invn = T(1) / static_cast<T>(bsz * sp);
        for (std::size_t cc = 0; cc < ch; ++cc) {
            T acc = 0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* p = x.data.data() + (b * ch + cc) * sp;
                for (std::size_t i = 0; i < sp; ++i) acc += p[i];
            }
            o.data[cc] = acc * invn;
        }
        for (std::size_t cc = 0; cc < ch; ++cc) {
            const T mu = o.data[cc];
            T acc = 0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* p = x.data.data() + (b * ch + cc) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    const T d = p[i] - mu;
                    acc += d * d;
                }
            }
            vout.data[cc] = acc * invn;
        }
        break;
    }
    case OpKind::BnNormalize: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& mu = slot_value(n.in[1]);
        const Tensor<T>& var = slot_value(n.in[2]);
        const Tensor<T>& gamma = slot_value(n.in[3]);
        const Tensor<T>& beta = slot_value(n.in[4]);
        const T eps = n.a;
        const std::size_t bsz = x.shape[0], ch = x.shape[1], sp = x.shape[2] * x.shape[3];
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t cc = 0; cc < ch; ++cc) {
                const T inv = T(1) / std::sqrt(var.data[cc] + eps);
                const T g = gamma.data[cc] * inv;
                const T shift = beta.data[cc] - mu.data[cc] * g;
                const T* p = x.data.data() + (b * ch + cc) * sp;
                T* q = o.data.data() + (b * ch + cc) * sp;
                for (std::size_t i = 0; i < sp; ++i) q[i] = p[i] * g + shift;
            }
        }
        break;
    }
    case OpKind::LeakyRelu: {
        const T alpha = n.a;
        for (std::size_t i = 0; i < o.data.size(); ++i) {
            const T v = x0[i];
            o.data[i] = v >= T(0) ? v : alpha * v;
        }
        break;
    }
    case OpKind::Tanh: {
        for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = std::tanh(x0[i]);
        break;
    }
    case OpKind::Upsample2x: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], h = x.shape[2], w = x.shape[3];
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* p = x.data.data() + pl * h * w;
            T* q = o.data.data() + pl * 4 * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const T v = p[y * w + xx];
                    T* r0 = q + (2 * y) * (2 * w) + 2 * xx;
                    T* r1 = r0 + 2 * w;
                    r0[0] = v;
                    r0[1] = v;
                    r1[0] = v;
                    r1[1] = v;
                }
            }
        }
        break;
    }
    case OpKind::AvgPool2x2: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], h = x.shape[2], w = x.shape[3];
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* p = x.data.data() + pl * h * w;
            T* q = o.data.data() + pl * (h / 2) * (w / 2);
            for (std::size_t y = 0; y < h / 2; ++y) {
                for (std::size_t xx = 0; xx < w / 2; ++xx) {
                    const T* r0 = p + (2 * y) * w + 2 * xx;
                    const T* r1 = r0 + w;
                    q[y * (w / 2) + xx] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
                }
            }
        }
        break;
    }
    case OpKind::GlobalAvgPool: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], sp = x.shape[2] * x.shape[3];
        const T inv = T(1) / static_cast<T>(sp);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* p = x.data.data() + pl * sp;
            T acc = 0;
            for (std::size_t i = 0; i < sp; ++i) acc += p[i];
            o.data[pl] = acc * inv;
        }
        break;
    }
    case OpKind::SoftmaxTemp: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t bsz = x.shape[0], k = x.shape[1];
        const T tau = n.a;
        for (std::size_t b = 0; b < bsz; ++b) {
            const T* p = x.data.data() + b * k;
            T* q = o.data.data() + b * k;
            T mx = p[0];
            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, p[i]);
            T denom = 0;
            for (std::size_t i = 0; i < k; ++i) {
                q[i] = std::exp((p[i] - mx) / tau);
                denom += q[i];
            }
            const T inv = T(1) / denom;
            for (std::size_t i = 0; i < k; ++i) q[i] *= inv;
        }
        break;
    }
    case OpKind::Reshape: {
        o.data = slot_value(n.in[0]).data;
        break;
    }
    case OpKind::ConcatCols: {
        const Tensor<T>& a = slot_value(n.in[0]);
        const Tensor<T>& b = slot_value(n.in[1]);
        const std::size_t bsz = a.shape[0], wa = a.shape[1], wb = b.shape[1];
        for (std::size_t r = 0; r < bsz; ++r) {
            std::memcpy(o.data.data() + r * (wa + wb), a.data.data() + r * wa, wa * sizeof(T));
            std::memcpy(o.data.data() + r * (wa + wb) + wa, b.data.data() + r * wb, wb * sizeof(T));
        }
        break;
    }
    case OpKind::Add: {
        const T* y = slot_value(n.in[1]).data.data();
        for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = x0[i] + y[i];
        break;
    }
    case OpKind::Sub: {
        const T* y = slot_value(n.in[1]).data.data();
        for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = x0[i] - y[i];
        break;
    }
    case OpKind::Mul: {
        const T* y = slot_value(n.in[1]).data.data();
        for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = x0[i] * y[i];
        break;
    }
    case OpKind::Scale: {
        for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = n.a * x0[i];
        break;
    }
    case OpKind::Sum: {
        T acc = 0;
        const std::size_t m = slot_value(n.in[0]).numel();
        for (std::size_t i = 0; i < m; ++i) acc += x0[i];
        o.data[0] = acc;
        break;
    }
    case OpKind::L2Norm: {
        T acc = 0;
        const std::size_t m = slot_value(n.in[0]).numel();
        for (std::size_t i = 0; i < m; ++i) acc += x0[i] * x0[i];
        o.data[0] = std::sqrt(acc);
        break;
    }
    case OpKind::KdLoss: {
        const Tensor<T>& t = slot_value(n.in[0]);
        const Tensor<T>& s = slot_value(n.in[1]);
        const std::size_t bsz = t.shape[0], k = t.shape[1];
        const T tau = n.a;
        T total = 0;
        std::vector<T> lt(k), ls(k);
        for (std::size_t b = 0; b < bsz; ++b) {
            const T* pt = t.data.data() + b * k;
            const T* ps = s.data.data() + b * k;
            auto log_softmax = [&](const T* src, std::vector<T>& dst) {
                T mx = src[0];
                for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, src[i]);
                T denom = 0;
                for (std::size_t i = 0; i < k; ++i) denom += std::exp((src[i] - mx) / tau);
                const T lse = std::log(denom);
                for (std::size_t i = 0; i < k; ++i) dst[i] = (src[i] - mx) / tau - lse;
            };
            log_softmax(pt, lt);
            log_softmax(ps, ls);
            for (std::size_t i = 0; i < k; ++i) total += std::exp(lt[i]) * (lt[i] - ls[i]);
        }
        o.data[0] = total * tau * tau / static_cast<T>(bsz);
        break;
    }
    case OpKind::CrossEntropy: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t bsz = x.shape[0], k = x.shape[1];
        T total = 0;
        for (std::size_t b = 0; b < bsz; ++b) {
            const T* p = x.data.data() + b * k;
            T mx = p[0];
            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, p[i]);
            T denom = 0;
            for (std::size_t i = 0; i < k; ++i) denom += std::exp(p[i] - mx);
            const T lse = std::log(denom);
            const std::size_t lbl = static_cast<std::size_t>(n.ictx[b]);
            total -= (p[lbl] - mx - lse);
        }
        o.data[0] = total / static_cast<T>(bsz);
        break;
    }
    case OpKind::TvLoss: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t bsz = x.shape[0], planes = x.shape[1], h = x.shape[2], w = x.shape[3];
        T total = 0;
        for (std::size_t pl = 0; pl < bsz * planes; ++pl) {
            const T* p = x.data.data() + pl * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx + 1 < w; ++xx) {
                    const T d = p[y * w + xx + 1] - p[y * w + xx];
                    total += d * d;
                }
            }
            for (std::size_t y = 0; y + 1 < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const T d = p[(y + 1) * w + xx] - p[y * w + xx];
                    total += d * d;
                }
            }
        }
        o.data[0] = total / static_cast<T>(bsz);
        break;
    }
    case OpKind::L2ImageLoss: {
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t bsz = x.shape[0];
        T total = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) total += x.data[i] * x.data[i];
        o.data[0] = total / static_cast<T>(bsz);
        break;
    }
    case OpKind::GaussianKl: {
        const Tensor<T>& mh = slot_value(n.in[0]);
        const Tensor<T>& vh = slot_value(n.in[1]);
        const Tensor<T>& m = slot_value(n.in[2]);
        const Tensor<T>& v = slot_value(n.in[3]);
        T total = 0;
        for (std::size_t i = 0; i < mh.numel(); ++i) {
            const T d = m.data[i] - mh.data[i];
            total += T(0.5) * (std::log(v.data[i]) - std::log(vh.data[i]) - T(1) +
                               (vh.data[i] + d * d) / v.data[i]);
        }
        o.data[0] = total;
        break;
    }
    }
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

template <typename T>
void Tape<T>::backward(Var scalar_output) {
    check_var(scalar_output, "backward");
    const Tensor<T>& out = slot_value(scalar_output.id);
    if (out.numel() != 1) {
        throw ContractError("backward: output must be a scalar, got shape " + shape_str(out.shape));
    }
    for (Slot& s : slots_) s.gbuf.clear();
    grad_buf(scalar_output.id)[0] += T(1);
    for (std::size_t ni = nodes_.size(); ni-- > 0;) {
        if (nodes_[ni].needs_grad) backward_node(ni);
    }
}

template <typename T>
void Tape<T>::backward_node(std::size_t ni) {
    Node& n = nodes_[ni];
    if (n.kind == OpKind::Leaf) return;
    const int out = n.out;
    const Slot& oslot = slots_[static_cast<std::size_t>(out)];
    const bool out_has_grad =
        (oslot.external && !oslot.external->grad.empty()) || !oslot.gbuf.empty();
    const bool out2_has_grad =
        n.out2 >= 0 && !slots_[static_cast<std::size_t>(n.out2)].gbuf.empty();
    if (!out_has_grad && !out2_has_grad) return;

    auto gslot = [&](int id) -> std::vector<T>& { return grad_buf(id); };
    auto needs = [&](int id) { return slots_[static_cast<std::size_t>(id)].needs_grad; };

    std::vector<T> zero_tmp;
    auto out_grad = [&]() -> const std::vector<T>& {
        if (out_has_grad) return grad_buf(out);
        zero_tmp.assign(slot_value(out).numel(), T(0));
        return zero_tmp;
    };

    switch (n.kind) {
    case OpKind::Leaf:
        break;
    case OpKind::Linear: {
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& w = slot_value(n.in[1]);
        std::size_t bsz = x.shape[0], in_dim = x.shape[1], out_dim = w.shape[1];
        if (needs(n.in[0])) {
            std::vector<T>& gx = gslot(n.in[0]);
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* grow = go.data() + b * out_dim;
                T* gxrow = gx.data() + b * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) {
                    const T* wrow = w.data.data() + i * out_dim;
                    T acc = 0;
                    for (std::size_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                    gxrow[i] += acc;
                }
            }
        }
        if (needs(n.in[1])) {
            std::vector<T>& gw = gslot(n.in[1]);
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* grow = go.data() + b * out_dim;
                const T* xrow = x.data.data() + b * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) {
                    const T xi = xrow[i];
                    T* gwrow = gw.data() + i * out_dim;
                    for (std::size_t j = 0; j < out_dim; ++j) gwrow[j] += xi * grow[j];
                }
            }
        }
        if (needs(n.in[2])) {
            std::vector<T>& gb = gslot(n.in[2]);
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* grow = go.data() + b * out_dim;
                for (std::size_t j = 0; j < out_dim; ++j) gb[j] += grow[j];
            }
        }
        break;
    }
    case OpKind::Conv2d: {
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& k = slot_value(n.in[1]);
        const Tensor<T>& o = slot_value(out);
        const long stride = static_cast<long>(n.a), pad = static_cast<long>(n.b);
        const long bsz = static_cast<long>(x.shape[0]), ch = static_cast<long>(x.shape[1]);
        const long h = static_cast<long>(x.shape[2]), w = static_cast<long>(x.shape[3]);
        const long nf = static_cast<long>(k.shape[0]), ks = static_cast<long>(k.shape[2]);
        const long oh = static_cast<long>(o.shape[2]), ow = static_cast<long>(o.shape[3]);
        const bool need_x = needs(n.in[0]);
        const bool need_k = needs(n.in[1]);
        if (need_x || need_k) {
            std::vector<T>* gx = need_x ? &gslot(n.in[0]) : nullptr;
            std::vector<T>* gk = need_k ? &gslot(n.in[1]) : nullptr;
            for (long b = 0; b < bsz; ++b) {
                for (long f = 0; f < nf; ++f) {
                    const T* gplane = go.data() + ((b * nf + f) * oh) * ow;
                    for (long cc = 0; cc < ch; ++cc) {
                        const T* xplane = x.data.data() + ((b * ch + cc) * h) * w;
                        T* gxplane = need_x ? gx->data() + ((b * ch + cc) * h) * w : nullptr;
                        const T* kplane = k.data.data() + ((f * ch + cc) * ks) * ks;
                        T* gkplane = need_k ? gk->data() + ((f * ch + cc) * ks) * ks : nullptr;
                        for (long ky = 0; ky < ks; ++ky) {
                            const long oy_lo = conv_lo(ky, pad, stride);
                            const long oy_hi = conv_hi(ky, pad, stride, h, oh);
                            for (long kx = 0; kx < ks; ++kx) {
                                const long ox_lo = conv_lo(kx, pad, stride);
                                const long ox_hi = conv_hi(kx, pad, stride, w, ow);
                                const T wv = kplane[ky * ks + kx];
                                T kacc = 0;
                                for (long oy = oy_lo; oy < oy_hi; ++oy) {
                                    const long iy = oy * stride - pad + ky;
                                    const T* grow = gplane + oy * ow;
                                    const T* xrow = xplane + iy * w - pad + kx;
                                    T* gxrow = need_x ? gxplane + iy * w - pad + kx : nullptr;
                                    if (stride == 1) {
                                        if (need_x)
                                            for (long ox = ox_lo; ox < ox_hi; ++ox) gxrow[ox] += wv * grow[ox];
                                        if (need_k)
                                            for (long ox = ox_lo; ox < ox_hi; ++ox) kacc += xrow[ox] * grow[ox];
                                    } else {
                                        for (long ox = ox_lo; ox < ox_hi; ++ox) {
                                            const long ix = ox * stride - pad + kx;
                                            if (need_x) gxplane[iy * w + ix] += wv * grow[ox];
                                            if (need_k) kacc += xplane[iy * w + ix] * grow[ox];
                                        }
                                    }
                                }
                                if (need_k) gkplane[ky * ks + kx] += kacc;
                            }
                        }
                    }
                }
            }
        }
        if (needs(n.in[2])) {
            std::vector<T>& gb = gslot(n.in[2]);
            for (long b = 0; b < bsz; ++b)
                for (long f = 0; f < nf; ++f) {
                    const T* gplane = go.data() + ((b * nf + f) * oh) * ow;
                    T acc = 0;
                    for (long i = 0; i < oh * ow; ++i) acc += gplane[i];
                    gb[static_cast<std::size_t>(f)] += acc;
                }
        }
        break;
    }
    case OpKind::ChannelMoments: {
        if (!needs(n.in[0])) break;
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& mean = slot_value(out);
        const std::size_t bsz = x.shape[0], ch = x.shape[1], sp = x.shape[2] * x.shape[3];
        const T invn = T(1) / static_cast<T>(bsz * sp);
        const std::vector<T>& gmean = out_grad();
        const std::vector<T>* gvar = nullptr;
        if (out2_has_grad) gvar = &gslot(n.out2);
        std::vector<T>& gx = gslot(n.in[0]);
        for (std::size_t cc = 0; cc < ch; ++cc) {
            const T gm = out_has_grad ? gmean[cc] * invn : T(0);
            const T gv = gvar ? (*gvar)[cc] * T(2) * invn : T(0);
            const T mu = mean.data[cc];
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* p = x.data.data() + (b * ch + cc) * sp;
                T* q = gx.data() + (b * ch + cc) * sp;
                for (std::size_t i = 0; i < sp; ++i) q[i] += gm + gv * (p[i] - mu);
            }
        }
        break;
    }
    case OpKind::BnNormalize: {
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        const Tensor<T>& mu = slot_value(n.in[1]);
        const Tensor<T>& var = slot_value(n.in[2]);
        const Tensor<T>& gamma = slot_value(n.in[3]);
        const T eps = n.a;
        const std::size_t bsz = x.shape[0], ch = x.shape[1], sp = x.shape[2] * x.shape[3];
        const bool nx = needs(n.in[0]), nm = needs(n.in[1]), nv = needs(n.in[2]);
        const bool ng = needs(n.in[3]), nb = needs(n.in[4]);
        for (std::size_t cc = 0; cc < ch; ++cc) {
            const T inv = T(1) / std::sqrt(var.data[cc] + eps);
            const T g = gamma.data[cc];
            T sum_go = 0, sum_go_xc = 0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* gp = go.data() + (b * ch + cc) * sp;
                const T* xp = x.data.data() + (b * ch + cc) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    sum_go += gp[i];
                    sum_go_xc += gp[i] * (xp[i] - mu.data[cc]);
                }
            }
            if (nx) {
                std::vector<T>& gx = gslot(n.in[0]);
                const T f = g * inv;
                for (std::size_t b = 0; b < bsz; ++b) {
                    const T* gp = go.data() + (b * ch + cc) * sp;
                    T* q = gx.data() + (b * ch + cc) * sp;
                    for (std::size_t i = 0; i < sp; ++i) q[i] += gp[i] * f;
                }
            }
            if (nm) gslot(n.in[1])[cc] += -g * inv * sum_go;
            if (nv) gslot(n.in[2])[cc] += -T(0.5) * g * inv * inv * inv * sum_go_xc;
            if (ng) gslot(n.in[3])[cc] += inv * sum_go_xc;
            if (nb) gslot(n.in[4])[cc] += sum_go;
        }
        break;
    }
    case OpKind::LeakyRelu: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const T alpha = n.a;
        for (std::size_t i = 0; i < x.numel(); ++i)
            gx[i] += go[i] * (x.data[i] >= T(0) ? T(1) : alpha);
        break;
    }
    case OpKind::Tanh: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& y = slot_value(out);
        std::vector<T>& gx = gslot(n.in[0]);
        for (std::size_t i = 0; i < y.numel(); ++i) gx[i] += go[i] * (T(1) - y.data[i] * y.data[i]);
        break;
    }
    case OpKind::Upsample2x: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], h = x.shape[2], w = x.shape[3];
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* gq = go.data() + pl * 4 * h * w;
            T* gp = gx.data() + pl * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const T* r0 = gq + (2 * y) * (2 * w) + 2 * xx;
                    const T* r1 = r0 + 2 * w;
                    gp[y * w + xx] += r0[0] + r0[1] + r1[0] + r1[1];
                }
            }
        }
        break;
    }
    case OpKind::AvgPool2x2: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], h = x.shape[2], w = x.shape[3];
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* gq = go.data() + pl * (h / 2) * (w / 2);
            T* gp = gx.data() + pl * h * w;
            for (std::size_t y = 0; y < h / 2; ++y) {
                for (std::size_t xx = 0; xx < w / 2; ++xx) {
                    const T v = gq[y * (w / 2) + xx] * T(0.25);
                    T* r0 = gp + (2 * y) * w + 2 * xx;
                    T* r1 = r0 + w;
                    r0[0] += v;
                    r0[1] += v;
                    r1[0] += v;
                    r1[1] += v;
                }
            }
        }
        break;
    }
    case OpKind::GlobalAvgPool: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const std::size_t planes = x.shape[0] * x.shape[1], sp = x.shape[2] * x.shape[3];
        const T inv = T(1) / static_cast<T>(sp);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T v = go[pl] * inv;
            T* q = gx.data() + pl * sp;
            for (std::size_t i = 0; i < sp; ++i) q[i] += v;
        }
        break;
    }
    case OpKind::SoftmaxTemp: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        const Tensor<T>& y = slot_value(out);
        std::vector<T>& gx = gslot(n.in[0]);
        const std::size_t bsz = y.shape[0], k = y.shape[1];
        const T inv_tau = T(1) / n.a;
        for (std::size_t b = 0; b < bsz; ++b) {
            const T* p = y.data.data() + b * k;
            const T* g = go.data() + b * k;
            T dot = 0;
            for (std::size_t i = 0; i < k; ++i) dot += g[i] * p[i];
            T* q = gx.data() + b * k;
            for (std::size_t i = 0; i < k; ++i) q[i] += (g[i] - dot) * p[i] * inv_tau;
        }
        break;
    }
    case OpKind::Reshape: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        std::vector<T>& gx = gslot(n.in[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
        break;
    }
    case OpKind::ConcatCols: {
        const std::vector<T>& go = out_grad();
        const Tensor<T>& a = slot_value(n.in[0]);
        const Tensor<T>& b = slot_value(n.in[1]);
        const std::size_t bsz = a.shape[0], wa = a.shape[1], wb = b.shape[1];
        if (needs(n.in[0])) {
            std::vector<T>& ga = gslot(n.in[0]);
            for (std::size_t r = 0; r < bsz; ++r)
                for (std::size_t i = 0; i < wa; ++i) ga[r * wa + i] += go[r * (wa + wb) + i];
        }
        if (needs(n.in[1])) {
            std::vector<T>& gb = gslot(n.in[1]);
            for (std::size_t r = 0; r < bsz; ++r)
                for (std::size_t i = 0; i < wb; ++i) gb[r * wb + i] += go[r * (wa + wb) + wa + i];
        }
        break;
    }
    case OpKind::Add: {
        const std::vector<T>& go = out_grad();
        for (int side = 0; side < 2; ++side) {
            if (!needs(n.in[side])) continue;
            std::vector<T>& g = gslot(n.in[side]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
        }
        break;
    }
    case OpKind::Sub: {
        const std::vector<T>& go = out_grad();
        if (needs(n.in[0])) {
            std::vector<T>& g = gslot(n.in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
        }
        if (needs(n.in[1])) {
            std::vector<T>& g = gslot(n.in[1]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
        }
        break;
    }
    case OpKind::Mul: {
        const std::vector<T>& go = out_grad();
        const Tensor<T>& a = slot_value(n.in[0]);
        const Tensor<T>& b = slot_value(n.in[1]);
        if (needs(n.in[0])) {
            std::vector<T>& g = gslot(n.in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * b.data[i];
        }
        if (needs(n.in[1])) {
            std::vector<T>& g = gslot(n.in[1]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * a.data[i];
        }
        break;
    }
    case OpKind::Scale: {
        if (!needs(n.in[0])) break;
        const std::vector<T>& go = out_grad();
        std::vector<T>& g = gslot(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.a * go[i];
        break;
    }
    case OpKind::Sum: {
        if (!needs(n.in[0])) break;
        const T g0 = out_grad()[0];
        std::vector<T>& g = gslot(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0;
        break;
    }
    case OpKind::L2Norm: {
        if (!needs(n.in[0])) break;
        const T g0 = out_grad()[0];
        const Tensor<T>& x = slot_value(n.in[0]);
        const T norm = slot_value(out).data[0];
        if (norm == T(0)) break; // subgradient 0 at the origin
        std::vector<T>& g = gslot(n.in[0]);
        const T f = g0 / norm;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * x.data[i];
        break;
    }
    case OpKind::KdLoss: {
        // gradient flows into the student logits only
        if (!needs(n.in[1])) break;
        const T g0 = out_grad()[0];
        const Tensor<T>& t = slot_value(n.in[0]);
        const Tensor<T>& s = slot_value(n.in[1]);
        const std::size_t bsz = t.shape[0], k = t.shape[1];
        const T tau = n.a;
        std::vector<T>& gs = gslot(n.in[1]);
        std::vector<T> pt(k), ps(k);
        auto softmax_row = [&](const T* src, std::vector<T>& dst) {
            T mx = src[0];
            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, src[i]);
            T denom = 0;
            for (std::size_t i = 0; i < k; ++i) {
                dst[i] = std::exp((src[i] - mx) / tau);
                denom += dst[i];
            }
            for (std::size_t i = 0; i < k; ++i) dst[i] /= denom;
        };
        const T f = g0 * tau / static_cast<T>(bsz);
        for (std::size_t b = 0; b < bsz; ++b) {
            softmax_row(t.data.data() + b * k, pt);
            softmax_row(s.data.data() + b * k, ps);
            T* q = gs.data() + b * k;
            for (std::size_t i = 0; i < k; ++i) q[i] += f * (ps[i] - pt[i]);
        }
        break;
    }
    case OpKind::CrossEntropy: {
        if (!needs(n.in[0])) break;
        const T g0 = out_grad()[0];
        const Tensor<T>& x = slot_value(n.in[0]);
        const std::size_t bsz = x.shape[0], k = x.shape[1];
        std::vector<T>& gx = gslot(n.in[0]);
        const T f = g0 / static_cast<T>(bsz);
        std::vector<T> p(k);
        for (std::size_t b = 0; b < bsz; ++b) {
            const T* src = x.data.data() + b * k;
            T mx = src[0];
            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, src[i]);
            T denom = 0;
            for (std::size_t i = 0; i < k; ++i) {
                p[i] = std::exp(src[i] - mx);
                denom += p[i];
            }
            T* q = gx.data() + b * k;
            const std::size_t lbl = static_cast<std::size_t>(n.ictx[b]);
            for (std::size_t i = 0; i < k; ++i) q[i] += f * (p[i] / denom - (i == lbl ? T(1) : T(0)));
        }
        break;
    }
    case OpKind::TvLoss: {
        if (!needs(n.in[0])) break;
        const T g0 = out_grad()[0];
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const std::size_t bsz = x.shape[0], planes = x.shape[1], h = x.shape[2], w = x.shape[3];
        const T f = g0 * T(2) / static_cast<T>(bsz);
        for (std::size_t pl = 0; pl < bsz * planes; ++pl) {
            const T* p = x.data.data() + pl * h * w;
            T* q = gx.data() + pl * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx + 1 < w; ++xx) {
                    const T d = f * (p[y * w + xx + 1] - p[y * w + xx]);
                    q[y * w + xx + 1] += d;
                    q[y * w + xx] -= d;
                }
            }
            for (std::size_t y = 0; y + 1 < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const T d = f * (p[(y + 1) * w + xx] - p[y * w + xx]);
                    q[(y + 1) * w + xx] += d;
                    q[y * w + xx] -= d;
                }
            }
        }
        break;
    }
    case OpKind::L2ImageLoss: {
        if (!needs(n.in[0])) break;
        const T g0 = out_grad()[0];
        const Tensor<T>& x = slot_value(n.in[0]);
        std::vector<T>& gx = gslot(n.in[0]);
        const T f = g0 * T(2) / static_cast<T>(x.shape[0]);
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += f * x.data[i];
        break;
    }
    case OpKind::GaussianKl: {
        const T g0 = out_grad()[0];
        const Tensor<T>& mh = slot_value(n.in[0]);
        const Tensor<T>& vh = slot_value(n.in[1]);
        const Tensor<T>& m = slot_value(n.in[2]);
        const Tensor<T>& v = slot_value(n.in[3]);
        for (std::size_t i = 0; i < mh.numel(); ++i) {
            const T d = m.data[i] - mh.data[i];
            const T vi = v.data[i];
            if (needs(n.in[0])) gslot(n.in[0])[i] += g0 * (-d / vi);
            if (needs(n.in[1])) gslot(n.in[1])[i] += g0 * T(0.5) * (T(1) / vi - T(1) / vh.data[i]);
            if (needs(n.in[2])) gslot(n.in[2])[i] += g0 * (d / vi);
            if (needs(n.in[3])) gslot(n.in[3])[i] += g0 * T(0.5) * (T(1) / vi - (vh.data[i] + d * d) / (vi * vi));
        }
        break;
    }
    default:
        break;
    }
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

} // namespace gdfd
