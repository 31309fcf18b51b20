#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "gdfd/common.hpp"

namespace gdfd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. Gradient storage lives next to the data and is
// only allocated when requires_grad is set.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> values);

    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    void set_requires_grad(bool on);
    void zero_grad();
    bool all_finite() const;

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T value);
    static Tensor randn(Shape s, Rng& rng, T stddev = T(1));
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Handle into a Tape. Only meaningful for the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
    Leaf,
    Linear,
    Conv2d,
    ChannelMoments,
    BnNormalize,
    LeakyRelu,
    Tanh,
    Upsample2x,
    AvgPool2x2,
    GlobalAvgPool,
    SoftmaxTemp,
    Reshape,
    ConcatCols,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    L2Norm,
    KdLoss,
    CrossEntropy,
    TvLoss,
    L2ImageLoss,
    GaussianKl,
};

// Reverse-mode tape. Each op runs its forward pass eagerly when recorded;
// backward() walks the recorded nodes once, in reverse, accumulating into
// the grad buffers of external tensors that asked for gradients.
template <typename T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Register an external tensor. The tensor must outlive the tape.
    Var leaf(Tensor<T>* external);
    // Copy a value onto the tape; never receives a gradient.
    Var constant(Tensor<T> value);
    Var constant_scalar(T value);

    Var linear(Var input, Var weight, Var bias);
    Var conv2d(Var input, Var kernel, Var bias, int stride, int padding);
    std::pair<Var, Var> channel_moments(Var input);
    Var bn_normalize(Var input, Var mean, Var var, Var gamma, Var beta, T eps);
    Var leaky_relu(Var input, T alpha);
    Var tanh_op(Var input);
    Var upsample2x(Var input);
    Var avgpool2x2(Var input);
    Var global_avg_pool(Var input);
    Var softmax_temp(Var logits, T temperature);
    Var reshape(Var input, Shape new_shape);
    Var concat_cols(Var left, Var right);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, T factor);
    Var sum(Var a);
    Var l2_norm(Var a);

    Var kd_loss(Var teacher_logits, Var student_logits, T temperature);
    Var cross_entropy(Var logits, const std::vector<int>& labels);
    Var tv_loss(Var images);
    Var l2_image_loss(Var images);
    Var gaussian_kl(Var mean_hat, Var var_hat, Var mean, Var var);

    void backward(Var scalar_output);

    const Tensor<T>& value(Var v) const;
    // Gradient accumulated at v by the last backward(); empty if none flowed.
    const std::vector<T>& grad(Var v) const;

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::array<int, 5> in{-1, -1, -1, -1, -1};
        int out = -1;
        int out2 = -1;
        T a = T(0);
        T b = T(0);
        std::vector<int> ictx;
        bool needs_grad = false;
    };
    // A slot holds one tensor value: either a view of an external tensor or
    // an owned intermediate. gbuf is its gradient accumulator during backward.
    struct Slot {
        Tensor<T>* external = nullptr;
        Tensor<T> owned;
        std::vector<T> gbuf;
        int node = -1;
        bool needs_grad = false;
    };

    Tensor<T>& slot_value(int id) {
        Slot& s = slots_[static_cast<std::size_t>(id)];
        return s.external ? *s.external : s.owned;
    }
    const Tensor<T>& slot_value(int id) const {
        const Slot& s = slots_[static_cast<std::size_t>(id)];
        return s.external ? *s.external : s.owned;
    }

    int new_slot_for(Shape shape, int node_index, bool needs_grad);
    void check_var(Var v, const char* who) const;
    Var record(OpKind kind, std::initializer_list<Var> inputs, Shape out_shape, T a = T(0),
               T b = T(0), std::vector<int> ictx = {});
    std::vector<T>& grad_buf(int id);
    void forward_node(std::size_t ni);
    void backward_node(std::size_t ni);

    std::vector<Node> nodes_;
    std::deque<Slot> slots_;
    std::vector<T> empty_grad_;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

} // namespace gdfd
