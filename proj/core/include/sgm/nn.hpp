#pragma once

// Dense forward/backward kernels and the layer graph for LeNet-class CNNs.
// All kernels are deterministic: accumulation order is fixed, so identical
// inputs give bit-identical outputs run to run.
//
// Conv and linear layers accept an optional post-accumulation output scale,
// applied between the weight accumulation and the bias add. Scaling by an
// exact power of two there commutes with every rounding in the accumulation,
// which is what makes the integer-mantissa forward pass in export.hpp
// bit-identical to the float path.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/tensor.hpp"

namespace sgm {

// ---------------------------------------------------------------------------
// Kernels (instantiated for double and float in nn.cpp)
// ---------------------------------------------------------------------------

// x [B,in], w [out,in], b [out] -> y [B,out] = (x w^T) * scale + b
template <typename T>
TensorT<T> linear_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                          T output_scale = T(1));

template <typename T>
struct LinearGrads {
  TensorT<T> dx, dw, db;
};

template <typename T>
LinearGrads<T> linear_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy);

// x [B,C,H,W], k [F,C,kh,kw], b [F] -> y [B,F,OH,OW]; cross-correlation with
// OH = floor((H + 2 pad - kh) / stride) + 1. cols_out, when given, receives
// the im2col matrix for reuse in the backward pass.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b,
                          int stride, int pad, T output_scale = T(1),
                          TensorT<T>* cols_out = nullptr);

template <typename T>
struct Conv2dGrads {
  TensorT<T> dx, dk, db;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& dy,
                               int stride, int pad, const TensorT<T>* cached_cols = nullptr);

template <typename T>
struct MaxPoolResult {
  TensorT<T> y;
  std::vector<std::uint32_t> argmax;  // flat index into x per output element
};

// Window maxima; ties resolve to the first element in row-major scan order.
template <typename T>
MaxPoolResult<T> maxpool_forward(const TensorT<T>& x, int window, int stride);

template <typename T>
TensorT<T> maxpool_backward(const std::vector<std::size_t>& input_shape,
                            std::span<const std::uint32_t> argmax, const TensorT<T>& dy);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);

// dy masked by x > 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& dy);

template <typename T>
struct SoftmaxCEResult {
  double loss = 0.0;          // mean over the batch
  TensorT<T> grad_logits;     // (softmax - onehot) / B
};

// Mean negative log softmax likelihood, max-subtracted for stability.
template <typename T>
SoftmaxCEResult<T> softmax_cross_entropy(const TensorT<T>& logits, std::span<const int> labels);

extern template TensorT<double> linear_forward(const TensorT<double>&, const TensorT<double>&,
                                               const TensorT<double>&, double);
extern template TensorT<float> linear_forward(const TensorT<float>&, const TensorT<float>&,
                                              const TensorT<float>&, float);
extern template LinearGrads<double> linear_backward(const TensorT<double>&, const TensorT<double>&,
                                                    const TensorT<double>&);
extern template LinearGrads<float> linear_backward(const TensorT<float>&, const TensorT<float>&,
                                                   const TensorT<float>&);
extern template TensorT<double> conv2d_forward(const TensorT<double>&, const TensorT<double>&,
                                               const TensorT<double>&, int, int, double,
                                               TensorT<double>*);
extern template TensorT<float> conv2d_forward(const TensorT<float>&, const TensorT<float>&,
                                              const TensorT<float>&, int, int, float,
                                              TensorT<float>*);
extern template Conv2dGrads<double> conv2d_backward(const TensorT<double>&, const TensorT<double>&,
                                                    const TensorT<double>&, int, int,
                                                    const TensorT<double>*);
extern template Conv2dGrads<float> conv2d_backward(const TensorT<float>&, const TensorT<float>&,
                                                   const TensorT<float>&, int, int,
                                                   const TensorT<float>*);
extern template MaxPoolResult<double> maxpool_forward(const TensorT<double>&, int, int);
extern template MaxPoolResult<float> maxpool_forward(const TensorT<float>&, int, int);
extern template TensorT<double> maxpool_backward(const std::vector<std::size_t>&,
                                                 std::span<const std::uint32_t>,
                                                 const TensorT<double>&);
extern template TensorT<float> maxpool_backward(const std::vector<std::size_t>&,
                                                std::span<const std::uint32_t>,
                                                const TensorT<float>&);
extern template TensorT<double> relu(const TensorT<double>&);
extern template TensorT<float> relu(const TensorT<float>&);
extern template TensorT<double> relu_backward(const TensorT<double>&, const TensorT<double>&);
extern template TensorT<float> relu_backward(const TensorT<float>&, const TensorT<float>&);
extern template SoftmaxCEResult<double> softmax_cross_entropy(const TensorT<double>&,
                                                              std::span<const int>);
extern template SoftmaxCEResult<float> softmax_cross_entropy(const TensorT<float>&,
                                                             std::span<const int>);

// ---------------------------------------------------------------------------
// Layer graph (reference precision only)
// ---------------------------------------------------------------------------

enum class LayerKind : std::uint8_t {
  kCenter = 1,   // adds a fixed scalar offset to every element (input centering)
  kConv2d = 2,
  kMaxPool = 3,
  kRelu = 4,
  kFlatten = 5,
  kLinear = 6,
};

const char* layer_kind_name(LayerKind kind);

struct Layer {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  int layer_id = 0;  // 1-based over parameterized layers, 0 elsewhere

  int stride = 1;
  int pad = 0;
  int window = 0;    // maxpool only

  Tensor weight;     // conv [F,C,kh,kw]; linear [out,in]; empty otherwise
  Tensor bias;       // conv/linear [out]; kCenter holds the offset in bias[0]

  bool trainable() const { return kind == LayerKind::kConv2d || kind == LayerKind::kLinear; }
};

struct Network {
  std::vector<Layer> layers;

  // Parameterized layers in graph order (== layer_id order).
  std::vector<const Layer*> trainable_layers() const;
  std::vector<Layer*> trainable_layers();
  std::vector<Tensor> trainable_weight_copies() const;
  std::size_t parameter_count() const;
};

struct ForwardTrace {
  // inputs[i] is the input to layers[i]; logits is the final output.
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // per layer, empty unless maxpool
  std::vector<Tensor> conv_cols;                        // per layer, empty unless conv
  Tensor logits;
};

// layer_scales, when non-empty, must be parallel to net.layers and gives the
// post-accumulation output scale per layer (1.0 for layers without one).
Tensor forward(const Network& net, const Tensor& input, ForwardTrace* trace = nullptr,
               std::span<const double> layer_scales = {});

struct ParamGrads {
  std::vector<Tensor> dweight;  // parallel to net.layers; empty where no params
  std::vector<Tensor> dbias;
};

ParamGrads backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_logits);

// w <- w - eta * (task + reg); biases never receive a regularization term.
// reg may be null (regularizer disabled) and its dbias entries stay empty.
void sgd_step(Network& net, const ParamGrads& task, const ParamGrads* reg, double eta);

struct BatchResult {
  double loss = 0.0;
  ParamGrads grads;
};

// forward + softmax cross-entropy + backward in one call. Passing the same
// scratch trace across calls reuses its buffers instead of reallocating; the
// computed values are identical either way.
BatchResult batch_loss_and_grads(const Network& net, const Tensor& images,
                                 std::span<const int> labels, ForwardTrace* scratch = nullptr);

// conv 20x5x5 - pool 2 - conv 50x5x5 - pool 2 - fc 500 - fc 10 with ReLU
// after each conv and the first fc. input_offset (usually minus the training
// pixel mean) is baked into a leading centering layer. Weights are
// fan-in-scaled uniform, +-sqrt(6/fan_in); biases start at zero.
Network make_lenet5(std::uint64_t seed, double input_offset);

}  // namespace sgm
