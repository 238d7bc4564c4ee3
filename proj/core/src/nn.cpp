#include "sgm/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace sgm {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

void expect(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct ConvGeom {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t out_c, kh, kw;
  std::size_t out_h, out_w;
};

ConvGeom conv_geometry(const std::vector<std::size_t>& xs, const std::vector<std::size_t>& ks,
                       int stride, int pad) {
  expect(xs.size() == 4, "conv2d: input must be [B,C,H,W]");
  expect(ks.size() == 4, "conv2d: kernel must be [F,C,kh,kw]");
  expect(stride >= 1, "conv2d: stride must be >= 1");
  expect(pad >= 0, "conv2d: pad must be >= 0");
  expect(ks[1] == xs[1], "conv2d: kernel channels do not match input channels");
  const std::size_t padded_h = xs[2] + 2 * static_cast<std::size_t>(pad);
  const std::size_t padded_w = xs[3] + 2 * static_cast<std::size_t>(pad);
  expect(ks[2] >= 1 && ks[2] <= padded_h && ks[3] >= 1 && ks[3] <= padded_w,
         "conv2d: kernel larger than padded input");
  ConvGeom g;
  g.batch = xs[0];
  g.in_c = xs[1];
  g.in_h = xs[2];
  g.in_w = xs[3];
  g.out_c = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  g.out_h = (padded_h - ks[2]) / static_cast<std::size_t>(stride) + 1;
  g.out_w = (padded_w - ks[3]) / static_cast<std::size_t>(stride) + 1;
  return g;
}

// cols is [C*kh*kw, B*OH*OW] with column index (b*OH + oh)*OW + ow.
template <typename T>
void im2col(const TensorT<T>& x, const ConvGeom& g, int stride, int pad, TensorT<T>& cols) {
  const std::size_t k_rows = g.in_c * g.kh * g.kw;
  const std::size_t n_cols = g.batch * g.out_h * g.out_w;
  cols.shape = {k_rows, n_cols};
  if (cols.v.size() != k_rows * n_cols) cols.v.resize(k_rows * n_cols);
  // Without padding the gather below writes every slot, so a reused buffer
  // needs no clearing; padded layouts keep zeros in the out-of-bounds slots.
  if (pad > 0) std::fill(cols.v.begin(), cols.v.end(), T(0));
  const std::size_t span = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const std::size_t row = (c * g.kh + u) * g.kw + v;
        T* dst = cols.data() + row * n_cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* src = x.data() + (b * g.in_c + c) * g.in_h * g.in_w;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long h = static_cast<long>(oh) * stride + static_cast<long>(u) - pad;
            const bool h_ok = h >= 0 && h < static_cast<long>(g.in_h);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long w = static_cast<long>(ow) * stride + static_cast<long>(v) - pad;
              if (h_ok && w >= 0 && w < static_cast<long>(g.in_w)) {
                dst[b * span + oh * g.out_w + ow] = src[h * static_cast<long>(g.in_w) + w];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* dcols, const ConvGeom& g, int stride, int pad, TensorT<T>& dx) {
  const std::size_t n_cols = g.batch * g.out_h * g.out_w;
  const std::size_t span = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const std::size_t row = (c * g.kh + u) * g.kw + v;
        const T* src = dcols + row * n_cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* dst = dx.data() + (b * g.in_c + c) * g.in_h * g.in_w;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long h = static_cast<long>(oh) * stride + static_cast<long>(u) - pad;
            const bool h_ok = h >= 0 && h < static_cast<long>(g.in_h);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long w = static_cast<long>(ow) * stride + static_cast<long>(v) - pad;
              if (h_ok && w >= 0 && w < static_cast<long>(g.in_w)) {
                dst[h * static_cast<long>(g.in_w) + w] += src[b * span + oh * g.out_w + ow];
              }
            }
          }
        }
      }
    }
  }
}

// Reusable storage for the large per-call temporaries of the conv kernels.
// Every element is overwritten before it is read (GEMM destinations and full
// regroup copies), so reuse cannot change any computed value; it only avoids
// repeated multi-megabyte allocation and zero-initialization on the training
// hot path. One buffer set per thread keeps the kernels safe to call from
// parallel evaluation harnesses.
template <typename T>
T* conv_scratch(std::size_t which, std::size_t count) {
  static thread_local std::vector<T> buffers[3];
  std::vector<T>& buf = buffers[which];
  if (buf.size() < count) buf.resize(count);
  return buf.data();
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> linear_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                          T output_scale) {
  expect(x.shape.size() == 2, "linear: input must be [B,in]");
  expect(w.shape.size() == 2, "linear: weight must be [out,in]");
  expect(x.shape[1] == w.shape[1], "linear: input features " +
                                       std::to_string(x.shape.empty() ? 0 : x.shape[1]) +
                                       " do not match weight " + w.shape_string());
  expect(b.shape.size() == 1 && b.shape[0] == w.shape[0], "linear: bias must be [out]");
  const std::size_t batch = x.shape[0], in = x.shape[1], out = w.shape[0];
  TensorT<T> y({batch, out});
  MutMap<T>(y.data(), batch, out).noalias() =
      ConstMap<T>(x.data(), batch, in) * ConstMap<T>(w.data(), out, in).transpose();
  if (output_scale == T(1)) {
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t o = 0; o < out; ++o) y.v[i * out + o] += b.v[o];
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t o = 0; o < out; ++o)
        y.v[i * out + o] = y.v[i * out + o] * output_scale + b.v[o];
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy) {
  expect(x.shape.size() == 2 && w.shape.size() == 2 && dy.shape.size() == 2,
         "linear backward: rank mismatch");
  expect(dy.shape[0] == x.shape[0] && dy.shape[1] == w.shape[0] && x.shape[1] == w.shape[1],
         "linear backward: shape mismatch");
  const std::size_t batch = x.shape[0], in = x.shape[1], out = w.shape[0];
  LinearGrads<T> g;
  g.dx = TensorT<T>({batch, in});
  g.dw = TensorT<T>({out, in});
  g.db = TensorT<T>({out});
  MutMap<T>(g.dx.data(), batch, in).noalias() =
      ConstMap<T>(dy.data(), batch, out) * ConstMap<T>(w.data(), out, in);
  MutMap<T>(g.dw.data(), out, in).noalias() =
      ConstMap<T>(dy.data(), batch, out).transpose() * ConstMap<T>(x.data(), batch, in);
  for (std::size_t o = 0; o < out; ++o) {
    T acc = T(0);
    for (std::size_t i = 0; i < batch; ++i) acc += dy.v[i * out + o];
    g.db.v[o] = acc;
  }
  return g;
}

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b,
                          int stride, int pad, T output_scale, TensorT<T>* cols_out) {
  const ConvGeom g = conv_geometry(x.shape, k.shape, stride, pad);
  expect(b.shape.size() == 1 && b.shape[0] == g.out_c, "conv2d: bias must be [F]");
  TensorT<T> local_cols;
  TensorT<T>& cols = cols_out ? *cols_out : local_cols;
  im2col(x, g, stride, pad, cols);

  const std::size_t k_rows = g.in_c * g.kh * g.kw;
  const std::size_t n_cols = g.batch * g.out_h * g.out_w;
  T* prod = conv_scratch<T>(0, g.out_c * n_cols);
  MutMap<T>(prod, g.out_c, n_cols).noalias() =
      ConstMap<T>(k.data(), g.out_c, k_rows) * ConstMap<T>(cols.data(), k_rows, n_cols);

  TensorT<T> y({g.batch, g.out_c, g.out_h, g.out_w});
  const std::size_t span = g.out_h * g.out_w;
  for (std::size_t b_i = 0; b_i < g.batch; ++b_i) {
    for (std::size_t f = 0; f < g.out_c; ++f) {
      const T* src = prod + f * n_cols + b_i * span;
      T* dst = y.data() + (b_i * g.out_c + f) * span;
      const T bias = b.v[f];
      if (output_scale == T(1)) {
        for (std::size_t s = 0; s < span; ++s) dst[s] = src[s] + bias;
      } else {
        for (std::size_t s = 0; s < span; ++s) dst[s] = src[s] * output_scale + bias;
      }
    }
  }
  return y;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& dy,
                               int stride, int pad, const TensorT<T>* cached_cols) {
  const ConvGeom g = conv_geometry(x.shape, k.shape, stride, pad);
  expect(dy.shape.size() == 4 && dy.shape[0] == g.batch && dy.shape[1] == g.out_c &&
             dy.shape[2] == g.out_h && dy.shape[3] == g.out_w,
         "conv2d backward: dy shape mismatch");
  const std::size_t k_rows = g.in_c * g.kh * g.kw;
  const std::size_t n_cols = g.batch * g.out_h * g.out_w;
  const std::size_t span = g.out_h * g.out_w;

  // Regroup dy [B,F,OH,OW] as [F, B*OH*OW] to match the im2col layout.
  T* dy2 = conv_scratch<T>(1, g.out_c * n_cols);
  for (std::size_t b_i = 0; b_i < g.batch; ++b_i) {
    for (std::size_t f = 0; f < g.out_c; ++f) {
      const T* src = dy.data() + (b_i * g.out_c + f) * span;
      T* dst = dy2 + f * n_cols + b_i * span;
      for (std::size_t s = 0; s < span; ++s) dst[s] = src[s];
    }
  }

  TensorT<T> local_cols;
  const TensorT<T>* cols = cached_cols;
  if (!cols || cols->empty()) {
    im2col(x, g, stride, pad, local_cols);
    cols = &local_cols;
  }
  expect(cols->shape.size() == 2 && cols->shape[0] == k_rows && cols->shape[1] == n_cols,
         "conv2d backward: cached im2col has wrong shape");

  Conv2dGrads<T> grads;
  grads.dk = TensorT<T>({g.out_c, g.in_c, g.kh, g.kw});
  grads.db = TensorT<T>({g.out_c});
  grads.dx = TensorT<T>(x.shape);

  MutMap<T>(grads.dk.data(), g.out_c, k_rows).noalias() =
      ConstMap<T>(dy2, g.out_c, n_cols) * ConstMap<T>(cols->data(), k_rows, n_cols).transpose();

  for (std::size_t f = 0; f < g.out_c; ++f) {
    T acc = T(0);
    const T* src = dy2 + f * n_cols;
    for (std::size_t c = 0; c < n_cols; ++c) acc += src[c];
    grads.db.v[f] = acc;
  }

  T* dcols = conv_scratch<T>(2, k_rows * n_cols);
  MutMap<T>(dcols, k_rows, n_cols).noalias() =
      ConstMap<T>(k.data(), g.out_c, k_rows).transpose() * ConstMap<T>(dy2, g.out_c, n_cols);
  col2im_add(dcols, g, stride, pad, grads.dx);
  return grads;
}

template <typename T>
MaxPoolResult<T> maxpool_forward(const TensorT<T>& x, int window, int stride) {
  expect(x.shape.size() == 4, "maxpool: input must be [B,C,H,W]");
  expect(window >= 1 && stride >= 1, "maxpool: window and stride must be >= 1");
  const std::size_t batch = x.shape[0], chans = x.shape[1], h = x.shape[2], w = x.shape[3];
  expect(static_cast<std::size_t>(window) <= h && static_cast<std::size_t>(window) <= w,
         "maxpool: window larger than input");
  expect(x.size() <= std::numeric_limits<std::uint32_t>::max(), "maxpool: tensor too large");
  const std::size_t out_h = (h - window) / static_cast<std::size_t>(stride) + 1;
  const std::size_t out_w = (w - window) / static_cast<std::size_t>(stride) + 1;

  MaxPoolResult<T> res;
  res.y = TensorT<T>({batch, chans, out_h, out_w});
  res.argmax.resize(batch * chans * out_h * out_w);
  std::size_t out_i = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < chans; ++c) {
      const std::size_t plane = (b * chans + c) * h * w;
      for (std::size_t oh = 0; oh < out_h; ++oh) {
        for (std::size_t ow = 0; ow < out_w; ++ow) {
          const std::size_t h0 = oh * stride, w0 = ow * stride;
          std::size_t best = plane + h0 * w + w0;
          T best_v = x.v[best];
          for (int u = 0; u < window; ++u) {
            for (int v = 0; v < window; ++v) {
              const std::size_t idx = plane + (h0 + u) * w + (w0 + v);
              if (x.v[idx] > best_v) {  // strict: first max in scan order wins
                best_v = x.v[idx];
                best = idx;
              }
            }
          }
          res.y.v[out_i] = best_v;
          res.argmax[out_i] = static_cast<std::uint32_t>(best);
          ++out_i;
        }
      }
    }
  }
  return res;
}

template <typename T>
TensorT<T> maxpool_backward(const std::vector<std::size_t>& input_shape,
                            std::span<const std::uint32_t> argmax, const TensorT<T>& dy) {
  expect(argmax.size() == dy.size(), "maxpool backward: argmax/dy size mismatch");
  TensorT<T> dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    dx.v[argmax[i]] += dy.v[i];
  }
  return dx;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.v[i] = x.v[i] > T(0) ? x.v[i] : T(0);
  return y;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& dy) {
  expect(x.same_shape(dy), "relu backward: shape mismatch");
  TensorT<T> dx(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) dx.v[i] = x.v[i] > T(0) ? dy.v[i] : T(0);
  return dx;
}

template <typename T>
SoftmaxCEResult<T> softmax_cross_entropy(const TensorT<T>& logits, std::span<const int> labels) {
  expect(logits.shape.size() == 2, "softmax_ce: logits must be [B,K]");
  const std::size_t batch = logits.shape[0], classes = logits.shape[1];
  expect(labels.size() == batch, "softmax_ce: label count does not match batch");
  SoftmaxCEResult<T> res;
  res.grad_logits = TensorT<T>({batch, classes});
  double loss_sum = 0.0;
  const T inv_batch = T(1) / static_cast<T>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    expect(label >= 0 && static_cast<std::size_t>(label) < classes,
           "softmax_ce: label " + std::to_string(label) + " outside [0, " +
               std::to_string(classes) + ")");
    const T* row = logits.data() + b * classes;
    T max_v = row[0];
    for (std::size_t k = 1; k < classes; ++k)
      if (row[k] > max_v) max_v = row[k];
    T sum = T(0);
    T* grow = res.grad_logits.data() + b * classes;
    for (std::size_t k = 0; k < classes; ++k) {
      grow[k] = std::exp(row[k] - max_v);
      sum += grow[k];
    }
    loss_sum += static_cast<double>(std::log(sum)) + static_cast<double>(max_v) -
                static_cast<double>(row[label]);
    const T inv_sum = T(1) / sum;
    for (std::size_t k = 0; k < classes; ++k) {
      grow[k] = grow[k] * inv_sum * inv_batch;
    }
    grow[label] -= inv_batch;
  }
  res.loss = loss_sum / static_cast<double>(batch);
  return res;
}

template TensorT<double> linear_forward(const TensorT<double>&, const TensorT<double>&,
                                        const TensorT<double>&, double);
template TensorT<float> linear_forward(const TensorT<float>&, const TensorT<float>&,
                                       const TensorT<float>&, float);
template LinearGrads<double> linear_backward(const TensorT<double>&, const TensorT<double>&,
                                             const TensorT<double>&);
template LinearGrads<float> linear_backward(const TensorT<float>&, const TensorT<float>&,
                                            const TensorT<float>&);
template TensorT<double> conv2d_forward(const TensorT<double>&, const TensorT<double>&,
                                        const TensorT<double>&, int, int, double,
                                        TensorT<double>*);
template TensorT<float> conv2d_forward(const TensorT<float>&, const TensorT<float>&,
                                       const TensorT<float>&, int, int, float, TensorT<float>*);
template Conv2dGrads<double> conv2d_backward(const TensorT<double>&, const TensorT<double>&,
                                             const TensorT<double>&, int, int,
                                             const TensorT<double>*);
template Conv2dGrads<float> conv2d_backward(const TensorT<float>&, const TensorT<float>&,
                                            const TensorT<float>&, int, int,
                                            const TensorT<float>*);
template MaxPoolResult<double> maxpool_forward(const TensorT<double>&, int, int);
template MaxPoolResult<float> maxpool_forward(const TensorT<float>&, int, int);
template TensorT<double> maxpool_backward(const std::vector<std::size_t>&,
                                          std::span<const std::uint32_t>,
                                          const TensorT<double>&);
template TensorT<float> maxpool_backward(const std::vector<std::size_t>&,
                                         std::span<const std::uint32_t>, const TensorT<float>&);
template TensorT<double> relu(const TensorT<double>&);
template TensorT<float> relu(const TensorT<float>&);
template TensorT<double> relu_backward(const TensorT<double>&, const TensorT<double>&);
template TensorT<float> relu_backward(const TensorT<float>&, const TensorT<float>&);
template SoftmaxCEResult<double> softmax_cross_entropy(const TensorT<double>&,
                                                       std::span<const int>);
template SoftmaxCEResult<float> softmax_cross_entropy(const TensorT<float>&,
                                                      std::span<const int>);

// ---------------------------------------------------------------------------
// Layer graph
// ---------------------------------------------------------------------------

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kCenter: return "center";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kLinear: return "linear";
  }
  return "unknown";
}

std::vector<const Layer*> Network::trainable_layers() const {
  std::vector<const Layer*> out;
  for (const Layer& l : layers)
    if (l.trainable()) out.push_back(&l);
  return out;
}

std::vector<Layer*> Network::trainable_layers() {
  std::vector<Layer*> out;
  for (Layer& l : layers)
    if (l.trainable()) out.push_back(&l);
  return out;
}

std::vector<Tensor> Network::trainable_weight_copies() const {
  std::vector<Tensor> out;
  for (const Layer& l : layers)
    if (l.trainable()) out.push_back(l.weight);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers)
    if (l.trainable()) n += l.weight.size() + l.bias.size();
  return n;
}

Tensor forward(const Network& net, const Tensor& input, ForwardTrace* trace,
               std::span<const double> layer_scales) {
  expect(layer_scales.empty() || layer_scales.size() == net.layers.size(),
         "forward: layer_scales must be empty or one per layer");
  if (trace) {
    // resize (not assign) keeps previously grown buffers alive so a trace
    // reused across batches stops allocating; every entry a given network
    // reads is rewritten below before backward can see it.
    trace->inputs.resize(net.layers.size());
    trace->pool_argmax.resize(net.layers.size());
    trace->conv_cols.resize(net.layers.size());
  }
  Tensor cur = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& layer = net.layers[i];
    const double scale = layer_scales.empty() ? 1.0 : layer_scales[i];
    if (trace) trace->inputs[i] = cur;
    switch (layer.kind) {
      case LayerKind::kCenter: {
        expect(layer.bias.size() == 1, "center: offset missing");
        const double offset = layer.bias.v[0];
        Tensor out(cur.shape);
        for (std::size_t j = 0; j < cur.size(); ++j) out.v[j] = cur.v[j] + offset;
        cur = std::move(out);
        break;
      }
      case LayerKind::kConv2d:
        cur = conv2d_forward(cur, layer.weight, layer.bias, layer.stride, layer.pad, scale,
                             trace ? &trace->conv_cols[i] : nullptr);
        break;
      case LayerKind::kMaxPool: {
        MaxPoolResult<double> res = maxpool_forward(cur, layer.window, layer.stride);
        if (trace) trace->pool_argmax[i] = std::move(res.argmax);
        cur = std::move(res.y);
        break;
      }
      case LayerKind::kRelu:
        cur = relu(cur);
        break;
      case LayerKind::kFlatten: {
        expect(cur.shape.size() >= 2, "flatten: input must have a batch dimension");
        std::size_t rest = 1;
        for (std::size_t d = 1; d < cur.shape.size(); ++d) rest *= cur.shape[d];
        cur.shape = {cur.shape[0], rest};
        break;
      }
      case LayerKind::kLinear:
        cur = linear_forward(cur, layer.weight, layer.bias, scale);
        break;
    }
  }
  if (trace) trace->logits = cur;
  return cur;
}

ParamGrads backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_logits) {
  expect(trace.inputs.size() == net.layers.size(),
         "backward: trace does not match network (run forward with a trace first)");
  ParamGrads grads;
  grads.dweight.resize(net.layers.size());
  grads.dbias.resize(net.layers.size());
  Tensor d = grad_logits;
  for (std::size_t idx = net.layers.size(); idx-- > 0;) {
    const Layer& layer = net.layers[idx];
    const Tensor& x = trace.inputs[idx];
    switch (layer.kind) {
      case LayerKind::kCenter:
        break;  // identity with respect to the input
      case LayerKind::kConv2d: {
        const Tensor* cols = trace.conv_cols[idx].empty() ? nullptr : &trace.conv_cols[idx];
        Conv2dGrads<double> g = conv2d_backward(x, layer.weight, d, layer.stride, layer.pad, cols);
        grads.dweight[idx] = std::move(g.dk);
        grads.dbias[idx] = std::move(g.db);
        d = std::move(g.dx);
        break;
      }
      case LayerKind::kMaxPool:
        d = maxpool_backward(x.shape, trace.pool_argmax[idx], d);
        break;
      case LayerKind::kRelu:
        d = relu_backward(x, d);
        break;
      case LayerKind::kFlatten:
        expect(d.size() == x.size(), "backward: flatten gradient size mismatch");
        d.shape = x.shape;
        break;
      case LayerKind::kLinear: {
        LinearGrads<double> g = linear_backward(x, layer.weight, d);
        grads.dweight[idx] = std::move(g.dw);
        grads.dbias[idx] = std::move(g.db);
        d = std::move(g.dx);
        break;
      }
    }
  }
  return grads;
}

void sgd_step(Network& net, const ParamGrads& task, const ParamGrads* reg, double eta) {
  expect(task.dweight.size() == net.layers.size() && task.dbias.size() == net.layers.size(),
         "sgd: task gradients do not match network");
  if (reg) {
    expect(reg->dweight.size() == net.layers.size(), "sgd: reg gradients do not match network");
  }
  if (!std::isfinite(eta)) throw std::invalid_argument("sgd: non-finite learning rate");
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& layer = net.layers[i];
    if (!layer.trainable()) continue;
    const Tensor& dw = task.dweight[i];
    const Tensor& db = task.dbias[i];
    expect(dw.same_shape(layer.weight), "sgd: weight gradient shape mismatch at " + layer.name);
    expect(db.same_shape(layer.bias), "sgd: bias gradient shape mismatch at " + layer.name);
    const Tensor* rw = nullptr;
    if (reg && !reg->dweight[i].empty()) {
      expect(reg->dweight[i].same_shape(layer.weight),
             "sgd: reg gradient shape mismatch at " + layer.name);
      rw = &reg->dweight[i];
    }
    for (std::size_t j = 0; j < layer.weight.size(); ++j) {
      const double g = rw ? dw.v[j] + rw->v[j] : dw.v[j];
      if (!std::isfinite(g)) {
        throw std::invalid_argument("sgd: non-finite gradient at " + layer.name);
      }
      layer.weight.v[j] -= eta * g;
    }
    for (std::size_t j = 0; j < layer.bias.size(); ++j) {
      if (!std::isfinite(db.v[j])) {
        throw std::invalid_argument("sgd: non-finite bias gradient at " + layer.name);
      }
      layer.bias.v[j] -= eta * db.v[j];
    }
  }
}

BatchResult batch_loss_and_grads(const Network& net, const Tensor& images,
                                 std::span<const int> labels, ForwardTrace* scratch) {
  ForwardTrace local;
  ForwardTrace& trace = scratch ? *scratch : local;
  forward(net, images, &trace);
  SoftmaxCEResult<double> ce = softmax_cross_entropy(trace.logits, labels);
  BatchResult res;
  res.loss = ce.loss;
  res.grads = backward(net, trace, ce.grad_logits);
  return res;
}

namespace {

double canonical_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

void init_uniform(Tensor& w, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.size(); ++i) {
    w.v[i] = (2.0 * canonical_unit(rng) - 1.0) * limit;
  }
}

Layer conv_layer(std::string name, int id, std::size_t in_c, std::size_t out_c, std::size_t k,
                 std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::kConv2d;
  l.name = std::move(name);
  l.layer_id = id;
  l.weight = Tensor({out_c, in_c, k, k});
  l.bias = Tensor({out_c});
  init_uniform(l.weight, in_c * k * k, rng);
  return l;
}

Layer linear_layer(std::string name, int id, std::size_t in, std::size_t out,
                   std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::kLinear;
  l.name = std::move(name);
  l.layer_id = id;
  l.weight = Tensor({out, in});
  l.bias = Tensor({out});
  init_uniform(l.weight, in, rng);
  return l;
}

Layer plain_layer(LayerKind kind, std::string name) {
  Layer l;
  l.kind = kind;
  l.name = std::move(name);
  return l;
}

}  // namespace

Network make_lenet5(std::uint64_t seed, double input_offset) {
  std::mt19937_64 rng(seed);
  Network net;
  Layer center = plain_layer(LayerKind::kCenter, "center");
  center.bias = Tensor({1}, {input_offset});
  net.layers.push_back(std::move(center));
  net.layers.push_back(conv_layer("conv1", 1, 1, 20, 5, rng));
  net.layers.push_back(plain_layer(LayerKind::kRelu, "relu1"));
  Layer pool1 = plain_layer(LayerKind::kMaxPool, "pool1");
  pool1.window = 2;
  pool1.stride = 2;
  net.layers.push_back(std::move(pool1));
  net.layers.push_back(conv_layer("conv2", 2, 20, 50, 5, rng));
  net.layers.push_back(plain_layer(LayerKind::kRelu, "relu2"));
  Layer pool2 = plain_layer(LayerKind::kMaxPool, "pool2");
  pool2.window = 2;
  pool2.stride = 2;
  net.layers.push_back(std::move(pool2));
  net.layers.push_back(plain_layer(LayerKind::kFlatten, "flatten"));
  net.layers.push_back(linear_layer("fc1", 3, 800, 500, rng));
  net.layers.push_back(plain_layer(LayerKind::kRelu, "relu3"));
  net.layers.push_back(linear_layer("fc2", 4, 500, 10, rng));
  return net;
}

}  // namespace sgm
