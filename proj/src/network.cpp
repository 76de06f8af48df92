#include "fens/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace fens {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

using std::ptrdiff_t;

ptrdiff_t ceil_div(ptrdiff_t a, ptrdiff_t b) { return (a + b - 1) / b; }

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, out_h, out_w;
  std::size_t kh, kw;
  std::size_t stride;
  std::size_t pad_top, pad_left;
};

std::size_t same_pad(std::size_t in, std::size_t out, std::size_t k, std::size_t s) {
  const ptrdiff_t total = static_cast<ptrdiff_t>((out - 1) * s + k) - static_cast<ptrdiff_t>(in);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

ConvGeometry conv_geometry(const Conv2D& conv, const Shape& in) {
  if (in.size() != 3) throw std::invalid_argument("Conv2D expects (C,H,W) input, got " + shape_to_string(in));
  const auto& ks = conv.kernel.shape();
  if (ks[1] != in[0]) {
    throw std::invalid_argument("Conv2D kernel expects " + std::to_string(ks[1]) + " input channels, got " +
                                std::to_string(in[0]));
  }
  ConvGeometry g{};
  g.in_c = in[0];
  g.in_h = in[1];
  g.in_w = in[2];
  g.out_c = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  g.stride = conv.stride;
  if (conv.padding == Padding::Valid) {
    if (g.in_h < g.kh || g.in_w < g.kw) {
      throw std::invalid_argument("Conv2D valid padding: input " + shape_to_string(in) + " smaller than kernel");
    }
    g.out_h = (g.in_h - g.kh) / g.stride + 1;
    g.out_w = (g.in_w - g.kw) / g.stride + 1;
    g.pad_top = g.pad_left = 0;
  } else {
    g.out_h = static_cast<std::size_t>(ceil_div(static_cast<ptrdiff_t>(g.in_h), static_cast<ptrdiff_t>(g.stride)));
    g.out_w = static_cast<std::size_t>(ceil_div(static_cast<ptrdiff_t>(g.in_w), static_cast<ptrdiff_t>(g.stride)));
    g.pad_top = same_pad(g.in_h, g.out_h, g.kh, g.stride);
    g.pad_left = same_pad(g.in_w, g.out_w, g.kw, g.stride);
  }
  return g;
}

// Output indices o in [lo, hi) for which o*stride + k - pad lands inside [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t in, std::size_t out,
                                                std::size_t stride) {
  const auto s = static_cast<ptrdiff_t>(stride);
  const ptrdiff_t shift = static_cast<ptrdiff_t>(pad) - static_cast<ptrdiff_t>(k);
  const ptrdiff_t lo = shift > 0 ? ceil_div(shift, s) : 0;
  const ptrdiff_t hi_num = static_cast<ptrdiff_t>(in) + shift;
  const ptrdiff_t hi = hi_num > 0 ? std::min<ptrdiff_t>(static_cast<ptrdiff_t>(out), ceil_div(hi_num, s)) : 0;
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// y += conv(x) (no bias)
void conv_apply(const ConvGeometry& g, std::span<const double> kernel, std::span<const double> x,
                std::span<double> y) {
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [oh_lo, oh_hi] = valid_range(a, g.pad_top, g.in_h, g.out_h, g.stride);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const auto [ow_lo, ow_hi] = valid_range(b, g.pad_left, g.in_w, g.out_w, g.stride);
          const double w = kernel[((oc * g.in_c + ic) * g.kh + a) * g.kw + b];
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * g.stride + a - g.pad_top;
            double* yrow = &y[(oc * g.out_h + oh) * g.out_w];
            const double* xrow = &x[(ic * g.in_h + ih) * g.in_w];
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              yrow[ow] += w * xrow[ow * g.stride + b - g.pad_left];
            }
          }
        }
      }
    }
  }
}

// dx += conv^T(dy)
void conv_adjoint(const ConvGeometry& g, std::span<const double> kernel, std::span<const double> dy,
                  std::span<double> dx) {
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [oh_lo, oh_hi] = valid_range(a, g.pad_top, g.in_h, g.out_h, g.stride);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const auto [ow_lo, ow_hi] = valid_range(b, g.pad_left, g.in_w, g.out_w, g.stride);
          const double w = kernel[((oc * g.in_c + ic) * g.kh + a) * g.kw + b];
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * g.stride + a - g.pad_top;
            const double* dyrow = &dy[(oc * g.out_h + oh) * g.out_w];
            double* dxrow = &dx[(ic * g.in_h + ih) * g.in_w];
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              dxrow[ow * g.stride + b - g.pad_left] += w * dyrow[ow];
            }
          }
        }
      }
    }
  }
}

// dkernel += dy (x) x
void conv_kernel_grad(const ConvGeometry& g, std::span<const double> x, std::span<const double> dy,
                      std::span<double> dkernel) {
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [oh_lo, oh_hi] = valid_range(a, g.pad_top, g.in_h, g.out_h, g.stride);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const auto [ow_lo, ow_hi] = valid_range(b, g.pad_left, g.in_w, g.out_w, g.stride);
          double acc = 0.0;
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * g.stride + a - g.pad_top;
            const double* dyrow = &dy[(oc * g.out_h + oh) * g.out_w];
            const double* xrow = &x[(ic * g.in_h + ih) * g.in_w];
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              acc += dyrow[ow] * xrow[ow * g.stride + b - g.pad_left];
            }
          }
          dkernel[((oc * g.in_c + ic) * g.kh + a) * g.kw + b] += acc;
        }
      }
    }
  }
}

struct PoolGeometry {
  std::size_t c, in_h, in_w, out_h, out_w, k, s;
};

PoolGeometry pool_geometry(const AvgPool2D& pool, const Shape& in) {
  if (in.size() != 3) throw std::invalid_argument("AvgPool2D expects (C,H,W) input, got " + shape_to_string(in));
  if (in[1] < pool.kernel || in[2] < pool.kernel) {
    throw std::invalid_argument("AvgPool2D input " + shape_to_string(in) + " smaller than window");
  }
  return {in[0], in[1], in[2], (in[1] - pool.kernel) / pool.stride + 1, (in[2] - pool.kernel) / pool.stride + 1,
          pool.kernel, pool.stride};
}

void pool_apply(const PoolGeometry& g, std::span<const double> x, std::span<double> y) {
  const double scale = 1.0 / static_cast<double>(g.k * g.k);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        double acc = 0.0;
        for (std::size_t a = 0; a < g.k; ++a) {
          const double* xrow = &x[(c * g.in_h + oh * g.s + a) * g.in_w + ow * g.s];
          for (std::size_t b = 0; b < g.k; ++b) acc += xrow[b];
        }
        y[(c * g.out_h + oh) * g.out_w + ow] = acc * scale;
      }
    }
  }
}

void pool_adjoint(const PoolGeometry& g, std::span<const double> dy, std::span<double> dx) {
  const double scale = 1.0 / static_cast<double>(g.k * g.k);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        const double v = dy[(c * g.out_h + oh) * g.out_w + ow] * scale;
        for (std::size_t a = 0; a < g.k; ++a) {
          double* dxrow = &dx[(c * g.in_h + oh * g.s + a) * g.in_w + ow * g.s];
          for (std::size_t b = 0; b < g.k; ++b) dxrow[b] += v;
        }
      }
    }
  }
}

void dense_apply(const Dense& d, std::span<const double> x, std::span<double> y) {
  const std::size_t out = d.weight.shape()[0];
  const std::size_t in = d.weight.shape()[1];
  const double* w = d.weight.values().data();
  for (std::size_t o = 0; o < out; ++o) {
    double acc = 0.0;
    const double* row = w + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] += acc;
  }
}

void dense_adjoint(const Dense& d, std::span<const double> dy, std::span<double> dx) {
  const std::size_t out = d.weight.shape()[0];
  const std::size_t in = d.weight.shape()[1];
  const double* w = d.weight.values().data();
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    const double* row = w + o * in;
    for (std::size_t i = 0; i < in; ++i) dx[i] += row[i] * g;
  }
}

Tensor layer_forward(const Layer& layer, const Tensor& x, const Shape& out_shape) {
  Tensor y(out_shape);
  std::visit(Overloaded{
                 [&](const Dense& d) {
                   std::copy(d.bias.values().begin(), d.bias.values().end(), y.values().begin());
                   dense_apply(d, x.values(), y.values());
                 },
                 [&](const Conv2D& c) {
                   const auto g = conv_geometry(c, x.shape());
                   const std::size_t plane = g.out_h * g.out_w;
                   for (std::size_t oc = 0; oc < g.out_c; ++oc) {
                     std::fill_n(y.values().begin() + static_cast<ptrdiff_t>(oc * plane), plane, c.bias[oc]);
                   }
                   conv_apply(g, c.kernel.values(), x.values(), y.values());
                 },
                 [&](const ReLU&) {
                   for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
                 },
                 [&](const AvgPool2D& p) { pool_apply(pool_geometry(p, x.shape()), x.values(), y.values()); },
                 [&](const Flatten&) { std::copy(x.values().begin(), x.values().end(), y.values().begin()); },
             },
             layer);
  return y;
}

// Returns dL/dx for one layer; accumulates parameter gradients into `pgrad`
// (weight, bias) when non-null.
Tensor layer_backward(const Layer& layer, const Tensor& x, const Tensor& y, const Tensor& dy, Tensor* pgrad) {
  Tensor dx(x.shape());
  std::visit(Overloaded{
                 [&](const Dense& d) {
                   dense_adjoint(d, dy.values(), dx.values());
                   if (pgrad) {
                     const std::size_t out = d.weight.shape()[0];
                     const std::size_t in = d.weight.shape()[1];
                     auto dw = pgrad[0].values();
                     for (std::size_t o = 0; o < out; ++o) {
                       const double g = dy[o];
                       if (g == 0.0) continue;
                       for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += g * x[i];
                     }
                     for (std::size_t o = 0; o < out; ++o) pgrad[1][o] += dy[o];
                   }
                 },
                 [&](const Conv2D& c) {
                   const auto g = conv_geometry(c, x.shape());
                   conv_adjoint(g, c.kernel.values(), dy.values(), dx.values());
                   if (pgrad) {
                     conv_kernel_grad(g, x.values(), dy.values(), pgrad[0].values());
                     const std::size_t plane = g.out_h * g.out_w;
                     for (std::size_t oc = 0; oc < g.out_c; ++oc) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < plane; ++i) acc += dy[oc * plane + i];
                       pgrad[1][oc] += acc;
                     }
                   }
                 },
                 [&](const ReLU&) {
                   for (std::size_t i = 0; i < x.size(); ++i) dx[i] = y[i] > 0.0 ? dy[i] : 0.0;
                 },
                 [&](const AvgPool2D& p) { pool_adjoint(pool_geometry(p, x.shape()), dy.values(), dx.values()); },
                 [&](const Flatten&) { std::copy(dy.values().begin(), dy.values().end(), dx.values().begin()); },
             },
             layer);
  return dx;
}

std::size_t layer_param_count(const Layer& layer) {
  return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2D>(layer) ? 2 : 0;
}

void check_input(const Network& net, const Tensor& x) {
  if (x.shape() != net.input_shape()) {
    throw std::invalid_argument("input shape " + shape_to_string(x.shape()) + " rejected; network expects " +
                                shape_to_string(net.input_shape()));
  }
}

void check_label(const Network& net, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= net.num_classes()) {
    throw std::invalid_argument("label " + std::to_string(label) + " out of range [0, " +
                                std::to_string(net.num_classes()) + ")");
  }
}

std::vector<Tensor> forward_trace(const Network& net, const Tensor& x) {
  std::vector<Tensor> acts;
  acts.reserve(net.layers().size() + 1);
  acts.push_back(x);
  const auto& shapes = net.activation_shapes();
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    acts.push_back(layer_forward(net.layers()[i], acts.back(), shapes[i + 1]));
  }
  return acts;
}

struct BackpropResult {
  double loss;
  int predicted;
};

BackpropResult backprop_impl(const Network& net, const Tensor& x, int label, Tensor* input_grad,
                             Gradients* param_grads) {
  check_input(net, x);
  check_label(net, label);
  const auto acts = forward_trace(net, x);
  const Tensor& logits = acts.back();
  const double value = cross_entropy(logits.values(), label);
  const int predicted = argmax(logits.values());

  auto probs = softmax(logits.values());
  probs[static_cast<std::size_t>(label)] -= 1.0;
  Tensor grad(logits.shape(), std::move(probs));

  std::vector<std::size_t> param_offset(net.layers().size() + 1, 0);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    param_offset[i + 1] = param_offset[i] + layer_param_count(net.layers()[i]);
  }
  for (std::size_t i = net.layers().size(); i-- > 0;) {
    const Layer& layer = net.layers()[i];
    Tensor* pgrad = (param_grads && layer_param_count(layer) > 0) ? &(*param_grads)[param_offset[i]] : nullptr;
    if (i == 0 && !input_grad && !pgrad) break;
    grad = layer_backward(layer, acts[i], acts[i + 1], grad, pgrad);
  }
  if (input_grad) *input_grad = std::move(grad);
  return {value, predicted};
}

}  // namespace

// --- Layers & Network -------------------------------------------------------

std::string_view layer_kind(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense&) { return std::string_view("dense"); },
                        [](const Conv2D&) { return std::string_view("conv2d"); },
                        [](const ReLU&) { return std::string_view("relu"); },
                        [](const AvgPool2D&) { return std::string_view("avgpool2d"); },
                        [](const Flatten&) { return std::string_view("flatten"); },
                    },
                    layer);
}

Shape layer_output_shape(const Layer& layer, const Shape& input) {
  return std::visit(
      Overloaded{
          [&](const Dense& d) -> Shape {
            if (d.weight.rank() != 2 || d.bias.shape() != Shape{d.weight.shape()[0]}) {
              throw std::invalid_argument("Dense weight must be (out,in) with bias (out)");
            }
            if (input.size() != 1 || input[0] != d.weight.shape()[1]) {
              throw std::invalid_argument("Dense expects input (" + std::to_string(d.weight.shape()[1]) + "), got " +
                                          shape_to_string(input));
            }
            return {d.weight.shape()[0]};
          },
          [&](const Conv2D& c) -> Shape {
            if (c.kernel.rank() != 4 || c.bias.shape() != Shape{c.kernel.shape()[0]}) {
              throw std::invalid_argument("Conv2D kernel must be (outC,inC,kH,kW) with bias (outC)");
            }
            if (c.stride < 1) throw std::invalid_argument("Conv2D stride must be >= 1");
            const auto g = conv_geometry(c, input);
            return {g.out_c, g.out_h, g.out_w};
          },
          [&](const ReLU&) -> Shape { return input; },
          [&](const AvgPool2D& p) -> Shape {
            if (p.kernel < 1 || p.stride < 1) throw std::invalid_argument("AvgPool2D kernel and stride must be >= 1");
            const auto g = pool_geometry(p, input);
            return {g.c, g.out_h, g.out_w};
          },
          [&](const Flatten&) -> Shape { return {shape_size(input)}; },
      },
      layer);
}

Network::Network(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) {
    throw std::invalid_argument("network input shape must be nonempty and positive");
  }
  shapes_.push_back(input_shape_);
  for (const auto& layer : layers_) shapes_.push_back(layer_output_shape(layer, shapes_.back()));
  if (shapes_.back().size() != 1) {
    throw std::invalid_argument("network output must be a vector, got " + shape_to_string(shapes_.back()));
  }
  num_classes_ = shapes_.back()[0];
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<Dense>(&layer)) {
      out.push_back(&d->weight);
      out.push_back(&d->bias);
    } else if (auto* c = std::get_if<Conv2D>(&layer)) {
      out.push_back(&c->kernel);
      out.push_back(&c->bias);
    }
  }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (auto* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

Gradients Network::zero_gradients() const {
  Gradients g;
  for (const auto* p : parameters()) g.emplace_back(p->shape());
  return g;
}

bool operator==(const Network& a, const Network& b) {
  if (a.input_shape_ != b.input_shape_ || a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& la = a.layers_[i];
    const auto& lb = b.layers_[i];
    if (la.index() != lb.index()) return false;
    const bool same = std::visit(
        Overloaded{
            [&](const Dense& d) {
              const auto& e = std::get<Dense>(lb);
              return d.weight == e.weight && d.bias == e.bias;
            },
            [&](const Conv2D& c) {
              const auto& e = std::get<Conv2D>(lb);
              return c.kernel == e.kernel && c.bias == e.bias && c.stride == e.stride && c.padding == e.padding;
            },
            [&](const AvgPool2D& p) {
              const auto& e = std::get<AvgPool2D>(lb);
              return p.kernel == e.kernel && p.stride == e.stride;
            },
            [](const auto&) { return true; },
        },
        la);
    if (!same) return false;
  }
  return true;
}

// --- Inference --------------------------------------------------------------

Tensor forward(const Network& net, const Tensor& x) {
  check_input(net, x);
  Tensor cur = x;
  const auto& shapes = net.activation_shapes();
  for (std::size_t i = 0; i < net.layers().size(); ++i) cur = layer_forward(net.layers()[i], cur, shapes[i + 1]);
  return cur;
}

int argmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<int>(best);
}

int classify(const Network& net, const Tensor& x) { return argmax(forward(net, x).values()); }

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

double cross_entropy(std::span<const double> logits, int label) {
  const auto top = static_cast<std::size_t>(argmax(logits));
  const double m = logits[top];
  double rest = 0.0;  // sum of exp(z_i - m) over i != top
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (i != top) rest += std::exp(logits[i] - m);
  }
  // log-sum-exp = m + log1p(rest)
  return (m - logits[static_cast<std::size_t>(label)]) + std::log1p(rest);
}

double loss(const Network& net, const Tensor& x, int label) {
  check_label(net, label);
  return cross_entropy(forward(net, x).values(), label);
}

// --- Gradients --------------------------------------------------------------

double backprop(const Network& net, const Tensor& x, int label, Tensor* input_grad, Gradients* param_grads) {
  return backprop_impl(net, x, label, input_grad, param_grads).loss;
}

Tensor grad_input(const Network& net, const Tensor& x, int label) {
  Tensor g;
  backprop_impl(net, x, label, &g, nullptr);
  return g;
}

Gradients grad_params(const Network& net, const Tensor& x, int label) {
  auto g = net.zero_gradients();
  backprop_impl(net, x, label, nullptr, &g);
  return g;
}

Gradients grad_params_batch(const Network& net, std::span<const Tensor> xs, std::span<const int> labels) {
  if (xs.size() != labels.size()) throw std::invalid_argument("batch inputs and labels differ in length");
  auto g = net.zero_gradients();
  for (std::size_t i = 0; i < xs.size(); ++i) backprop_impl(net, xs[i], labels[i], nullptr, &g);
  return g;
}

// --- Construction -----------------------------------------------------------

namespace {

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::size_t parse_count(std::string_view token, std::string_view context) {
  std::size_t value = 0;
  const auto* end = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc{} || ptr != end || value == 0) {
    throw std::invalid_argument("architecture: expected positive integer in '" + std::string(context) + "'");
  }
  return value;
}

}  // namespace

Architecture parse_architecture(std::string_view text) {
  Architecture arch;
  for (auto raw : split(text, ',')) {
    const auto item = trim(raw);
    if (item.empty()) continue;
    const auto f = split(item, ':');
    LayerSpec spec;
    if (f[0] == "conv") {
      if (f.size() < 3 || f.size() > 5) throw std::invalid_argument("architecture: conv:<filters>:<k>[:same|valid[:stride]]");
      spec.kind = LayerSpec::Kind::Conv2D;
      spec.units = parse_count(f[1], item);
      spec.kernel = parse_count(f[2], item);
      if (f.size() >= 4) {
        if (f[3] == "same") spec.padding = Padding::Same;
        else if (f[3] == "valid") spec.padding = Padding::Valid;
        else throw std::invalid_argument("architecture: unknown padding in '" + std::string(item) + "'");
      }
      if (f.size() == 5) spec.stride = parse_count(f[4], item);
    } else if (f[0] == "relu" && f.size() == 1) {
      spec.kind = LayerSpec::Kind::ReLU;
    } else if (f[0] == "avgpool" && (f.size() == 2 || f.size() == 3)) {
      spec.kind = LayerSpec::Kind::AvgPool2D;
      spec.kernel = parse_count(f[1], item);
      spec.stride = f.size() == 3 ? parse_count(f[2], item) : spec.kernel;
    } else if (f[0] == "flatten" && f.size() == 1) {
      spec.kind = LayerSpec::Kind::Flatten;
    } else if (f[0] == "dense" && f.size() <= 2) {
      spec.kind = LayerSpec::Kind::Dense;
      spec.units = f.size() == 2 ? parse_count(f[1], item) : 0;
    } else {
      throw std::invalid_argument("architecture: unknown layer '" + std::string(item) + "'");
    }
    arch.push_back(spec);
  }
  if (arch.empty()) throw std::invalid_argument("architecture: no layers");
  return arch;
}

std::string format_architecture(const Architecture& arch) {
  std::string out;
  for (const auto& s : arch) {
    if (!out.empty()) out += ",";
    switch (s.kind) {
      case LayerSpec::Kind::Conv2D:
        out += "conv:" + std::to_string(s.units) + ":" + std::to_string(s.kernel) + ":" +
               (s.padding == Padding::Same ? "same" : "valid");
        if (s.stride != 1) out += ":" + std::to_string(s.stride);
        break;
      case LayerSpec::Kind::ReLU: out += "relu"; break;
      case LayerSpec::Kind::AvgPool2D:
        out += "avgpool:" + std::to_string(s.kernel);
        if (s.stride != s.kernel) out += ":" + std::to_string(s.stride);
        break;
      case LayerSpec::Kind::Flatten: out += "flatten"; break;
      case LayerSpec::Kind::Dense:
        out += "dense";
        if (s.units) out += ":" + std::to_string(s.units);
        break;
    }
  }
  return out;
}

Architecture default_architecture() {
  return parse_architecture("conv:8:3:same,relu,avgpool:2,conv:16:3:same,relu,avgpool:2,flatten,dense");
}

Network build_network(const Architecture& arch, const Shape& input_shape, std::size_t num_classes,
                      std::uint64_t seed) {
  Rng rng(seed);
  auto glorot = [&](Shape shape, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = rng.uniform(-a, a);
    return Tensor(std::move(shape), std::move(data));
  };
  std::vector<Layer> layers;
  Shape cur = input_shape;
  for (const auto& s : arch) {
    switch (s.kind) {
      case LayerSpec::Kind::Dense: {
        if (cur.size() != 1) throw std::invalid_argument("architecture: dense layer needs a flattened input");
        const std::size_t out = s.units ? s.units : num_classes;
        layers.emplace_back(Dense{glorot({out, cur[0]}, static_cast<double>(cur[0]), static_cast<double>(out)),
                                  Tensor({out})});
        break;
      }
      case LayerSpec::Kind::Conv2D: {
        if (cur.size() != 3) throw std::invalid_argument("architecture: conv layer needs a (C,H,W) input");
        const std::size_t out = s.units ? s.units : num_classes;
        const double area = static_cast<double>(s.kernel * s.kernel);
        layers.emplace_back(Conv2D{glorot({out, cur[0], s.kernel, s.kernel}, static_cast<double>(cur[0]) * area,
                                          static_cast<double>(out) * area),
                                   Tensor({out}), s.stride, s.padding});
        break;
      }
      case LayerSpec::Kind::ReLU: layers.emplace_back(ReLU{}); break;
      case LayerSpec::Kind::AvgPool2D: layers.emplace_back(AvgPool2D{s.kernel, s.stride}); break;
      case LayerSpec::Kind::Flatten: layers.emplace_back(Flatten{}); break;
    }
    cur = layer_output_shape(layers.back(), cur);
  }
  Network net(input_shape, std::move(layers));
  if (net.num_classes() != num_classes) {
    throw std::invalid_argument("architecture output size " + std::to_string(net.num_classes()) +
                                " does not match class count " + std::to_string(num_classes));
  }
  return net;
}

// --- Training ---------------------------------------------------------------

void TrainConfig::validate() const {
  for (double r : learning_rates) {
    if (!(r > 0.0) || !std::isfinite(r)) throw std::invalid_argument("train: learning rates must be positive");
  }
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
}

Network train(Network net, std::span<const Tensor> inputs, std::span<const int> labels, const TrainConfig& cfg,
              const BatchTransform& transform, std::vector<EpochRecord>* log) {
  cfg.validate();
  if (inputs.empty()) throw std::invalid_argument("train: empty dataset");
  if (inputs.size() != labels.size()) throw std::invalid_argument("train: inputs and labels differ in length");
  for (const auto& x : inputs) check_input(net, x);
  for (int l : labels) check_label(net, l);

  Rng order_rng(cfg.rng_seed);
  Rng transform_rng({cfg.rng_seed, 0x7a4eULL});
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  auto velocity = net.zero_gradients();

  for (std::size_t r = 0; r < cfg.learning_rates.size(); ++r) {
    const double lr = cfg.learning_rates[r];
    for (std::size_t epoch = 0; epoch < cfg.epochs_per_rate; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
      double loss_sum = 0.0;
      std::size_t correct = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<Tensor> batch;
        std::vector<int> batch_labels;
        for (std::size_t i = start; i < end; ++i) {
          batch.push_back(inputs[order[i]]);
          batch_labels.push_back(labels[order[i]]);
        }
        if (transform) transform(net, batch, batch_labels, transform_rng);
        auto grads = net.zero_gradients();
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const auto res = backprop_impl(net, batch[i], batch_labels[i], nullptr, &grads);
          loss_sum += res.loss;
          if (res.predicted == batch_labels[i]) ++correct;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        auto params = net.parameters();
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto v = velocity[p].values();
          auto g = grads[p].values();
          auto w = params[p]->values();
          for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = cfg.momentum * v[j] + g[j] * inv;
            w[j] -= lr * v[j];
          }
        }
      }
      for (const auto* p : net.parameters()) {
        for (double w : p->values()) {
          if (!std::isfinite(w)) throw std::runtime_error("train: parameters diverged (non-finite)");
        }
      }
      if (log) {
        const double n = static_cast<double>(order.size());
        log->push_back({r, lr, epoch, loss_sum / n, static_cast<double>(correct) / n});
      }
    }
  }
  return net;
}

// --- Lipschitz bound --------------------------------------------------------

double spectral_norm(const std::function<std::vector<double>(std::span<const double>)>& apply,
                     const std::function<std::vector<double>(std::span<const double>)>& adjoint,
                     std::size_t input_size, std::uint64_t seed) {
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  Rng rng(seed);
  std::vector<double> v(input_size);
  for (auto& x : v) x = rng.normal();
  double nv = norm(v);
  for (auto& x : v) x /= nv;

  double sigma = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    const auto av = apply(v);
    const double next = norm(av);
    if (next == 0.0) return sigma;
    auto u = adjoint(av);
    const double nu = norm(u);
    if (nu == 0.0) return next;
    for (std::size_t i = 0; i < u.size(); ++i) v[i] = u[i] / nu;
    const bool converged = iter > 0 && std::abs(next - sigma) <= 1e-6 * next;
    sigma = next;
    if (converged) break;
  }
  // Rayleigh estimate at the final iterate.
  return std::max(sigma, norm(apply(v)));
}

double layer_lipschitz(const Layer& layer, const Shape& input) {
  return std::visit(
      Overloaded{
          [&](const Dense& d) {
            const std::size_t out = d.weight.shape()[0];
            const std::size_t in = d.weight.shape()[1];
            return spectral_norm(
                [&](std::span<const double> x) {
                  std::vector<double> y(out, 0.0);
                  dense_apply(d, x, y);
                  return y;
                },
                [&](std::span<const double> y) {
                  std::vector<double> x(in, 0.0);
                  dense_adjoint(d, y, x);
                  return x;
                },
                in);
          },
          [&](const Conv2D& c) {
            const auto g = conv_geometry(c, input);
            const std::size_t in_size = g.in_c * g.in_h * g.in_w;
            const std::size_t out_size = g.out_c * g.out_h * g.out_w;
            return spectral_norm(
                [&](std::span<const double> x) {
                  std::vector<double> y(out_size, 0.0);
                  conv_apply(g, c.kernel.values(), x, y);
                  return y;
                },
                [&](std::span<const double> y) {
                  std::vector<double> x(in_size, 0.0);
                  conv_adjoint(g, c.kernel.values(), y, x);
                  return x;
                },
                in_size);
          },
          [&](const AvgPool2D& p) {
            // sqrt(||A||_1 ||A||_inf); rows sum to 1, the worst column sum is the
            // maximal window coverage of one pixel over k^2. Exact for stride >= kernel.
            const auto g = pool_geometry(p, input);
            auto max_cover = [&](std::size_t in, std::size_t out) {
              std::size_t best = 0;
              for (std::size_t i = 0; i < in; ++i) {
                std::size_t cover = 0;
                for (std::size_t o = 0; o < out; ++o) {
                  if (o * g.s <= i && i < o * g.s + g.k) ++cover;
                }
                best = std::max(best, cover);
              }
              return best;
            };
            const double col = static_cast<double>(max_cover(g.in_h, g.out_h) * max_cover(g.in_w, g.out_w)) /
                               static_cast<double>(g.k * g.k);
            return std::sqrt(col);
          },
          [](const auto&) { return 1.0; },
      },
      layer);
}

double lipschitz_upper_bound(const Network& net) {
  double bound = 1.0;
  const auto& shapes = net.activation_shapes();
  for (std::size_t i = 0; i < net.layers().size(); ++i) bound *= layer_lipschitz(net.layers()[i], shapes[i]);
  return bound;
}

}  // namespace fens
