#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fens/rng.hpp"
#include "fens/tensor.hpp"

namespace fens {

/// Fully connected layer, weight shape (out, in).
struct Dense {
  Tensor weight;
  Tensor bias;
};

enum class Padding { Valid, Same };

/// 2-D convolution on (C, H, W) inputs, kernel shape (outC, inC, kH, kW).
/// "Same" padding follows the usual convention: output extent ceil(in / stride),
/// total zero padding split with the smaller half before.
struct Conv2D {
  Tensor kernel;
  Tensor bias;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
};

struct ReLU {};

/// Average pooling without padding; windows that would cross the border are dropped.
struct AvgPool2D {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct Flatten {};

using Layer = std::variant<Dense, Conv2D, ReLU, AvgPool2D, Flatten>;

std::string_view layer_kind(const Layer& layer);

/// Output shape of `layer` for the given input shape; throws std::invalid_argument
/// when the layer cannot accept that shape.
Shape layer_output_shape(const Layer& layer, const Shape& input);

/// Per-parameter gradients, aligned with Network::parameters().
using Gradients = std::vector<Tensor>;

class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<Layer>& layers() const { return layers_; }

  /// Shape seen at the input of each layer, plus the final output shape.
  const std::vector<Shape>& activation_shapes() const { return shapes_; }

  /// Parameter tensors in layer order (weight before bias).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  Gradients zero_gradients() const;

  friend bool operator==(const Network&, const Network&);

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
  std::size_t num_classes_ = 0;
};

// --- Inference --------------------------------------------------------------

Tensor forward(const Network& net, const Tensor& x);

/// Argmax over scores; ties go to the smallest index.
int argmax(std::span<const double> scores);

int classify(const Network& net, const Tensor& x);

std::vector<double> softmax(std::span<const double> logits);

/// Softmax cross-entropy of `logits` at `label`, computed so that it stays
/// strictly positive until the margin exceeds the double range.
double cross_entropy(std::span<const double> logits, int label);

double loss(const Network& net, const Tensor& x, int label);

// --- Gradients --------------------------------------------------------------

Tensor grad_input(const Network& net, const Tensor& x, int label);

Gradients grad_params(const Network& net, const Tensor& x, int label);

/// Loss and both gradients from one forward/backward pass. `param_grads`, when
/// non-null, is accumulated into (not overwritten).
double backprop(const Network& net, const Tensor& x, int label, Tensor* input_grad,
                Gradients* param_grads);

/// Summed parameter gradient over a batch.
Gradients grad_params_batch(const Network& net, std::span<const Tensor> xs,
                            std::span<const int> labels);

// --- Construction -----------------------------------------------------------

/// Textual layer description used by configs: "conv:8:3:same", "conv:16:3:valid:2",
/// "relu", "avgpool:2", "avgpool:3:2", "flatten", "dense:64", and "dense" for
/// the final layer sized to the class count.
struct LayerSpec {
  enum class Kind { Dense, Conv2D, ReLU, AvgPool2D, Flatten } kind = Kind::ReLU;
  std::size_t units = 0;  // dense outputs / conv filters; 0 = num_classes
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
};

using Architecture = std::vector<LayerSpec>;

Architecture parse_architecture(std::string_view text);
std::string format_architecture(const Architecture& arch);

/// Conv(8,3x3,same) ReLU AvgPool(2) Conv(16,3x3,same) ReLU AvgPool(2) Flatten Dense(n).
Architecture default_architecture();

/// Builds a network with Glorot-uniform weights and zero biases.
Network build_network(const Architecture& arch, const Shape& input_shape, std::size_t num_classes,
                      std::uint64_t seed);

// --- Training ---------------------------------------------------------------

struct TrainConfig {
  std::vector<double> learning_rates{0.1, 0.01, 0.001};
  std::size_t epochs_per_rate = 1;
  std::size_t batch_size = 32;
  double momentum = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t rate_index = 0;
  double learning_rate = 0.0;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;  // training accuracy measured on the batches as seen
};

/// Optional per-minibatch rewrite of the inputs (noise or adversarial
/// augmentation). Receives the current network.
using BatchTransform = std::function<void(const Network& net, std::vector<Tensor>& batch,
                                          std::span<const int> labels, Rng& rng)>;

/// Minibatch SGD over the learning-rate schedule. The gradient of each step is
/// the batch mean. Deterministic given cfg.rng_seed.
Network train(Network net, std::span<const Tensor> inputs, std::span<const int> labels,
              const TrainConfig& cfg, const BatchTransform& transform = {},
              std::vector<EpochRecord>* log = nullptr);

// --- Lipschitz bound --------------------------------------------------------

/// Largest singular value of a linear operator given by `apply` and its adjoint,
/// by power iteration (at most 200 rounds, relative change below 1e-6).
double spectral_norm(const std::function<std::vector<double>(std::span<const double>)>& apply,
                     const std::function<std::vector<double>(std::span<const double>)>& adjoint,
                     std::size_t input_size, std::uint64_t seed = 0x5eed);

/// Operator norm bound used for one layer at its input shape.
double layer_lipschitz(const Layer& layer, const Shape& input);

/// Product of per-layer L2 operator-norm bounds.
double lipschitz_upper_bound(const Network& net);

}  // namespace fens
