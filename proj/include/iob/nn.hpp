#pragma once

// Dense feedforward networks with hand-written reverse mode and Adam.
//
// Batched tensors are column-major: one column per sample.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iob/errors.hpp"
#include "iob/rng.hpp"

namespace iob {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation { Relu, Identity };

inline const char* to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "identity";
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::Identity;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

struct DenseNet {
  std::vector<DenseLayer> layers;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  std::vector<Eigen::Index> dims() const {
    std::vector<Eigen::Index> d{input_dim()};
    for (const auto& l : layers) d.push_back(l.out_dim());
    return d;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  bool same_shape(const DenseNet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
          layers[i].weight.cols() != other.layers[i].weight.cols())
        return false;
    return true;
  }

  /// Throws ShapeError unless out_i == in_{i+1} and biases match.
  void validate() const {
    if (layers.empty()) throw ShapeError("DenseNet: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].bias.size() != layers[i].weight.rows())
        throw ShapeError("DenseNet: bias size mismatch in layer " + std::to_string(i));
      if (i + 1 < layers.size() && layers[i].out_dim() != layers[i + 1].in_dim())
        throw ShapeError("DenseNet: layer " + std::to_string(i) + " output does not feed layer " +
                         std::to_string(i + 1));
    }
  }

  /// ReLU hidden layers, identity output. Weights and biases are uniform in
  /// [-1/sqrt(fan_in), 1/sqrt(fan_in)]; `zero_output_layer` zeroes the last one.
  static DenseNet make(std::span<const Eigen::Index> dims, Rng& rng, bool zero_output_layer = false) {
    if (dims.size() < 2) throw ShapeError("DenseNet::make needs at least two dimensions");
    DenseNet net;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      DenseLayer layer;
      const bool last = i + 2 == dims.size();
      layer.activation = last ? Activation::Identity : Activation::Relu;
      layer.weight.resize(dims[i + 1], dims[i]);
      layer.bias.resize(dims[i + 1]);
      if (last && zero_output_layer) {
        layer.weight.setZero();
        layer.bias.setZero();
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
          for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            layer.weight(r, c) = rng.uniform(-bound, bound);
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = rng.uniform(-bound, bound);
      }
      net.layers.push_back(std::move(layer));
    }
    return net;
  }
  static DenseNet make(std::initializer_list<Eigen::Index> dims, Rng& rng, bool zero_output_layer = false) {
    return make(std::span<const Eigen::Index>(dims.begin(), dims.size()), rng, zero_output_layer);
  }
};

/// Parameter blocks are enumerated as W0, b0, W1, b1, ...
inline std::size_t block_count(const DenseNet& net) { return 2 * net.layers.size(); }

inline Eigen::Map<Vector> param_block(DenseNet& net, std::size_t block) {
  auto& l = net.layers[block / 2];
  return block % 2 == 0 ? Eigen::Map<Vector>(l.weight.data(), l.weight.size())
                        : Eigen::Map<Vector>(l.bias.data(), l.bias.size());
}
inline Eigen::Map<const Vector> param_block(const DenseNet& net, std::size_t block) {
  const auto& l = net.layers[block / 2];
  return block % 2 == 0 ? Eigen::Map<const Vector>(l.weight.data(), l.weight.size())
                        : Eigen::Map<const Vector>(l.bias.data(), l.bias.size());
}

/// Gradient storage aligned one-to-one with a DenseNet's parameters.
struct GradBuffer {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static GradBuffer zeros_like(const DenseNet& net) {
    GradBuffer g;
    for (const auto& l : net.layers) {
      g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector::Zero(l.bias.size()));
    }
    return g;
  }

  bool matches(const DenseNet& net) const {
    if (weight.size() != net.layers.size() || bias.size() != net.layers.size()) return false;
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (weight[i].rows() != net.layers[i].weight.rows() || weight[i].cols() != net.layers[i].weight.cols() ||
          bias[i].size() != net.layers[i].bias.size())
        return false;
    return true;
  }

  bool all_finite() const {
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!weight[i].allFinite() || !bias[i].allFinite()) return false;
    return true;
  }

  bool all_zero() const {
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!weight[i].isZero(0.0) || !bias[i].isZero(0.0)) return false;
    return true;
  }

  std::size_t block_count() const { return 2 * weight.size(); }
  Eigen::Map<Vector> block(std::size_t b) {
    return b % 2 == 0 ? Eigen::Map<Vector>(weight[b / 2].data(), weight[b / 2].size())
                      : Eigen::Map<Vector>(bias[b / 2].data(), bias[b / 2].size());
  }
  Eigen::Map<const Vector> block(std::size_t b) const {
    return b % 2 == 0 ? Eigen::Map<const Vector>(weight[b / 2].data(), weight[b / 2].size())
                      : Eigen::Map<const Vector>(bias[b / 2].data(), bias[b / 2].size());
  }

  GradBuffer& operator+=(const GradBuffer& o) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] += o.weight[i];
      bias[i] += o.bias[i];
    }
    return *this;
  }
};

/// Post-activation outputs of each layer; activations[0] is the input.
struct ForwardCache {
  std::vector<Matrix> activations;
  const Matrix& output() const { return activations.back(); }
};

inline void check_input(const DenseNet& net, Eigen::Index rows) {
  if (rows != net.input_dim())
    throw ShapeError("forward: input has " + std::to_string(rows) + " rows, network expects " +
                     std::to_string(net.input_dim()));
}

inline void apply_activation(Matrix& z, Activation a) {
  if (a == Activation::Relu) z = z.cwiseMax(0.0);
}

/// Batched forward pass, keeping activations for a later backward().
inline const Matrix& forward(const DenseNet& net, const Matrix& input, ForwardCache& cache) {
  check_input(net, input.rows());
  cache.activations.resize(net.layers.size() + 1);
  cache.activations[0] = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    Matrix& z = cache.activations[i + 1];
    z.noalias() = l.weight * cache.activations[i];
    z.colwise() += l.bias;
    apply_activation(z, l.activation);
  }
  return cache.output();
}

inline Matrix forward(const DenseNet& net, const Matrix& input) {
  check_input(net, input.rows());
  Matrix x = input;
  for (const auto& l : net.layers) {
    Matrix z = l.weight * x;
    z.colwise() += l.bias;
    apply_activation(z, l.activation);
    x = std::move(z);
  }
  return x;
}

inline Vector forward(const DenseNet& net, const Vector& input) {
  check_input(net, input.size());
  Vector x = input;
  for (const auto& l : net.layers) {
    Vector z = l.weight * x + l.bias;
    if (l.activation == Activation::Relu) z = z.cwiseMax(0.0);
    x = std::move(z);
  }
  return x;
}

/// Reverse pass for the cached forward. Accumulates d(sum output_grad .* output)/dθ
/// into `grads` (may be null) and writes the input gradient to `input_grad` (may be null).
inline void backward(const DenseNet& net, const ForwardCache& cache, const Matrix& output_grad, GradBuffer* grads,
                     Matrix* input_grad = nullptr) {
  const auto& out = cache.output();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols())
    throw ShapeError("backward: output gradient shape does not match network output");
  if (grads && !grads->matches(net)) throw ShapeError("backward: gradient buffer shape mismatch");
  Matrix delta = output_grad;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const auto& l = net.layers[i];
    if (l.activation == Activation::Relu)
      delta = (cache.activations[i + 1].array() > 0.0).select(delta, 0.0);
    if (grads) {
      grads->weight[i].noalias() += delta * cache.activations[i].transpose();
      grads->bias[i] += delta.rowwise().sum();
    }
    if (i > 0 || input_grad) {
      Matrix prev = l.weight.transpose() * delta;
      delta = std::move(prev);
    }
  }
  if (input_grad) *input_grad = std::move(delta);
}

/// Gradient of output_grad . forward(net, input) w.r.t. every parameter.
inline GradBuffer backward(const DenseNet& net, const Vector& input, const Vector& output_grad) {
  ForwardCache cache;
  forward(net, Matrix(input), cache);
  if (output_grad.size() != net.output_dim())
    throw ShapeError("backward: output gradient has " + std::to_string(output_grad.size()) +
                     " entries, network output has " + std::to_string(net.output_dim()));
  GradBuffer g = GradBuffer::zeros_like(net);
  backward(net, cache, Matrix(output_grad), &g);
  return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
  long step = 0;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_net(const DenseNet& net, double learning_rate = 3e-4) {
    AdamState s;
    s.learning_rate = learning_rate;
    for (std::size_t b = 0; b < block_count(net); ++b) {
      const auto n = param_block(net, b).size();
      s.first_moment.push_back(Vector::Zero(n));
      s.second_moment.push_back(Vector::Zero(n));
    }
    return s;
  }
  static AdamState for_scalar(double learning_rate = 3e-4) {
    AdamState s;
    s.learning_rate = learning_rate;
    s.first_moment.push_back(Vector::Zero(1));
    s.second_moment.push_back(Vector::Zero(1));
    return s;
  }
};

namespace detail {
inline void adam_block(Eigen::Map<Vector> param, const Eigen::Map<const Vector>& grad, Vector& m, Vector& v,
                       const AdamState& s) {
  m = s.beta1 * m + (1.0 - s.beta1) * grad;
  v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  param.array() -= s.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
}
}  // namespace detail

/// Bias-corrected Adam update. Rejects non-finite gradients without touching
/// parameters or moments.
inline void adam_step(DenseNet& net, const GradBuffer& grads, AdamState& state) {
  if (!grads.matches(net) || state.first_moment.size() != block_count(net))
    throw ShapeError("adam_step: gradient/state shape mismatch");
  if (!grads.all_finite()) throw NonFiniteError("adam_step: non-finite gradient");
  ++state.step;
  for (std::size_t b = 0; b < block_count(net); ++b)
    detail::adam_block(param_block(net, b), grads.block(b), state.first_moment[b], state.second_moment[b], state);
}

inline void adam_step(double& param, double grad, AdamState& state) {
  if (!std::isfinite(grad)) throw NonFiniteError("adam_step: non-finite gradient");
  ++state.step;
  Eigen::Map<const Vector> g(&grad, 1);
  detail::adam_block(Eigen::Map<Vector>(&param, 1), g, state.first_moment[0], state.second_moment[0], state);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   iob-densenet 1
//   layers <L>
//   dims <d0> <d1> ... <dL>
//   activations <a1> ... <aL>
//   weight <l> <rows> <cols>
//   <rows*cols values, row-major, one row per line>
//   bias <l> <n>
//   <n values>
//   ... repeated for each layer
//   end
//
// Values are written with 17 significant digits so a load reproduces the
// saved parameters bit for bit.

inline void save_net(std::ostream& os, const DenseNet& net) {
  os << "iob-densenet 1\n";
  os << "layers " << net.layers.size() << "\n";
  os << "dims";
  for (auto d : net.dims()) os << ' ' << d;
  os << "\nactivations";
  for (const auto& l : net.layers) os << ' ' << to_string(l.activation);
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    os << "weight " << i << ' ' << l.weight.rows() << ' ' << l.weight.cols() << '\n';
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) os << (c ? " " : "") << l.weight(r, c);
      os << '\n';
    }
    os << "bias " << i << ' ' << l.bias.size() << '\n';
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) os << (r ? " " : "") << l.bias(r);
    os << '\n';
  }
  os << "end\n";
}

inline DenseNet load_net(std::istream& is) {
  auto expect = [&](const std::string& word) {
    std::string tok;
    if (!(is >> tok) || tok != word) throw ShapeError("load_net: expected '" + word + "', got '" + tok + "'");
  };
  expect("iob-densenet");
  int version = 0;
  is >> version;
  if (version != 1) throw ShapeError("load_net: unsupported version");
  expect("layers");
  std::size_t n_layers = 0;
  is >> n_layers;
  expect("dims");
  std::vector<Eigen::Index> dims(n_layers + 1);
  for (auto& d : dims) is >> d;
  expect("activations");
  DenseNet net;
  net.layers.resize(n_layers);
  for (auto& l : net.layers) {
    std::string a;
    is >> a;
    if (a == "relu") l.activation = Activation::Relu;
    else if (a == "identity") l.activation = Activation::Identity;
    else throw ShapeError("load_net: unknown activation '" + a + "'");
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    auto& l = net.layers[i];
    std::size_t idx = 0;
    Eigen::Index rows = 0, cols = 0, n = 0;
    expect("weight");
    is >> idx >> rows >> cols;
    if (idx != i || rows != dims[i + 1] || cols != dims[i]) throw ShapeError("load_net: weight header mismatch");
    l.weight.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) is >> l.weight(r, c);
    expect("bias");
    is >> idx >> n;
    if (idx != i || n != rows) throw ShapeError("load_net: bias header mismatch");
    l.bias.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) is >> l.bias(r);
  }
  if (!is) throw ShapeError("load_net: truncated checkpoint");
  expect("end");
  net.validate();
  return net;
}

}  // namespace iob
