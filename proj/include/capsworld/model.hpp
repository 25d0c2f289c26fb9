#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capsworld/autodiff.hpp"
#include "capsworld/rng.hpp"
#include "capsworld/sim.hpp"

namespace capsworld::model {

using ad::Graph;
using ad::Tensor;
using ad::Var;

struct ConvSpec {
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  bool operator==(const ConvSpec&) const = default;
};

/// Architecture and loss hyperparameters.
///
/// Capsule instantiation parameters are split as v = [vf | vv]: the first
/// d_f = d - d_v entries are left alone by the transformation cell, the last
/// d_v are multiplied by the action matrix.
struct ModelConfig {
  std::size_t k = 3;
  std::size_t d = 6;
  std::size_t d_v = 4;
  std::size_t width = 64;

  std::vector<ConvSpec> encoder{{32, 5, 2}, {64, 5, 2}};
  /// Capsule convolution (stride 1) producing k * (1 + d) channels.
  std::size_t capsule_kernel = 3;

  std::size_t decoder_seed_channels = 32;
  /// 0 selects the smallest seed width for which the decoder reaches `width`.
  std::size_t decoder_seed_width = 0;
  /// Transposed convolutions; the last one must output 4 channels (RGB + occupancy).
  std::vector<ConvSpec> decoder{{16, 5, 2}, {4, 8, 2}};

  std::size_t action_hidden = 32;

  double lambda_sparse = 0.01;
  double lambda_slow = 0.1;
  double eps_guard = 1e-12;

  std::size_t d_f() const { return d - d_v; }

  /// Throws ConfigError when the stack cannot be built for `width`.
  void validate() const;
  /// Spatial length of the capsule-conv output.
  std::size_t encoder_output_width() const;
  std::size_t seed_width() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct ModelParameters {
  std::vector<ConvParams<T>> encoder;
  ConvParams<T> capsule;
  Tensor<T> recurrent_weight;  // [2d x d]
  Tensor<T> recurrent_bias;    // [d]
  Tensor<T> action_w1;         // [3 x hidden]
  Tensor<T> action_b1;         // [hidden]
  Tensor<T> action_w2;         // [hidden x d_v^2]
  Tensor<T> action_b2;         // [d_v^2]
  Tensor<T> seed_weight;       // [(d+1) x seed_channels*seed_width]
  Tensor<T> seed_bias;
  std::vector<ConvParams<T>> decoder;
  Tensor<T> background_color;  // [3], logits
  Tensor<T> background_logit;  // [1]

  /// Stable, human-readable parameter names in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

  void set_requires_grad(bool on);
  void zero_grad();
  std::size_t count() const;

  template <typename U>
  ModelParameters<U> cast() const;
};

/// Glorot-uniform weights, zero biases; the action MLP's output layer gets
/// N(0, 0.01^2) weights and an identity-matrix bias so that mlp(0) = I.
template <typename T>
ModelParameters<T> init_parameters(const ModelConfig& config, Rng& rng);

/// Capsule set outside any graph: k activations and k x d parameters.
template <typename T>
struct CapsuleSet {
  std::size_t k = 0;
  std::size_t d = 0;
  std::vector<T> act;
  std::vector<T> params;

  /// Row-major (k, d+1), activation first in each row.
  std::vector<T> flatten() const;
  bool operator==(const CapsuleSet&) const = default;
};

/// h_0: all zeros, so the first observation is adopted wherever c^a > 0.
template <typename T>
CapsuleSet<T> initial_state(const ModelConfig& config);

/// Capsule set on a graph: act [k x 1], params [k x d].
template <typename T>
struct CapsuleVars {
  Var<T> act;
  Var<T> params;
};

template <typename T>
CapsuleVars<T> to_graph(Graph<T>& g, const CapsuleSet<T>& s);
template <typename T>
CapsuleSet<T> from_graph(const CapsuleVars<T>& v);

/// Parameters bound to one graph.
template <typename T>
struct Bound {
  struct Conv {
    Var<T> weight;
    Var<T> bias;
  };
  std::vector<Conv> encoder;
  Conv capsule;
  Var<T> recurrent_weight, recurrent_bias;
  Var<T> action_w1, action_b1, action_w2, action_b2;
  Var<T> seed_weight, seed_bias;
  std::vector<Conv> decoder;
  Var<T> background_color, background_logit;
};

template <typename T>
Bound<T> bind(Graph<T>& g, ModelParameters<T>& params);

/// [W x 3] observation -> [3 x W] graph constant.
template <typename T>
Var<T> observation_input(Graph<T>& g, std::span<const float> obs, std::size_t width);
/// [1 x 3] constant (d_long, d_lat, d_rot).
template <typename T>
Var<T> command_input(Graph<T>& g, const sim::MotorCommand& m);

template <typename T>
CapsuleVars<T> encode(const Bound<T>& p, const ModelConfig& config, Var<T> x);

/// c^2 / (c^2 + h^2 + guard): 1 / (1 + (h/c)^2) without the c = 0 pole.
template <typename T>
T gate_epsilon(T h_a, T c_a, T guard);

template <typename T>
struct RecurrentOut {
  CapsuleVars<T> r;
  Var<T> eps;  // [k x 1]
};

template <typename T>
RecurrentOut<T> recurrent_update(const Bound<T>& p, const ModelConfig& config, const CapsuleVars<T>& h,
                                 const CapsuleVars<T>& c);

/// mlp(m) reshaped row-major to [d_v x d_v].
template <typename T>
Var<T> action_matrix(const Bound<T>& p, const ModelConfig& config, Var<T> m);

/// vv_i <- z . vv_i for every capsule; activations and vf pass through.
template <typename T>
CapsuleVars<T> transform(const ModelConfig& config, const CapsuleVars<T>& r, Var<T> z);

template <typename T>
struct Decoded {
  Var<T> rgb;  // [3 x W], in [0, 1]
  Var<T> occ;  // [1 x W], raw logits
};

/// Shared decoder applied to one capsule. act: [1 x 1], params: [1 x d].
template <typename T>
Decoded<T> decode_capsule(const Bound<T>& p, const ModelConfig& config, Var<T> act, Var<T> params);

template <typename T>
struct Merged {
  Var<T> prediction;  // [3 x W]
  Var<T> weights;     // [(k+1) x W]; row k is the background slot
};

/// Per-pixel softmax over occ_i + ln(a_i + 1e-6) and the background logit.
template <typename T>
Merged<T> merge(const Bound<T>& p, const std::vector<Decoded<T>>& parts, Var<T> act);

template <typename T>
struct StepOut {
  CapsuleVars<T> c;
  CapsuleVars<T> r;
  CapsuleVars<T> h_next;
  Var<T> eps;
  Var<T> z;
  std::vector<Decoded<T>> decoded;
  Merged<T> merged;
};

template <typename T>
StepOut<T> predict_step(const Bound<T>& p, const ModelConfig& config, const CapsuleVars<T>& h, Var<T> x,
                        Var<T> m);

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> pred;
  Var<T> sparse;
  Var<T> slow;
};

/// total = mean (x_hat - x)^2 + l_sparse * mean r^a + l_slow * mean (r - h)^2.
template <typename T>
LossTerms<T> loss_total(const ModelConfig& config, Var<T> prediction, Var<T> target, const CapsuleVars<T>& r,
                        const CapsuleVars<T>& h);

}  // namespace capsworld::model
