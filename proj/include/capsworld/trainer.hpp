#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "capsworld/config.hpp"
#include "capsworld/model.hpp"
#include "capsworld/rng.hpp"
#include "capsworld/sim.hpp"

namespace capsworld::train {

using model::CapsuleSet;
using model::ModelConfig;
using model::ModelParameters;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamConfig adam_config(const TrainSettings& s);

/// First and second moments, one tensor per parameter in `named()` order.
struct AdamState {
  std::vector<ad::Tensor<float>> m;
  std::vector<ad::Tensor<float>> v;
  std::uint64_t t = 0;

  bool operator==(const AdamState& o) const;
};

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor<float>*>>;

AdamState adam_init(const NamedTensors& params);

/// One bias-corrected Adam update from the tensors' gradients. A non-finite
/// gradient leaves every parameter untouched and throws, naming the tensor.
void adam_step(const NamedTensors& params, AdamState& state, const AdamConfig& config);

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` only measures.
double clip_grad_norm(const NamedTensors& params, double max_norm);

/// Transitions start .. start+length-1 of one trajectory; step t maps
/// (x_t, m_t) to a prediction of x_{t+1}.
struct Window {
  const sim::Trajectory* trajectory = nullptr;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Graph-level unroll shared by training and gradient checks.
template <typename T>
struct Unrolled {
  ad::Var<T> loss, pred, sparse, slow;  // window means
  std::vector<ad::Var<T>> step_pred;
  model::CapsuleVars<T> h_out;
};

template <typename T>
Unrolled<T> unroll(ad::Graph<T>& g, const model::Bound<T>& p, const ModelConfig& config, const Window& window,
                   const CapsuleSet<T>& h_in);

struct WindowResult {
  double loss = 0.0;
  double pred = 0.0;
  double sparse = 0.0;
  double slow = 0.0;
  std::vector<double> step_pred;  // per-step prediction MSE
  CapsuleSet<float> h_out;        // final state, detached
};

/// Unrolls the model over the window. With `backward`, gradients of the mean
/// per-step loss are accumulated into `params`.
WindowResult bptt_window(ModelParameters<float>& params, const ModelConfig& config, const Window& window,
                         const CapsuleSet<float>& h_in, bool backward);

/// Per-step prediction MSE over a whole trajectory, evaluated window by window.
std::vector<double> evaluate_trajectory(ModelParameters<float>& params, const ModelConfig& config,
                                        const sim::Trajectory& trajectory, std::size_t window_length);

struct Checkpoint {
  RunConfig config;
  ModelParameters<float> params;
  AdamState optimizer;
  std::uint64_t step = 0;
  Rng::State rng{};
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
/// Like decode_checkpoint, but first requires the stored tensors to match the
/// shapes `expected` would produce; mismatches are listed in a ConfigError.
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const ModelConfig& expected);

void checkpoint_save(const std::string& path, const Checkpoint& ckpt);
Checkpoint checkpoint_load(const std::string& path);
Checkpoint checkpoint_load(const std::string& path, const ModelConfig& expected);

bool bitwise_equal(const ModelParameters<float>& a, const ModelParameters<float>& b);

struct TraceRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double pred = 0.0;
  double sparse = 0.0;
  double slow = 0.0;
};

struct TrainHooks {
  /// Called after every optimizer step.
  std::function<void(const TraceRow&)> on_step;
  /// Called every `checkpoint_interval` steps and once at the end.
  std::function<void(const Checkpoint&)> on_checkpoint;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
};

/// Fresh checkpoint: initialized parameters, zero moments, step 0.
Checkpoint initial_checkpoint(const RunConfig& config);

/// Trains from `start` for `config.train.steps - start.step` steps. Each lane
/// of the batch walks its own trajectory window by window; trajectories are
/// drawn in seeded shuffled order, epoch after epoch. `threads > 1` evaluates
/// lanes concurrently and reduces gradients in lane order.
TrainResult train(const RunConfig& config, const std::vector<sim::Trajectory>& dataset, Checkpoint start,
                  std::size_t threads = 1, const TrainHooks& hooks = {});
TrainResult train(const RunConfig& config, const std::vector<sim::Trajectory>& dataset, std::size_t threads = 1,
                  const TrainHooks& hooks = {});

std::string trace_header(bool parallel);
std::string trace_line(const TraceRow& row);

}  // namespace capsworld::train
