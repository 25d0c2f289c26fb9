#include "capsworld/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include "capsworld/binio.hpp"

namespace capsworld::train {

using ad::Graph;
using ad::Tensor;
using ad::Var;

AdamConfig adam_config(const TrainSettings& s) { return {s.learning_rate, s.beta1, s.beta2, s.adam_epsilon}; }

bool AdamState::operator==(const AdamState& o) const {
  if (t != o.t || m.size() != o.m.size() || v.size() != o.v.size()) return false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != o.m[i].shape() || m[i].values() != o.m[i].values()) return false;
    if (v[i].shape() != o.v[i].shape() || v[i].values() != o.v[i].values()) return false;
  }
  return true;
}

AdamState adam_init(const NamedTensors& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t->shape());
    s.v.emplace_back(t->shape());
  }
  return s;
}

void adam_step(const NamedTensors& params, AdamState& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state has " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    if (!t->requires_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
    if (state.m[i].shape() != t->shape()) {
      throw DimensionError("adam_step: moment shape " + ad::to_string(state.m[i].shape()) + " vs parameter '" + name +
                           "' " + ad::to_string(t->shape()));
    }
    for (float g : t->grad()) {
      if (!std::isfinite(g)) throw NumericDomainError("adam_step: non-finite gradient in '" + name + "'");
    }
  }
  state.t += 1;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].second->data();
    auto grad = params[i].second->grad();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j];
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      theta[j] = static_cast<float>(theta[j] - config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

double clip_grad_norm(const NamedTensors& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (float g : t->grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (const auto& [name, t] : params)
      for (auto& g : t->grad()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------- windows

template <typename T>
Unrolled<T> unroll(Graph<T>& g, const model::Bound<T>& p, const ModelConfig& config, const Window& window,
                   const CapsuleSet<T>& h_in) {
  const sim::Trajectory& traj = *window.trajectory;
  if (window.length == 0) throw ContractError("bptt_window: empty window");
  if (window.start + window.length > traj.length - 1) {
    throw ContractError("bptt_window: window [" + std::to_string(window.start) + ", " +
                        std::to_string(window.start + window.length) + ") exceeds " +
                        std::to_string(traj.length - 1) + " transitions");
  }
  if (traj.width != config.width) {
    throw DimensionError("trajectory width " + std::to_string(traj.width) + " does not match model width " +
                         std::to_string(config.width));
  }
  Unrolled<T> out;
  auto h = model::to_graph(g, h_in);
  for (std::size_t s = 0; s < window.length; ++s) {
    const std::size_t t = window.start + s;
    auto step = model::predict_step(p, config, h, model::observation_input(g, traj.observation(t), config.width),
                                    model::command_input(g, traj.command(t)));
    auto target = model::observation_input(g, traj.observation(t + 1), config.width);
    auto terms = model::loss_total(config, step.merged.prediction, target, step.r, h);
    out.step_pred.push_back(terms.pred);
    if (s == 0) {
      out.loss = terms.total, out.pred = terms.pred, out.sparse = terms.sparse, out.slow = terms.slow;
    } else {
      out.loss = ad::add(out.loss, terms.total);
      out.pred = ad::add(out.pred, terms.pred);
      out.sparse = ad::add(out.sparse, terms.sparse);
      out.slow = ad::add(out.slow, terms.slow);
    }
    h = step.h_next;
  }
  const T inv = T(1) / static_cast<T>(window.length);
  out.loss = ad::scale(out.loss, inv);
  out.pred = ad::scale(out.pred, inv);
  out.sparse = ad::scale(out.sparse, inv);
  out.slow = ad::scale(out.slow, inv);
  out.h_out = h;
  return out;
}

template Unrolled<float> unroll<float>(Graph<float>&, const model::Bound<float>&, const ModelConfig&, const Window&,
                                       const CapsuleSet<float>&);
template Unrolled<double> unroll<double>(Graph<double>&, const model::Bound<double>&, const ModelConfig&,
                                         const Window&, const CapsuleSet<double>&);

WindowResult bptt_window(ModelParameters<float>& params, const ModelConfig& config, const Window& window,
                         const CapsuleSet<float>& h_in, bool backward) {
  if (backward && !params.capsule.weight.requires_grad()) params.set_requires_grad(true);
  Graph<float> g;
  auto p = model::bind(g, params);
  auto u = unroll(g, p, config, window, h_in);
  WindowResult out;
  out.loss = u.loss.item();
  out.pred = u.pred.item();
  out.sparse = u.sparse.item();
  out.slow = u.slow.item();
  for (auto v : u.step_pred) out.step_pred.push_back(v.item());
  out.h_out = model::from_graph(u.h_out);
  if (backward) g.backward(u.loss);
  return out;
}

std::vector<double> evaluate_trajectory(ModelParameters<float>& params, const ModelConfig& config,
                                        const sim::Trajectory& trajectory, std::size_t window_length) {
  if (window_length == 0) throw ContractError("evaluate_trajectory: window length must be positive");
  std::vector<double> out;
  auto h = model::initial_state<float>(config);
  const std::size_t transitions = trajectory.length - 1;
  for (std::size_t start = 0; start < transitions; start += window_length) {
    const std::size_t len = std::min(window_length, transitions - start);
    auto r = bptt_window(params, config, {&trajectory, start, len}, h, false);
    out.insert(out.end(), r.step_pred.begin(), r.step_pred.end());
    h = std::move(r.h_out);
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

void put_tensor(io::ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw ContractError("tensor name too long");
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put_f32s(t.data());
}

struct RawTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> data;
  std::uint64_t offset = 0;
};

struct RawCheckpoint {
  std::uint64_t step = 0;
  std::string config_text;
  std::vector<RawTensor> tensors;
  Rng::State rng{};
};

RawCheckpoint read_raw(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(4, "magic") != "CKPT") throw FormatError("bad checkpoint magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), r.offset() - 4);
  }
  RawCheckpoint raw;
  raw.step = r.get<std::uint64_t>("step");
  const auto config_len = r.get<std::uint32_t>("config length");
  raw.config_text = r.get_bytes(config_len, "config text");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    RawTensor t;
    t.offset = r.offset();
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    t.name = r.get_bytes(name_len, "tensor name");
    const auto ndim = r.get<std::uint8_t>("tensor rank");
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      const auto d = r.get<std::uint32_t>("tensor dimension");
      if (d == 0) throw FormatError("zero tensor dimension in '" + t.name + "'", r.offset() - 4);
      t.shape.push_back(d);
      n *= d;
    }
    r.get_f32s(t.data, n, "tensor data");
    raw.tensors.push_back(std::move(t));
  }
  raw.rng[0] = r.get<std::uint64_t>("rng state");
  raw.rng[1] = r.get<std::uint64_t>("rng state");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return raw;
}

Checkpoint assemble(RawCheckpoint raw, const ModelConfig* expected) {
  Checkpoint ckpt;
  ckpt.config = config_parse(raw.config_text, false);
  ckpt.step = raw.step;
  ckpt.rng = raw.rng;

  const ModelConfig& shapes_from = expected != nullptr ? *expected : ckpt.config.model;
  Rng dummy(0);
  ckpt.params = model::init_parameters<float>(shapes_from, dummy);
  auto named = ckpt.params.named();
  ckpt.optimizer = adam_init(named);
  ckpt.optimizer.t = raw.step;

  std::vector<std::pair<std::string, Tensor<float>*>> slots;
  for (std::size_t i = 0; i < named.size(); ++i) {
    slots.emplace_back(named[i].first, named[i].second);
    slots.emplace_back(named[i].first + ".m", &ckpt.optimizer.m[i]);
    slots.emplace_back(named[i].first + ".v", &ckpt.optimizer.v[i]);
  }

  std::string mismatches;
  std::vector<bool> filled(slots.size(), false);
  for (auto& t : raw.tensors) {
    auto it = std::find_if(slots.begin(), slots.end(), [&](const auto& s) { return s.first == t.name; });
    if (it == slots.end()) {
      mismatches += "\n  unknown tensor '" + t.name + "' " + ad::to_string(t.shape);
      continue;
    }
    const auto idx = static_cast<std::size_t>(it - slots.begin());
    if (it->second->shape() != t.shape) {
      mismatches += "\n  '" + t.name + "': file " + ad::to_string(t.shape) + ", model " +
                    ad::to_string(it->second->shape());
      continue;
    }
    if (filled[idx]) throw FormatError("duplicate tensor '" + t.name + "'", t.offset);
    *it->second = Tensor<float>(t.shape, std::move(t.data));
    filled[idx] = true;
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!filled[i]) mismatches += "\n  missing tensor '" + slots[i].first + "' " + ad::to_string(slots[i].second->shape());
  }
  if (!mismatches.empty()) throw ConfigError("checkpoint does not match the model configuration:" + mismatches);
  return ckpt;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.put_bytes("CKPT");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(ckpt.step);
  const std::string text = config_to_text(ckpt.config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  const auto named = ckpt.params.named();
  if (ckpt.optimizer.m.size() != named.size() || ckpt.optimizer.v.size() != named.size()) {
    throw ContractError("checkpoint optimizer state does not match its parameters");
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(3 * named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    put_tensor(w, named[i].first, *named[i].second);
    put_tensor(w, named[i].first + ".m", ckpt.optimizer.m[i]);
    put_tensor(w, named[i].first + ".v", ckpt.optimizer.v[i]);
  }
  w.put<std::uint64_t>(ckpt.rng[0]);
  w.put<std::uint64_t>(ckpt.rng[1]);
  return w.bytes();
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) { return assemble(read_raw(bytes), nullptr); }

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const ModelConfig& expected) {
  return assemble(read_raw(bytes), &expected);
}

void checkpoint_save(const std::string& path, const Checkpoint& ckpt) { io::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint checkpoint_load(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

Checkpoint checkpoint_load(const std::string& path, const ModelConfig& expected) {
  return decode_checkpoint(io::read_file(path), expected);
}

bool bitwise_equal(const ModelParameters<float>& a, const ModelParameters<float>& b) {
  const auto na = a.named();
  const auto nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first || na[i].second->shape() != nb[i].second->shape()) return false;
    const auto x = na[i].second->data();
    const auto y = nb[i].second->data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------- training

Checkpoint initial_checkpoint(const RunConfig& config) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  Rng rng(config.train.seed);
  ckpt.params = model::init_parameters<float>(config.model, rng);
  ckpt.optimizer = adam_init(ckpt.params.named());
  ckpt.rng = rng.state();
  return ckpt;
}

namespace {

struct Lane {
  const sim::Trajectory* trajectory = nullptr;
  std::size_t cursor = 0;
  CapsuleSet<float> h;
};

class EpochSampler {
 public:
  EpochSampler(std::size_t n, Rng& rng) : order_(n), pos_(n), rng_(rng) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
  Rng& rng_;
};

}  // namespace

TrainResult train(const RunConfig& config, const std::vector<sim::Trajectory>& dataset, Checkpoint start,
                  std::size_t threads, const TrainHooks& hooks) {
  config.validate();
  if (dataset.empty()) throw ConfigError("training dataset has no episodes");
  for (const auto& e : dataset) {
    if (e.width != config.model.width) {
      throw DimensionError("dataset width " + std::to_string(e.width) + " does not match model width " +
                           std::to_string(config.model.width));
    }
    if (e.length < 2) throw DimensionError("dataset trajectories need at least 2 frames");
  }

  const auto& ts = config.train;
  const auto& mc = config.model;
  const AdamConfig adam = adam_config(ts);
  TrainResult result;
  result.checkpoint = std::move(start);
  Checkpoint& ckpt = result.checkpoint;
  ckpt.config = config;
  Rng rng;
  rng.set_state(ckpt.rng);
  EpochSampler sampler(dataset.size(), rng);

  ckpt.params.set_requires_grad(true);
  auto named = ckpt.params.named();
  std::vector<Lane> lanes(ts.batch_size);
  threads = std::max<std::size_t>(1, std::min(threads, ts.batch_size));
  std::vector<ModelParameters<float>> replicas;

  auto refill = [&](Lane& lane) {
    for (;;) {
      if (lane.trajectory != nullptr) {
        const std::size_t left = lane.trajectory->length - 1 - lane.cursor;
        const bool drop = left == 0 || (left < ts.window_length && left < 2 && lane.cursor > 0);
        if (!drop) return;
      }
      lane.trajectory = &dataset[sampler.next()];
      lane.cursor = 0;
      lane.h = model::initial_state<float>(mc);
    }
  };

  while (ckpt.step < ts.steps) {
    for (auto& lane : lanes) refill(lane);
    std::vector<Window> windows;
    for (auto& lane : lanes) {
      const std::size_t left = lane.trajectory->length - 1 - lane.cursor;
      windows.push_back({lane.trajectory, lane.cursor, std::min(ts.window_length, left)});
    }
    std::vector<WindowResult> results(lanes.size());
    ckpt.params.zero_grad();
    if (threads == 1) {
      for (std::size_t b = 0; b < lanes.size(); ++b) {
        results[b] = bptt_window(ckpt.params, mc, windows[b], lanes[b].h, true);
      }
    } else {
      replicas.assign(lanes.size(), ckpt.params);
      for (auto& r : replicas) r.set_requires_grad(true);
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t b = w; b < lanes.size(); b += threads) {
            results[b] = bptt_window(replicas[b], mc, windows[b], lanes[b].h, true);
          }
        });
      }
      for (auto& t : pool) t.join();
      for (std::size_t b = 0; b < lanes.size(); ++b) {
        auto src = replicas[b].named();
        for (std::size_t i = 0; i < named.size(); ++i) {
          auto dst = named[i].second->grad();
          auto add = src[i].second->grad();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += add[j];
        }
      }
    }

    TraceRow row;
    row.step = ckpt.step + 1;
    for (const auto& r : results) {
      row.loss += r.loss;
      row.pred += r.pred;
      row.sparse += r.sparse;
      row.slow += r.slow;
    }
    const double inv_b = 1.0 / static_cast<double>(lanes.size());
    row.loss *= inv_b;
    row.pred *= inv_b;
    row.sparse *= inv_b;
    row.slow *= inv_b;
    if (!std::isfinite(row.loss)) {
      throw NumericDomainError("non-finite loss at step " + std::to_string(row.step));
    }
    const float scale = static_cast<float>(inv_b);
    for (auto& [name, t] : named)
      for (auto& g : t->grad()) g *= scale;
    clip_grad_norm(named, ts.clip_norm);
    adam_step(named, ckpt.optimizer, adam);
    ckpt.step += 1;

    for (std::size_t b = 0; b < lanes.size(); ++b) {
      lanes[b].cursor += windows[b].length;
      lanes[b].h = std::move(results[b].h_out);
    }
    ckpt.rng = rng.state();
    result.trace.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.on_checkpoint && ts.checkpoint_interval > 0 && ckpt.step % ts.checkpoint_interval == 0 &&
        ckpt.step < ts.steps) {
      hooks.on_checkpoint(ckpt);
    }
  }
  ckpt.rng = rng.state();
  ckpt.params.set_requires_grad(false);
  if (hooks.on_checkpoint) hooks.on_checkpoint(ckpt);
  return result;
}

TrainResult train(const RunConfig& config, const std::vector<sim::Trajectory>& dataset, std::size_t threads,
                  const TrainHooks& hooks) {
  return train(config, dataset, initial_checkpoint(config), threads, hooks);
}

std::string trace_header(bool parallel) {
  return std::string(parallel ? "# mode=parallel\n" : "") + "step,loss,pred,sparse,slow\n";
}

std::string trace_line(const TraceRow& row) {
  auto num = [](double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  return std::to_string(row.step) + "," + num(row.loss) + "," + num(row.pred) + "," + num(row.sparse) + "," +
         num(row.slow) + "\n";
}

}  // namespace capsworld::train
