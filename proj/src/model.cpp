#include "capsworld/model.hpp"

#include <cmath>
#include <string>

namespace capsworld::model {

using ad::ReduceKind;
using ad::Shape;

namespace {

std::size_t decoder_output_width(const ModelConfig& c, std::size_t seed) {
  std::size_t w = seed;
  for (const auto& l : c.decoder) w = ad::conv_transpose_output_width(w, l.kernel, l.stride);
  return w;
}

template <typename T>
void glorot(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace

void ModelConfig::validate() const {
  if (k == 0 || d == 0) throw ConfigError("k and d must be positive");
  if (d_v == 0 || d_v > d) throw ConfigError("d_v must satisfy 1 <= d_v <= d (got d_v = " + std::to_string(d_v) +
                                             ", d = " + std::to_string(d) + ")");
  if (width == 0) throw ConfigError("width must be positive");
  if (action_hidden == 0) throw ConfigError("action_hidden must be positive");
  if (decoder_seed_channels == 0) throw ConfigError("decoder_seed_channels must be positive");
  for (const auto& l : encoder)
    if (l.channels == 0 || l.kernel == 0 || l.stride == 0) throw ConfigError("encoder layers need positive sizes");
  if (capsule_kernel == 0) throw ConfigError("capsule_kernel must be positive");
  if (decoder.empty()) throw ConfigError("decoder needs at least one transposed convolution");
  for (const auto& l : decoder)
    if (l.channels == 0 || l.kernel == 0 || l.stride == 0) throw ConfigError("decoder layers need positive sizes");
  if (decoder.back().channels != 4) {
    throw ConfigError("last decoder layer must output 4 channels (RGB + occupancy), got " +
                      std::to_string(decoder.back().channels));
  }
  if (!(eps_guard > 0.0)) throw ConfigError("eps_guard must be positive");
  if (lambda_sparse < 0.0 || lambda_slow < 0.0) throw ConfigError("loss weights must be non-negative");
  encoder_output_width();
  seed_width();
}

std::size_t ModelConfig::encoder_output_width() const {
  std::size_t w = width;
  try {
    for (const auto& l : encoder) w = ad::conv_output_width(w, l.kernel, l.stride);
    w = ad::conv_output_width(w, capsule_kernel, 1);
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("encoder does not fit width ") + std::to_string(width) + ": " + e.what());
  }
  return w;
}

std::size_t ModelConfig::seed_width() const {
  if (decoder_seed_width != 0) {
    const std::size_t reached = decoder_output_width(*this, decoder_seed_width);
    if (reached != width) {
      throw ConfigError("decoder reaches width " + std::to_string(reached) + " from seed width " +
                        std::to_string(decoder_seed_width) + ", expected " + std::to_string(width));
    }
    return decoder_seed_width;
  }
  for (std::size_t s = 1; s <= width; ++s) {
    const std::size_t reached = decoder_output_width(*this, s);
    if (reached == width) return s;
    if (reached > width) break;
  }
  throw ConfigError("no decoder seed width reaches observation width " + std::to_string(width));
}

// ---------------------------------------------------------------- parameters

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParameters<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    out.emplace_back("encoder." + std::to_string(i) + ".weight", &encoder[i].weight);
    out.emplace_back("encoder." + std::to_string(i) + ".bias", &encoder[i].bias);
  }
  out.emplace_back("capsule.weight", &capsule.weight);
  out.emplace_back("capsule.bias", &capsule.bias);
  out.emplace_back("recurrent.weight", &recurrent_weight);
  out.emplace_back("recurrent.bias", &recurrent_bias);
  out.emplace_back("action.0.weight", &action_w1);
  out.emplace_back("action.0.bias", &action_b1);
  out.emplace_back("action.1.weight", &action_w2);
  out.emplace_back("action.1.bias", &action_b2);
  out.emplace_back("decoder.seed.weight", &seed_weight);
  out.emplace_back("decoder.seed.bias", &seed_bias);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    out.emplace_back("decoder." + std::to_string(i) + ".weight", &decoder[i].weight);
    out.emplace_back("decoder." + std::to_string(i) + ".bias", &decoder[i].bias);
  }
  out.emplace_back("background.color", &background_color);
  out.emplace_back("background.logit", &background_logit);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParameters<T>::named() const {
  auto mutable_view = const_cast<ModelParameters<T>*>(this)->named();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [n, t] : mutable_view) out.emplace_back(n, t);
  return out;
}

template <typename T>
void ModelParameters<T>::set_requires_grad(bool on) {
  for (auto& [name, t] : named()) t->set_requires_grad(on);
}

template <typename T>
void ModelParameters<T>::zero_grad() {
  for (auto& [name, t] : named()) t->zero_grad();
}

template <typename T>
std::size_t ModelParameters<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

template <typename T>
template <typename U>
ModelParameters<U> ModelParameters<T>::cast() const {
  ModelParameters<U> out;
  auto conv = [](const ConvParams<T>& c) { return ConvParams<U>{c.weight.template cast<U>(), c.bias.template cast<U>()}; };
  for (const auto& c : encoder) out.encoder.push_back(conv(c));
  out.capsule = conv(capsule);
  out.recurrent_weight = recurrent_weight.template cast<U>();
  out.recurrent_bias = recurrent_bias.template cast<U>();
  out.action_w1 = action_w1.template cast<U>();
  out.action_b1 = action_b1.template cast<U>();
  out.action_w2 = action_w2.template cast<U>();
  out.action_b2 = action_b2.template cast<U>();
  out.seed_weight = seed_weight.template cast<U>();
  out.seed_bias = seed_bias.template cast<U>();
  for (const auto& c : decoder) out.decoder.push_back(conv(c));
  out.background_color = background_color.template cast<U>();
  out.background_logit = background_logit.template cast<U>();
  return out;
}

template <typename T>
ModelParameters<T> init_parameters(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParameters<T> p;
  std::size_t cin = 3;
  for (const auto& l : config.encoder) {
    ConvParams<T> c{Tensor<T>({l.channels, cin, l.kernel}), Tensor<T>({l.channels})};
    glorot(c.weight, cin * l.kernel, l.channels * l.kernel, rng);
    p.encoder.push_back(std::move(c));
    cin = l.channels;
  }
  const std::size_t caps_out = config.k * (1 + config.d);
  p.capsule = {Tensor<T>({caps_out, cin, config.capsule_kernel}), Tensor<T>({caps_out})};
  glorot(p.capsule.weight, cin * config.capsule_kernel, caps_out * config.capsule_kernel, rng);

  const std::size_t d = config.d;
  p.recurrent_weight = Tensor<T>({2 * d, d});
  glorot(p.recurrent_weight, 2 * d, d, rng);
  p.recurrent_bias = Tensor<T>({d});

  const std::size_t dv2 = config.d_v * config.d_v;
  p.action_w1 = Tensor<T>({3, config.action_hidden});
  glorot(p.action_w1, 3, config.action_hidden, rng);
  p.action_b1 = Tensor<T>({config.action_hidden});
  p.action_w2 = Tensor<T>({config.action_hidden, dv2});
  for (auto& v : p.action_w2.data()) v = static_cast<T>(0.01 * rng.normal());
  p.action_b2 = Tensor<T>({dv2});
  for (std::size_t i = 0; i < config.d_v; ++i) p.action_b2[i * config.d_v + i] = T(1);

  const std::size_t seed = config.decoder_seed_channels * config.seed_width();
  p.seed_weight = Tensor<T>({d + 1, seed});
  glorot(p.seed_weight, d + 1, seed, rng);
  p.seed_bias = Tensor<T>({seed});
  cin = config.decoder_seed_channels;
  for (const auto& l : config.decoder) {
    ConvParams<T> c{Tensor<T>({cin, l.channels, l.kernel}), Tensor<T>({l.channels})};
    glorot(c.weight, cin * l.kernel, l.channels * l.kernel, rng);
    p.decoder.push_back(std::move(c));
    cin = l.channels;
  }
  p.background_color = Tensor<T>({3});
  p.background_logit = Tensor<T>({1});
  return p;
}

// ---------------------------------------------------------------- capsule sets

template <typename T>
std::vector<T> CapsuleSet<T>::flatten() const {
  std::vector<T> out;
  out.reserve(k * (d + 1));
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back(act[i]);
    out.insert(out.end(), params.begin() + static_cast<std::ptrdiff_t>(i * d),
               params.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

template <typename T>
CapsuleSet<T> initial_state(const ModelConfig& config) {
  return {config.k, config.d, std::vector<T>(config.k, T(0)), std::vector<T>(config.k * config.d, T(0))};
}

template <typename T>
CapsuleVars<T> to_graph(Graph<T>& g, const CapsuleSet<T>& s) {
  if (s.act.size() != s.k || s.params.size() != s.k * s.d) throw DimensionError("malformed capsule set");
  return {g.constant({s.k, 1}, s.act), g.constant({s.k, s.d}, s.params)};
}

template <typename T>
CapsuleSet<T> from_graph(const CapsuleVars<T>& v) {
  const auto& ps = v.params.shape();
  return {ps[0], ps[1], {v.act.value().begin(), v.act.value().end()},
          {v.params.value().begin(), v.params.value().end()}};
}

template <typename T>
Bound<T> bind(Graph<T>& g, ModelParameters<T>& p) {
  Bound<T> b;
  for (auto& c : p.encoder) b.encoder.push_back({g.param(c.weight), g.param(c.bias)});
  b.capsule = {g.param(p.capsule.weight), g.param(p.capsule.bias)};
  b.recurrent_weight = g.param(p.recurrent_weight);
  b.recurrent_bias = g.param(p.recurrent_bias);
  b.action_w1 = g.param(p.action_w1);
  b.action_b1 = g.param(p.action_b1);
  b.action_w2 = g.param(p.action_w2);
  b.action_b2 = g.param(p.action_b2);
  b.seed_weight = g.param(p.seed_weight);
  b.seed_bias = g.param(p.seed_bias);
  for (auto& c : p.decoder) b.decoder.push_back({g.param(c.weight), g.param(c.bias)});
  b.background_color = g.param(p.background_color);
  b.background_logit = g.param(p.background_logit);
  return b;
}

template <typename T>
Var<T> observation_input(Graph<T>& g, std::span<const float> obs, std::size_t width) {
  if (obs.size() != width * 3) {
    throw DimensionError("observation has " + std::to_string(obs.size() / 3) + " pixels, model expects " +
                         std::to_string(width));
  }
  std::vector<T> planar(3 * width);
  for (std::size_t i = 0; i < width; ++i)
    for (std::size_t c = 0; c < 3; ++c) planar[c * width + i] = static_cast<T>(obs[3 * i + c]);
  return g.constant({3, width}, std::move(planar));
}

template <typename T>
Var<T> command_input(Graph<T>& g, const sim::MotorCommand& m) {
  return g.constant({1, 3}, {static_cast<T>(m.d_long), static_cast<T>(m.d_lat), static_cast<T>(m.d_rot)});
}

// ---------------------------------------------------------------- blocks

template <typename T>
CapsuleVars<T> encode(const Bound<T>& p, const ModelConfig& config, Var<T> x) {
  if (x.shape() != Shape{3, config.width}) {
    throw DimensionError("encode: expected input [3x" + std::to_string(config.width) + "], got " +
                         ad::to_string(x.shape()));
  }
  Var<T> h = x;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    h = ad::relu(ad::conv1d(h, p.encoder[i].weight, p.encoder[i].bias, config.encoder[i].stride));
  }
  Var<T> caps = ad::conv1d(h, p.capsule.weight, p.capsule.bias, 1);
  const std::size_t positions = caps.shape()[1];
  caps = ad::reshape(caps, Shape{config.k, 1 + config.d, positions});
  Var<T> logits = ad::slice(caps, 1, 0, 1);             // [k x 1 x P]
  Var<T> raw = ad::slice(caps, 1, 1, 1 + config.d);     // [k x d x P]
  Var<T> act = ad::sigmoid(ad::reduce(logits, ReduceKind::max, 2));  // [k x 1]
  Var<T> attention = ad::softmax(logits, 2);
  Var<T> params = ad::reduce(ad::mul(raw, attention), ReduceKind::sum, 2);  // [k x d]
  return {act, params};
}

template <typename T>
T gate_epsilon(T h_a, T c_a, T guard) {
  const T c2 = c_a * c_a;
  return c2 / (c2 + h_a * h_a + guard);
}

template <typename T>
RecurrentOut<T> recurrent_update(const Bound<T>& p, const ModelConfig& config, const CapsuleVars<T>& h,
                                 const CapsuleVars<T>& c) {
  if (h.act.shape() != c.act.shape() || h.params.shape() != c.params.shape()) {
    throw DimensionError("recurrent_update: state " + ad::to_string(h.params.shape()) + " vs observation " +
                         ad::to_string(c.params.shape()));
  }
  Var<T> r_act = ad::max_binary(h.act, c.act);
  Var<T> c2 = ad::square(c.act);
  Var<T> eps = ad::div(c2, ad::add_scalar(ad::add(c2, ad::square(h.act)), static_cast<T>(config.eps_guard)));
  Var<T> g = ad::add(ad::matmul(ad::concat<T>({h.params, c.params}, 1), p.recurrent_weight), p.recurrent_bias);
  Var<T> keep = ad::add_scalar(ad::scale(eps, T(-1)), T(1));
  Var<T> r_params = ad::add(ad::mul(keep, h.params), ad::mul(eps, g));
  return {{r_act, r_params}, eps};
}

template <typename T>
Var<T> action_matrix(const Bound<T>& p, const ModelConfig& config, Var<T> m) {
  Var<T> hidden = ad::relu(ad::add(ad::matmul(m, p.action_w1), p.action_b1));
  Var<T> flat = ad::add(ad::matmul(hidden, p.action_w2), p.action_b2);
  return ad::reshape(flat, Shape{config.d_v, config.d_v});
}

template <typename T>
CapsuleVars<T> transform(const ModelConfig& config, const CapsuleVars<T>& r, Var<T> z) {
  const std::size_t df = config.d_f();
  if (z.shape() != Shape{config.d_v, config.d_v} || r.params.shape()[1] != config.d) {
    throw DimensionError("transform: action matrix " + ad::to_string(z.shape()) + " incompatible with capsules " +
                         ad::to_string(r.params.shape()));
  }
  Var<T> vv = df == 0 ? r.params : ad::slice(r.params, 1, df, config.d);
  // Row i of vv is a capsule; vv_i . z^T == (z . vv_i^T)^T.
  Var<T> moved = ad::matmul(vv, ad::transpose(z));
  Var<T> params = df == 0 ? moved : ad::concat<T>({ad::slice(r.params, 1, 0, df), moved}, 1);
  return {r.act, params};
}

template <typename T>
Decoded<T> decode_capsule(const Bound<T>& p, const ModelConfig& config, Var<T> act, Var<T> params) {
  Var<T> input = ad::concat<T>({act, params}, 1);  // [1 x (d+1)]
  Var<T> seed = ad::relu(ad::add(ad::matmul(input, p.seed_weight), p.seed_bias));
  Var<T> h = ad::reshape(seed, Shape{config.decoder_seed_channels, config.seed_width()});
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    h = ad::conv_transpose1d(h, p.decoder[i].weight, p.decoder[i].bias, config.decoder[i].stride);
    if (i + 1 < p.decoder.size()) h = ad::relu(h);
  }
  return {ad::sigmoid(ad::slice(h, 0, 0, 3)), ad::slice(h, 0, 3, 4)};
}

template <typename T>
Merged<T> merge(const Bound<T>& p, const std::vector<Decoded<T>>& parts, Var<T> act) {
  if (parts.empty()) throw ContractError("merge: need at least one capsule");
  Graph<T>& g = act.graph();
  const std::size_t k = parts.size();
  const std::size_t w = parts.front().occ.shape()[1];
  Var<T> log_act = ad::log(ad::add_scalar(act, T(1e-6)));
  std::vector<Var<T>> logits;
  logits.reserve(k + 1);
  for (std::size_t i = 0; i < k; ++i) logits.push_back(ad::add(parts[i].occ, ad::slice(log_act, 0, i, i + 1)));
  logits.push_back(ad::add(g.constant({1, w}, std::vector<T>(w, T(0))), p.background_logit));
  Var<T> weights = ad::softmax(ad::concat<T>(logits, 0), 0);  // [(k+1) x W]
  Var<T> background = ad::reshape(ad::sigmoid(p.background_color), Shape{3, 1});
  Var<T> prediction = ad::mul(ad::slice(weights, 0, k, k + 1), background);
  for (std::size_t i = 0; i < k; ++i) {
    prediction = ad::add(prediction, ad::mul(ad::slice(weights, 0, i, i + 1), parts[i].rgb));
  }
  return {prediction, weights};
}

template <typename T>
StepOut<T> predict_step(const Bound<T>& p, const ModelConfig& config, const CapsuleVars<T>& h, Var<T> x,
                        Var<T> m) {
  StepOut<T> out;
  out.c = encode(p, config, x);
  auto rec = recurrent_update(p, config, h, out.c);
  out.r = rec.r;
  out.eps = rec.eps;
  out.z = action_matrix(p, config, m);
  out.h_next = transform(config, out.r, out.z);
  out.decoded.reserve(config.k);
  for (std::size_t i = 0; i < config.k; ++i) {
    out.decoded.push_back(decode_capsule(p, config, ad::slice(out.h_next.act, 0, i, i + 1),
                                         ad::slice(out.h_next.params, 0, i, i + 1)));
  }
  out.merged = merge(p, out.decoded, out.h_next.act);
  return out;
}

template <typename T>
LossTerms<T> loss_total(const ModelConfig& config, Var<T> prediction, Var<T> target, const CapsuleVars<T>& r,
                        const CapsuleVars<T>& h) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("loss_total: prediction " + ad::to_string(prediction.shape()) + " vs target " +
                         ad::to_string(target.shape()));
  }
  LossTerms<T> out;
  out.pred = ad::mean_all(ad::square(ad::sub(prediction, target)));
  out.sparse = ad::mean_all(r.act);
  const std::size_t entries = r.act.size() + r.params.size();
  Var<T> slow_sum = ad::add(ad::sum_all(ad::square(ad::sub(r.act, h.act))),
                            ad::sum_all(ad::square(ad::sub(r.params, h.params))));
  out.slow = ad::scale(slow_sum, T(1) / static_cast<T>(entries));
  out.total = ad::add(ad::add(out.pred, ad::scale(out.sparse, static_cast<T>(config.lambda_sparse))),
                      ad::scale(out.slow, static_cast<T>(config.lambda_slow)));
  return out;
}

// ---------------------------------------------------------------- instantiation

#define CAPSWORLD_MODEL_INSTANTIATE(T)                                                                   \
  template struct ModelParameters<T>;                                                                    \
  template struct CapsuleSet<T>;                                                                         \
  template ModelParameters<T> init_parameters<T>(const ModelConfig&, Rng&);                              \
  template CapsuleSet<T> initial_state<T>(const ModelConfig&);                                           \
  template CapsuleVars<T> to_graph<T>(Graph<T>&, const CapsuleSet<T>&);                                  \
  template CapsuleSet<T> from_graph<T>(const CapsuleVars<T>&);                                           \
  template Bound<T> bind<T>(Graph<T>&, ModelParameters<T>&);                                             \
  template Var<T> observation_input<T>(Graph<T>&, std::span<const float>, std::size_t);                  \
  template Var<T> command_input<T>(Graph<T>&, const sim::MotorCommand&);                                 \
  template CapsuleVars<T> encode<T>(const Bound<T>&, const ModelConfig&, Var<T>);                        \
  template T gate_epsilon<T>(T, T, T);                                                                   \
  template RecurrentOut<T> recurrent_update<T>(const Bound<T>&, const ModelConfig&, const CapsuleVars<T>&, \
                                               const CapsuleVars<T>&);                                   \
  template Var<T> action_matrix<T>(const Bound<T>&, const ModelConfig&, Var<T>);                         \
  template CapsuleVars<T> transform<T>(const ModelConfig&, const CapsuleVars<T>&, Var<T>);               \
  template Decoded<T> decode_capsule<T>(const Bound<T>&, const ModelConfig&, Var<T>, Var<T>);            \
  template Merged<T> merge<T>(const Bound<T>&, const std::vector<Decoded<T>>&, Var<T>);                  \
  template StepOut<T> predict_step<T>(const Bound<T>&, const ModelConfig&, const CapsuleVars<T>&, Var<T>, \
                                      Var<T>);                                                           \
  template LossTerms<T> loss_total<T>(const ModelConfig&, Var<T>, Var<T>, const CapsuleVars<T>&,         \
                                      const CapsuleVars<T>&);

CAPSWORLD_MODEL_INSTANTIATE(float)
CAPSWORLD_MODEL_INSTANTIATE(double)

template ModelParameters<double> ModelParameters<float>::cast<double>() const;
template ModelParameters<float> ModelParameters<double>::cast<float>() const;
template ModelParameters<float> ModelParameters<float>::cast<float>() const;
template ModelParameters<double> ModelParameters<double>::cast<double>() const;

#undef CAPSWORLD_MODEL_INSTANTIATE

}  // namespace capsworld::model
