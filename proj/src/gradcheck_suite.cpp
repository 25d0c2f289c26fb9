#include "capsworld/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>

#include "capsworld/gradcheck.hpp"

namespace capsworld::ad {

namespace {

constexpr double kOpStep = 1e-3;
constexpr double kModelStep = 1e-4;

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

std::vector<float> random_strip(std::size_t width, Rng& rng) {
  std::vector<float> x(width * 3);
  for (auto& v : x) v = static_cast<float>(rng.uniform());
  return x;
}

}  // namespace

model::ModelConfig gradcheck_model_config() {
  model::ModelConfig c;
  c.k = 2;
  c.d = 3;
  c.d_v = 2;
  c.width = 16;
  c.encoder = {{8, 3, 2}, {8, 3, 1}};
  c.capsule_kernel = 3;
  c.decoder_seed_channels = 4;
  c.decoder = {{4, 5, 2}, {4, 8, 2}};
  c.action_hidden = 4;
  return c;
}

SuiteReport run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  using F = std::function<Var<double>(Graph<double>&, Var<double>)>;
  struct Case {
    const char* name;
    Shape shape;
    F f;
  };
  // Every op is composed with a fixed random projection so the scalar loss
  // depends on each output element.
  const Tensor<double> weights = random_tensor({256}, rng);
  auto project = [&](Graph<double>& g, Var<double> y) {
    std::vector<double> w(weights.data().begin(), weights.data().begin() + static_cast<std::ptrdiff_t>(y.size()));
    return sum_all(mul(reshape(y, Shape{y.size()}), g.constant(Shape{y.size()}, w)));
  };
  const Tensor<double> other = random_tensor({3, 4}, rng);
  const Tensor<double> right = random_tensor({4, 5}, rng);
  const Tensor<double> kernel = random_tensor({4, 3, 3}, rng);
  const Tensor<double> kernel_t = random_tensor({3, 2, 4}, rng);
  const Tensor<double> bias = random_tensor({4}, rng);
  const Tensor<double> conv_input = random_tensor({3, 9}, rng);

  const std::vector<Case> cases = {
      {"add", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, add(x, g.constant(other))); }},
      {"sub", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, sub(g.constant(other), x)); }},
      {"mul", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, mul(x, g.constant(other))); }},
      {"div", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, div(add_scalar(x, 3.0), add_scalar(x, 2.0))); }},
      {"max_binary", {3, 4},
       [&](Graph<double>& g, Var<double> x) { return project(g, max_binary(x, g.constant(other))); }},
      {"broadcast", {4}, [&](Graph<double>& g, Var<double> x) { return project(g, mul(g.constant(other), x)); }},
      {"add_scalar", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, square(add_scalar(x, 0.3))); }},
      {"scale", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, scale(x, -2.5)); }},
      {"relu", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, relu(x)); }},
      {"sigmoid", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, sigmoid(x)); }},
      {"tanh", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, tanh(x)); }},
      {"square", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, square(x)); }},
      {"log", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, log(add_scalar(square(x), 0.5))); }},
      {"matmul", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, matmul(x, g.constant(right))); }},
      {"transpose", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, transpose(x)); }},
      {"reshape", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, square(reshape(x, Shape{2, 6}))); }},
      {"conv1d", {3, 9},
       [&](Graph<double>& g, Var<double> x) {
         return project(g, conv1d(x, g.constant(kernel), g.constant(bias), 2));
       }},
      {"conv1d_kernel", {4, 3, 3},
       [&](Graph<double>& g, Var<double> k) {
         return project(g, conv1d(g.constant(conv_input), k, Var<double>{}, 1));
       }},
      {"conv_transpose1d", {3, 5},
       [&](Graph<double>& g, Var<double> x) {
         return project(g, conv_transpose1d(x, g.constant(kernel_t), Var<double>{}, 2));
       }},
      {"conv_transpose1d_kernel", {3, 2, 4},
       [&](Graph<double>& g, Var<double> k) {
         return project(g, conv_transpose1d(g.constant(other), k, g.constant(Shape{2}, {0.1, -0.2}), 3));
       }},
      {"reduce_sum", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, reduce(x, ReduceKind::sum, 1)); }},
      {"reduce_mean", {3, 4},
       [&](Graph<double>& g, Var<double> x) { return project(g, reduce(x, ReduceKind::mean, 0)); }},
      {"reduce_max", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, reduce(x, ReduceKind::max, 1)); }},
      {"logsumexp", {3, 4},
       [&](Graph<double>& g, Var<double> x) { return project(g, reduce(x, ReduceKind::logsumexp, 1)); }},
      {"sum_all", {3, 4}, [&](Graph<double>&, Var<double> x) { return sum_all(square(x)); }},
      {"mean_all", {3, 4}, [&](Graph<double>&, Var<double> x) { return mean_all(tanh(x)); }},
      {"softmax", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, softmax(x, 1)); }},
      {"concat", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, concat<double>({x, square(x)}, 0)); }},
      {"slice", {3, 4}, [&](Graph<double>& g, Var<double> x) { return project(g, slice(square(x), 1, 1, 3)); }},
  };

  SuiteReport report;
  for (const auto& c : cases) {
    const Tensor<double> x = random_tensor(c.shape, rng);
    const auto r = finite_diff_check(c.f, x, kOpStep);
    report.cases.push_back({c.name, r.max_rel_error, r.checked, r.skipped});
  }

  {
    const auto config = gradcheck_model_config();
    auto params = model::init_parameters<double>(config, rng);
    // Zero-initialized biases are moved off zero so every parameter carries
    // a generic gradient.
    for (auto& [name, t] : params.named())
      for (auto& v : t->data())
        if (v == 0.0) v = rng.uniform(-0.1, 0.1);
    const auto x = random_strip(config.width, rng);
    const auto target = random_strip(config.width, rng);
    model::CapsuleSet<double> h{config.k, config.d, {}, {}};
    for (std::size_t i = 0; i < config.k; ++i) h.act.push_back(rng.uniform(0.05, 0.95));
    for (std::size_t i = 0; i < config.k * config.d; ++i) h.params.push_back(rng.uniform(-1.0, 1.0));
    const sim::MotorCommand m{rng.uniform(-0.1, 0.3), rng.uniform(-0.1, 0.1), rng.uniform(-0.3, 0.3)};
    std::vector<Tensor<double>*> inputs;
    for (auto& [name, t] : params.named()) inputs.push_back(t);
    const auto r = finite_diff_check(
        [&](Graph<double>& g) {
          auto b = model::bind(g, params);
          auto hv = model::to_graph(g, h);
          auto out = model::predict_step(b, config, hv, model::observation_input(g, x, config.width),
                                         model::command_input(g, m));
          return model::loss_total(config, out.merged.prediction, model::observation_input(g, target, config.width),
                                   out.r, hv)
              .total;
        },
        inputs, kModelStep);
    report.cases.push_back({"end_to_end_loss", r.max_rel_error, r.checked, r.skipped});
  }

  for (const auto& c : report.cases) report.max_rel_error = std::max(report.max_rel_error, c.max_rel_error);
  return report;
}

}  // namespace capsworld::ad
