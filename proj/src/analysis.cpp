#include "capsworld/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <thread>

#include "capsworld/binio.hpp"

namespace capsworld::analysis {

using ad::Graph;
using ad::Var;

namespace {

std::vector<float> interleave(std::span<const float> planar, std::size_t channels, std::size_t width) {
  std::vector<float> out(planar.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < width; ++i) out[i * channels + c] = planar[c * width + i];
  return out;
}

template <typename T>
std::vector<float> to_float(std::span<const T> v) {
  return {v.begin(), v.end()};
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

double median(std::vector<double> v) {
  if (v.empty()) return nan();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Records run_model(model::ModelParameters<float>& params, const model::ModelConfig& config,
                  const sim::Trajectory& trajectory) {
  config.validate();
  if (trajectory.width != config.width) {
    throw DimensionError("trajectory width " + std::to_string(trajectory.width) + " does not match model width " +
                         std::to_string(config.width));
  }
  Records rec;
  rec.k = config.k;
  rec.d = config.d;
  rec.d_v = config.d_v;
  rec.width = config.width;
  const std::size_t w = config.width;
  auto state = model::initial_state<float>(config);
  for (std::size_t t = 0; t + 1 < trajectory.length; ++t) {
    Graph<float> g;
    auto p = model::bind(g, params);
    auto h = model::to_graph(g, state);
    auto out = model::predict_step(p, config, h, model::observation_input(g, trajectory.observation(t), w),
                                   model::command_input(g, trajectory.command(t)));
    StepRecord s;
    s.c = model::from_graph(out.c);
    s.r = model::from_graph(out.r);
    s.h_next = model::from_graph(out.h_next);
    s.prediction = interleave(out.merged.prediction.value(), 3, w);

    auto background = ad::reshape(ad::sigmoid(p.background_color), ad::Shape{3, 1});
    auto log_act = ad::log(ad::add_scalar(out.h_next.act, 1e-6f));
    for (std::size_t i = 0; i < config.k; ++i) {
      const auto& part = out.decoded[i];
      auto u = ad::add(part.occ, ad::slice(log_act, 0, i, i + 1));
      auto mass = ad::sigmoid(ad::sub(u, p.background_logit));  // [1 x W]
      auto keep = ad::add_scalar(ad::scale(mass, -1.0f), 1.0f);
      auto solo = ad::add(ad::mul(mass, part.rgb), ad::mul(keep, background));
      s.rgb.push_back(interleave(part.rgb.value(), 3, w));
      s.occ.push_back(to_float(part.occ.value()));
      s.solo_mass.push_back(to_float(mass.value()));
      s.solo.push_back(interleave(solo.value(), 3, w));
    }
    state = s.h_next;
    rec.steps.push_back(std::move(s));
  }
  return rec;
}

// ---------------------------------------------------------------- strips

unsigned char quantize(float v) {
  const float c = std::clamp(std::isnan(v) ? 0.0f : v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(255.0 * static_cast<double>(c)));
}

Image render_strip(const Records& records, const sim::Trajectory& trajectory, const std::vector<std::size_t>& steps) {
  if (records.k > 8) throw ConfigError("render_strip supports at most 8 capsules, got " + std::to_string(records.k));
  const std::size_t w = records.width;
  const std::size_t panels = 2 + records.k;
  Image img;
  img.width = panels * w + (panels - 1) * kGutter;
  img.height = kPanelHeight * steps.size();
  img.rgb.assign(img.width * img.height * 3, 255);
  for (std::size_t row = 0; row < steps.size(); ++row) {
    const std::size_t t = steps[row];
    if (t >= records.steps.size()) {
      throw ContractError("render_strip: step " + std::to_string(t) + " out of range (" +
                          std::to_string(records.steps.size()) + " records)");
    }
    const auto& s = records.steps[t];
    std::vector<std::span<const float>> sources{trajectory.observation(t + 1), s.prediction};
    for (const auto& solo : s.solo) sources.emplace_back(solo);
    for (std::size_t p = 0; p < panels; ++p) {
      const std::size_t x0 = p * (w + kGutter);
      for (std::size_t y = 0; y < kPanelHeight; ++y) {
        unsigned char* line = img.rgb.data() + ((row * kPanelHeight + y) * img.width + x0) * 3;
        for (std::size_t i = 0; i < 3 * w; ++i) line[i] = quantize(sources[p][i]);
      }
    }
  }
  return img;
}

std::vector<unsigned char> encode_ppm(const Image& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

void write_ppm(const std::string& path, const Image& image) { io::write_file(path, encode_ppm(image)); }

// ---------------------------------------------------------------- assignment

std::vector<std::vector<float>> object_solo_masks(const sim::Trajectory& trajectory, const sim::SimConfig& sim) {
  const std::size_t w = trajectory.width;
  const std::size_t steps = trajectory.length - 1;
  std::vector<std::vector<float>> masks(trajectory.n_objects, std::vector<float>(steps * w, 0.0f));
  for (std::size_t j = 0; j < trajectory.n_objects; ++j) {
    sim::WorldState solo;
    solo.arena_size = sim.arena_size;
    solo.objects = {trajectory.object(j)};
    for (std::size_t t = 0; t < steps; ++t) {
      const auto hits = sim::ray_hits(solo, trajectory.pose(t + 1), sim);
      for (std::size_t i = 0; i < w; ++i) masks[j][t * w + i] = hits[i] == 0 ? 1.0f : 0.0f;
    }
  }
  return masks;
}

AssignmentReport assign_from_masses(const std::vector<std::vector<float>>& capsule_mass,
                                    const std::vector<std::vector<float>>& object_mask, double tau_assign) {
  AssignmentReport rep;
  rep.k = capsule_mass.size();
  rep.n_objects = object_mask.size();
  rep.scores.assign(rep.k * rep.n_objects, 0.0);
  rep.assignment.assign(rep.k, -1);
  for (std::size_t i = 0; i < rep.k; ++i) {
    for (std::size_t j = 0; j < rep.n_objects; ++j) {
      const auto& m = capsule_mass[i];
      const auto& o = object_mask[j];
      if (m.size() != o.size()) throw DimensionError("capsule and object masks differ in length");
      double lo = 0.0, hi = 0.0;
      for (std::size_t p = 0; p < m.size(); ++p) {
        lo += std::min<double>(m[p], o[p]);
        hi += std::max<double>(m[p], o[p]);
      }
      rep.scores[i * rep.n_objects + j] = hi > 0.0 ? lo / hi : 0.0;
    }
  }
  std::vector<bool> capsule_used(rep.k, false), object_used(rep.n_objects, false);
  double total = 0.0;
  for (;;) {
    double best = -1.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < rep.k; ++i) {
      if (capsule_used[i]) continue;
      for (std::size_t j = 0; j < rep.n_objects; ++j) {
        if (object_used[j]) continue;
        if (rep.score(i, j) > best) {
          best = rep.score(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    if (best < tau_assign || best < 0.0) break;
    capsule_used[bi] = object_used[bj] = true;
    rep.assignment[bi] = static_cast<int>(bj);
    total += best;
  }
  const std::size_t slots = std::min(rep.k, rep.n_objects);
  rep.purity = slots == 0 ? 0.0 : total / static_cast<double>(slots);
  return rep;
}

AssignmentReport capsule_object_assignment(const Records& records, const sim::Trajectory& trajectory,
                                           const sim::SimConfig& sim, double tau_assign) {
  const std::size_t w = records.width;
  std::vector<std::vector<float>> mass(records.k, std::vector<float>(records.steps.size() * w));
  for (std::size_t t = 0; t < records.steps.size(); ++t)
    for (std::size_t i = 0; i < records.k; ++i)
      std::copy(records.steps[t].solo_mass[i].begin(), records.steps[t].solo_mass[i].end(), mass[i].begin() + t * w);
  return assign_from_masses(mass, object_solo_masks(trajectory, sim), tau_assign);
}

// ---------------------------------------------------------------- regression

OlsFit fit_heldout(const std::vector<std::vector<double>>& features, const std::vector<std::array<double, 2>>& targets,
                   std::uint64_t split_seed) {
  if (features.size() != targets.size()) throw DimensionError("fit_heldout: feature and target counts differ");
  OlsFit fit;
  const std::size_t n = features.size();
  if (n == 0) return fit;
  const std::size_t p = features.front().size() + 1;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(split_seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  fit.n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  fit.n_test = n - fit.n_train;
  if (fit.n_train < p || fit.n_test < 2) return fit;

  auto design = [&](std::size_t begin, std::size_t count) {
    Eigen::MatrixXd x(count, p);
    Eigen::MatrixXd y(count, 2);
    for (std::size_t r = 0; r < count; ++r) {
      const std::size_t idx = order[begin + r];
      x(r, 0) = 1.0;
      for (std::size_t c = 1; c < p; ++c) x(r, c) = features[idx][c - 1];
      y(r, 0) = targets[idx][0];
      y(r, 1) = targets[idx][1];
    }
    return std::make_pair(x, y);
  };
  auto [xt, yt] = design(0, fit.n_train);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xt);
  if (qr.rank() < static_cast<Eigen::Index>(p)) return fit;
  const Eigen::MatrixXd beta = qr.solve(yt);
  if (!beta.allFinite()) return fit;
  fit.degenerate = false;
  for (std::size_t c = 0; c < p; ++c) fit.coefficients.push_back({beta(c, 0), beta(c, 1)});

  auto [xs, ys] = design(fit.n_train, fit.n_test);
  const Eigen::MatrixXd pred = xs * beta;
  for (int axis = 0; axis < 2; ++axis) {
    const double mean = ys.col(axis).mean();
    const double ss_tot = (ys.col(axis).array() - mean).square().sum();
    const double ss_res = (ys.col(axis) - pred.col(axis)).squaredNorm();
    const double r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : nan();
    (axis == 0 ? fit.r2_x : fit.r2_y) = r2;
  }
  return fit;
}

void collect_samples(const Records& records, const sim::Trajectory& trajectory, const AssignmentReport& assignment,
                     double tau_active, std::vector<RegressionSamples>& per_capsule) {
  if (per_capsule.size() < records.k) per_capsule.resize(records.k);
  const std::size_t df = records.d - records.d_v;
  for (std::size_t i = 0; i < records.k; ++i) {
    const int obj = assignment.assignment[i];
    if (obj < 0) continue;
    const auto color = trajectory.object(static_cast<std::size_t>(obj)).color;
    // Colors are quantized to 8 bits per channel to form a class label.
    const std::size_t label = static_cast<std::size_t>(std::lround(color[0] * 255.0f)) * 65536 +
                              static_cast<std::size_t>(std::lround(color[1] * 255.0f)) * 256 +
                              static_cast<std::size_t>(std::lround(color[2] * 255.0f));
    for (std::size_t t = 0; t < records.steps.size(); ++t) {
      const auto& r = records.steps[t].r;
      if (!(r.act[i] > tau_active)) continue;
      const float* v = r.params.data() + i * records.d;
      auto& s = per_capsule[i];
      s.vf.emplace_back(v, v + df);
      s.vv.emplace_back(v + df, v + records.d);
      const auto rel = trajectory.relative_coords(t, static_cast<std::size_t>(obj));
      s.position.push_back({rel[0], rel[1]});
      s.color.push_back(label);
    }
  }
}

RegressionReport representation_regression(const std::vector<RegressionSamples>& per_capsule,
                                           std::size_t min_samples, std::uint64_t split_seed) {
  RegressionReport rep;
  double sx = 0, sy = 0, fx = 0, fy = 0;
  std::size_t nv = 0, nfx = 0, nfy = 0, nvy = 0;
  for (std::size_t i = 0; i < per_capsule.size(); ++i) {
    const auto& s = per_capsule[i];
    if (s.position.size() < std::max<std::size_t>(min_samples, 1)) continue;
    CapsuleRegression c;
    c.capsule = i;
    c.samples = s.position.size();
    c.vv = fit_heldout(s.vv, s.position, split_seed);
    if (!s.vf.empty() && !s.vf.front().empty()) c.vf = fit_heldout(s.vf, s.position, split_seed);
    if (!c.vv.degenerate) {
      if (std::isfinite(c.vv.r2_x)) sx += c.vv.r2_x, ++nv;
      if (std::isfinite(c.vv.r2_y)) sy += c.vv.r2_y, ++nvy;
    }
    if (!c.vf.degenerate) {
      if (std::isfinite(c.vf.r2_x)) fx += c.vf.r2_x, ++nfx;
      if (std::isfinite(c.vf.r2_y)) fy += c.vf.r2_y, ++nfy;
    }
    rep.capsules.push_back(std::move(c));
  }
  if (nv > 0) rep.r2_x = sx / static_cast<double>(nv);
  if (nvy > 0) rep.r2_y = sy / static_cast<double>(nvy);
  if (nfx > 0) rep.vf_r2_x = fx / static_cast<double>(nfx);
  if (nfy > 0) rep.vf_r2_y = fy / static_cast<double>(nfy);
  return rep;
}

// ---------------------------------------------------------------- separability

double silhouette(const std::vector<std::vector<double>>& points, const std::vector<std::size_t>& labels,
                  std::size_t max_points) {
  if (points.size() != labels.size()) throw DimensionError("silhouette: point and label counts differ");
  std::vector<std::size_t> idx;
  const std::size_t n_all = points.size();
  if (n_all <= max_points || max_points == 0) {
    idx.resize(n_all);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  } else {
    for (std::size_t i = 0; i < max_points; ++i) idx.push_back(i * n_all / max_points);
  }
  std::vector<std::size_t> classes;
  for (auto i : idx) classes.push_back(labels[i]);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) return nan();

  const std::size_t n = idx.size();
  std::vector<std::size_t> cls(n);
  std::vector<std::size_t> class_size(classes.size(), 0);
  for (std::size_t a = 0; a < n; ++a) {
    cls[a] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[idx[a]]) - classes.begin());
    ++class_size[cls[a]];
  }
  double total = 0.0;
  std::vector<double> dist_sum(classes.size());
  for (std::size_t a = 0; a < n; ++a) {
    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    const auto& pa = points[idx[a]];
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      const auto& pb = points[idx[b]];
      double sq = 0.0;
      for (std::size_t q = 0; q < pa.size(); ++q) sq += (pa[q] - pb[q]) * (pa[q] - pb[q]);
      dist_sum[cls[b]] += std::sqrt(sq);
    }
    if (class_size[cls[a]] < 2) continue;  // singleton: s = 0
    const double in = dist_sum[cls[a]] / static_cast<double>(class_size[cls[a]] - 1);
    double out = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (c != cls[a]) out = std::min(out, dist_sum[c] / static_cast<double>(class_size[c]));
    }
    const double denom = std::max(in, out);
    total += denom > 0.0 ? (out - in) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

double fixed_param_separability(const std::vector<RegressionSamples>& per_capsule, std::size_t max_points) {
  std::vector<std::vector<double>> points;
  std::vector<std::size_t> labels;
  for (const auto& s : per_capsule) {
    points.insert(points.end(), s.vf.begin(), s.vf.end());
    labels.insert(labels.end(), s.color.begin(), s.color.end());
  }
  if (points.empty() || points.front().empty()) return nan();
  return silhouette(points, labels, max_points);
}

// ---------------------------------------------------------------- occlusion

std::vector<std::vector<bool>> visibility_from_observations(const sim::Trajectory& trajectory) {
  std::vector<std::vector<bool>> vis(trajectory.n_objects, std::vector<bool>(trajectory.length, false));
  for (std::size_t j = 0; j < trajectory.n_objects; ++j) {
    const auto color = trajectory.object(j).color;
    for (std::size_t t = 0; t < trajectory.length; ++t) {
      const auto obs = trajectory.observation(t);
      for (std::size_t i = 0; i < trajectory.width && !vis[j][t]; ++i) {
        vis[j][t] = obs[3 * i] == color[0] && obs[3 * i + 1] == color[1] && obs[3 * i + 2] == color[2];
      }
    }
  }
  return vis;
}

std::vector<std::vector<bool>> visibility_from_poses(const sim::Trajectory& trajectory, const sim::SimConfig& sim) {
  std::vector<std::vector<bool>> vis(trajectory.n_objects, std::vector<bool>(trajectory.length, false));
  for (std::size_t t = 0; t < trajectory.length; ++t) {
    const auto world = trajectory.world(sim.arena_size, t);
    for (int h : sim::ray_hits(world, world.agent, sim))
      if (h >= 0) vis[static_cast<std::size_t>(h)][t] = true;
  }
  return vis;
}

std::vector<Gap> occlusion_gaps(const std::vector<std::vector<bool>>& visibility) {
  std::vector<Gap> gaps;
  for (std::size_t j = 0; j < visibility.size(); ++j) {
    const auto& v = visibility[j];
    bool seen = false;
    std::size_t begin = 0;
    for (std::size_t t = 0; t < v.size(); ++t) {
      if (v[t]) {
        if (seen && begin < t) gaps.push_back({j, begin, t});
        seen = true;
        begin = t + 1;
      }
    }
  }
  std::sort(gaps.begin(), gaps.end(), [](const Gap& a, const Gap& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.object < b.object;
  });
  return gaps;
}

double color_centroid(std::span<const float> observation, const sim::Rgb& color, double tolerance) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < observation.size() / 3; ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < 3; ++c) sq += std::pow(double{observation[3 * i + c]} - color[c], 2);
    if (std::sqrt(sq) < tolerance) {
      sum += static_cast<double>(i);
      ++count;
    }
  }
  return count == 0 ? nan() : sum / static_cast<double>(count);
}

OcclusionReport occlusion_persistence(const Records& records, const sim::Trajectory& trajectory,
                                      const AssignmentReport& assignment) {
  OcclusionReport rep;
  constexpr double kPredictedColorTolerance = 0.2;
  constexpr double kRealColorTolerance = 1e-6;
  for (const auto& gap : occlusion_gaps(visibility_from_observations(trajectory))) {
    OcclusionInterval iv;
    iv.gap = gap;
    for (std::size_t i = 0; i < assignment.assignment.size(); ++i) {
      if (assignment.assignment[i] == static_cast<int>(gap.object)) iv.capsule = static_cast<int>(i);
    }
    if (iv.capsule >= 0) {
      double s = 0.0;
      for (std::size_t t = gap.begin; t < gap.end; ++t) s += records.steps[t].r.act[static_cast<std::size_t>(iv.capsule)];
      iv.mean_activation = s / static_cast<double>(gap.length());
    }
    const auto color = trajectory.object(gap.object).color;
    const double real = color_centroid(trajectory.observation(gap.end), color, kRealColorTolerance);
    const double pred = color_centroid(records.steps[gap.end - 1].prediction, color, kPredictedColorTolerance);
    iv.reappear_error_px = std::isnan(pred) ? static_cast<double>(records.width) : std::abs(pred - real);
    rep.intervals.push_back(iv);
  }
  return rep;
}

OcclusionSummary summarize_occlusion(const std::vector<OcclusionInterval>& intervals, std::size_t max_gap) {
  OcclusionSummary s;
  std::vector<double> act, err;
  for (const auto& iv : intervals) {
    if (iv.gap.length() > max_gap) continue;
    act.push_back(iv.mean_activation);
    err.push_back(iv.reappear_error_px);
  }
  s.intervals = act.size();
  s.median_activation = median(act);
  s.median_error_px = median(err);
  return s;
}

// ---------------------------------------------------------------- reports

std::array<double, 3> channel_means(const std::vector<sim::Trajectory>& dataset) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t n = 0;
  for (const auto& e : dataset) {
    for (std::size_t i = 0; i < e.observations.size(); i += 3) {
      for (std::size_t c = 0; c < 3; ++c) sum[c] += e.observations[i + c];
      ++n;
    }
  }
  if (n > 0)
    for (auto& s : sum) s /= static_cast<double>(n);
  return sum;
}

double copy_baseline_mse(const sim::Trajectory& trajectory) {
  double s = 0.0;
  const std::size_t per = trajectory.width * 3;
  for (std::size_t t = 0; t + 1 < trajectory.length; ++t) {
    const auto a = trajectory.observation(t);
    const auto b = trajectory.observation(t + 1);
    for (std::size_t i = 0; i < per; ++i) s += std::pow(double{a[i]} - double{b[i]}, 2);
  }
  return s / static_cast<double>(per * (trajectory.length - 1));
}

double mean_baseline_mse(const sim::Trajectory& trajectory, const std::array<double, 3>& means) {
  double s = 0.0;
  const std::size_t per = trajectory.width * 3;
  for (std::size_t t = 1; t < trajectory.length; ++t) {
    const auto b = trajectory.observation(t);
    for (std::size_t i = 0; i < per; ++i) s += std::pow(means[i % 3] - double{b[i]}, 2);
  }
  return s / static_cast<double>(per * (trajectory.length - 1));
}

namespace {

struct EpisodeResult {
  EpisodeMetrics metrics;
  AssignmentReport assignment;
  std::vector<RegressionSamples> samples;
  std::vector<OcclusionInterval> occlusions;
};

EpisodeResult analyze_episode(model::ModelParameters<float>& params, const RunConfig& config,
                              const sim::Trajectory& trajectory, const std::array<double, 3>& means,
                              std::size_t index) {
  EpisodeResult out;
  const auto& an = config.analysis;
  const auto records = run_model(params, config.model, trajectory);
  auto& m = out.metrics;
  m.episode = std::to_string(index);
  double se = 0.0;
  for (std::size_t t = 0; t < records.steps.size(); ++t) {
    const auto real = trajectory.observation(t + 1);
    for (std::size_t i = 0; i < real.size(); ++i) {
      se += std::pow(double{records.steps[t].prediction[i]} - double{real[i]}, 2);
    }
  }
  m.mse = se / static_cast<double>(records.steps.size() * trajectory.width * 3);
  m.mse_mean_baseline = mean_baseline_mse(trajectory, means);
  m.mse_copy_baseline = copy_baseline_mse(trajectory);
  out.assignment = capsule_object_assignment(records, trajectory, config.sim, an.tau_assign);
  m.purity = out.assignment.purity;
  collect_samples(records, trajectory, out.assignment, an.tau_active, out.samples);
  const auto reg = representation_regression(out.samples, an.min_samples, an.split_seed);
  m.r2_x = reg.r2_x;
  m.r2_y = reg.r2_y;
  m.silhouette = fixed_param_separability(out.samples);
  out.occlusions = occlusion_persistence(records, trajectory, out.assignment).intervals;
  for (auto& iv : out.occlusions) iv.episode = index;
  const auto occ = summarize_occlusion(out.occlusions, an.max_occlusion_gap);
  m.occl_intervals = occ.intervals;
  m.occl_mean_act = occ.median_activation;
  m.occl_reappear_err_px = occ.median_error_px;
  return out;
}

}  // namespace

Evaluation evaluate(model::ModelParameters<float>& params, const RunConfig& config,
                    const std::vector<sim::Trajectory>& dataset, std::size_t threads) {
  if (dataset.empty()) throw std::runtime_error("no episodes");
  config.validate();
  const auto means = channel_means(dataset);
  std::vector<EpisodeResult> results(dataset.size());
  threads = std::max<std::size_t>(1, std::min(threads, dataset.size()));
  if (threads == 1) {
    for (std::size_t e = 0; e < dataset.size(); ++e) results[e] = analyze_episode(params, config, dataset[e], means, e);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t e = w; e < dataset.size(); e += threads) {
            results[e] = analyze_episode(params, config, dataset[e], means, e);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  Evaluation ev;
  std::vector<RegressionSamples> pooled(config.model.k);
  auto& all = ev.all;
  all.episode = "all";
  for (auto& r : results) {
    ev.episodes.push_back(r.metrics);
    ev.assignments.push_back(r.assignment);
    ev.occlusions.insert(ev.occlusions.end(), r.occlusions.begin(), r.occlusions.end());
    for (std::size_t i = 0; i < r.samples.size(); ++i) {
      auto& dst = pooled[i];
      auto& src = r.samples[i];
      dst.vv.insert(dst.vv.end(), src.vv.begin(), src.vv.end());
      dst.vf.insert(dst.vf.end(), src.vf.begin(), src.vf.end());
      dst.position.insert(dst.position.end(), src.position.begin(), src.position.end());
      dst.color.insert(dst.color.end(), src.color.begin(), src.color.end());
    }
    all.mse += r.metrics.mse;
    all.mse_mean_baseline += r.metrics.mse_mean_baseline;
    all.mse_copy_baseline += r.metrics.mse_copy_baseline;
    all.purity += r.metrics.purity;
  }
  const double n = static_cast<double>(results.size());
  all.mse /= n;
  all.mse_mean_baseline /= n;
  all.mse_copy_baseline /= n;
  all.purity /= n;
  ev.regression = representation_regression(pooled, config.analysis.min_samples, config.analysis.split_seed);
  all.r2_x = ev.regression.r2_x;
  all.r2_y = ev.regression.r2_y;
  ev.silhouette = fixed_param_separability(pooled);
  all.silhouette = ev.silhouette;
  const auto occ = summarize_occlusion(ev.occlusions, config.analysis.max_occlusion_gap);
  all.occl_intervals = occ.intervals;
  all.occl_mean_act = occ.median_activation;
  all.occl_reappear_err_px = occ.median_error_px;
  return ev;
}

std::string report_csv(const Evaluation& evaluation) {
  auto num = [](double v) {
    if (!std::isfinite(v)) v = 0.0;
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  auto row = [&](const EpisodeMetrics& m) {
    return m.episode + "," + num(m.mse) + "," + num(m.mse_mean_baseline) + "," + num(m.mse_copy_baseline) + "," +
           num(m.purity) + "," + num(m.r2_x) + "," + num(m.r2_y) + "," + num(m.silhouette) + "," +
           std::to_string(m.occl_intervals) + "," + num(m.occl_mean_act) + "," + num(m.occl_reappear_err_px) + "\n";
  };
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& m : evaluation.episodes) out += row(m);
  out += row(evaluation.all);
  return out;
}

}  // namespace capsworld::analysis
