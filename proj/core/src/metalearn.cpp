#include "kml/metalearn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kml/autodiff.hpp"

namespace kml {

LearnerKind parse_learner_kind(const std::string& s) {
  if (s == "protonet") return LearnerKind::protonet;
  if (s == "maml") return LearnerKind::maml;
  throw ConfigError("unknown learner '" + s + "' (expected protonet|maml)");
}

OuterOptimizer parse_outer_optimizer(const std::string& s) {
  if (s == "sgd") return OuterOptimizer::sgd;
  if (s == "adam") return OuterOptimizer::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

std::string to_string(LearnerKind kind) { return kind == LearnerKind::protonet ? "protonet" : "maml"; }
std::string to_string(OuterOptimizer opt) { return opt == OuterOptimizer::sgd ? "sgd" : "adam"; }

void MetaLearnerConfig::validate() const {
  if (!(inner_lr > 0.0)) throw ConfigError("inner_lr must be positive");
  if (!(outer_lr > 0.0)) throw ConfigError("outer_lr must be positive");
  if (kind == LearnerKind::maml && inner_steps < 1)
    throw ConfigError("inner_steps must be at least 1 for maml");
  if (kind == LearnerKind::protonet && inner_steps != 0)
    throw ConfigError("inner_steps must be 0 for protonet");
  if (meta_batch < 1) throw ConfigError("meta_batch must be at least 1");
  if (rank < 1) throw ConfigError("rank must be at least 1");
  if (d_upsilon < 1) throw ConfigError("d_upsilon must be positive");
  if (episode.n_way < 2) throw ConfigError("n_way must be at least 2");
  if (episode.k_shot < 1 || episode.m_query < 1) throw ConfigError("k_shot and m_query must be positive");
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
}

double outer_lr_at(const MetaLearnerConfig& cfg, std::uint64_t iteration) {
  if (cfg.lr_halve_every == 0) return cfg.outer_lr;
  return std::ldexp(cfg.outer_lr, -static_cast<int>(iteration / cfg.lr_halve_every));
}

// ---- state ------------------------------------------------------------------------

std::vector<Tensor> TrainState::trainable() const {
  std::vector<Tensor> out = base.tensors();
  if (modulated()) {
    for (const Tensor& t : encoder.tensors()) out.push_back(t);
    for (const Tensor& t : generator.tensors()) out.push_back(t);
  }
  return out;
}

TrainState TrainState::with_trainable(std::span<const Tensor> t) const {
  TrainState s = *this;
  const std::size_t nb = base.tensors().size();
  s.base = base.with_tensors(t.first(nb));
  if (modulated()) {
    const std::size_t ne = encoder.tensors().size();
    s.encoder = encoder.with_tensors(t.subspan(nb, ne));
    s.generator = generator.with_tensors(t.subspan(nb + ne));
  } else {
    require(t.size() == nb, "TrainState::with_trainable: tensor count mismatch");
  }
  return s;
}

std::vector<std::pair<std::string, Tensor>> TrainState::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_base = [&out](const std::string& prefix, const BaseParams& p) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      out.emplace_back(prefix + ".w" + std::to_string(l), p.weights[l]);
      out.emplace_back(prefix + ".b" + std::to_string(l), p.biases[l]);
    }
    if (p.has_head()) {
      out.emplace_back(prefix + ".head_w", p.head_weight);
      out.emplace_back(prefix + ".head_b", p.head_bias);
    }
  };
  add_base("base", base);
  if (modulated()) {
    add_base("enc", encoder.trunk);
    out.emplace_back("enc.proj_w", encoder.proj_weight);
    out.emplace_back("enc.proj_b", encoder.proj_bias);
    for (std::size_t l = 0; l < generator.layers.size(); ++l)
      for (std::size_t i = 0; i < generator.layers[l].size(); ++i)
        out.emplace_back("gen.l" + std::to_string(l) + "." + std::to_string(i), generator.layers[l][i]);
  }
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < adam_m.size() && i < n; ++i)
    out.emplace_back("adam_m." + out[i].first, adam_m[i]);
  for (std::size_t i = 0; i < adam_v.size() && i < n; ++i)
    out.emplace_back("adam_v." + out[i].first, adam_v[i]);
  return out;
}

Architecture resolve_architecture(const MetaLearnerConfig& cfg, const Shape& sample_shape) {
  return named_architecture(cfg.architecture, sample_shape);
}

TrainState init_train_state(const MetaLearnerConfig& cfg, const Architecture& arch) {
  cfg.validate();
  for (std::size_t s : cfg.shared_layers)
    if (s >= arch.layers.size())
      throw ConfigError("shared_layers entry " + std::to_string(s) + " exceeds the layer count " +
                        std::to_string(arch.layers.size()));
  TrainState s;
  // Stream offsets keep theta identical across modulation settings.
  const std::size_t head = cfg.kind == LearnerKind::maml ? cfg.episode.n_way : 0;
  s.base = init_base(arch, head, cfg.seed, 0, cfg.precision);
  if (cfg.modulation != ModulationKind::none) {
    s.encoder = init_encoder(arch, cfg.d_upsilon, cfg.seed, 1000, cfg.precision);
    s.generator = init_generator(arch, {cfg.modulation, cfg.structure, cfg.rank, cfg.d_upsilon},
                                 cfg.generator_init, cfg.generator_init_scale, cfg.seed, 2000,
                                 cfg.precision);
  }
  if (cfg.optimizer == OuterOptimizer::adam) {
    for (const Tensor& t : s.trainable()) {
      s.adam_m.push_back(Tensor::zeros(t.shape(), t.precision()));
      s.adam_v.push_back(Tensor::zeros(t.shape(), t.precision()));
    }
  }
  s.rng = Philox(cfg.seed, StreamDomain::training, 0).state();
  return s;
}

TrainState restore_train_state(const TrainState& layout,
                               const std::vector<std::pair<std::string, Tensor>>& named,
                               std::uint64_t iteration, const Philox::State& rng) {
  const auto expected = layout.named_tensors();
  if (named.size() != expected.size())
    throw IoError("checkpoint holds " + std::to_string(named.size()) + " tensors, expected " +
                  std::to_string(expected.size()));
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, tensor] = expected[i];
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& e) { return e.first == name; });
    if (it == named.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != tensor.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                    ", expected " + shape_str(tensor.shape()));
    values.push_back(it->second.detach());
  }
  const std::size_t n = layout.trainable().size();
  TrainState s = layout.with_trainable(std::span<const Tensor>(values).first(n));
  s.adam_m.assign(values.begin() + static_cast<long>(n),
                  values.begin() + static_cast<long>(n + layout.adam_m.size()));
  s.adam_v.assign(values.begin() + static_cast<long>(n + layout.adam_m.size()), values.end());
  s.iteration = iteration;
  s.rng = rng;
  return s;
}

// ---- learners ---------------------------------------------------------------------

namespace {

double argmax_accuracy(const Tensor& scores, std::span<const int> labels) {
  const std::size_t rows = scores.shape()[0], cols = scores.shape()[1];
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (scores[r * cols + c] > scores[r * cols + best]) best = c;
    correct += static_cast<int>(best) == labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(rows);
}

}  // namespace

EpisodeResult protonet_episode(const Architecture& arch, const TaskInstance& task,
                               const BaseParams& theta, std::span<const FilmLayer> film) {
  const std::size_t n = task.n_way, s = task.support_y.size();
  std::vector<double> counts(n, 0.0);
  for (int y : task.support_y) {
    require(y >= 0 && static_cast<std::size_t>(y) < n, "protonet_episode: support label out of range");
    counts[static_cast<std::size_t>(y)] += 1.0;
  }
  std::vector<double> averaging(n * s, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    const auto y = static_cast<std::size_t>(task.support_y[i]);
    averaging[y * s + i] = 1.0 / counts[y];
  }
  for (double c : counts) require(c > 0.0, "protonet_episode: a class has no support samples");

  Tensor fs = forward_base(arch, task.support_x, theta, film);
  Tensor fq = forward_base(arch, task.query_x, theta, film);
  Tensor prototypes = matmul(Tensor::from_values({n, s}, std::move(averaging)), fs);
  Tensor logits = neg(pairwise_sq_dist(fq, prototypes));
  return {softmax_cross_entropy(logits, task.query_y), argmax_accuracy(logits, task.query_y)};
}

std::vector<Tensor> inner_adapt(const std::function<Tensor(std::span<const Tensor>)>& loss,
                                std::vector<Tensor> params, double alpha, std::size_t steps,
                                bool first_order) {
  // Inner gradients need a graph even when the parameters came in as values.
  for (Tensor& t : params)
    if (!t.requires_grad()) t = t.as_parameter();
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Tensor> g = grad(loss(params), params, {.create_graph = !first_order});
    for (std::size_t i = 0; i < params.size(); ++i) params[i] = sgd_step(params[i], g[i], alpha);
  }
  return params;
}

BaseParams maml_adapt(const Architecture& arch, const TaskInstance& task, const BaseParams& theta,
                      double alpha, std::size_t steps, bool first_order,
                      std::span<const FilmLayer> film) {
  require(steps >= 1, "maml_adapt: steps must be at least 1");
  require(theta.has_head(), "maml_adapt: parameters need a classifier head");
  auto support_loss = [&](std::span<const Tensor> p) {
    return softmax_cross_entropy(forward_base(arch, task.support_x, theta.with_tensors(p), film),
                                 task.support_y);
  };
  return theta.with_tensors(inner_adapt(support_loss, theta.tensors(), alpha, steps, first_order));
}

EpisodeResult maml_episode(const Architecture& arch, const TaskInstance& task,
                           const BaseParams& theta, double alpha, std::size_t steps,
                           bool first_order, std::span<const FilmLayer> film) {
  BaseParams adapted = maml_adapt(arch, task, theta, alpha, steps, first_order, film);
  Tensor logits = forward_base(arch, task.query_x, adapted, film);
  return {softmax_cross_entropy(logits, task.query_y), argmax_accuracy(logits, task.query_y)};
}

ModulatedModel modulate_for_task(const MetaLearnerConfig& cfg, const Architecture& arch,
                                 const TrainState& state, const TaskInstance& task) {
  ModulatedModel m;
  m.theta = state.base;
  if (cfg.modulation == ModulationKind::none) return m;
  require(state.modulated(), "modulate_for_task: state carries no generator");
  m.upsilon = encode_task(arch, task.support_x, state.encoder);
  auto is_shared = [&cfg](std::size_t l) {
    return std::find(cfg.shared_layers.begin(), cfg.shared_layers.end(), l) != cfg.shared_layers.end();
  };
  if (cfg.modulation == ModulationKind::film) {
    m.film = film_generate(m.upsilon, state.generator, 1.0).layers;
    for (std::size_t l = 0; l < m.film.size(); ++l)
      if (is_shared(l)) {
        const std::size_t c = arch.layers[l].out;
        m.film[l] = {Tensor::full({c}, 1.0, cfg.precision), Tensor::zeros({c}, cfg.precision)};
      }
  } else {
    KmlParams mod = kml_generate(arch, m.upsilon, state.generator);
    m.theta = kml_modulate(state.base, mod, cfg.shared_layers);
  }
  return m;
}

EpisodeResult task_loss(const MetaLearnerConfig& cfg, const Architecture& arch,
                        const TrainState& state, const TaskInstance& task, bool first_order_inner) {
  ModulatedModel m = modulate_for_task(cfg, arch, state, task);
  if (cfg.kind == LearnerKind::protonet) return protonet_episode(arch, task, m.theta, m.film);
  return maml_episode(arch, task, m.theta, cfg.inner_lr, cfg.inner_steps, first_order_inner, m.film);
}

// ---- outer loop -------------------------------------------------------------------

StepResult meta_train_step(const TrainState& state, std::span<const TaskInstance> batch,
                           const MetaLearnerConfig& cfg, const Architecture& arch) {
  require(batch.size() == cfg.meta_batch, "meta_train_step: batch holds " +
                                              std::to_string(batch.size()) + " tasks, config says " +
                                              std::to_string(cfg.meta_batch));
  const std::vector<Tensor> current = state.trainable();
  std::vector<Tensor> params;
  for (const Tensor& t : current) params.push_back(t.as_parameter());
  const TrainState view = state.with_trainable(params);

  std::vector<std::vector<double>> total(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) total[i].assign(params[i].numel(), 0.0);
  StepResult result;
  // Per-task gradients are summed in task order so the result does not
  // depend on scheduling.
  for (std::size_t b = 0; b < batch.size(); ++b) {
    EpisodeResult r = task_loss(cfg, arch, view, batch[b], cfg.first_order);
    const double loss = r.loss.item();
    if (!std::isfinite(loss))
      throw DivergenceError("non-finite loss " + std::to_string(loss) + " at iteration " +
                            std::to_string(state.iteration + 1) + ", task " + std::to_string(b));
    std::vector<Tensor> g = cfg.kind == LearnerKind::maml ? grad2(r.loss, params, cfg.first_order)
                                                          : grad(r.loss, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto gv = g[i].values();
      for (std::size_t j = 0; j < gv.size(); ++j) total[i][j] += gv[j];
    }
    result.loss += loss;
    result.accuracy += r.accuracy;
  }
  result.loss /= static_cast<double>(batch.size());
  result.accuracy /= static_cast<double>(batch.size());
  for (const auto& g : total)
    for (double v : g)
      if (!std::isfinite(v))
        throw DivergenceError("non-finite gradient at iteration " + std::to_string(state.iteration + 1));

  const double lr = outer_lr_at(cfg, state.iteration);
  result.lr = lr;
  std::vector<Tensor> next;
  TrainState out = state;
  if (cfg.optimizer == OuterOptimizer::sgd) {
    NoGradGuard ng;
    for (std::size_t i = 0; i < current.size(); ++i)
      next.push_back(sgd_step(current[i], Tensor::from_values(current[i].shape(), total[i]), lr));
  } else {
    require(state.adam_m.size() == current.size(), "meta_train_step: adam state missing");
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double t = static_cast<double>(state.iteration + 1);
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    out.adam_m.clear();
    out.adam_v.clear();
    for (std::size_t i = 0; i < current.size(); ++i) {
      const Precision p = current[i].precision();
      std::vector<double> m(total[i].size()), v(total[i].size()), w(total[i].size());
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = total[i][j];
        m[j] = b1 * state.adam_m[i][j] + (1.0 - b1) * g;
        v[j] = b2 * state.adam_v[i][j] + (1.0 - b2) * g * g;
        w[j] = current[i][j] - lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
      out.adam_m.push_back(Tensor::from_values(current[i].shape(), std::move(m), p));
      out.adam_v.push_back(Tensor::from_values(current[i].shape(), std::move(v), p));
      next.push_back(Tensor::from_values(current[i].shape(), std::move(w), p));
    }
  }
  std::vector<Tensor> adam_m = std::move(out.adam_m), adam_v = std::move(out.adam_v);
  out = out.with_trainable(next);
  out.adam_m = std::move(adam_m);
  out.adam_v = std::move(adam_v);
  out.iteration = state.iteration + 1;
  result.state = std::move(out);
  return result;
}

std::vector<TaskInstance> draw_meta_batch(TrainState& state, const TaskDistribution& dist,
                                          const MetaLearnerConfig& cfg) {
  Philox rng = Philox::from_state(state.rng);
  const std::uint64_t episode_seed = rng.next_u64();
  state.rng = rng.state();
  std::vector<TaskInstance> batch;
  for (std::size_t b = 0; b < cfg.meta_batch; ++b)
    batch.push_back(sample_episode(dist, cfg.episode, Split::train, episode_seed, b));
  return batch;
}

TrainResult meta_train(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                       const TrainHooks& hooks) {
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  return meta_train(cfg, dist, init_train_state(cfg, arch), hooks);
}

TrainResult meta_train(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                       TrainState start, const TrainHooks& hooks) {
  cfg.validate();
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  const std::uint64_t val_seed = Philox(cfg.seed, StreamDomain::evaluation, 0).next_u64();
  TrainResult result;
  result.state = std::move(start);
  double loss_sum = 0.0, acc_sum = 0.0, lr_last = 0.0;
  std::size_t window = 0;
  while (result.state.iteration < cfg.iterations) {
    std::vector<TaskInstance> batch = draw_meta_batch(result.state, dist, cfg);
    StepResult step = meta_train_step(result.state, batch, cfg, arch);
    result.state = std::move(step.state);
    loss_sum += step.loss;
    acc_sum += step.accuracy;
    lr_last = step.lr;
    ++window;
    if (result.state.iteration % cfg.log_every == 0) {
      HistoryRow row;
      row.iteration = result.state.iteration;
      row.loss = loss_sum / static_cast<double>(window);
      row.accuracy = acc_sum / static_cast<double>(window);
      row.lr = lr_last;
      row.val_accuracy = std::numeric_limits<double>::quiet_NaN();
      if (cfg.val_episodes > 0)
        row.val_accuracy = meta_evaluate(cfg, arch, result.state, dist, cfg.val_episodes, val_seed).overall.mean;
      result.history.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
      loss_sum = acc_sum = 0.0;
      window = 0;
    }
    if (cfg.checkpoint_every > 0 && result.state.iteration % cfg.checkpoint_every == 0 &&
        hooks.on_checkpoint)
      hooks.on_checkpoint(result.state);
  }
  return result;
}

// ---- evaluation -------------------------------------------------------------------

namespace {

// ProtoNet runs without a graph; MAML adaptation needs one but drops the
// outer graph by taking first-order inner steps.
double episode_accuracy(const MetaLearnerConfig& cfg, const Architecture& arch,
                        const TrainState& state, const TaskInstance& task) {
  if (cfg.kind == LearnerKind::protonet) {
    NoGradGuard ng;
    return task_loss(cfg, arch, state, task, true).accuracy;
  }
  return task_loss(cfg, arch, state, task, true).accuracy;
}

AccuracyStat stat_of(const std::vector<double>& xs) {
  AccuracyStat s;
  s.episodes = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    s.half_width = 1.96 * sd / std::sqrt(static_cast<double>(xs.size()));
  }
  return s;
}

}  // namespace

EvalResult summarize_accuracies(std::span<const std::pair<int, double>> episodes) {
  require(episodes.size() >= 2, "evaluation needs at least 2 episodes");
  std::vector<double> all;
  std::map<int, std::vector<double>> by_mode;
  for (const auto& [mode, acc] : episodes) {
    all.push_back(acc);
    by_mode[mode].push_back(acc);
  }
  EvalResult r;
  r.overall = stat_of(all);
  for (const auto& [mode, xs] : by_mode) r.per_mode[mode] = stat_of(xs);
  return r;
}

EvalResult meta_evaluate(const MetaLearnerConfig& cfg, const Architecture& arch,
                         const TrainState& state, const TaskDistribution& dist,
                         std::size_t episodes, std::uint64_t seed) {
  require(episodes >= 2, "meta_evaluate: need at least 2 episodes");
  std::vector<std::pair<int, double>> results;
  for (std::size_t e = 0; e < episodes; ++e) {
    TaskInstance task = sample_episode(dist, cfg.episode, Split::test, seed, e);
    results.emplace_back(task.mode_id, episode_accuracy(cfg, arch, state, task));
  }
  return summarize_accuracies(results);
}

std::vector<EmbeddingRow> export_embeddings(const MetaLearnerConfig& cfg, const Architecture& arch,
                                            const TrainState& state, const TaskDistribution& dist,
                                            std::size_t episodes, std::uint64_t seed) {
  if (!state.modulated()) throw ConfigError("embedding export needs a modulated learner (film|kml)");
  NoGradGuard ng;
  std::vector<EmbeddingRow> rows;
  for (std::size_t e = 0; e < episodes; ++e) {
    TaskInstance task = sample_episode(dist, cfg.episode, Split::test, seed, e);
    Tensor v = encode_task(arch, task.support_x, state.encoder);
    rows.push_back({e, task.mode_id, {v.values().begin(), v.values().end()}});
  }
  return rows;
}

std::vector<BaselineResult> run_baselines(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                                          std::size_t eval_episodes, std::uint64_t eval_seed) {
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  std::vector<BaselineResult> out;
  auto train_eval = [&](MetaLearnerConfig c, const std::string& name) {
    TrainResult r = meta_train(c, dist);
    out.push_back({name, meta_evaluate(c, arch, r.state, dist, eval_episodes, eval_seed)});
  };

  MetaLearnerConfig vanilla = cfg;
  vanilla.modulation = ModulationKind::none;
  train_eval(vanilla, "joint");

  // Specialists see only their own mode; test episodes are routed by mode.
  std::vector<TrainState> specialists;
  for (std::size_t m = 0; m < dist.mode_count(); ++m)
    specialists.push_back(meta_train(vanilla, dist.restricted_to(m)).state);
  std::vector<std::pair<int, double>> routed;
  for (std::size_t e = 0; e < eval_episodes; ++e) {
    TaskInstance task = sample_episode(dist, cfg.episode, Split::test, eval_seed, e);
    std::size_t m = 0;
    while (dist.mode_id(m) != task.mode_id) ++m;
    routed.emplace_back(task.mode_id, episode_accuracy(vanilla, arch, specialists[m], task));
  }
  out.push_back({"per_mode", summarize_accuracies(routed)});

  MetaLearnerConfig film = cfg;
  film.modulation = ModulationKind::film;
  train_eval(film, "film");
  MetaLearnerConfig kml = cfg;
  kml.modulation = ModulationKind::kml;
  train_eval(kml, "kml");
  return out;
}

}  // namespace kml
