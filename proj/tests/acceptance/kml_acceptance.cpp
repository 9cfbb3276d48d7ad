// Acceptance suite: one PASS/FAIL line per criterion.
//
//   kml_acceptance                 run all eight
//   kml_acceptance -c 3 -c 5       run a subset

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kml/autodiff.hpp"
#include "kml/harness.hpp"
#include "oracles.hpp"

using namespace kml;
using kml::testing::finite_difference;
using kml::testing::matrix_rank;
using kml::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed sub-checks; the first few are reported.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++count_;
    if (!ok) {
      ++failed_;
      if (failures_.size() < 4) failures_.push_back(what);
    }
  }
  void note(const std::string& s) { notes_.push_back(s); }
  Outcome outcome() const {
    std::ostringstream o;
    o << (count_ - failed_) << "/" << count_ << " checks";
    for (const auto& n : notes_) o << "; " << n;
    for (const auto& f : failures_) o << "; FAILED " << f;
    return {failed_ == 0, o.str()};
  }

 private:
  std::size_t count_ = 0, failed_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

// ||a - n||_inf / max(||n||_inf, 1e-8)
double normwise_error(std::span<const double> a, std::span<const double> n) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max(scale, std::abs(n[i]));
  }
  return diff / std::max(scale, 1e-8);
}

// ---- 1 -------------------------------------------------------------------

Outcome parameter_accounting() {
  Checks c;
  const ParamReport r = param_report("paper-4conv", {}, 128, 1);
  const std::vector<std::size_t> mlp = {114688, 2367488, 9453568, 37781504};
  c.expect(r.single_mlp.per_layer == mlp, "single_mlp per-layer counts");
  c.expect(r.single_mlp.total == 49717248, "single_mlp total");
  c.expect(r.simplified.per_layer.at(0) == 11648, "simplified layer 1");
  c.expect(r.simplified.total == 384384, "simplified formula total");
  c.expect(r.reference_total == 327040, "reference total surfaced");
  c.expect(std::abs(r.ratio_reference - 152.0) < 0.5, "reference-based factor near 152");
  c.expect(std::abs(r.ratio_formula - 129.3) < 0.1, "formula-based factor near 129.3");
  const std::string text = param_report_text(r);
  c.expect(text.find("152.02") != std::string::npos && text.find("129.34") != std::string::npos,
           "report shows both factors");
  c.note("factors " + fmt(r.ratio_reference, 5) + " (reference) and " + fmt(r.ratio_formula, 5) + " (formula)");
  return c.outcome();
}

// ---- 2 -------------------------------------------------------------------

Outcome film_equivalence() {
  Checks c;
  const FilmCheck f64 = verify_film(2024, 100, Precision::f64);
  const FilmCheck f32 = verify_film(2024, 100, Precision::f32);
  c.expect(f64.max_rel_error < 1e-10, "64-bit max relative error < 1e-10");
  c.expect(f32.max_rel_error > 0.0 && f32.max_rel_error < 1e-3, "32-bit error in (0, 1e-3)");
  c.note("64-bit max " + fmt(f64.max_rel_error, 3) + ", 32-bit max " + fmt(f32.max_rel_error, 3));
  return c.outcome();
}

// ---- 3 -------------------------------------------------------------------

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Contracts a tensor-valued op against fixed random weights so every output
// element reaches the scalar.
ScalarFn contracted(std::function<Tensor(const std::vector<Tensor>&)> op, std::uint64_t seed) {
  auto weights = std::make_shared<Tensor>();
  return [op, weights, seed](const std::vector<Tensor>& in) {
    Tensor y = op(in);
    if (!weights->defined() || weights->shape() != y.shape()) {
      std::mt19937_64 g(seed);
      *weights = random_tensor(y.shape(), g);
    }
    return sum(mul(y, *weights));
  };
}

double gradient_error(const ScalarFn& f, const std::vector<Tensor>& values) {
  std::vector<Tensor> params;
  for (const Tensor& v : values) params.push_back(v.as_parameter());
  const auto analytic = grad(f(params), params);
  const auto numeric =
      finite_difference([&](const std::vector<Tensor>& p) { return f(p).item(); }, values, 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    worst = std::max(worst, normwise_error(analytic[i].values(), numeric[i]));
  return worst;
}

// Values kept away from relu's kink.
Tensor away_from_zero(const Shape& s, std::mt19937_64& g) {
  Tensor t = random_tensor(s, g, 0.1, 1.0);
  std::vector<double> v(t.values().begin(), t.values().end());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i % 2) v[i] = -v[i];
  return Tensor::from_values(s, v);
}

TaskDistribution blob_pair(std::size_t dim) {
  ModeSpec a;
  a.kind = ModeKind::blob;
  a.flat_dim = dim;
  a.noise = 0.4;
  a.weight = 0.5;
  ModeSpec b = a;
  b.noise = 0.8;
  return TaskDistribution({a, b}, 31);
}

Outcome gradient_correctness() {
  Checks c;
  std::mt19937_64 g(7);
  auto R = [&g](Shape s) { return random_tensor(s, g); };
  const std::vector<int> labels = {2, 0, 1, 1};
  struct Case {
    std::string name;
    std::function<Tensor(const std::vector<Tensor>&)> op;
    std::vector<Tensor> inputs;
  };
  const ConvGeometry g11{1, 1}, g20{2, 0};
  std::vector<Case> cases = {
      {"add", [](auto& p) { return add(p[0], p[1]); }, {R({3, 4}), R({3, 4})}},
      {"sub", [](auto& p) { return sub(p[0], p[1]); }, {R({3, 4}), R({3, 4})}},
      {"mul", [](auto& p) { return mul(p[0], p[1]); }, {R({3, 4}), R({3, 4})}},
      {"scale", [](auto& p) { return scale(p[0], -1.7); }, {R({5})}},
      {"add_scalar", [](auto& p) { return add_scalar(p[0], 0.3); }, {R({5})}},
      {"neg", [](auto& p) { return neg(p[0]); }, {R({5})}},
      {"relu", [](auto& p) { return relu(p[0]); }, {away_from_zero({4, 3}, g)}},
      {"exp", [](auto& p) { return exp(p[0]); }, {R({4, 3})}},
      {"sum", [](auto& p) { return sum(p[0]); }, {R({2, 3})}},
      {"mean", [](auto& p) { return mean(p[0]); }, {R({2, 3})}},
      {"expand", [](auto& p) { return expand(sum(p[0]), {2, 2}); }, {R({3})}},
      {"reshape", [](auto& p) { return reshape(p[0], {3, 2}); }, {R({2, 3})}},
      {"slice", [](auto& p) { return slice(p[0], 2, 3); }, {R({7})}},
      {"pad", [](auto& p) { return pad(p[0], 2, 8); }, {R({4})}},
      {"matmul", [](auto& p) { return matmul(p[0], p[1]); }, {R({3, 4}), R({4, 2})}},
      {"transpose", [](auto& p) { return transpose(p[0]); }, {R({3, 4})}},
      {"sum_rows", [](auto& p) { return sum_rows(p[0]); }, {R({3, 4})}},
      {"broadcast_rows", [](auto& p) { return broadcast_rows(p[0], 3); }, {R({4})}},
      {"sum_cols", [](auto& p) { return sum_cols(p[0]); }, {R({3, 4})}},
      {"broadcast_cols", [](auto& p) { return broadcast_cols(p[0], 3); }, {R({4})}},
      {"log_softmax", [](auto& p) { return log_softmax(p[0]); }, {R({3, 5})}},
      {"channel_sum", [](auto& p) { return channel_sum(p[0]); }, {R({2, 3, 4, 4})}},
      {"channel_broadcast", [](auto& p) { return channel_broadcast(p[0], {2, 3, 2, 2}); }, {R({3})}},
      {"spatial_sum", [](auto& p) { return spatial_sum(p[0]); }, {R({2, 3, 4, 4})}},
      {"spatial_expand", [](auto& p) { return spatial_expand(p[0], 3, 2); }, {R({2, 3})}},
      {"conv2d s1p1", [g11](auto& p) { return conv2d(p[0], p[1], g11); }, {R({2, 3, 5, 5}), R({4, 3, 3, 3})}},
      {"conv2d s2p0", [g20](auto& p) { return conv2d(p[0], p[1], g20); }, {R({2, 2, 7, 7}), R({3, 2, 3, 3})}},
      {"conv2d+bias", [g11](auto& p) { return conv2d(p[0], p[1], p[2], g11); },
       {R({1, 2, 4, 4}), R({3, 2, 3, 3}), R({3})}},
      {"conv2d_input_grad", [g11](auto& p) { return conv2d_input_grad(p[0], p[1], {2, 3, 5, 5}, g11); },
       {R({2, 4, 5, 5}), R({4, 3, 3, 3})}},
      {"conv2d_weight_grad", [g20](auto& p) { return conv2d_weight_grad(p[0], p[1], {3, 2, 3, 3}, g20); },
       {R({2, 2, 7, 7}), R({2, 3, 3, 3})}},
      {"cast f64", [](auto& p) { return cast(p[0], Precision::f64); }, {R({2, 3})}},
      {"dense", [](auto& p) { return dense(p[0], p[1], p[2]); }, {R({4, 5}), R({3, 5}), R({3})}},
      {"add_channel_bias", [](auto& p) { return add_channel_bias(p[0], p[1]); }, {R({2, 3, 3, 3}), R({3})}},
      {"channel_scale", [](auto& p) { return channel_scale(p[0], p[1]); }, {R({2, 3, 3, 3}), R({3})}},
      {"average_pool", [](auto& p) { return average_pool(p[0]); }, {R({2, 3, 4, 4})}},
      {"mean_rows", [](auto& p) { return mean_rows(p[0]); }, {R({4, 3})}},
      {"outer", [](auto& p) { return outer(p[0], p[1]); }, {R({3}), R({4})}},
      {"matvec", [](auto& p) { return matvec(p[0], p[1]); }, {R({3, 4}), R({4})}},
      {"pairwise_sq_dist", [](auto& p) { return pairwise_sq_dist(p[0], p[1]); }, {R({4, 3}), R({2, 3})}},
      {"softmax_cross_entropy", [&labels](auto& p) { return softmax_cross_entropy(p[0], labels); },
       {R({4, 3})}},
      {"mse", [](auto& p) { return mse(p[0], p[1]); }, {R({3, 2}), R({3, 2})}},
      {"sgd_step", [](auto& p) { return sgd_step(p[0], p[1], 0.3); }, {R({4}), R({4})}},
  };
  double worst = 0.0;
  std::uint64_t seed = 100;
  for (const Case& k : cases) {
    const double e = gradient_error(contracted(k.op, seed++), k.inputs);
    worst = std::max(worst, e);
    c.expect(e < 1e-4, k.name + " (" + fmt(e, 3) + ")");
  }
  c.note(std::to_string(cases.size()) + " primitives, worst " + fmt(worst, 3));

  // Composed losses on a small conv net and a dense net.
  const TaskDistribution blobs = blob_pair(6);
  const Architecture dense2 = dense_architecture(6, {5, 4});
  BaseParams theta = init_base(dense2, 0, 3, 0);
  for (auto& b : theta.biases) b = random_tensor(b.shape(), g, -0.1, 0.1);
  const TaskInstance t = sample_episode(blobs, {3, 2, 2}, Split::train, 4);
  const double proto = gradient_error(
      [&](const std::vector<Tensor>& p) { return protonet_episode(dense2, t, theta.with_tensors(p)).loss; },
      theta.tensors());
  c.expect(proto < 1e-4, "protonet loss (" + fmt(proto, 3) + ")");

  ModeSpec glyph;
  glyph.kind = ModeKind::glyph;
  glyph.height = glyph.width = 6;
  const TaskDistribution images({glyph}, 5);
  const Architecture conv = conv_architecture({1, 6, 6}, {3, 4}, 3, {2, 1});
  BaseParams ctheta = init_base(conv, 0, 4, 0);
  for (auto& b : ctheta.biases) b = random_tensor(b.shape(), g, 0.05, 0.2);
  const TaskInstance ct = sample_episode(images, {2, 1, 2}, Split::train, 2);
  const double cproto = gradient_error(
      [&](const std::vector<Tensor>& p) { return protonet_episode(conv, ct, ctheta.with_tensors(p)).loss; },
      ctheta.tensors());
  c.expect(cproto < 1e-4, "conv protonet loss (" + fmt(cproto, 3) + ")");

  const Architecture head = dense_architecture(6, {6});
  const BaseParams mtheta = init_base(head, 3, 4, 0);
  const TaskInstance mt = sample_episode(blobs, {3, 2, 2}, Split::train, 6);
  const double fo = gradient_error(
      [&](const std::vector<Tensor>& p) { return maml_episode(head, mt, mtheta.with_tensors(p), 0.0, 1, true).loss; },
      mtheta.tensors());
  c.expect(fo < 1e-4, "maml query loss at alpha 0 (" + fmt(fo, 3) + ")");

  // Second-order meta-gradient through one inner step on a 2-layer dense net.
  const Architecture two = dense_architecture(6, {6, 5});
  BaseParams ttheta = init_base(two, 3, 8, 0);
  std::vector<Tensor> params;
  for (const Tensor& v : ttheta.tensors()) params.push_back(v.as_parameter());
  const auto analytic = grad2(maml_episode(two, mt, ttheta.with_tensors(params), 0.3, 1, false).loss, params, false);
  const auto numeric = finite_difference(
      [&](const std::vector<Tensor>& p) { return maml_episode(two, mt, ttheta.with_tensors(p), 0.3, 1, false).loss.item(); },
      ttheta.tensors(), 1e-6);
  double second = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    second = std::max(second, normwise_error(analytic[i].values(), numeric[i]));
  c.expect(second < 1e-3, "maml second-order meta-gradient (" + fmt(second, 3) + ")");
  c.note("maml second-order " + fmt(second, 3));
  return c.outcome();
}

// ---- 4 -------------------------------------------------------------------

Outcome kml_identities() {
  Checks c;
  std::mt19937_64 g(17);
  const Architecture arch = conv_architecture({2, 8, 8}, {4, 6, 5}, 3, {1, 1});
  BaseParams theta = init_base(arch, 0, 3, 0);
  for (auto& b : theta.biases) b = random_tensor(b.shape(), g);

  for (GeneratorInit init : {GeneratorInit::zero, GeneratorInit::zero_output}) {
    const GeneratorParams gen = init_generator(arch, {ModulationKind::kml, GeneratorStructure::simplified, 2, 6},
                                               init, 1.0, 9, 0);
    const BaseParams hat = kml_modulate(theta, kml_generate(arch, random_tensor({6}, g), gen));
    bool same = true;
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const auto a = hat.weights[l].values(), b = theta.weights[l].values();
      const auto ab = hat.biases[l].values(), bb = theta.biases[l].values();
      same = same && std::equal(a.begin(), a.end(), b.begin()) && std::equal(ab.begin(), ab.end(), bb.begin());
    }
    const Tensor x = random_tensor({3, 2, 8, 8}, g);
    const Tensor y0 = forward_base(arch, x, theta), y1 = forward_base(arch, x, hat);
    same = same && std::equal(y0.values().begin(), y0.values().end(), y1.values().begin());
    c.expect(same, "zero modulation is bitwise vanilla (" + to_string(init) + ")");
  }

  // FiLM subsumption: v = eta - 1 against an all-ones partner, delta_b = (eta - 1) b + gamma.
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<FilmLayer> film;
    KmlParams mod;
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const std::size_t no = arch.layers[l].out, row = arch.layers[l].fan_in();
      const Tensor eta = random_tensor({no}, g, 0.2, 2.0), gamma = random_tensor({no}, g);
      film.push_back({eta, gamma});
      const Tensor v = add_scalar(eta, -1.0);
      mod.layers.push_back({reshape(outer(v, Tensor::full({row}, 1.0)), arch.layers[l].weight_shape()),
                            add(mul(v, theta.biases[l]), gamma)});
    }
    const Tensor x = random_tensor({2, 2, 8, 8}, g);
    const Tensor yf = forward_base(arch, x, theta, film), yk = forward_base(arch, x, kml_modulate(theta, mod));
    worst = std::max(worst, normwise_error(yk.values(), yf.values()));
  }
  c.expect(worst < 1e-10, "FiLM subsumption within 1e-10 (" + fmt(worst, 3) + ")");

  // Rank of the reshaped modulation matrix.
  std::size_t generations = 0;
  const Architecture small = conv_architecture({3, 6, 6}, {5}, 3, {1, 1});
  for (std::size_t r = 1; r <= 3; ++r) {
    std::size_t bad = 0;
    for (int i = 0; i < 1000; ++i) {
      const GeneratorParams gen = init_generator(small, {ModulationKind::kml, GeneratorStructure::simplified, r, 4},
                                                 GeneratorInit::uniform, 1.0, 1000 * r + i, 0);
      const KmlParams k = kml_generate(small, random_tensor({4}, g), gen);
      const Tensor m = kml_matrix(k.layers[0]);
      std::vector<double> values(m.values().begin(), m.values().end());
      bad += matrix_rank(values, m.shape()[0], m.shape()[1]) > r;
      ++generations;
    }
    c.expect(bad == 0, "rank <= " + std::to_string(r) + " (" + std::to_string(bad) + " violations)");
  }
  c.note(std::to_string(generations) + " generations rank-checked, subsumption err " + fmt(worst, 3));
  return c.outcome();
}

// ---- 5 -------------------------------------------------------------------

Tensor regression_loss(std::span<const Tensor> p, const TaskInstance& task) {
  const Tensor r = sub(matmul(task.support_x, reshape(p[0], {p[0].numel(), 1})), task.query_x);
  return scale(sum(mul(r, r)), 0.5);
}

TaskInstance regression_task(std::vector<double> x, std::size_t rows, std::size_t cols, std::vector<double> y) {
  TaskInstance t;
  t.support_x = Tensor::from_values({rows, cols}, std::move(x));
  t.query_x = Tensor::from_values({rows, 1}, std::move(y));
  return t;
}

Outcome transference_laws() {
  Checks c;
  MetaLearnerConfig cfg;
  cfg.kind = LearnerKind::protonet;
  cfg.modulation = ModulationKind::kml;
  cfg.generator_init = GeneratorInit::uniform;
  cfg.generator_init_scale = 0.1;
  cfg.episode = {5, 1, 3};
  cfg.d_upsilon = 8;
  cfg.seed = 5;
  ModeSpec glyph;
  glyph.kind = ModeKind::glyph;
  glyph.height = glyph.width = 10;
  glyph.weight = 0.5;
  ModeSpec texture = glyph;
  texture.kind = ModeKind::texture;
  const TaskDistribution dist({glyph, texture}, 21);
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  const TrainState state = init_train_state(cfg, arch);
  const std::vector<Tensor> theta = state.trainable();
  const LearnerLoss loss = make_learner_loss(cfg, arch, state);

  std::vector<TaskInstance> sources;
  const TaskDistribution glyphs = dist.restricted_to(0);
  for (std::uint64_t i = 0; i < 300; ++i) sources.push_back(sample_episode(glyphs, cfg.episode, Split::train, 77, i));
  const TaskInstance target = sample_episode(dist.restricted_to(1), cfg.episode, Split::test, 78, 0);

  TransferSetup zero;
  zero.alpha = 0.0;
  const auto still = measure_transference(theta, std::span(sources).first(50), target, loss, zero);
  c.expect(std::all_of(still.begin(), still.end(), [](const auto& r) { return r.lr == 1.0; }), "alpha 0 gives lr 1");

  const TaskInstance solved = regression_task({1, 0, 0, 1, 1, 1}, 3, 2, {2, -1, 1});
  const TaskInstance other = regression_task({0.5, -1, 2, 0.3, 1, 1, -0.7, 0.2}, 4, 2, {1, 0, -1, 2});
  const std::vector<Tensor> w = {Tensor::from_values({2}, {2.0, -1.0})};
  c.expect(loss_ratio(w, solved, other, 0.5, regression_loss).lr == 1.0, "converged source gives lr 1");

  // Hessian diag(4, 1): step sizes under 2/4 descend.
  const TaskInstance quad = regression_task({2, 0, 0, 1}, 2, 2, {1, 1});
  const std::vector<Tensor> w0 = {Tensor::from_values({2}, {3.0, -2.0})};
  bool below = true, monotone = true;
  double prev = 0.0;
  for (double a : {0.45, 0.3, 0.1, 0.03, 0.01, 1e-3, 1e-4}) {
    const double lr = loss_ratio(w0, quad, quad, a, regression_loss).lr;
    below = below && lr < 1.0;
    if (a < 0.3) monotone = monotone && lr > prev;
    prev = lr;
  }
  c.expect(below, "self-transference lr < 1 under the curvature bound");
  c.expect(monotone, "self-transference lr rises toward 1 as alpha shrinks");

  TransferSetup setup;
  setup.alpha = 0.05;
  const auto records = measure_transference(theta, sources, target, loss, setup);
  c.expect(records.size() == 300, "300 records");
  // Straight-line oracle: per source, per scalar parameter.
  const double before = task_loss(cfg, arch, state, target, false).loss.item();
  double worst = 0.0;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    std::vector<Tensor> leaves;
    for (const Tensor& t : theta) leaves.push_back(t.detach().as_parameter());
    const auto gr = grad(task_loss(cfg, arch, state.with_trainable(leaves), sources[s], false).loss, leaves);
    std::vector<Tensor> stepped;
    for (std::size_t p = 0; p < theta.size(); ++p) {
      std::vector<double> v(theta[p].values().begin(), theta[p].values().end());
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = v[k] - 0.05 * gr[p][k];
      stepped.push_back(Tensor::from_values(theta[p].shape(), std::move(v)));
    }
    const double after = task_loss(cfg, arch, state.with_trainable(stepped), target, false).loss.item();
    worst = std::max({worst, std::abs(records[s].loss_before - before), std::abs(records[s].loss_after - after),
                      std::abs(records[s].lr - after / before)});
  }
  c.expect(worst <= 1e-12, "two-loop oracle within 1e-12 (" + fmt(worst, 3) + ")");
  const HistogramSummary h = summarize(records, linear_edges(0.9, 1.1, 20), setup.band);
  const double total = h.positive_pct + h.negative_pct + h.neutral_pct;
  c.expect(std::abs(total - 100.0) <= 1e-9, "P + N + Nu = 100");
  c.note("oracle gap " + fmt(worst, 3) + ", P/N/Nu " + fmt(h.positive_pct, 3) + "/" + fmt(h.negative_pct, 3) + "/" +
         fmt(h.neutral_pct, 3));
  return c.outcome();
}

// ---- 6 and 7: desk-scale experiments ---------------------------------------

// Pinned experiment settings.
struct DeskExperiment {
  std::size_t image = 12;
  double glyph_noise = 0.5;
  double texture_noise = 0.3;
  // Narrow enough that one shared embedding has to trade the two modes off.
  std::string architecture = "conv:4,8,8";
  EpisodeShape episode{5, 1, 5};
  std::size_t meta_batch = 4;
  std::size_t iterations = 1500;
  double outer_lr = 1e-3;  // Adam at its stock settings
  std::size_t d_upsilon = 32;
  std::size_t eval_episodes = 500;
};

TaskDistribution glyph_texture(const DeskExperiment& e, std::uint64_t seed) {
  ModeSpec glyph;
  glyph.kind = ModeKind::glyph;
  glyph.height = glyph.width = e.image;
  glyph.noise = e.glyph_noise;
  glyph.weight = 0.5;
  ModeSpec texture = glyph;
  texture.kind = ModeKind::texture;
  texture.noise = e.texture_noise;
  return TaskDistribution({glyph, texture}, seed);
}

MetaLearnerConfig desk_config(const DeskExperiment& e, ModulationKind modulation, std::uint64_t seed) {
  MetaLearnerConfig cfg;
  cfg.kind = LearnerKind::protonet;
  cfg.modulation = modulation;
  cfg.architecture = e.architecture;
  cfg.episode = e.episode;
  cfg.meta_batch = e.meta_batch;
  cfg.iterations = e.iterations;
  cfg.optimizer = OuterOptimizer::adam;
  cfg.outer_lr = e.outer_lr;
  cfg.d_upsilon = e.d_upsilon;
  cfg.seed = seed;
  return cfg;
}

double trained_accuracy(const MetaLearnerConfig& cfg, const TaskDistribution& dist, std::size_t episodes) {
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  const TrainResult r = meta_train(cfg, dist);
  return meta_evaluate(cfg, arch, r.state, dist, episodes, cfg.seed + 1000).overall.mean;
}

Outcome desk_experiment() {
  Checks c;
  const DeskExperiment e;
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double vanilla = 0.0, kml = 0.0, shared = 0.0;
  std::string per_seed;
  for (std::uint64_t s : seeds) {
    const TaskDistribution dist = glyph_texture(e, s);
    const double v = trained_accuracy(desk_config(e, ModulationKind::none, s), dist, e.eval_episodes);
    const double k = trained_accuracy(desk_config(e, ModulationKind::kml, s), dist, e.eval_episodes);
    MetaLearnerConfig all = desk_config(e, ModulationKind::kml, s);
    const Architecture arch = resolve_architecture(all, dist.sample_shape());
    for (std::size_t l = 0; l < arch.layers.size(); ++l) all.shared_layers.push_back(l);
    const double a = trained_accuracy(all, dist, e.eval_episodes);
    vanilla += v;
    kml += k;
    shared += a;
    per_seed += " " + fmt(100 * v, 3) + "/" + fmt(100 * k, 3) + "/" + fmt(100 * a, 3);
  }
  const double n = static_cast<double>(seeds.size());
  vanilla /= n;
  kml /= n;
  shared /= n;
  c.expect(kml - vanilla >= 0.02, "KML beats vanilla by >= 2 points");
  c.expect(kml >= shared, "no shared layers >= all layers shared");
  c.note("vanilla " + fmt(100 * vanilla, 4) + "%, KML " + fmt(100 * kml, 4) + "%, all-shared " +
         fmt(100 * shared, 4) + "%; per seed v/k/s" + per_seed);
  return c.outcome();
}

// Plain ProtoNet on the joint distribution; sources and targets both come
// from the texture mode (train and test categories respectively).
struct DynamicsExperiment {
  DeskExperiment base;
  std::size_t sources = 300;
  std::size_t targets = 10;
  // Small enough that the ratio tracks gradient alignment, not curvature.
  double alpha = 1e-3;
  int mode = 1;
};

Outcome transference_dynamics() {
  Checks c;
  const DynamicsExperiment e;
  std::size_t wins = 0;
  std::string per_seed;
  for (std::uint64_t s : {1, 2, 3}) {
    const TaskDistribution dist = glyph_texture(e.base, s);
    MetaLearnerConfig cfg = desk_config(e.base, ModulationKind::none, s);
    const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
    const std::size_t early = std::max<std::size_t>(1, e.base.iterations / 20);
    const std::size_t late = e.base.iterations * 4 / 5;
    cfg.iterations = early;
    const TrainState s5 = meta_train(cfg, dist).state;
    cfg.iterations = late;
    const TrainState s80 = meta_train(cfg, dist, s5).state;

    const TaskDistribution compatible = dist.restricted_to(static_cast<std::size_t>(e.mode));
    Philox seeds(s, StreamDomain::transfer, 0);
    const std::uint64_t source_seed = seeds.next_u64(), target_seed = seeds.next_u64();
    std::vector<TaskInstance> sources, targets;
    for (std::size_t i = 0; i < e.sources; ++i)
      sources.push_back(sample_episode(compatible, cfg.episode, Split::train, source_seed, i));
    for (std::size_t i = 0; i < e.targets; ++i)
      targets.push_back(sample_episode(compatible, cfg.episode, Split::test, target_seed, i));
    const std::vector<Snapshot> snaps = {{s5.iteration, s5.trainable()}, {s80.iteration, s80.trainable()}};
    const auto curve = average_transference(snaps, sources, targets, e.alpha, make_learner_loss(cfg, arch, s5));
    wins += curve[1].mean_lr < curve[0].mean_lr;
    per_seed += " " + fmt(curve[0].mean_lr, 7) + "->" + fmt(curve[1].mean_lr, 7);
  }
  c.expect(wins >= 2, "late mean lr below early in >= 2 of 3 seeds");
  c.note(std::to_string(wins) + "/3 seeds; mean lr at 5% -> 80%:" + per_seed);
  return c.outcome();
}

// ---- 8 -------------------------------------------------------------------

Outcome reproducibility(const fs::path& work) {
  Checks c;
  const std::string text = "learner=protonet\niterations=8\nmeta_batch=2\nouter_lr=0.01\nmodulation=kml\n"
                           "optimizer=adam\nd_upsilon=4\nepisode.n_way=3\nepisode.m_query=2\neval.episodes=10\n"
                           "embed.episodes=3\ncheckpoint_every=4\n"
                           "mode.0.kind=glyph\nmode.0.height=8\nmode.0.width=8\nmode.0.weight=0.5\n"
                           "mode.1.kind=texture\nmode.1.height=8\nmode.1.width=8\nmode.1.weight=0.5\n";
  std::ostringstream log;
  RunConfig a = parse_config(text), b = a;
  a.output_dir = (work / "a").string();
  b.output_dir = (work / "b").string();
  const TrainOutcome ra = train_run(a, std::nullopt, log);
  train_run(b, std::nullopt, log);
  c.expect(read_text(work / "a" / "history.csv") == read_text(work / "b" / "history.csv"),
           "identical configs give byte-identical history");

  // Resume from the iteration-4 checkpoint.
  RunConfig r = a;
  r.output_dir = (work / "resumed").string();
  const TrainOutcome rr = train_run(r, work / "a" / "checkpoints" / "iter_4.bin", log);
  bool bitwise = rr.result.history.size() == 4;
  for (std::size_t i = 0; bitwise && i < 4; ++i)
    bitwise = rr.result.history[i].loss == ra.result.history[i + 4].loss &&
              rr.result.history[i].accuracy == ra.result.history[i + 4].accuracy;
  c.expect(bitwise, "resumed losses match bitwise");
  c.expect(read_text(work / "resumed" / "checkpoint.bin") == read_text(work / "a" / "checkpoint.bin"),
           "resumed final checkpoint byte-identical");

  const Checkpoint ck = load_checkpoint(work / "a" / "checkpoint.bin");
  save_checkpoint(work / "again.bin", ck);
  c.expect(read_text(work / "again.bin") == read_text(work / "a" / "checkpoint.bin"), "save-load-save identical");

  const std::string history = read_text(work / "a" / "history.csv");
  c.expect(history_csv(parse_history_csv(history)) == history, "history CSV round trip");
  transfer_run([&] {
    RunConfig t = a;
    t.transfer.sources = 20;
    return t;
  }(), work / "a" / "checkpoint.bin", log);
  const std::string tcsv = read_text(work / "a" / "transference.csv");
  c.expect(transference_csv(parse_transference_csv(tcsv)) == tcsv, "transference CSV round trip");
  c.expect(render_config(parse_config(read_text(work / "a" / "config.resolved"))) ==
               read_text(work / "a" / "config.resolved"),
           "resolved config round trip");
  const std::string report = report_run(work / "a");
  c.expect(report_run(work / "a") == report, "report regeneration identical");
  bool json_ok = true;
  for (const char* f : {"eval.json", "transference.json", "report.json"}) {
    try {
      const auto j = nlohmann::ordered_json::parse(read_text(work / "a" / f));
      json_ok = json_ok && j.dump(2) + "\n" == read_text(work / "a" / f);
    } catch (const std::exception&) {
      json_ok = false;
    }
  }
  c.expect(json_ok, "JSON outputs parse and re-serialize identically");
  return c.outcome();
}

struct Criterion {
  int id;
  std::string title;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "kml_acceptance").string();
  app.add_option("-c,--criterion", only, "Run only these criteria (1-8)");
  app.add_option("--work-dir", work, "Scratch directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const fs::path work_dir = work;
  std::vector<Criterion> all = {
      {1, "parameter accounting", 1, parameter_accounting},
      {2, "FiLM and kernel modulation agree", 30, film_equivalence},
      {3, "gradient correctness", 120, gradient_correctness},
      {4, "KML identities", 60, kml_identities},
      {5, "transference laws", 120, transference_laws},
      {6, "desk-scale KML vs vanilla", 900, desk_experiment},
      {7, "transference dynamics", 600, transference_dynamics},
      {8, "reproducibility plumbing", 120, [&] {
         fs::remove_all(work_dir / "ac8");
         fs::create_directories(work_dir / "ac8");
         return reproducibility(work_dir / "ac8");
       }},
  };

  bool ok = true;
  for (const Criterion& k : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), k.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = k.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > k.budget_s) {
      o.pass = false;
      o.detail += "; over runtime budget of " + fmt(k.budget_s) + " s";
    }
    ok = ok && o.pass;
    std::cout << "AC" << k.id << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << k.title << " [" << fmt(secs, 3)
              << " s] " << o.detail << std::endl;
  }
  return ok ? 0 : 1;
}
