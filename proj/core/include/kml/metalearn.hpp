#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kml/modulation.hpp"
#include "kml/network.hpp"
#include "kml/random.hpp"
#include "kml/sampler.hpp"

namespace kml {

enum class LearnerKind { protonet, maml };
enum class OuterOptimizer { sgd, adam };

LearnerKind parse_learner_kind(const std::string& s);
OuterOptimizer parse_outer_optimizer(const std::string& s);
std::string to_string(LearnerKind kind);
std::string to_string(OuterOptimizer opt);

struct MetaLearnerConfig {
  LearnerKind kind = LearnerKind::protonet;
  double inner_lr = 0.05;
  double outer_lr = 0.001;
  std::size_t inner_steps = 0;  // >= 1 for maml, 0 for protonet
  std::size_t meta_batch = 10;
  bool first_order = false;

  ModulationKind modulation = ModulationKind::none;
  GeneratorStructure structure = GeneratorStructure::simplified;
  std::size_t rank = 1;
  GeneratorInit generator_init = GeneratorInit::zero_output;
  double generator_init_scale = 1.0;
  std::vector<std::size_t> shared_layers;
  std::size_t d_upsilon = 128;

  std::string architecture = "desk";
  EpisodeShape episode;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  OuterOptimizer optimizer = OuterOptimizer::sgd;
  std::size_t lr_halve_every = 0;  // 0 keeps the outer rate constant
  std::size_t log_every = 1;
  std::size_t val_episodes = 0;    // test-split episodes per log row; 0 skips
  std::size_t checkpoint_every = 0;
  Precision precision = Precision::f64;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

double outer_lr_at(const MetaLearnerConfig& cfg, std::uint64_t iteration);

/// Everything an outer step updates, plus the episode RNG.
struct TrainState {
  BaseParams base;
  EncoderParams encoder;      // empty unless modulated
  GeneratorParams generator;  // empty unless modulated
  // Adam moments, aligned with trainable(); empty for SGD.
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  std::uint64_t iteration = 0;
  Philox::State rng{};

  bool modulated() const { return encoder.proj_weight.defined(); }
  // base, then encoder, then generator tensors.
  std::vector<Tensor> trainable() const;
  TrainState with_trainable(std::span<const Tensor> tensors) const;
  // Stable names for checkpoints: base.*, enc.*, gen.*, adam_m.*, adam_v.*
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

Architecture resolve_architecture(const MetaLearnerConfig& cfg, const Shape& sample_shape);

TrainState init_train_state(const MetaLearnerConfig& cfg, const Architecture& arch);

// Rebuilds a state from named tensors (the inverse of named_tensors), using
// `layout` for structure. Missing or misshapen entries raise IoError.
TrainState restore_train_state(const TrainState& layout,
                               const std::vector<std::pair<std::string, Tensor>>& named,
                               std::uint64_t iteration, const Philox::State& rng);

struct EpisodeResult {
  Tensor loss;
  double accuracy = 0.0;
};

// Prototypes are class means of embedded support rows; queries score
// -||f(x) - c_n||^2. Film pairs, if given, are applied inside forward_base.
EpisodeResult protonet_episode(const Architecture& arch, const TaskInstance& task,
                               const BaseParams& theta, std::span<const FilmLayer> film = {});

// `steps` differentiable gradient steps on an arbitrary loss. Parameters that
// do not require grad are promoted to graph roots first.
std::vector<Tensor> inner_adapt(const std::function<Tensor(std::span<const Tensor>)>& loss,
                                std::vector<Tensor> params, double alpha, std::size_t steps,
                                bool first_order);

// `steps` gradient steps on the support cross-entropy from theta. Inner
// gradients keep their graph unless first_order.
BaseParams maml_adapt(const Architecture& arch, const TaskInstance& task, const BaseParams& theta,
                      double alpha, std::size_t steps, bool first_order,
                      std::span<const FilmLayer> film = {});

EpisodeResult maml_episode(const Architecture& arch, const TaskInstance& task,
                           const BaseParams& theta, double alpha, std::size_t steps,
                           bool first_order, std::span<const FilmLayer> film = {});

/// Modulated parameters for one task: theta-hat plus the film pairs (empty
/// unless film modulation is configured).
struct ModulatedModel {
  BaseParams theta;
  std::vector<FilmLayer> film;
  Tensor upsilon;  // undefined without modulation
};

ModulatedModel modulate_for_task(const MetaLearnerConfig& cfg, const Architecture& arch,
                                 const TrainState& state, const TaskInstance& task);

// Query loss of one task under the configured learner and modulation.
EpisodeResult task_loss(const MetaLearnerConfig& cfg, const Architecture& arch,
                        const TrainState& state, const TaskInstance& task,
                        bool first_order_inner);

struct StepResult {
  TrainState state;
  double loss = 0.0;      // mean query loss over the batch
  double accuracy = 0.0;  // mean query accuracy over the batch
  double lr = 0.0;
};

// One outer update on the summed batch loss. The input state is untouched.
StepResult meta_train_step(const TrainState& state, std::span<const TaskInstance> batch,
                           const MetaLearnerConfig& cfg, const Architecture& arch);

struct HistoryRow {
  std::uint64_t iteration = 0;  // 1-based count of completed iterations
  double loss = 0.0;
  double accuracy = 0.0;
  double val_accuracy = 0.0;  // NaN when not measured
  double lr = 0.0;
};

struct TrainHooks {
  std::function<void(const HistoryRow&)> on_log;
  std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  std::vector<HistoryRow> history;
};

// Draws the meta-batch of the next iteration and advances state.rng.
std::vector<TaskInstance> draw_meta_batch(TrainState& state, const TaskDistribution& dist,
                                          const MetaLearnerConfig& cfg);

TrainResult meta_train(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                       const TrainHooks& hooks = {});
// Continues from `start` until cfg.iterations iterations are complete.
TrainResult meta_train(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                       TrainState start, const TrainHooks& hooks = {});

struct AccuracyStat {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 standard errors
  std::size_t episodes = 0;
};

struct EvalResult {
  AccuracyStat overall;
  std::map<int, AccuracyStat> per_mode;
};

// Mean and 95% half-width over per-episode (mode, accuracy) pairs.
EvalResult summarize_accuracies(std::span<const std::pair<int, double>> episodes);

// Test-split episodes 0..episodes-1 of the stream keyed by seed.
EvalResult meta_evaluate(const MetaLearnerConfig& cfg, const Architecture& arch,
                         const TrainState& state, const TaskDistribution& dist,
                         std::size_t episodes, std::uint64_t seed);

struct EmbeddingRow {
  std::size_t episode = 0;
  int mode_id = 0;
  std::vector<double> upsilon;
};

std::vector<EmbeddingRow> export_embeddings(const MetaLearnerConfig& cfg, const Architecture& arch,
                                            const TrainState& state, const TaskDistribution& dist,
                                            std::size_t episodes, std::uint64_t seed);

/// The four-way comparison: one learner on the joint distribution, one
/// learner per mode, FiLM-modulated and KML-modulated learners.
struct BaselineResult {
  std::string name;
  EvalResult eval;
};

std::vector<BaselineResult> run_baselines(const MetaLearnerConfig& cfg, const TaskDistribution& dist,
                                          std::size_t eval_episodes, std::uint64_t eval_seed);

}  // namespace kml
