#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kml/config.hpp"
#include "kml/persist.hpp"

namespace kml {

enum ExitCode : int { exit_ok = 0, exit_io = 1, exit_config = 2, exit_divergence = 3 };

// Runs fn and maps the error taxonomy onto exit codes, printing one
// diagnostic line to err. Capacity errors count as config errors.
int guarded(const std::function<void()>& fn, std::ostream& err);

struct TrainOutcome {
  TrainResult result;
  std::optional<EvalResult> eval;
};

// Writes config.resolved, history.csv, checkpoint.bin (plus
// checkpoints/iter_N.bin every checkpoint_every), eval.json when
// eval.episodes >= 2, embeddings.csv when embed.episodes > 0.
TrainOutcome train_run(const RunConfig& cfg, const std::optional<std::filesystem::path>& resume,
                       std::ostream& log);

struct TransferOutcome {
  std::vector<TransferenceRecord> records;
  HistogramSummary summary;
};

// Sources: train-split episodes of transfer.source_mode (all modes at -1).
// Targets: test-split episodes of transfer.target_mode.
struct TransferTasks {
  std::vector<TaskInstance> sources;
  std::vector<TaskInstance> targets;
};
TransferTasks transfer_tasks(const RunConfig& cfg, const TaskDistribution& dist);

// Writes transference.csv and transference.json.
TransferOutcome transfer_run(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                             std::ostream& log);

struct ParamReport {
  std::string architecture;
  std::size_t d_upsilon = 0;
  std::size_t rank = 1;
  ParamCount single_mlp;
  ParamCount simplified;
  // d (k^2 Ni + No) per layer: the simplified map with a single No term.
  ParamCount single_bias;
  // Reference counts for the 4-conv stack at d = 128, rank 1.
  std::vector<std::size_t> reference_simplified;
  std::size_t reference_total = 0;
  double ratio_formula = 0.0;    // single_mlp / simplified
  double ratio_reference = 0.0;  // single_mlp / reference_total
};

ParamReport param_report(const std::string& arch_name, const Shape& input, std::size_t d_upsilon,
                         std::size_t rank);
std::string param_report_text(const ParamReport& r);
std::string param_report_json(const ParamReport& r);

struct FilmCheck {
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
};

// max |a - b| / max |b| between the feature-space path (FiLM after each
// layer) and the kernel-space path (each pair folded into its layer).
double film_stack_error(const Architecture& arch, const Tensor& x, const BaseParams& params,
                        std::span<const FilmLayer> film);
// Random 4-layer conv stacks, biases and FiLM pairs drawn from (seed, trial).
FilmCheck verify_film(std::uint64_t seed, std::size_t trials, Precision precision);

// Consolidates a run directory into report.json and returns its text.
std::string report_run(const std::filesystem::path& dir);

// Writes baselines.json.
std::vector<BaselineResult> baselines_run(const RunConfig& cfg, std::ostream& log);

}  // namespace kml
