#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kml/metalearn.hpp"

namespace kml {

enum class TransferLabel { positive, negative, neutral };
std::string to_string(TransferLabel label);
TransferLabel parse_transfer_label(const std::string& s);

// |lr - 1| <= epsilon counts as neutral.
struct NeutralBand {
  double epsilon = 0.01;
};

struct TransferenceRecord {
  std::uint64_t iteration = 0;
  std::size_t source_task_id = 0;
  std::size_t target_task_id = 0;
  int source_mode = 0;
  int target_mode = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double lr = 0.0;  // loss_after / loss_before; NaN when degenerate
  TransferLabel label = TransferLabel::neutral;
  bool degenerate = false;  // loss_before was zero
};

// Query loss of a task at the given shared parameters, adaptation included.
using LearnerLoss = std::function<Tensor(std::span<const Tensor> params, const TaskInstance& task)>;

// Binds a learner configuration: params are TrainState::trainable() order.
LearnerLoss make_learner_loss(const MetaLearnerConfig& cfg, const Architecture& arch,
                              const TrainState& layout);

// theta - alpha * grad L(theta; task). first_order treats inner-loop
// gradients inside the loss as constants.
std::vector<Tensor> step_wrt_task(std::span<const Tensor> theta, const TaskInstance& task,
                                  double alpha, const LearnerLoss& loss, bool first_order = false);

TransferLabel classify(double lr, NeutralBand band);
TransferLabel classify(const TransferenceRecord& record, NeutralBand band);

TransferenceRecord loss_ratio(std::span<const Tensor> theta, const TaskInstance& source,
                              const TaskInstance& target, double alpha, const LearnerLoss& loss,
                              NeutralBand band = {}, bool first_order = false);

struct TransferSetup {
  double alpha = 0.05;
  NeutralBand band;
  bool first_order = false;
  std::uint64_t iteration = 0;
  std::size_t target_task_id = 0;
};

// One record per source, each stepped from the same theta. Source ids are
// positions in `sources`.
std::vector<TransferenceRecord> measure_transference(std::span<const Tensor> theta,
                                                     std::span<const TaskInstance> sources,
                                                     const TaskInstance& target,
                                                     const LearnerLoss& loss,
                                                     const TransferSetup& setup);

struct HistogramSummary {
  std::vector<double> edges;       // ascending
  std::vector<std::size_t> counts; // edges.size() - 1 interior bins
  std::size_t underflow = 0;       // lr < edges.front()
  std::size_t overflow = 0;        // lr >= edges.back()
  std::size_t records = 0;         // non-degenerate records counted
  std::size_t degenerate = 0;      // excluded
  double positive_pct = 0.0;
  double negative_pct = 0.0;
  double neutral_pct = 0.0;
  double mean_lr = 0.0;
};

// `count` equal-width bins over [lo, hi].
std::vector<double> linear_edges(double lo, double hi, std::size_t count);

HistogramSummary summarize(std::span<const TransferenceRecord> records,
                           const std::vector<double>& edges, NeutralBand band);

struct TransferencePoint {
  std::uint64_t iteration = 0;
  double mean_lr = 0.0;
};

struct Snapshot {
  std::uint64_t iteration = 0;
  std::vector<Tensor> params;
};

// Per snapshot: mean over sources for each target, then mean over targets.
// Degenerate records are skipped.
std::vector<TransferencePoint> average_transference(std::span<const Snapshot> snapshots,
                                                    std::span<const TaskInstance> sources,
                                                    std::span<const TaskInstance> targets,
                                                    double alpha, const LearnerLoss& loss,
                                                    bool first_order = false);

}  // namespace kml
