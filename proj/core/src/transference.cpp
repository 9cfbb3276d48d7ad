#include "kml/transference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kml/autodiff.hpp"

namespace kml {

std::string to_string(TransferLabel label) {
  switch (label) {
    case TransferLabel::positive: return "Positive";
    case TransferLabel::negative: return "Negative";
    case TransferLabel::neutral: return "Neutral";
  }
  return "?";
}

TransferLabel parse_transfer_label(const std::string& s) {
  if (s == "Positive") return TransferLabel::positive;
  if (s == "Negative") return TransferLabel::negative;
  if (s == "Neutral") return TransferLabel::neutral;
  throw IoError("unknown transference label '" + s + "'");
}

LearnerLoss make_learner_loss(const MetaLearnerConfig& cfg, const Architecture& arch,
                              const TrainState& layout) {
  return [cfg, arch, layout](std::span<const Tensor> params, const TaskInstance& task) {
    return task_loss(cfg, arch, layout.with_trainable(params), task, cfg.first_order).loss;
  };
}

std::vector<Tensor> step_wrt_task(std::span<const Tensor> theta, const TaskInstance& task,
                                  double alpha, const LearnerLoss& loss, bool first_order) {
  require(alpha >= 0.0, "step_wrt_task: alpha must be non-negative");
  std::vector<Tensor> params;
  for (const Tensor& t : theta) params.push_back(t.detach().as_parameter());
  std::vector<Tensor> g = grad2(loss(params, task), params, first_order);
  NoGradGuard ng;
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back(sgd_step(theta[i].detach(), g[i].detach(), alpha));
  return out;
}

TransferLabel classify(double lr, NeutralBand band) {
  require(band.epsilon >= 0.0, "neutral band must be non-negative");
  if (std::abs(lr - 1.0) <= band.epsilon) return TransferLabel::neutral;
  return lr < 1.0 ? TransferLabel::positive : TransferLabel::negative;
}

TransferLabel classify(const TransferenceRecord& record, NeutralBand band) {
  if (record.degenerate) return TransferLabel::neutral;
  return classify(record.lr, band);
}

namespace {

double evaluate(const LearnerLoss& loss, std::span<const Tensor> params, const TaskInstance& task) {
  // MAML-style losses differentiate inside; keep recording on but drop the result's graph.
  std::vector<Tensor> values;
  for (const Tensor& t : params) values.push_back(t.detach());
  return loss(values, task).item();
}

}  // namespace

TransferenceRecord loss_ratio(std::span<const Tensor> theta, const TaskInstance& source,
                              const TaskInstance& target, double alpha, const LearnerLoss& loss,
                              NeutralBand band, bool first_order) {
  TransferenceRecord r;
  r.source_mode = source.mode_id;
  r.target_mode = target.mode_id;
  r.loss_before = evaluate(loss, theta, target);
  r.loss_after = evaluate(loss, step_wrt_task(theta, source, alpha, loss, first_order), target);
  if (r.loss_before == 0.0) {
    r.degenerate = true;
    r.lr = std::numeric_limits<double>::quiet_NaN();
  } else {
    r.lr = r.loss_after / r.loss_before;
  }
  r.label = classify(r, band);
  return r;
}

std::vector<TransferenceRecord> measure_transference(std::span<const Tensor> theta,
                                                     std::span<const TaskInstance> sources,
                                                     const TaskInstance& target,
                                                     const LearnerLoss& loss,
                                                     const TransferSetup& setup) {
  require(!sources.empty(), "measure_transference: need at least one source task");
  std::vector<TransferenceRecord> out;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    TransferenceRecord r =
        loss_ratio(theta, sources[i], target, setup.alpha, loss, setup.band, setup.first_order);
    r.iteration = setup.iteration;
    r.source_task_id = i;
    r.target_task_id = setup.target_task_id;
    out.push_back(r);
  }
  return out;
}

std::vector<double> linear_edges(double lo, double hi, std::size_t count) {
  require(count >= 1 && hi > lo, "linear_edges: need hi > lo and at least one bin");
  std::vector<double> edges(count + 1);
  for (std::size_t i = 0; i <= count; ++i)
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count);
  return edges;
}

HistogramSummary summarize(std::span<const TransferenceRecord> records,
                           const std::vector<double>& edges, NeutralBand band) {
  require(!records.empty(), "summarize: no records");
  require(edges.size() >= 2 && std::is_sorted(edges.begin(), edges.end()),
          "summarize: need at least two ascending bin edges");
  HistogramSummary h;
  h.edges = edges;
  h.counts.assign(edges.size() - 1, 0);
  std::size_t pos = 0, neg = 0, neu = 0;
  double lr_sum = 0.0;
  for (const TransferenceRecord& r : records) {
    if (r.degenerate) {
      ++h.degenerate;
      continue;
    }
    ++h.records;
    lr_sum += r.lr;
    switch (classify(r, band)) {
      case TransferLabel::positive: ++pos; break;
      case TransferLabel::negative: ++neg; break;
      case TransferLabel::neutral: ++neu; break;
    }
    if (r.lr < edges.front()) {
      ++h.underflow;
    } else if (r.lr >= edges.back()) {
      ++h.overflow;
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), r.lr);
      ++h.counts[static_cast<std::size_t>(it - edges.begin()) - 1];
    }
  }
  require(h.records > 0, "summarize: every record is degenerate");
  const double n = static_cast<double>(h.records);
  h.positive_pct = 100.0 * static_cast<double>(pos) / n;
  h.negative_pct = 100.0 * static_cast<double>(neg) / n;
  h.neutral_pct = 100.0 * static_cast<double>(neu) / n;
  h.mean_lr = lr_sum / n;
  return h;
}

std::vector<TransferencePoint> average_transference(std::span<const Snapshot> snapshots,
                                                    std::span<const TaskInstance> sources,
                                                    std::span<const TaskInstance> targets,
                                                    double alpha, const LearnerLoss& loss,
                                                    bool first_order) {
  require(!snapshots.empty(), "average_transference: need at least one snapshot");
  require(!sources.empty() && !targets.empty(), "average_transference: need sources and targets");
  std::vector<TransferencePoint> curve;
  for (const Snapshot& snap : snapshots) {
    // Source steps do not depend on the target, so compute each once.
    std::vector<std::vector<Tensor>> stepped;
    for (const TaskInstance& s : sources)
      stepped.push_back(step_wrt_task(snap.params, s, alpha, loss, first_order));
    double target_sum = 0.0;
    std::size_t target_count = 0;
    for (const TaskInstance& t : targets) {
      const double before = evaluate(loss, snap.params, t);
      if (before == 0.0) continue;
      double source_sum = 0.0;
      for (const auto& after_params : stepped) source_sum += evaluate(loss, after_params, t) / before;
      target_sum += source_sum / static_cast<double>(sources.size());
      ++target_count;
    }
    curve.push_back({snap.iteration, target_count > 0 ? target_sum / static_cast<double>(target_count)
                                                      : std::numeric_limits<double>::quiet_NaN()});
  }
  return curve;
}

}  // namespace kml
