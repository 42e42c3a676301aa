#pragma once

// Frobenius deviation between fine-tuned and pretrained weights, per-layer
// component ranking across tasks, and router weight export.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtu/denoiser.hpp"

namespace mtu::analysis {

/// Φ per entry. Throws CheckpointError naming the first mismatch when the
/// trees are not congruent.
template <class T>
std::map<std::string, double> frobenius_deviation(const ParamTree<T>& fine, const ParamTree<T>& pre);

/// kPooled groups block entries into SA, CA and FFN; kIndividual keeps
/// SA-Q..CA-O separate (plus FFN).
enum class Grouping { kPooled, kIndividual };

struct DeviationRow {
  std::size_t layer = 0;
  std::string component;
  double phi = 0.0;  // sqrt of the summed squared entry deviations
};

struct DeviationReport {
  TaskId task = TaskId::kIE;
  Grouping grouping = Grouping::kPooled;
  std::vector<DeviationRow> rows;  // sorted by (layer, component)
};

template <class T>
DeviationReport deviation_report(TaskId task, const ParamTree<T>& fine, const ParamTree<T>& pre,
                                 Grouping grouping = Grouping::kPooled);

/// Ranks with 1 = largest value; ties share the mean of the ranks they span.
std::vector<double> midranks_descending(std::span<const double> values);

struct RankRow {
  std::size_t layer = 0;
  std::string component;
  std::map<TaskId, double> phi;
  std::map<TaskId, double> rank;  // 1 = largest deviation within the layer
  double mean_phi = 0.0;
  double avg_rank = 0.0;            // 1 = largest
  double avg_rank_ascending = 0.0;  // 1 = smallest (n + 1 − avg_rank)
};

struct RankTable {
  std::vector<TaskId> tasks;
  std::vector<RankRow> rows;  // sorted by (layer, component)

  /// Layers in which `component` has strictly the best (lowest) average rank.
  std::size_t layers_led_by(const std::string& component) const;
  std::size_t layer_count() const;
};

/// Throws DataError for zero reports, mixed groupings, or reports that
/// disagree on the (layer, component) set.
RankTable rank_components(const std::vector<DeviationReport>& reports);

/// Header `layer,component,task,phi,rank`; one row per task plus a `mean` row
/// carrying the mean Φ and the average rank in the chosen convention.
std::string to_csv(const RankTable& table, bool ascending = false);

struct RouterDistribution {
  std::vector<TaskId> tasks;
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::map<std::pair<TaskId, std::size_t>, std::vector<double>> weights;
  std::map<std::pair<TaskId, std::size_t>, std::size_t> argmax;  // lowest index on ties

  /// Header `task,layer,expert,weight,argmax`.
  std::string to_csv() const;
};

/// Reads the cache when given, otherwise builds one from the model.
template <class T>
RouterDistribution export_router_distribution(const Denoiser<T>& model, const moe::TaskWeightCache<T>* cache = nullptr);

}  // namespace mtu::analysis
