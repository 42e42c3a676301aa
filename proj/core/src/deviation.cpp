#include "mtu/deviation.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mtu/errors.hpp"
#include "mtu/moe.hpp"

namespace mtu::analysis {

namespace {

// Shortest round-trip form, so CSV values re-parse to the same double.
std::string num(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::optional<std::string> group_of(Component tag, Grouping g) {
  const auto cls = component_class(tag);
  if (cls == ComponentClass::kOther) return std::nullopt;
  if (g == Grouping::kPooled || cls == ComponentClass::kFfn) return std::string(component_class_name(cls));
  return std::string(component_name(tag));
}

}  // namespace

template <class T>
std::map<std::string, double> frobenius_deviation(const ParamTree<T>& fine, const ParamTree<T>& pre) {
  if (const auto bad = fine.first_mismatch(pre)) {
    throw CheckpointError("parameter trees are not congruent at '" + *bad + "'");
  }
  std::map<std::string, double> out;
  for (const auto& [name, e] : fine) {
    const auto a = e.value.data(), b = pre.tensor(name).data();
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      s += d * d;
    }
    out[name] = std::sqrt(s);
  }
  return out;
}

template <class T>
DeviationReport deviation_report(TaskId task, const ParamTree<T>& fine, const ParamTree<T>& pre, Grouping grouping) {
  const auto phi = frobenius_deviation(fine, pre);
  std::map<std::pair<std::size_t, std::string>, double> sq;
  for (const auto& [name, v] : phi) {
    const auto layer = names::layer_of(name);
    if (!layer) continue;
    const auto g = group_of(pre.at(name).tag, grouping);
    if (!g) continue;
    sq[{*layer, *g}] += v * v;
  }
  DeviationReport r{task, grouping, {}};
  for (const auto& [key, s] : sq) r.rows.push_back({key.first, key.second, std::sqrt(s)});
  return r;
}

std::vector<double> midranks_descending(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] > values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

RankTable rank_components(const std::vector<DeviationReport>& reports) {
  if (reports.empty()) throw DataError("ranking needs at least one deviation report");
  using Key = std::pair<std::size_t, std::string>;
  auto keys_of = [](const DeviationReport& r) {
    std::vector<Key> k;
    for (const auto& row : r.rows) k.emplace_back(row.layer, row.component);
    return k;
  };
  const auto keys = keys_of(reports.front());
  std::set<TaskId> seen;
  for (const auto& r : reports) {
    if (r.grouping != reports.front().grouping) throw DataError("deviation reports mix component groupings");
    if (keys_of(r) != keys) {
      throw DataError("deviation report for " + std::string(task_name(r.task)) +
                      " covers different layers or components than " + std::string(task_name(reports.front().task)));
    }
    if (!seen.insert(r.task).second) throw DataError("two deviation reports for task " + std::string(task_name(r.task)));
  }

  RankTable table;
  for (const auto& r : reports) table.tasks.push_back(r.task);
  for (const auto& [layer, comp] : keys) table.rows.push_back({layer, comp, {}, {}, 0, 0, 0});

  // Rows are sorted by (layer, component), so each layer is a contiguous run.
  for (std::size_t lo = 0; lo < keys.size();) {
    std::size_t hi = lo;
    while (hi < keys.size() && keys[hi].first == keys[lo].first) ++hi;
    const auto n = static_cast<double>(hi - lo);
    for (const auto& r : reports) {
      std::vector<double> phis;
      for (std::size_t i = lo; i < hi; ++i) phis.push_back(r.rows[i].phi);
      const auto ranks = midranks_descending(phis);
      for (std::size_t i = lo; i < hi; ++i) {
        table.rows[i].phi[r.task] = phis[i - lo];
        table.rows[i].rank[r.task] = ranks[i - lo];
      }
    }
    for (std::size_t i = lo; i < hi; ++i) {
      auto& row = table.rows[i];
      double ps = 0, rs = 0;
      for (auto t : table.tasks) {
        ps += row.phi[t];
        rs += row.rank[t];
      }
      const auto k = static_cast<double>(table.tasks.size());
      row.mean_phi = ps / k;
      row.avg_rank = rs / k;
      row.avg_rank_ascending = n + 1.0 - row.avg_rank;
    }
    lo = hi;
  }
  return table;
}

std::size_t RankTable::layer_count() const {
  std::set<std::size_t> layers;
  for (const auto& r : rows) layers.insert(r.layer);
  return layers.size();
}

std::size_t RankTable::layers_led_by(const std::string& component) const {
  std::size_t count = 0;
  for (std::size_t lo = 0; lo < rows.size();) {
    std::size_t hi = lo;
    while (hi < rows.size() && rows[hi].layer == rows[lo].layer) ++hi;
    std::optional<double> mine;
    double best_other = std::numeric_limits<double>::infinity();
    for (std::size_t i = lo; i < hi; ++i) {
      if (rows[i].component == component) {
        mine = rows[i].avg_rank;
      } else {
        best_other = std::min(best_other, rows[i].avg_rank);
      }
    }
    if (mine && *mine < best_other) ++count;
    lo = hi;
  }
  return count;
}

std::string to_csv(const RankTable& table, bool ascending) {
  std::ostringstream os;
  os << "layer,component,task,phi,rank\n";
  for (const auto& row : table.rows) {
    std::size_t n = 0;
    for (const auto& r : table.rows) n += r.layer == row.layer;
    for (auto t : table.tasks) {
      const double rank = ascending ? static_cast<double>(n) + 1.0 - row.rank.at(t) : row.rank.at(t);
      os << row.layer << ',' << row.component << ',' << task_name(t) << ',' << num(row.phi.at(t)) << ',' << num(rank)
         << '\n';
    }
    os << row.layer << ',' << row.component << ",mean," << num(row.mean_phi) << ','
       << num(ascending ? row.avg_rank_ascending : row.avg_rank) << '\n';
  }
  return os.str();
}

std::string RouterDistribution::to_csv() const {
  std::ostringstream os;
  os << "task,layer,expert,weight,argmax\n";
  for (const auto& [key, w] : weights) {
    const auto am = argmax.at(key);
    for (std::size_t i = 0; i < w.size(); ++i) {
      os << task_name(key.first) << ',' << key.second << ',' << i << ',' << num(w[i]) << ',' << (i == am ? 1 : 0)
         << '\n';
    }
  }
  return os.str();
}

template <class T>
RouterDistribution export_router_distribution(const Denoiser<T>& model, const moe::TaskWeightCache<T>* cache) {
  std::optional<moe::TaskWeightCache<T>> own;
  if (!cache) cache = &own.emplace(moe::TaskWeightCache<T>::build(model));
  RouterDistribution d;
  d.tasks = model.spec().tasks;
  d.layers = model.config().num_blocks;
  d.experts = model.spec().moe->num_experts;
  for (auto task : d.tasks) {
    for (std::size_t l = 0; l < d.layers; ++l) {
      const auto w = cache->weights(task, l);
      std::vector<double> v(w.begin(), w.end());
      d.argmax[{task, l}] = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
      d.weights[{task, l}] = std::move(v);
    }
  }
  return d;
}

template std::map<std::string, double> frobenius_deviation(const ParamTree<float>&, const ParamTree<float>&);
template std::map<std::string, double> frobenius_deviation(const ParamTree<double>&, const ParamTree<double>&);
template DeviationReport deviation_report(TaskId, const ParamTree<float>&, const ParamTree<float>&, Grouping);
template DeviationReport deviation_report(TaskId, const ParamTree<double>&, const ParamTree<double>&, Grouping);
template RouterDistribution export_router_distribution(const Denoiser<float>&, const moe::TaskWeightCache<float>*);
template RouterDistribution export_router_distribution(const Denoiser<double>&, const moe::TaskWeightCache<double>*);

}  // namespace mtu::analysis
