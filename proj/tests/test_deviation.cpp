#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mtu/deviation.hpp"
#include "mtu/errors.hpp"
#include "mtu/moe.hpp"
#include "test_util.hpp"

namespace mtu::analysis {
namespace {

ParamTree<double> two_entry_tree(double a, double b) {
  ParamTree<double> t;
  t.add("block0.sa.q.weight", {2}, {a, a}, Component::kSaQ);
  t.add("block0.ffn.w1.weight", {1}, {b}, Component::kFfn);
  return t;
}

TEST(Frobenius, KnownValue) {
  const auto pre = two_entry_tree(0, 0), fine = two_entry_tree(1, 3);
  const auto phi = frobenius_deviation(fine, pre);
  EXPECT_DOUBLE_EQ(phi.at("block0.sa.q.weight"), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(phi.at("block0.ffn.w1.weight"), 3.0);
}

TEST(Frobenius, IsAMetricOnCongruentTrees) {
  const auto m = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kT2I, 1);
  auto a = m.params().clone(), b = m.params().clone(), c = m.params().clone();
  testing::jitter(a, 2, 0.1, true);
  testing::jitter(b, 3, 0.1, true);
  testing::jitter(c, 4, 0.1, true);
  const auto ab = frobenius_deviation(a, b), ba = frobenius_deviation(b, a);
  const auto bc = frobenius_deviation(b, c), ac = frobenius_deviation(a, c), aa = frobenius_deviation(a, a);
  for (const auto& [name, v] : ab) {
    EXPECT_EQ(v, ba.at(name));
    EXPECT_EQ(aa.at(name), 0.0);
    EXPECT_LE(ac.at(name), v + bc.at(name) + 1e-12);
  }
}

TEST(Frobenius, RejectsMismatchedTrees) {
  auto a = two_entry_tree(0, 0);
  ParamTree<double> b;
  b.add("block0.sa.q.weight", {3}, {0, 0, 0}, Component::kSaQ);
  b.add("block0.ffn.w1.weight", {1}, {0}, Component::kFfn);
  try {
    frobenius_deviation(a, b);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("block0.sa.q.weight"), std::string::npos);
  }
}

TEST(Midranks, TiesShareTheMeanRank) {
  EXPECT_EQ(midranks_descending(std::vector<double>{3, 1, 2}), (std::vector<double>{1, 3, 2}));
  EXPECT_EQ(midranks_descending(std::vector<double>{5, 5, 1}), (std::vector<double>{1.5, 1.5, 3}));
  EXPECT_EQ(midranks_descending(std::vector<double>{2, 2, 2}), (std::vector<double>{2, 2, 2}));
  // Midranks always sum to n(n+1)/2.
  Rng rng(5);
  std::uniform_int_distribution<int> small(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + static_cast<std::size_t>(trial % 7));
    for (auto& x : v) x = small(rng);
    double s = 0;
    for (double r : midranks_descending(v)) s += r;
    const double n = static_cast<double>(v.size());
    EXPECT_DOUBLE_EQ(s, n * (n + 1) / 2);
  }
}

// Fine-tuned copy whose block parameters move by a per-class amount.
ParamTree<double> shifted(const ParamTree<double>& pre, double sa, double ca, double ffn) {
  auto out = pre.clone();
  for (auto& [name, e] : out) {
    double by = 0;
    switch (component_class(e.tag)) {
      case ComponentClass::kSa: by = sa; break;
      case ComponentClass::kCa: by = ca; break;
      case ComponentClass::kFfn: by = ffn; break;
      case ComponentClass::kOther: by = 1.0; break;  // must not affect the ranking
    }
    for (auto& v : e.value.mutable_data()) v += by;
  }
  return out;
}

TEST(Report, PoolsByComponentClassPerLayer) {
  const auto m = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kT2I, 6);
  const auto fine = shifted(m.params(), 0.1, 0.2, 0.3);
  const auto r = deviation_report(TaskId::kIE, fine, m.params());
  ASSERT_EQ(r.rows.size(), 3 * testing::tiny_config().num_blocks);
  // Oracle: pooled Φ = sqrt(Σ entry Φ²) = shift·sqrt(#coordinates in the class).
  std::map<std::pair<std::size_t, std::string>, std::size_t> count;
  for (const auto& [name, e] : m.params()) {
    const auto layer = names::layer_of(name);
    const auto cls = component_class(e.tag);
    if (!layer || cls == ComponentClass::kOther) continue;
    count[{*layer, std::string(component_class_name(cls))}] += e.value.numel();
  }
  const std::map<std::string, double> shift{{"SA", 0.1}, {"CA", 0.2}, {"FFN", 0.3}};
  for (const auto& row : r.rows) {
    const auto k = static_cast<double>(count.at({row.layer, row.component}));
    EXPECT_NEAR(row.phi, shift.at(row.component) * std::sqrt(k), 1e-9) << row.layer << " " << row.component;
  }
  const auto ind = deviation_report(TaskId::kIE, fine, m.params(), Grouping::kIndividual);
  EXPECT_EQ(ind.rows.size(), 9 * testing::tiny_config().num_blocks);
}

TEST(Ranking, AveragesRanksAcrossTasks) {
  const auto m = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kT2I, 7);
  const auto& pre = m.params();
  // Big shifts so the ordering is the shift ordering regardless of class size.
  const std::vector<DeviationReport> reports{
      deviation_report(TaskId::kIE, shifted(pre, 0.0, 0.0, 5.0), pre),
      deviation_report(TaskId::kSR, shifted(pre, 0.0, 5.0, 0.0), pre),
      deviation_report(TaskId::kIP, shifted(pre, 0.0, 0.0, 5.0), pre)};
  const auto table = rank_components(reports);
  EXPECT_EQ(table.layer_count(), testing::tiny_config().num_blocks);
  EXPECT_EQ(table.layers_led_by("FFN"), table.layer_count());
  EXPECT_EQ(table.layers_led_by("SA"), 0u);
  for (const auto& row : table.rows) {
    EXPECT_DOUBLE_EQ(row.avg_rank + row.avg_rank_ascending, 4.0);
    double s = 0;
    for (auto t : table.tasks) s += row.rank.at(t);
    EXPECT_DOUBLE_EQ(row.avg_rank, s / 3);
    if (row.component == "FFN") {
      EXPECT_DOUBLE_EQ(row.rank.at(TaskId::kIE), 1.0);
      EXPECT_DOUBLE_EQ(row.rank.at(TaskId::kSR), 2.5);  // tied with SA at zero
    }
  }
}

TEST(Ranking, InvariantToUniformScaling) {
  const auto m = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kT2I, 8);
  const auto& pre = m.params();
  auto fine = pre.clone();
  testing::jitter(fine, 9, 0.1, true);
  auto r = deviation_report(TaskId::kIE, fine, pre);
  auto scaled = r;
  for (auto& row : scaled.rows) row.phi *= 7.5;
  const auto a = rank_components({r}), b = rank_components({scaled});
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].avg_rank, b.rows[i].avg_rank);
}

TEST(Ranking, RejectsInconsistentReports) {
  const auto m = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kT2I, 10);
  const auto& pre = m.params();
  const auto pooled = deviation_report(TaskId::kIE, pre, pre);
  const auto ind = deviation_report(TaskId::kSR, pre, pre, Grouping::kIndividual);
  EXPECT_THROW(rank_components({}), DataError);
  EXPECT_THROW(rank_components({pooled, ind}), DataError);
  EXPECT_THROW(rank_components({pooled, pooled}), DataError);
  auto fewer = pooled;
  fewer.task = TaskId::kIP;
  fewer.rows.pop_back();
  EXPECT_THROW(rank_components({pooled, fewer}), DataError);
}

TEST(Csv, HeaderRowsAndRoundTrip) {
  RankTable t;
  t.tasks = {TaskId::kIE, TaskId::kSR};
  for (const char* comp : {"CA", "FFN", "SA"}) {
    RankRow r;
    r.layer = 0;
    r.component = comp;
    r.phi = {{TaskId::kIE, 0.1}, {TaskId::kSR, 1.0 / 3}};
    r.rank = {{TaskId::kIE, 1}, {TaskId::kSR, 2}};
    r.mean_phi = (0.1 + 1.0 / 3) / 2;
    r.avg_rank = 1.5;
    r.avg_rank_ascending = 2.5;
    t.rows.push_back(r);
  }
  const auto csv = to_csv(t);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,component,task,phi,rank");
  std::getline(is, line);
  EXPECT_EQ(line, "0,CA,IE,0.1,1");
  std::getline(is, line);
  EXPECT_EQ(std::stod(line.substr(line.find("SR,") + 3)), 1.0 / 3);
  std::getline(is, line);
  EXPECT_EQ(line.substr(0, 10), "0,CA,mean,");
  EXPECT_EQ(line.substr(line.rfind(',') + 1), "1.5");
  const auto asc = to_csv(t, true);
  EXPECT_NE(asc.find("0,CA,IE,0.1,3\n"), std::string::npos);
  EXPECT_NE(asc.find(",2.5\n"), std::string::npos);
}

TEST(RouterExport, UniformAtUpcycleWithLowestIndexArgmax) {
  const auto dense = Denoiser<float>::init_dense(testing::tiny_config(), TaskId::kT2I, 11);
  MoEConfig cfg;
  cfg.d_task = 4;
  const auto mtu = moe::upcycle(dense, {TaskId::kT2I, TaskId::kIE}, cfg, 12);
  const auto d = export_router_distribution(mtu);
  EXPECT_EQ(d.weights.size(), 2 * testing::tiny_config().num_blocks);
  for (const auto& [key, w] : d.weights) {
    EXPECT_EQ(w.size(), 4u);
    EXPECT_EQ(d.argmax.at(key), 0u);
  }
  const auto csv = d.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,layer,expert,weight,argmax");
  EXPECT_NE(csv.find("T2I,0,0,0.25,1\n"), std::string::npos);
  EXPECT_NE(csv.find("IE,1,3,0.25,0\n"), std::string::npos);
}

}  // namespace
}  // namespace mtu::analysis
