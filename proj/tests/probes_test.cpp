#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "sinkgate/probes/probes.hpp"

using namespace sinkgate;
using namespace sinkgate::probes;

namespace {

// Two Gaussian blobs per class along distinct axes, with a margin.
ProbeSet blobs(int n, int classes, std::uint64_t seed, bool noise_labels = false) {
  Rng rng(seed);
  ProbeSet s;
  s.x = Tensor::matrix(static_cast<std::size_t>(n), 6);
  for (int i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    for (std::size_t c = 0; c < 6; ++c) s.x.at(static_cast<std::size_t>(i), c) = 0.3 * rng.normal();
    if (!noise_labels) s.x.at(static_cast<std::size_t>(i), static_cast<std::size_t>(y)) += 4.0;
    s.y.push_back(y);
    s.scene_key.push_back("s" + std::to_string(i));
  }
  return s;
}

ProbeSet head(const ProbeSet& s, std::size_t from, std::size_t to) {
  ProbeSet o;
  o.x = Tensor::matrix(to - from, s.x.cols());
  for (std::size_t i = from; i < to; ++i) {
    std::copy_n(s.x.row(i).data(), s.x.cols(), o.x.row(i - from).data());
    if (!s.y.empty()) o.y.push_back(s.y[i]);
    o.scene_key.push_back(s.scene_key[i]);
  }
  if (!s.y_multi.empty()) {
    o.y_multi = Tensor::matrix(to - from, s.y_multi.cols());
    for (std::size_t i = from; i < to; ++i) {
      std::copy_n(s.y_multi.row(i).data(), s.y_multi.cols(), o.y_multi.row(i - from).data());
    }
  }
  return o;
}

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

backbone::RunTrace pool_trace() {
  backbone::RunTrace tr;
  tr.T = 6;
  tr.spans = scenes::spans_for(4);
  tr.spans.txt_end = 6;
  tr.hidden.push_back(Tensor::matrix(6, 2));
  tr.hidden.push_back(Tensor::from_rows({{9, 9}, {1, 2}, {3, 4}, {5, 7}, {-1, 0}, {8, 8}}));
  return tr;
}

const std::vector<scenes::Example>& planted_set() {
  static const auto d = scenes::generate_dataset(fixtures::planted_data(61, 360));
  return d;
}

}  // namespace

TEST_CASE("task and pool names") {
  for (ProbeTask t : kAllProbeTasks) CHECK(parse_probe_task(probe_task_name(t)) == t);
  CHECK_THROWS_AS(parse_probe_task("texture"), ConfigError);
  CHECK(is_multilabel(ProbeTask::color));
  CHECK(is_multilabel(ProbeTask::shape));
  CHECK_FALSE(is_multilabel(ProbeTask::count));
  CHECK(std::string(pool_name(PoolGroup::ordinary5)) == "ordinary5");
}

TEST_CASE("train_probe") {
  SUBCASE("linearly separable fixture is solved") {
    const auto s = blobs(300, 4, 3);
    const auto r = train_probe(head(s, 0, 200), head(s, 200, 300), 4, false, {});
    CHECK(r.accuracy == 1.0);
    CHECK(r.n_train == 200);
    CHECK(r.n_test == 100);
    CHECK_FALSE(r.degenerate);
    CHECK(r.chance < 0.5);
  }
  SUBCASE("uninformative features score within 3 sigma of the independence null") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = blobs(400, 3, 100 + seed, true);
      const auto r = train_probe(head(s, 0, 280), head(s, 280, 400), 3, false, {});
      CHECK(std::fabs(r.accuracy - r.null_rate) <= 3 * r.null_sigma);
    }
  }
  SUBCASE("chance is the train majority class scored on test") {
    ProbeSet tr, te;
    tr.x = Tensor::matrix(5, 1);
    tr.y = {2, 2, 2, 0, 1};
    te.x = Tensor::matrix(4, 1);
    te.y = {2, 0, 2, 1};
    const auto r = train_probe(tr, te, 3, false, {});
    CHECK(r.chance == 0.5);
    CHECK(r.chance_sigma == doctest::Approx(std::sqrt(0.25 / 4)));
    // zero features: the probe can only learn the prior, so it predicts 2
    CHECK(r.accuracy == 0.5);
    CHECK(r.null_rate == 0.5);
  }
  SUBCASE("all-zero multi-label targets") {
    ProbeSet s = blobs(120, 2, 9);
    s.y.clear();
    s.y_multi = Tensor::matrix(120, 8);
    const auto r = train_probe(head(s, 0, 80), head(s, 80, 120), 8, true, {});
    CHECK(r.accuracy == 1.0);
    CHECK(r.exact_all == 1.0);
    CHECK(r.chance == 1.0);
  }
  SUBCASE("multi-label bits follow separate axes") {
    Rng rng(4);
    ProbeSet s;
    s.x = Tensor::matrix(200, 3);
    s.y_multi = Tensor::matrix(200, 3);
    for (std::size_t i = 0; i < 200; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const bool on = rng.below(2) == 1;
        s.y_multi.at(i, c) = on;
        s.x.at(i, c) = (on ? 2.0 : -2.0) + 0.3 * rng.normal();
      }
      s.scene_key.push_back(std::to_string(i));
    }
    const auto r = train_probe(head(s, 0, 150), head(s, 150, 200), 3, true, {});
    CHECK(r.accuracy == 1.0);
    CHECK(r.exact_all == 1.0);
  }
  SUBCASE("single-class training labels are flagged") {
    ProbeSet s = blobs(50, 3, 2);
    for (int& y : s.y) y = 1;
    const auto r = train_probe(head(s, 0, 30), head(s, 30, 50), 3, false, {});
    CHECK(r.degenerate);
    CHECK(r.accuracy == 1.0);
  }
  SUBCASE("deterministic") {
    const auto s = blobs(200, 5, 8);
    const auto a = train_probe(head(s, 0, 150), head(s, 150, 200), 5, false, {});
    const auto b = train_probe(head(s, 0, 150), head(s, 150, 200), 5, false, {});
    CHECK(bitwise_equal(a.probe.w, b.probe.w));
    CHECK(a.accuracy == b.accuracy);
  }
  SUBCASE("errors") {
    const auto s = blobs(20, 2, 1);
    CHECK_THROWS_AS(train_probe(head(s, 0, 0), s, 2, false, {}), ConfigError);
    CHECK_THROWS_AS(train_probe(s, s, 1, false, {}), ConfigError);  // label 1 outside [0, 1)
    ProbeHyper bad;
    bad.lr = 0;
    CHECK_THROWS_AS(train_probe(s, s, 2, false, bad), ConfigError);
    CHECK_THROWS_AS(train_probe(s, s, 2, true, {}), ShapeError);
  }
}

TEST_CASE("split_by_scene keeps scenes on one side") {
  ProbeSet s = blobs(200, 2, 5);
  for (std::size_t i = 0; i < 200; ++i) s.scene_key[i] = "scene" + std::to_string(i % 50);
  ProbeSet tr, te;
  split_by_scene(s, 0.3, 7, tr, te);
  CHECK(tr.size() + te.size() == 200);
  const std::set<std::string> a(tr.scene_key.begin(), tr.scene_key.end()), b(te.scene_key.begin(), te.scene_key.end());
  for (const auto& k : b) CHECK(a.count(k) == 0);
  // per label: round(0.3 * keys) of that label's keys are held out
  std::map<int, std::set<std::string>> by_label;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < 200; ++i) {
    if (seen.insert(s.scene_key[i]).second) by_label[s.y[i]].insert(s.scene_key[i]);
  }
  std::size_t want = 0;
  for (const auto& [y, keys] : by_label) {
    const auto k = static_cast<double>(keys.size());
    want += static_cast<std::size_t>(std::llround(0.3 * k));
    std::size_t held = 0;
    for (const auto& key : keys) held += b.count(key);
    CHECK(held == static_cast<std::size_t>(std::llround(0.3 * k)));
  }
  CHECK(b.size() == want);
  ProbeSet tr2, te2;
  split_by_scene(s, 0.3, 7, tr2, te2);
  CHECK(te2.scene_key == te.scene_key);
  CHECK_THROWS_AS(split_by_scene(s, 1.0, 7, tr, te), ConfigError);

  // A class carried by a single scene stays in train under every seed; a
  // class with two scenes has one on each side.
  ProbeSet u = blobs(60, 2, 9);
  for (std::size_t i = 0; i < 60; ++i) {
    u.y[i] = static_cast<int>(i % 2);
    u.scene_key[i] = "k" + std::to_string(i);
  }
  for (std::size_t i = 0; i < 6; ++i) {
    u.y.push_back(2);
    u.scene_key.push_back("empty");
  }
  u.y.push_back(3);
  u.scene_key.push_back("three_a");
  u.y.push_back(3);
  u.scene_key.push_back("three_b");
  u.x = Tensor::matrix(u.y.size(), 6);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    split_by_scene(u, 0.3, seed, tr, te);
    CHECK(std::count(tr.y.begin(), tr.y.end(), 2) == 6);
    CHECK(std::count(tr.y.begin(), tr.y.end(), 3) == 1);
    CHECK(std::count(te.y.begin(), te.y.end(), 3) == 1);
    CHECK(te.size() == 9 + 9 + 1);
  }
}

TEST_CASE("pooling and ordinary sampling") {
  const auto tr = pool_trace();
  sinkid::TokenPartition p;
  p.n = 4;
  p.vsink = {2};
  p.lsink = {{0, 3}};
  p.ordinary = {{1}};
  const std::vector<int> ord{1};
  const auto v = pool_group(tr, p, PoolGroup::vsink, 0, ord);
  REQUIRE(v);
  CHECK(vals(*v) == std::vector<double>{5, 7});
  const auto l = pool_group(tr, p, PoolGroup::lsink, 0, ord);
  REQUIRE(l);
  CHECK(vals(*l) == std::vector<double>{0.0, 1.0});  // mean of rows 1 and 4
  CHECK(vals(*pool_group(tr, p, PoolGroup::ordinary5, 0, ord)) == std::vector<double>{3, 4});
  p.vsink.clear();
  CHECK_FALSE(pool_group(tr, p, PoolGroup::vsink, 0, ord));

  sinkid::TokenPartition q;
  q.n = 16;
  q.vsink = {0, 5};
  q.lsink = {{}, {3}, {3, 9}};
  const auto a = sample_ordinary(q, 1, 42);
  CHECK(a.size() == 5);
  CHECK(std::is_sorted(a.begin(), a.end()));
  for (int j : a) {
    CHECK(j != 0);
    CHECK(j != 3);
    CHECK(j != 5);
    CHECK(j != 9);
  }
  CHECK(sample_ordinary(q, 1, 42) == a);
  CHECK(sample_ordinary(q, 1, 42, 100).size() == 12);
  bool differs = false;
  for (std::uint64_t img = 0; img < 20; ++img) differs |= sample_ordinary(q, 1, img) != a;
  CHECK(differs);
}

TEST_CASE("planted count probes") {
  const auto& bb = fixtures::planted();
  const int l0 = bb.config.plant.emergence_layer;
  CurveSpec spec;
  spec.tasks = {ProbeTask::count};
  const auto rows = probe_curves(planted_set(), bb, spec);
  std::map<std::pair<PoolGroup, int>, ProbeResult> real, perm;
  for (const auto& r : rows) (r.permuted ? perm : real)[{r.group, r.layer}] = r.result;
  CHECK(real.size() == perm.size());
  for (int l = 0; l < bb.config.L; ++l) {
    REQUIRE(real.count({PoolGroup::vsink, l}));
    REQUIRE(real.count({PoolGroup::ordinary5, l}));
  }
  for (int l = l0; l < bb.config.L; ++l) {
    const double s = real.at({PoolGroup::vsink, l}).accuracy, o = real.at({PoolGroup::ordinary5, l}).accuracy;
    CHECK(s >= 0.95);
    CHECK(s - o >= 0.2);
  }
  const auto& at_l0 = real.at({PoolGroup::ordinary5, l0});
  CHECK(at_l0.accuracy <= at_l0.chance + 0.15);
  CHECK(real.at({PoolGroup::vsink, bb.config.L - 1}).accuracy >= real.at({PoolGroup::vsink, l0}).accuracy - 0.05);
  for (const auto& [k, r] : perm) {
    CHECK(r.n_test > 50);
    CHECK(std::fabs(r.accuracy - r.null_rate) <= 3 * r.null_sigma);
  }

  spec.workers = 3;
  CHECK(curves_csv(probe_curves(planted_set(), bb, spec)) == curves_csv(rows));
  const auto csv = curves_csv(rows);
  CHECK(csv.rfind("task,group,layer,n_train,n_test,accuracy,", 0) == 0);
  const auto j = to_json(rows);
  CHECK(j["kind"] == "probe_curves");
  CHECK(j["rows"].size() == rows.size());
}

TEST_CASE("every task runs and ordinary-5 is fixed across layers") {
  const auto& bb = fixtures::planted();
  const std::vector<scenes::Example> small(planted_set().begin(), planted_set().begin() + 60);
  CurveSpec spec;
  spec.with_permuted = false;
  spec.hyper.steps = 20;
  const auto rows = probe_curves(small, bb, spec);
  std::set<std::string> tasks;
  for (const auto& r : rows) {
    tasks.insert(probe_task_name(r.task));
    CHECK(r.result.accuracy >= 0.0);
    CHECK(r.result.accuracy <= 1.0);
  }
  CHECK(tasks.size() == 4);

  backbone::ForwardOptions o;
  o.capture = true;
  const auto tr = backbone::forward(bb, small[0], o);
  const auto p = sinkid::partition_tokens(tr, bb.config);
  const auto ord = sample_ordinary(p, spec.hyper.seed, small[0].id);
  for (int l = 0; l < bb.config.L; ++l) {
    for (int j : ord) CHECK(p.group_of(l, j) == sinkid::kOrdinary);
  }
}
