#include "sinkgate/probes/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "sinkgate/common/json_util.hpp"
#include "sinkgate/common/parallel.hpp"
#include "sinkgate/numerics/kernels.hpp"
#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/scenes/dataset.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::probes {

using nlohmann::json;

const char* probe_task_name(ProbeTask t) {
  switch (t) {
    case ProbeTask::count: return "count";
    case ProbeTask::size: return "size";
    case ProbeTask::color: return "color";
    default: return "shape";
  }
}

ProbeTask parse_probe_task(const std::string& s) {
  for (ProbeTask t : kAllProbeTasks) {
    if (s == probe_task_name(t)) return t;
  }
  throw ConfigError("unknown probe task '" + s + "'");
}

bool is_multilabel(ProbeTask t) { return t == ProbeTask::color || t == ProbeTask::shape; }

const char* pool_name(PoolGroup g) {
  switch (g) {
    case PoolGroup::vsink: return "vsink";
    case PoolGroup::lsink: return "lsink";
    default: return "ordinary5";
  }
}

std::vector<int> sample_ordinary(const sinkid::TokenPartition& p, std::uint64_t seed, std::uint64_t image, int k) {
  std::set<int> excluded(p.vsink.begin(), p.vsink.end());
  for (const auto& ls : p.lsink) excluded.insert(ls.begin(), ls.end());
  std::vector<int> pool;
  for (int j = 0; j < p.n; ++j) {
    if (!excluded.count(j)) pool.push_back(j);
  }
  Rng rng = Rng::stream(seed, "ordinary5", image);
  const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(std::max(k, 0)));
  for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(take);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::optional<Tensor> pool_group(const backbone::RunTrace& trace, const sinkid::TokenPartition& p, PoolGroup g,
                                 int layer, std::span<const int> ordinary5) {
  std::span<const int> members;
  switch (g) {
    case PoolGroup::vsink: members = p.vsink; break;
    case PoolGroup::lsink: members = p.lsink.at(static_cast<std::size_t>(layer)); break;
    case PoolGroup::ordinary5: members = ordinary5; break;
  }
  if (members.empty()) return std::nullopt;
  const Tensor& h = trace.H(layer);
  Tensor out = Tensor::vector(h.cols());
  const auto& kt = kernels::active();
  for (int j : members) {
    kt.add(out.data().data(), out.data().data(), h.row(static_cast<std::size_t>(trace.spans.vis_begin + j)).data(),
           h.cols());
  }
  kt.scale(out.data().data(), 1.0 / static_cast<double>(members.size()), out.data().data(), out.size());
  return out;
}

namespace {

ProbeSet take_rows(const ProbeSet& all, const std::vector<std::size_t>& rows) {
  ProbeSet s;
  const std::size_t D = all.x.cols();
  s.x = Tensor::matrix(rows.size(), D);
  const bool multi = !all.y_multi.empty();
  if (multi) s.y_multi = Tensor::matrix(rows.size(), all.y_multi.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(all.x.row(rows[i]).data(), D, s.x.row(i).data());
    if (multi) {
      std::copy_n(all.y_multi.row(rows[i]).data(), all.y_multi.cols(), s.y_multi.row(i).data());
    } else {
      s.y.push_back(all.y[rows[i]]);
    }
    s.scene_key.push_back(all.scene_key[rows[i]]);
  }
  return s;
}

Tensor standardize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& scale) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = (x.at(r, c) - mean[c]) / scale[c];
  }
  return out;
}

Tensor logits_of(const LinearProbe& p, const Tensor& x) {
  return ops::add_rowvec(kernels::matmul(standardize(x, p.mean, p.scale), p.w), p.b);
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

struct Scores {
  double accuracy = 0.0, exact_all = 0.0, null_rate = 0.0;
};

Scores score(const LinearProbe& p, const ProbeSet& s) {
  Scores sc;
  if (s.size() == 0) return sc;
  const Tensor z = logits_of(p, s.x);
  const std::size_t C = z.cols();
  const double n = static_cast<double>(s.size());
  double hits = 0.0, all = 0.0;
  std::vector<double> pred(C, 0.0), truth(C, 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (p.multilabel) {
      int right = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const bool on = z.at(i, c) > 0.0, want = s.y_multi.at(i, c) > 0.5;
        right += on == want;
        pred[c] += on;
        truth[c] += want;
      }
      hits += static_cast<double>(right) / static_cast<double>(C);
      all += right == static_cast<int>(C);
    } else {
      const int k = backbone::argmax(z.row(i));
      hits += k == s.y[i];
      pred[static_cast<std::size_t>(k)] += 1;
      truth[static_cast<std::size_t>(s.y[i])] += 1;
    }
  }
  sc.accuracy = hits / n;
  sc.exact_all = p.multilabel ? all / n : sc.accuracy;
  for (std::size_t c = 0; c < C; ++c) {
    const double q = pred[c] / n, t = truth[c] / n;
    sc.null_rate += p.multilabel ? (q * t + (1 - q) * (1 - t)) / static_cast<double>(C) : q * t;
  }
  return sc;
}

}  // namespace

void split_by_scene(const ProbeSet& all, double test_frac, std::uint64_t seed, ProbeSet& train, ProbeSet& test) {
  if (!(test_frac > 0 && test_frac < 1)) throw ConfigError("probe: test_frac must be in (0, 1)");
  // Stratified by label: a key takes the label of its first row. Labels with a
  // single key are pooled, so a class seen in one scene only (the empty scene
  // for count) is never held out whole.
  const bool multi = !all.y_multi.empty();
  std::map<std::string, std::string> key_label;
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::string label;
    if (multi) {
      for (double v : all.y_multi.row(i)) label += v > 0.5 ? '1' : '0';
    } else {
      label = std::to_string(all.y[i]);
    }
    key_label.emplace(all.scene_key[i], label);
  }
  std::map<std::string, std::vector<std::string>> strata;
  for (const auto& [key, label] : key_label) strata[label].push_back(key);
  std::vector<std::vector<std::string>> groups;
  std::vector<std::string> pooled;
  for (auto& [label, keys] : strata) {
    if (keys.size() == 1) {
      pooled.push_back(keys[0]);
    } else {
      groups.push_back(std::move(keys));
    }
  }
  std::sort(pooled.begin(), pooled.end());
  groups.push_back(std::move(pooled));
  Rng rng = Rng::stream(seed, "probe-split");
  std::set<std::string> test_keys;
  for (auto& keys : groups) {
    for (std::size_t i = keys.size(); i > 1; --i) std::swap(keys[i - 1], keys[rng.below(i)]);
    auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(keys.size())));
    if (keys.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, keys.size() - 1);
    if (keys.size() < 2) n_test = 0;
    test_keys.insert(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n_test));
  }
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < all.size(); ++i) (test_keys.count(all.scene_key[i]) ? te : tr).push_back(i);
  train = take_rows(all, tr);
  test = take_rows(all, te);
}

ProbeResult train_probe(const ProbeSet& train, const ProbeSet& test, int classes, bool multilabel,
                        const ProbeHyper& hyper) {
  if (train.size() == 0) throw ConfigError("probe: empty training set");
  if (hyper.steps < 0 || !(hyper.lr > 0) || hyper.l2 < 0) throw ConfigError("probe: steps >= 0, lr > 0, l2 >= 0");
  const std::size_t N = train.size(), D = train.x.cols(), C = static_cast<std::size_t>(classes);
  if (multilabel ? train.y_multi.cols() != C : train.y.size() != N) throw ShapeError("probe: label shape mismatch");

  ProbeResult res;
  LinearProbe& p = res.probe;
  p.multilabel = multilabel;
  p.mean.assign(D, 0.0);
  p.scale.assign(D, 1.0);
  for (std::size_t c = 0; c < D; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < N; ++i) m += train.x.at(i, c);
    m /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) v += (train.x.at(i, c) - m) * (train.x.at(i, c) - m);
    const double sd = std::sqrt(v / static_cast<double>(N));
    p.mean[c] = m;
    p.scale[c] = sd > 1e-12 ? sd : 1.0;
  }
  p.w = Tensor::matrix(D, C);
  p.b = Tensor::vector(C);

  Tensor target = Tensor::matrix(N, C);
  if (multilabel) {
    target = train.y_multi;
  } else {
    std::set<int> seen;
    for (std::size_t i = 0; i < N; ++i) {
      if (train.y[i] < 0 || train.y[i] >= classes) throw ConfigError("probe: label outside [0, classes)");
      target.at(i, static_cast<std::size_t>(train.y[i])) = 1.0;
      seen.insert(train.y[i]);
    }
    res.degenerate = seen.size() < 2;
  }

  const Tensor xs = standardize(train.x, p.mean, p.scale);
  const double invN = 1.0 / static_cast<double>(N);
  for (int step = 0; step < hyper.steps; ++step) {
    Tensor z = ops::add_rowvec(kernels::matmul(xs, p.w), p.b);
    const Tensor prob = multilabel ? [&] {
      Tensor s(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) s[i] = sigmoid(z[i]);
      return s;
    }()
                                   : ops::softmax_rows(z);
    Tensor err(prob.shape());
    for (std::size_t i = 0; i < err.size(); ++i) err[i] = (prob[i] - target[i]) * invN;
    // Per-bit losses are averaged over bits as well.
    if (multilabel) err = ops::scale(err, 1.0 / static_cast<double>(C));
    const Tensor gw = kernels::matmul_at(xs, err);
    for (std::size_t i = 0; i < p.w.size(); ++i) p.w[i] -= hyper.lr * (gw[i] + 2.0 * hyper.l2 * p.w[i]);
    for (std::size_t c = 0; c < C; ++c) {
      double g = 0.0;
      for (std::size_t i = 0; i < N; ++i) g += err.at(i, c);
      p.b[c] -= hyper.lr * g;
    }
  }
  if (!p.w.all_finite() || !p.b.all_finite()) throw NumericError("probe: non-finite weights");

  const Scores sc = score(p, test);
  res.accuracy = sc.accuracy;
  res.exact_all = sc.exact_all;
  res.null_rate = sc.null_rate;
  if (test.size() > 0) {
    res.null_sigma = std::sqrt(res.null_rate * (1 - res.null_rate) / static_cast<double>(test.size()));
  }
  res.n_train = static_cast<int>(N);
  res.n_test = static_cast<int>(test.size());

  // Chance: the best feature-free predictor fitted on train.
  if (test.size() > 0) {
    double hits = 0.0;
    if (multilabel) {
      for (std::size_t c = 0; c < C; ++c) {
        double on = 0.0;
        for (std::size_t i = 0; i < N; ++i) on += train.y_multi.at(i, c);
        const bool guess = on * 2 > static_cast<double>(N);
        for (std::size_t i = 0; i < test.size(); ++i) hits += (test.y_multi.at(i, c) > 0.5) == guess;
      }
      hits /= static_cast<double>(C);
    } else {
      std::vector<int> freq(C, 0);
      for (int y : train.y) ++freq[static_cast<std::size_t>(y)];
      const int major = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
      for (int y : test.y) hits += y == major;
    }
    res.chance = hits / static_cast<double>(test.size());
    res.chance_sigma = std::sqrt(res.chance * (1 - res.chance) / static_cast<double>(test.size()));
  }
  return res;
}

namespace {

int classes_of(ProbeTask t) {
  switch (t) {
    case ProbeTask::count: return vocab::kMaxCount + 1;
    case ProbeTask::size: return vocab::kSizes;
    case ProbeTask::color: return vocab::kColors;
    default: return vocab::kShapes;
  }
}

// Label row for a scene; false when the task is undefined (size of an empty scene).
bool label_of(ProbeTask t, const scenes::ProbeLabels& l, int& y, std::vector<double>& multi) {
  switch (t) {
    case ProbeTask::count: y = l.count; return true;
    case ProbeTask::size:
      if (!l.size) return false;
      y = *l.size;
      return true;
    case ProbeTask::color: multi.assign(l.color.begin(), l.color.end()); return true;
    default: multi.assign(l.shape.begin(), l.shape.end()); return true;
  }
}

}  // namespace

std::vector<CurveRow> probe_curves(const std::vector<scenes::Example>& data, const backbone::Backbone& bb,
                                   const CurveSpec& spec) {
  const int L = bb.config.L;
  const std::size_t N = data.size();
  // Pooled features per (example, group, layer).
  std::vector<std::vector<std::vector<std::optional<Tensor>>>> pooled(N);
  parallel_for(N, spec.workers, [&](std::size_t i) {
    backbone::ForwardOptions o;
    o.capture = true;
    const auto tr = backbone::forward(bb, data[i], o);
    const auto part = spec.partition ? spec.partition(tr) : sinkid::partition_tokens(tr, bb.config);
    part.check();
    const auto ord = sample_ordinary(part, spec.hyper.seed, data[i].id);
    auto& cell = pooled[i];
    cell.resize(kAllPools.size());
    for (std::size_t g = 0; g < kAllPools.size(); ++g) {
      for (int l = 0; l < L; ++l) cell[g].push_back(pool_group(tr, part, kAllPools[g], l, ord));
    }
  });
  std::vector<std::string> keys(N);
  std::vector<scenes::ProbeLabels> labels(N);
  for (std::size_t i = 0; i < N; ++i) {
    keys[i] = scenes::scene_to_json(data[i].scene).dump();
    labels[i] = scenes::labels_of(data[i].scene);
  }

  struct Job {
    ProbeTask task;
    std::size_t group;
    int layer;
    bool permuted;
  };
  std::vector<Job> jobs;
  for (ProbeTask t : spec.tasks) {
    for (std::size_t g = 0; g < kAllPools.size(); ++g) {
      for (int l = 0; l < L; ++l) {
        jobs.push_back({t, g, l, false});
        if (spec.with_permuted) jobs.push_back({t, g, l, true});
      }
    }
  }
  std::vector<std::optional<CurveRow>> out(jobs.size());
  parallel_for(jobs.size(), spec.workers, [&](std::size_t k) {
    const Job& jb = jobs[k];
    const bool multi = is_multilabel(jb.task);
    const int C = classes_of(jb.task);
    std::vector<std::size_t> rows;
    std::vector<int> ys;
    std::vector<std::vector<double>> ym;
    for (std::size_t i = 0; i < N; ++i) {
      int y = 0;
      std::vector<double> m;
      if (!pooled[i][jb.group][static_cast<std::size_t>(jb.layer)] || !label_of(jb.task, labels[i], y, m)) continue;
      rows.push_back(i);
      ys.push_back(y);
      ym.push_back(std::move(m));
    }
    if (rows.size() < 4) return;
    ProbeSet all;
    const std::size_t D = static_cast<std::size_t>(bb.config.D);
    all.x = Tensor::matrix(rows.size(), D);
    if (multi) all.y_multi = Tensor::matrix(rows.size(), static_cast<std::size_t>(C));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Tensor& f = *pooled[rows[r]][jb.group][static_cast<std::size_t>(jb.layer)];
      std::copy_n(f.data().data(), D, all.x.row(r).data());
      if (multi) std::copy(ym[r].begin(), ym[r].end(), all.y_multi.row(r).begin());
      all.scene_key.push_back(keys[rows[r]]);
    }
    if (!multi) all.y = ys;
    if (jb.permuted) {
      // Permutation test: labels are shuffled over the whole set before the
      // split, so test labels carry no information about the features.
      Rng rng = Rng::stream(spec.hyper.seed, "probe-permute", static_cast<std::uint64_t>(k));
      for (std::size_t i = all.size(); i > 1; --i) {
        const std::size_t j = rng.below(i);
        if (multi) {
          for (std::size_t c = 0; c < all.y_multi.cols(); ++c) std::swap(all.y_multi.at(i - 1, c), all.y_multi.at(j, c));
        } else {
          std::swap(all.y[i - 1], all.y[j]);
        }
      }
    }
    ProbeSet train, test;
    split_by_scene(all, spec.hyper.test_frac, spec.hyper.seed, train, test);
    if (train.size() == 0 || test.size() == 0) return;
    CurveRow row{jb.task, kAllPools[jb.group], jb.layer, train_probe(train, test, C, multi, spec.hyper), jb.permuted};
    out[k] = std::move(row);
  });
  std::vector<CurveRow> rows;
  for (auto& r : out) {
    if (r) rows.push_back(std::move(*r));
  }
  return rows;
}

std::string curves_csv(const std::vector<CurveRow>& rows) {
  std::ostringstream os;
  os << "task,group,layer,n_train,n_test,accuracy,exact_all,chance,chance_sigma,null_rate,null_sigma,permuted,"
        "degenerate\n";
  for (const auto& r : rows) {
    const auto& q = r.result;
    os << probe_task_name(r.task) << ',' << pool_name(r.group) << ',' << r.layer << ',' << q.n_train << ','
       << q.n_test << ',' << jsonu::num(q.accuracy) << ',' << jsonu::num(q.exact_all) << ',' << jsonu::num(q.chance)
       << ',' << jsonu::num(q.chance_sigma) << ',' << jsonu::num(q.null_rate) << ',' << jsonu::num(q.null_sigma)
       << ',' << (r.permuted ? 1 : 0) << ',' << (q.degenerate ? 1 : 0) << '\n';
  }
  return os.str();
}

json to_json(const std::vector<CurveRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"task", probe_task_name(r.task)},
                   {"group", pool_name(r.group)},
                   {"layer", r.layer},
                   {"permuted", r.permuted},
                   {"n_train", r.result.n_train},
                   {"n_test", r.result.n_test},
                   {"accuracy", r.result.accuracy},
                   {"exact_all", r.result.exact_all},
                   {"chance", r.result.chance},
                   {"chance_sigma", r.result.chance_sigma},
                   {"null_rate", r.result.null_rate},
                   {"null_sigma", r.result.null_sigma},
                   {"degenerate", r.result.degenerate}});
  }
  return {{"schema_version", 1}, {"kind", "probe_curves"}, {"rows", arr}};
}

}  // namespace sinkgate::probes
