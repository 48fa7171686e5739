#include "sinkgate/sinkid/sinkid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sinkgate/common/json_util.hpp"

namespace sinkgate::sinkid {

using nlohmann::json;

std::vector<int> identify_sinks(const Tensor& hidden, std::span<const int> dims, double tau) {
  if (dims.empty()) throw ConfigError("identify_sinks: empty sink dimension set");
  if (!(tau > 0)) throw ConfigError("identify_sinks: tau must be > 0");
  for (int d : dims) {
    if (d < 0 || static_cast<std::size_t>(d) >= hidden.cols()) throw ShapeError("identify_sinks: sink dim out of range");
  }
  std::vector<int> out;
  for (std::size_t j = 0; j < hidden.rows(); ++j) {
    double m = 0.0;
    for (int d : dims) m = std::max(m, std::abs(hidden.at(j, static_cast<std::size_t>(d))));
    if (m >= tau) out.push_back(static_cast<int>(j));
  }
  return out;
}

Group TokenPartition::group_of(int layer, int j) const {
  const auto has = [j](const std::vector<int>& v) { return std::binary_search(v.begin(), v.end(), j); };
  if (has(vsink)) return kVSink;
  if (has(lsink.at(static_cast<std::size_t>(layer)))) return kLSink;
  return kOrdinary;
}

void TokenPartition::check() const {
  for (int l = 0; l < layers(); ++l) {
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (const auto* set : {&vsink, &lsink[static_cast<std::size_t>(l)], &ordinary[static_cast<std::size_t>(l)]}) {
      for (int j : *set) {
        if (j < 0 || j >= n) throw InvariantError("partition: index outside I_vis");
        ++seen[static_cast<std::size_t>(j)];
      }
    }
    for (int s : seen) {
      if (s != 1) throw InvariantError("partition: layer " + std::to_string(l) + " is not a disjoint cover");
    }
  }
}

std::vector<int> lsinks_at(const Tensor& hidden, const scenes::Spans& spans, const SinkConfig& sink,
                           std::span<const int> vsink) {
  std::vector<int> out;
  for (int t : identify_sinks(hidden, sink.dims_llm, sink.tau_llm)) {
    const int j = t - spans.vis_begin;
    if (t < spans.vis_begin || t >= spans.vis_end) continue;
    if (std::binary_search(vsink.begin(), vsink.end(), j)) continue;
    out.push_back(j);
  }
  return out;
}

TokenPartition partition_tokens(const backbone::RunTrace& trace, const SinkConfig& sink) {
  if (trace.hidden.empty() || trace.encoder_out.empty()) {
    throw InvariantError("partition_tokens: trace lacks encoder output or hidden states");
  }
  TokenPartition p;
  p.n = trace.n_visual();
  const int dim_vit = sink.dim_vit;
  p.vsink = identify_sinks(trace.encoder_out, std::span<const int>(&dim_vit, 1), sink.tau_vit);
  const int L = static_cast<int>(trace.hidden.size()) - 1;
  for (int l = 0; l < L; ++l) {
    auto ls = lsinks_at(trace.H(l), trace.spans, sink, p.vsink);
    std::vector<int> ord;
    for (int j = 0; j < p.n; ++j) {
      if (!std::binary_search(p.vsink.begin(), p.vsink.end(), j) && !std::binary_search(ls.begin(), ls.end(), j)) {
        ord.push_back(j);
      }
    }
    p.lsink.push_back(std::move(ls));
    p.ordinary.push_back(std::move(ord));
  }
  return p;
}

TokenPartition partition_tokens(const backbone::RunTrace& trace, const backbone::ModelConfig& config) {
  return partition_tokens(trace, SinkConfig::of(config));
}

SalienceProfile salience_profile(std::span<const backbone::RunTrace> traces,
                                 std::span<const TokenPartition> partitions) {
  if (traces.empty()) throw ConfigError("salience_profile: needs at least one trace");
  if (traces.size() != partitions.size()) throw ShapeError("salience_profile: one partition per trace");
  const int L = partitions[0].layers();
  SalienceProfile prof;
  prof.layers = L;
  prof.samples = static_cast<int>(traces.size());
  prof.norm.resize(static_cast<std::size_t>(L));
  prof.attention.resize(static_cast<std::size_t>(L));
  prof.attention_mass.resize(static_cast<std::size_t>(L));
  prof.count.assign(static_cast<std::size_t>(L), {0.0, 0.0, 0.0});
  for (int l = 0; l < L; ++l) {
    std::array<double, 3> nsum{}, asum{}, msum{};
    std::array<int, 3> present{};
    for (std::size_t s = 0; s < traces.size(); ++s) {
      const auto& tr = traces[s];
      const auto& p = partitions[s];
      if (p.layers() != L) throw ShapeError("salience_profile: partitions disagree on layer count");
      const Tensor& h = tr.H(l);
      const auto& heads = tr.attn.at(static_cast<std::size_t>(l));
      const std::size_t last = static_cast<std::size_t>(tr.spans.txt_end - 1);
      const std::array<const std::vector<int>*, 3> groups{&p.vsink, &p.lsink[static_cast<std::size_t>(l)],
                                                          &p.ordinary[static_cast<std::size_t>(l)]};
      for (int g = 0; g < 3; ++g) {
        const auto& members = *groups[static_cast<std::size_t>(g)];
        prof.count[static_cast<std::size_t>(l)][static_cast<std::size_t>(g)] += static_cast<double>(members.size());
        if (members.empty()) continue;
        double nrm = 0.0;
        for (int j : members) {
          double sq = 0.0;
          for (double v : h.row(static_cast<std::size_t>(tr.spans.vis_begin + j))) sq += v * v;
          nrm += std::sqrt(sq);
        }
        double per_token = 0.0, mass = 0.0;
        for (const Tensor& a : heads) {
          double m = 0.0;
          for (int j : members) m += a.at(last, static_cast<std::size_t>(tr.spans.vis_begin + j));
          mass += m;
          per_token += m / static_cast<double>(members.size());
        }
        const double nh = static_cast<double>(heads.size());
        nsum[static_cast<std::size_t>(g)] += nrm / static_cast<double>(members.size());
        asum[static_cast<std::size_t>(g)] += per_token / nh;
        msum[static_cast<std::size_t>(g)] += mass / nh;
        ++present[static_cast<std::size_t>(g)];
      }
    }
    for (int g = 0; g < 3; ++g) {
      const std::size_t gi = static_cast<std::size_t>(g);
      prof.count[static_cast<std::size_t>(l)][gi] /= static_cast<double>(traces.size());
      if (present[gi] == 0) continue;
      prof.norm[static_cast<std::size_t>(l)][gi] = nsum[gi] / present[gi];
      prof.attention[static_cast<std::size_t>(l)][gi] = asum[gi] / present[gi];
      prof.attention_mass[static_cast<std::size_t>(l)][gi] = msum[gi] / present[gi];
    }
  }
  return prof;
}

json to_json(const TokenPartition& p) {
  return {{"n", p.n}, {"vsink", p.vsink}, {"lsink", p.lsink}, {"ordinary", p.ordinary}};
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt(const std::optional<double>& v) {
  return v ? jsonu::num(*v) : "NA";
}

}  // namespace

json to_json(const SalienceProfile& p) {
  json layers = json::array();
  for (int l = 0; l < p.layers; ++l) {
    json groups = json::object();
    for (int g = 0; g < 3; ++g) {
      const std::size_t li = static_cast<std::size_t>(l), gi = static_cast<std::size_t>(g);
      groups[kGroupNames[gi]] = {{"mean_norm", opt(p.norm[li][gi])},
                                 {"mean_attention", opt(p.attention[li][gi])},
                                 {"attention_mass", opt(p.attention_mass[li][gi])},
                                 {"mean_count", p.count[li][gi]}};
    }
    layers.push_back({{"layer", l}, {"groups", groups}});
  }
  return {{"schema_version", 1}, {"kind", "salience_profile"}, {"samples", p.samples}, {"layers", layers}};
}

std::string to_csv(const SalienceProfile& p) {
  std::ostringstream os;
  os << "layer,group,mean_norm,mean_attention,attention_mass,mean_count\n";
  for (int l = 0; l < p.layers; ++l) {
    for (int g = 0; g < 3; ++g) {
      const std::size_t li = static_cast<std::size_t>(l), gi = static_cast<std::size_t>(g);
      os << l << ',' << kGroupNames[gi] << ',' << fmt(p.norm[li][gi]) << ',' << fmt(p.attention[li][gi]) << ','
         << fmt(p.attention_mass[li][gi]) << ',' << fmt(p.count[li][gi]) << '\n';
    }
  }
  return os.str();
}

SalienceProfile analyze_traces(const std::filesystem::path& root) {
  std::vector<backbone::RunTrace> traces;
  std::vector<TokenPartition> parts;
  for (const auto& dir : backbone::list_traces(root)) {
    SinkConfig sink;
    traces.push_back(backbone::read_trace(dir, &sink));
    parts.push_back(partition_tokens(traces.back(), sink));
    parts.back().check();
  }
  if (traces.empty()) throw IoError("no traces under " + root.string());
  return salience_profile(traces, parts);
}

}  // namespace sinkgate::sinkid
