#include "sinkgate/backbone/trace_io.hpp"

#include <algorithm>
#include <fstream>

#include "sinkgate/common/json_util.hpp"

namespace sinkgate::backbone {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Tensor stack_heads(const std::vector<Tensor>& heads) {
  if (heads.empty()) return Tensor{};
  const std::size_t T = heads[0].rows();
  Tensor out({heads.size(), T, T});
  std::size_t k = 0;
  for (const Tensor& h : heads) {
    for (double v : h.data()) out[k++] = v;
  }
  return out;
}

std::vector<Tensor> unstack_heads(const Tensor& t) {
  if (t.ndim() != 3) throw IoError("attention tensor must be 3-D");
  const std::size_t H = t.shape()[0], T = t.shape()[1];
  std::vector<Tensor> out;
  std::size_t k = 0;
  for (std::size_t h = 0; h < H; ++h) {
    Tensor a = Tensor::matrix(T, T);
    for (double& v : a.data()) v = t[k++];
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

void write_trace(const fs::path& dir, const RunTrace& tr, const SinkConfig& sink, sgt1::Dtype dtype) {
  if (tr.hidden.empty()) throw InvariantError("write_trace: trace was not captured");
  fs::create_directories(dir);
  const int L = static_cast<int>(tr.attn.size());
  sgt1::save(dir / "encoder.sgt1", tr.encoder_out, dtype);
  for (int l = -1; l < L; ++l) sgt1::save(dir / ("hidden_" + std::to_string(l + 1) + ".sgt1"), tr.H(l), dtype);
  for (int l = 0; l < L; ++l) {
    sgt1::save(dir / ("attn_" + std::to_string(l) + ".sgt1"), stack_heads(tr.attn[static_cast<std::size_t>(l)]), dtype);
  }
  sgt1::save(dir / "logits.sgt1", tr.logits, dtype);
  json idx = {{"schema_version", 1},
              {"T", tr.T},
              {"L", L},
              {"spans",
               {{"sys", {tr.spans.sys_begin, tr.spans.sys_end}},
                {"vis", {tr.spans.vis_begin, tr.spans.vis_end}},
                {"txt", {tr.spans.txt_begin, tr.spans.txt_end}}}},
              {"sink",
               {{"dims_llm", sink.dims_llm},
                {"dim_vit", sink.dim_vit},
                {"tau_vit", sink.tau_vit},
                {"tau_llm", sink.tau_llm}}},
              {"dtype", sgt1::dtype_name(dtype)}};
  std::ofstream(dir / "index.json") << jsonu::dump(idx);
}

RunTrace read_trace(const fs::path& dir, SinkConfig* sink) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("missing trace index: " + (dir / "index.json").string());
  json idx;
  try {
    idx = json::parse(in);
    RunTrace tr;
    tr.T = idx.at("T").get<int>();
    const int L = idx.at("L").get<int>();
    const auto& sp = idx.at("spans");
    tr.spans.sys_begin = sp.at("sys")[0];
    tr.spans.sys_end = sp.at("sys")[1];
    tr.spans.vis_begin = sp.at("vis")[0];
    tr.spans.vis_end = sp.at("vis")[1];
    tr.spans.txt_begin = sp.at("txt")[0];
    tr.spans.txt_end = sp.at("txt")[1];
    if (tr.spans.txt_end != tr.T) throw IoError("trace spans do not cover T");
    tr.encoder_out = sgt1::load(dir / "encoder.sgt1");
    for (int l = -1; l < L; ++l) tr.hidden.push_back(sgt1::load(dir / ("hidden_" + std::to_string(l + 1) + ".sgt1")));
    for (int l = 0; l < L; ++l) tr.attn.push_back(unstack_heads(sgt1::load(dir / ("attn_" + std::to_string(l) + ".sgt1"))));
    if (fs::exists(dir / "logits.sgt1")) tr.logits = sgt1::load(dir / "logits.sgt1");
    for (const Tensor& h : tr.hidden) {
      if (h.rows() != static_cast<std::size_t>(tr.T)) throw IoError("hidden state rows do not match T");
    }
    if (sink) {
      const auto& s = idx.at("sink");
      sink->dims_llm = s.at("dims_llm").get<std::vector<int>>();
      sink->dim_vit = s.at("dim_vit").get<int>();
      sink->tau_vit = s.at("tau_vit").get<double>();
      sink->tau_llm = s.at("tau_llm").get<double>();
    }
    return tr;
  } catch (const json::exception& e) {
    throw IoError("trace index " + dir.string() + ": " + e.what());
  }
}

std::vector<fs::path> list_traces(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("trace directory not found: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "index.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sinkgate::backbone
