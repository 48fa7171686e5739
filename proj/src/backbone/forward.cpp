#include "sinkgate/backbone/forward.hpp"

#include <cmath>
#include <string>

#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::backbone {

void KeyScalePlan::validate(int num_layers, int n_visual) const {
  for (const auto& [layer, coeffs] : layers) {
    if (layer < 0 || layer >= num_layers) {
      throw ConfigError("key-scale plan: layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(num_layers) + ")");
    }
    if (static_cast<int>(coeffs.size()) != n_visual) {
      throw ConfigError("key-scale plan: layer " + std::to_string(layer) + " has " +
                        std::to_string(coeffs.size()) + " coefficients for " + std::to_string(n_visual) +
                        " visual tokens");
    }
    for (double c : coeffs) {
      if (!std::isfinite(c) || c < 0.0) throw ConfigError("key-scale plan: coefficients must be finite and >= 0");
    }
  }
}

Tensor RunTrace::h_last(int layer) const {
  const Tensor& h = H(layer);
  const auto r = h.row(static_cast<std::size_t>(spans.txt_end - 1));
  return Tensor({1, h.cols()}, std::vector<double>(r.begin(), r.end()));
}

Tensor embed(const Backbone& bb, const Tensor& projected, std::span<const int> tokens, scenes::Spans& spans) {
  const auto& c = bb.config;
  const int T = static_cast<int>(tokens.size());
  if (T > c.max_seq) throw ConfigError("sequence of " + std::to_string(T) + " exceeds max_seq");
  int first_vis = -1, last_vis = -1, nvis = 0;
  for (int p = 0; p < T; ++p) {
    const int id = tokens[static_cast<std::size_t>(p)];
    if (id < 0 || id >= c.vocab) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
    if (id == vocab::VIS) {
      if (first_vis < 0) first_vis = p;
      if (last_vis >= 0 && last_vis != p - 1) throw ConfigError("visual tokens must be contiguous");
      last_vis = p;
      ++nvis;
    }
  }
  if (nvis != static_cast<int>(projected.rows())) {
    throw ConfigError("prompt has " + std::to_string(nvis) + " visual slots for " +
                      std::to_string(projected.rows()) + " patches");
  }
  spans = scenes::Spans{};
  spans.sys_begin = 0;
  spans.sys_end = nvis ? first_vis : 0;
  spans.vis_begin = nvis ? first_vis : 0;
  spans.vis_end = nvis ? last_vis + 1 : 0;
  spans.txt_begin = spans.vis_end;
  spans.txt_end = T;

  const std::size_t D = static_cast<std::size_t>(c.D);
  Tensor h = Tensor::matrix(static_cast<std::size_t>(T), D);
  for (int p = 0; p < T; ++p) {
    const int id = tokens[static_cast<std::size_t>(p)];
    auto dst = h.row(static_cast<std::size_t>(p));
    auto pos = bb.pos_emb.row(static_cast<std::size_t>(p));
    auto src = id == vocab::VIS ? projected.row(static_cast<std::size_t>(p - first_vis))
                                : bb.tok_emb.row(static_cast<std::size_t>(id));
    for (std::size_t d = 0; d < D; ++d) dst[d] = src[d] + pos[d];
  }
  return h;
}

namespace {

struct LayerVars {
  ad::Var norm1, wq, wk, wv, wo, norm2, w_up, b_up, w_down, b_down;
};

LayerVars bind(ad::Tape& tape, const LayerWeights& w) {
  return {tape.constant_ref(w.norm1), tape.constant_ref(w.wq),    tape.constant_ref(w.wk),
          tape.constant_ref(w.wv),    tape.constant_ref(w.wo),    tape.constant_ref(w.norm2),
          tape.constant_ref(w.w_up),  tape.constant_ref(w.b_up),  tape.constant_ref(w.w_down),
          tape.constant_ref(w.b_down)};
}

}  // namespace

ad::Var forward_on_tape(ad::Tape& tape, const Backbone& bb, const Tensor& patches, std::span<const int> tokens,
                        const ForwardOptions& opts, RunTrace* trace) {
  const auto& c = bb.config;
  const int L = c.L;
  const int H = c.H;
  const std::size_t dh = static_cast<std::size_t>(c.head_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  RunTrace local;
  RunTrace& tr = trace ? *trace : local;
  tr = RunTrace{};

  if (opts.start_layer < 0 || opts.start_layer > L) throw ConfigError("start_layer outside [0, L]");
  Tensor h0;
  if (opts.start_layer == 0) {
    tr.encoder_out = encode(bb, patches);
    tr.projected = project(bb, tr.encoder_out);
    h0 = embed(bb, tr.projected, tokens, tr.spans);
  } else {
    if (!opts.start_hidden) throw ConfigError("start_layer > 0 needs start_hidden");
    // Only the layout is needed; the prefix activations come from the cache.
    int nvis = 0;
    for (int id : tokens) nvis += id == vocab::VIS;
    const Tensor dummy = Tensor::matrix(static_cast<std::size_t>(nvis), static_cast<std::size_t>(c.D));
    (void)embed(bb, dummy, tokens, tr.spans);
    if (opts.start_hidden->rows() != tokens.size()) throw ShapeError("start_hidden row count mismatch");
  }
  tr.T = static_cast<int>(tokens.size());
  const int n_vis = tr.spans.vis_end - tr.spans.vis_begin;
  if (opts.plan) opts.plan->validate(L, n_vis);

  if (opts.capture) {
    tr.hidden.assign(static_cast<std::size_t>(L + 1), Tensor{});
    tr.block_out.assign(static_cast<std::size_t>(L), Tensor{});
    tr.attn.assign(static_cast<std::size_t>(L), {});
  }

  ad::Var x = opts.start_layer == 0 ? tape.constant(std::move(h0)) : tape.constant_ref(*opts.start_hidden);
  if (opts.capture) tr.hidden[static_cast<std::size_t>(opts.start_layer)] = x.value();

  for (int l = opts.start_layer; l < L; ++l) {
    // Key scales for this layer: explicit plan and/or the hook reading H^{l-1}.
    ad::Var scale;
    if (opts.hook) scale = opts.hook(l - 1, tape, x);
    if (opts.plan) {
      auto it = opts.plan->layers.find(l);
      if (it != opts.plan->layers.end()) {
        if (scale.valid()) throw InvariantError("layer " + std::to_string(l) + " has both a plan and a gate");
        Tensor s = Tensor::vector(static_cast<std::size_t>(tr.T), 1.0);
        for (int j = 0; j < n_vis; ++j) s[static_cast<std::size_t>(tr.spans.vis_begin + j)] = it->second[j];
        scale = tape.constant(std::move(s));
      }
    }

    const LayerWeights& w = bb.layers[static_cast<std::size_t>(l)];
    const LayerVars v = bind(tape, w);
    ad::Var xn = ad::rmsnorm_rows(x, v.norm1, c.norm_eps);
    ad::Var q = ad::matmul(xn, v.wq);
    ad::Var k = ad::matmul(xn, v.wk);
    ad::Var val = ad::matmul(xn, v.wv);
    if (scale.valid()) k = ad::scale_rows(k, scale);
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<std::size_t>(H));
    for (int hd = 0; hd < H; ++hd) {
      const std::size_t off = static_cast<std::size_t>(hd) * dh;
      ad::Var logits = ad::scale(ad::matmul_bt(ad::slice_cols(q, off, dh), ad::slice_cols(k, off, dh)), inv_sqrt);
      ad::Var a = ad::causal_softmax_rows(logits);
      if (opts.capture) tr.attn[static_cast<std::size_t>(l)].push_back(a.value());
      heads.push_back(ad::matmul(a, ad::slice_cols(val, off, dh)));
    }
    ad::Var attn_out = ad::matmul(ad::concat_cols(heads), v.wo);
    ad::Var mid = ad::add(x, attn_out);
    ad::Var xn2 = ad::rmsnorm_rows(mid, v.norm2, c.norm_eps);
    ad::Var up = ad::gelu(ad::add_rowvec(ad::matmul(xn2, v.w_up), v.b_up));
    ad::Var ffn = ad::add_rowvec(ad::matmul(up, v.w_down), v.b_down);
    x = ad::add(mid, ffn);
    if (opts.capture) {
      tr.hidden[static_cast<std::size_t>(l + 1)] = x.value();
      tr.block_out[static_cast<std::size_t>(l)] = ops::add(attn_out.value(), ffn.value());
    }
  }

  ad::Var last = ad::row(x, static_cast<std::size_t>(tr.T - 1));
  ad::Var fin = ad::rmsnorm_rows(last, tape.constant_ref(bb.final_norm), c.norm_eps);
  ad::Var logits = ad::matmul(fin, tape.constant_ref(bb.unembed));
  if (!logits.value().all_finite()) throw NumericError("forward: non-finite logits");
  tr.final_hidden = fin.value();
  tr.logits = logits.value().reshaped({logits.value().size()});
  return logits;
}

RunTrace forward(const Backbone& bb, const Tensor& patches, std::span<const int> tokens,
                 const ForwardOptions& opts) {
  ad::Tape tape;
  RunTrace tr;
  forward_on_tape(tape, bb, patches, tokens, opts, &tr);
  return tr;
}

RunTrace forward(const Backbone& bb, const scenes::Example& ex, const ForwardOptions& opts) {
  return forward(bb, ex.patches, ex.prompt, opts);
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<int> generate(const Backbone& bb, const scenes::Example& ex, const KeyScalePlan* plan, int max_new) {
  if (max_new < 1) throw ConfigError("generate: max_new must be >= 1");
  std::vector<int> tokens = ex.prompt;
  std::vector<int> out;
  ForwardOptions opts;
  opts.plan = plan;
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(tokens.size()) >= bb.config.max_seq) break;
    const RunTrace tr = forward(bb, ex.patches, tokens, opts);
    const int next = argmax(tr.logits.data());
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

int predict(const Backbone& bb, const scenes::Example& ex, const KeyScalePlan* plan) {
  ForwardOptions opts;
  opts.plan = plan;
  return argmax(forward(bb, ex, opts).logits.data());
}

}  // namespace sinkgate::backbone
