#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

#include "sinkgate/backbone/backbone.hpp"
#include "sinkgate/numerics/autodiff.hpp"
#include "sinkgate/scenes/scene.hpp"

namespace sinkgate::backbone {

// layer -> one coefficient per visual token (index into I_vis). Layers not
// present, and tokens outside I_vis, keep their keys unscaled.
struct KeyScalePlan {
  std::map<int, std::vector<double>> layers;

  bool empty() const { return layers.empty(); }
  // Throws ConfigError on out-of-range layers, wrong widths, negative or
  // non-finite coefficients.
  void validate(int num_layers, int n_visual) const;
};

// Called with H^l (the output of layer l, or the embeddings for l = -1)
// before layer l+1 runs. Return a length-T Var of key scales for layer l+1,
// or a default-constructed Var for none.
using ScaleHook = std::function<ad::Var(int layer, ad::Tape& tape, ad::Var hidden)>;

struct ForwardOptions {
  const KeyScalePlan* plan = nullptr;
  ScaleHook hook;
  bool capture = false;
  // Resume from a cached H^{start_layer-1}; the earlier layers are skipped.
  int start_layer = 0;
  const Tensor* start_hidden = nullptr;
};

struct RunTrace {
  scenes::Spans spans;
  int T = 0;
  Tensor encoder_out;  // n x D_v
  Tensor projected;    // n x D
  // hidden[0] = embeddings H^{-1}; hidden[l + 1] = H^l after layer l.
  // Filled only when capturing (entries before start_layer stay empty).
  std::vector<Tensor> hidden;
  std::vector<Tensor> block_out;           // F^l = attention + FFN update
  std::vector<std::vector<Tensor>> attn;   // [layer][head], T x T
  Tensor final_hidden;                     // normalized last row, 1 x D
  Tensor logits;                           // vocab, at the final position

  const Tensor& H(int layer) const { return hidden.at(static_cast<std::size_t>(layer + 1)); }
  // Row of the final prompt token at layer `layer`.
  Tensor h_last(int layer) const;
  int n_visual() const { return spans.vis_end - spans.vis_begin; }
};

// Patches and token ids: every VIS token consumes the next patch row, and the
// VIS tokens must be contiguous. Throws ConfigError for ids outside the
// vocabulary or a layout mismatch.
RunTrace forward(const Backbone& bb, const Tensor& patches, std::span<const int> tokens,
                 const ForwardOptions& opts = {});
RunTrace forward(const Backbone& bb, const scenes::Example& ex, const ForwardOptions& opts = {});

// Tape-level pass used by gate training. Returns the final-position logits
// (1 x vocab); `trace` (optional) receives the captured tensors.
ad::Var forward_on_tape(ad::Tape& tape, const Backbone& bb, const Tensor& patches, std::span<const int> tokens,
                        const ForwardOptions& opts, RunTrace* trace);

// Embedding rows H^{-1} and the span layout for a prompt.
Tensor embed(const Backbone& bb, const Tensor& projected, std::span<const int> tokens, scenes::Spans& spans);

// Lowest id wins ties.
int argmax(std::span<const double> v);

// Greedy decoding; the plan is applied at every step.
std::vector<int> generate(const Backbone& bb, const scenes::Example& ex, const KeyScalePlan* plan, int max_new);
int predict(const Backbone& bb, const scenes::Example& ex, const KeyScalePlan* plan = nullptr);

}  // namespace sinkgate::backbone
