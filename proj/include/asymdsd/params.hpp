#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "asymdsd/common.hpp"
#include "asymdsd/rng.hpp"
#include "asymdsd/tape.hpp"
#include "asymdsd/tensor.hpp"

namespace asymdsd::nn {

// Model dimensions. Defaults are the ViT-S configuration; micro-scale
// presets shrink everything but keep the same topology.
struct ModelConfig {
  int point_dim = 3;  // 3 + F

  int embed_dim = 384;
  int layers = 12;
  int heads = 6;
  int mlp_dim = 1536;

  int patch_mlp1_hidden = 128;
  int patch_mlp1_out = 256;
  int patch_mlp2_hidden = 512;

  int pos_hidden = 128;

  int pred_dim = 192;
  int pred_layers = 6;
  int pred_heads = 3;
  int pred_mlp_dim = 768;
  int pred_pos_hidden = 128;

  int head_hidden1 = 1024;
  int head_hidden2 = 1024;
  int head_bottleneck = 256;
  int n_tokens = 4096;
  bool head_weight_norm = false;

  float drop_path = 0.0f;

  void validate() const {
    check(embed_dim % heads == 0, "model config: embed_dim must divide by heads");
    check(pred_dim % pred_heads == 0,
          "model config: pred_dim must divide by pred_heads");
    check(layers >= 0 && pred_layers >= 0, "model config: negative layer count");
    check(n_tokens >= 2, "model config: n_tokens must be >= 2");
  }
};

// Flat registry of named tensors. std::map keeps iteration name-sorted, so
// initialization, EMA updates, and checkpoints are order-deterministic.
template <typename S>
struct ParamStoreT {
  std::map<std::string, TensorT<S>> tensors;

  TensorT<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    check(it != tensors.end(), "params: unknown tensor '", name, "'");
    return it->second;
  }
  const TensorT<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    check(it != tensors.end(), "params: unknown tensor '", name, "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  int64_t count_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, t] : tensors)
      if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }
  int64_t total_count() const { return count_prefix(""); }

  void check_finite() const {
    for (const auto& [name, t] : tensors)
      check(t.all_finite(), "params: non-finite values in '", name, "'");
  }

  template <typename T>
  ParamStoreT<T> cast() const {
    ParamStoreT<T> out;
    for (const auto& [name, t] : tensors) out.tensors[name] = t.template cast<T>();
    return out;
  }
};

using ParamStore = ParamStoreT<float>;

namespace detail {

template <typename S>
void add_mlp(ParamStoreT<S>& p, const std::string& pfx, int in, int hidden,
             int out) {
  p.tensors[pfx + ".fc1.w"] = TensorT<S>({hidden, in});
  p.tensors[pfx + ".norm.g"] = TensorT<S>({hidden});
  p.tensors[pfx + ".fc2.w"] = TensorT<S>({out, hidden});
}

template <typename S>
void add_block(ParamStoreT<S>& p, const std::string& pfx, int dim, int mlp) {
  p.tensors[pfx + ".norm1.g"] = TensorT<S>({dim});
  p.tensors[pfx + ".attn.q.w"] = TensorT<S>({dim, dim});
  p.tensors[pfx + ".attn.k.w"] = TensorT<S>({dim, dim});
  p.tensors[pfx + ".attn.v.w"] = TensorT<S>({dim, dim});
  p.tensors[pfx + ".attn.o.w"] = TensorT<S>({dim, dim});
  p.tensors[pfx + ".norm2.g"] = TensorT<S>({dim});
  p.tensors[pfx + ".mlp.fc1.w"] = TensorT<S>({mlp, dim});
  p.tensors[pfx + ".mlp.fc2.w"] = TensorT<S>({dim, mlp});
}

template <typename S>
void add_head(ParamStoreT<S>& p, const std::string& pfx, const ModelConfig& cfg) {
  const int d = cfg.embed_dim;
  p.tensors[pfx + ".fc1.w"] = TensorT<S>({cfg.head_hidden1, d});
  p.tensors[pfx + ".fc1.b"] = TensorT<S>({cfg.head_hidden1});
  p.tensors[pfx + ".fc2.w"] = TensorT<S>({cfg.head_hidden2, cfg.head_hidden1});
  p.tensors[pfx + ".fc2.b"] = TensorT<S>({cfg.head_hidden2});
  p.tensors[pfx + ".fc3.w"] = TensorT<S>({cfg.head_bottleneck, cfg.head_hidden2});
  p.tensors[pfx + ".fc3.b"] = TensorT<S>({cfg.head_bottleneck});
  p.tensors[pfx + ".out.w"] = TensorT<S>({cfg.n_tokens, cfg.head_bottleneck});
  p.tensors[pfx + ".out.b"] = TensorT<S>({cfg.n_tokens});
}

}  // namespace detail

// Creates the full student registry: patch/position embeddings, encoder
// blocks, CLS and mask tokens, predictor, and both projection heads.
template <typename S>
ParamStoreT<S> make_param_store(const ModelConfig& cfg) {
  cfg.validate();
  ParamStoreT<S> p;
  detail::add_mlp(p, "embed.mlp1", cfg.point_dim, cfg.patch_mlp1_hidden,
                  cfg.patch_mlp1_out);
  detail::add_mlp(p, "embed.mlp2", 2 * cfg.patch_mlp1_out, cfg.patch_mlp2_hidden,
                  cfg.embed_dim);
  detail::add_mlp(p, "pos", 3, cfg.pos_hidden, cfg.embed_dim);

  p.tensors["enc.cls"] = TensorT<S>({cfg.embed_dim});
  for (int l = 0; l < cfg.layers; ++l)
    detail::add_block(p, "enc.blk" + std::to_string(l), cfg.embed_dim, cfg.mlp_dim);
  p.tensors["enc.norm.g"] = TensorT<S>({cfg.embed_dim});

  p.tensors["pred.mask"] = TensorT<S>({cfg.pred_dim});
  detail::add_mlp(p, "pred.pos", 3, cfg.pred_pos_hidden, cfg.pred_dim);
  p.tensors["pred.down.w"] = TensorT<S>({cfg.pred_dim, cfg.embed_dim});
  for (int l = 0; l < cfg.pred_layers; ++l)
    detail::add_block(p, "pred.blk" + std::to_string(l), cfg.pred_dim,
                      cfg.pred_mlp_dim);
  p.tensors["pred.norm.g"] = TensorT<S>({cfg.pred_dim});
  p.tensors["pred.up.w"] = TensorT<S>({cfg.embed_dim, cfg.pred_dim});

  detail::add_head(p, "head.cls", cfg);
  detail::add_head(p, "head.patch", cfg);
  return p;
}

// Truncated normal (sigma 0.02) for transformer and embedding weights and
// the learnable tokens, ones for norm gains, zeros for biases.
//
// The projection heads are the exception: they are plain MLPs with no
// normalization, so four layers of sigma-0.02 weights shrink the logits to
// ~1e-5 and the temperature-sharpened teacher stays numerically uniform,
// stalling the distillation bootstrap. Their linears use fan-in scaling
// instead, which puts the initial logits at O(1).
template <typename S>
void init_params(ParamStoreT<S>& p, Rng& rng) {
  for (auto& [name, t] : p.tensors) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0) {
      t.fill(S(1));
    } else if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      t.fill(S(0));
    } else {
      double sigma = 0.02;
      if (name.rfind("head.", 0) == 0 && t.shape.size() == 2) {
        sigma = 1.0 / std::sqrt(double(t.shape[1]));
        // the logit layer starts closer to uniform: sharp random targets at
        // the teacher temperature would dominate the early loss
        if (name.find(".out.w") != std::string::npos) sigma *= 0.25;
      }
      for (auto& v : t.data) v = S(rng.truncated_normal(sigma));
    }
  }
}

// AdamW weight-decay exemption: 1-D tensors (norm gains, biases, CLS and
// mask tokens).
inline bool decay_exempt(const std::string&, const std::vector<int>& shape) {
  return shape.size() < 2;
}

// Teacher shares everything except the predictor.
inline bool is_predictor_param(const std::string& name) {
  return name.rfind("pred.", 0) == 0;
}

// Lazily binds registry tensors onto a tape. Student bindings get
// gradients, teacher bindings do not.
template <typename S>
struct ParamBinding {
  Tape<S>* tape = nullptr;
  const ParamStoreT<S>* store = nullptr;
  bool trainable = false;
  std::map<std::string, typename Tape<S>::Index> bound;

  ParamBinding(Tape<S>& t, const ParamStoreT<S>& s, bool train)
      : tape(&t), store(&s), trainable(train) {}

  typename Tape<S>::Index operator()(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    auto idx = tape->input(store->at(name), trainable);
    bound.emplace(name, idx);
    return idx;
  }

  // Gradients of every bound tensor, keyed by name. Errors on non-finite
  // values, naming the offending tensor.
  std::map<std::string, TensorT<S>> collect_grads() const {
    std::map<std::string, TensorT<S>> out;
    for (const auto& [name, idx] : bound) {
      const auto& g = tape->grad(idx);
      check(g.all_finite(), "backward: non-finite gradient in '", name, "'");
      out[name] = g;
    }
    return out;
  }
};

}  // namespace asymdsd::nn
