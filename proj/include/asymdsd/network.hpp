#pragma once

#include <string>
#include <vector>

#include "asymdsd/params.hpp"
#include "asymdsd/rng.hpp"
#include "asymdsd/tape.hpp"

namespace asymdsd::nn {

enum class PredictorMode { kCrossOnly, kSelfFull };

inline PredictorMode predictor_mode_from(const std::string& s) {
  if (s == "cross_only") return PredictorMode::kCrossOnly;
  if (s == "self_full") return PredictorMode::kSelfFull;
  fail("predictor mode: unknown mode '", s, "' (expected cross_only or self_full)");
}

// Per-layer, per-head attention matrices captured during a forward pass.
struct AttnRecord {
  // records[layer][head], each (1 + N_c) x (1 + N_c) row-stochastic.
  std::vector<std::vector<Tensor>> records;
};

namespace detail {

// Two linear layers with RMSNorm + GELU in between; the MLP building block
// shared by the patch and position embeddings.
template <typename S>
typename Tape<S>::Index mlp2(Tape<S>& t, ParamBinding<S>& p,
                             const std::string& pfx,
                             typename Tape<S>::Index x) {
  auto h = t.linear(x, p(pfx + ".fc1.w"));
  h = t.rms_norm(h, p(pfx + ".norm.g"));
  h = t.gelu(h);
  return t.linear(h, p(pfx + ".fc2.w"));
}

// Multi-head attention with separate query and key/value sources; covers
// both self-attention (q_src == kv_src) and cross-attention.
template <typename S>
typename Tape<S>::Index attention(Tape<S>& t, ParamBinding<S>& p,
                                  const std::string& pfx,
                                  typename Tape<S>::Index q_src,
                                  typename Tape<S>::Index kv_src, int dim,
                                  int heads, std::vector<Tensor>* record) {
  const int dh = dim / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  auto q = t.linear(q_src, p(pfx + ".q.w"));
  auto k = t.linear(kv_src, p(pfx + ".k.w"));
  auto v = t.linear(kv_src, p(pfx + ".v.w"));
  typename Tape<S>::Index merged = -1;
  for (int h = 0; h < heads; ++h) {
    auto qh = t.slice_cols(q, h * dh, dh);
    auto kh = t.slice_cols(k, h * dh, dh);
    auto vh = t.slice_cols(v, h * dh, dh);
    auto scores = t.scale(t.matmul_nt(qh, kh), scale);
    auto attn = t.softmax_rows(scores);
    if (record) record->push_back(t.val(attn).template cast<float>());
    auto oh = t.matmul(attn, vh);
    merged = h == 0 ? oh : t.concat_cols(merged, oh);
  }
  return t.linear(merged, p(pfx + ".o.w"));
}

}  // namespace detail

// PointNet patch embedding: per-point MLP, max-pool, pooled vector
// concatenated back to every point, second MLP, final max-pool. The result
// is permutation-invariant over the points within each patch.
template <typename S>
typename Tape<S>::Index patch_embed(Tape<S>& t, ParamBinding<S>& p,
                                    typename Tape<S>::Index patch_points,
                                    int points_per_patch) {
  auto z = detail::mlp2(t, p, "embed.mlp1", patch_points);
  auto pooled = t.group_max(z, points_per_patch);
  auto cat = t.concat_cols(z, t.group_broadcast(pooled, points_per_patch));
  auto h = detail::mlp2(t, p, "embed.mlp2", cat);
  return t.group_max(h, points_per_patch);
}

// Absolute position embedding of patch centers.
template <typename S>
typename Tape<S>::Index pos_embed(Tape<S>& t, ParamBinding<S>& p,
                                  typename Tape<S>::Index centers) {
  return detail::mlp2(t, p, "pos", centers);
}

// Stochastic depth hook on a residual branch. Rate 0 (the pre-training
// default) is an identity.
template <typename S>
typename Tape<S>::Index drop_path(Tape<S>& t, typename Tape<S>::Index branch,
                                  float rate, Rng* rng) {
  if (rate <= 0.f || rng == nullptr) return branch;
  const bool keep = rng->uniform() >= rate;
  return t.scale(branch, keep ? S(1) / S(1.f - rate) : S(0));
}

// Pre-norm transformer encoder over [CLS; patch tokens]. The position
// embedding is re-added to the patch rows at the input of every block; the
// CLS row carries no position. Returns all 1 + N_c token outputs.
template <typename S>
typename Tape<S>::Index encoder_forward(Tape<S>& t, ParamBinding<S>& p,
                                        const ModelConfig& cfg,
                                        typename Tape<S>::Index patch_emb,
                                        typename Tape<S>::Index pos,
                                        AttnRecord* attn_record = nullptr,
                                        Rng* drop_rng = nullptr) {
  const int n_patches = t.val(patch_emb).rows();
  auto x = t.concat_rows(p("enc.cls"), patch_emb);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pfx = "enc.blk" + std::to_string(l);
    auto cls_row = t.slice_rows(x, 0, 1);
    auto patches = t.add(t.slice_rows(x, 1, n_patches), pos);
    x = t.concat_rows(cls_row, patches);

    std::vector<Tensor>* rec = nullptr;
    if (attn_record) {
      attn_record->records.emplace_back();
      rec = &attn_record->records.back();
    }
    auto y = t.rms_norm(x, p(pfx + ".norm1.g"));
    auto a = detail::attention(t, p, pfx + ".attn", y, y, cfg.embed_dim,
                               cfg.heads, rec);
    x = t.add(x, drop_path(t, a, cfg.drop_path, drop_rng));

    auto y2 = t.rms_norm(x, p(pfx + ".norm2.g"));
    auto h = t.linear(t.gelu(t.linear(y2, p(pfx + ".mlp.fc1.w"))),
                      p(pfx + ".mlp.fc2.w"));
    x = t.add(x, drop_path(t, h, cfg.drop_path, drop_rng));
  }
  return x;
}

// Asymmetric predictor. Queries are e_mask + pos(center) at predictor
// width; the visible context is down-projected from encoder width.
//
// cross_only: every block cross-attends from the queries to the context
// only, so each query is processed independently of the others (no
// attention between mask queries). self_full: context and queries are
// concatenated and run through full self-attention (ablation mode).
template <typename S>
typename Tape<S>::Index predictor_forward(Tape<S>& t, ParamBinding<S>& p,
                                          const ModelConfig& cfg,
                                          typename Tape<S>::Index context,
                                          const Tensor& query_centers,
                                          PredictorMode mode) {
  const int n_ctx = t.val(context).rows();
  const int n_query = query_centers.rows();
  check(n_ctx >= 1, "predictor: needs at least one context token");
  check(n_query >= 1, "predictor: needs at least one query");

  auto ctx = t.linear(context, p("pred.down.w"));
  auto qpos = detail::mlp2(t, p, "pred.pos",
                           t.constant(query_centers.template cast<S>()));
  auto x = t.add(t.repeat_row(p("pred.mask"), n_query), qpos);

  if (mode == PredictorMode::kSelfFull) x = t.concat_rows(ctx, x);
  for (int l = 0; l < cfg.pred_layers; ++l) {
    const std::string pfx = "pred.blk" + std::to_string(l);
    auto y = t.rms_norm(x, p(pfx + ".norm1.g"));
    typename Tape<S>::Index a;
    if (mode == PredictorMode::kCrossOnly) {
      a = detail::attention(t, p, pfx + ".attn", y, ctx, cfg.pred_dim,
                            cfg.pred_heads, nullptr);
    } else {
      a = detail::attention(t, p, pfx + ".attn", y, y, cfg.pred_dim,
                            cfg.pred_heads, nullptr);
    }
    x = t.add(x, a);
    auto y2 = t.rms_norm(x, p(pfx + ".norm2.g"));
    auto h = t.linear(t.gelu(t.linear(y2, p(pfx + ".mlp.fc1.w"))),
                      p(pfx + ".mlp.fc2.w"));
    x = t.add(x, h);
  }
  if (mode == PredictorMode::kSelfFull) x = t.slice_rows(x, n_ctx, n_query);
  x = t.rms_norm(x, p("pred.norm.g"));
  return t.linear(x, p("pred.up.w"));
}

// 3-layer GELU MLP plus a final linear layer to the n_tokens logits.
// Biases are enabled throughout; the cls and patch heads have independent
// parameters selected by `which`.
//
// head_weight_norm switches the logit layer to its cosine form: the
// bottleneck and the prototype rows are L2-normalized and the bias is
// dropped, bounding every logit to [-1, 1]. Without the bound the head can
// shrink its output into the constant/uniform collapse that centering
// cannot see.
template <typename S>
typename Tape<S>::Index projection_head(Tape<S>& t, ParamBinding<S>& p,
                                        const ModelConfig& cfg,
                                        typename Tape<S>::Index tokens,
                                        const std::string& which) {
  const std::string pfx = "head." + which;
  check(which == "cls" || which == "patch", "projection head: unknown head '",
        which, "'");
  auto h = t.gelu(t.linear_bias(tokens, p(pfx + ".fc1.w"), p(pfx + ".fc1.b")));
  h = t.gelu(t.linear_bias(h, p(pfx + ".fc2.w"), p(pfx + ".fc2.b")));
  h = t.linear_bias(h, p(pfx + ".fc3.w"), p(pfx + ".fc3.b"));
  if (cfg.head_weight_norm) {
    auto hw = t.row_l2_normalize(h);
    return t.matmul_nt(hw, t.row_l2_normalize(p(pfx + ".out.w")));
  }
  return t.add_rowvec(t.matmul_nt(h, p(pfx + ".out.w")), p(pfx + ".out.b"));
}

// Full view embedding: patch + position embeddings, encoder, final norm.
// Returns the (1 + N_c) x D token matrix.
template <typename S>
typename Tape<S>::Index encode_view(Tape<S>& t, ParamBinding<S>& p,
                                    const ModelConfig& cfg,
                                    const Tensor& patch_points,
                                    const Tensor& centers, int points_per_patch,
                                    AttnRecord* attn_record = nullptr,
                                    Rng* drop_rng = nullptr) {
  auto pts = t.constant(patch_points.template cast<S>());
  auto ctr = t.constant(centers.template cast<S>());
  auto emb = patch_embed(t, p, pts, points_per_patch);
  auto pos = pos_embed(t, p, ctr);
  auto tokens = encoder_forward(t, p, cfg, emb, pos, attn_record, drop_rng);
  return t.rms_norm(tokens, p("enc.norm.g"));
}

}  // namespace asymdsd::nn
