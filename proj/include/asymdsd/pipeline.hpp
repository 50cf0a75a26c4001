#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "asymdsd/distillation.hpp"
#include "asymdsd/geometry.hpp"
#include "asymdsd/masking.hpp"
#include "asymdsd/network.hpp"
#include "asymdsd/params.hpp"
#include "asymdsd/tape.hpp"

namespace asymdsd::pipeline {

struct PipelineConfig {
  nn::ModelConfig model;
  geometry::MultiCropConfig crops;

  std::string mask_sampler = "inverse_blockwise";  // or "uniform"
  double mask_ratio = 0.7;
  int block_size = 6;
  double adjust_ratio = 0.1;
  int n_masks = 4;  // N_mm; 0 disables masking and the MPM objective

  nn::PredictorMode predictor_mode = nn::PredictorMode::kCrossOnly;
  bool centering = true;
  bool use_regression = false;
  double regression_beta = 2.0;
  double koleo_scale = 0.01;
  double tau_student = 0.1;
  float center_momentum = 0.9f;

  bool masking_enabled() const { return n_masks > 0 && mask_ratio > 0.0; }
};

// Views and masks for one cloud, ready for the loss graph.
struct PreparedSample {
  std::vector<geometry::View> views;      // globals first, then locals
  std::vector<masking::MaskSet> masks;    // one set per global view (may be empty)
};

// augment -> normalize -> multi-crop -> multi-mask on the globals.
inline PreparedSample prepare_sample(const geometry::PointCloud& cloud,
                                     const PipelineConfig& cfg, Rng& rng) {
  PreparedSample out;
  auto aug = geometry::augment(geometry::normalize_unit_sphere(cloud), rng);
  out.views = geometry::multi_crop(geometry::normalize_unit_sphere(aug),
                                   cfg.crops, rng);
  if (cfg.masking_enabled()) {
    for (int g = 0; g < 2; ++g) {
      if (cfg.mask_sampler == "uniform") {
        masking::MaskSet set;
        set.mask_ratio = cfg.mask_ratio;
        for (int m = 0; m < cfg.n_masks; ++m)
          set.masks.push_back(masking::sample_uniform(
              out.views[size_t(g)].patches.n_patches, cfg.mask_ratio, rng));
        out.masks.push_back(std::move(set));
      } else {
        out.masks.push_back(masking::build_multimask(
            out.views[size_t(g)].patches.centers, cfg.mask_ratio,
            cfg.block_size, cfg.adjust_ratio, cfg.n_masks, rng));
      }
    }
  }
  return out;
}

namespace detail {

inline Tensor gather_tensor_rows(const Tensor& t, const std::vector<int>& idx) {
  Tensor out({int(idx.size()), t.cols()});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(t.row(idx[i]), t.row(idx[i]) + t.cols(), out.row(int(i)));
  return out;
}

// Patch-point rows for a subset of patches (patch-major layout).
inline Tensor gather_patches(const geometry::PatchSet& ps,
                             const std::vector<int>& patch_idx) {
  const int k = ps.points_per_patch, d = ps.patch_points.cols();
  Tensor out({int(patch_idx.size()) * k, d});
  for (size_t i = 0; i < patch_idx.size(); ++i)
    std::copy(ps.patch_points.row(patch_idx[i] * k),
              ps.patch_points.row(patch_idx[i] * k) + size_t(k) * d,
              out.row(int(i) * k));
  return out;
}

inline double entropy(const float* p, int n) {
  double h = 0.0;
  for (int j = 0; j < n; ++j)
    if (p[j] > 0.f) h -= double(p[j]) * std::log(double(p[j]));
  return h;
}

inline double cross_entropy(const float* p, const float* logq, int n) {
  double ce = 0.0;
  for (int j = 0; j < n; ++j) ce -= double(p[j]) * double(logq[j]);
  return ce;
}

}  // namespace detail

// One sample's loss graph plus the value-level bookkeeping the trainer
// needs: teacher logits for centering, teacher posteriors for the entropy
// diagnostics, and double-precision CE/entropy sums for the KL identity.
struct SampleGraph {
  Tape<float> tape;
  std::unique_ptr<nn::ParamBinding<float>> student;

  int loss = -1;  // cls + mpm (+ regression); KoLeo is seeded at batch level
  double cls_value = 0, mpm_value = 0, reg_value = 0;

  std::vector<int> koleo_cls;  // backbone CLS vars, one per (crop, variant)

  Tensor teacher_cls_logits;    // (2, n_tokens)
  Tensor teacher_patch_logits;  // (2 * N_c, n_tokens)
  Tensor teacher_cls_probs;     // (2, n_tokens)
  Tensor teacher_patch_probs;   // (2 * N_c, n_tokens)

  double cls_ce_sum = 0, cls_ht_sum = 0;
  int cls_terms = 0;
  double mpm_ce_sum = 0, mpm_ht_sum = 0;
  int64_t mpm_terms = 0;

  int teacher_forwards = 0;
};

// Builds the forward graph for one prepared sample. The teacher runs with
// gradient recording disabled; its targets are computed once per global
// view and reused across the N_mm masks.
inline std::unique_ptr<SampleGraph> build_sample_graph(
    const nn::ParamStore& student_params, const distill::TeacherState& teacher,
    const PipelineConfig& cfg, const PreparedSample& sample, float tau_cls,
    float tau_patch) {
  auto sg = std::make_unique<SampleGraph>();
  auto& t = sg->tape;
  sg->student = std::make_unique<nn::ParamBinding<float>>(t, student_params, true);
  nn::ParamBinding<float> teacher_bind(t, teacher.ema, false);
  auto& P = *sg->student;

  const int n_tok = cfg.model.n_tokens;
  const int k = cfg.crops.patch_points;
  const float inv_tau_s = float(1.0 / cfg.tau_student);
  const int n_global = 2;
  const int n_views = n_global + cfg.crops.n_local;
  check(int(sample.views.size()) == n_views, "pipeline: view count mismatch");

  // ---- teacher targets on the full global views ----
  std::array<Tensor, 2> teacher_cls_probs;
  std::vector<Tensor> teacher_patch_probs(2);
  std::vector<Tensor> teacher_patch_repr(2);  // pre-projection, for regression
  sg->teacher_cls_logits = Tensor({2, n_tok});
  const int n_c_global = cfg.crops.global_patches;
  sg->teacher_patch_logits = Tensor({2 * n_c_global, n_tok});

  for (int g = 0; g < 2; ++g) {
    const auto& ps = sample.views[size_t(g)].patches;
    auto tokens = nn::encode_view(t, teacher_bind, cfg.model, ps.patch_points,
                                  ps.centers, k);
    ++sg->teacher_forwards;
    auto cls_logits = nn::projection_head(t, teacher_bind, cfg.model,
                                          t.slice_rows(tokens, 0, 1), "cls");
    auto patch_tokens = t.slice_rows(tokens, 1, ps.n_patches);
    auto patch_logits =
        nn::projection_head(t, teacher_bind, cfg.model, patch_tokens, "patch");

    std::copy(t.val(cls_logits).data.begin(), t.val(cls_logits).data.end(),
              sg->teacher_cls_logits.row(g));
    std::copy(t.val(patch_logits).data.begin(), t.val(patch_logits).data.end(),
              sg->teacher_patch_logits.row(g * n_c_global));

    teacher_cls_probs[size_t(g)] =
        distill::centered_sharpened(t.val(cls_logits), teacher.center_cls, tau_cls);
    teacher_patch_probs[size_t(g)] = distill::centered_sharpened(
        t.val(patch_logits), teacher.center_patch, tau_patch);
    teacher_patch_repr[size_t(g)] = t.val(patch_tokens);
  }
  sg->teacher_cls_probs = Tensor({2, n_tok});
  std::copy(teacher_cls_probs[0].data.begin(), teacher_cls_probs[0].data.end(),
            sg->teacher_cls_probs.row(0));
  std::copy(teacher_cls_probs[1].data.begin(), teacher_cls_probs[1].data.end(),
            sg->teacher_cls_probs.row(1));
  sg->teacher_patch_probs = Tensor({2 * n_c_global, n_tok});
  for (int g = 0; g < 2; ++g)
    std::copy(teacher_patch_probs[size_t(g)].data.begin(),
              teacher_patch_probs[size_t(g)].data.end(),
              sg->teacher_patch_probs.row(g * n_c_global));

  // ---- student views ----
  std::vector<distill::StudentClsView<float>> cls_views;
  std::vector<distill::MpmMaskTerm<float>> mpm_terms;
  int reg_node = -1;
  int64_t reg_count = 0;

  auto student_cls_view = [&](int tokens_var, int origin, bool masked_variant) {
    auto cls_row = t.slice_rows(tokens_var, 0, 1);
    sg->koleo_cls.push_back(cls_row);
    auto logits = nn::projection_head(t, P, cfg.model, cls_row, "cls");
    auto logp = t.log_softmax_rows(t.scale(logits, inv_tau_s));
    cls_views.push_back({logp, origin, masked_variant});
  };

  if (cfg.masking_enabled()) {
    for (int g = 0; g < 2; ++g) {
      const auto& view = sample.views[size_t(g)];
      const auto& ps = view.patches;
      const auto& mask_set = sample.masks[size_t(g)];
      for (int m = 0; m < mask_set.n_masks(); ++m) {
        const auto visible = mask_set.visible_indices(m);
        const auto masked = mask_set.masked_indices(m);
        check(!visible.empty(), "pipeline: mask leaves no visible context");
        check(!masked.empty(), "pipeline: mask leaves nothing to predict");

        auto vis_pts = detail::gather_patches(ps, visible);
        auto vis_ctr = detail::gather_tensor_rows(ps.centers, visible);
        auto tokens =
            nn::encode_view(t, P, cfg.model, vis_pts, vis_ctr, k);
        student_cls_view(tokens, g, true);

        auto context = t.slice_rows(tokens, 1, int(visible.size()));
        auto query_centers = detail::gather_tensor_rows(ps.centers, masked);
        auto pred = nn::predictor_forward(t, P, cfg.model, context,
                                          query_centers, cfg.predictor_mode);
        auto logits = nn::projection_head(t, P, cfg.model, pred, "patch");
        auto logp = t.log_softmax_rows(t.scale(logits, inv_tau_s));
        mpm_terms.push_back(
            {logp, detail::gather_tensor_rows(teacher_patch_probs[size_t(g)],
                                              masked)});

        if (cfg.use_regression) {
          auto target =
              detail::gather_tensor_rows(teacher_patch_repr[size_t(g)], masked);
          auto r = distill::regression_loss(t, pred, target,
                                            float(cfg.regression_beta));
          reg_node = reg_count == 0 ? r : t.add(reg_node, r);
          ++reg_count;
        }
      }
    }
  } else {
    // no masks: the student sees the full global crops (invariance-only mode)
    for (int g = 0; g < 2; ++g) {
      const auto& ps = sample.views[size_t(g)].patches;
      auto tokens = nn::encode_view(t, P, cfg.model, ps.patch_points,
                                    ps.centers, k);
      student_cls_view(tokens, g, false);
    }
  }

  for (int l = 0; l < cfg.crops.n_local; ++l) {
    const auto& ps = sample.views[size_t(n_global + l)].patches;
    auto tokens =
        nn::encode_view(t, P, cfg.model, ps.patch_points, ps.centers, k);
    student_cls_view(tokens, -1, false);
  }

  // ---- losses ----
  auto cls = distill::cls_loss(t, teacher_cls_probs, cls_views, n_views);
  sg->loss = cls.loss;
  sg->cls_value = t.val(cls.loss).data[0];
  if (!mpm_terms.empty()) {
    auto mpm = distill::mpm_loss(t, mpm_terms);
    sg->mpm_value = t.val(mpm).data[0];
    sg->loss = t.add(sg->loss, mpm);
  }
  if (reg_count > 0) {
    auto reg = t.scale(reg_node, 1.f / float(reg_count));
    sg->reg_value = t.val(reg).data[0];
    sg->loss = t.add(sg->loss, reg);
  }

  // ---- KL bookkeeping (double precision, independent of the graph) ----
  for (int u = 0; u < 2; ++u) {
    const double ht = detail::entropy(teacher_cls_probs[size_t(u)].row(0), n_tok);
    for (const auto& v : cls_views) {
      if (!(v.masked_variant || v.origin != u)) continue;
      sg->cls_ce_sum += detail::cross_entropy(
          teacher_cls_probs[size_t(u)].row(0), t.val(v.logp).row(0), n_tok);
      sg->cls_ht_sum += ht;
      ++sg->cls_terms;
    }
  }
  for (const auto& term : mpm_terms) {
    for (int r = 0; r < term.teacher_probs.rows(); ++r) {
      sg->mpm_ce_sum += detail::cross_entropy(term.teacher_probs.row(r),
                                              t.val(term.student_logp).row(r),
                                              n_tok);
      sg->mpm_ht_sum += detail::entropy(term.teacher_probs.row(r), n_tok);
      ++sg->mpm_terms;
    }
  }
  return sg;
}

}  // namespace asymdsd::pipeline
