#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "asymdsd/params.hpp"
#include "asymdsd/tape.hpp"
#include "asymdsd/tensor.hpp"

namespace asymdsd::distill {

// EMA mirror of the student (encoder and both heads, no predictor) plus the
// per-head centering vectors.
struct TeacherState {
  nn::ParamStore ema;
  Tensor center_cls;    // (n_tokens)
  Tensor center_patch;  // (n_tokens)
};

inline TeacherState make_teacher(const nn::ParamStore& student, int n_tokens) {
  TeacherState t;
  for (const auto& [name, tensor] : student.tensors)
    if (!nn::is_predictor_param(name)) t.ema.tensors[name] = tensor;
  t.center_cls = Tensor({n_tokens});
  t.center_patch = Tensor({n_tokens});
  return t;
}

// theta' <- eta * theta' + (1 - eta) * theta over every shared tensor.
inline void ema_update(TeacherState& teacher, const nn::ParamStore& student,
                       float eta) {
  for (auto& [name, t] : teacher.ema.tensors) {
    const auto& s = student.at(name);
    check(s.same_shape(t), "ema_update: shape mismatch for '", name, "'");
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = eta * t.data[i] + (1.f - eta) * s.data[i];
  }
}

// Row-wise softmax(logits / tau), stabilized by max subtraction.
inline Tensor sharpened_softmax(const Tensor& logits, float tau) {
  check(tau > 0.f, "sharpened_softmax: temperature must be positive");
  check(logits.all_finite(), "sharpened_softmax: non-finite logits");
  const int rows = logits.rows(), n = logits.cols();
  Tensor out({rows, n});
  for (int r = 0; r < rows; ++r) {
    const float* x = logits.row(r);
    float* y = out.row(r);
    float mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp((x[j] - mx) / tau);
      sum += y[j];
    }
    const float inv = float(1.0 / sum);
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  out.shape = logits.shape;
  return out;
}

// Teacher posterior: softmax((logits - center) / tau) per row.
inline Tensor centered_sharpened(const Tensor& logits, const Tensor& center,
                                 float tau) {
  check(logits.cols() == int(center.numel()),
        "centered_sharpened: center width mismatch");
  Tensor shifted = logits;
  const int rows = shifted.rows(), n = shifted.cols();
  for (int r = 0; r < rows; ++r) {
    float* x = shifted.row(r);
    for (int j = 0; j < n; ++j) x[j] -= center.data[size_t(j)];
  }
  return sharpened_softmax(shifted, tau);
}

// center <- eta_l * center + (1 - eta_l) * mean over batch teacher logits.
// An empty batch leaves the center unchanged.
inline void update_center(Tensor& center, const Tensor& batch_logits,
                          float eta_l = 0.9f) {
  const int rows = batch_logits.rows();
  if (batch_logits.numel() == 0 || rows == 0) return;
  const int n = int(center.numel());
  check(batch_logits.cols() == n, "update_center: width mismatch");
  for (int j = 0; j < n; ++j) {
    double mean = 0.0;
    for (int r = 0; r < rows; ++r) mean += batch_logits.at(r, j);
    mean /= rows;
    center.data[size_t(j)] =
        eta_l * center.data[size_t(j)] + (1.f - eta_l) * float(mean);
  }
}

namespace detail {

inline void check_prob_rows(const Tensor& p, const char* what) {
  const int rows = p.rows(), n = p.cols();
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += p.at(r, j);
    check(std::abs(s - 1.0) <= 1e-4, what,
          ": distribution not normalized (row sum ", s, ")");
  }
}

template <typename S>
void check_logprob_rows(const TensorT<S>& lp, const char* what) {
  const int rows = lp.rows(), n = lp.cols();
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(double(lp.at(r, j)));
    check(std::abs(s - 1.0) <= 1e-4, what,
          ": student distribution not normalized (row sum ", s, ")");
  }
}

}  // namespace detail

// One student CLS distribution entering the multi-crop loss.
// origin: 0 or 1 for views derived from that global crop, -1 for locals.
template <typename S>
struct StudentClsView {
  typename Tape<S>::Index logp;  // (n_tokens) log-probabilities on the tape
  int origin = -1;
  bool masked_variant = false;
};

template <typename S>
struct ClsLossResult {
  typename Tape<S>::Index loss;
  int base_terms = 0;
  int masked_terms = 0;
};

// Multi-crop invariance loss.
//
// Unmasked views follow the formula as written: every (teacher global u,
// student view v != u) pair contributes with coefficient 1 / (2 |V|) where
// |V| = 2 + N_L. Each masked variant of a global crop additionally pairs
// with BOTH teachers (cross-view and same-view denoising); those terms are
// averaged among themselves so the extension's magnitude is independent of
// the mask count.
template <typename S>
ClsLossResult<S> cls_loss(Tape<S>& t,
                          const std::array<Tensor, 2>& teacher_probs,
                          const std::vector<StudentClsView<S>>& views,
                          int n_views_nominal) {
  check(n_views_nominal >= 2, "cls_loss: need at least the two global views");
  for (const auto& tp : teacher_probs)
    detail::check_prob_rows(tp, "cls_loss teacher");
  for (const auto& v : views)
    detail::check_logprob_rows(t.val(v.logp), "cls_loss");

  typename Tape<S>::Index base = -1, masked = -1;
  int n_base = 0, n_masked = 0;
  for (int u = 0; u < 2; ++u) {
    auto target = teacher_probs[size_t(u)].template cast<S>();
    target.shape = {1, int(target.numel())};
    for (const auto& v : views) {
      const bool pair_up = v.masked_variant || v.origin != u;
      if (!pair_up) continue;
      auto ce = t.scale(t.weighted_sum(v.logp, target), S(-1));
      if (v.masked_variant) {
        masked = n_masked == 0 ? ce : t.add(masked, ce);
        ++n_masked;
      } else {
        base = n_base == 0 ? ce : t.add(base, ce);
        ++n_base;
      }
    }
  }
  check(n_base > 0 || n_masked > 0, "cls_loss: no student views");

  typename Tape<S>::Index loss = -1;
  if (n_base > 0) loss = t.scale(base, S(1) / S(2 * n_views_nominal));
  if (n_masked > 0) {
    auto m = t.scale(masked, S(1) / S(n_masked));
    loss = n_base > 0 ? t.add(loss, m) : m;
  }
  return {loss, n_base, n_masked};
}

// Per-mask student predictions aligned with teacher targets at the same
// masked indices of the full view.
template <typename S>
struct MpmMaskTerm {
  typename Tape<S>::Index student_logp;  // (E x n_tokens) on the tape
  Tensor teacher_probs;                  // (E x n_tokens) constant
};

// Latent masked point modeling loss: mean over masks and masked positions
// of the cross-entropy against the teacher posterior.
template <typename S>
typename Tape<S>::Index mpm_loss(Tape<S>& t,
                                 const std::vector<MpmMaskTerm<S>>& terms) {
  check(!terms.empty(), "mpm_loss: no mask terms");
  typename Tape<S>::Index total = -1;
  int64_t positions = 0;
  for (const auto& term : terms) {
    check(t.val(term.student_logp).rows() == term.teacher_probs.rows() &&
              t.val(term.student_logp).cols() == term.teacher_probs.cols(),
          "mpm_loss: mask/distribution index misalignment");
    detail::check_prob_rows(term.teacher_probs, "mpm_loss teacher");
    detail::check_logprob_rows(t.val(term.student_logp), "mpm_loss");
    auto ce = t.weighted_sum(term.student_logp, term.teacher_probs.template cast<S>());
    total = positions == 0 ? ce : t.add(total, ce);
    positions += term.teacher_probs.rows();
  }
  return t.scale(total, S(-1) / S(positions));
}

// KoLeo diversity regularizer: L2-normalize rows, take each row's distance
// to its nearest other row, return -mean(log rho). Duplicate rows are
// clamped at 1e-8 with a warning.
template <typename S>
typename Tape<S>::Index koleo_loss(Tape<S>& t, typename Tape<S>::Index cls) {
  const int b = t.val(cls).rows();
  check(b >= 2, "koleo_loss: needs a batch of at least 2");
  auto y = t.row_l2_normalize(cls);
  const auto& yv = t.val(y);
  const int d = yv.cols();
  std::vector<int> nn(static_cast<size_t>(b));
  bool dup = false;
  for (int i = 0; i < b; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = -1;
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = double(yv.at(i, c)) - yv.at(j, c);
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        arg = j;
      }
    }
    nn[size_t(i)] = arg;
    if (best < 1e-16) dup = true;
  }
  if (dup)
    warn("koleo_loss: duplicate rows in batch, clamping distance at 1e-8");
  auto diff = t.sub(y, t.gather_rows(y, nn));
  auto rho = t.row_norms(diff, S(1e-8));
  return t.scale(t.mean_all(t.log_elem(rho)), S(-1));
}

// Smooth-L1 regression between student and teacher patch representations
// (the optional MPM-only objective; beta = 2).
template <typename S>
typename Tape<S>::Index regression_loss(Tape<S>& t,
                                        typename Tape<S>::Index student_repr,
                                        const Tensor& teacher_repr,
                                        S beta = S(2)) {
  check(t.val(student_repr).rows() == teacher_repr.rows() &&
            t.val(student_repr).cols() == teacher_repr.cols(),
        "regression_loss: shape mismatch");
  return t.smooth_l1_mean(student_repr, teacher_repr.template cast<S>(), beta);
}

// ---- schedules ----

struct ScheduleConfig {
  double base_lr = 5e-4;
  double lr_warmup_frac = 0.0;       // warmup epochs / total epochs
  double ema_start = 0.995;
  double ema_end = 1.0;
  double tau_student = 0.1;
  double tau_cls_start = 0.04;
  double tau_cls_end = 0.07;
  double tau_patch_start = 0.05;
  double tau_patch_end = 0.07;
  double teacher_warmup_frac = 0.0;  // teacher temp warmup epochs / total
  bool sharpening = true;            // off: teacher temps pinned to tau_student
};

struct ScheduleValues {
  double lr = 0.0;
  double ema = 0.995;
  double tau_cls = 0.04;
  double tau_patch = 0.05;
};

// lr: linear warmup then cosine annealing to ~0. ema: cosine from start to
// end. teacher temps: linear warmup then constant.
inline ScheduleValues eval_schedules(int64_t step, int64_t total_steps,
                                     const ScheduleConfig& cfg) {
  check(step >= 0 && step <= total_steps && total_steps > 0,
        "eval_schedules: step out of range");
  const double p = double(step) / double(total_steps);
  ScheduleValues out;

  const double w = cfg.lr_warmup_frac;
  if (w > 0.0 && p < w) {
    out.lr = cfg.base_lr * (p / w);
  } else {
    const double q = w < 1.0 ? (p - w) / (1.0 - w) : 1.0;
    out.lr = 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * q));
  }

  out.ema = cfg.ema_end - (cfg.ema_end - cfg.ema_start) *
                              (1.0 + std::cos(std::numbers::pi * p)) / 2.0;

  auto temp = [&](double start, double end) {
    if (!cfg.sharpening) return cfg.tau_student;
    const double tw = cfg.teacher_warmup_frac;
    if (tw > 0.0 && p < tw) return start + (end - start) * (p / tw);
    return end;
  };
  out.tau_cls = temp(cfg.tau_cls_start, cfg.tau_cls_end);
  out.tau_patch = temp(cfg.tau_patch_start, cfg.tau_patch_end);

  if (cfg.sharpening) {
    check(out.tau_cls < cfg.tau_student && out.tau_patch < cfg.tau_student,
          "schedules: teacher temperature must stay below student temperature");
  }
  return out;
}

}  // namespace asymdsd::distill
