#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "asymdsd/distillation.hpp"
#include "asymdsd/pipeline.hpp"
#include "asymdsd/tensor_table.hpp"

namespace asymdsd::train {

struct TrainConfig {
  int batch_size = 128;
  int epochs = 300;
  double base_lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 10.0;
  double adam_eps = 1e-8;
  double lr_warmup_epochs = 10;
  double teacher_warmup_epochs = 10;
  double ema_start = 0.995;
  double ema_end = 1.0;
  double tau_cls_start = 0.04;
  double tau_cls_end = 0.07;
  double tau_patch_start = 0.05;
  double tau_patch_end = 0.07;
  bool sharpening = true;
  uint64_t seed = 0;

  void validate() const {
    check(batch_size >= 1, "train config: batch_size must be positive");
    check(epochs >= 1, "train config: epochs must be positive");
    check(base_lr >= 0 && weight_decay >= 0 && grad_clip > 0,
          "train config: negative hyperparameter");
    check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1,
          "train config: betas must be in [0, 1)");
  }
};

struct LossReport {
  int64_t step = 0;
  int epoch = 0;
  double total = 0, cls = 0, mpm = 0, koleo = 0, regression = 0;
  double h_marg_cls = 0, h_post_cls = 0, kl_cls = 0;
  double h_marg_patch = 0, h_post_patch = 0, kl_patch = 0;
  double lr = 0, ema = 0, tau_cls = 0, tau_patch = 0;
  double grad_norm = 0, grad_norm_clipped = 0;
  int teacher_forwards = 0;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  int64_t t = 0;
};

struct TrainState {
  nn::ParamStore params;
  distill::TeacherState teacher;
  AdamState adam;
  Rng rng;
  int64_t step = 0;
  int epoch = 0;
};

inline TrainState make_train_state(const nn::ModelConfig& model, uint64_t seed) {
  TrainState st;
  st.rng = Rng::stream(seed, {0x1217});
  st.params = nn::make_param_store<float>(model);
  nn::init_params(st.params, st.rng);
  st.teacher = distill::make_teacher(st.params, model.n_tokens);
  return st;
}

// Decoupled weight decay plus bias-corrected Adam. 1-D tensors (norm gains,
// biases, CLS/mask tokens) are exempt from decay.
inline void adamw_update(nn::ParamStore& params,
                         const std::map<std::string, Tensor>& grads,
                         AdamState& adam, double lr, double weight_decay,
                         double beta1, double beta2, double eps) {
  ++adam.t;
  const double bc1 = 1.0 - std::pow(beta1, double(adam.t));
  const double bc2 = 1.0 - std::pow(beta2, double(adam.t));
  for (auto& [name, p] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    check(g.same_shape(p), "adamw: gradient shape mismatch for '", name, "'");
    Tensor& m = adam.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    Tensor& v = adam.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    const bool decay = !nn::decay_exempt(name, p.shape) && weight_decay > 0;
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = float(beta1 * m.data[i] + (1.0 - beta1) * gi);
      v.data[i] = float(beta2 * v.data[i] + (1.0 - beta2) * gi * gi);
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + eps);
      if (decay) upd += lr * weight_decay * p.data[i];
      p.data[i] = float(p.data[i] - upd);
    }
  }
}

inline double grad_global_norm(const std::map<std::string, Tensor>& grads) {
  double ss = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.data) ss += double(v) * v;
  return std::sqrt(ss);
}

// Scales all gradients so the global norm does not exceed max_norm.
inline double clip_gradients(std::map<std::string, Tensor>& grads,
                             double max_norm) {
  const double norm = grad_global_norm(grads);
  if (norm > max_norm) {
    const float s = float(max_norm / norm);
    for (auto& [name, g] : grads)
      for (float& v : g.data) v *= s;
  }
  return norm;
}

namespace detail {

inline void accumulate(std::map<std::string, Tensor>& into,
                       const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = into.find(name);
    if (it == into.end()) {
      into[name] = g;
    } else {
      check(it->second.same_shape(g), "grad accumulate: shape mismatch '",
            name, "'");
      for (size_t i = 0; i < g.data.size(); ++i)
        it->second.data[i] += g.data[i];
    }
  }
}

inline double rows_mean_entropy(const Tensor& probs) {
  double h = 0.0;
  for (int r = 0; r < probs.rows(); ++r)
    h += pipeline::detail::entropy(probs.row(r), probs.cols());
  return probs.rows() > 0 ? h / probs.rows() : 0.0;
}

inline double marginal_entropy_of(const std::vector<const Tensor*>& batches) {
  if (batches.empty()) return 0.0;
  const int n = batches[0]->cols();
  std::vector<double> mean(size_t(n), 0.0);
  int64_t rows = 0;
  for (const Tensor* t : batches) {
    for (int r = 0; r < t->rows(); ++r) {
      const float* p = t->row(r);
      for (int j = 0; j < n; ++j) mean[size_t(j)] += p[j];
    }
    rows += t->rows();
  }
  double h = 0.0;
  for (double v : mean) {
    v /= double(rows);
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace detail

inline distill::ScheduleConfig schedule_config(
    const TrainConfig& tcfg, const pipeline::PipelineConfig& pcfg) {
  distill::ScheduleConfig scfg;
  scfg.base_lr = tcfg.base_lr;
  scfg.lr_warmup_frac = tcfg.lr_warmup_epochs / double(tcfg.epochs);
  scfg.teacher_warmup_frac = tcfg.teacher_warmup_epochs / double(tcfg.epochs);
  scfg.ema_start = tcfg.ema_start;
  scfg.ema_end = tcfg.ema_end;
  scfg.tau_student = pcfg.tau_student;
  scfg.tau_cls_start = tcfg.tau_cls_start;
  scfg.tau_cls_end = tcfg.tau_cls_end;
  scfg.tau_patch_start = tcfg.tau_patch_start;
  scfg.tau_patch_end = tcfg.tau_patch_end;
  scfg.sharpening = tcfg.sharpening;
  return scfg;
}

// One optimization step over a batch of clouds: per-sample view/mask
// preparation and loss graphs (parallel), batch-level KoLeo, backward with
// seeded KoLeo gradients, gradient clipping, AdamW, then EMA and centering
// updates.
inline LossReport train_step(TrainState& state,
                             const std::vector<const geometry::PointCloud*>& batch,
                             const pipeline::PipelineConfig& pcfg,
                             const TrainConfig& tcfg, int64_t total_steps) {
  const int b = int(batch.size());
  check(b >= 1, "train_step: empty batch");

  const auto sched =
      distill::eval_schedules(state.step, total_steps, schedule_config(tcfg, pcfg));

  // phase 1: forward graphs, parallel over samples
  std::vector<std::unique_ptr<pipeline::SampleGraph>> graphs(static_cast<size_t>(b));
  std::vector<pipeline::PreparedSample> prepared(static_cast<size_t>(b));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < b; ++i) {
    Rng rng = Rng::stream(tcfg.seed, {0xB0B, uint64_t(state.step), uint64_t(i)});
    prepared[size_t(i)] = pipeline::prepare_sample(*batch[size_t(i)], pcfg, rng);
    graphs[size_t(i)] = pipeline::build_sample_graph(
        state.params, state.teacher, pcfg, prepared[size_t(i)],
        float(sched.tau_cls), float(sched.tau_patch));
  }

  // non-finite loss aborts with a diagnostic dump of the offending batch
  for (int i = 0; i < b; ++i) {
    const auto& sg = *graphs[size_t(i)];
    if (!std::isfinite(sg.cls_value) || !std::isfinite(sg.mpm_value) ||
        !std::isfinite(sg.reg_value)) {
      std::ostringstream dump;
      for (int q = 0; q < b; ++q)
        dump << " sample[" << q << "] cls=" << graphs[size_t(q)]->cls_value
             << " mpm=" << graphs[size_t(q)]->mpm_value
             << " reg=" << graphs[size_t(q)]->reg_value;
      fail("train_step: non-finite loss at step ", state.step, ", sample ", i,
           ";", dump.str());
    }
  }

  // phase 2: batch-level KoLeo over the student CLS embeddings, one group
  // per (global crop, mask variant)
  const int n_groups = int(graphs[0]->koleo_cls.size());
  double koleo_value = 0.0;
  std::vector<std::vector<Tensor>> koleo_grads(
      static_cast<size_t>(b),
      std::vector<Tensor>(static_cast<size_t>(n_groups)));
  const bool use_koleo = pcfg.koleo_scale > 0.0 && b >= 2 && n_groups > 0;
  if (use_koleo) {
    const int d = pcfg.model.embed_dim;
    for (int gidx = 0; gidx < n_groups; ++gidx) {
      Tensor stack({b, d});
      for (int i = 0; i < b; ++i) {
        const auto& row =
            graphs[size_t(i)]->tape.val(graphs[size_t(i)]->koleo_cls[size_t(gidx)]);
        std::copy(row.data.begin(), row.data.end(), stack.row(i));
      }
      Tape<float> kt;
      auto in = kt.input(stack, true);
      auto loss = distill::koleo_loss(kt, in);
      koleo_value += kt.val(loss).data[0];
      kt.backward(loss);
      const auto& g = kt.grad(in);
      for (int i = 0; i < b; ++i) {
        Tensor gi({1, d});
        std::copy(g.row(i), g.row(i) + d, gi.row(0));
        koleo_grads[size_t(i)][size_t(gidx)] = std::move(gi);
      }
    }
    koleo_value /= n_groups;
  }

  // phase 3: backward, parallel over samples
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < b; ++i) {
    auto& sg = *graphs[size_t(i)];
    std::vector<std::pair<int, TensorT<float>>> seeds;
    Tensor seed({1});
    seed.data[0] = 1.f / float(b);
    seeds.emplace_back(sg.loss, seed);
    if (use_koleo) {
      const float w = float(pcfg.koleo_scale / n_groups);
      for (int gidx = 0; gidx < n_groups; ++gidx) {
        Tensor kg = koleo_grads[size_t(i)][size_t(gidx)];
        for (float& v : kg.data) v *= w;
        seeds.emplace_back(sg.koleo_cls[size_t(gidx)], std::move(kg));
      }
    }
    sg.tape.backward_seeded(seeds);
  }

  // reduce gradients in sample order
  std::map<std::string, Tensor> grads;
  for (int i = 0; i < b; ++i)
    detail::accumulate(grads, graphs[size_t(i)]->student->collect_grads());

  const double norm = clip_gradients(grads, tcfg.grad_clip);
  adamw_update(state.params, grads, state.adam, sched.lr, tcfg.weight_decay,
               tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
  distill::ema_update(state.teacher, state.params, float(sched.ema));

  // centering update after this step's targets were computed
  if (pcfg.centering) {
    Tensor cls_logits({2 * b, pcfg.model.n_tokens});
    Tensor patch_logits({graphs[0]->teacher_patch_logits.rows() * b,
                         pcfg.model.n_tokens});
    for (int i = 0; i < b; ++i) {
      const auto& sg = *graphs[size_t(i)];
      std::copy(sg.teacher_cls_logits.data.begin(),
                sg.teacher_cls_logits.data.end(), cls_logits.row(2 * i));
      std::copy(sg.teacher_patch_logits.data.begin(),
                sg.teacher_patch_logits.data.end(),
                patch_logits.row(sg.teacher_patch_logits.rows() * i));
    }
    distill::update_center(state.teacher.center_cls, cls_logits,
                           pcfg.center_momentum);
    distill::update_center(state.teacher.center_patch, patch_logits,
                           pcfg.center_momentum);
  }

  // report
  LossReport rep;
  rep.step = state.step;
  rep.epoch = state.epoch;
  rep.lr = sched.lr;
  rep.ema = sched.ema;
  rep.tau_cls = sched.tau_cls;
  rep.tau_patch = sched.tau_patch;
  rep.grad_norm = norm;
  rep.grad_norm_clipped = std::min(norm, tcfg.grad_clip);
  double cls_ce = 0, cls_ht = 0, mpm_ce = 0, mpm_ht = 0;
  int64_t cls_terms = 0, mpm_terms = 0;
  double graph_loss = 0;
  std::vector<const Tensor*> cls_probs, patch_probs;
  for (int i = 0; i < b; ++i) {
    const auto& sg = *graphs[size_t(i)];
    graph_loss += double(sg.tape.val(sg.loss).data[0]) / b;
    rep.cls += sg.cls_value / b;
    rep.mpm += sg.mpm_value / b;
    rep.regression += sg.reg_value / b;
    rep.teacher_forwards += sg.teacher_forwards;
    cls_ce += sg.cls_ce_sum;
    cls_ht += sg.cls_ht_sum;
    cls_terms += sg.cls_terms;
    mpm_ce += sg.mpm_ce_sum;
    mpm_ht += sg.mpm_ht_sum;
    mpm_terms += sg.mpm_terms;
    cls_probs.push_back(&sg.teacher_cls_probs);
    patch_probs.push_back(&sg.teacher_patch_probs);
  }
  rep.koleo = koleo_value;
  // the total comes from the evaluated graph, not from re-adding the parts;
  // logs can therefore verify the additivity of what was optimized
  rep.total = graph_loss + pcfg.koleo_scale * rep.koleo;
  rep.kl_cls = cls_terms > 0 ? (cls_ce - cls_ht) / double(cls_terms) : 0.0;
  rep.kl_patch = mpm_terms > 0 ? (mpm_ce - mpm_ht) / double(mpm_terms) : 0.0;
  rep.h_marg_cls = detail::marginal_entropy_of(cls_probs);
  rep.h_marg_patch = detail::marginal_entropy_of(patch_probs);
  double hp = 0, hpp = 0;
  for (int i = 0; i < b; ++i) {
    hp += detail::rows_mean_entropy(graphs[size_t(i)]->teacher_cls_probs);
    hpp += detail::rows_mean_entropy(graphs[size_t(i)]->teacher_patch_probs);
  }
  rep.h_post_cls = hp / b;
  rep.h_post_patch = hpp / b;

  ++state.step;
  return rep;
}

// Epoch loop: shuffles per epoch with a step-independent stream, batches in
// order, runs train_step, and fires the hooks. Resumes from state.epoch.
struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(int epoch, TrainState&)> on_epoch_end;
};

inline void train_loop(TrainState& state,
                       const std::vector<geometry::PointCloud>& clouds,
                       const pipeline::PipelineConfig& pcfg,
                       const TrainConfig& tcfg, const TrainHooks& hooks = {}) {
  tcfg.validate();
  check(!clouds.empty(), "train_loop: empty dataset");
  const int n = int(clouds.size());
  const int batches_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
  const int64_t total_steps = int64_t(tcfg.epochs) * batches_per_epoch;

  for (; state.epoch < tcfg.epochs; ++state.epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng shuffle_rng = Rng::stream(tcfg.seed, {0x5FF, uint64_t(state.epoch)});
    shuffle_rng.shuffle(order);
    for (int bstart = 0; bstart < n; bstart += tcfg.batch_size) {
      const int bend = std::min(bstart + tcfg.batch_size, n);
      std::vector<const geometry::PointCloud*> batch;
      for (int i = bstart; i < bend; ++i)
        batch.push_back(&clouds[size_t(order[size_t(i)])]);
      auto rep = train_step(state, batch, pcfg, tcfg, total_steps);
      rep.epoch = state.epoch;
      if (hooks.on_step) hooks.on_step(rep);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(state.epoch, state);
  }
}

// ---- checkpointing ----

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const TrainState& state, uint64_t config_digest,
                            const std::string& path) {
  io::TensorTable t;
  t.put_i64("meta.ckpt_version", {int64_t(kCheckpointVersion)});
  t.put_i64("meta.step", {state.step});
  t.put_i64("meta.epoch", {state.epoch});
  t.put_i64("meta.config_digest", {int64_t(config_digest)});
  t.put_i64("meta.adam_t", {state.adam.t});
  const auto rs = state.rng.state();
  t.put_i64("meta.rng_state", {int64_t(rs[0]), int64_t(rs[1]), int64_t(rs[2]),
                               int64_t(rs[3])});
  for (const auto& [name, p] : state.params.tensors)
    t.put_f32("student." + name, p);
  for (const auto& [name, p] : state.teacher.ema.tensors)
    t.put_f32("teacher." + name, p);
  t.put_f32("teacher.center.cls", state.teacher.center_cls);
  t.put_f32("teacher.center.patch", state.teacher.center_patch);
  for (const auto& [name, m] : state.adam.m) t.put_f32("adam.m." + name, m);
  for (const auto& [name, v] : state.adam.v) t.put_f32("adam.v." + name, v);
  t.write(path);
}

// Loads a checkpoint; `config_digest_out` receives the stored digest so the
// caller can warn on mismatch.
inline TrainState load_checkpoint(const std::string& path,
                                  uint64_t* config_digest_out = nullptr) {
  const auto t = io::TensorTable::read(path);
  const int64_t version = t.at("meta.ckpt_version").as_i64()[0];
  check(version == int64_t(kCheckpointVersion),
        "checkpoint: version mismatch (file ", version, ", expected ",
        kCheckpointVersion, ")");
  TrainState st;
  st.step = t.at("meta.step").as_i64()[0];
  st.epoch = int(t.at("meta.epoch").as_i64()[0]);
  st.adam.t = t.at("meta.adam_t").as_i64()[0];
  if (config_digest_out)
    *config_digest_out = uint64_t(t.at("meta.config_digest").as_i64()[0]);
  const auto rs = t.at("meta.rng_state").as_i64();
  check(rs.size() == 4, "checkpoint: corrupt rng state");
  st.rng.set_state({uint64_t(rs[0]), uint64_t(rs[1]), uint64_t(rs[2]),
                    uint64_t(rs[3])});
  for (const auto& [name, e] : t.entries()) {
    if (name.rfind("student.", 0) == 0)
      st.params.tensors[name.substr(8)] = e.as_f32();
    else if (name == "teacher.center.cls")
      st.teacher.center_cls = e.as_f32();
    else if (name == "teacher.center.patch")
      st.teacher.center_patch = e.as_f32();
    else if (name.rfind("teacher.", 0) == 0)
      st.teacher.ema.tensors[name.substr(8)] = e.as_f32();
    else if (name.rfind("adam.m.", 0) == 0)
      st.adam.m[name.substr(7)] = e.as_f32();
    else if (name.rfind("adam.v.", 0) == 0)
      st.adam.v[name.substr(7)] = e.as_f32();
  }
  check(!st.params.tensors.empty(), "checkpoint: no student parameters");
  return st;
}

}  // namespace asymdsd::train
