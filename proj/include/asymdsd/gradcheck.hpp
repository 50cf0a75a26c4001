#pragma once

#include <string>
#include <vector>

#include "asymdsd/distillation.hpp"
#include "asymdsd/network.hpp"

namespace asymdsd::gradcheck {

// Micro model for gradient verification: D=16, L=2, N_c=8, N_tok=32.
inline nn::ModelConfig micro_model() {
  nn::ModelConfig m;
  m.embed_dim = 16;
  m.layers = 2;
  m.heads = 2;
  m.mlp_dim = 32;
  m.patch_mlp1_hidden = 8;
  m.patch_mlp1_out = 8;
  m.patch_mlp2_hidden = 16;
  m.pos_hidden = 8;
  m.pred_dim = 8;
  m.pred_layers = 2;
  m.pred_heads = 2;
  m.pred_mlp_dim = 16;
  m.pred_pos_hidden = 8;
  m.head_hidden1 = 16;
  m.head_hidden2 = 16;
  m.head_bottleneck = 8;
  m.n_tokens = 32;
  return m;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  int checked = 0;
  bool passed = false;
};

// End-to-end check of the student path (patch embed, encoder, predictor,
// projection head, MPM loss) against central finite differences at 64-bit
// precision on randomly selected parameters.
//
// Relative error uses a 1e-6 floor in the denominator; below that scale the
// finite-difference cancellation noise (~1e-11 for this loss) dominates the
// comparison rather than the gradient.
//
// `corrupt_tensor` is a test hook: it perturbs the reverse-mode gradient of
// one tensor so the check must fail and name it.
inline GradCheckResult run(uint64_t seed = 7, int n_params = 128,
                           double tolerance = 1e-4,
                           const std::string& corrupt_tensor = {}) {
  using T64 = TensorT<double>;
  const auto model = micro_model();
  const int n_c = 8, k = 4;

  Rng rng = Rng::stream(seed, {0x64AD});
  auto params = nn::make_param_store<double>(model);
  nn::init_params(params, rng);
  // larger-than-init weights exercise the nonlinearities away from zero
  for (auto& [name, t] : params.tensors)
    if (name.find(".g") == std::string::npos)
      for (auto& v : t.data) v *= 5.0;

  // one view: 8 patches of 4 points, half masked
  Tensor patch_points({n_c * k, 3});
  for (auto& v : patch_points.data) v = float(rng.uniform(-0.2, 0.2));
  Tensor centers({n_c, 3});
  for (auto& v : centers.data) v = float(rng.uniform(-1, 1));
  std::vector<int> visible{0, 2, 4, 6}, masked{1, 3, 5, 7};
  Tensor vis_pts({int(visible.size()) * k, 3});
  for (size_t i = 0; i < visible.size(); ++i)
    std::copy(patch_points.row(visible[i] * k),
              patch_points.row(visible[i] * k) + size_t(k) * 3,
              vis_pts.row(int(i) * k));
  Tensor vis_ctr({int(visible.size()), 3});
  Tensor qry_ctr({int(masked.size()), 3});
  for (size_t i = 0; i < visible.size(); ++i)
    std::copy(centers.row(visible[i]), centers.row(visible[i]) + 3,
              vis_ctr.row(int(i)));
  for (size_t i = 0; i < masked.size(); ++i)
    std::copy(centers.row(masked[i]), centers.row(masked[i]) + 3,
              qry_ctr.row(int(i)));

  // fixed teacher targets
  Tensor targets({int(masked.size()), model.n_tokens});
  for (auto& v : targets.data) v = float(rng.uniform(-1, 1));
  targets = distill::sharpened_softmax(targets, 0.5f);

  const double tau_s = 0.1;
  auto build_loss = [&](Tape<double>& tape, nn::ParamBinding<double>& bind) {
    auto tokens = nn::encode_view(tape, bind, model, vis_pts, vis_ctr, k);
    auto context = tape.slice_rows(tokens, 1, int(visible.size()));
    auto pred = nn::predictor_forward(tape, bind, model, context, qry_ctr,
                                      nn::PredictorMode::kCrossOnly);
    auto logits = nn::projection_head(tape, bind, model, pred, "patch");
    auto logp = tape.log_softmax_rows(tape.scale(logits, 1.0 / tau_s));
    std::vector<distill::MpmMaskTerm<double>> terms{{logp, targets}};
    return distill::mpm_loss(tape, terms);
  };

  std::map<std::string, T64> grads;
  {
    Tape<double> tape;
    nn::ParamBinding<double> binding(tape, params, true);
    tape.backward(build_loss(tape, binding));
    grads = binding.collect_grads();
  }
  if (!corrupt_tensor.empty()) {
    auto it = grads.find(corrupt_tensor);
    check(it != grads.end(), "gradcheck: unknown tensor '", corrupt_tensor, "'");
    for (auto& v : it->second.data) v += 0.05;
  }

  // sample (tensor, element) pairs: one guaranteed element per tensor so
  // every tensor is visited, the rest uniform over the registry
  std::vector<std::pair<std::string, size_t>> picks;
  for (const auto& [name, t] : params.tensors)
    picks.emplace_back(name, size_t(rng.uniform_int(t.data.size())));
  std::vector<std::string> names;
  for (const auto& [name, t] : params.tensors) names.push_back(name);
  while (int(picks.size()) < n_params) {
    const auto& name = names[rng.uniform_int(names.size())];
    picks.emplace_back(name, size_t(rng.uniform_int(params.at(name).data.size())));
  }

  GradCheckResult res;
  const double h = 1e-4;
  for (const auto& [name, idx] : picks) {
    auto& tensor = params.at(name);

    const double saved = tensor.data[idx];
    auto eval = [&](double delta) {
      tensor.data[idx] = saved + delta;
      Tape<double> t2;
      nn::ParamBinding<double> b2(t2, params, false);
      const double v = t2.val(build_loss(t2, b2)).data[0];
      tensor.data[idx] = saved;
      return v;
    };
    // fourth-order central rule; the temperature-scaled softmax gives the
    // loss enough curvature that the plain two-point rule is too coarse
    const double fd = (8.0 * (eval(h) - eval(-h)) - (eval(2 * h) - eval(-2 * h))) /
                      (12.0 * h);
    const double ad = grads.count(name) ? grads.at(name).data[idx] : 0.0;
    const double rel =
        std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6});
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_tensor = name;
    }
    ++res.checked;
  }
  res.passed = res.max_rel_error < tolerance;
  return res;
}

}  // namespace asymdsd::gradcheck
