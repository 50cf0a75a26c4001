#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "asymdsd/gradcheck.hpp"
#include "asymdsd/trainer.hpp"

using namespace asymdsd;
using namespace asymdsd::train;

namespace {

// Tiny end-to-end configuration: micro gradcheck model over small clouds.
pipeline::PipelineConfig tiny_pipeline() {
  pipeline::PipelineConfig p;
  p.model = gradcheck::micro_model();
  p.model.n_tokens = 64;
  p.crops.n_local = 1;
  p.crops.global_points = 64;
  p.crops.global_patches = 8;
  p.crops.local_points = 32;
  p.crops.local_patches = 4;
  p.crops.patch_points = 8;
  p.mask_ratio = 0.5;
  p.block_size = 2;
  p.n_masks = 2;
  return p;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 3;
  t.epochs = 2;
  t.base_lr = 1e-3;
  t.lr_warmup_epochs = 1;
  t.teacher_warmup_epochs = 1;
  t.seed = 5;
  return t;
}

std::vector<geometry::PointCloud> tiny_dataset(int n, int points, uint64_t seed) {
  std::vector<geometry::PointCloud> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    geometry::PointCloud pc;
    pc.positions = Tensor({points, 3});
    for (auto& v : pc.positions.data) v = float(rng.uniform(-1, 1));
    out.push_back(std::move(pc));
  }
  return out;
}

std::vector<LossReport> run_tiny(uint64_t seed) {
  auto pcfg = tiny_pipeline();
  auto tcfg = tiny_train();
  tcfg.seed = seed;
  auto data = tiny_dataset(6, 160, 99);
  auto state = make_train_state(pcfg.model, tcfg.seed);
  std::vector<LossReport> reports;
  TrainHooks hooks;
  hooks.on_step = [&](const LossReport& r) { reports.push_back(r); };
  train_loop(state, data, pcfg, tcfg, hooks);
  return reports;
}

}  // namespace

TEST_CASE("adamw_update: closed-form single steps") {
  nn::ParamStore params;
  params.tensors["w"] = Tensor::from({2, 2}, {1.f, -2.f, 3.f, 0.5f});
  params.tensors["norm.g"] = Tensor::from({2}, {1.f, 1.f});
  AdamState adam;

  SUBCASE("zero gradient, zero decay: parameters unchanged") {
    std::map<std::string, Tensor> grads{{"w", Tensor({2, 2})}};
    auto before = params.at("w").data;
    adamw_update(params, grads, adam, 1e-3, 0.0, 0.9, 0.999, 1e-8);
    CHECK(params.at("w").data == before);
  }
  SUBCASE("zero gradient with decay scales by (1 - lr wd)") {
    std::map<std::string, Tensor> grads{{"w", Tensor({2, 2})},
                                        {"norm.g", Tensor({2})}};
    adamw_update(params, grads, adam, 1e-3, 0.05, 0.9, 0.999, 1e-8);
    CHECK(params.at("w").at(0, 0) == doctest::Approx(1.f * (1 - 5e-5)));
    CHECK(params.at("w").at(0, 1) == doctest::Approx(-2.f * (1 - 5e-5)));
    // 1-D tensors are decay-exempt
    CHECK(params.at("norm.g").data[0] == 1.f);
  }
  SUBCASE("first step from zero moments moves by -lr g/(|g| + eps)") {
    std::map<std::string, Tensor> grads{
        {"w", Tensor::from({2, 2}, {0.2f, -0.4f, 0.01f, 0.f})}};
    auto before = params.at("w").data;
    adamw_update(params, grads, adam, 1e-3, 0.0, 0.9, 0.999, 1e-8);
    for (int i = 0; i < 4; ++i) {
      const double g = grads.at("w").data[size_t(i)];
      const double expect =
          g == 0.0 ? 0.0 : 1e-3 * g / (std::abs(g) + 1e-8);
      CHECK(params.at("w").data[size_t(i)] ==
            doctest::Approx(before[size_t(i)] - expect).epsilon(1e-5));
    }
  }
}

TEST_CASE("clip_gradients: global norm bound") {
  std::map<std::string, Tensor> grads{{"a", Tensor::from({2}, {30.f, 40.f})}};
  const double norm = clip_gradients(grads, 10.0);
  CHECK(norm == doctest::Approx(50.0));
  CHECK(grad_global_norm(grads) <= 10.0 + 1e-6);
  CHECK(grads.at("a").data[0] == doctest::Approx(6.f));
  CHECK(grads.at("a").data[1] == doctest::Approx(8.f));

  std::map<std::string, Tensor> small{{"a", Tensor::from({2}, {3.f, 4.f})}};
  CHECK(clip_gradients(small, 10.0) == doctest::Approx(5.0));
  CHECK(small.at("a").data[0] == 3.f);  // untouched below the bound
}

TEST_CASE("train_step: determinism, bookkeeping, teacher dynamics") {
  SUBCASE("identical seeds give identical loss trajectories") {
    auto a = run_tiny(21);
    auto b = run_tiny(21);
    REQUIRE(a.size() == b.size());
    REQUIRE(a.size() == 4);  // 6 samples, batch 3, 2 epochs
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].total == b[i].total);
      CHECK(a[i].cls == b[i].cls);
      CHECK(a[i].mpm == b[i].mpm);
      CHECK(a[i].koleo == b[i].koleo);
      CHECK(a[i].grad_norm == b[i].grad_norm);
      CHECK(a[i].h_marg_cls == b[i].h_marg_cls);
    }
    auto c = run_tiny(22);
    CHECK(a[0].total != c[0].total);
  }
  SUBCASE("loss additivity and KL identity hold per step") {
    for (const auto& r : run_tiny(23)) {
      CHECK(std::abs(r.total - (r.cls + r.mpm + r.regression +
                                0.01 * r.koleo)) < 1e-5);
      CHECK(r.kl_cls >= -1e-6);
      CHECK(r.kl_patch >= -1e-6);
      CHECK(r.grad_norm_clipped <= 10.0 + 1e-6);
      CHECK(r.h_marg_cls >= r.h_post_cls - 1e-9);  // Jensen
      CHECK(r.h_marg_patch >= r.h_post_patch - 1e-9);
      CHECK(r.teacher_forwards == 2 * 3);  // two globals per sample
    }
  }
  SUBCASE("lr = 0 freezes the student while the teacher drifts by 1 - eta") {
    auto pcfg = tiny_pipeline();
    auto tcfg = tiny_train();
    tcfg.base_lr = 0.0;
    auto data = tiny_dataset(3, 160, 99);
    auto state = make_train_state(pcfg.model, 1);
    // push the teacher away from the student to observe the drift
    for (auto& [name, t] : state.teacher.ema.tensors)
      for (auto& v : t.data) v += 0.5f;
    auto params_before = state.params;
    const float teacher_before = state.teacher.ema.at("enc.cls").data[0];
    const float student_val = state.params.at("enc.cls").data[0];
    std::vector<const geometry::PointCloud*> batch{&data[0], &data[1], &data[2]};
    auto rep = train_step(state, batch, pcfg, tcfg, 100);
    for (const auto& [name, t] : state.params.tensors)
      CHECK(t.data == params_before.at(name).data);
    const float expect =
        float(rep.ema) * teacher_before + (1.f - float(rep.ema)) * student_val;
    CHECK(state.teacher.ema.at("enc.cls").data[0] ==
          doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("checkpoint: bit-exact round trip") {
  auto pcfg = tiny_pipeline();
  auto tcfg = tiny_train();
  auto data = tiny_dataset(3, 160, 99);
  auto state = make_train_state(pcfg.model, 3);
  std::vector<const geometry::PointCloud*> batch{&data[0], &data[1], &data[2]};
  train_step(state, batch, pcfg, tcfg, 10);
  train_step(state, batch, pcfg, tcfg, 10);

  const auto dir = std::filesystem::temp_directory_path() / "asymdsd_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "state.adsd").string();
  save_checkpoint(state, 0xABCDEF, path);
  uint64_t digest = 0;
  auto loaded = load_checkpoint(path, &digest);
  CHECK(digest == 0xABCDEF);
  CHECK(loaded.step == state.step);
  CHECK(loaded.adam.t == state.adam.t);
  for (const auto& [name, t] : state.params.tensors)
    CHECK(loaded.params.at(name).data == t.data);
  for (const auto& [name, t] : state.teacher.ema.tensors)
    CHECK(loaded.teacher.ema.at(name).data == t.data);
  CHECK(loaded.teacher.center_cls.data == state.teacher.center_cls.data);
  for (const auto& [name, t] : state.adam.m)
    CHECK(loaded.adam.m.at(name).data == t.data);

  SUBCASE("forward after load is bit-exact") {
    Rng rng(31);
    Tensor pts({8 * 4, 3}), ctr({8, 3});
    for (auto& v : pts.data) v = float(rng.uniform(-0.2, 0.2));
    for (auto& v : ctr.data) v = float(rng.uniform(-1, 1));
    auto run = [&](const nn::ParamStore& p) {
      Tape<float> t;
      nn::ParamBinding<float> bind(t, p, false);
      return t.val(nn::encode_view(t, bind, pcfg.model, pts, ctr, 4)).data;
    };
    CHECK(run(state.params) == run(loaded.params));
    CHECK(run(state.teacher.ema) == run(loaded.teacher.ema));
  }
  SUBCASE("truncated checkpoint refuses to load") {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes{std::istreambuf_iterator<char>(in),
                            std::istreambuf_iterator<char>()};
    const auto cut = (dir / "cut.adsd").string();
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size() - 17));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(cut), Error);
  }
}

TEST_CASE("multi-mask amortization: teacher targets are reused exactly") {
  auto pcfg = tiny_pipeline();
  pcfg.n_masks = 4;
  auto data = tiny_dataset(1, 160, 42);
  auto state = make_train_state(pcfg.model, 9);

  Rng prep_rng = Rng::stream(1, {1});
  auto prepared = pipeline::prepare_sample(data[0], pcfg, prep_rng);

  auto multi = pipeline::build_sample_graph(state.params, state.teacher, pcfg,
                                            prepared, 0.04f, 0.05f);
  CHECK(multi->teacher_forwards == 2);

  // four single-mask passes over the same views and masks
  double ce_sum = 0;
  int64_t terms = 0;
  int teacher_forwards = 0;
  for (int m = 0; m < 4; ++m) {
    pipeline::PreparedSample single = prepared;
    for (auto& set : single.masks)
      set.masks = {set.masks[size_t(m)]};
    pipeline::PipelineConfig scfg = pcfg;
    scfg.n_masks = 1;
    auto sg = pipeline::build_sample_graph(state.params, state.teacher, scfg,
                                           single, 0.04f, 0.05f);
    teacher_forwards += sg->teacher_forwards;
    ce_sum += sg->mpm_ce_sum;
    terms += sg->mpm_terms;
  }
  CHECK(teacher_forwards == 8);  // 4 vs 1 teacher pass per view
  const double single_mean = ce_sum / double(terms);
  const double multi_mean = multi->mpm_ce_sum / double(multi->mpm_terms);
  CHECK(std::abs(single_mean - multi_mean) < 1e-6);
}
