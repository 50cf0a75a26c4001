#include <doctest.h>

#include <cmath>

#include "asymdsd/distillation.hpp"

using namespace asymdsd;
using namespace asymdsd::distill;

namespace {

Tensor uniform_dist(int n) {
  Tensor t({n});
  t.fill(1.f / float(n));
  return t;
}

// log-probability row on a tape from an arbitrary positive distribution
int logp_of(Tape<float>& t, const Tensor& probs, bool grad = false) {
  Tensor logits({1, int(probs.numel())});
  for (int j = 0; j < int(probs.numel()); ++j)
    logits.at(0, j) = std::log(std::max(probs.data[size_t(j)], 1e-30f));
  return t.log_softmax_rows(t.input(logits, grad));
}

}  // namespace

TEST_CASE("sharpened_softmax: closed forms and monotone sharpening") {
  SUBCASE("uniform logits give the uniform distribution at any temperature") {
    Tensor logits({4});
    logits.fill(1.25f);
    for (float tau : {0.04f, 0.1f, 1.0f}) {
      auto p = sharpened_softmax(logits, tau);
      for (float v : p.data) CHECK(v == doctest::Approx(0.25f));
    }
  }
  SUBCASE("logits [1, 0] at tau 0.5") {
    auto p = sharpened_softmax(Tensor::from({2}, {1.f, 0.f}), 0.5f);
    CHECK(p.data[0] == doctest::Approx(0.8808).epsilon(1e-3));
    CHECK(p.data[1] == doctest::Approx(0.1192).epsilon(1e-3));
  }
  SUBCASE("decreasing tau strictly increases the max probability") {
    Rng rng(61);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor logits({8});
      for (auto& v : logits.data) v = float(rng.normal());
      float prev = 0.f;
      bool first = true;
      for (float tau : {1.0f, 0.5f, 0.2f, 0.1f, 0.05f}) {
        auto p = sharpened_softmax(logits, tau);
        float mx = *std::max_element(p.data.begin(), p.data.end());
        if (!first) CHECK(mx > prev);
        prev = mx;
        first = false;
      }
    }
  }
  SUBCASE("rows sum to one within 1e-6; non-positive temperature rejected") {
    Rng rng(62);
    Tensor logits({5, 16});
    for (auto& v : logits.data) v = float(rng.normal() * 3);
    auto p = sharpened_softmax(logits, 0.07f);
    for (int r = 0; r < 5; ++r) {
      double s = 0;
      for (int j = 0; j < 16; ++j) s += p.at(r, j);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(sharpened_softmax(logits, 0.f), Error);
    CHECK_THROWS_AS(sharpened_softmax(logits, -1.f), Error);
  }
}

TEST_CASE("update_center: EMA recursion and fixed point") {
  SUBCASE("eta 0 jumps to the batch mean; eta 1 freezes") {
    Tensor center({3});
    Tensor batch = Tensor::from({2, 3}, {1, 2, 3, 3, 4, 5});
    update_center(center, batch, 0.f);
    CHECK(center.data[0] == doctest::Approx(2.f));
    CHECK(center.data[1] == doctest::Approx(3.f));
    CHECK(center.data[2] == doctest::Approx(4.f));
    Tensor frozen = center;
    update_center(center, Tensor::from({1, 3}, {9, 9, 9}), 1.f);
    CHECK(center.data == frozen.data);
  }
  SUBCASE("empty batch leaves the center unchanged") {
    Tensor center = Tensor::from({2}, {0.5f, -0.5f});
    Tensor empty;
    update_center(center, empty, 0.9f);
    CHECK(center.data == std::vector<float>({0.5f, -0.5f}));
  }
  SUBCASE("constant teacher logits drive centered logits to zero") {
    Tensor center({4});
    Tensor g = Tensor::from({1, 4}, {2.f, -1.f, 0.5f, 3.f});
    for (int step = 0; step < 500; ++step) update_center(center, g, 0.9f);
    float worst = 0.f;
    for (int j = 0; j < 4; ++j)
      worst = std::max(worst, std::abs(g.at(0, j) - center.data[size_t(j)]));
    CHECK(worst < 1e-3f);
    // centered posterior becomes uniform
    Tensor centered = g;
    for (int j = 0; j < 4; ++j) centered.at(0, j) -= center.data[size_t(j)];
    auto p = sharpened_softmax(centered, 0.07f);
    for (float v : p.data) CHECK(v == doctest::Approx(0.25f).epsilon(1e-2));
  }
}

TEST_CASE("cls_loss: pairing rule, coefficients, closed-form values") {
  const int n = 16;
  SUBCASE("matching uniform pair gives log 2 per term with binary support") {
    // teacher and student both [0.5, 0.5]: CE = log 2
    std::array<Tensor, 2> teacher{Tensor::from({2}, {0.5f, 0.5f}),
                                  Tensor::from({2}, {0.5f, 0.5f})};
    Tape<float> t;
    std::vector<StudentClsView<float>> views;
    views.push_back({logp_of(t, Tensor::from({2}, {0.5f, 0.5f}), true), -1, false});
    auto res = cls_loss(t, teacher, views, 6);
    // 2 teachers x 1 local = 2 terms, coefficient 1/12
    CHECK(res.base_terms == 2);
    CHECK(t.val(res.loss).data[0] ==
          doctest::Approx(2.0 * std::log(2.0) / 12.0).epsilon(1e-5));
  }
  SUBCASE("default |V|=6 unmasked layout emits 10 terms at coefficient 1/12") {
    Rng rng(63);
    auto rand_dist = [&](int len) {
      Tensor logits({len});
      for (auto& v : logits.data) v = float(rng.normal());
      return sharpened_softmax(logits, 1.f);
    };
    std::array<Tensor, 2> teacher{rand_dist(n), rand_dist(n)};
    Tape<float> t;
    std::vector<StudentClsView<float>> views;
    std::vector<Tensor> dists;
    for (int v = 0; v < 6; ++v) dists.push_back(rand_dist(n));
    views.push_back({logp_of(t, dists[0], true), 0, false});
    views.push_back({logp_of(t, dists[1], true), 1, false});
    for (int l = 0; l < 4; ++l)
      views.push_back({logp_of(t, dists[size_t(2 + l)], true), -1, false});
    auto res = cls_loss(t, teacher, views, 6);
    CHECK(res.base_terms == 10);
    CHECK(res.masked_terms == 0);
    // independent oracle: direct evaluation of the double sum
    double expect = 0.0;
    for (int u = 0; u < 2; ++u)
      for (int v = 0; v < 6; ++v) {
        if (v == u) continue;
        for (int j = 0; j < n; ++j)
          expect -= double(teacher[size_t(u)].data[size_t(j)]) *
                    std::log(dists[size_t(v)].data[size_t(j)]);
      }
    expect /= 12.0;
    CHECK(t.val(res.loss).data[0] == doctest::Approx(expect).epsilon(1e-4));
  }
  SUBCASE("masked variants pair with both teachers, renormalized separately") {
    Rng rng(64);
    auto rand_dist = [&](int len) {
      Tensor logits({len});
      for (auto& v : logits.data) v = float(rng.normal());
      return sharpened_softmax(logits, 1.f);
    };
    std::array<Tensor, 2> teacher{rand_dist(n), rand_dist(n)};
    Tape<float> t;
    std::vector<StudentClsView<float>> views;
    // 2 crops x 2 variants, no locals
    for (int g = 0; g < 2; ++g)
      for (int m = 0; m < 2; ++m)
        views.push_back({logp_of(t, rand_dist(n), true), g, true});
    auto res = cls_loss(t, teacher, views, 6);
    CHECK(res.base_terms == 0);
    CHECK(res.masked_terms == 8);  // 4 variants x 2 teachers
  }
  SUBCASE("near-one-hot matching distributions approach zero loss") {
    const float eps = 1e-4f;
    Tensor d = Tensor::from({2}, {1.f - eps, eps});
    std::array<Tensor, 2> teacher{d, d};
    Tape<float> t;
    std::vector<StudentClsView<float>> views;
    views.push_back({logp_of(t, d, true), -1, false});
    auto res = cls_loss(t, teacher, views, 6);
    // loss -> H(P_t) / normalization -> 0 as eps -> 0
    CHECK(t.val(res.loss).data[0] < 2e-4);
  }
  SUBCASE("unnormalized teacher distribution rejected") {
    std::array<Tensor, 2> teacher{Tensor::from({2}, {0.7f, 0.7f}),
                                  Tensor::from({2}, {0.5f, 0.5f})};
    Tape<float> t;
    std::vector<StudentClsView<float>> views;
    views.push_back({logp_of(t, Tensor::from({2}, {0.5f, 0.5f}), true), -1, false});
    CHECK_THROWS_WITH_AS(cls_loss(t, teacher, views, 6),
                         doctest::Contains("not normalized"), Error);
  }
}

TEST_CASE("mpm_loss: uniform bound, cross-entropy identity, multi-mask mean") {
  const int n_tok = 4096;
  SUBCASE("teacher and student uniform over 4096 gives log 4096 per token") {
    Tape<float> t;
    Tensor teacher({3, n_tok});
    teacher.fill(1.f / n_tok);
    Tensor logits({3, n_tok});  // zeros -> uniform log-softmax
    auto logp = t.log_softmax_rows(t.input(logits, true));
    std::vector<MpmMaskTerm<float>> terms{{logp, teacher}};
    auto loss = mpm_loss(t, terms);
    CHECK(t.val(loss).data[0] == doctest::Approx(std::log(4096.0)).epsilon(1e-5));
    CHECK(std::log(4096.0) == doctest::Approx(8.318).epsilon(1e-3));
  }
  SUBCASE("teacher equals student: loss is H(p), KL is zero") {
    Rng rng(65);
    Tensor logits({1, 64});
    for (auto& v : logits.data) v = float(rng.normal());
    auto p = sharpened_softmax(logits, 1.f);
    Tape<float> t;
    auto logp = logp_of(t, p, true);
    std::vector<MpmMaskTerm<float>> terms{{logp, p}};
    auto loss = mpm_loss(t, terms);
    double h = 0;
    for (float v : p.data) h -= double(v) * std::log(double(v));
    CHECK(t.val(loss).data[0] == doctest::Approx(h).epsilon(1e-4));
  }
  SUBCASE("identical masks: multi-mask equals the single-mask loss") {
    Rng rng(66);
    Tensor teacher_logits({4, 32});
    for (auto& v : teacher_logits.data) v = float(rng.normal());
    auto teacher = sharpened_softmax(teacher_logits, 0.5f);
    Tensor student_logits({4, 32});
    for (auto& v : student_logits.data) v = float(rng.normal());

    Tape<float> t;
    auto logp = t.log_softmax_rows(t.input(student_logits, true));
    std::vector<MpmMaskTerm<float>> one{{logp, teacher}};
    const double single = t.val(mpm_loss(t, one)).data[0];
    std::vector<MpmMaskTerm<float>> four;
    for (int m = 0; m < 4; ++m) four.push_back({logp, teacher});
    const double multi = t.val(mpm_loss(t, four)).data[0];
    CHECK(multi == doctest::Approx(single).epsilon(1e-6));
  }
  SUBCASE("index misalignment rejected") {
    Tape<float> t;
    Tensor teacher({2, 8});
    teacher.fill(1.f / 8);
    Tensor logits({3, 8});
    auto logp = t.log_softmax_rows(t.input(logits, true));
    std::vector<MpmMaskTerm<float>> terms{{logp, teacher}};
    CHECK_THROWS_WITH_AS(mpm_loss(t, terms), doctest::Contains("misalignment"),
                         Error);
  }
}

TEST_CASE("koleo_loss: closed forms and monotonicity") {
  SUBCASE("two antipodal unit vectors: loss is -log 2") {
    Tape<float> t;
    auto in = t.input(Tensor::from({2, 2}, {1, 0, -1, 0}), true);
    auto loss = koleo_loss(t, in);
    CHECK(t.val(loss).data[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-5));
  }
  SUBCASE("identical rows clamp at 1e-8") {
    Tape<float> t;
    auto in = t.input(Tensor::from({2, 2}, {1, 0, 1, 0}), true);
    auto loss = koleo_loss(t, in);
    CHECK(t.val(loss).data[0] == doctest::Approx(-std::log(1e-8)).epsilon(1e-4));
  }
  SUBCASE("spreading a 1-parameter family apart decreases the loss") {
    double prev = 1e30;
    for (float angle : {0.2f, 0.5f, 1.0f, 1.5f}) {
      Tape<float> t;
      Tensor rows({3, 2});
      for (int i = 0; i < 3; ++i) {
        rows.at(i, 0) = std::cos(angle * float(i));
        rows.at(i, 1) = std::sin(angle * float(i));
      }
      auto loss = koleo_loss(t, t.input(rows, true));
      CHECK(t.val(loss).data[0] < prev);
      prev = t.val(loss).data[0];
    }
  }
  SUBCASE("batch of one rejected") {
    Tape<float> t;
    auto in = t.input(Tensor::from({1, 2}, {1, 0}), true);
    CHECK_THROWS_AS(koleo_loss(t, in), Error);
  }
}

TEST_CASE("regression_loss: smooth-L1 piecewise values") {
  Tape<float> t;
  SUBCASE("d = 1 lands on the quadratic branch: 0.25") {
    auto s = t.input(Tensor::from({1, 1}, {1.f}), true);
    auto loss = regression_loss(t, s, Tensor::from({1, 1}, {0.f}));
    CHECK(t.val(loss).data[0] == doctest::Approx(0.25f));
  }
  SUBCASE("d = 4 lands on the linear branch: 3.0") {
    auto s = t.input(Tensor::from({1, 1}, {4.f}), true);
    auto loss = regression_loss(t, s, Tensor::from({1, 1}, {0.f}));
    CHECK(t.val(loss).data[0] == doctest::Approx(3.0f));
  }
  SUBCASE("d = 0 gives zero") {
    auto s = t.input(Tensor::from({1, 2}, {0.5f, -2.f}), true);
    auto loss = regression_loss(t, s, Tensor::from({1, 2}, {0.5f, -2.f}));
    CHECK(t.val(loss).data[0] == 0.f);
  }
  SUBCASE("shape mismatch rejected") {
    auto s = t.input(Tensor::from({1, 2}, {0.f, 0.f}), true);
    CHECK_THROWS_AS(regression_loss(t, s, Tensor::from({1, 1}, {0.f})), Error);
  }
}

TEST_CASE("ema_update: formula, endpoints, missing tensors") {
  nn::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.mlp_dim = 16;
  cfg.patch_mlp1_hidden = 4;
  cfg.patch_mlp1_out = 4;
  cfg.patch_mlp2_hidden = 8;
  cfg.pos_hidden = 4;
  cfg.pred_dim = 4;
  cfg.pred_layers = 1;
  cfg.pred_heads = 2;
  cfg.pred_mlp_dim = 8;
  cfg.pred_pos_hidden = 4;
  cfg.head_hidden1 = 8;
  cfg.head_hidden2 = 8;
  cfg.head_bottleneck = 4;
  cfg.n_tokens = 16;
  auto student = nn::make_param_store<float>(cfg);
  Rng rng(67);
  nn::init_params(student, rng);
  auto teacher = make_teacher(student, cfg.n_tokens);

  SUBCASE("teacher carries no predictor tensors") {
    for (const auto& [name, t] : teacher.ema.tensors)
      CHECK(name.rfind("pred.", 0) != 0);
    CHECK(teacher.ema.has("enc.blk0.attn.q.w"));
    CHECK(teacher.ema.has("head.cls.out.w"));
  }
  SUBCASE("theta'=1, theta=0, eta=0.995 gives 0.995") {
    for (auto& [name, t] : teacher.ema.tensors) t.fill(1.f);
    auto zeroed = student;
    for (auto& [name, t] : zeroed.tensors) t.fill(0.f);
    ema_update(teacher, zeroed, 0.995f);
    CHECK(teacher.ema.at("enc.cls").data[0] == doctest::Approx(0.995f));
  }
  SUBCASE("eta = 1 freezes the teacher; eta = 0 copies the student") {
    auto before = teacher.ema.at("enc.norm.g").data;
    ema_update(teacher, student, 1.f);
    CHECK(teacher.ema.at("enc.norm.g").data == before);
    ema_update(teacher, student, 0.f);
    CHECK(teacher.ema.at("enc.norm.g").data == student.at("enc.norm.g").data);
  }
  SUBCASE("missing tensor name errors") {
    auto broken = student;
    broken.tensors.erase("enc.cls");
    CHECK_THROWS_AS(ema_update(teacher, broken, 0.9f), Error);
  }
}

TEST_CASE("eval_schedules: warmup, cosine, temperature ordering") {
  ScheduleConfig cfg;
  cfg.base_lr = 5e-4;
  cfg.lr_warmup_frac = 10.0 / 300.0;
  cfg.teacher_warmup_frac = 10.0 / 300.0;

  SUBCASE("step 0 gives zero lr and the EMA start value") {
    auto v = eval_schedules(0, 3000, cfg);
    CHECK(v.lr == doctest::Approx(0.0));
    CHECK(v.ema == doctest::Approx(0.995));
    CHECK(v.tau_cls == doctest::Approx(0.04));
    CHECK(v.tau_patch == doctest::Approx(0.05));
  }
  SUBCASE("cosine midpoint after warmup gives half the base lr") {
    // progress p such that (p - w) / (1 - w) = 0.5
    const double w = cfg.lr_warmup_frac;
    const int64_t total = 6000;
    const int64_t step = int64_t((w + 0.5 * (1 - w)) * total);
    auto v = eval_schedules(step, total, cfg);
    CHECK(v.lr == doctest::Approx(2.5e-4).epsilon(1e-3));
  }
  SUBCASE("final step gives ema 1.0 and end temperatures") {
    auto v = eval_schedules(3000, 3000, cfg);
    CHECK(v.ema == doctest::Approx(1.0));
    CHECK(v.tau_cls == doctest::Approx(0.07));
    CHECK(v.tau_patch == doctest::Approx(0.07));
    CHECK(v.lr == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("ema is monotonically non-decreasing") {
    double prev = 0.0;
    for (int64_t s = 0; s <= 100; ++s) {
      auto v = eval_schedules(s, 100, cfg);
      CHECK(v.ema >= prev);
      prev = v.ema;
    }
  }
  SUBCASE("teacher temperatures stay below the student temperature") {
    for (int64_t s = 0; s <= 100; ++s) {
      auto v = eval_schedules(s, 100, cfg);
      CHECK(v.tau_cls < cfg.tau_student);
      CHECK(v.tau_patch < cfg.tau_student);
    }
  }
  SUBCASE("sharpening off pins the teacher to the student temperature") {
    ScheduleConfig off = cfg;
    off.sharpening = false;
    auto v = eval_schedules(50, 100, off);
    CHECK(v.tau_cls == doctest::Approx(off.tau_student));
    CHECK(v.tau_patch == doctest::Approx(off.tau_student));
  }
}
