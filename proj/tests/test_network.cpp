#include <doctest.h>

#include <cmath>
#include <cstring>

#include "asymdsd/gradcheck.hpp"
#include "asymdsd/network.hpp"

using namespace asymdsd;
using namespace asymdsd::nn;

namespace {

ModelConfig micro() { return gradcheck::micro_model(); }

Tensor random_tensor(std::vector<int> shape, Rng& rng, float scale = 1.f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = float(rng.normal() * scale);
  return t;
}

template <typename S>
ParamStoreT<S> init_store(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  auto p = make_param_store<S>(cfg);
  init_params(p, rng);
  return p;
}

}  // namespace

TEST_CASE("patch_embed: permutation and duplication invariance, ViT-S shape") {
  auto cfg = micro();
  auto params = init_store<float>(cfg, 41);
  Rng rng(42);
  const int n_c = 5, k = 6;
  auto pts = random_tensor({n_c * k, 3}, rng, 0.3f);

  auto run = [&](const Tensor& in, int kk) {
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    return t.val(patch_embed(t, p, t.constant(in), kk)).data;
  };
  auto base = run(pts, k);
  CHECK(int(base.size()) == n_c * cfg.embed_dim);

  SUBCASE("permuting the points within each patch is bit-identical") {
    Tensor shuffled = pts;
    for (int i = 0; i < n_c; ++i)
      for (int j = 0; j < k / 2; ++j)
        for (int c = 0; c < 3; ++c)
          std::swap(shuffled.at(i * k + j, c), shuffled.at(i * k + k - 1 - j, c));
    CHECK(run(shuffled, k) == base);
  }
  SUBCASE("duplicating every point (K -> 2K) is bit-identical") {
    Tensor doubled({n_c * k * 2, 3});
    for (int i = 0; i < n_c; ++i)
      for (int j = 0; j < k; ++j)
        for (int rep = 0; rep < 2; ++rep)
          std::copy(pts.row(i * k + j), pts.row(i * k + j) + 3,
                    doubled.row(i * 2 * k + 2 * j + rep));
    CHECK(run(doubled, 2 * k) == base);
  }
  SUBCASE("ViT-S global view embeds to 64 x 384") {
    ModelConfig full;  // paper defaults
    auto fp = init_store<float>(full, 43);
    Rng r2(44);
    auto gp = random_tensor({64 * 32, 3}, r2, 0.2f);
    Tape<float> t;
    ParamBinding<float> p(t, fp, false);
    auto out = patch_embed(t, p, t.constant(gp), 32);
    CHECK(t.val(out).rows() == 64);
    CHECK(t.val(out).cols() == 384);
  }
}

TEST_CASE("pos_embed: determinism, shape, continuity") {
  auto cfg = micro();
  auto params = init_store<float>(cfg, 45);
  Rng rng(46);
  auto centers = random_tensor({7, 3}, rng);
  Tape<float> t;
  ParamBinding<float> p(t, params, false);
  auto out = pos_embed(t, p, t.constant(centers));
  CHECK(t.val(out).rows() == 7);
  CHECK(t.val(out).cols() == cfg.embed_dim);

  SUBCASE("identical centers give identical embeddings") {
    Tensor two({2, 3});
    for (int c = 0; c < 3; ++c) two.at(0, c) = two.at(1, c) = centers.at(0, c);
    Tape<float> t2;
    ParamBinding<float> p2(t2, params, false);
    const auto& v = t2.val(pos_embed(t2, p2, t2.constant(two)));
    for (int c = 0; c < cfg.embed_dim; ++c) CHECK(v.at(0, c) == v.at(1, c));
  }
  SUBCASE("small perturbations move the embedding proportionally") {
    Tensor moved = centers;
    const float eps = 1e-4f;
    moved.at(0, 0) += eps;
    Tape<float> t2;
    ParamBinding<float> p2(t2, params, false);
    const auto& v2 = t2.val(pos_embed(t2, p2, t2.constant(moved)));
    double diff = 0;
    for (int c = 0; c < cfg.embed_dim; ++c)
      diff = std::max(diff, std::abs(double(v2.at(0, c)) - t.val(out).at(0, c)));
    // crude Lipschitz bound from the two weight matrices' Frobenius norms
    double w1 = 0, w2 = 0;
    for (float v : params.at("pos.fc1.w").data) w1 += double(v) * v;
    for (float v : params.at("pos.fc2.w").data) w2 += double(v) * v;
    CHECK(diff <= eps * std::sqrt(w1) * std::sqrt(w2) * 10 + 1e-7);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("encoder_forward: shapes, empty stack, equivariance, attention") {
  auto cfg = micro();
  auto params = init_store<float>(cfg, 47);
  Rng rng(48);
  const int n_c = 6;
  auto emb = random_tensor({n_c, cfg.embed_dim}, rng);
  auto pos = random_tensor({n_c, cfg.embed_dim}, rng);

  SUBCASE("L = 0 returns [CLS; patches] with positions never added") {
    ModelConfig c0 = cfg;
    c0.layers = 0;
    auto p0 = init_store<float>(c0, 47);
    Tape<float> t;
    ParamBinding<float> p(t, p0, false);
    auto out = encoder_forward(t, p, c0, t.constant(emb), t.constant(pos));
    REQUIRE(t.val(out).rows() == 1 + n_c);
    for (int c = 0; c < cfg.embed_dim; ++c)
      CHECK(t.val(out).at(0, c) == p0.at("enc.cls").data[size_t(c)]);
    for (int i = 0; i < n_c; ++i)
      for (int c = 0; c < cfg.embed_dim; ++c)
        CHECK(t.val(out).at(1 + i, c) == emb.at(i, c));
  }

  SUBCASE("ViT-S output shape is (1 + 64) x 384") {
    ModelConfig full;
    auto fp = init_store<float>(full, 49);
    Rng r2(50);
    auto femb = random_tensor({64, 384}, r2, 0.1f);
    auto fpos = random_tensor({64, 384}, r2, 0.1f);
    Tape<float> t;
    ParamBinding<float> p(t, fp, false);
    auto out = encoder_forward(t, p, full, t.constant(femb), t.constant(fpos));
    CHECK(t.val(out).rows() == 65);
    CHECK(t.val(out).cols() == 384);
  }

  SUBCASE("permuting patches permutes outputs and fixes CLS (tolerance)") {
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Tensor pemb({n_c, cfg.embed_dim}), ppos({n_c, cfg.embed_dim});
    for (int i = 0; i < n_c; ++i) {
      std::copy(emb.row(perm[size_t(i)]), emb.row(perm[size_t(i)]) + cfg.embed_dim,
                pemb.row(i));
      std::copy(pos.row(perm[size_t(i)]), pos.row(perm[size_t(i)]) + cfg.embed_dim,
                ppos.row(i));
    }
    Tape<float> t1, t2;
    ParamBinding<float> p1(t1, params, false), p2(t2, params, false);
    auto o1 = encoder_forward(t1, p1, cfg, t1.constant(emb), t1.constant(pos));
    auto o2 = encoder_forward(t2, p2, cfg, t2.constant(pemb), t2.constant(ppos));
    for (int c = 0; c < cfg.embed_dim; ++c)
      CHECK(t1.val(o1).at(0, c) ==
            doctest::Approx(t2.val(o2).at(0, c)).epsilon(1e-4));
    for (int i = 0; i < n_c; ++i)
      for (int c = 0; c < cfg.embed_dim; ++c)
        CHECK(t1.val(o1).at(1 + perm[size_t(i)], c) ==
              doctest::Approx(t2.val(o2).at(1 + i, c)).epsilon(1e-4));
  }

  SUBCASE("recorded attention rows sum to 1 within 1e-6") {
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    AttnRecord rec;
    encoder_forward(t, p, cfg, t.constant(emb), t.constant(pos), &rec);
    REQUIRE(int(rec.records.size()) == cfg.layers);
    for (const auto& layer : rec.records) {
      REQUIRE(int(layer.size()) == cfg.heads);
      for (const auto& a : layer)
        for (int r = 0; r < a.rows(); ++r) {
          double s = 0;
          for (int j = 0; j < a.cols(); ++j) s += a.at(r, j);
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
  }
}

TEST_CASE("predictor: cross_only independence, self_full coupling") {
  auto cfg = micro();
  Rng rng(51);
  const int n_ctx = 5, n_query = 4;

  auto run_mode = [&](const ParamStore& params, const Tensor& ctx,
                      const Tensor& queries, PredictorMode mode) {
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    auto out = predictor_forward(t, p, cfg, t.constant(ctx), queries, mode);
    return t.val(out);
  };

  SUBCASE("cross_only: removal and permutation of other queries is bit-exact") {
    for (int trial = 0; trial < 10; ++trial) {
      auto params = init_store<float>(cfg, 100 + uint64_t(trial));
      auto ctx = random_tensor({n_ctx, cfg.embed_dim}, rng);
      auto queries = random_tensor({n_query, 3}, rng);
      auto full = run_mode(params, ctx, queries, PredictorMode::kCrossOnly);
      CHECK(full.rows() == n_query);
      CHECK(full.cols() == cfg.embed_dim);
      for (int q = 0; q < n_query; ++q) {
        Tensor single({1, 3});
        std::copy(queries.row(q), queries.row(q) + 3, single.row(0));
        auto alone = run_mode(params, ctx, single, PredictorMode::kCrossOnly);
        CHECK(std::memcmp(alone.row(0), full.row(q),
                          sizeof(float) * size_t(cfg.embed_dim)) == 0);
      }
      Tensor reversed({n_query, 3});
      for (int q = 0; q < n_query; ++q)
        std::copy(queries.row(q), queries.row(q) + 3,
                  reversed.row(n_query - 1 - q));
      auto rev = run_mode(params, ctx, reversed, PredictorMode::kCrossOnly);
      for (int q = 0; q < n_query; ++q)
        CHECK(std::memcmp(rev.row(n_query - 1 - q), full.row(q),
                          sizeof(float) * size_t(cfg.embed_dim)) == 0);
    }
  }

  SUBCASE("self_full: query outputs change when other queries are removed") {
    auto params = init_store<float>(cfg, 77);
    auto ctx = random_tensor({n_ctx, cfg.embed_dim}, rng);
    auto queries = random_tensor({n_query, 3}, rng);
    auto full = run_mode(params, ctx, queries, PredictorMode::kSelfFull);
    CHECK(full.rows() == n_query);
    CHECK(full.cols() == cfg.embed_dim);
    Tensor single({1, 3});
    std::copy(queries.row(0), queries.row(0) + 3, single.row(0));
    auto alone = run_mode(params, ctx, single, PredictorMode::kSelfFull);
    CHECK(std::memcmp(alone.row(0), full.row(0),
                      sizeof(float) * size_t(cfg.embed_dim)) != 0);
  }

  SUBCASE("unknown mode string rejected") {
    CHECK_THROWS_WITH_AS(predictor_mode_from("both"),
                         doctest::Contains("unknown mode"), Error);
  }
}

TEST_CASE("projection_head: shape, bias passthrough, parameter counts") {
  SUBCASE("micro head shapes") {
    auto cfg = micro();
    auto params = init_store<float>(cfg, 52);
    Rng rng(53);
    auto tokens = random_tensor({3, cfg.embed_dim}, rng);
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    auto out = projection_head(t, p, cfg, t.constant(tokens), "cls");
    CHECK(t.val(out).rows() == 3);
    CHECK(t.val(out).cols() == cfg.n_tokens);
    CHECK_THROWS_AS(projection_head(t, p, cfg, t.constant(tokens), "global"),
                    Error);
  }
  SUBCASE("zero input with zeroed mid biases returns the final bias row") {
    auto cfg = micro();
    auto params = init_store<float>(cfg, 54);
    Tensor zeros({2, cfg.embed_dim});
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    auto out = projection_head(t, p, cfg, t.constant(zeros), "patch");
    // biases init to zero, weights do not matter on a zero input
    for (int c = 0; c < cfg.n_tokens; ++c) {
      CHECK(t.val(out).at(0, c) == params.at("head.patch.out.b").data[size_t(c)]);
      CHECK(t.val(out).at(1, c) == t.val(out).at(0, c));
    }
  }
  SUBCASE("ViT-S parameter counts match the reported module sizes") {
    ModelConfig full;
    auto params = make_param_store<float>(full);
    const double enc = double(params.count_prefix("enc."));
    const double pred = double(params.count_prefix("pred."));
    const double head_cls = double(params.count_prefix("head.cls"));
    const double head_patch = double(params.count_prefix("head.patch"));
    CHECK(std::abs(enc - 21.2e6) / 21.2e6 < 0.01);
    CHECK(std::abs(pred - 2.9e6) / 2.9e6 < 0.05);
    CHECK(std::abs(head_cls - 2.8e6) / 2.8e6 < 0.03);
    CHECK(head_cls == head_patch);
    // patch + position embedding bucket
    const double embed =
        double(params.count_prefix("embed.") + params.count_prefix("pos."));
    CHECK(std::abs(embed - 0.5e6) / 0.5e6 < 0.12);
  }
  SUBCASE("weight-normalized final layer is reachable by config") {
    auto cfg = micro();
    cfg.head_weight_norm = true;
    auto params = init_store<float>(cfg, 55);
    Rng rng(56);
    auto tokens = random_tensor({1, cfg.embed_dim}, rng);
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    auto out = projection_head(t, p, cfg, t.constant(tokens), "cls");
    CHECK(t.val(out).all_finite());
  }
}

TEST_CASE("end-to-end gradient check on the micro config") {
  auto res = gradcheck::run(7, 120, 1e-4);
  CAPTURE(res.worst_tensor);
  CAPTURE(res.max_rel_error);
  CHECK(res.passed);
  CHECK(res.checked >= 100);

  SUBCASE("corrupting a gradient fails and names the tensor") {
    auto bad = gradcheck::run(7, 60, 1e-4, "pred.up.w");
    CHECK(!bad.passed);
    CHECK(bad.worst_tensor == "pred.up.w");
  }
}

TEST_CASE("forward determinism: encode_view twice is bit-identical") {
  auto cfg = micro();
  auto params = init_store<float>(cfg, 57);
  Rng rng(58);
  auto pts = random_tensor({4 * 8, 3}, rng, 0.3f);
  auto ctr = random_tensor({4, 3}, rng);
  auto run = [&]() {
    Tape<float> t;
    ParamBinding<float> p(t, params, false);
    return t.val(nn::encode_view(t, p, cfg, pts, ctr, 8)).data;
  };
  CHECK(run() == run());
}
