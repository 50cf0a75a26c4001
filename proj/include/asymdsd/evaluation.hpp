#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "asymdsd/network.hpp"
#include "asymdsd/pipeline.hpp"
#include "asymdsd/tensor_table.hpp"

namespace asymdsd::eval {

// Frozen features: per sample the CLS token concatenated with the mean and
// max pooled patch embeddings of the teacher encoder (width 3 D).
struct FeatureSet {
  Tensor features;          // (n, 3 * D)
  std::vector<int> labels;  // class ids

  int size() const { return features.rows(); }
  int width() const { return features.cols(); }
};

// Single unmasked, uncropped view per cloud, patchified at the global
// settings with a fixed FPS start so extraction is deterministic.
inline FeatureSet extract_features(const std::vector<geometry::PointCloud>& clouds,
                                   const std::vector<int>& labels,
                                   const nn::ParamStore& encoder_params,
                                   const nn::ModelConfig& model,
                                   int n_patches, int patch_points) {
  check(clouds.size() == labels.size(), "extract_features: label count mismatch");
  const int d = model.embed_dim;
  FeatureSet out;
  out.features = Tensor({int(clouds.size()), 3 * d});
  out.labels = labels;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < int(clouds.size()); ++i) {
    auto normalized = geometry::normalize_unit_sphere(clouds[size_t(i)]);
    auto ps = geometry::patchify_at(normalized, n_patches, patch_points, 0);
    Tape<float> tape;
    nn::ParamBinding<float> bind(tape, encoder_params, false);
    auto tokens = nn::encode_view(tape, bind, model, ps.patch_points,
                                  ps.centers, patch_points);
    const auto& tv = tape.val(tokens);
    float* dst = out.features.row(i);
    for (int c = 0; c < d; ++c) dst[c] = tv.at(0, c);
    for (int c = 0; c < d; ++c) {
      double mean = 0.0;
      float mx = tv.at(1, c);
      for (int r = 1; r < tv.rows(); ++r) {
        mean += tv.at(r, c);
        mx = std::max(mx, tv.at(r, c));
      }
      dst[d + c] = float(mean / (tv.rows() - 1));
      dst[2 * d + c] = mx;
    }
  }
  return out;
}

// Features are exportable in the same binary tensor-table container as
// checkpoints.
inline void save_features(const FeatureSet& fs, const std::string& path) {
  io::TensorTable t;
  t.put_f32("features", fs.features);
  std::vector<int64_t> labels(fs.labels.begin(), fs.labels.end());
  t.put_i64("labels", labels);
  t.write(path);
}

inline FeatureSet load_features(const std::string& path) {
  const auto t = io::TensorTable::read(path);
  FeatureSet fs;
  fs.features = t.at("features").as_f32();
  for (int64_t v : t.at("labels").as_i64()) fs.labels.push_back(int(v));
  return fs;
}

// Multinomial logistic regression with L2 regularization, trained by
// full-batch Adam from zero init: a deterministic convex stand-in for the
// linear-SVM probe. Features are standardized with train statistics.
inline double linear_probe(const FeatureSet& train, const FeatureSet& test,
                           double l2 = 1e-3, int iters = 500, double lr = 0.1) {
  const int n = train.size(), d = train.width();
  check(n >= 2, "linear_probe: empty train set");
  int n_classes = 0;
  for (int l : train.labels) n_classes = std::max(n_classes, l + 1);
  check(n_classes >= 2, "linear_probe: needs at least 2 classes");

  std::vector<double> mean(size_t(d), 0.0), scale(size_t(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) mean[size_t(c)] += train.features.at(i, c);
  for (auto& v : mean) v /= n;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      const double x = train.features.at(i, c) - mean[size_t(c)];
      scale[size_t(c)] += x * x;
    }
  for (auto& v : scale) v = 1.0 / std::max(std::sqrt(v / n), 1e-8);

  auto standardized = [&](const Tensor& f, int row) {
    std::vector<double> x(static_cast<size_t>(d));
    for (int c = 0; c < d; ++c)
      x[size_t(c)] = (f.at(row, c) - mean[size_t(c)]) * scale[size_t(c)];
    return x;
  };

  // weights (n_classes x d) + bias (n_classes), Adam state alongside
  std::vector<double> w(size_t(n_classes) * d, 0.0), bias(size_t(n_classes), 0.0);
  std::vector<double> mw(w.size(), 0.0), vw(w.size(), 0.0);
  std::vector<double> mb(bias.size(), 0.0), vb(bias.size(), 0.0);
  std::vector<std::vector<double>> xs;
  xs.reserve(size_t(n));
  for (int i = 0; i < n; ++i) xs.push_back(standardized(train.features, i));

  std::vector<double> logits(static_cast<size_t>(n_classes));
  std::vector<double> gw(w.size()), gb(bias.size());
  for (int it = 1; it <= iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const auto& x = xs[size_t(i)];
      double mx = -1e300;
      for (int k = 0; k < n_classes; ++k) {
        double s = bias[size_t(k)];
        const double* wk = w.data() + size_t(k) * d;
        for (int c = 0; c < d; ++c) s += wk[c] * x[size_t(c)];
        logits[size_t(k)] = s;
        mx = std::max(mx, s);
      }
      double sum = 0.0;
      for (int k = 0; k < n_classes; ++k) {
        logits[size_t(k)] = std::exp(logits[size_t(k)] - mx);
        sum += logits[size_t(k)];
      }
      for (int k = 0; k < n_classes; ++k) {
        const double p = logits[size_t(k)] / sum;
        const double err = (p - (train.labels[size_t(i)] == k ? 1.0 : 0.0)) / n;
        gb[size_t(k)] += err;
        double* gk = gw.data() + size_t(k) * d;
        for (int c = 0; c < d; ++c) gk[c] += err * x[size_t(c)];
      }
    }
    for (size_t q = 0; q < w.size(); ++q) gw[q] += l2 * w[q];
    const double bc1 = 1.0 - std::pow(0.9, it), bc2 = 1.0 - std::pow(0.999, it);
    auto adam = [&](std::vector<double>& p, std::vector<double>& g,
                    std::vector<double>& m, std::vector<double>& v) {
      for (size_t q = 0; q < p.size(); ++q) {
        m[q] = 0.9 * m[q] + 0.1 * g[q];
        v[q] = 0.999 * v[q] + 0.001 * g[q] * g[q];
        p[q] -= lr * (m[q] / bc1) / (std::sqrt(v[q] / bc2) + 1e-8);
      }
    };
    adam(w, gw, mw, vw);
    adam(bias, gb, mb, vb);
  }

  int correct = 0;
  for (int i = 0; i < test.size(); ++i) {
    const auto x = standardized(test.features, i);
    int best = 0;
    double best_s = -1e300;
    for (int k = 0; k < n_classes; ++k) {
      double s = bias[size_t(k)];
      const double* wk = w.data() + size_t(k) * d;
      for (int c = 0; c < d; ++c) s += wk[c] * x[size_t(c)];
      if (s > best_s) {
        best_s = s;
        best = k;
      }
    }
    correct += best == test.labels[size_t(i)];
  }
  return double(correct) / std::max(test.size(), 1);
}

// k-nearest-neighbor probe on raw features (Euclidean by default, cosine by
// flag). Vote ties are broken in favor of the tied class with the nearest
// representative among the k neighbors.
inline double knn_probe(const FeatureSet& train, const FeatureSet& test,
                        int k = 5, bool cosine = false) {
  check(k >= 1 && k <= train.size(), "knn_probe: k exceeds train size");
  const int d = train.width();
  int correct = 0;
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(train.size()));
  for (int i = 0; i < test.size(); ++i) {
    for (int j = 0; j < train.size(); ++j) {
      double s = 0.0;
      if (cosine) {
        double dot = 0, na = 0, nb = 0;
        for (int c = 0; c < d; ++c) {
          const double a = test.features.at(i, c), b = train.features.at(j, c);
          dot += a * b;
          na += a * a;
          nb += b * b;
        }
        s = 1.0 - dot / std::max(std::sqrt(na * nb), 1e-12);
      } else {
        for (int c = 0; c < d; ++c) {
          const double diff =
              double(test.features.at(i, c)) - train.features.at(j, c);
          s += diff * diff;
        }
      }
      dist[size_t(j)] = {s, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::map<int, int> votes;
    std::map<int, double> nearest_of_class;
    for (int q = 0; q < k; ++q) {
      const int label = train.labels[size_t(dist[size_t(q)].second)];
      votes[label] += 1;
      if (!nearest_of_class.count(label))
        nearest_of_class[label] = dist[size_t(q)].first;
    }
    int best_label = -1, best_votes = -1;
    double best_dist = 0;
    for (const auto& [label, v] : votes) {
      const double nd = nearest_of_class[label];
      if (v > best_votes || (v == best_votes && nd < best_dist)) {
        best_label = label;
        best_votes = v;
        best_dist = nd;
      }
    }
    correct += best_label == test.labels[size_t(i)];
  }
  return double(correct) / std::max(test.size(), 1);
}

// ---- diagnostics ----

struct EntropyDiagnostics {
  double marginal_entropy = 0.0;
  double mean_posterior_entropy = 0.0;
};

// Marginal entropy of the batch-mean distribution and mean per-row entropy.
inline EntropyDiagnostics entropy_diagnostics(const Tensor& probs) {
  const int rows = probs.rows(), n = probs.cols();
  check(rows >= 1, "entropy_diagnostics: empty batch");
  EntropyDiagnostics out;
  std::vector<double> mean(size_t(n), 0.0);
  for (int r = 0; r < rows; ++r) {
    out.mean_posterior_entropy += pipeline::detail::entropy(probs.row(r), n);
    const float* p = probs.row(r);
    for (int j = 0; j < n; ++j) mean[size_t(j)] += p[j];
  }
  out.mean_posterior_entropy /= rows;
  for (double v : mean) {
    v /= rows;
    if (v > 0) out.marginal_entropy -= v * std::log(v);
  }
  return out;
}

// KL from the cross-entropy identity: KL = CE - H(p_t).
inline double kl_from_ce(double cross_entropy, double teacher_entropy) {
  return cross_entropy - teacher_entropy;
}

// Attention-weighted mean distance between a query patch center and the
// centers it attends to, per layer and head. The CLS row and column are
// excluded.
inline std::vector<std::vector<double>> attention_distance(
    const nn::AttnRecord& rec, const Tensor& centers) {
  check(!rec.records.empty(), "attention_distance: missing attention records");
  const int n_c = centers.rows();
  Tensor dist({n_c, n_c});
  for (int i = 0; i < n_c; ++i)
    for (int j = 0; j < n_c; ++j) {
      double s = 0;
      for (int c = 0; c < 3; ++c) {
        const double diff = double(centers.at(i, c)) - centers.at(j, c);
        s += diff * diff;
      }
      dist.at(i, j) = float(std::sqrt(s));
    }
  std::vector<std::vector<double>> out;
  for (const auto& layer : rec.records) {
    out.emplace_back();
    for (const auto& attn : layer) {
      check(attn.rows() == n_c + 1, "attention_distance: size mismatch");
      double mean = 0.0;
      for (int i = 0; i < n_c; ++i) {
        double s = 0.0;
        for (int j = 0; j < n_c; ++j)
          s += double(attn.at(i + 1, j + 1)) * dist.at(i, j);
        mean += s;
      }
      out.back().push_back(mean / n_c);
    }
  }
  return out;
}

}  // namespace asymdsd::eval
