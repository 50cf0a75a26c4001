#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "asymdsd/tensor.hpp"

namespace asymdsd {

// Reverse-mode autodiff tape. Operations append nodes; construction order
// is a topological order, so backward() is a single reverse sweep over the
// nodes whose gradient has been touched.
//
// Values are computed eagerly. A node records a closure that pushes its
// output gradient to its parents; nodes whose inputs do not require
// gradients skip closure creation entirely, so a teacher forward pass on a
// tape costs no autodiff overhead.
template <typename S>
class Tape {
 public:
  using Index = int;

  struct Node {
    TensorT<S> val;
    TensorT<S> grad;
    bool needs_grad = false;
    bool touched = false;
    std::function<void(Tape&)> back;
  };

  Index input(TensorT<S> v, bool needs_grad = false) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = TensorT<S>::zeros(n.val.shape);
    nodes_.push_back(std::make_unique<Node>(std::move(n)));
    return Index(nodes_.size()) - 1;
  }

  Index constant(TensorT<S> v) { return input(std::move(v), false); }

  const TensorT<S>& val(Index i) const { return nodes_[size_t(i)]->val; }
  const TensorT<S>& grad(Index i) const { return nodes_[size_t(i)]->grad; }
  bool needs_grad(Index i) const { return nodes_[size_t(i)]->needs_grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise and broadcast ----

  Index add(Index a, Index b) {
    check(val(a).same_shape(val(b)), "add: shape mismatch");
    TensorT<S> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      });
      t.acc(b, [&](TensorT<S>& gb) {
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
      });
    });
  }

  Index sub(Index a, Index b) {
    check(val(a).same_shape(val(b)), "sub: shape mismatch");
    TensorT<S> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      });
      t.acc(b, [&](TensorT<S>& gb) {
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
      });
    });
  }

  Index mul(Index a, Index b) {
    check(val(a).same_shape(val(b)), "mul: shape mismatch");
    TensorT<S> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t) {
      const auto& g = t.out_grad();
      const auto& av = t.val(a);
      const auto& bv2 = t.val(b);
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * bv2.data[i];
      });
      t.acc(b, [&](TensorT<S>& gb) {
        for (size_t i = 0; i < g.data.size(); ++i)
          gb.data[i] += g.data[i] * av.data[i];
      });
    });
  }

  Index scale(Index a, S s) {
    TensorT<S> out = val(a);
    for (auto& v : out.data) v *= s;
    return emit(std::move(out), {a}, [a, s](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
      });
    });
  }

  // x (t x n) + v broadcast to every row; v may be rank-1 of length n.
  Index add_rowvec(Index x, Index v) {
    const int n = val(x).cols();
    check(val(v).numel() == n, "add_rowvec: width mismatch");
    TensorT<S> out = val(x);
    const int rows = out.rows();
    const S* vv = val(v).data.data();
    for (int r = 0; r < rows; ++r) {
      S* orow = out.row(r);
      for (int j = 0; j < n; ++j) orow[j] += vv[j];
    }
    return emit(std::move(out), {x, v}, [x, v, rows, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
      });
      t.acc(v, [&](TensorT<S>& gv) {
        for (int r = 0; r < rows; ++r) {
          const S* grow = g.data.data() + size_t(r) * n;
          for (int j = 0; j < n; ++j) gv.data[size_t(j)] += grow[j];
        }
      });
    });
  }

  Index gelu(Index a) {
    TensorT<S> out = val(a);
    for (auto& v : out.data) v = gelu_fwd(v);
    return emit(std::move(out), {a}, [a](Tape& t) {
      const auto& g = t.out_grad();
      const auto& av = t.val(a);
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * gelu_grad(av.data[i]);
      });
    });
  }

  // ---- matrix products ----

  Index matmul(Index a, Index b) {
    const int m = val(a).rows(), k = val(a).cols();
    const int k2 = val(b).rows(), n = val(b).cols();
    check(k == k2, "matmul: inner dim mismatch");
    TensorT<S> out({m, n});
    matmul_into(val(a).data.data(), val(b).data.data(), out.data.data(), m, k, n);
    return emit(std::move(out), {a, b}, [a, b, m, k, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        matmul_nt_acc(g.data.data(), t.val(b).data.data(), ga.data.data(), m, n, k);
      });
      t.acc(b, [&](TensorT<S>& gb) {
        matmul_tn_acc(t.val(a).data.data(), g.data.data(), gb.data.data(), m, k, n);
      });
    });
  }

  // a (m x k) times b^T where b is stored (n x k).
  Index matmul_nt(Index a, Index b) {
    const int m = val(a).rows(), k = val(a).cols();
    const int n = val(b).rows();
    check(val(b).cols() == k, "matmul_nt: inner dim mismatch");
    TensorT<S> out({m, n});
    matmul_nt_into(val(a).data.data(), val(b).data.data(), out.data.data(), m, k, n);
    return emit(std::move(out), {a, b}, [a, b, m, k, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        matmul_acc(g.data.data(), t.val(b).data.data(), ga.data.data(), m, n, k);
      });
      t.acc(b, [&](TensorT<S>& gb) {
        matmul_tn_acc(g.data.data(), t.val(a).data.data(), gb.data.data(), m, n, k);
      });
    });
  }

  // x (t x in) * w^T with w stored (out x in), the torch Linear layout.
  Index linear(Index x, Index w) { return matmul_nt(x, w); }

  Index linear_bias(Index x, Index w, Index b) {
    return add_rowvec(matmul_nt(x, w), b);
  }

  // ---- normalization and softmax ----

  Index rms_norm(Index x, Index gain, S eps = S(1e-6)) {
    const int rows = val(x).rows(), n = val(x).cols();
    check(val(gain).numel() == n, "rms_norm: gain width mismatch");
    TensorT<S> out({rows, n});
    std::vector<S> inv(static_cast<size_t>(rows));
    const S* gv = val(gain).data.data();
    for (int r = 0; r < rows; ++r) {
      const S* xr = val(x).row(r);
      S ms = S(0);
      for (int j = 0; j < n; ++j) ms += xr[j] * xr[j];
      ms = ms / S(n) + eps;
      const S iv = S(1) / std::sqrt(ms);
      inv[size_t(r)] = iv;
      S* orow = out.row(r);
      for (int j = 0; j < n; ++j) orow[j] = xr[j] * iv * gv[j];
    }
    return emit(std::move(out), {x, gain},
                [x, gain, rows, n, inv = std::move(inv)](Tape& t) {
      const auto& g = t.out_grad();
      const auto& xv = t.val(x);
      const S* gv2 = t.val(gain).data.data();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          const S* xr = xv.row(r);
          const S* grow = g.data.data() + size_t(r) * n;
          S* gxr = gx.row(r);
          const S iv = inv[size_t(r)];
          S dot = S(0);
          for (int j = 0; j < n; ++j) dot += grow[j] * gv2[j] * xr[j];
          const S coef = iv * iv * iv * dot / S(n);
          for (int j = 0; j < n; ++j)
            gxr[j] += iv * gv2[j] * grow[j] - coef * xr[j];
        }
      });
      t.acc(gain, [&](TensorT<S>& gg) {
        for (int r = 0; r < rows; ++r) {
          const S* xr = xv.row(r);
          const S* grow = g.data.data() + size_t(r) * n;
          const S iv = inv[size_t(r)];
          for (int j = 0; j < n; ++j) gg.data[size_t(j)] += grow[j] * xr[j] * iv;
        }
      });
    });
  }

  Index softmax_rows(Index x) {
    const int rows = val(x).rows(), n = val(x).cols();
    TensorT<S> out({rows, n});
    for (int r = 0; r < rows; ++r) {
      const S* xr = val(x).row(r);
      S* orow = out.row(r);
      S mx = xr[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        orow[j] = std::exp(xr[j] - mx);
        sum += double(orow[j]);
      }
      const S is = S(1.0 / sum);
      for (int j = 0; j < n; ++j) orow[j] *= is;
    }
    Index id = emit(std::move(out), {x}, [x, rows, n](Tape& t) {
      const auto& g = t.out_grad();
      const auto& y = t.cur_val();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          const S* yr = y.row(r);
          const S* grow = g.data.data() + size_t(r) * n;
          S* gxr = gx.row(r);
          S dot = S(0);
          for (int j = 0; j < n; ++j) dot += grow[j] * yr[j];
          for (int j = 0; j < n; ++j) gxr[j] += yr[j] * (grow[j] - dot);
        }
      });
    });
    return id;
  }

  Index log_softmax_rows(Index x) {
    const int rows = val(x).rows(), n = val(x).cols();
    TensorT<S> out({rows, n});
    for (int r = 0; r < rows; ++r) {
      const S* xr = val(x).row(r);
      S* orow = out.row(r);
      S mx = xr[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) sum += std::exp(double(xr[j] - mx));
      const S lse = S(double(mx) + std::log(sum));
      for (int j = 0; j < n; ++j) orow[j] = xr[j] - lse;
    }
    Index id = emit(std::move(out), {x}, [x, rows, n](Tape& t) {
      const auto& g = t.out_grad();
      const auto& y = t.cur_val();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          const S* yr = y.row(r);
          const S* grow = g.data.data() + size_t(r) * n;
          S* gxr = gx.row(r);
          S gsum = S(0);
          for (int j = 0; j < n; ++j) gsum += grow[j];
          for (int j = 0; j < n; ++j)
            gxr[j] += grow[j] - std::exp(yr[j]) * gsum;
        }
      });
    });
    return id;
  }

  // ---- shape plumbing ----

  Index concat_rows(Index a, Index b) {
    const int n = val(a).cols();
    check(val(b).cols() == n, "concat_rows: width mismatch");
    const int ra = val(a).rows(), rb = val(b).rows();
    TensorT<S> out({ra + rb, n});
    std::copy(val(a).data.begin(), val(a).data.end(), out.data.begin());
    std::copy(val(b).data.begin(), val(b).data.end(),
              out.data.begin() + size_t(ra) * n);
    return emit(std::move(out), {a, b}, [a, b, ra, rb, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        for (size_t i = 0; i < size_t(ra) * n; ++i) ga.data[i] += g.data[i];
      });
      t.acc(b, [&](TensorT<S>& gb) {
        const size_t off = size_t(ra) * n;
        for (size_t i = 0; i < size_t(rb) * n; ++i) gb.data[i] += g.data[off + i];
      });
    });
  }

  Index concat_cols(Index a, Index b) {
    const int rows = val(a).rows();
    check(val(b).rows() == rows, "concat_cols: row mismatch");
    const int na = val(a).cols(), nb = val(b).cols();
    TensorT<S> out({rows, na + nb});
    for (int r = 0; r < rows; ++r) {
      std::copy(val(a).row(r), val(a).row(r) + na, out.row(r));
      std::copy(val(b).row(r), val(b).row(r) + nb, out.row(r) + na);
    }
    return emit(std::move(out), {a, b}, [a, b, rows, na, nb](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(a, [&](TensorT<S>& ga) {
        for (int r = 0; r < rows; ++r) {
          const S* grow = g.data.data() + size_t(r) * (na + nb);
          S* garow = ga.row(r);
          for (int j = 0; j < na; ++j) garow[j] += grow[j];
        }
      });
      t.acc(b, [&](TensorT<S>& gb) {
        for (int r = 0; r < rows; ++r) {
          const S* grow = g.data.data() + size_t(r) * (na + nb) + na;
          S* gbrow = gb.row(r);
          for (int j = 0; j < nb; ++j) gbrow[j] += grow[j];
        }
      });
    });
  }

  Index slice_rows(Index x, int start, int len) {
    const int n = val(x).cols();
    check(start >= 0 && start + len <= val(x).rows(), "slice_rows: out of range");
    TensorT<S> out({len, n});
    std::copy(val(x).row(start), val(x).row(start) + size_t(len) * n,
              out.data.begin());
    return emit(std::move(out), {x}, [x, start, len, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        S* dst = gx.row(start);
        for (size_t i = 0; i < size_t(len) * n; ++i) dst[i] += g.data[i];
      });
    });
  }

  Index slice_cols(Index x, int start, int len) {
    const int rows = val(x).rows(), n = val(x).cols();
    check(start >= 0 && start + len <= n, "slice_cols: out of range");
    TensorT<S> out({rows, len});
    for (int r = 0; r < rows; ++r)
      std::copy(val(x).row(r) + start, val(x).row(r) + start + len, out.row(r));
    return emit(std::move(out), {x}, [x, start, len, rows, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          const S* grow = g.data.data() + size_t(r) * len;
          S* gxr = gx.row(r) + start;
          for (int j = 0; j < len; ++j) gxr[j] += grow[j];
        }
      });
    });
  }

  Index gather_rows(Index x, std::vector<int> idx) {
    const int n = val(x).cols();
    const int rows = val(x).rows();
    TensorT<S> out({int(idx.size()), n});
    for (size_t i = 0; i < idx.size(); ++i) {
      check(idx[i] >= 0 && idx[i] < rows, "gather_rows: index out of range");
      std::copy(val(x).row(idx[i]), val(x).row(idx[i]) + n, out.row(int(i)));
    }
    return emit(std::move(out), {x}, [x, idx = std::move(idx), n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (size_t i = 0; i < idx.size(); ++i) {
          const S* grow = g.data.data() + i * n;
          S* gxr = gx.row(idx[i]);
          for (int j = 0; j < n; ++j) gxr[j] += grow[j];
        }
      });
    });
  }

  // Replicate a single-row tensor t times.
  Index repeat_row(Index x, int times) {
    const int n = int(val(x).numel());
    check(val(x).rows() == 1 || val(x).ndim() == 1, "repeat_row: expects one row");
    TensorT<S> out({times, n});
    for (int r = 0; r < times; ++r)
      std::copy(val(x).data.begin(), val(x).data.end(), out.row(r));
    return emit(std::move(out), {x}, [x, times, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < times; ++r) {
          const S* grow = g.data.data() + size_t(r) * n;
          for (int j = 0; j < n; ++j) gx.data[size_t(j)] += grow[j];
        }
      });
    });
  }

  // ---- grouped pooling (PointNet) ----

  // x ((g*k) x n) -> (g x n), column-wise max within each consecutive
  // group of k rows. First-occurrence argmax takes the gradient.
  Index group_max(Index x, int k) {
    const int n = val(x).cols();
    const int total = val(x).rows();
    check(k >= 1 && total % k == 0, "group_max: rows not divisible by group");
    const int groups = total / k;
    TensorT<S> out({groups, n});
    std::vector<int> arg(size_t(groups) * n);
    for (int gi = 0; gi < groups; ++gi) {
      S* orow = out.row(gi);
      int* arow = arg.data() + size_t(gi) * n;
      const S* first = val(x).row(gi * k);
      for (int j = 0; j < n; ++j) {
        orow[j] = first[j];
        arow[j] = gi * k;
      }
      for (int r = 1; r < k; ++r) {
        const S* xr = val(x).row(gi * k + r);
        for (int j = 0; j < n; ++j) {
          if (xr[j] > orow[j]) {
            orow[j] = xr[j];
            arow[j] = gi * k + r;
          }
        }
      }
    }
    return emit(std::move(out), {x},
                [x, groups, n, arg = std::move(arg)](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int gi = 0; gi < groups; ++gi) {
          const S* grow = g.data.data() + size_t(gi) * n;
          const int* arow = arg.data() + size_t(gi) * n;
          for (int j = 0; j < n; ++j) gx.at(arow[j], j) += grow[j];
        }
      });
    });
  }

  // x (g x n) -> ((g*k) x n), each group's row replicated k times.
  Index group_broadcast(Index x, int k) {
    const int n = val(x).cols(), groups = val(x).rows();
    TensorT<S> out({groups * k, n});
    for (int gi = 0; gi < groups; ++gi)
      for (int r = 0; r < k; ++r)
        std::copy(val(x).row(gi), val(x).row(gi) + n, out.row(gi * k + r));
    return emit(std::move(out), {x}, [x, groups, k, n](Tape& t) {
      const auto& g = t.out_grad();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int gi = 0; gi < groups; ++gi) {
          S* gxr = gx.row(gi);
          for (int r = 0; r < k; ++r) {
            const S* grow = g.data.data() + size_t(gi * k + r) * n;
            for (int j = 0; j < n; ++j) gxr[j] += grow[j];
          }
        }
      });
    });
  }

  // ---- norms, logs, reductions ----

  Index row_l2_normalize(Index x, S eps = S(1e-12)) {
    const int rows = val(x).rows(), n = val(x).cols();
    TensorT<S> out({rows, n});
    std::vector<S> norms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      const S* xr = val(x).row(r);
      S ss = S(0);
      for (int j = 0; j < n; ++j) ss += xr[j] * xr[j];
      const S nm = std::max(std::sqrt(ss), eps);
      norms[size_t(r)] = nm;
      S* orow = out.row(r);
      for (int j = 0; j < n; ++j) orow[j] = xr[j] / nm;
    }
    Index id = emit(std::move(out), {x},
                    [x, rows, n, norms = std::move(norms)](Tape& t) {
      const auto& g = t.out_grad();
      const auto& y = t.cur_val();
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          const S* yr = y.row(r);
          const S* grow = g.data.data() + size_t(r) * n;
          S* gxr = gx.row(r);
          S dot = S(0);
          for (int j = 0; j < n; ++j) dot += grow[j] * yr[j];
          const S inv = S(1) / norms[size_t(r)];
          for (int j = 0; j < n; ++j) gxr[j] += (grow[j] - yr[j] * dot) * inv;
        }
      });
    });
    return id;
  }

  // Per-row Euclidean norm, clamped from below; clamped rows pass no
  // gradient. Output is rank-1 of length rows.
  Index row_norms(Index x, S clamp) {
    const int rows = val(x).rows(), n = val(x).cols();
    TensorT<S> out({rows});
    std::vector<uint8_t> clamped(size_t(rows), 0);
    for (int r = 0; r < rows; ++r) {
      const S* xr = val(x).row(r);
      S ss = S(0);
      for (int j = 0; j < n; ++j) ss += xr[j] * xr[j];
      const S nm = std::sqrt(ss);
      if (nm < clamp) {
        out.data[size_t(r)] = clamp;
        clamped[size_t(r)] = 1;
      } else {
        out.data[size_t(r)] = nm;
      }
    }
    return emit(std::move(out), {x},
                [x, rows, n, clamped = std::move(clamped)](Tape& t) {
      const auto& g = t.out_grad();
      const auto& y = t.cur_val();
      const auto& xv = t.val(x);
      t.acc(x, [&](TensorT<S>& gx) {
        for (int r = 0; r < rows; ++r) {
          if (clamped[size_t(r)]) continue;
          const S coef = g.data[size_t(r)] / y.data[size_t(r)];
          const S* xr = xv.row(r);
          S* gxr = gx.row(r);
          for (int j = 0; j < n; ++j) gxr[j] += coef * xr[j];
        }
      });
    });
  }

  Index log_elem(Index x) {
    TensorT<S> out = val(x);
    for (auto& v : out.data) v = std::log(v);
    return emit(std::move(out), {x}, [x](Tape& t) {
      const auto& g = t.out_grad();
      const auto& xv = t.val(x);
      t.acc(x, [&](TensorT<S>& gx) {
        for (size_t i = 0; i < g.data.size(); ++i)
          gx.data[i] += g.data[i] / xv.data[i];
      });
    });
  }

  Index sum_all(Index x) {
    double s = 0.0;
    for (S v : val(x).data) s += double(v);
    TensorT<S> out({1});
    out.data[0] = S(s);
    return emit(std::move(out), {x}, [x](Tape& t) {
      const S g = t.out_grad().data[0];
      t.acc(x, [&](TensorT<S>& gx) {
        for (auto& v : gx.data) v += g;
      });
    });
  }

  Index mean_all(Index x) {
    const S inv = S(1) / S(val(x).numel());
    return scale(sum_all(x), inv);
  }

  // Scalar sum of x weighted by a constant tensor (cross-entropy against
  // fixed teacher targets).
  Index weighted_sum(Index x, TensorT<S> w) {
    check(val(x).same_shape(w), "weighted_sum: shape mismatch");
    double s = 0.0;
    const auto& xv = val(x);
    for (size_t i = 0; i < w.data.size(); ++i)
      s += double(xv.data[i]) * double(w.data[i]);
    TensorT<S> out({1});
    out.data[0] = S(s);
    return emit(std::move(out), {x}, [x, w = std::move(w)](Tape& t) {
      const S g = t.out_grad().data[0];
      t.acc(x, [&](TensorT<S>& gx) {
        for (size_t i = 0; i < w.data.size(); ++i)
          gx.data[i] += g * w.data[i];
      });
    });
  }

  // Mean smooth-L1 against a constant target: 0.5 d^2/beta for |d| < beta,
  // |d| - 0.5 beta otherwise.
  Index smooth_l1_mean(Index x, TensorT<S> target, S beta) {
    check(val(x).same_shape(target), "smooth_l1_mean: shape mismatch");
    const auto& xv = val(x);
    double s = 0.0;
    for (size_t i = 0; i < target.data.size(); ++i) {
      const double d = double(xv.data[i]) - double(target.data[i]);
      const double ad = std::abs(d);
      s += ad < double(beta) ? 0.5 * d * d / double(beta) : ad - 0.5 * double(beta);
    }
    const S invn = S(1) / S(xv.numel());
    TensorT<S> out({1});
    out.data[0] = S(s) * invn;
    return emit(std::move(out), {x},
                [x, target = std::move(target), beta, invn](Tape& t) {
      const S g = t.out_grad().data[0] * invn;
      const auto& xv2 = t.val(x);
      t.acc(x, [&](TensorT<S>& gx) {
        for (size_t i = 0; i < target.data.size(); ++i) {
          const S d = xv2.data[i] - target.data[i];
          const S dd = std::abs(d) < beta ? d / beta : (d > S(0) ? S(1) : S(-1));
          gx.data[i] += g * dd;
        }
      });
    });
  }

  // ---- backward ----

  void backward(Index loss) {
    check(val(loss).numel() == 1, "backward: loss must be scalar");
    TensorT<S> one({1});
    one.data[0] = S(1);
    std::vector<std::pair<Index, TensorT<S>>> seeds;
    seeds.emplace_back(loss, std::move(one));
    backward_seeded(seeds);
  }

  // Seeds output gradients on arbitrary nodes before the reverse sweep.
  // Used to inject batch-level loss terms (KoLeo) into per-sample graphs.
  void backward_seeded(const std::vector<std::pair<Index, TensorT<S>>>& seeds) {
    check(!seeds.empty(), "backward: no seeds");
    Index top = -1;
    for (const auto& [idx, g] : seeds) {
      Node& nd = *nodes_[size_t(idx)];
      check(nd.needs_grad,
            "backward: seeded node does not depend on any gradient input");
      check(nd.grad.same_shape(g), "backward: seed gradient shape mismatch");
      for (size_t i = 0; i < g.data.size(); ++i) nd.grad.data[i] += g.data[i];
      nd.touched = true;
      top = std::max(top, idx);
    }
    for (Index i = top; i >= 0; --i) {
      Node& nd = *nodes_[size_t(i)];
      if (!nd.needs_grad || !nd.touched || !nd.back) continue;
      cur_ = i;
      nd.back(*this);
    }
  }

 private:
  template <typename F>
  Index emit(TensorT<S> out, std::initializer_list<Index> parents, F&& back) {
    bool ng = false;
    for (Index p : parents) ng = ng || nodes_[size_t(p)]->needs_grad;
    Node n;
    n.val = std::move(out);
    n.needs_grad = ng;
    if (ng) {
      n.grad = TensorT<S>::zeros(n.val.shape);
      n.back = std::forward<F>(back);
    }
    nodes_.push_back(std::make_unique<Node>(std::move(n)));
    return Index(nodes_.size()) - 1;
  }

  // Accumulate into a parent's gradient if it participates in autodiff.
  template <typename F>
  void acc(Index parent, F&& body) {
    Node& p = *nodes_[size_t(parent)];
    if (!p.needs_grad) return;
    p.touched = true;
    body(p.grad);
  }

  const TensorT<S>& out_grad() const { return nodes_[size_t(cur_)]->grad; }
  const TensorT<S>& cur_val() const { return nodes_[size_t(cur_)]->val; }

  static S gelu_fwd(S x) {
    return S(0.5) * x * (S(1) + S(std::erf(double(x) * 0.7071067811865476)));
  }
  static S gelu_grad(S x) {
    const double xd = double(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
    return S(cdf + xd * pdf);
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  Index cur_ = -1;
};

template <typename S>
using Var = typename Tape<S>::Index;

}  // namespace asymdsd
