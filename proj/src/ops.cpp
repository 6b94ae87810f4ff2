#include "gwmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "gwmoe/errors.hpp"

namespace gwmoe::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    record_op("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
        const auto dy = out.grad();
        if (a.requires_grad()) {
            auto da = a.grad_mut();
            const auto bv = b.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += dy[i * n + j] * bv[p * n + j];
                    da[i * k + p] += s;
                }
        }
        if (b.requires_grad()) {
            auto db = b.grad_mut();
            const auto av = a.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) db[p * n + j] += x * dy[i * n + j];
                }
        }
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    record_op("add", {a, b}, out, [a, b, out]() mutable {
        const auto dy = out.grad();
        for (const Tensor* t : {&a, &b}) {
            if (!t->requires_grad()) continue;
            auto g = t->grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
        }
    });
    return out;
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    require_rank(a, 2, "add_row");
    require_rank(bias, 1, "add_row");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (bias.dim(0) != n)
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " vs rows of " + shape_str(a.shape()));
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data(), bv = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) o[i * n + j] = av[i * n + j] + bv[j];
    record_op("add_row", {a, bias}, out, [a, bias, out, m, n]() mutable {
        const auto dy = out.grad();
        if (a.requires_grad()) {
            auto g = a.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
        }
        if (bias.requires_grad()) {
            auto g = bias.grad_mut();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    record_op("mul", {a, b}, out, [a, b, out]() mutable {
        const auto dy = out.grad();
        if (a.requires_grad()) {
            auto g = a.grad_mut();
            const auto bv = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto g = b.grad_mut();
            const auto av = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * av[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
    record_op("scale", {a}, out, [a, out, factor]() mutable {
        const auto dy = out.grad();
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * factor;
    });
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double x = av[i];
        o[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    }
    record_op("gelu", {a}, out, [a, out]() mutable {
        const auto dy = out.grad();
        const auto av = a.data();
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = av[i];
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            g[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
        }
    });
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const auto& s = x.shape();
    if (s.empty()) throw DimensionError("softmax: scalar input");
    const int r = static_cast<int>(s.size());
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    require_finite(x.data(), "softmax input");
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[i];
    for (int i = ax + 1; i < r; ++i) inner *= s[i];
    const std::size_t n = s[ax];

    Tensor out(s);
    auto o = out.data();
    const auto xv = x.data();
    for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = a * n * inner + c;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(xv[base + i * inner] - mx);
                o[base + i * inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < n; ++i) o[base + i * inner] /= total;
        }
    record_op("softmax", {x}, out, [x, out, outer, inner, n]() mutable {
        const auto dy = out.grad();
        const auto y = out.data();
        auto g = x.grad_mut();
        for (std::size_t a = 0; a < outer; ++a)
            for (std::size_t c = 0; c < inner; ++c) {
                const std::size_t base = a * n * inner + c;
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += dy[base + i * inner] * y[base + i * inner];
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = base + i * inner;
                    g[j] += y[j] * (dy[j] - dot);
                }
            }
    });
    return out;
}

Tensor log(const Tensor& a) {
    Tensor out(a.shape());
    auto o = out.data();
    const auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (!(av[i] > 0.0)) throw NumericError("log: non-positive input at flat index " + std::to_string(i));
        o[i] = std::log(av[i]);
    }
    record_op("log", {a}, out, [a, out]() mutable {
        const auto dy = out.grad();
        const auto av = a.data();
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] / av[i];
    });
    return out;
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    Tensor out = Tensor::scalar(total);
    record_op("sum", {a}, out, [a, out]() mutable {
        const double dy = out.grad()[0];
        for (double& g : a.grad_mut()) g += dy;
    });
    return out;
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean of empty tensor");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double total = 0.0;
    for (double v : a.data()) total += v;
    Tensor out = Tensor::scalar(total * inv);
    record_op("mean", {a}, out, [a, out, inv]() mutable {
        const double dy = out.grad()[0] * inv;
        for (double& g : a.grad_mut()) g += dy;
    });
    return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(vocab));
    Tensor out({ids.size(), d});
    auto o = out.data();
    const auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(i * d));
    std::vector<int> ids_copy(ids.begin(), ids.end());
    record_op("embedding", {table}, out, [table, out, ids_copy, d]() mutable {
        const auto dy = out.grad();
        auto g = table.grad_mut();
        for (std::size_t i = 0; i < ids_copy.size(); ++i) {
            const std::size_t row = static_cast<std::size_t>(ids_copy[i]);
            for (std::size_t j = 0; j < d; ++j) g[row * d + j] += dy[i * d + j];
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank(x, 2, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    Tensor out({m, n});
    std::vector<double> xhat(m * n), inv_std(m);
    auto o = out.data();
    const auto xv = x.data(), gv = gain.data(), bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = xv[i * n + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xv[i * n + j] - mu) * inv_std[i];
            xhat[i * n + j] = h;
            o[i * n + j] = h * gv[j] + bv[j];
        }
    }
    record_op("layer_norm", {x, gain, bias}, out,
              [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n]() mutable {
                  const auto dy = out.grad();
                  const auto gv = gain.data();
                  if (gain.requires_grad()) {
                      auto g = gain.grad_mut();
                      for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j] * xhat[i * n + j];
                  }
                  if (bias.requires_grad()) {
                      auto g = bias.grad_mut();
                      for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
                  }
                  if (x.requires_grad()) {
                      auto g = x.grad_mut();
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < m; ++i) {
                          double mean_d = 0.0, mean_dx = 0.0;
                          for (std::size_t j = 0; j < n; ++j) {
                              const double dh = dy[i * n + j] * gv[j];
                              mean_d += dh;
                              mean_dx += dh * xhat[i * n + j];
                          }
                          mean_d *= inv_n;
                          mean_dx *= inv_n;
                          for (std::size_t j = 0; j < n; ++j) {
                              const double dh = dy[i * n + j] * gv[j];
                              g[i * n + j] += inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
                          }
                      }
                  }
              });
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (targets.size() != batch)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(batch) + " rows");
    if (batch == 0) throw DimensionError("cross_entropy: empty batch");
    for (std::size_t i = 0; i < batch; ++i)
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= classes)
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    require_finite(logits.data(), "cross_entropy logits");
    const auto z = logits.data();
    std::vector<double> probs(batch * classes);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = z.data() + i * classes;
        const double mx = *std::max_element(row, row + classes);
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double e = std::exp(row[c] - mx);
            probs[i * classes + c] = e;
            s += e;
        }
        for (std::size_t c = 0; c < classes; ++c) probs[i * classes + c] /= s;
        total += (mx + std::log(s)) - row[targets[i]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    std::vector<int> tgt(targets.begin(), targets.end());
    record_op("cross_entropy", {logits}, out,
              [logits, out, probs = std::move(probs), tgt = std::move(tgt), batch, classes]() mutable {
                  const double dy = out.grad()[0] / static_cast<double>(batch);
                  auto g = logits.grad_mut();
                  for (std::size_t i = 0; i < batch; ++i)
                      for (std::size_t c = 0; c < classes; ++c) {
                          const double onehot = static_cast<int>(c) == tgt[i] ? 1.0 : 0.0;
                          g[i * classes + c] += dy * (probs[i * classes + c] - onehot);
                      }
              });
    return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len, std::size_t heads,
                 bool causal) {
    require_rank(q, 2, "attention");
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t rows = q.dim(0), d = q.dim(1);
    if (seq_len == 0 || rows % seq_len != 0)
        throw DimensionError("attention: " + std::to_string(rows) + " rows not a multiple of seq_len " +
                             std::to_string(seq_len));
    if (heads == 0 || d % heads != 0)
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                             " heads");
    const std::size_t batch = rows / seq_len, dh = d / heads, T = seq_len;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out({rows, d});
    // probabilities for backward: [batch, heads, T, T]
    std::vector<double> probs(batch * heads * T * T, 0.0);
    const auto qv = q.data(), kv = k.data(), vv = v.data();
    auto o = out.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs.data() + ((b * heads + h) * T) * T;
            for (std::size_t i = 0; i < T; ++i) {
                const std::size_t span_end = causal ? i + 1 : T;
                const double* qi = qv.data() + (b * T + i) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < span_end; ++j) {
                    const double* kj = kv.data() + (b * T + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt;
                    P[i * T + j] = s;
                    mx = std::max(mx, s);
                }
                double total = 0.0;
                for (std::size_t j = 0; j < span_end; ++j) {
                    const double e = std::exp(P[i * T + j] - mx);
                    P[i * T + j] = e;
                    total += e;
                }
                double* oi = o.data() + (b * T + i) * d + h * dh;
                for (std::size_t j = 0; j < span_end; ++j) {
                    P[i * T + j] /= total;
                    const double* vj = vv.data() + (b * T + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += P[i * T + j] * vj[c];
                }
            }
        }
    record_op("attention", {q, k, v}, out,
              [q, k, v, out, probs = std::move(probs), batch, heads, T, d, dh, inv_sqrt, causal]() mutable {
                  const auto dy = out.grad();
                  const auto qv = q.data(), kv = k.data(), vv = v.data();
                  auto dq = q.requires_grad() ? q.grad_mut() : std::span<double>{};
                  auto dk = k.requires_grad() ? k.grad_mut() : std::span<double>{};
                  auto dv = v.requires_grad() ? v.grad_mut() : std::span<double>{};
                  std::vector<double> dP(T);
                  for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t h = 0; h < heads; ++h) {
                          const double* P = probs.data() + ((b * heads + h) * T) * T;
                          for (std::size_t i = 0; i < T; ++i) {
                              const std::size_t span_end = causal ? i + 1 : T;
                              const double* doi = dy.data() + (b * T + i) * d + h * dh;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < span_end; ++j) {
                                  const std::size_t rj = (b * T + j) * d + h * dh;
                                  double s = 0.0;
                                  for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vv[rj + c];
                                  dP[j] = s;
                                  dot += s * P[i * T + j];
                                  if (!dv.empty())
                                      for (std::size_t c = 0; c < dh; ++c) dv[rj + c] += P[i * T + j] * doi[c];
                              }
                              const std::size_t ri = (b * T + i) * d + h * dh;
                              for (std::size_t j = 0; j < span_end; ++j) {
                                  const double ds = P[i * T + j] * (dP[j] - dot) * inv_sqrt;
                                  const std::size_t rj = (b * T + j) * d + h * dh;
                                  if (!dq.empty())
                                      for (std::size_t c = 0; c < dh; ++c) dq[ri + c] += ds * kv[rj + c];
                                  if (!dk.empty())
                                      for (std::size_t c = 0; c < dh; ++c) dk[rj + c] += ds * qv[ri + c];
                              }
                          }
                      }
              });
    return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
    require_rank(x, 2, "gather_rows");
    const std::size_t m = x.dim(0), d = x.dim(1);
    Tensor out({idx.size(), d});
    auto o = out.data();
    const auto xv = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m) throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(m));
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<std::size_t> rows(idx.begin(), idx.end());
    record_op("gather_rows", {x}, out, [x, out, rows = std::move(rows), d]() mutable {
        const auto dy = out.grad();
        auto g = x.grad_mut();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += dy[i * d + j];
    });
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
    require_rank(x, 2, "scale_rows");
    require_rank(w, 1, "scale_rows");
    const std::size_t m = x.dim(0), d = x.dim(1);
    if (w.dim(0) != m)
        throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " for rows of " + shape_str(x.shape()));
    Tensor out({m, d});
    auto o = out.data();
    const auto xv = x.data(), wv = w.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xv[i * d + j] * wv[i];
    record_op("scale_rows", {x, w}, out, [x, w, out, m, d]() mutable {
        const auto dy = out.grad();
        if (x.requires_grad()) {
            auto g = x.grad_mut();
            const auto wv = w.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += dy[i * d + j] * wv[i];
        }
        if (w.requires_grad()) {
            auto g = w.grad_mut();
            const auto xv = x.data();
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += dy[i * d + j] * xv[i * d + j];
                g[i] += s;
            }
        }
    });
    return out;
}

Tensor scatter_add_rows(std::size_t rows, std::span<const Tensor> parts,
                        std::span<const std::vector<std::size_t>> index) {
    if (parts.size() != index.size()) throw DimensionError("scatter_add_rows: parts/index count mismatch");
    if (parts.empty()) throw DimensionError("scatter_add_rows: no parts");
    const std::size_t d = parts[0].dim(1);
    for (std::size_t p = 0; p < parts.size(); ++p) {
        require_rank(parts[p], 2, "scatter_add_rows");
        if (parts[p].dim(1) != d || parts[p].dim(0) != index[p].size())
            throw DimensionError("scatter_add_rows: part " + std::to_string(p) + " shape " +
                                 shape_str(parts[p].shape()) + " inconsistent with index");
        for (auto r : index[p])
            if (r >= rows) throw IndexError("scatter_add_rows: row " + std::to_string(r) + " of " + std::to_string(rows));
    }
    Tensor out({rows, d});
    auto o = out.data();
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto pv = parts[p].data();
        const auto& ix = index[p];
        for (std::size_t i = 0; i < ix.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) o[ix[i] * d + j] += pv[i * d + j];
    }
    std::vector<Tensor> ins(parts.begin(), parts.end());
    std::vector<std::vector<std::size_t>> ix(index.begin(), index.end());
    record_op("scatter_add_rows", ins, out, [ins, out, ix = std::move(ix), d]() mutable {
        const auto dy = out.grad();
        for (std::size_t p = 0; p < ins.size(); ++p) {
            if (!ins[p].requires_grad()) continue;
            auto g = ins[p].grad_mut();
            for (std::size_t i = 0; i < ix[p].size(); ++i)
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += dy[ix[p][i] * d + j];
        }
    });
    return out;
}

Tensor mean_pool(const Tensor& x, std::size_t seq_len) {
    require_rank(x, 2, "mean_pool");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (seq_len == 0 || rows % seq_len != 0)
        throw DimensionError("mean_pool: " + std::to_string(rows) + " rows not a multiple of " + std::to_string(seq_len));
    const std::size_t batch = rows / seq_len;
    const double inv = 1.0 / static_cast<double>(seq_len);
    Tensor out({batch, d});
    auto o = out.data();
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) o[(r / seq_len) * d + j] += xv[r * d + j] * inv;
    record_op("mean_pool", {x}, out, [x, out, rows, d, seq_len, inv]() mutable {
        const auto dy = out.grad();
        auto g = x.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dy[(r / seq_len) * d + j] * inv;
    });
    return out;
}

}  // namespace gwmoe::ops
