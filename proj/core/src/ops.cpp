#include "vitscope/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace vitscope::ops {
namespace {

void require_finite(const char* op, const Tensor& t) {
  if (!all_finite(t.data())) {
    throw NonFiniteError(std::string(op) + ": non-finite input of shape " +
                         shape_str(t.shape()));
  }
}

[[noreturn]] void shape_fail(const char* op, const std::string& what,
                             const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": " + what + " " + shape_str(a) +
                   " vs " + shape_str(b));
}

// Number of times `b` repeats inside `a` under suffix broadcasting, or 0 when
// the shapes do not conform.
std::size_t broadcast_repeats(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return 0;
  if (!std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size()))) {
    return 0;
  }
  return shape_numel(a) / shape_numel(b);
}

Tensor result(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

bool wants_grad(const Tape& tape, std::initializer_list<const Tensor*> ins) {
  if (!tape.recording()) return false;
  return std::any_of(ins.begin(), ins.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

}  // namespace

namespace kernels {

void gemm(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n,
          std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);

  // The inner loop always runs over contiguous rows of B and C so that it
  // vectorizes; a transposed B is copied into row-major order first.
  std::vector<double> scratch;
  if (transpose_b) {
    scratch.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
    }
    b = scratch.data();
  }

  if (!transpose_a) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double api = a[p * m + i];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
      }
    }
  }
}

}  // namespace kernels

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_a,
              bool transpose_b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != bs.size() || (as.size() != 2 && as.size() != 3)) {
    shape_fail("matmul", "operands must both be 2-d or both 3-d, got", as, bs);
  }
  const std::size_t nd = as.size();
  const std::size_t batch = nd == 3 ? as[0] : 1;
  if (nd == 3 && bs[0] != batch) shape_fail("matmul", "batch mismatch", as, bs);
  const std::size_t ar = as[nd - 2], ac = as[nd - 1];
  const std::size_t br = bs[nd - 2], bc = bs[nd - 1];
  const std::size_t m = transpose_a ? ac : ar;
  const std::size_t k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br;
  const std::size_t n = transpose_b ? br : bc;
  if (k != kb) shape_fail("matmul", "inner dimensions differ", as, bs);
  require_finite("matmul", a);
  require_finite("matmul", b);

  Shape out_shape = nd == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(transpose_a, transpose_b, m, n, k, pa + i * m * k,
                  pb + i * k * n, out.data() + i * m * n, false);
  }
  const bool rg = wants_grad(tape, {&a, &b});
  Tensor y = result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    tape.record("matmul", {a, b}, y,
                [a, b, y, batch, m, n, k, transpose_a, transpose_b]() {
      const double* dc = y.grad().data();
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      const std::size_t sa = m * k, sb = k * n, sc = m * n;
      if (a.requires_grad()) {
        double* da = a.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          const double* g = dc + i * sc;
          const double* bb = pb + i * sb;
          double* d = da + i * sa;
          if (!transpose_a) {
            kernels::gemm(false, !transpose_b, m, k, n, g, bb, d, true);
          } else {
            kernels::gemm(transpose_b, true, k, m, n, bb, g, d, true);
          }
        }
      }
      if (b.requires_grad()) {
        double* db = b.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          const double* g = dc + i * sc;
          const double* aa = pa + i * sa;
          double* d = db + i * sb;
          if (!transpose_b) {
            kernels::gemm(!transpose_a, false, k, n, m, aa, g, d, true);
          } else {
            kernels::gemm(true, transpose_a, n, k, m, g, aa, d, true);
          }
        }
      }
    });
  }
  return y;
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, Binary kind,
              const char* name) {
  const std::size_t repeats = broadcast_repeats(a.shape(), b.shape());
  if (repeats == 0) shape_fail(name, "shapes do not broadcast", a.shape(), b.shape());
  require_finite(name, a);
  require_finite(name, b);
  const std::size_t period = b.numel();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < repeats; ++r) {
    const std::size_t base = r * period;
    for (std::size_t j = 0; j < period; ++j) {
      const double x = av[base + j];
      const double z = bv[j];
      out[base + j] = kind == Binary::add ? x + z
                      : kind == Binary::sub ? x - z
                                            : x * z;
    }
  }
  const bool rg = wants_grad(tape, {&a, &b});
  Tensor y = result(a.shape(), std::move(out), rg);
  if (rg) {
    tape.record(name, {a, b}, y, [a, b, y, kind, repeats, period]() {
      const auto g = y.grad();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        if (kind == Binary::mul) {
          const auto bv = b.data();
          for (std::size_t r = 0; r < repeats; ++r) {
            for (std::size_t j = 0; j < period; ++j) {
              da[r * period + j] += g[r * period + j] * bv[j];
            }
          }
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        const auto av = a.data();
        for (std::size_t r = 0; r < repeats; ++r) {
          for (std::size_t j = 0; j < period; ++j) {
            const double gi = g[r * period + j];
            db[j] += kind == Binary::add   ? gi
                     : kind == Binary::sub ? -gi
                                           : gi * av[r * period + j];
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, Binary::add, "add");
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, Binary::sub, "sub");
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary(tape, a, b, Binary::mul, "mul");
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  require_finite("scale", a);
  if (!std::isfinite(factor)) throw NonFiniteError("scale: non-finite factor");
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  const bool rg = wants_grad(tape, {&a});
  Tensor y = result(a.shape(), std::move(out), rg);
  if (rg) {
    tape.record("scale", {a}, y, [a, y, factor]() {
      const auto g = y.grad();
      auto da = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
    });
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& a) {
  require_finite("sum", a);
  const auto av = a.data();
  const double total = std::accumulate(av.begin(), av.end(), 0.0);
  const bool rg = wants_grad(tape, {&a});
  Tensor y = Tensor::scalar(total, rg);
  if (rg) {
    tape.record("sum", {a}, y, [a, y]() {
      const double g = y.grad()[0];
      for (auto& d : a.mutable_grad()) d += g;
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& a) {
  require_finite("mean", a);
  const auto av = a.data();
  const double inv = 1.0 / static_cast<double>(av.size());
  const double total = std::accumulate(av.begin(), av.end(), 0.0);
  const bool rg = wants_grad(tape, {&a});
  Tensor y = Tensor::scalar(total * inv, rg);
  if (rg) {
    tape.record("mean", {a}, y, [a, y, inv]() {
      const double g = y.grad()[0] * inv;
      for (auto& d : a.mutable_grad()) d += g;
    });
  }
  return y;
}

Tensor layer_norm(Tape& tape, const Tensor& x, double eps) {
  require_finite("layer_norm", x);
  if (!(eps >= 0.0)) throw std::invalid_argument("layer_norm: eps must be >= 0");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    if (var + eps == 0.0) {
      throw NonFiniteError("layer_norm: zero variance row with eps = 0");
    }
    const double s = 1.0 / std::sqrt(var + eps);
    rstd[r] = s;
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = (row[j] - mu) * s;
  }
  const bool rg = wants_grad(tape, {&x});
  Tensor y = result(x.shape(), std::move(out), rg);
  if (rg) {
    tape.record("layer_norm", {x}, y,
                [x, y, rstd = std::move(rstd), rows, width]() {
      const auto g = y.grad();
      const auto yv = y.data();
      auto dx = x.mutable_grad();
      const double inv_w = 1.0 / static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * width;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          mg += g[base + j];
          mgy += g[base + j] * yv[base + j];
        }
        mg *= inv_w;
        mgy *= inv_w;
        for (std::size_t j = 0; j < width; ++j) {
          dx[base + j] += rstd[r] * (g[base + j] - mg - yv[base + j] * mgy);
        }
      }
    });
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  require_finite("softmax", x);
  const auto& s = x.shape();
  const int nd = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) {
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < nd; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::size_t len = s[static_cast<std::size_t>(ax)];
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = xv[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] *= inv;
    }
  }
  const bool rg = wants_grad(tape, {&x});
  Tensor y = result(s, std::move(out), rg);
  if (rg) {
    tape.record("softmax", {x}, y, [x, y, outer, inner, len]() {
      const auto g = y.grad();
      const auto yv = y.data();
      auto dx = x.mutable_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * len * inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            dot += g[base + i * inner] * yv[base + i * inner];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t idx = base + i * inner;
            dx[idx] += yv[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  require_finite("gelu", x);
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const bool rg = wants_grad(tape, {&x});
  Tensor y = result(x.shape(), std::move(out), rg);
  if (rg) {
    tape.record("gelu", {x}, y, [x, y]() {
      const auto g = y.grad();
      const auto xv = x.data();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double u = kC * (v + kA * v * v * v);
        const double th = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * v * v);
        const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        dx[i] += g[i] * d;
      }
    });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("cross_entropy: logits must be (batch, classes), got " +
                     shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(logits.shape()));
  }
  require_finite("cross_entropy", logits);
  const auto lv = logits.data();
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = lv.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(row[c] - log_z);
    }
    loss += log_z - row[static_cast<std::size_t>(label)];
  }
  loss /= static_cast<double>(batch);
  const bool rg = wants_grad(tape, {&logits});
  Tensor y = Tensor::scalar(loss, rg);
  if (rg) {
    std::vector<int> owned(labels.begin(), labels.end());
    tape.record("cross_entropy", {logits}, y,
                [logits, y, probs = std::move(probs), owned = std::move(owned),
                 batch, classes]() {
      const double g = y.grad()[0] / static_cast<double>(batch);
      auto dl = logits.mutable_grad();
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot =
              static_cast<std::size_t>(owned[r]) == c ? 1.0 : 0.0;
          dl[r * classes + c] += g * (probs[r * classes + c] - onehot);
        }
      }
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "element count differs", x.shape(), shape);
  }
  require_finite("reshape", x);
  const bool rg = wants_grad(tape, {&x});
  const auto xv = x.data();
  Tensor y = result(std::move(shape), std::vector<double>(xv.begin(), xv.end()), rg);
  if (rg) {
    tape.record("reshape", {x}, y, [x, y]() {
      const auto g = y.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return y;
}

Tensor permute(Tape& tape, const Tensor& x, std::vector<std::size_t> order) {
  const auto& s = x.shape();
  const std::size_t nd = s.size();
  {
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expect(nd);
    std::iota(expect.begin(), expect.end(), std::size_t{0});
    if (sorted != expect) {
      shape_fail("permute", "order is not a permutation of the axes of", s,
                 Shape(order.begin(), order.end()));
    }
  }
  require_finite("permute", x);
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = s[order[i]];
  const auto in_strides = strides_of(s);
  // Source offset for each destination element, in destination order.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < nd; ++i) off += idx[i] * in_strides[order[i]];
    src[flat] = off;
    for (std::size_t i = nd; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  const bool rg = wants_grad(tape, {&x});
  Tensor y = result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    tape.record("permute", {x}, y, [x, y, src = std::move(src)]() {
      const auto g = y.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] += g[i];
    });
  }
  return y;
}

Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t begin,
             std::size_t end) {
  const auto& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") on axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(s));
  }
  require_finite("slice", x);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const std::size_t width = end - begin;
  Shape out_shape = s;
  out_shape[axis] = width;
  const auto xv = x.data();
  std::vector<double> out(outer * width * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* from = xv.data() + (o * len + begin) * inner;
    std::copy(from, from + width * inner, out.data() + o * width * inner);
  }
  const bool rg = wants_grad(tape, {&x});
  Tensor y = result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    tape.record("slice", {x}, y,
                [x, y, outer, inner, len, width, begin]() {
      const auto g = y.grad();
      auto dx = x.mutable_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t dst = (o * len + begin) * inner;
        const std::size_t from = o * width * inner;
        for (std::size_t i = 0; i < width * inner; ++i) dx[dst + i] += g[from + i];
      }
    });
  }
  return y;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(first));
  }
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) {
      if (i != axis && ps[i] != first[i]) ok = false;
    }
    if (!ok) shape_fail("concat", "incompatible shapes", first, ps);
    require_finite("concat", p);
    total += ps[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const std::size_t len = p.shape()[axis];
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * len * inner, pv.data() + (o + 1) * len * inner,
                out.data() + (o * total + at) * inner);
    }
    at += len;
  }
  bool rg = false;
  if (tape.recording()) {
    rg = std::any_of(parts.begin(), parts.end(),
                     [](const Tensor& p) { return p.requires_grad(); });
  }
  Tensor y = result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    tape.record("concat", parts, y,
                [parts, y, offsets = std::move(offsets), outer, inner, axis,
                 total]() {
      const auto g = y.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        auto& p = parts[k];
        if (!p.requires_grad()) continue;
        const std::size_t len = p.shape()[axis];
        auto dp = p.mutable_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t from = (o * total + offsets[k]) * inner;
          for (std::size_t i = 0; i < len * inner; ++i) {
            dp[o * len * inner + i] += g[from + i];
          }
        }
      }
    });
  }
  return y;
}

}  // namespace vitscope::ops
