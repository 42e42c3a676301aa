#include "mtu/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mtu::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;
template <class T>
using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
using NodeT = detail::Node<T>;
template <class T>
using NodePtr = std::shared_ptr<NodeT<T>>;
template <class T>
using Buffer = detail::Buffer<T>;

template <class T>
bool wants_grad(const NodePtr<T>& n) {
  return n->requires_grad;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_rank(const Shape& s, std::size_t r, const char* op, const char* arg) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(r) + ", got " +
                     shape_str(s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul / linear / conv2d

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul", "lhs");
  require_rank(b.shape(), 2, "matmul", "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Buffer<T> out(m * n);
  MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
  return detail::make_result<T>(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](NodeT<T>& self) {
        CMap<T> dy(self.grad.data(), m, n);
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants_grad<T>(pa)) {
          MMap<T>(pa->ensure_grad().data(), m, k).noalias() += dy * CMap<T>(pb->value.data(), k, n).transpose();
        }
        if (wants_grad<T>(pb)) {
          MMap<T>(pb->ensure_grad().data(), k, n).noalias() += CMap<T>(pa->value.data(), m, k).transpose() * dy;
        }
      },
      "matmul");
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear", "weight");
  require(x.rank() >= 1, "linear: input must have rank >= 1");
  const auto out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.dim(-1) != in_f) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_f}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const auto rows = x.numel() / in_f;
  Buffer<T> out(rows * out_f);
  MMap<T> y(out.data(), rows, out_f);
  y.noalias() = CMap<T>(x.data().data(), rows, in_f) * CMap<T>(weight.data().data(), out_f, in_f).transpose();
  if (has_bias) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out_f);
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<NodePtr<T>> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return detail::make_result<T>(
      std::move(shape), std::move(out), std::move(parents),
      [rows, in_f, out_f](NodeT<T>& self) {
        CMap<T> dy(self.grad.data(), rows, out_f);
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        if (wants_grad<T>(px)) {
          MMap<T>(px->ensure_grad().data(), rows, in_f).noalias() += dy * CMap<T>(pw->value.data(), out_f, in_f);
        }
        if (wants_grad<T>(pw)) {
          MMap<T>(pw->ensure_grad().data(), out_f, in_f).noalias() +=
              dy.transpose() * CMap<T>(px->value.data(), rows, in_f);
        }
        if (self.parents.size() > 2 && wants_grad<T>(self.parents[2])) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(self.parents[2]->ensure_grad().data(), out_f) +=
              dy.colwise().sum();
        }
      },
      "linear");
}

namespace {

// cols: [C*kh*kw, Ho*Wo] for one image.
template <class T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi + ki) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(h) &&
                                jj < static_cast<std::ptrdiff_t>(w);
            row[oi * wo + oj] = inside ? x[(ci * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)]
                                       : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj + kj) - static_cast<std::ptrdiff_t>(pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[(ci * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)] += row[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding) {
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input channels of " + shape_str(x.shape()) + " do not match weight " +
                     shape_str(weight.shape()));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{o}) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const auto ho = h + 2 * padding - kh + 1, wo = w + 2 * padding - kw + 1;
  const auto ckk = c * kh * kw, hw = ho * wo;
  auto cols = std::make_shared<Buffer<T>>(b * ckk * hw);
  Buffer<T> out(b * o * hw);
  CMap<T> wmat(weight.data().data(), o, ckk);
  for (std::size_t bi = 0; bi < b; ++bi) {
    T* col = cols->data() + bi * ckk * hw;
    im2col(x.data().data() + bi * c * h * w, c, h, w, kh, kw, padding, ho, wo, col);
    MMap<T> y(out.data() + bi * o * hw, o, hw);
    y.noalias() = wmat * CMap<T>(col, ckk, hw);
    if (has_bias) {
      y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), o);
    }
  }
  std::vector<NodePtr<T>> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return detail::make_result<T>(
      {b, o, ho, wo}, std::move(out), std::move(parents),
      [=](NodeT<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const bool gx = wants_grad<T>(px), gw = wants_grad<T>(pw);
        const bool gb = self.parents.size() > 2 && wants_grad<T>(self.parents[2]);
        Buffer<T> dcols(gx ? ckk * hw : 0);
        for (std::size_t bi = 0; bi < b; ++bi) {
          CMap<T> dy(self.grad.data() + bi * o * hw, o, hw);
          const T* col = cols->data() + bi * ckk * hw;
          if (gw) MMap<T>(pw->ensure_grad().data(), o, ckk).noalias() += dy * CMap<T>(col, ckk, hw).transpose();
          if (gb) {
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(self.parents[2]->ensure_grad().data(), o) +=
                dy.rowwise().sum();
          }
          if (gx) {
            MMap<T>(dcols.data(), ckk, hw).noalias() = CMap<T>(pw->value.data(), o, ckk).transpose() * dy;
            col2im_add(dcols.data(), c, h, w, kh, kw, padding, ho, wo, px->ensure_grad().data() + bi * c * h * w);
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// normalization / activations

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require(x.rank() >= 1, "layer_norm: input must have rank >= 1");
  const auto d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: scale " + shape_str(gamma.shape()) + " / shift " + shape_str(beta.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / d;
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Buffer<T> out(x.numel());
  const T* xs = x.data().data();
  const T* g = gamma.data().data();
  const T* bt = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs + r * d;
    double m = 0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + eps));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>(row[j] - m) * rs;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = xh * g[j] + bt[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [rows, d, xhat, rstd](NodeT<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const T* dy = self.grad.data();
        if (wants_grad<T>(pg)) {
          auto& dg = pg->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
        }
        if (wants_grad<T>(pb)) {
          auto& db = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
        }
        if (wants_grad<T>(px)) {
          auto& dx = px->ensure_grad();
          const T* g = pg->value.data();
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[r * d + j] * g[j];
              s1 += dxh;
              s2 += dxh * (*xhat)[r * d + j];
            }
            s1 /= static_cast<double>(d);
            s2 /= static_cast<double>(d);
            const T rs = (*rstd)[r];
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[r * d + j] * g[j];
              dx[r * d + j] += static_cast<T>(rs * (dxh - s1 - (*xhat)[r * d + j] * s2));
            }
          }
        }
      },
      "layer_norm");
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.rank() >= 1, "softmax: input must have rank >= 1");
  const auto d = x.dim(-1);
  const auto rows = d ? x.numel() / d : 0;
  Buffer<T> out(x.numel());
  const T* xs = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs + r * d;
    T* y = out.data() + r * d;
    const T m = *std::max_element(row, row + d);
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(row[j] - m);
      s += y[j];
    }
    for (std::size_t j = 0; j < d; ++j) y[j] /= s;
  }
  auto result = detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [rows, d](NodeT<T>& self) {
        auto& dx = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.value.data() + r * d;
          const T* dy = self.grad.data() + r * d;
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
          for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[j] * (dy[j] - dot);
        }
      },
      "softmax");
  return result;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  const T* xs = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] > T(0) ? xs[i] : T(0);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [](NodeT<T>& self) {
        auto& px = self.parents[0];
        auto& dx = px->ensure_grad();
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (px->value[i] > T(0)) dx[i] += self.grad[i];
      },
      "relu");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = x.numel();
  Eigen::Map<const Arr> v(x.data().data(), static_cast<Eigen::Index>(n));
  // tanh(u) is kept for the backward pass.
  auto th = std::make_shared<Arr>((static_cast<T>(kGeluC) * (v + static_cast<T>(kGeluA) * v.cube())).tanh());
  Buffer<T> out(n);
  Eigen::Map<Arr>(out.data(), static_cast<Eigen::Index>(n)) = T(0.5) * v * (T(1) + *th);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [th](NodeT<T>& self) {
        auto& px = self.parents[0];
        const auto m = static_cast<Eigen::Index>(px->value.size());
        Eigen::Map<const Arr> v(px->value.data(), m), g(self.grad.data(), m);
        const Arr du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * v.square());
        Eigen::Map<Arr>(px->ensure_grad().data(), m) +=
            g * (T(0.5) * (T(1) + *th) + T(0.5) * v * (T(1) - th->square()) * du);
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// attention

template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  require_rank(q.shape(), 3, "attention", "query");
  require_rank(k.shape(), 3, "attention", "key");
  require_rank(v.shape(), 3, "attention", "value");
  check_same_shape(k.shape(), v.shape(), "attention key/value");
  const auto b = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  if (k.dim(0) != b || k.dim(2) != d) {
    throw ShapeError("attention: query " + shape_str(q.shape()) + " incompatible with key " + shape_str(k.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const auto dh = d / heads;
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto probs = std::make_shared<Buffer<T>>(b * heads * lq * lk);
  Buffer<T> out(b * lq * d);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off_q = bi * lq * d + h * dh, off_k = bi * lk * d + h * dh;
      CStrided<T> qm(q.data().data() + off_q, lq, dh, Eigen::OuterStride<>(d));
      CStrided<T> km(k.data().data() + off_k, lk, dh, Eigen::OuterStride<>(d));
      CStrided<T> vm(v.data().data() + off_k, lk, dh, Eigen::OuterStride<>(d));
      MMap<T> p(probs->data() + (bi * heads + h) * lq * lk, lq, lk);
      p.noalias() = (qm * km.transpose()) * sc;
      for (std::size_t r = 0; r < lq; ++r) {
        auto row = p.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      MStrided<T>(out.data() + off_q, lq, dh, Eigen::OuterStride<>(d)).noalias() = p * vm;
    }
  }
  return detail::make_result<T>(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [=](NodeT<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        const bool gq = wants_grad<T>(pq), gk = wants_grad<T>(pk), gv = wants_grad<T>(pv);
        RowMat<T> dp(lq, lk), ds(lq, lk);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t h = 0; h < heads; ++h) {
            const auto off_q = bi * lq * d + h * dh, off_k = bi * lk * d + h * dh;
            CStrided<T> qm(pq->value.data() + off_q, lq, dh, Eigen::OuterStride<>(d));
            CStrided<T> km(pk->value.data() + off_k, lk, dh, Eigen::OuterStride<>(d));
            CStrided<T> vm(pv->value.data() + off_k, lk, dh, Eigen::OuterStride<>(d));
            CStrided<T> dy(self.grad.data() + off_q, lq, dh, Eigen::OuterStride<>(d));
            CMap<T> p(probs->data() + (bi * heads + h) * lq * lk, lq, lk);
            if (gv) {
              MStrided<T>(pv->ensure_grad().data() + off_k, lk, dh, Eigen::OuterStride<>(d)).noalias() +=
                  p.transpose() * dy;
            }
            if (!gq && !gk) continue;
            dp.noalias() = dy * vm.transpose();
            for (std::size_t r = 0; r < lq; ++r) {
              const T dot = p.row(r).dot(dp.row(r));
              ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix() * sc;
            }
            if (gq) {
              MStrided<T>(pq->ensure_grad().data() + off_q, lq, dh, Eigen::OuterStride<>(d)).noalias() += ds * km;
            }
            if (gk) {
              MStrided<T>(pk->ensure_grad().data() + off_k, lk, dh, Eigen::OuterStride<>(d)).noalias() +=
                  ds.transpose() * qm;
            }
          }
        }
      },
      "attention");
}

// ---------------------------------------------------------------------------
// structural

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    shape[axis] += s[axis];
    chunk[p] = parts[p].numel() / outer;
  }
  const std::size_t row = std::accumulate(chunk.begin(), chunk.end(), std::size_t{0});
  Buffer<T> out(outer * row);
  std::vector<NodePtr<T>> parents;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * chunk[p], chunk[p], out.data() + o * row + off);
    off += chunk[p];
    parents.push_back(parts[p].node());
  }
  return detail::make_result<T>(
      std::move(shape), std::move(out), std::move(parents),
      [outer, row, chunk](NodeT<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
          if (wants_grad<T>(self.parents[p])) {
            auto& g = self.parents[p]->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < chunk[p]; ++j) g[o * chunk[p] + j] += self.grad[o * row + off + j];
          }
          off += chunk[p];
        }
      },
      "concat");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Buffer<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(
      std::move(shape), std::move(out), {x.node()},
      [](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

namespace {

// Flat-index map: patch layout position -> image layout position.
std::shared_ptr<std::vector<std::size_t>> patch_index(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                                                      std::size_t p) {
  const auto gh = h / p, gw = w / p, tok = c * p * p;
  auto map = std::make_shared<std::vector<std::size_t>>(b * c * h * w);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t di = 0; di < p; ++di)
            for (std::size_t dj = 0; dj < p; ++dj) {
              const auto dst = ((bi * gh + i) * gw + j) * tok + (ci * p + di) * p + dj;
              const auto src = ((bi * c + ci) * h + i * p + di) * w + j * p + dj;
              (*map)[dst] = src;
            }
  return map;
}

}  // namespace

template <class T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
  require_rank(x.shape(), 4, "patchify", "input");
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (patch == 0 || h % patch || w % patch) {
    throw ShapeError("patchify: patch " + std::to_string(patch) + " does not tile " + shape_str(x.shape()));
  }
  auto map = patch_index(b, c, h, w, patch);
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[(*map)[i]];
  return detail::make_result<T>(
      {b, (h / patch) * (w / patch), c * patch * patch}, std::move(out), {x.node()},
      [map](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
      },
      "patchify");
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& x, std::size_t channels, std::size_t height, std::size_t width,
                     std::size_t patch) {
  require_rank(x.shape(), 3, "unpatchify", "input");
  const auto b = x.dim(0);
  if (patch == 0 || height % patch || width % patch ||
      x.shape() != Shape{b, (height / patch) * (width / patch), channels * patch * patch}) {
    throw ShapeError("unpatchify: " + shape_str(x.shape()) + " is not a patch grid of [" + std::to_string(channels) +
                     ", " + std::to_string(height) + ", " + std::to_string(width) + "]");
  }
  auto map = patch_index(b, channels, height, width, patch);
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < map->size(); ++i) out[(*map)[i]] = x.data()[i];
  return detail::make_result<T>(
      {b, channels, height, width}, std::move(out), {x.node()},
      [map](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < map->size(); ++i) g[i] += self.grad[(*map)[i]];
      },
      "unpatchify");
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape prefix) {
  require_rank(table.shape(), 2, "embedding", "table");
  const auto vocab = table.dim(0), d = table.dim(1);
  if (shape_numel(prefix) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for prefix " + shape_str(prefix));
  }
  Buffer<T> out(ids.size() * d);
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " outside table " + shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  prefix.push_back(d);
  return detail::make_result<T>(
      std::move(prefix), std::move(out), {table.node()},
      [idx, d](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < idx->size(); ++r)
          for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>((*idx)[r]) * d + j] += self.grad[r * d + j];
      },
      "embedding");
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <class T, class F, class GA, class GB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, GA ga, GB gb) {
  check_same_shape(a.shape(), b.shape(), op);
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i], b.data()[i]);
  return detail::make_result<T>(
      a.shape(), std::move(out), {a.node(), b.node()},
      [ga, gb](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants_grad<T>(pa)) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga(self.grad[i], pa->value[i], pb->value[i]);
        }
        if (wants_grad<T>(pb)) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb(self.grad[i], pa->value[i], pb->value[i]);
        }
      },
      op);
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result<T>(
      a.shape(), std::move(out), {a.node()},
      [s](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
      },
      "scale");
}

template <class T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) throw ShapeError("add_broadcast: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  const auto inner = b.numel();
  const auto outer = inner ? a.numel() / inner : 0;
  Buffer<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] = a.data()[o * inner + j] + b.data()[j];
  return detail::make_result<T>(
      sa, std::move(out), {a.node(), b.node()},
      [outer, inner](NodeT<T>& self) {
        if (wants_grad<T>(self.parents[0])) {
          auto& g = self.parents[0]->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad<T>(self.parents[1])) {
          auto& g = self.parents[1]->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < inner; ++j) g[j] += self.grad[o * inner + j];
        }
      },
      "add_broadcast");
}

template <class T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& rows) {
  require_rank(rows.shape(), 2, "add_rows", "rows");
  if (x.rank() < 2 || x.dim(0) != rows.dim(0) || x.dim(-1) != rows.dim(1)) {
    throw ShapeError("add_rows: rows " + shape_str(rows.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const auto b = x.dim(0), d = x.dim(-1);
  const auto per = x.numel() / (b * d);
  Buffer<T> out(x.numel());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const auto i = (bi * per + r) * d + j;
        out[i] = x.data()[i] + rows.data()[bi * d + j];
      }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node(), rows.node()},
      [b, per, d](NodeT<T>& self) {
        if (wants_grad<T>(self.parents[0])) {
          auto& g = self.parents[0]->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad<T>(self.parents[1])) {
          auto& g = self.parents[1]->ensure_grad();
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t r = 0; r < per; ++r)
              for (std::size_t j = 0; j < d; ++j) g[bi * d + j] += self.grad[(bi * per + r) * d + j];
        }
      },
      "add_rows");
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (auto v : x.data()) s += v;
  return detail::make_result<T>(
      {}, {static_cast<T>(s)}, {x.node()},
      [](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a.shape(), b.shape(), "mse");
  require(a.numel() > 0, "mse: empty tensors");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    s += d * d;
  }
  const double n = static_cast<double>(a.numel());
  return detail::make_result<T>(
      {}, {static_cast<T>(s / n)}, {a.node(), b.node()},
      [n](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const T k = static_cast<T>(2.0 / n) * self.grad[0];
        if (wants_grad<T>(pa)) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (pa->value[i] - pb->value[i]);
        }
        if (wants_grad<T>(pb)) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (pa->value[i] - pb->value[i]);
        }
      },
      "mse");
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank(logits.shape(), 2, "cross_entropy", "logits");
  const auto m = logits.dim(0), c = logits.dim(1);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  }
  auto probs = std::make_shared<Buffer<T>>(m * c);
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double loss = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if ((*tg)[r] < 0 || static_cast<std::size_t>((*tg)[r]) >= c) throw ShapeError("cross_entropy: target out of range");
    const T* row = logits.data().data() + r * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = static_cast<T>(std::exp(row[j] - mx) / s);
    loss += std::log(s) - static_cast<double>(row[(*tg)[r]] - mx);
  }
  return detail::make_result<T>(
      {}, {static_cast<T>(loss / static_cast<double>(m))}, {logits.node()},
      [m, c, probs, tg](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T k = self.grad[0] / static_cast<T>(m);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<int>(j) == (*tg)[r] ? T(1) : T(0);
            g[r * c + j] += k * ((*probs)[r * c + j] - onehot);
          }
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// routing

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

// Sum of a small set of values in ascending order; independent of input order.
template <class T>
T sorted_sum(T* vals, std::size_t n) {
  std::sort(vals, vals + n);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += vals[i];
  return s;
}

}  // namespace

template <class T>
Tensor<T> route_weights(const Tensor<T>& logits, std::optional<std::size_t> top_k) {
  require_rank(logits.shape(), 1, "route_weights", "logits");
  const auto n = logits.dim(0);
  require(n > 0, "route_weights: no experts");
  const std::size_t k = top_k.value_or(n);
  if (k < 1 || k > n) {
    throw std::invalid_argument("route_weights: top_k " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<double> lv(logits.data().begin(), logits.data().end());
  auto sel = std::make_shared<std::vector<std::size_t>>(top_k_indices(lv, k));
  T mx = logits.data()[(*sel)[0]];
  for (auto i : *sel) mx = std::max(mx, logits.data()[i]);
  Buffer<T> out(n, T(0));
  Buffer<T> terms;
  for (auto i : *sel) {
    out[i] = std::exp(logits.data()[i] - mx);
    terms.push_back(out[i]);
  }
  const T denom = sorted_sum(terms.data(), terms.size());
  for (auto i : *sel) out[i] /= denom;
  return detail::make_result<T>(
      {n}, std::move(out), {logits.node()},
      [sel](NodeT<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        T dot = 0;
        for (auto i : *sel) dot += self.value[i] * self.grad[i];
        for (auto i : *sel) g[i] += self.value[i] * (self.grad[i] - dot);
      },
      "route_weights");
}

template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const Tensor<T>& w) {
  require_rank(w.shape(), 1, "weighted_sum", "weights");
  const auto n = w.dim(0);
  if (xs.size() != n) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs for weights " + shape_str(w.shape()));
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    if (w.data()[i] != T(0)) {
      if (!xs[i].defined()) throw ShapeError("weighted_sum: input " + std::to_string(i) + " has weight but no value");
      active.push_back(i);
    }
  }
  require(!active.empty(), "weighted_sum: all weights are zero");
  const Shape shape = xs[active[0]].shape();
  for (auto i : active) check_same_shape(shape, xs[i].shape(), "weighted_sum");
  const auto len = shape_numel(shape);
  Buffer<T> out(len);
  Buffer<T> terms(active.size());
  for (std::size_t e = 0; e < len; ++e) {
    for (std::size_t a = 0; a < active.size(); ++a) terms[a] = w.data()[active[a]] * xs[active[a]].data()[e];
    out[e] = active.size() == 1 ? terms[0] : sorted_sum(terms.data(), terms.size());
  }
  std::vector<NodePtr<T>> parents{w.node()};
  for (auto i : active) parents.push_back(xs[i].node());
  return detail::make_result<T>(
      shape, std::move(out), std::move(parents),
      [active, len](NodeT<T>& self) {
        auto& pw = self.parents[0];
        for (std::size_t a = 0; a < active.size(); ++a) {
          auto& px = self.parents[a + 1];
          const T wi = pw->value[active[a]];
          if (wants_grad<T>(px)) {
            auto& g = px->ensure_grad();
            for (std::size_t e = 0; e < len; ++e) g[e] += wi * self.grad[e];
          }
          if (wants_grad<T>(pw)) {
            double s = 0;
            for (std::size_t e = 0; e < len; ++e) s += static_cast<double>(self.grad[e]) * px->value[e];
            pw->ensure_grad()[active[a]] += static_cast<T>(s);
          }
        }
      },
      "weighted_sum");
}

// ---------------------------------------------------------------------------

#define MTU_INSTANTIATE_OPS(T)                                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);               \
  template Tensor<T> softmax(const Tensor<T>&);                                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                                 \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                       \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                                \
  template Tensor<T> unpatchify(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);       \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>, Shape);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_rows(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                  \
  template Tensor<T> route_weights(const Tensor<T>&, std::optional<std::size_t>);                            \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, const Tensor<T>&);

MTU_INSTANTIATE_OPS(float)
MTU_INSTANTIATE_OPS(double)

}  // namespace mtu::ops
