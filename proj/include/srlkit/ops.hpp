// Differentiable operations on Tensor<Scalar>.
//
// Free functions in the Eigen style: each builds one graph node with a
// registered backward closure. Shapes are checked eagerly and reported in
// errors. Reductions (sum, mean, norms, softmax denominators, normalization
// statistics) accumulate in double regardless of the storage scalar; matrix
// products run in the storage scalar through Eigen. Broadcasting is limited
// to the row-vector bias case used by the models; everything else requires
// exact shapes.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "srlkit/tensor.hpp"

namespace srlkit {

template <typename S>
Eigen::Map<const MatrixRM<S>> mat_view(const ArrayX<S>& flat, Index rows,
                                       Index cols) {
  return Eigen::Map<const MatrixRM<S>>(flat.data(), rows, cols);
}

template <typename S>
Eigen::Map<MatrixRM<S>> mat_view_mut(ArrayX<S>& flat, Index rows, Index cols) {
  return Eigen::Map<MatrixRM<S>>(flat.data(), rows, cols);
}

namespace detail {

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Rank-1 tensors are treated as a single row wherever an operation reduces
// over the last axis.
inline void last_axis_dims(const Shape& s, const char* op, Index* rows,
                           Index* cols) {
  if (s.size() == 1) {
    *rows = 1;
    *cols = s[0];
  } else if (s.size() == 2) {
    *rows = s[0];
    *cols = s[1];
  } else {
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " +
                     shape_str(s));
  }
}

template <typename S>
bool input_needs_grad(Node<S>& n, std::size_t k) {
  return n.inputs[k]->requires_grad;
}

template <typename S>
ArrayX<S>& input_grad(Node<S>& n, std::size_t k) {
  n.inputs[k]->ensure_grad();
  return n.inputs[k]->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  // Same shape, or b is a row vector broadcast over the rows of a.
  const bool row_broadcast = a.rank() == 2 && b.rank() == 1 &&
                             a.shape()[1] == b.shape()[0];
  if (!row_broadcast) detail::check_same_shape("add", a, b);
  ArrayX<S> out;
  if (row_broadcast) {
    const Index rows = a.dim(0), cols = a.dim(1);
    out = a.values();
    auto m = mat_view_mut(out, rows, cols);
    m.rowwise() += mat_view(b.values(), 1, cols).row(0);
  } else {
    out = a.values() + b.values();
  }
  return make_op<S>(
      "add", a.shape(), std::move(out), {a, b}, [row_broadcast](Node<S>& n) {
        if (detail::input_needs_grad(n, 0))
          detail::input_grad(n, 0) += n.grad;
        if (detail::input_needs_grad(n, 1)) {
          auto& gb = detail::input_grad(n, 1);
          if (row_broadcast) {
            const Index rows = n.shape[0], cols = n.shape[1];
            auto g = mat_view(n.grad, rows, cols);
            for (Index j = 0; j < cols; ++j) {
              double acc = 0.0;
              for (Index i = 0; i < rows; ++i) acc += static_cast<double>(g(i, j));
              gb[j] += static_cast<S>(acc);
            }
          } else {
            gb += n.grad;
          }
        }
      });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  return make_op<S>("sub", a.shape(), ArrayX<S>(a.values() - b.values()),
                    {a, b}, [](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad;
                      if (detail::input_needs_grad(n, 1))
                        detail::input_grad(n, 1) -= n.grad;
                    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  return make_op<S>("mul", a.shape(), ArrayX<S>(a.values() * b.values()),
                    {a, b}, [](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad * n.inputs[1]->value;
                      if (detail::input_needs_grad(n, 1))
                        detail::input_grad(n, 1) += n.grad * n.inputs[0]->value;
                    });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  return make_op<S>("scale", a.shape(), ArrayX<S>(a.values() * cs), {a},
                    [cs](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad * cs;
                    });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, -1.0);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  for (Index i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.values()[i]);
  ArrayX<S> out(1);
  out[0] = static_cast<S>(acc);
  return make_op<S>("sum", Shape{}, std::move(out), {a}, [](Node<S>& n) {
    if (detail::input_needs_grad(n, 0)) detail::input_grad(n, 0) += n.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const Index count = a.numel();
  double acc = 0.0;
  for (Index i = 0; i < count; ++i) acc += static_cast<double>(a.values()[i]);
  ArrayX<S> out(1);
  out[0] = static_cast<S>(acc / static_cast<double>(count));
  return make_op<S>("mean", Shape{}, std::move(out), {a}, [count](Node<S>& n) {
    if (detail::input_needs_grad(n, 0))
      detail::input_grad(n, 0) +=
          n.grad[0] / static_cast<S>(static_cast<double>(count));
  });
}

// Mean over the time (row) axis: [T x D] -> [D].
template <typename S>
Tensor<S> mean_pool_rows(const Tensor<S>& a) {
  if (a.rank() != 2)
    throw ShapeError("mean_pool_rows: expected rank 2, got " +
                     shape_str(a.shape()));
  const Index rows = a.dim(0), cols = a.dim(1);
  ArrayX<S> out(cols);
  auto m = mat_view(a.values(), rows, cols);
  for (Index j = 0; j < cols; ++j) {
    double acc = 0.0;
    for (Index i = 0; i < rows; ++i) acc += static_cast<double>(m(i, j));
    out[j] = static_cast<S>(acc / static_cast<double>(rows));
  }
  return make_op<S>("mean_pool_rows", Shape{cols}, std::move(out), {a},
                    [rows, cols](Node<S>& n) {
                      if (!detail::input_needs_grad(n, 0)) return;
                      auto ga = mat_view_mut(detail::input_grad(n, 0), rows, cols);
                      const S inv = static_cast<S>(1.0 / static_cast<double>(rows));
                      for (Index i = 0; i < rows; ++i)
                        for (Index j = 0; j < cols; ++j) ga(i, j) += n.grad[j] * inv;
                    });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return make_op<S>("abs", a.shape(), ArrayX<S>(a.values().abs()), {a},
                    [](Node<S>& n) {
                      if (!detail::input_needs_grad(n, 0)) return;
                      auto& x = n.inputs[0]->value;
                      auto& g = detail::input_grad(n, 0);
                      for (Index i = 0; i < x.size(); ++i) {
                        S s = x[i] > S(0) ? S(1) : (x[i] < S(0) ? S(-1) : S(0));
                        g[i] += n.grad[i] * s;
                      }
                    });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  for (Index i = 0; i < a.numel(); ++i)
    if (!(a.values()[i] > S(0)))
      throw ValueError("log: input must be strictly positive");
  return make_op<S>("log", a.shape(), ArrayX<S>(a.values().log()), {a},
                    [](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad / n.inputs[0]->value;
                    });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return make_op<S>("exp", a.shape(), ArrayX<S>(a.values().exp()), {a},
                    [](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad * n.value;
                    });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  // exp of the negative magnitude keeps both branches overflow-free.
  const auto& x = a.values();
  ArrayX<S> e = (-x.abs()).exp();
  ArrayX<S> out = (x >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e));
  return make_op<S>("sigmoid", a.shape(), std::move(out), {a}, [](Node<S>& n) {
    if (detail::input_needs_grad(n, 0))
      detail::input_grad(n, 0) += n.grad * n.value * (S(1) - n.value);
  });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// Gaussian error linear unit, tanh approximation. The tanh values are saved
// for the backward pass.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S c = static_cast<S>(detail::kGeluC);
  const S aa = static_cast<S>(detail::kGeluA);
  const auto& x = a.values();
  ArrayX<S> t = (c * (x + aa * x.cube())).tanh();
  ArrayX<S> out = S(0.5) * x * (S(1) + t);
  return make_op<S>("gelu", a.shape(), std::move(out), {a},
                    [c, aa, t = std::move(t)](Node<S>& n) {
                      if (!detail::input_needs_grad(n, 0)) return;
                      const auto& x = n.inputs[0]->value;
                      detail::input_grad(n, 0) +=
                          n.grad *
                          (S(0.5) * (S(1) + t) +
                           S(0.5) * x * (S(1) - t.square()) *
                               (c * (S(1) + S(3) * aa * x.square())));
                    });
}

// ---------------------------------------------------------------------------
// Row-structured operations (last axis)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  Index rows, cols;
  detail::last_axis_dims(a.shape(), "softmax", &rows, &cols);
  ArrayX<S> out(a.numel());
  {
    auto x = mat_view(a.values(), rows, cols);
    auto y = mat_view_mut(out, rows, cols);
    ArrayX<S> ex(cols);
    for (Index i = 0; i < rows; ++i) {
      const S mx = x.row(i).maxCoeff();
      ex = (x.row(i).transpose().array() - mx).exp();
      double denom = 0.0;
      for (Index j = 0; j < cols; ++j) denom += static_cast<double>(ex[j]);
      y.row(i) = (ex / static_cast<S>(denom)).matrix().transpose();
    }
  }
  return make_op<S>(
      "softmax", a.shape(), std::move(out), {a}, [rows, cols](Node<S>& n) {
        if (!detail::input_needs_grad(n, 0)) return;
        auto y = mat_view(n.value, rows, cols);
        auto g = mat_view(n.grad, rows, cols);
        auto gx = mat_view_mut(detail::input_grad(n, 0), rows, cols);
        for (Index i = 0; i < rows; ++i) {
          double dot = 0.0;
          for (Index j = 0; j < cols; ++j)
            dot += static_cast<double>(g(i, j)) * static_cast<double>(y(i, j));
          for (Index j = 0; j < cols; ++j)
            gx(i, j) += y(i, j) * (g(i, j) - static_cast<S>(dot));
        }
      });
}

// Layer normalization over the last axis with learned gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& a, const Tensor<S>& gain,
                     const Tensor<S>& bias) {
  constexpr double kEps = 1e-5;
  Index rows, cols;
  detail::last_axis_dims(a.shape(), "layer_norm", &rows, &cols);
  if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 ||
      bias.dim(0) != cols)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of size " +
                     std::to_string(cols) + ", got " + shape_str(gain.shape()) +
                     " and " + shape_str(bias.shape()));
  ArrayX<S> out(a.numel());
  std::vector<double> mu(static_cast<std::size_t>(rows));
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  auto x = mat_view(a.values(), rows, cols);
  auto y = mat_view_mut(out, rows, cols);
  for (Index i = 0; i < rows; ++i) {
    double m = 0.0;
    for (Index j = 0; j < cols; ++j) m += static_cast<double>(x(i, j));
    m /= static_cast<double>(cols);
    double var = 0.0;
    for (Index j = 0; j < cols; ++j) {
      const double d = static_cast<double>(x(i, j)) - m;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kEps);
    mu[static_cast<std::size_t>(i)] = m;
    inv_std[static_cast<std::size_t>(i)] = inv;
    for (Index j = 0; j < cols; ++j) {
      const double xh = (static_cast<double>(x(i, j)) - m) * inv;
      y(i, j) = static_cast<S>(xh * static_cast<double>(gain.values()[j]) +
                               static_cast<double>(bias.values()[j]));
    }
  }
  return make_op<S>(
      "layer_norm", a.shape(), std::move(out), {a, gain, bias},
      [rows, cols, mu = std::move(mu),
       inv_std = std::move(inv_std)](Node<S>& n) {
        auto x = mat_view(n.inputs[0]->value, rows, cols);
        auto g = mat_view(n.grad, rows, cols);
        const auto& gain = n.inputs[1]->value;
        const bool need_x = detail::input_needs_grad(n, 0);
        const bool need_gain = detail::input_needs_grad(n, 1);
        const bool need_bias = detail::input_needs_grad(n, 2);
        const double dcols = static_cast<double>(cols);
        for (Index i = 0; i < rows; ++i) {
          const double m = mu[static_cast<std::size_t>(i)];
          const double inv = inv_std[static_cast<std::size_t>(i)];
          if (need_x) {
            // dxhat -> dx through the mean and variance statistics.
            double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
            for (Index j = 0; j < cols; ++j) {
              const double dxh = static_cast<double>(g(i, j)) *
                                 static_cast<double>(gain[j]);
              const double xc = static_cast<double>(x(i, j)) - m;
              sum_dxhat += dxh;
              sum_dxhat_xc += dxh * xc;
            }
            const double dvar = sum_dxhat_xc * (-0.5) * inv * inv * inv;
            const double dmu = -inv * sum_dxhat;
            auto gx = mat_view_mut(detail::input_grad(n, 0), rows, cols);
            for (Index j = 0; j < cols; ++j) {
              const double dxh = static_cast<double>(g(i, j)) *
                                 static_cast<double>(gain[j]);
              const double xc = static_cast<double>(x(i, j)) - m;
              gx(i, j) += static_cast<S>(dxh * inv + dvar * 2.0 * xc / dcols +
                                         dmu / dcols);
            }
          }
          if (need_gain) {
            auto& gg = detail::input_grad(n, 1);
            for (Index j = 0; j < cols; ++j) {
              const double xh = (static_cast<double>(x(i, j)) - m) * inv;
              gg[j] += static_cast<S>(static_cast<double>(g(i, j)) * xh);
            }
          }
          if (need_bias) {
            auto& gb = detail::input_grad(n, 2);
            for (Index j = 0; j < cols; ++j) gb[j] += g(i, j);
          }
        }
      });
}

// L2 normalization over the last axis; smoothed with eps = 1e-12 inside the
// root so the operation stays differentiable at the origin.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& a) {
  constexpr double kEps = 1e-12;
  Index rows, cols;
  detail::last_axis_dims(a.shape(), "l2_normalize", &rows, &cols);
  ArrayX<S> out(a.numel());
  std::vector<double> inv_norm(static_cast<std::size_t>(rows));
  auto x = mat_view(a.values(), rows, cols);
  auto y = mat_view_mut(out, rows, cols);
  for (Index i = 0; i < rows; ++i) {
    double q = kEps;
    for (Index j = 0; j < cols; ++j) {
      const double v = static_cast<double>(x(i, j));
      q += v * v;
    }
    const double s = 1.0 / std::sqrt(q);
    inv_norm[static_cast<std::size_t>(i)] = s;
    for (Index j = 0; j < cols; ++j)
      y(i, j) = static_cast<S>(static_cast<double>(x(i, j)) * s);
  }
  return make_op<S>(
      "l2_normalize", a.shape(), std::move(out), {a},
      [rows, cols, inv_norm = std::move(inv_norm)](Node<S>& n) {
        if (!detail::input_needs_grad(n, 0)) return;
        auto x = mat_view(n.inputs[0]->value, rows, cols);
        auto g = mat_view(n.grad, rows, cols);
        auto gx = mat_view_mut(detail::input_grad(n, 0), rows, cols);
        for (Index i = 0; i < rows; ++i) {
          const double s = inv_norm[static_cast<std::size_t>(i)];
          double gdotx = 0.0;
          for (Index j = 0; j < cols; ++j)
            gdotx += static_cast<double>(g(i, j)) * static_cast<double>(x(i, j));
          const double s3 = s * s * s;
          for (Index j = 0; j < cols; ++j)
            gx(i, j) += static_cast<S>(static_cast<double>(g(i, j)) * s -
                                       gdotx * s3 * static_cast<double>(x(i, j)));
        }
      });
}

// Pairwise cosine similarity over the last axis: [T x K], [T x K] -> [T]
// (rank-1 inputs give a scalar). When either row norm falls below 1e-12 the
// similarity is defined as 0 with zero gradient.
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  constexpr double kEps = 1e-12;
  detail::check_same_shape("cosine_similarity", a, b);
  Index rows, cols;
  detail::last_axis_dims(a.shape(), "cosine_similarity", &rows, &cols);
  ArrayX<S> out(rows);
  std::vector<double> norm_a(static_cast<std::size_t>(rows));
  std::vector<double> norm_b(static_cast<std::size_t>(rows));
  auto xa = mat_view(a.values(), rows, cols);
  auto xb = mat_view(b.values(), rows, cols);
  for (Index i = 0; i < rows; ++i) {
    double qa = 0.0, qb = 0.0, dot = 0.0;
    for (Index j = 0; j < cols; ++j) {
      const double va = static_cast<double>(xa(i, j));
      const double vb = static_cast<double>(xb(i, j));
      qa += va * va;
      qb += vb * vb;
      dot += va * vb;
    }
    const double na = std::sqrt(qa), nb = std::sqrt(qb);
    norm_a[static_cast<std::size_t>(i)] = na;
    norm_b[static_cast<std::size_t>(i)] = nb;
    out[i] = (na < kEps || nb < kEps) ? S(0)
                                      : static_cast<S>(dot / (na * nb));
  }
  Shape out_shape = a.rank() == 1 ? Shape{} : Shape{rows};
  return make_op<S>(
      "cosine_similarity", std::move(out_shape), std::move(out), {a, b},
      [rows, cols, norm_a = std::move(norm_a),
       norm_b = std::move(norm_b)](Node<S>& n) {
        auto xa = mat_view(n.inputs[0]->value, rows, cols);
        auto xb = mat_view(n.inputs[1]->value, rows, cols);
        const bool need_a = detail::input_needs_grad(n, 0);
        const bool need_b = detail::input_needs_grad(n, 1);
        for (Index i = 0; i < rows; ++i) {
          const double na = norm_a[static_cast<std::size_t>(i)];
          const double nb = norm_b[static_cast<std::size_t>(i)];
          if (na < kEps || nb < kEps) continue;  // defined as constant 0
          const double c = static_cast<double>(n.value[i]);
          const double gi = static_cast<double>(n.grad[i]);
          const double inv_ab = 1.0 / (na * nb);
          if (need_a) {
            auto ga = mat_view_mut(detail::input_grad(n, 0), rows, cols);
            for (Index j = 0; j < cols; ++j)
              ga(i, j) += static_cast<S>(
                  gi * (static_cast<double>(xb(i, j)) * inv_ab -
                        c * static_cast<double>(xa(i, j)) / (na * na)));
          }
          if (need_b) {
            auto gb = mat_view_mut(detail::input_grad(n, 1), rows, cols);
            for (Index j = 0; j < cols; ++j)
              gb(i, j) += static_cast<S>(
                  gi * (static_cast<double>(xa(i, j)) * inv_ab -
                        c * static_cast<double>(xb(i, j)) / (nb * nb)));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  check_shape_positive(shape, "reshape");
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  return make_op<S>("reshape", std::move(shape), ArrayX<S>(a.values()), {a},
                    [](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad;
                    });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const Index rows = a.dim(0), cols = a.dim(1);
  ArrayX<S> out(a.numel());
  mat_view_mut(out, cols, rows) = mat_view(a.values(), rows, cols).transpose();
  return make_op<S>("transpose", Shape{cols, rows}, std::move(out), {a},
                    [rows, cols](Node<S>& n) {
                      if (!detail::input_needs_grad(n, 0)) return;
                      auto g = mat_view(n.grad, cols, rows);
                      mat_view_mut(detail::input_grad(n, 0), rows, cols) +=
                          g.transpose();
                    });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index start, Index len) {
  if (a.rank() < 1 || a.rank() > 2)
    throw ShapeError("slice: expected rank 1 or 2, got " + shape_str(a.shape()));
  if (axis < 0 || axis >= a.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a.shape()));
  const Index extent = a.dim(axis);
  if (start < 0 || len <= 0 || start + len > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for axis of " +
                     std::to_string(extent));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  const Index rows = a.rank() == 2 ? a.dim(0) : 1;
  const Index cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const Index eff_axis = a.rank() == 1 ? 1 : axis;
  const Index out_rows = eff_axis == 0 ? len : rows;
  const Index out_cols = eff_axis == 1 ? len : cols;
  ArrayX<S> out(out_rows * out_cols);
  {
    auto x = mat_view(a.values(), rows, cols);
    auto y = mat_view_mut(out, out_rows, out_cols);
    if (eff_axis == 0)
      y = x.middleRows(start, len);
    else
      y = x.middleCols(start, len);
  }
  return make_op<S>(
      "slice", std::move(out_shape), std::move(out), {a},
      [rows, cols, eff_axis, start, out_rows, out_cols](Node<S>& n) {
        if (!detail::input_needs_grad(n, 0)) return;
        auto g = mat_view(n.grad, out_rows, out_cols);
        auto gx = mat_view_mut(detail::input_grad(n, 0), rows, cols);
        if (eff_axis == 0)
          gx.middleRows(start, out_rows) += g;
        else
          gx.middleCols(start, out_cols) += g;
      });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Index rank = parts[0].rank();
  if (rank < 1 || rank > 2)
    throw ShapeError("concat: expected rank 1 or 2 inputs");
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank)
      throw ShapeError("concat: mixed ranks");
    for (Index d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) +
                         " vs " + shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = total;
  const Index eff_axis = rank == 1 ? 1 : axis;
  const Index out_rows = out_shape.size() == 2 ? out_shape[0] : 1;
  const Index out_cols = out_shape.size() == 2 ? out_shape[1] : out_shape[0];
  ArrayX<S> out(out_rows * out_cols);
  std::vector<Index> offsets;
  {
    auto y = mat_view_mut(out, out_rows, out_cols);
    Index off = 0;
    for (const auto& p : parts) {
      const Index pr = rank == 2 ? p.dim(0) : 1;
      const Index pc = rank == 2 ? p.dim(1) : p.dim(0);
      auto x = mat_view(p.values(), pr, pc);
      if (eff_axis == 0)
        y.middleRows(off, pr) = x;
      else
        y.middleCols(off, pc) = x;
      offsets.push_back(off);
      off += rank == 2 ? p.dim(axis) : p.dim(0);
    }
  }
  return make_op<S>(
      "concat", std::move(out_shape), std::move(out), parts,
      [eff_axis, out_rows, out_cols, offsets = std::move(offsets),
       rank](Node<S>& n) {
        auto g = mat_view(n.grad, out_rows, out_cols);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (!detail::input_needs_grad(n, k)) continue;
          auto& in = *n.inputs[k];
          const Index pr = rank == 2 ? in.shape[0] : 1;
          const Index pc = rank == 2 ? in.shape[1] : in.shape[0];
          auto gx = mat_view_mut(detail::input_grad(n, k), pr, pc);
          if (eff_axis == 0)
            gx += g.middleRows(offsets[k], pr);
          else
            gx += g.middleCols(offsets[k], pc);
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), p = b.dim(1);
  ArrayX<S> out(m * p);
  mat_view_mut(out, m, p).noalias() =
      mat_view(a.values(), m, k) * mat_view(b.values(), k, p);
  return make_op<S>("matmul", Shape{m, p}, std::move(out), {a, b},
                    [m, k, p](Node<S>& n) {
                      auto g = mat_view(n.grad, m, p);
                      if (detail::input_needs_grad(n, 0)) {
                        auto bm = mat_view(n.inputs[1]->value, k, p);
                        mat_view_mut(detail::input_grad(n, 0), m, k).noalias() +=
                            g * bm.transpose();
                      }
                      if (detail::input_needs_grad(n, 1)) {
                        auto am = mat_view(n.inputs[0]->value, m, k);
                        mat_view_mut(detail::input_grad(n, 1), k, p).noalias() +=
                            am.transpose() * g;
                      }
                    });
}

// Valid (no padding) cross-correlation: x [C_in x T], w [C_out x C_in x k].
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, Index stride) {
  if (x.rank() != 2 || w.rank() != 3)
    throw ShapeError("conv1d: expected input [C_in x T] and weight "
                     "[C_out x C_in x k], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv1d: stride must be positive");
  const Index c_in = x.dim(0), t_in = x.dim(1);
  const Index c_out = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != c_in)
    throw ShapeError("conv1d: weight expects " + std::to_string(w.dim(1)) +
                     " input channels, input has " + std::to_string(c_in));
  if (t_in < kernel)
    throw ShapeError("conv1d: input length " + std::to_string(t_in) +
                     " shorter than kernel " + std::to_string(kernel));
  const Index t_out = (t_in - kernel) / stride + 1;

  // im2col: cols((c, j), i) = x(c, i*stride + j); the convolution becomes one
  // [C_out x C_in*k] by [C_in*k x T_out] product.
  auto gather_cols = [c_in, t_in, kernel, stride,
                      t_out](const ArrayX<S>& xa) -> MatrixRM<S> {
    MatrixRM<S> cols(c_in * kernel, t_out);
    using StridedRow =
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>, 0,
                   Eigen::InnerStride<Eigen::Dynamic>>;
    for (Index c = 0; c < c_in; ++c)
      for (Index j = 0; j < kernel; ++j)
        cols.row(c * kernel + j) =
            StridedRow(xa.data() + c * t_in + j, t_out,
                       Eigen::InnerStride<Eigen::Dynamic>(stride));
    return cols;
  };

  ArrayX<S> out(c_out * t_out);
  mat_view_mut(out, c_out, t_out).noalias() =
      Eigen::Map<const MatrixRM<S>>(w.values().data(), c_out, c_in * kernel) *
      gather_cols(x.values());

  return make_op<S>(
      "conv1d", Shape{c_out, t_out}, std::move(out), {x, w},
      [c_in, t_in, c_out, kernel, stride, t_out,
       gather_cols](Node<S>& n) {
        auto g = mat_view(n.grad, c_out, t_out);
        auto wmat = Eigen::Map<const MatrixRM<S>>(n.inputs[1]->value.data(),
                                                  c_out, c_in * kernel);
        if (detail::input_needs_grad(n, 1)) {
          MatrixRM<S> cols = gather_cols(n.inputs[0]->value);
          mat_view_mut(detail::input_grad(n, 1), c_out, c_in * kernel)
              .noalias() += g * cols.transpose();
        }
        if (detail::input_needs_grad(n, 0)) {
          MatrixRM<S> dcols = wmat.transpose() * g;  // [C_in*k x T_out]
          auto& gx = detail::input_grad(n, 0);
          using StridedRowMut =
              Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>, 0,
                         Eigen::InnerStride<Eigen::Dynamic>>;
          for (Index c = 0; c < c_in; ++c)
            for (Index j = 0; j < kernel; ++j)
              StridedRowMut(gx.data() + c * t_in + j, t_out,
                            Eigen::InnerStride<Eigen::Dynamic>(stride)) +=
                  dcols.row(c * kernel + j);
        }
      });
}

// ---------------------------------------------------------------------------
// Regularization
// ---------------------------------------------------------------------------

// Inverted dropout; identity when p == 0 or not training.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0)
    throw ValueError("dropout: probability must lie in [0, 1)");
  if (!train || p == 0.0) return a;
  ArrayX<S> mask(a.numel());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < a.numel(); ++i)
    mask[i] = rng.uniform() < p ? S(0) : keep_scale;
  ArrayX<S> out = a.values() * mask;
  return make_op<S>("dropout", a.shape(), std::move(out), {a},
                    [mask = std::move(mask)](Node<S>& n) {
                      if (detail::input_needs_grad(n, 0))
                        detail::input_grad(n, 0) += n.grad * mask;
                    });
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}
template <typename S>
Tensor<S> operator*(double c, const Tensor<S>& a) {
  return scale(a, c);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, double c) {
  return scale(a, c);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) {
  return neg(a);
}

}  // namespace srlkit
