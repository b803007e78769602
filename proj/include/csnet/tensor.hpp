#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csnet/parallel.hpp"

namespace csnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <class Real>
class Graph;

// Immutable dense value with an optional handle into the Graph that
// produced it. Copies are cheap (the buffer is shared and never mutated
// after construction).
template <class Real>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<Real>>(std::move(values))) {
    if (data_->size() != shape_size(shape_))
      throw std::invalid_argument("tensor data size " +
                                  std::to_string(data_->size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, Real value) {
    std::vector<Real> v(shape_size(shape), value);
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor scalar_value(Real value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<Real>& values() const { return *data_; }
  Real operator[](std::size_t i) const { return (*data_)[i]; }
  Real scalar() const {
    if (size() != 1) throw std::logic_error("scalar() on tensor of size " +
                                            std::to_string(size()));
    return (*data_)[0];
  }

  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }

 private:
  friend class Graph<Real>;
  Shape shape_;
  std::shared_ptr<const std::vector<Real>> data_;
  int node_ = -1;
  bool requires_grad_ = false;
};

enum class EwBinary { add, sub, mul };
enum class EwUnary { relu, exp, recip };
enum class ReduceOp { max, mean };

// Define-by-run reverse-mode graph. Operations compute their forward
// value eagerly and append a backward rule when any operand is part of
// the graph; pure constants flow through without recording, so the same
// code path serves both training and inference.
//
// Real selects the numeric width: float for training paths, double for
// the finite-difference/oracle suites.
template <class Real>
class Graph {
 public:
  using T = Tensor<Real>;
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    grads_.clear();
  }

  // ---- leaves ------------------------------------------------------

  T leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
    T t(std::move(shape), std::move(values));
    if (requires_grad) {
      t.node_ = record({}, nullptr);
      t.requires_grad_ = true;
    }
    return t;
  }

  static T constant(Shape shape, std::vector<Real> values) {
    return T(std::move(shape), std::move(values));
  }

  // ---- elementwise -------------------------------------------------

  T elementwise(EwBinary op, const T& a, const T& b) {
    if (a.shape() != b.shape())
      throw std::invalid_argument("elementwise shape mismatch: " +
                                  shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    const std::size_t n = a.size();
    std::vector<Real> out(n);
    const Real* pa = a.values().data();
    const Real* pb = b.values().data();
    switch (op) {
      case EwBinary::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
        break;
      case EwBinary::sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
        break;
      case EwBinary::mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
        break;
    }
    T r(a.shape(), std::move(out));
    if (a.node_ < 0 && b.node_ < 0) return r;
    const int na = a.node_, nb = b.node_;
    auto da = a.data_, db = b.data_;
    r.node_ = record(
        {na, nb}, [op, na, nb, da, db, n](const std::vector<Real>& g, Graph& gr) {
          if (na >= 0) {
            std::vector<Real>& ga = gr.grad_slot(na, n);
            if (op == EwBinary::mul) {
              const Real* pb2 = db->data();
              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
            } else {
              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
          }
          if (nb >= 0) {
            std::vector<Real>& gb = gr.grad_slot(nb, n);
            switch (op) {
              case EwBinary::add:
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                break;
              case EwBinary::sub:
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                break;
              case EwBinary::mul: {
                const Real* pa2 = da->data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
                break;
              }
            }
          }
        });
    return r;
  }

  // b broadcast as a scalar constant.
  T elementwise(EwBinary op, const T& a, Real b) {
    const std::size_t n = a.size();
    std::vector<Real> out(n);
    const Real* pa = a.values().data();
    switch (op) {
      case EwBinary::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + b;
        break;
      case EwBinary::sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - b;
        break;
      case EwBinary::mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * b;
        break;
    }
    T r(a.shape(), std::move(out));
    if (a.node_ < 0) return r;
    const int na = a.node_;
    r.node_ = record({na}, [op, na, b, n](const std::vector<Real>& g, Graph& gr) {
      std::vector<Real>& ga = gr.grad_slot(na, n);
      const Real factor = op == EwBinary::mul ? b : Real(1);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
    });
    return r;
  }

  T elementwise(EwUnary op, const T& a) {
    const std::size_t n = a.size();
    std::vector<Real> out(n);
    const Real* pa = a.values().data();
    switch (op) {
      case EwUnary::relu:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] > Real(0) ? pa[i] : Real(0);
        break;
      case EwUnary::exp:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(pa[i]);
        break;
      case EwUnary::recip:
        for (std::size_t i = 0; i < n; ++i) out[i] = Real(1) / pa[i];
        break;
    }
    T r(a.shape(), std::move(out));
    if (a.node_ < 0) return r;
    const int na = a.node_;
    auto da = a.data_;
    auto dout = r.data_;
    r.node_ = record(
        {na}, [op, na, da, dout, n](const std::vector<Real>& g, Graph& gr) {
          std::vector<Real>& ga = gr.grad_slot(na, n);
          const Real* px = da->data();
          const Real* py = dout->data();
          switch (op) {
            case EwUnary::relu:
              // gradient at exactly 0 is 0
              for (std::size_t i = 0; i < n; ++i)
                if (px[i] > Real(0)) ga[i] += g[i];
              break;
            case EwUnary::exp:
              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * py[i];
              break;
            case EwUnary::recip:
              for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i] * py[i] * py[i];
              break;
          }
        });
    return r;
  }

  T add(const T& a, const T& b) { return elementwise(EwBinary::add, a, b); }
  T sub(const T& a, const T& b) { return elementwise(EwBinary::sub, a, b); }
  T mul(const T& a, const T& b) { return elementwise(EwBinary::mul, a, b); }
  T add(const T& a, Real b) { return elementwise(EwBinary::add, a, b); }
  T sub(const T& a, Real b) { return elementwise(EwBinary::sub, a, b); }
  T scalar_mul(const T& a, Real s) { return elementwise(EwBinary::mul, a, s); }
  T relu(const T& a) { return elementwise(EwUnary::relu, a); }
  T exp(const T& a) { return elementwise(EwUnary::exp, a); }
  T recip(const T& a) { return elementwise(EwUnary::recip, a); }

  // ---- matmul ------------------------------------------------------

  T matmul(const T& a, const T& b) {
    if (a.rank() != 2 || b.rank() != 2)
      throw std::invalid_argument("matmul expects rank-2 tensors, got " +
                                  shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()));
    const std::size_t m = a.dim(0), p = a.dim(1), p2 = b.dim(0), q = b.dim(1);
    if (p != p2)
      throw std::invalid_argument("matmul inner dimension mismatch: " +
                                  shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    std::vector<Real> out(m * q);
    gemm(a.values().data(), m, p, b.values().data(), q, out.data(), false, false);
    T r({m, q}, std::move(out));
    if (a.node_ < 0 && b.node_ < 0) return r;
    const int na = a.node_, nb = b.node_;
    auto da = a.data_, db = b.data_;
    r.node_ = record(
        {na, nb},
        [na, nb, da, db, m, p, q](const std::vector<Real>& g, Graph& gr) {
          if (na >= 0) {  // dA = G * B^T
            std::vector<Real>& ga = gr.grad_slot(na, m * p);
            gemm_acc(g.data(), m, q, db->data(), p, ga.data(), false, true);
          }
          if (nb >= 0) {  // dB = A^T * G
            std::vector<Real>& gb = gr.grad_slot(nb, p * q);
            gemm_acc(da->data(), p, m, g.data(), q, gb.data(), true, false);
          }
        });
    return r;
  }

  // ---- softmax / logsumexp ----------------------------------------

  T softmax(const T& x, std::size_t axis, Real scale) {
    check_axis(x, axis);
    if (!(scale > Real(0)))
      throw std::invalid_argument("softmax scale must be positive");
    const auto [outer, d, inner] = axis_split(x.shape(), axis);
    std::vector<Real> out(x.size());
    const Real* px = x.values().data();
    const auto run = [&, d = d, inner = inner](std::size_t o_lo, std::size_t o_hi) {
      for (std::size_t o = o_lo; o < o_hi; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * d * inner + i;
          Real mx = -std::numeric_limits<Real>::infinity();
          for (std::size_t a = 0; a < d; ++a)
            mx = std::max(mx, px[base + a * inner] / scale);
          Real sum = 0;
          for (std::size_t a = 0; a < d; ++a) {
            const Real e = std::exp(px[base + a * inner] / scale - mx);
            out[base + a * inner] = e;
            sum += e;
          }
          for (std::size_t a = 0; a < d; ++a) out[base + a * inner] /= sum;
        }
    };
    if (x.size() >= (1u << 21) && outer >= 2)
      parallel_for(outer, run, outer / 2);
    else
      run(0, outer);
    T r(x.shape(), std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    auto dout = r.data_;
    const std::size_t total = x.size();
    r.node_ = record(
        {nx}, [nx, dout, outer, d = d, inner, scale, total](
                  const std::vector<Real>& g, Graph& gr) {
          std::vector<Real>& gx = gr.grad_slot(nx, total);
          const Real* py = dout->data();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t base = o * d * inner + i;
              Real dot = 0;
              for (std::size_t a = 0; a < d; ++a) {
                const std::size_t k = base + a * inner;
                dot += g[k] * py[k];
              }
              for (std::size_t a = 0; a < d; ++a) {
                const std::size_t k = base + a * inner;
                gx[k] += py[k] * (g[k] - dot) / scale;
              }
            }
        });
    return r;
  }

  T logsumexp(const T& x, std::size_t axis) {
    check_axis(x, axis);
    const auto [outer, d, inner] = axis_split(x.shape(), axis);
    Shape rshape = reduced_shape(x.shape(), axis);
    std::vector<Real> out(outer * inner);
    const Real* px = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * d * inner + i;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t a = 0; a < d; ++a)
          mx = std::max(mx, px[base + a * inner]);
        Real sum = 0;
        for (std::size_t a = 0; a < d; ++a)
          sum += std::exp(px[base + a * inner] - mx);
        out[o * inner + i] = mx + std::log(sum);
      }
    T r(std::move(rshape), std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    auto dx = x.data_;
    auto dout = r.data_;
    const std::size_t total = x.size();
    r.node_ = record(
        {nx}, [nx, dx, dout, outer, d = d, inner, total](
                  const std::vector<Real>& g, Graph& gr) {
          std::vector<Real>& gx = gr.grad_slot(nx, total);
          const Real* px = dx->data();
          const Real* py = dout->data();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t base = o * d * inner + i;
              const Real lse = py[o * inner + i];
              const Real go = g[o * inner + i];
              for (std::size_t a = 0; a < d; ++a) {
                const std::size_t k = base + a * inner;
                gx[k] += go * std::exp(px[k] - lse);
              }
            }
        });
    return r;
  }

  // ---- reductions --------------------------------------------------

  T reduce(ReduceOp op, const T& x, std::size_t axis) {
    check_axis(x, axis);
    const auto [outer, d, inner] = axis_split(x.shape(), axis);
    if (d == 0) throw std::invalid_argument("reduce over empty axis");
    Shape rshape = reduced_shape(x.shape(), axis);
    std::vector<Real> out(outer * inner);
    std::vector<std::size_t> argmax;
    const Real* px = x.values().data();
    if (op == ReduceOp::max) {
      argmax.resize(outer * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * d * inner + i;
          Real best = px[base];
          std::size_t arg = 0;
          for (std::size_t a = 1; a < d; ++a) {
            const Real v = px[base + a * inner];
            if (v > best) {  // ties keep the lowest index
              best = v;
              arg = a;
            }
          }
          out[o * inner + i] = best;
          argmax[o * inner + i] = arg;
        }
    } else {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * d * inner + i;
          Real sum = 0;
          for (std::size_t a = 0; a < d; ++a) sum += px[base + a * inner];
          out[o * inner + i] = sum / static_cast<Real>(d);
        }
    }
    T r(std::move(rshape), std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    const std::size_t total = x.size();
    r.node_ = record(
        {nx}, [nx, op, outer, d = d, inner, total, argmax = std::move(argmax)](
                  const std::vector<Real>& g, Graph& gr) {
          std::vector<Real>& gx = gr.grad_slot(nx, total);
          if (op == ReduceOp::max) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t flat = o * inner + i;
                gx[o * d * inner + argmax[flat] * inner + i] += g[flat];
              }
          } else {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < inner; ++i) {
                const Real share = g[o * inner + i] / static_cast<Real>(d);
                const std::size_t base = o * d * inner + i;
                for (std::size_t a = 0; a < d; ++a) gx[base + a * inner] += share;
              }
          }
        });
    return r;
  }

  T reduce_max(const T& x, std::size_t axis) { return reduce(ReduceOp::max, x, axis); }
  T reduce_mean(const T& x, std::size_t axis) { return reduce(ReduceOp::mean, x, axis); }

  // ---- structural ops ----------------------------------------------

  T concat(const std::vector<T>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw std::invalid_argument("concat axis out of range");
    Shape rshape = s0;
    rshape[axis] = 0;
    for (const T& p : parts) {
      if (p.rank() != s0.size())
        throw std::invalid_argument("concat rank mismatch: " + shape_str(s0) +
                                    " vs " + shape_str(p.shape()));
      for (std::size_t a = 0; a < s0.size(); ++a)
        if (a != axis && p.shape()[a] != s0[a])
          throw std::invalid_argument("concat shape mismatch off axis: " +
                                      shape_str(s0) + " vs " +
                                      shape_str(p.shape()));
      rshape[axis] += p.shape()[axis];
    }
    const auto [outer, dtot, inner] = axis_split(rshape, axis);
    std::vector<Real> out(shape_size(rshape));
    std::size_t offset = 0;
    for (const T& p : parts) {
      const std::size_t d = p.shape()[axis];
      const Real* src = p.values().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy(src + o * d * inner, src + (o + 1) * d * inner,
                  out.data() + (o * dtot + offset) * inner);
      offset += d;
    }
    T r(rshape, std::move(out));
    bool tracked = false;
    for (const T& p : parts) tracked |= p.node_ >= 0;
    if (!tracked) return r;
    std::vector<int> ids;
    std::vector<std::size_t> dims;
    for (const T& p : parts) {
      ids.push_back(p.node_);
      dims.push_back(p.shape()[axis]);
    }
    r.node_ = record(
        ids, [ids, dims, outer, dtot = dtot, inner](const std::vector<Real>& g,
                                                    Graph& gr) {
          std::size_t offset = 0;
          for (std::size_t part = 0; part < ids.size(); ++part) {
            const std::size_t d = dims[part];
            if (ids[part] >= 0) {
              std::vector<Real>& gp = gr.grad_slot(ids[part], outer * d * inner);
              for (std::size_t o = 0; o < outer; ++o) {
                const Real* src = g.data() + (o * dtot + offset) * inner;
                Real* dst = gp.data() + o * d * inner;
                for (std::size_t k = 0; k < d * inner; ++k) dst[k] += src[k];
              }
            }
            offset += d;
          }
        });
    return r;
  }

  T transpose(const T& x) {
    if (x.rank() != 2)
      throw std::invalid_argument("transpose expects a rank-2 tensor, got " +
                                  shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<Real> out(x.size());
    const Real* px = x.values().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = px[i * n + j];
    T r({n, m}, std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    r.node_ = record({nx}, [nx, m, n](const std::vector<Real>& g, Graph& gr) {
      std::vector<Real>& gx = gr.grad_slot(nx, m * n);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += g[j * m + i];
    });
    return r;
  }

  T reshape(const T& x, Shape shape) {
    if (shape_size(shape) != x.size())
      throw std::invalid_argument("reshape size mismatch: " +
                                  shape_str(x.shape()) + " -> " +
                                  shape_str(shape));
    T r(std::move(shape), std::vector<Real>(x.values()));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    const std::size_t n = x.size();
    r.node_ = record({nx}, [nx, n](const std::vector<Real>& g, Graph& gr) {
      std::vector<Real>& gx = gr.grad_slot(nx, n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return r;
  }

  // Tiles x `times` times along an existing axis (block repeat).
  T replicate(const T& x, std::size_t axis, std::size_t times) {
    check_axis(x, axis);
    if (times == 0) throw std::invalid_argument("replicate times must be >= 1");
    const auto [outer, d, inner] = axis_split(x.shape(), axis);
    Shape rshape = x.shape();
    rshape[axis] = d * times;
    std::vector<Real> out(shape_size(rshape));
    const Real* px = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < times; ++t)
        std::copy(px + o * d * inner, px + (o + 1) * d * inner,
                  out.data() + (o * times + t) * d * inner);
    T r(std::move(rshape), std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    const std::size_t total = x.size();
    r.node_ = record(
        {nx}, [nx, outer, d = d, inner, times, total](const std::vector<Real>& g,
                                                      Graph& gr) {
          std::vector<Real>& gx = gr.grad_slot(nx, total);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t t = 0; t < times; ++t) {
              const Real* src = g.data() + (o * times + t) * d * inner;
              Real* dst = gx.data() + o * d * inner;
              for (std::size_t k = 0; k < d * inner; ++k) dst[k] += src[k];
            }
        });
    return r;
  }

  // Selects rows (axis-0 slices) by index; duplicates allowed (backward
  // accumulates).
  T gather_rows(const T& x, const std::vector<std::size_t>& rows) {
    if (x.rank() < 1) throw std::invalid_argument("gather_rows on scalar");
    const std::size_t m = x.dim(0);
    const std::size_t rowsz = x.size() / std::max<std::size_t>(m, 1);
    for (std::size_t r : rows)
      if (r >= m)
        throw std::invalid_argument("gather_rows index " + std::to_string(r) +
                                    " out of range [0, " + std::to_string(m) + ")");
    Shape rshape = x.shape();
    rshape[0] = rows.size();
    std::vector<Real> out(rows.size() * rowsz);
    const Real* px = x.values().data();
    for (std::size_t j = 0; j < rows.size(); ++j)
      std::copy(px + rows[j] * rowsz, px + (rows[j] + 1) * rowsz,
                out.data() + j * rowsz);
    T r(std::move(rshape), std::move(out));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    const std::size_t total = x.size();
    r.node_ = record(
        {nx}, [nx, rows, rowsz, total](const std::vector<Real>& g, Graph& gr) {
          std::vector<Real>& gx = gr.grad_slot(nx, total);
          for (std::size_t j = 0; j < rows.size(); ++j) {
            const Real* src = g.data() + j * rowsz;
            Real* dst = gx.data() + rows[j] * rowsz;
            for (std::size_t k = 0; k < rowsz; ++k) dst[k] += src[k];
          }
        });
    return r;
  }

  // Straight-through gate: forward value is exactly 1 everywhere, the
  // backward pass forwards the incoming gradient to x unchanged.
  T straight_through_ones(const T& x) {
    T r(x.shape(), std::vector<Real>(x.size(), Real(1)));
    if (x.node_ < 0) return r;
    const int nx = x.node_;
    const std::size_t n = x.size();
    r.node_ = record({nx}, [nx, n](const std::vector<Real>& g, Graph& gr) {
      std::vector<Real>& gx = gr.grad_slot(nx, n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return r;
  }

  // ---- backward ----------------------------------------------------

  void backward(const T& root) {
    if (root.size() != 1)
      throw std::invalid_argument("backward root must be a scalar tensor");
    if (root.node_ < 0) {
      // Constant root: nothing reachable, gradients are all empty.
      grads_.assign(nodes_.size(), {});
      return;
    }
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(root.node_)] = {Real(1)};
    for (int i = root.node_; i >= 0; --i) {
      auto& slot = grads_[static_cast<std::size_t>(i)];
      if (slot.empty()) continue;
      if (nodes_[static_cast<std::size_t>(i)].backprop)
        nodes_[static_cast<std::size_t>(i)].backprop(slot, *this);
    }
  }

  // Gradient of a graph tensor after backward(); null when unreachable
  // or untracked.
  const std::vector<Real>* gradient(const T& t) const {
    if (t.node_ < 0 || static_cast<std::size_t>(t.node_) >= grads_.size())
      return nullptr;
    const auto& g = grads_[static_cast<std::size_t>(t.node_)];
    return g.empty() ? nullptr : &g;
  }

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void(const std::vector<Real>&, Graph&)> backprop;
  };

  int record(std::vector<int> parents,
             std::function<void(const std::vector<Real>&, Graph&)> backprop) {
    nodes_.push_back(Node{std::move(parents), std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Real>& grad_slot(int node, std::size_t size) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(size, Real(0));
    return g;
  }

  static void check_axis(const T& x, std::size_t axis) {
    if (axis >= x.rank())
      throw std::invalid_argument("axis " + std::to_string(axis) +
                                  " out of range for shape " +
                                  shape_str(x.shape()));
  }

  static std::tuple<std::size_t, std::size_t, std::size_t> axis_split(
      const Shape& shape, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= shape[a];
    for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
    return {outer, shape[axis], inner};
  }

  static Shape reduced_shape(const Shape& shape, std::size_t axis) {
    Shape r;
    for (std::size_t a = 0; a < shape.size(); ++a)
      if (a != axis) r.push_back(shape[a]);
    if (r.empty()) r.push_back(1);
    return r;
  }

  // C (+)= op(A) * op(B). Row-parallel above a size threshold; the row
  // split writes disjoint output blocks so results do not depend on the
  // number of workers.
  static void gemm_impl(const Real* a, std::size_t m, std::size_t k,
                        const Real* b, std::size_t n, Real* c, bool ta,
                        bool tb, bool accumulate) {
    const auto run = [&](std::size_t lo, std::size_t hi) {
      if (lo >= hi) return;
      // op(A) rows lo..hi. When ta, A is stored k x m.
      ConstMatMap bm(b, tb ? n : k, tb ? k : n);
      MatMap cm(c + lo * n, hi - lo, n);
      if (!ta) {
        ConstMatMap am(a + lo * k, hi - lo, k);
        if (tb) {
          if (accumulate) cm.noalias() += am * bm.transpose();
          else cm.noalias() = am * bm.transpose();
        } else {
          if (accumulate) cm.noalias() += am * bm;
          else cm.noalias() = am * bm;
        }
      } else {
        ConstMatMap am(a, k, m);
        auto block = am.middleCols(static_cast<Eigen::Index>(lo),
                                   static_cast<Eigen::Index>(hi - lo));
        if (tb) {
          if (accumulate) cm.noalias() += block.transpose() * bm.transpose();
          else cm.noalias() = block.transpose() * bm.transpose();
        } else {
          if (accumulate) cm.noalias() += block.transpose() * bm;
          else cm.noalias() = block.transpose() * bm;
        }
      }
    };
    const std::size_t work = m * n * k;
    if (work >= kGemmParallelThreshold && m >= 2) {
      parallel_for(m, [&](std::size_t lo, std::size_t hi) { run(lo, hi); },
                   m / 2);
    } else {
      run(0, m);
    }
  }

  static constexpr std::size_t kGemmParallelThreshold = 1u << 23;

  static void gemm(const Real* a, std::size_t m, std::size_t k, const Real* b,
                   std::size_t n, Real* c, bool ta, bool tb) {
    gemm_impl(a, m, k, b, n, c, ta, tb, false);
  }
  static void gemm_acc(const Real* a, std::size_t m, std::size_t k,
                       const Real* b, std::size_t n, Real* c, bool ta, bool tb) {
    gemm_impl(a, m, k, b, n, c, ta, tb, true);
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<Real>> grads_;
};

// ---- finite-difference verification --------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = false;
};

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

// Central-difference check of a scalar-valued function against the
// recorded backward pass. Meant to run at 64-bit.
template <class Real = double>
FdReport finite_diff_check(
    const std::function<Tensor<Real>(Graph<Real>&, const Tensor<Real>&)>& f,
    const Tensor<Real>& x, double h, double tol) {
  const std::size_t n = x.size();
  std::vector<Real> base(x.values());

  Graph<Real> g;
  Tensor<Real> leaf = g.leaf(x.shape(), base, true);
  Tensor<Real> y = f(g, leaf);
  if (y.size() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar");
  g.backward(y);
  const std::vector<Real>* grad = g.gradient(leaf);
  std::vector<Real> analytic(n, Real(0));
  if (grad) analytic = *grad;

  FdReport report;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Real> plus = base, minus = base;
    plus[i] += static_cast<Real>(h);
    minus[i] -= static_cast<Real>(h);
    Graph<Real> gp, gm;
    const Real fp = f(gp, Graph<Real>::constant(x.shape(), plus)).scalar();
    const Real fm = f(gm, Graph<Real>::constant(x.shape(), minus)).scalar();
    if (!std::isfinite(static_cast<double>(fp)) ||
        !std::isfinite(static_cast<double>(fm)))
      throw std::runtime_error("finite_diff_check: non-finite value at coordinate " +
                               std::to_string(i));
    const double fd = (static_cast<double>(fp) - static_cast<double>(fm)) / (2 * h);
    const double err = rel_err(static_cast<double>(analytic[i]), fd);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace csnet
