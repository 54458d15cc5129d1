#include "epc/ops.hpp"

#include "detail/record.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace epc {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

using detail::NodePtr;
using detail::record;

template <typename T>
ConstMatMap<T> cmap(const Storage<T>& v, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return ConstMatMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> mmap(Storage<T>& v, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MatMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b);
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), two_shapes(op, a.shape(), b.shape()));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

void mix_mask(const std::vector<bool>& mask) {
  std::uint64_t word = 0;
  std::size_t bit = 0;
  for (bool b : mask) {
    word |= static_cast<std::uint64_t>(b) << bit;
    if (++bit == 64) {
      BranchSignature::mix(word);
      word = 0;
      bit = 0;
    }
  }
  BranchSignature::mix(word ^ (bit << 56));
}

}  // namespace

// --- linear primitives ------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && b.rank() >= 2, two_shapes("matmul", a.shape(), b.shape()));
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  if (b.rank() == 2) {
    require(b.dim(0) == k, two_shapes("matmul", a.shape(), b.shape()));
    const std::size_t n = b.dim(1);
    const std::size_t rows = a.size() / std::max<std::size_t>(k, 1);
    Shape shape = a.shape();
    shape.back() = n;
    Tensor<T> out(shape);
    auto& an = *a.node();
    auto& bn = *b.node();
    auto& on = *out.node();
    mmap(on.data, rows, n).noalias() = cmap(an.data, rows, k) * cmap(bn.data, k, n);
    auto* ap = a.node().get();
    auto* bp = b.node().get();
    auto* op = out.node().get();
    record<T>("matmul", {a.node(), b.node()}, out, [ap, bp, op, rows, k, n] {
      auto dc = cmap(op->grad, rows, n);
      if (ap->requires_grad) mmap(ap->grad, rows, k).noalias() += dc * cmap(bp->data, k, n).transpose();
      if (bp->requires_grad) mmap(bp->grad, k, n).noalias() += cmap(ap->data, rows, k).transpose() * dc;
    });
    return out;
  }
  require(b.rank() == a.rank(), two_shapes("matmul", a.shape(), b.shape()));
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
    require(a.dim(i) == b.dim(i), two_shapes("matmul", a.shape(), b.shape()));
  }
  require(b.dim(b.rank() - 2) == k, two_shapes("matmul", a.shape(), b.shape()));
  const std::size_t n = b.dim(b.rank() - 1);
  const std::size_t batches = a.size() / std::max<std::size_t>(m * k, 1);
  Shape shape = a.shape();
  shape.back() = n;
  Tensor<T> out(shape);
  auto& an = *a.node();
  auto& bn = *b.node();
  auto& on = *out.node();
  for (std::size_t s = 0; s < batches; ++s) {
    mmap(on.data, m, n, s * m * n).noalias() = cmap(an.data, m, k, s * m * k) * cmap(bn.data, k, n, s * k * n);
  }
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  record<T>("batched_matmul", {a.node(), b.node()}, out, [ap, bp, op, batches, m, k, n] {
    for (std::size_t s = 0; s < batches; ++s) {
      auto dc = cmap(op->grad, m, n, s * m * n);
      if (ap->requires_grad) {
        mmap(ap->grad, m, k, s * m * k).noalias() += dc * cmap(bp->data, k, n, s * k * n).transpose();
      }
      if (bp->requires_grad) {
        mmap(bp->grad, k, n, s * k * n).noalias() += cmap(ap->data, m, k, s * m * k).transpose() * dc;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  auto& o = out.node()->data;
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  record<T>("add", {a.node(), b.node()}, out, [ap, bp, op] {
    const auto& g = op->grad;
    if (ap->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) ap->grad[i] += g[i];
    if (bp->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) bp->grad[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  auto& o = out.node()->data;
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  record<T>("sub", {a.node(), b.node()}, out, [ap, bp, op] {
    const auto& g = op->grad;
    if (ap->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) ap->grad[i] += g[i];
    if (bp->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) bp->grad[i] -= g[i];
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto& o = out.node()->data;
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  record<T>("mul", {a.node(), b.node()}, out, [ap, bp, op] {
    const auto& g = op->grad;
    if (ap->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) ap->grad[i] += g[i] * bp->data[i];
    if (bp->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) bp->grad[i] += g[i] * ap->data[i];
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto& o = out.node()->data;
  const auto& x = a.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  auto* ap = a.node().get();
  auto* op = out.node().get();
  record<T>("scale", {a.node()}, out, [ap, op, factor] {
    for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad[i] += op->grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  Tensor<T> out(a.shape());
  auto& o = out.node()->data;
  const auto& x = a.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + offset;
  auto* ap = a.node().get();
  auto* op = out.node().get();
  record<T>("add_scalar", {a.node()}, out, [ap, op] {
    for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad[i] += op->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = last_dim(x.shape());
  require(bias.rank() == 1 && bias.dim(0) == c, two_shapes("add_bias", x.shape(), bias.shape()));
  const std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  const auto& bv = bias.node()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) o[r * c + j] = xv[r * c + j] + bv[j];
  }
  auto* xp = x.node().get();
  auto* bp = bias.node().get();
  auto* op = out.node().get();
  record<T>("add_bias", {x.node(), bias.node()}, out, [xp, bp, op, rows, c] {
    const auto& g = op->grad;
    if (xp->requires_grad) for (std::size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i];
    if (bp->requires_grad) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) bp->grad[j] += g[r * c + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() >= 1 && weight.rank() == 2 && last_dim(x.shape()) == weight.dim(0),
          two_shapes("linear", x.shape(), weight.shape()));
  const std::size_t in = weight.dim(0);
  const std::size_t outc = weight.dim(1);
  require(bias.rank() == 1 && bias.dim(0) == outc, two_shapes("linear", weight.shape(), bias.shape()));
  const std::size_t rows = x.size() / std::max<std::size_t>(in, 1);
  Shape shape = x.shape();
  shape.back() = outc;
  Tensor<T> out(shape);
  auto& on = *out.node();
  auto y = mmap(on.data, rows, outc);
  y.noalias() = cmap(x.node()->data, rows, in) * cmap(weight.node()->data, in, outc);
  y.rowwise() += cmap(bias.node()->data, 1, outc).row(0);
  auto* xp = x.node().get();
  auto* wp = weight.node().get();
  auto* bp = bias.node().get();
  auto* op = out.node().get();
  record<T>("linear", {x.node(), weight.node(), bias.node()}, out, [xp, wp, bp, op, rows, in, outc] {
    auto dy = cmap(op->grad, rows, outc);
    if (xp->requires_grad) mmap(xp->grad, rows, in).noalias() += dy * cmap(wp->data, in, outc).transpose();
    if (wp->requires_grad) mmap(wp->grad, in, outc).noalias() += cmap(xp->data, rows, in).transpose() * dy;
    if (bp->requires_grad) mmap(bp->grad, 1, outc).row(0) += dy.colwise().sum();
  });
  return out;
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(!first.empty(), "concat: scalar inputs");
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), two_shapes("concat", first, p.shape()));
    for (std::size_t i = 0; i + 1 < first.size(); ++i) {
      require(p.dim(i) == first[i], two_shapes("concat", first, p.shape()));
    }
    total += p.shape().back();
  }
  const std::size_t rows = parts.front().size() / std::max<std::size_t>(first.back(), 1);
  Shape shape = first;
  shape.back() = total;
  Tensor<T> out(shape);
  auto& o = out.node()->data;
  std::vector<std::size_t> widths;
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.shape().back();
    const auto& v = p.node()->data;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                  o.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += c;
    widths.push_back(c);
    inputs.push_back(p.node());
  }
  auto* op = out.node().get();
  std::vector<TensorNode<T>*> raw;
  for (auto& in : inputs) raw.push_back(in.get());
  record<T>("concat", inputs, out, [raw, widths, op, rows, total] {
    std::size_t off = 0;
    for (std::size_t p = 0; p < raw.size(); ++p) {
      const std::size_t c = widths[p];
      if (raw[p]->requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) raw[p]->grad[r * c + j] += op->grad[r * total + off + j];
        }
      }
      off += c;
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(x.rank() >= 1 && begin <= end && end <= x.shape().back(),
          "slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") outside shape " + shape_string(x.shape()));
  const std::size_t c = x.shape().back();
  const std::size_t w = end - begin;
  const std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  Shape shape = x.shape();
  shape.back() = w;
  Tensor<T> out(shape);
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) o[r * w + j] = v[r * c + begin + j];
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("slice_channels", {x.node()}, out, [xp, op, rows, c, w, begin] {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) xp->grad[r * c + begin + j] += op->grad[r * w + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_size(shape) == x.size(), two_shapes("reshape", x.shape(), shape));
  Tensor<T> out = Tensor<T>::from_storage(std::move(shape), x.node()->data);
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("reshape", {x.node()}, out, [xp, op] {
    for (std::size_t i = 0; i < op->grad.size(); ++i) xp->grad[i] += op->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require(x.rank() >= 2, "transpose: need rank >= 2, got " + shape_string(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2);
  const std::size_t c = x.dim(x.rank() - 1);
  const std::size_t batches = x.size() / std::max<std::size_t>(r * c, 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor<T> out(shape);
  auto& on = *out.node();
  for (std::size_t s = 0; s < batches; ++s) {
    mmap(on.data, c, r, s * r * c) = cmap(x.node()->data, r, c, s * r * c).transpose();
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("transpose", {x.node()}, out, [xp, op, batches, r, c] {
    for (std::size_t s = 0; s < batches; ++s) {
      mmap(xp->grad, r, c, s * r * c) += cmap(op->grad, c, r, s * r * c).transpose();
    }
  });
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require(x.rank() >= 1, "gather_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.size() / std::max<std::size_t>(rows, 1);
  for (std::size_t idx : indices) {
    require(idx < rows, "gather_rows: index " + std::to_string(idx) + " out of range for shape " +
                            shape_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor<T> out(shape);
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(indices[i] * inner), inner,
                o.begin() + static_cast<std::ptrdiff_t>(i * inner));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("gather_rows", {x.node()}, out, [xp, op, idx = std::move(idx), inner] {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < inner; ++j) xp->grad[idx[i] * inner + j] += op->grad[i * inner + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> row_scale(const Tensor<T>& rows, const Tensor<T>& factors) {
  require(rows.rank() == 2 && factors.rank() >= 1 && factors.shape().back() == rows.dim(0),
          two_shapes("row_scale", rows.shape(), factors.shape()));
  const std::size_t r = rows.dim(0);
  const std::size_t c = rows.dim(1);
  const std::size_t batches = factors.size() / std::max<std::size_t>(r, 1);
  Shape shape = factors.shape();
  shape.push_back(c);
  Tensor<T> out(shape);
  auto& o = out.node()->data;
  const auto& rv = rows.node()->data;
  const auto& fv = factors.node()->data;
  for (std::size_t s = 0; s < batches; ++s) {
    for (std::size_t i = 0; i < r; ++i) {
      const T f = fv[s * r + i];
      for (std::size_t j = 0; j < c; ++j) o[(s * r + i) * c + j] = f * rv[i * c + j];
    }
  }
  auto* rp = rows.node().get();
  auto* fp = factors.node().get();
  auto* op = out.node().get();
  record<T>("row_scale", {rows.node(), factors.node()}, out, [rp, fp, op, batches, r, c] {
    for (std::size_t s = 0; s < batches; ++s) {
      for (std::size_t i = 0; i < r; ++i) {
        const T f = fp->data[s * r + i];
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const T g = op->grad[(s * r + i) * c + j];
          acc += g * rp->data[i * c + j];
          if (rp->requires_grad) rp->grad[i * c + j] += f * g;
        }
        if (fp->requires_grad) fp->grad[s * r + i] += acc;
      }
    }
  });
  return out;
}

// --- activations and normalizations ----------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return leaky_relu(x, T(0));
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  {
    const T* __restrict in = v.data();
    T* __restrict res = o.data();
    const std::size_t n = o.size();
    for (std::size_t i = 0; i < n; ++i) res[i] = in[i] * (in[i] > T(0) ? T(1) : slope);
  }
  if (BranchSignature::enabled()) {
    std::vector<bool> mask(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) mask[i] = v[i] > T(0);
    mix_mask(mask);
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>(slope == T(0) ? "relu" : "leaky_relu", {x.node()}, out, [xp, op, slope] {
    const T* __restrict in = xp->data.data();
    const T* __restrict g = op->grad.data();
    T* __restrict dx = xp->grad.data();
    const std::size_t n = op->grad.size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (in[i] > T(0) ? T(1) : slope);
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(1) / (T(1) + std::exp(-v[i]));
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("sigmoid", {x.node()}, out, [xp, op] {
    for (std::size_t i = 0; i < op->grad.size(); ++i) {
      const T y = op->data[i];
      xp->grad[i] += op->grad[i] * y * (T(1) - y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " invalid for shape " +
                               shape_string(x.shape()));
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / std::max<std::size_t>(len * inner, 1);
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, v[base + i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(v[base + i * inner] - mx);
        o[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= total;
    }
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("softmax", {x.node()}, out, [xp, op, outer, len, inner] {
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t b = 0; b < inner; ++b) {
        const std::size_t base = a * len * inner + b;
        T dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += op->grad[base + i * inner] * op->data[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t at = base + i * inner;
          xp->grad[at] += op->data[at] * (op->grad[at] - dot);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  require(x.rank() >= 1, "l2_normalize: scalar input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += v[r * c + j] * v[r * c + j];
    const T norm = std::sqrt(ss);
    norms[r] = norm;
    for (std::size_t j = 0; j < c; ++j) o[r * c + j] = norm == T(0) ? T(0) : v[r * c + j] / norm;  // NaN must propagate
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("l2_normalize", {x.node()}, out, [xp, op, norms = std::move(norms), rows, c] {
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == T(0)) continue;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += op->grad[r * c + j] * op->data[r * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        xp->grad[r * c + j] += (op->grad[r * c + j] - op->data[r * c + j] * dot) / norms[r];
      }
    }
  });
  return out;
}

template <typename T>
BatchNormParams<T>::BatchNormParams(std::size_t channels, const std::string& name)
    : gamma(name + ".gamma", Tensor<T>({channels}, T(1))),
      beta(name + ".beta", Tensor<T>({channels}, T(0))),
      running_mean(channels, T(0)),
      running_var(channels, T(1)) {}

template <typename T>
void BatchNormParams<T>::reset_statistics() {
  std::fill(running_mean.begin(), running_mean.end(), T(0));
  std::fill(running_var.begin(), running_var.end(), T(1));
  initialized = true;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::clone() const {
  BatchNormParams copy = *this;
  copy.gamma = gamma.clone();
  copy.beta = beta.clone();
  return copy;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& bn, BatchNormMode mode) {
  const std::size_t c = bn.channels();
  require(x.rank() >= 1 && x.shape().back() == c,
          "batch_norm: input shape " + shape_string(x.shape()) + " does not match " + std::to_string(c) +
              " running-statistics channels");
  if (mode == BatchNormMode::inference && !bn.initialized) {
    throw std::logic_error("batch_norm: inference with uninitialized statistics");
  }
  const std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  const auto& v = x.node()->data;
  std::vector<T> mean(c, T(0));
  std::vector<T> var(c, T(0));
  if (mode == BatchNormMode::train) {
    require(rows > 0, "batch_norm: empty batch");
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) mean[j] += v[r * c + j];
    }
    for (auto& m : mean) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const T d = v[r * c + j] - mean[j];
        var[j] += d * d;
      }
    }
    for (auto& s : var) s /= static_cast<T>(rows);
    const T unbias = rows > 1 ? static_cast<T>(rows) / static_cast<T>(rows - 1) : T(1);
    for (std::size_t j = 0; j < c; ++j) {
      bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (T(1) - bn.momentum) * mean[j];
      bn.running_var[j] = bn.momentum * bn.running_var[j] + (T(1) - bn.momentum) * var[j] * unbias;
    }
    bn.initialized = true;
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  std::vector<T> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T(1) / std::sqrt(var[j] + bn.epsilon);

  Tensor<T> out(x.shape());
  Storage<T> xhat(x.size());
  {
    const T* __restrict in = v.data();
    const T* __restrict g = bn.gamma.value().node()->data.data();
    const T* __restrict b = bn.beta.value().node()->data.data();
    T* __restrict o = out.node()->data.data();
    T* __restrict xh = xhat.data();
    const T* mu = mean.data();
    const T* is = inv_std.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * c;
      for (std::size_t j = 0; j < c; ++j) {
        xh[base + j] = (in[base + j] - mu[j]) * is[j];
        o[base + j] = g[j] * xh[base + j] + b[j];
      }
    }
  }
  auto* xp = x.node().get();
  auto* gp = bn.gamma.value().node().get();
  auto* bp = bn.beta.value().node().get();
  auto* op = out.node().get();
  const bool train = mode == BatchNormMode::train;
  record<T>(train ? "batch_norm_train" : "batch_norm_inference",
            {x.node(), bn.gamma.value().node(), bn.beta.value().node()}, out,
            [xp, gp, bp, op, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c, train] {
              const T* __restrict dy = op->grad.data();
              const T* __restrict xh = xhat.data();
              std::vector<T> sum_dy(c, T(0));
              std::vector<T> sum_dy_xhat(c, T(0));
              T* __restrict sd = sum_dy.data();
              T* __restrict sdx = sum_dy_xhat.data();
              for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * c;
                for (std::size_t j = 0; j < c; ++j) {
                  sd[j] += dy[base + j];
                  sdx[j] += dy[base + j] * xh[base + j];
                }
              }
              if (gp->requires_grad) for (std::size_t j = 0; j < c; ++j) gp->grad[j] += sum_dy_xhat[j];
              if (bp->requires_grad) for (std::size_t j = 0; j < c; ++j) bp->grad[j] += sum_dy[j];
              if (!xp->requires_grad) return;
              const T n = static_cast<T>(rows);
              std::vector<T> scale(c), shift(c), slope(c);
              for (std::size_t j = 0; j < c; ++j) {
                scale[j] = gp->data[j] * inv_std[j];
                shift[j] = train ? sum_dy[j] / n : T(0);
                slope[j] = train ? sum_dy_xhat[j] / n : T(0);
              }
              T* __restrict dx = xp->grad.data();
              const T* sc = scale.data();
              const T* sh = shift.data();
              const T* sl = slope.data();
              for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * c;
                for (std::size_t j = 0; j < c; ++j) {
                  dx[base + j] += sc[j] * (dy[base + j] - sh[j] - xh[base + j] * sl[j]);
                }
              }
            });
  return out;
}

// --- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, std::size_t axis, Reduce kind) {
  require(axis < x.rank(), "reduce: axis " + std::to_string(axis) + " invalid for shape " +
                               shape_string(x.shape()));
  const std::size_t len = x.dim(axis);
  require(len > 0, "reduce: empty axis " + std::to_string(axis) + " in shape " + shape_string(x.shape()));
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(shape);
  auto& o = out.node()->data;
  const auto& v = x.node()->data;
  std::vector<std::size_t> argmax;
  if (kind == Reduce::max) argmax.resize(outer * inner);
  // The reduced axis is the outer loop so the inner loop walks contiguous memory.
  for (std::size_t a = 0; a < outer; ++a) {
    const T* block = v.data() + a * len * inner;
    T* res = o.data() + a * inner;
    if (kind == Reduce::max) {
      std::size_t* best = argmax.data() + a * inner;
      std::copy(block, block + inner, res);
      for (std::size_t i = 1; i < len; ++i) {
        const T* row = block + i * inner;
        for (std::size_t b = 0; b < inner; ++b) {
          // A NaN wins, and stays, so it reaches the divergence check.
          if (std::isnan(res[b])) continue;
          if (row[b] > res[b] || std::isnan(row[b])) {
            res[b] = row[b];
            best[b] = i;
          }
        }
      }
    } else {
      for (std::size_t i = 0; i < len; ++i) {
        const T* row = block + i * inner;
        for (std::size_t b = 0; b < inner; ++b) res[b] += row[b];
      }
      if (kind == Reduce::mean) {
        for (std::size_t b = 0; b < inner; ++b) res[b] /= static_cast<T>(len);
      }
    }
  }
  if (kind == Reduce::max && BranchSignature::enabled()) {
    for (std::size_t i : argmax) BranchSignature::mix(i);
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  const char* name = kind == Reduce::max ? "reduce_max" : kind == Reduce::mean ? "reduce_mean" : "reduce_sum";
  record<T>(name, {x.node()}, out, [xp, op, argmax = std::move(argmax), outer, len, inner, kind] {
    for (std::size_t a = 0; a < outer; ++a) {
      const T* g = op->grad.data() + a * inner;
      T* dx = xp->grad.data() + a * len * inner;
      if (kind == Reduce::max) {
        for (std::size_t b = 0; b < inner; ++b) dx[argmax[a * inner + b] * inner + b] += g[b];
        continue;
      }
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t b = 0; b < inner; ++b) {
          dx[i * inner + b] += kind == Reduce::mean ? g[b] / static_cast<T>(len) : g[b];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  auto* xp = x.node().get();
  auto* op = out.node().get();
  record<T>("sum_all", {x.node()}, out, [xp, op] {
    const T g = op->grad[0];
    for (auto& d : xp->grad) d += g;
  });
  return out;
}

#define EPC_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                     \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> concat(std::span<const Tensor<T>>);                                  \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                    \
  template Tensor<T> transpose(const Tensor<T>&);                                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);         \
  template Tensor<T> row_scale(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> relu(const Tensor<T>&);                                              \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> l2_normalize(const Tensor<T>&);                                      \
  template struct BatchNormParams<T>;                                                     \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormParams<T>&, BatchNormMode);    \
  template Tensor<T> reduce(const Tensor<T>&, std::size_t, Reduce);                       \
  template Tensor<T> sum_all(const Tensor<T>&);

EPC_INSTANTIATE_OPS(float)
EPC_INSTANTIATE_OPS(double)

}  // namespace epc
