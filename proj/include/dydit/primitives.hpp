#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "dydit/error.hpp"
#include "dydit/tensor.hpp"

namespace dydit {

/// Attribute map passed alongside the operands of a primitive.
class Attrs {
 public:
  using Value = std::variant<double, std::int64_t, std::vector<std::int64_t>, std::vector<std::uint8_t>>;

  Attrs() = default;

  Attrs& set(const std::string& key, Value value) {
    values_[key] = std::move(value);
    return *this;
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  double real(const std::string& key) const { return get<double>(key); }
  std::int64_t integer(const std::string& key) const { return get<std::int64_t>(key); }
  const std::vector<std::int64_t>& ints(const std::string& key) const { return get<std::vector<std::int64_t>>(key); }
  const std::vector<std::uint8_t>& mask(const std::string& key) const { return get<std::vector<std::uint8_t>>(key); }

 private:
  template <typename V>
  const V& get(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), "missing attribute '", key, "'");
    const V* v = std::get_if<V>(&it->second);
    require(v != nullptr, "attribute '", key, "' has the wrong type");
    return *v;
  }

  std::map<std::string, Value> values_;
};

// ---------------------------------------------------------------------------
// Matmul tracing: every executed matmul can be logged with its dimensions and
// the model region it ran in. The FLOPs counting oracle reads this log.

struct MatmulRecord {
  std::int64_t batch = 1;
  std::int64_t m = 0;
  std::int64_t k = 0;
  std::int64_t n = 0;
  std::string region;
};

struct MatmulTrace {
  std::vector<MatmulRecord> records;
};

namespace detail {

inline MatmulTrace*& active_trace() {
  thread_local MatmulTrace* trace = nullptr;
  return trace;
}

inline std::string& active_region() {
  thread_local std::string region = "other";
  return region;
}

}  // namespace detail

class TraceScope {
 public:
  explicit TraceScope(MatmulTrace& trace) : previous_(detail::active_trace()) { detail::active_trace() = &trace; }
  ~TraceScope() { detail::active_trace() = previous_; }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;

 private:
  MatmulTrace* previous_;
};

class TraceRegion {
 public:
  explicit TraceRegion(std::string name) : previous_(detail::active_region()) {
    detail::active_region() = std::move(name);
  }
  ~TraceRegion() { detail::active_region() = previous_; }
  TraceRegion(const TraceRegion&) = delete;
  TraceRegion& operator=(const TraceRegion&) = delete;

 private:
  std::string previous_;
};

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void accumulate(TensorNode<T>& node, std::span<const T> g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

template <typename T>
TensorNode<T>& grad_target(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node;
}

// Builds the result node and, when recording is on and some operand needs a
// gradient, links it into the computation record.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::span<const BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->op = op;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (std::int64_t d = static_cast<std::int64_t>(shape.size()) - 2; d >= 0; --d) {
    s[static_cast<std::size_t>(d)] = s[static_cast<std::size_t>(d + 1)] * shape[static_cast<std::size_t>(d + 1)];
  }
  return s;
}

// Visits every index of `shape` in row-major order, calling f(linear, offset)
// where offset = base + sum(index[d] * strides[d]).
template <typename F>
void walk(const Shape& shape, const std::vector<std::int64_t>& strides, std::int64_t base, F&& f) {
  const std::int64_t n = numel(shape);
  if (n == 0) return;
  if (shape.empty()) {
    f(std::int64_t{0}, base);
    return;
  }
  const std::size_t rank = shape.size();
  std::vector<std::int64_t> idx(rank, 0);
  const std::int64_t inner = shape.back();
  const std::int64_t inner_stride = strides.back();
  std::int64_t offset = base;
  for (std::int64_t lin = 0; lin < n; lin += inner) {
    std::int64_t s = offset;
    for (std::int64_t j = 0; j < inner; ++j, s += inner_stride) f(lin + j, s);
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 2; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      offset += strides[ud];
      if (idx[ud] < shape[ud]) break;
      offset -= strides[ud] * shape[ud];
      idx[ud] = 0;
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += G[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* da, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * G[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* db, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* dbrow = db + p * n;
      for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

template <typename T>
using Inputs = std::span<const BasicTensor<T>>;

template <typename T>
void expect_arity(const char* op, Inputs<T> in, std::size_t n) {
  require(in.size() == n, op, ": expected ", n, " operand(s), got ", in.size());
}

template <typename T>
void expect_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

inline std::size_t axis_index(const char* op, std::int64_t axis, std::size_t rank) {
  if (axis < 0) axis += static_cast<std::int64_t>(rank);
  require(axis >= 0 && axis < static_cast<std::int64_t>(rank), op, ": axis ", axis, " out of range for rank ", rank);
  return static_cast<std::size_t>(axis);
}

// --- individual primitives -------------------------------------------------

template <typename T>
BasicTensor<T> prim_matmul(Inputs<T> in, const Attrs&) {
  expect_arity("matmul", in, 2);
  const auto& a = in[0];
  const auto& b = in[1];
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::int64_t batch = 1;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2) {
    require(as[1] == bs[0], "matmul: shape mismatch ", shape_str(as), " vs ", shape_str(bs));
    out_shape = {as[0], bs[1]};
  } else if (as.size() == 3 && bs.size() == 3) {
    require(as[0] == bs[0] && as[2] == bs[1], "matmul: shape mismatch ", shape_str(as), " vs ", shape_str(bs));
    batch = as[0];
    out_shape = {as[0], as[1], bs[2]};
  } else {
    fail("matmul: shape mismatch ", shape_str(as), " vs ", shape_str(bs), " (operands must both be rank 2 or rank 3)");
  }
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as.back();
  const std::int64_t n = bs.back();
  if (auto* trace = active_trace()) trace->records.push_back({batch, m, k, n, active_region()});

  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    gemm_nn(a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n, m, k, n);
  }
  return make_result<T>("matmul", out_shape, std::move(out), in, [batch, m, k, n](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T* g = self.grad.data();
    if (na.requires_grad) {
      T* da = grad_target(na).grad.data();
      for (std::int64_t bi = 0; bi < batch; ++bi)
        gemm_nt(g + bi * m * n, nb.data.data() + bi * k * n, da + bi * m * k, m, k, n);
    }
    if (nb.requires_grad) {
      T* db = grad_target(nb).grad.data();
      for (std::int64_t bi = 0; bi < batch; ++bi)
        gemm_tn(na.data.data() + bi * m * k, g + bi * m * n, db + bi * k * n, m, k, n);
    }
  });
}

template <typename T>
BasicTensor<T> prim_add(Inputs<T> in, const Attrs&) {
  expect_arity("add", in, 2);
  expect_same_shape("add", in[0], in[1]);
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  auto b = in[1].data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return make_result<T>("add", in[0].shape(), std::move(out), in, [](TensorNode<T>& self) {
    accumulate<T>(*self.inputs[0], self.grad);
    accumulate<T>(*self.inputs[1], self.grad);
  });
}

template <typename T>
BasicTensor<T> prim_mul(Inputs<T> in, const Attrs&) {
  expect_arity("mul", in, 2);
  expect_same_shape("mul", in[0], in[1]);
  auto a = in[0].data();
  auto b = in[1].data();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", in[0].shape(), std::move(out), in, [](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = grad_target(na).grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& gb = grad_target(nb).grad;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> prim_scale(Inputs<T> in, const Attrs& attrs) {
  expect_arity("scale", in, 1);
  const T factor = static_cast<T>(attrs.real("factor"));
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", in[0].shape(), std::move(out), in, [factor](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& ga = grad_target(na).grad;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

template <typename T>
BasicTensor<T> prim_softmax_rows(Inputs<T> in, const Attrs&) {
  expect_arity("softmax_rows", in, 1);
  const auto& a = in[0];
  require(a.rank() >= 1, "softmax_rows: shape mismatch ", shape_str(a.shape()), " vs [.., n]");
  const std::int64_t cols = a.dim(-1);
  const std::int64_t rows = cols == 0 ? 0 : a.numel() / cols;
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * cols;
    T mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    T total = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    const T inv = T(1) / total;
    for (std::int64_t j = 0; j < cols; ++j) row[j] *= inv;
  }
  return make_result<T>("softmax_rows", a.shape(), std::move(out), in, [rows, cols](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& ga = grad_target(na).grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* g = self.grad.data() + r * cols;
      T dot = 0;
      for (std::int64_t j = 0; j < cols; ++j) dot += g[j] * y[j];
      for (std::int64_t j = 0; j < cols; ++j) ga[static_cast<std::size_t>(r * cols + j)] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
BasicTensor<T> prim_sigmoid(Inputs<T> in, const Attrs&) {
  expect_arity("sigmoid", in, 1);
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  return make_result<T>("sigmoid", in[0].shape(), std::move(out), in, [](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T y = self.data[i];
      ga[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
BasicTensor<T> prim_gelu(Inputs<T> in, const Attrs&) {
  expect_arity("gelu", in, 1);
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (auto& v : out) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return make_result<T>("gelu", in[0].shape(), std::move(out), in, [inv_sqrt2](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& ga = grad_target(na).grad;
    const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x = na.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      ga[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
BasicTensor<T> prim_layer_norm(Inputs<T> in, const Attrs&) {
  expect_arity("layer_norm", in, 1);
  const auto& a = in[0];
  require(a.rank() >= 1 && a.dim(-1) > 0, "layer_norm: shape mismatch ", shape_str(a.shape()), " vs [.., n>0]");
  const std::int64_t cols = a.dim(-1);
  const std::int64_t rows = a.numel() / cols;
  std::vector<T> out(a.data().size());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  auto x = a.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * cols;
    double mean = 0;
    for (std::int64_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[static_cast<std::size_t>(r)] = static_cast<T>(rs);
    for (std::int64_t j = 0; j < cols; ++j) out[static_cast<std::size_t>(r * cols + j)] = static_cast<T>((xr[j] - mean) * rs);
  }
  return make_result<T>("layer_norm", a.shape(), std::move(out), in,
                        [rows, cols, rstd = std::move(rstd)](TensorNode<T>& self) {
                          auto& ga = grad_target(*self.inputs[0]).grad;
                          for (std::int64_t r = 0; r < rows; ++r) {
                            const T* xh = self.data.data() + r * cols;
                            const T* g = self.grad.data() + r * cols;
                            double mg = 0;
                            double mgx = 0;
                            for (std::int64_t j = 0; j < cols; ++j) {
                              mg += g[j];
                              mgx += static_cast<double>(g[j]) * xh[j];
                            }
                            mg /= static_cast<double>(cols);
                            mgx /= static_cast<double>(cols);
                            const double rs = rstd[static_cast<std::size_t>(r)];
                            for (std::int64_t j = 0; j < cols; ++j) {
                              ga[static_cast<std::size_t>(r * cols + j)] += static_cast<T>(rs * (g[j] - mg - xh[j] * mgx));
                            }
                          }
                        });
}

template <typename T>
std::vector<std::int64_t> selected_rows(const char* op, const std::vector<std::uint8_t>& mask, std::int64_t rows) {
  require(static_cast<std::int64_t>(mask.size()) == rows, op, ": shape mismatch mask[", mask.size(), "] vs rows ", rows);
  std::vector<std::int64_t> idx;
  for (std::int64_t r = 0; r < rows; ++r)
    if (mask[static_cast<std::size_t>(r)]) idx.push_back(r);
  return idx;
}

template <typename T>
BasicTensor<T> prim_gather_rows(Inputs<T> in, const Attrs& attrs) {
  expect_arity("gather_rows", in, 1);
  const auto& a = in[0];
  require(a.rank() == 2, "gather_rows: shape mismatch ", shape_str(a.shape()), " vs [rows, cols]");
  const std::int64_t cols = a.dim(1);
  auto idx = selected_rows<T>("gather_rows", attrs.mask("mask"), a.dim(0));
  std::vector<T> out(idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(a.data().data() + idx[i] * cols, cols, out.data() + static_cast<std::int64_t>(i) * cols);
  Shape shape{static_cast<std::int64_t>(idx.size()), cols};
  return make_result<T>("gather_rows", shape, std::move(out), in, [cols, idx = std::move(idx)](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::int64_t j = 0; j < cols; ++j)
        ga[static_cast<std::size_t>(idx[i] * cols + j)] += self.grad[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)];
  });
}

// operands: (rows, fill); result = fill with the selected rows replaced.
template <typename T>
BasicTensor<T> prim_scatter_rows(Inputs<T> in, const Attrs& attrs) {
  expect_arity("scatter_rows", in, 2);
  const auto& rows_t = in[0];
  const auto& fill = in[1];
  require(fill.rank() == 2, "scatter_rows: shape mismatch ", shape_str(fill.shape()), " vs [rows, cols]");
  const std::int64_t cols = fill.dim(1);
  auto idx = selected_rows<T>("scatter_rows", attrs.mask("mask"), fill.dim(0));
  require(rows_t.rank() == 2 && rows_t.dim(0) == static_cast<std::int64_t>(idx.size()) && rows_t.dim(1) == cols,
          "scatter_rows: shape mismatch ", shape_str(rows_t.shape()), " vs ", shape_str(fill.shape()), " with ",
          idx.size(), " selected rows");
  std::vector<T> out(fill.data().begin(), fill.data().end());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(rows_t.data().data() + static_cast<std::int64_t>(i) * cols, cols, out.data() + idx[i] * cols);
  std::vector<std::uint8_t> mask = attrs.mask("mask");
  return make_result<T>("scatter_rows", fill.shape(), std::move(out), in,
                        [cols, idx = std::move(idx), mask = std::move(mask)](TensorNode<T>& self) {
                          auto& nr = *self.inputs[0];
                          auto& nf = *self.inputs[1];
                          if (nr.requires_grad) {
                            auto& gr = grad_target(nr).grad;
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::int64_t j = 0; j < cols; ++j)
                                gr[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)] +=
                                    self.grad[static_cast<std::size_t>(idx[i] * cols + j)];
                          }
                          if (nf.requires_grad) {
                            auto& gf = grad_target(nf).grad;
                            for (std::size_t r = 0; r < mask.size(); ++r) {
                              if (mask[r]) continue;
                              for (std::int64_t j = 0; j < cols; ++j) {
                                auto o = r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j);
                                gf[o] += self.grad[o];
                              }
                            }
                          }
                        });
}

// Without "axis": total sum to a scalar. With "axis": reduces that axis.
template <typename T>
BasicTensor<T> prim_sum(Inputs<T> in, const Attrs& attrs) {
  expect_arity("sum", in, 1);
  const auto& a = in[0];
  if (!attrs.has("axis")) {
    double total = 0;
    for (T v : a.data()) total += v;
    return make_result<T>("sum", Shape{}, std::vector<T>{static_cast<T>(total)}, in, [](TensorNode<T>& self) {
      auto& ga = grad_target(*self.inputs[0]).grad;
      for (auto& g : ga) g += self.grad[0];
    });
  }
  const std::size_t axis = axis_index("sum", attrs.integer("axis"), a.shape().size());
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (std::size_t d = axis + 1; d < a.shape().size(); ++d) inner *= a.shape()[d];
  const std::int64_t len = a.shape()[axis];
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(static_cast<std::size_t>(outer * inner));
  auto x = a.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double acc = 0;
      for (std::int64_t l = 0; l < len; ++l) acc += x[static_cast<std::size_t>((o * len + l) * inner + i)];
      out[static_cast<std::size_t>(o * inner + i)] = static_cast<T>(acc);
    }
  return make_result<T>("sum", out_shape, std::move(out), in, [outer, inner, len](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t l = 0; l < len; ++l)
        for (std::int64_t i = 0; i < inner; ++i)
          ga[static_cast<std::size_t>((o * len + l) * inner + i)] += self.grad[static_cast<std::size_t>(o * inner + i)];
  });
}

template <typename T>
BasicTensor<T> prim_mean(Inputs<T> in, const Attrs&) {
  expect_arity("mean", in, 1);
  const auto& a = in[0];
  require(a.numel() > 0, "mean: shape mismatch ", shape_str(a.shape()), " vs non-empty");
  double total = 0;
  for (T v : a.data()) total += v;
  const double n = static_cast<double>(a.numel());
  return make_result<T>("mean", Shape{}, std::vector<T>{static_cast<T>(total / n)}, in, [n](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    const T g = static_cast<T>(self.grad[0] / n);
    for (auto& v : ga) v += g;
  });
}

template <typename T>
BasicTensor<T> prim_square(Inputs<T> in, const Attrs&) {
  expect_arity("square", in, 1);
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  for (auto& v : out) v *= v;
  return make_result<T>("square", in[0].shape(), std::move(out), in, [](TensorNode<T>& self) {
    auto& na = *self.inputs[0];
    auto& ga = grad_target(na).grad;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * na.data[i] * self.grad[i];
  });
}

template <typename T>
BasicTensor<T> prim_concat(Inputs<T> in, const Attrs& attrs) {
  require(!in.empty(), "concat: expected at least 1 operand");
  const std::size_t rank = in[0].shape().size();
  const std::size_t axis = axis_index("concat", attrs.has("axis") ? attrs.integer("axis") : 0, rank);
  Shape out_shape = in[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : in) {
    Shape probe = t.shape();
    require(probe.size() == rank, "concat: shape mismatch ", shape_str(in[0].shape()), " vs ", shape_str(probe));
    probe[axis] = in[0].shape()[axis];
    require(probe == in[0].shape(), "concat: shape mismatch ", shape_str(in[0].shape()), " vs ", shape_str(t.shape()));
    out_shape[axis] += t.shape()[axis];
  }
  const auto out_strides = row_major_strides(out_shape);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t at = 0;
  for (const auto& t : in) {
    offsets.push_back(at * out_strides[axis]);
    auto src = t.data();
    walk(t.shape(), out_strides, offsets.back(), [&](std::int64_t lin, std::int64_t o) { out[static_cast<std::size_t>(o)] = src[static_cast<std::size_t>(lin)]; });
    at += t.shape()[axis];
  }
  return make_result<T>("concat", out_shape, std::move(out), in,
                        [out_strides, offsets = std::move(offsets)](TensorNode<T>& self) {
                          for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                            auto& ni = *self.inputs[i];
                            if (!ni.requires_grad) continue;
                            auto& gi = grad_target(ni).grad;
                            walk(ni.shape, out_strides, offsets[i], [&](std::int64_t lin, std::int64_t o) {
                              gi[static_cast<std::size_t>(lin)] += self.grad[static_cast<std::size_t>(o)];
                            });
                          }
                        });
}

template <typename T>
BasicTensor<T> prim_slice(Inputs<T> in, const Attrs& attrs) {
  expect_arity("slice", in, 1);
  const auto& a = in[0];
  const std::size_t axis = axis_index("slice", attrs.integer("axis"), a.shape().size());
  const std::int64_t begin = attrs.integer("begin");
  const std::int64_t end = attrs.integer("end");
  require(0 <= begin && begin <= end && end <= a.shape()[axis], "slice: range [", begin, ",", end,
          ") out of bounds for shape ", shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const auto strides = row_major_strides(a.shape());
  const std::int64_t base = begin * strides[axis];
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  auto src = a.data();
  walk(out_shape, strides, base, [&](std::int64_t lin, std::int64_t o) { out[static_cast<std::size_t>(lin)] = src[static_cast<std::size_t>(o)]; });
  return make_result<T>("slice", out_shape, std::move(out), in, [strides, base](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    walk(self.shape, strides, base, [&](std::int64_t lin, std::int64_t o) { ga[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(lin)]; });
  });
}

template <typename T>
BasicTensor<T> prim_transpose(Inputs<T> in, const Attrs& attrs) {
  expect_arity("transpose", in, 1);
  const auto& a = in[0];
  const std::size_t rank = a.shape().size();
  std::vector<std::int64_t> perm;
  if (attrs.has("perm")) {
    perm = attrs.ints("perm");
  } else {
    require(rank >= 2, "transpose: shape mismatch ", shape_str(a.shape()), " vs rank >= 2");
    perm.resize(rank);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[rank - 1], perm[rank - 2]);
  }
  require(perm.size() == rank, "transpose: permutation of length ", perm.size(), " for shape ", shape_str(a.shape()));
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    require(p >= 0 && p < static_cast<std::int64_t>(rank) && !seen[static_cast<std::size_t>(p)], "transpose: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  const auto in_strides = row_major_strides(a.shape());
  Shape out_shape(rank);
  std::vector<std::int64_t> src_strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = a.shape()[static_cast<std::size_t>(perm[d])];
    src_strides[d] = in_strides[static_cast<std::size_t>(perm[d])];
  }
  std::vector<T> out(a.data().size());
  auto src = a.data();
  walk(out_shape, src_strides, 0, [&](std::int64_t lin, std::int64_t o) { out[static_cast<std::size_t>(lin)] = src[static_cast<std::size_t>(o)]; });
  return make_result<T>("transpose", out_shape, std::move(out), in, [src_strides](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    walk(self.shape, src_strides, 0, [&](std::int64_t lin, std::int64_t o) { ga[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(lin)]; });
  });
}

// Right-aligned broadcasting: each source extent must equal the target extent
// or be 1.
template <typename T>
BasicTensor<T> prim_broadcast(Inputs<T> in, const Attrs& attrs) {
  expect_arity("broadcast", in, 1);
  const auto& a = in[0];
  Shape out_shape(attrs.ints("shape"));
  const auto& as = a.shape();
  require(as.size() <= out_shape.size(), "broadcast: shape mismatch ", shape_str(as), " vs ", shape_str(out_shape));
  const auto in_strides = row_major_strides(as);
  std::vector<std::int64_t> src_strides(out_shape.size(), 0);
  const std::size_t lead = out_shape.size() - as.size();
  for (std::size_t d = 0; d < as.size(); ++d) {
    const auto od = lead + d;
    require(as[d] == out_shape[od] || as[d] == 1, "broadcast: shape mismatch ", shape_str(as), " vs ", shape_str(out_shape));
    src_strides[od] = as[d] == 1 ? 0 : in_strides[d];
  }
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  auto src = a.data();
  walk(out_shape, src_strides, 0, [&](std::int64_t lin, std::int64_t o) { out[static_cast<std::size_t>(lin)] = src[static_cast<std::size_t>(o)]; });
  return make_result<T>("broadcast", out_shape, std::move(out), in, [src_strides](TensorNode<T>& self) {
    auto& ga = grad_target(*self.inputs[0]).grad;
    walk(self.shape, src_strides, 0, [&](std::int64_t lin, std::int64_t o) { ga[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(lin)]; });
  });
}

template <typename T>
BasicTensor<T> prim_reshape(Inputs<T> in, const Attrs& attrs) {
  expect_arity("reshape", in, 1);
  Shape out_shape(attrs.ints("shape"));
  require(numel(out_shape) == in[0].numel(), "reshape: shape mismatch ", shape_str(in[0].shape()), " vs ",
          shape_str(out_shape));
  std::vector<T> out(in[0].data().begin(), in[0].data().end());
  return make_result<T>("reshape", out_shape, std::move(out), in,
                        [](TensorNode<T>& self) { accumulate<T>(*self.inputs[0], self.grad); });
}

template <typename T>
using PrimitiveFn = BasicTensor<T> (*)(Inputs<T>, const Attrs&);

template <typename T>
const std::unordered_map<std::string, PrimitiveFn<T>>& primitive_table() {
  static const std::unordered_map<std::string, PrimitiveFn<T>> table = {
      {"matmul", &prim_matmul<T>},       {"add", &prim_add<T>},
      {"mul", &prim_mul<T>},             {"scale", &prim_scale<T>},
      {"softmax_rows", &prim_softmax_rows<T>}, {"sigmoid", &prim_sigmoid<T>},
      {"gelu", &prim_gelu<T>},           {"layer_norm", &prim_layer_norm<T>},
      {"gather_rows", &prim_gather_rows<T>}, {"scatter_rows", &prim_scatter_rows<T>},
      {"sum", &prim_sum<T>},             {"mean", &prim_mean<T>},
      {"square", &prim_square<T>},       {"concat", &prim_concat<T>},
      {"slice", &prim_slice<T>},         {"transpose", &prim_transpose<T>},
      {"broadcast", &prim_broadcast<T>}, {"reshape", &prim_reshape<T>},
  };
  return table;
}

}  // namespace detail

/// Applies a named primitive. Records the application when any operand
/// requires a gradient and recording is enabled on this thread.
template <typename T>
BasicTensor<T> apply_primitive(const std::string& name, std::span<const BasicTensor<T>> inputs,
                               const Attrs& attrs = {}) {
  const auto& table = detail::primitive_table<T>();
  auto it = table.find(name);
  require(it != table.end(), "unknown primitive '", name, "'");
  for (const auto& t : inputs) require(t.defined(), name, ": undefined operand");
  return it->second(inputs, attrs);
}

template <typename T>
BasicTensor<T> apply_primitive(const std::string& name, std::initializer_list<BasicTensor<T>> inputs,
                               const Attrs& attrs = {}) {
  std::vector<BasicTensor<T>> v(inputs);
  return apply_primitive<T>(name, std::span<const BasicTensor<T>>(v), attrs);
}

/// Leaves that received a gradient during one reverse pass.
template <typename T>
using GradientMap = std::vector<BasicTensor<T>>;

/// Runs the reverse pass from a scalar loss, accumulating into every leaf that
/// requires a gradient. The record behind the loss is released afterwards.
template <typename T>
GradientMap<T> reverse_accumulate(const BasicTensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, "reverse_accumulate: loss must be a scalar, got shape ",
          loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>"));
  require(!loss.is_leaf() && loss.node()->backward, "reverse_accumulate: empty computation record");

  using NodeT = TensorNode<T>;
  using NodePtr = std::shared_ptr<NodeT>;
  // Iterative post-order DFS gives a topological order of recorded nodes.
  // The order owns its nodes: inputs are released as the record is consumed.
  std::vector<NodePtr> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++];
      if (child->requires_grad && !child->is_leaf() && visited.insert(child.get()).second)
        stack.push_back({std::move(child), 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  GradientMap<T> leaves;
  std::unordered_set<NodeT*> leaf_seen;
  order.back()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = it->get();
    if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
    node->backward(*node);
    for (auto& in : node->inputs) {
      if (in->requires_grad && in->is_leaf() && leaf_seen.insert(in.get()).second)
        leaves.push_back(BasicTensor<T>::from_node(in));
    }
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward = nullptr;
    node->inputs.clear();
  }
  return leaves;
}

// --- typed wrappers --------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return apply_primitive<T>("matmul", {a, b});
}
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return apply_primitive<T>("add", {a, b});
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return apply_primitive<T>("mul", {a, b});
}
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  return apply_primitive<T>("scale", {a}, Attrs().set("factor", factor));
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, scale(b, -1.0));
}
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a) {
  return apply_primitive<T>("softmax_rows", {a});
}
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return apply_primitive<T>("sigmoid", {a});
}
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  return apply_primitive<T>("gelu", {a});
}
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& a) {
  return apply_primitive<T>("layer_norm", {a});
}
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, const std::vector<std::uint8_t>& mask) {
  return apply_primitive<T>("gather_rows", {a}, Attrs().set("mask", mask));
}
template <typename T>
BasicTensor<T> scatter_rows(const BasicTensor<T>& rows, const std::vector<std::uint8_t>& mask,
                            const BasicTensor<T>& fill) {
  return apply_primitive<T>("scatter_rows", {rows, fill}, Attrs().set("mask", mask));
}
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  return apply_primitive<T>("sum", {a});
}
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a, std::int64_t axis) {
  return apply_primitive<T>("sum", {a}, Attrs().set("axis", axis));
}
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return apply_primitive<T>("mean", {a});
}
template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
  return apply_primitive<T>("square", {a});
}
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::int64_t axis) {
  return apply_primitive<T>("concat", std::span<const BasicTensor<T>>(parts), Attrs().set("axis", axis));
}
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::int64_t axis, std::int64_t begin, std::int64_t end) {
  return apply_primitive<T>("slice", {a},
                            Attrs().set("axis", axis).set("begin", begin).set("end", end));
}
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  return apply_primitive<T>("transpose", {a});
}
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a, std::vector<std::int64_t> perm) {
  return apply_primitive<T>("transpose", {a}, Attrs().set("perm", std::move(perm)));
}
template <typename T>
BasicTensor<T> broadcast(const BasicTensor<T>& a, Shape shape) {
  return apply_primitive<T>("broadcast", {a}, Attrs().set("shape", std::vector<std::int64_t>(std::move(shape))));
}
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  return apply_primitive<T>("reshape", {a}, Attrs().set("shape", std::vector<std::int64_t>(std::move(shape))));
}

}  // namespace dydit
