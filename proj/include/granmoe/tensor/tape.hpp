#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "granmoe/tensor/tensor.hpp"

namespace granmoe {

template <typename Scalar>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename Scalar>
struct BasicVar {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const RowMatrix<Scalar>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so every node's
// inputs always have smaller ids and a single reverse sweep is a valid
// topological traversal.
template <typename Scalar>
class Tape {
 public:
  using Mat = RowMatrix<Scalar>;
  using Var = BasicVar<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  Var constant(Mat value) { return append(std::move(value), false, nullptr, nullptr); }

  // Leaf bound to a parameter tensor. Frozen leaves never receive gradient;
  // trainable ones have their gradient added into the tensor's grad buffer
  // at the end of backward().
  Var parameter(BasicTensor<Scalar>& tensor, bool trainable = true) {
    return append(tensor.values(), trainable, nullptr, &tensor);
  }

  Var push(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
    return append(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  Var push(Mat value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
    return append(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  const Mat& value(Var v) const { return node(v.id).value; }
  const Mat& value(int id) const { return node(id).value; }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  // Gradient of the last backward() with respect to v; zeros if v was not reached.
  Mat grad(Var v) const {
    const Node& n = node(v.id);
    if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward(Var loss) {
    Node& out = node(loss.id);
    if (out.value.rows() != 1 || out.value.cols() != 1) {
      throw ContractError("backward requires a scalar loss, got " + std::to_string(out.value.rows()) + "x" +
                          std::to_string(out.value.cols()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    if (!out.requires_grad) return;
    out.grad = Mat::Ones(1, 1);
    out.has_grad = true;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.param != nullptr && n.has_grad) n.param->grad() += n.grad;
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    BasicTensor<Scalar>* param = nullptr;
  };

  Var append(Mat value, bool requires_grad, BackwardFn fn, BasicTensor<Scalar>* param) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  Node& node(int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) throw ContractError("variable not on this tape");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) throw ContractError("variable not on this tape");
    return nodes_[static_cast<std::size_t>(id)];
  }

  std::vector<Node> nodes_;
};

using Var = BasicVar<double>;
using DoubleTape = Tape<double>;

namespace detail {

inline std::string dims(Index r, Index c) { return "[" + std::to_string(r) + "x" + std::to_string(c) + "]"; }

template <typename Scalar>
void require_same_shape(const char* op, const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + dims(a.rows(), a.cols()) + " and " +
                         dims(b.rows(), b.cols()) + " differ");
  }
}

template <typename Scalar>
void require_finite(const char* op, const RowMatrix<Scalar>& a) {
  if (!a.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---- linear algebra ---------------------------------------------------------

template <typename Scalar>
BasicVar<Scalar> matmul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + detail::dims(av.rows(), av.cols()) + " and " +
                         detail::dims(bv.rows(), bv.cols()));
  }
  RowMatrix<Scalar> out = av * bv;
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    if (t.requires_grad({&t, ia})) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad({&t, ib})) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename Scalar>
BasicVar<Scalar> transpose(BasicVar<Scalar> a) {
  RowMatrix<Scalar> out = a.value().transpose();
  const int ia = a.id;
  return a.tape->push(std::move(out), {a},
                      [ia](Tape<Scalar>& t, const RowMatrix<Scalar>& g) { t.accumulate(ia, g.transpose()); });
}

// ---- elementwise -------------------------------------------------------------

// a + b. b may also be a single row broadcast over a's rows (bias add).
template <typename Scalar>
BasicVar<Scalar> add(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const int ia = a.id, ib = b.id;
  if (bv.rows() == 1 && av.rows() != 1 && bv.cols() == av.cols()) {
    RowMatrix<Scalar> out = av.rowwise() + bv.row(0);
    return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
      t.accumulate(ia, g);
      t.accumulate(ib, g.colwise().sum());
    });
  }
  detail::require_same_shape("add", av, bv);
  RowMatrix<Scalar> out = av + bv;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename Scalar>
BasicVar<Scalar> sub(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_shape("sub", a.value(), b.value());
  RowMatrix<Scalar> out = a.value() - b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

template <typename Scalar>
BasicVar<Scalar> mul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_shape("mul", a.value(), b.value());
  RowMatrix<Scalar> out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    if (t.requires_grad({&t, ia})) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad({&t, ib})) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename Scalar>
BasicVar<Scalar> operator+(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
BasicVar<Scalar> operator-(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  return sub(a, b);
}

template <typename Scalar>
BasicVar<Scalar> scale(BasicVar<Scalar> a, Scalar s) {
  RowMatrix<Scalar> out = a.value() * s;
  const int ia = a.id;
  return a.tape->push(std::move(out), {a},
                      [ia, s](Tape<Scalar>& t, const RowMatrix<Scalar>& g) { t.accumulate(ia, g * s); });
}

// Multiplies row i of x by c(i, 0).
template <typename Scalar>
BasicVar<Scalar> scale_rows(BasicVar<Scalar> x, BasicVar<Scalar> c) {
  const auto& xv = x.value();
  const auto& cv = c.value();
  if (cv.cols() != 1 || cv.rows() != xv.rows()) {
    throw DimensionError("scale_rows: expected column " + detail::dims(xv.rows(), 1) + ", got " +
                         detail::dims(cv.rows(), cv.cols()));
  }
  RowMatrix<Scalar> out = xv.array().colwise() * cv.col(0).array();
  const int ix = x.id, ic = c.id;
  return x.tape->push(std::move(out), {x, c}, [ix, ic](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    const auto& cvv = t.value(ic);
    if (t.requires_grad({&t, ix})) {
      RowMatrix<Scalar> gx = g.array().colwise() * cvv.col(0).array();
      t.accumulate(ix, gx);
    }
    if (t.requires_grad({&t, ic})) {
      RowMatrix<Scalar> gc = g.cwiseProduct(t.value(ix)).rowwise().sum();
      t.accumulate(ic, gc);
    }
  });
}

// Exact GELU, x * Phi(x).
template <typename Scalar>
BasicVar<Scalar> gelu(BasicVar<Scalar> a) {
  const auto& av = a.value();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  RowMatrix<Scalar> out =
      av.unaryExpr([inv_sqrt2](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
  const int ia = a.id;
  return a.tape->push(std::move(out), {a}, [ia, inv_sqrt2](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    RowMatrix<Scalar> d = t.value(ia).unaryExpr([&](Scalar x) {
      return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-Scalar(0.5) * x * x);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

// ---- normalisation -----------------------------------------------------------

namespace detail {

template <typename Scalar>
RowMatrix<Scalar> softmax_rows_value(const RowMatrix<Scalar>& x, bool causal) {
  RowMatrix<Scalar> y = RowMatrix<Scalar>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Index n = causal ? std::min<Index>(r + 1, x.cols()) : x.cols();
    auto row = x.row(r).head(n);
    const Scalar m = row.maxCoeff();
    y.row(r).head(n) = (row.array() - m).exp();
    y.row(r).head(n) /= y.row(r).head(n).sum();
  }
  return y;
}

template <typename Scalar>
BasicVar<Scalar> softmax_impl(BasicVar<Scalar> x, bool causal) {
  require_finite(causal ? "causal_softmax" : "softmax_rows", x.value());
  RowMatrix<Scalar> y = softmax_rows_value(x.value(), causal);
  const int ix = x.id;
  auto* tape = x.tape;
  const int iy = static_cast<int>(tape->size());
  return tape->push(std::move(y), {x}, [ix, iy](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    const auto& yv = t.value(iy);
    RowMatrix<Scalar> gy = g.cwiseProduct(yv);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = gy.rowwise().sum();
    RowMatrix<Scalar> gx = gy - (yv.array().colwise() * dot.array()).matrix();
    t.accumulate(ix, gx);
  });
}

}  // namespace detail

// Row-wise softmax with max subtraction.
template <typename Scalar>
BasicVar<Scalar> softmax_rows(BasicVar<Scalar> x) {
  return detail::softmax_impl(x, false);
}

// Softmax of row i over columns 0..i only; later columns get probability 0.
template <typename Scalar>
BasicVar<Scalar> causal_softmax(BasicVar<Scalar> x) {
  return detail::softmax_impl(x, true);
}

template <typename Scalar>
BasicVar<Scalar> layer_norm(BasicVar<Scalar> x, BasicVar<Scalar> gain, BasicVar<Scalar> bias, Scalar eps) {
  const auto& xv = x.value();
  const Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw DimensionError("layer_norm: gain " + detail::dims(gain.rows(), gain.cols()) + " / bias " +
                         detail::dims(bias.rows(), bias.cols()) + " must be [1x" + std::to_string(n) + "]");
  }
  RowMatrix<Scalar> xhat(xv.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_sigma(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_sigma(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_sigma(r);
  }
  RowMatrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Tape<Scalar>& t,
                                                                              const RowMatrix<Scalar>& g) {
        t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        t.accumulate(ib, g.colwise().sum());
        if (!t.requires_grad({&t, ix})) return;
        RowMatrix<Scalar> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
        RowMatrix<Scalar> dx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar m1 = dxhat.row(r).mean();
          const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_sigma(r);
        }
        t.accumulate(ix, dx);
      });
}

// ---- indexing ---------------------------------------------------------------

// Row lookup into an embedding table; backward scatter-adds into the table.
template <typename Scalar>
BasicVar<Scalar> embedding(BasicVar<Scalar> table, std::vector<int> ids) {
  const auto& tv = table.value();
  RowMatrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  const int it = table.id;
  return table.tape->push(std::move(out), {table},
                          [it, ids = std::move(ids)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
                            const auto& tv2 = t.value(it);
                            RowMatrix<Scalar> gt = RowMatrix<Scalar>::Zero(tv2.rows(), tv2.cols());
                            for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Index>(i));
                            t.accumulate(it, gt);
                          });
}

template <typename Scalar>
BasicVar<Scalar> gather_rows(BasicVar<Scalar> x, std::vector<Index> rows) {
  const auto& xv = x.value();
  RowMatrix<Scalar> out(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw DimensionError("gather_rows: row index out of range");
    out.row(static_cast<Index>(i)) = xv.row(rows[i]);
  }
  const int ix = x.id;
  const Index n = xv.rows();
  return x.tape->push(std::move(out), {x},
                      [ix, n, rows = std::move(rows)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
                        RowMatrix<Scalar> gx = RowMatrix<Scalar>::Zero(n, g.cols());
                        for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Index>(i));
                        t.accumulate(ix, gx);
                      });
}

// Inverse of gather_rows: places row i of x at output row rows[i], zeros elsewhere.
template <typename Scalar>
BasicVar<Scalar> scatter_rows(BasicVar<Scalar> x, std::vector<Index> rows, Index n_rows) {
  const auto& xv = x.value();
  if (static_cast<Index>(rows.size()) != xv.rows()) throw DimensionError("scatter_rows: index count mismatch");
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(n_rows, xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n_rows) throw DimensionError("scatter_rows: row index out of range");
    out.row(rows[i]) += xv.row(static_cast<Index>(i));
  }
  const int ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, rows = std::move(rows)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> gx(static_cast<Index>(rows.size()), g.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) gx.row(static_cast<Index>(i)) = g.row(rows[i]);
    t.accumulate(ix, gx);
  });
}

template <typename Scalar>
BasicVar<Scalar> slice_cols(BasicVar<Scalar> x, Index begin, Index count) {
  const auto& xv = x.value();
  if (begin < 0 || count < 0 || begin + count > xv.cols()) throw DimensionError("slice_cols: range out of bounds");
  RowMatrix<Scalar> out = xv.middleCols(begin, count);
  const int ix = x.id;
  const Index total = xv.cols();
  return x.tape->push(std::move(out), {x}, [ix, begin, count, total](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> gx = RowMatrix<Scalar>::Zero(g.rows(), total);
    gx.middleCols(begin, count) = g;
    t.accumulate(ix, gx);
  });
}

template <typename Scalar>
BasicVar<Scalar> slice_rows(BasicVar<Scalar> x, Index begin, Index count) {
  const auto& xv = x.value();
  if (begin < 0 || count < 0 || begin + count > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
  RowMatrix<Scalar> out = xv.middleRows(begin, count);
  const int ix = x.id;
  const Index total = xv.rows();
  return x.tape->push(std::move(out), {x}, [ix, begin, count, total](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> gx = RowMatrix<Scalar>::Zero(total, g.cols());
    gx.middleRows(begin, count) = g;
    t.accumulate(ix, gx);
  });
}

template <typename Scalar>
BasicVar<Scalar> concat_rows(const std::vector<BasicVar<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  RowMatrix<Scalar> out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.rows();
  }
  return parts.front().tape->push(std::move(out), parts,
                                  [spans = std::move(spans)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
                                    for (const auto& [id, off] : spans) {
                                      if (t.requires_grad({&t, id})) t.accumulate(id, g.middleRows(off, t.value(id).rows()));
                                    }
                                  });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(const std::vector<BasicVar<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  RowMatrix<Scalar> out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.cols();
  }
  return parts.front().tape->push(std::move(out), parts,
                                  [spans = std::move(spans)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
                                    for (const auto& [id, off] : spans) {
                                      if (t.requires_grad({&t, id})) t.accumulate(id, g.middleCols(off, t.value(id).cols()));
                                    }
                                  });
}

// ---- reductions -------------------------------------------------------------

template <typename Scalar>
BasicVar<Scalar> sum(BasicVar<Scalar> x) {
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id;
  const Index r = x.rows(), c = x.cols();
  return x.tape->push(std::move(out), {x}, [ix, r, c](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    t.accumulate(ix, RowMatrix<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <typename Scalar>
BasicVar<Scalar> mean(BasicVar<Scalar> x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

// Column means as a single row.
template <typename Scalar>
BasicVar<Scalar> col_mean(BasicVar<Scalar> x) {
  const Index r = x.rows();
  if (r == 0) throw DegenerateInputError("col_mean: no rows");
  RowMatrix<Scalar> out = x.value().colwise().mean();
  const int ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, r](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> gx = (g / static_cast<Scalar>(r)).replicate(r, 1);
    t.accumulate(ix, gx);
  });
}

// ---- loss -------------------------------------------------------------------

// Mean over masked rows of -log softmax(logits)[target]. This is the single
// value path used both by the tape op below and by loss audits.
template <typename Scalar>
Scalar cross_entropy_masked_value(const RowMatrix<Scalar>& logits, std::span<const int> targets,
                                  std::span<const std::uint8_t> mask) {
  if (static_cast<Index>(targets.size()) != logits.rows() || mask.size() != targets.size()) {
    throw DimensionError("cross_entropy_masked: " + std::to_string(logits.rows()) + " logit rows, " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) + " mask bits");
  }
  Scalar total = 0;
  std::size_t count = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= logits.cols()) throw DimensionError("cross_entropy_masked: target out of vocabulary");
    const auto row = logits.row(r);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    total += lse - row(tgt);
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy_masked: loss mask selects no positions");
  return total / static_cast<Scalar>(count);
}

template <typename Scalar>
BasicVar<Scalar> cross_entropy_masked(BasicVar<Scalar> logits, std::vector<int> targets,
                                      std::vector<std::uint8_t> mask) {
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = cross_entropy_masked_value<Scalar>(logits.value(), targets, mask);
  const int il = logits.id;
  return logits.tape->push(
      std::move(out), {logits},
      [il, targets = std::move(targets), mask = std::move(mask)](Tape<Scalar>& t, const RowMatrix<Scalar>& g) {
        const auto& lv = t.value(il);
        std::size_t count = 0;
        for (auto b : mask) count += b ? 1 : 0;
        const Scalar w = g(0, 0) / static_cast<Scalar>(count);
        RowMatrix<Scalar> gl = RowMatrix<Scalar>::Zero(lv.rows(), lv.cols());
        for (Index r = 0; r < lv.rows(); ++r) {
          if (!mask[static_cast<std::size_t>(r)]) continue;
          const Scalar m = lv.row(r).maxCoeff();
          auto e = (lv.row(r).array() - m).exp();
          gl.row(r) = e / e.sum();
          gl(r, targets[static_cast<std::size_t>(r)]) -= Scalar(1);
          gl.row(r) *= w;
        }
        t.accumulate(il, gl);
      });
}

}  // namespace granmoe
