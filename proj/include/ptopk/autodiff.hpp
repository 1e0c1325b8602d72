#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ptopk/tensor.hpp"

namespace ptopk {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

/// Per-forward-pass computation record. Nodes are appended in evaluation
/// order, so every node only references earlier nodes and the record is
/// acyclic by construction; backward() re-validates this before sweeping.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated by backward()
    const char* op;
    std::vector<int> inputs;
    std::function<void(Tape&, const Node&)> backward;
  };

  Var append(Tensor value, const char* op, std::vector<int> inputs,
             std::function<void(Tape&, const Node&)> backward) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : inputs)
      if (in < 0 || in >= id) throw std::invalid_argument("tape: node input would create a cycle");
    nodes_.push_back(Node{std::move(value), Tensor(), op, std::move(inputs), std::move(backward)});
    return Var{this, id};
  }

  Var leaf(Tensor value) { return append(std::move(value), "leaf", {}, nullptr); }

  const Tensor& value(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).value; }
  const Tensor& grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).grad; }
  Tensor& grad_buf(int id) { return nodes_.at(static_cast<size_t>(id)).grad; }
  const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(nodes_.size()); }

  double scalar(Var v) const {
    const Tensor& t = value(v);
    if (t.size() != 1) throw std::invalid_argument("scalar() on non-scalar node");
    return t[0];
  }

  /// Reverse sweep from a scalar root: afterwards grad(v) holds d root / d v
  /// for every node v that the root depends on.
  void backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: var from another tape");
    const Node& r = nodes_.at(static_cast<size_t>(root.id));
    if (r.value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (size_t i = 0; i < nodes_.size(); ++i)
      for (int in : nodes_[i].inputs)
        if (in < 0 || in >= static_cast<int>(i))
          throw std::invalid_argument("backward: cyclic record");
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    nodes_[static_cast<size_t>(root.id)].grad[0] = 1.0f;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward) n.backward(*this, n);
    }
  }

 private:
  std::deque<Node> nodes_;  // stable references across append
};

namespace detail {

inline const Tensor& val(const Tape::Node& n, Tape& t, int slot) {
  return t.node(n.inputs[static_cast<size_t>(slot)]).value;
}

inline Tensor& grd(const Tape::Node& n, Tape& t, int slot) {
  return t.grad_buf(n.inputs[static_cast<size_t>(slot)]);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "add");
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(a)[i] + t.value(b)[i];
  return t.append(std::move(out), "add", {a.id, b.id}, [](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      detail::grd(n, t, 0)[i] += n.grad[i];
      detail::grd(n, t, 1)[i] += n.grad[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "sub");
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(a)[i] - t.value(b)[i];
  return t.append(std::move(out), "sub", {a.id, b.id}, [](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      detail::grd(n, t, 0)[i] += n.grad[i];
      detail::grd(n, t, 1)[i] -= n.grad[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "mul");
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(a)[i] * t.value(b)[i];
  return t.append(std::move(out), "mul", {a.id, b.id}, [](Tape& t, const Tape::Node& n) {
    const Tensor& av = detail::val(n, t, 0);
    const Tensor& bv = detail::val(n, t, 1);
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      detail::grd(n, t, 0)[i] += n.grad[i] * bv[i];
      detail::grd(n, t, 1)[i] += n.grad[i] * av[i];
    }
  });
}

inline Var scale(Var a, float c) {
  Tape& t = *a.tape;
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = c * t.value(a)[i];
  return t.append(std::move(out), "scale", {a.id}, [c](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i) detail::grd(n, t, 0)[i] += c * n.grad[i];
  });
}

inline Var add_const(Var a, float c) {
  Tape& t = *a.tape;
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(a)[i] + c;
  return t.append(std::move(out), "add_const", {a.id}, [](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i) detail::grd(n, t, 0)[i] += n.grad[i];
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(a)[i] > 0 ? t.value(a)[i] : 0.0f;
  return t.append(std::move(out), "relu", {a.id}, [](Tape& t, const Tape::Node& n) {
    const Tensor& av = detail::val(n, t, 0);
    for (int64_t i = 0; i < n.grad.size(); ++i)
      if (av[i] > 0) detail::grd(n, t, 0)[i] += n.grad[i];
  });
}

inline Var vexp(Var a) {
  Tape& t = *a.tape;
  Tensor out(t.value(a).shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(t.value(a)[i]);
  return t.append(std::move(out), "exp", {a.id}, [](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i)
      detail::grd(n, t, 0)[i] += n.grad[i] * n.value[i];
  });
}

// ---- shape ----

inline Var reshape(Var a, Shape s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(std::move(s));
  return t.append(std::move(out), "reshape", {a.id}, [](Tape& t, const Tape::Node& n) {
    for (int64_t i = 0; i < n.grad.size(); ++i) detail::grd(n, t, 0)[i] += n.grad[i];
  });
}

inline Var select_row(Var a, int row) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() < 1 || row < 0 || row >= av.dim(0))
    throw std::invalid_argument("select_row: row out of range");
  Shape s(av.shape().begin() + 1, av.shape().end());
  const int64_t stride = av.size() / av.dim(0);
  Tensor out(s);
  for (int64_t i = 0; i < stride; ++i) out[i] = av[row * stride + i];
  return t.append(std::move(out), "select_row", {a.id}, [row, stride](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int64_t i = 0; i < stride; ++i) g[row * stride + i] += n.grad[i];
  });
}

inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
  Tape& t = *rows[0].tape;
  const Tensor& first = t.value(rows[0]);
  const int64_t stride = first.size();
  Shape s;
  s.push_back(static_cast<int>(rows.size()));
  for (int d : first.shape()) s.push_back(d);
  Tensor out(s);
  std::vector<int> ids;
  for (size_t r = 0; r < rows.size(); ++r) {
    detail::check_same_shape(t.value(rows[r]), first, "stack_rows");
    for (int64_t i = 0; i < stride; ++i) out[static_cast<int64_t>(r) * stride + i] = t.value(rows[r])[i];
    ids.push_back(rows[r].id);
  }
  return t.append(std::move(out), "stack_rows", std::move(ids), [stride](Tape& t, const Tape::Node& n) {
    for (size_t r = 0; r < n.inputs.size(); ++r) {
      Tensor& g = detail::grd(n, t, static_cast<int>(r));
      for (int64_t i = 0; i < stride; ++i) g[i] += n.grad[static_cast<int64_t>(r) * stride + i];
    }
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0))
    throw std::invalid_argument("concat_cols: need 2-D inputs with equal row counts");
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  Tensor out({n, ca + cb});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < ca; ++j) out[static_cast<int64_t>(i) * (ca + cb) + j] = av[static_cast<int64_t>(i) * ca + j];
    for (int j = 0; j < cb; ++j) out[static_cast<int64_t>(i) * (ca + cb) + ca + j] = bv[static_cast<int64_t>(i) * cb + j];
  }
  return t.append(std::move(out), "concat_cols", {a.id, b.id}, [n, ca, cb](Tape& t, const Tape::Node& n_) {
    Tensor& ga = detail::grd(n_, t, 0);
    Tensor& gb = detail::grd(n_, t, 1);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < ca; ++j) ga[static_cast<int64_t>(i) * ca + j] += n_.grad[static_cast<int64_t>(i) * (ca + cb) + j];
      for (int j = 0; j < cb; ++j) gb[static_cast<int64_t>(i) * cb + j] += n_.grad[static_cast<int64_t>(i) * (ca + cb) + ca + j];
    }
  });
}

inline Var transpose2d(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw std::invalid_argument("transpose2d: need 2-D input");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(j) * m + i] = av[static_cast<int64_t>(i) * n + j];
  return t.append(std::move(out), "transpose2d", {a.id}, [m, n](Tape& t, const Tape::Node& n_) {
    Tensor& g = detail::grd(n_, t, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[static_cast<int64_t>(i) * n + j] += n_.grad[static_cast<int64_t>(j) * m + i];
  });
}

// ---- linear algebra ----

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                                shape_str(bv.shape()));
  const int m = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({m, q});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < q; ++j) {
      double acc = 0.0;
      for (int k = 0; k < p; ++k)
        acc += static_cast<double>(av[static_cast<int64_t>(i) * p + k]) * bv[static_cast<int64_t>(k) * q + j];
      out[static_cast<int64_t>(i) * q + j] = static_cast<float>(acc);
    }
  return t.append(std::move(out), "matmul", {a.id, b.id}, [m, p, q](Tape& t, const Tape::Node& n) {
    const Tensor& av = detail::val(n, t, 0);
    const Tensor& bv = detail::val(n, t, 1);
    Tensor& ga = detail::grd(n, t, 0);
    Tensor& gb = detail::grd(n, t, 1);
    for (int i = 0; i < m; ++i)
      for (int k = 0; k < p; ++k) {
        double acc = 0.0;
        for (int j = 0; j < q; ++j)
          acc += static_cast<double>(n.grad[static_cast<int64_t>(i) * q + j]) * bv[static_cast<int64_t>(k) * q + j];
        ga[static_cast<int64_t>(i) * p + k] += static_cast<float>(acc);
      }
    for (int k = 0; k < p; ++k)
      for (int j = 0; j < q; ++j) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i)
          acc += static_cast<double>(av[static_cast<int64_t>(i) * p + k]) * n.grad[static_cast<int64_t>(i) * q + j];
        gb[static_cast<int64_t>(k) * q + j] += static_cast<float>(acc);
      }
  });
}

// ---- reductions ----

inline Var sum_all(Var a) {
  Tape& t = *a.tape;
  double acc = 0.0;
  for (int64_t i = 0; i < t.value(a).size(); ++i) acc += t.value(a)[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc);
  return t.append(std::move(out), "sum_all", {a.id}, [](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

inline Var mean_all(Var a) {
  Tape& t = *a.tape;
  const int64_t count = t.value(a).size();
  double acc = 0.0;
  for (int64_t i = 0; i < count; ++i) acc += t.value(a)[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc / static_cast<double>(count));
  return t.append(std::move(out), "mean_all", {a.id}, [count](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    const float w = n.grad[0] / static_cast<float>(count);
    for (int64_t i = 0; i < g.size(); ++i) g[i] += w;
  });
}

inline Var dot(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape(t.value(a), t.value(b), "dot");
  double acc = 0.0;
  for (int64_t i = 0; i < t.value(a).size(); ++i)
    acc += static_cast<double>(t.value(a)[i]) * t.value(b)[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc);
  return t.append(std::move(out), "dot", {a.id, b.id}, [](Tape& t, const Tape::Node& n) {
    const Tensor& av = detail::val(n, t, 0);
    const Tensor& bv = detail::val(n, t, 1);
    for (int64_t i = 0; i < av.size(); ++i) {
      detail::grd(n, t, 0)[i] += n.grad[0] * bv[i];
      detail::grd(n, t, 1)[i] += n.grad[0] * av[i];
    }
  });
}

inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw std::invalid_argument("mean_rows: need 2-D input");
  const int k = av.dim(0), d = av.dim(1);
  Tensor out({d});
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int i = 0; i < k; ++i) acc += av[static_cast<int64_t>(i) * d + j];
    out[j] = static_cast<float>(acc / k);
  }
  return t.append(std::move(out), "mean_rows", {a.id}, [k, d](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) g[static_cast<int64_t>(i) * d + j] += n.grad[j] / static_cast<float>(k);
  });
}

inline Var max_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw std::invalid_argument("max_rows: need 2-D input");
  const int k = av.dim(0), d = av.dim(1);
  Tensor out({d});
  std::vector<int> arg(static_cast<size_t>(d), 0);
  for (int j = 0; j < d; ++j) {
    int best = 0;
    for (int i = 1; i < k; ++i)
      if (av[static_cast<int64_t>(i) * d + j] > av[static_cast<int64_t>(best) * d + j]) best = i;
    arg[static_cast<size_t>(j)] = best;
    out[j] = av[static_cast<int64_t>(best) * d + j];
  }
  return t.append(std::move(out), "max_rows", {a.id}, [d, arg = std::move(arg)](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int j = 0; j < d; ++j) g[static_cast<int64_t>(arg[static_cast<size_t>(j)]) * d + j] += n.grad[j];
  });
}

// ---- softmax family ----

inline Var logsumexp1d(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  float hi = av.max();
  double acc = 0.0;
  for (int64_t i = 0; i < av.size(); ++i) acc += std::exp(static_cast<double>(av[i]) - hi);
  Tensor out({1});
  out[0] = static_cast<float>(hi + std::log(acc));
  return t.append(std::move(out), "logsumexp1d", {a.id}, [](Tape& t, const Tape::Node& n) {
    const Tensor& av = detail::val(n, t, 0);
    Tensor& g = detail::grd(n, t, 0);
    const double lse = n.value[0];
    for (int64_t i = 0; i < av.size(); ++i)
      g[i] += n.grad[0] * static_cast<float>(std::exp(static_cast<double>(av[i]) - lse));
  });
}

/// Per-row logsumexp of a 2-D input: (N x C) -> (N).
inline Var lse_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw std::invalid_argument("lse_rows: need 2-D input");
  const int n = av.dim(0), c = av.dim(1);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    float hi = av[static_cast<int64_t>(i) * c];
    for (int j = 1; j < c; ++j) hi = std::max(hi, av[static_cast<int64_t>(i) * c + j]);
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += std::exp(static_cast<double>(av[static_cast<int64_t>(i) * c + j]) - hi);
    out[i] = static_cast<float>(hi + std::log(acc));
  }
  return t.append(std::move(out), "lse_rows", {a.id}, [n, c](Tape& t, const Tape::Node& n_) {
    const Tensor& av = detail::val(n_, t, 0);
    Tensor& g = detail::grd(n_, t, 0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        g[static_cast<int64_t>(i) * c + j] +=
            n_.grad[i] * static_cast<float>(std::exp(static_cast<double>(av[static_cast<int64_t>(i) * c + j]) - n_.value[i]));
  });
}

/// Per-column logsumexp of a 2-D input: (N x C) -> (C).
inline Var lse_cols(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw std::invalid_argument("lse_cols: need 2-D input");
  const int n = av.dim(0), c = av.dim(1);
  Tensor out({c});
  for (int j = 0; j < c; ++j) {
    float hi = av[j];
    for (int i = 1; i < n; ++i) hi = std::max(hi, av[static_cast<int64_t>(i) * c + j]);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::exp(static_cast<double>(av[static_cast<int64_t>(i) * c + j]) - hi);
    out[j] = static_cast<float>(hi + std::log(acc));
  }
  return t.append(std::move(out), "lse_cols", {a.id}, [n, c](Tape& t, const Tape::Node& n_) {
    const Tensor& av = detail::val(n_, t, 0);
    Tensor& g = detail::grd(n_, t, 0);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < n; ++i)
        g[static_cast<int64_t>(i) * c + j] +=
            n_.grad[j] * static_cast<float>(std::exp(static_cast<double>(av[static_cast<int64_t>(i) * c + j]) - n_.value[j]));
  });
}

// ---- broadcasts ----

/// out[i, c] = m[i, c] + v[i]
inline Var bcast_add_col(Var m, Var v) {
  Tape& t = *m.tape;
  const Tensor& mv = t.value(m);
  const Tensor& vv = t.value(v);
  if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(0))
    throw std::invalid_argument("bcast_add_col: shape mismatch");
  const int n = mv.dim(0), c = mv.dim(1);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(i) * c + j] = mv[static_cast<int64_t>(i) * c + j] + vv[i];
  return t.append(std::move(out), "bcast_add_col", {m.id, v.id}, [n, c](Tape& t, const Tape::Node& n_) {
    Tensor& gm = detail::grd(n_, t, 0);
    Tensor& gv = detail::grd(n_, t, 1);
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j < c; ++j) {
        gm[static_cast<int64_t>(i) * c + j] += n_.grad[static_cast<int64_t>(i) * c + j];
        acc += n_.grad[static_cast<int64_t>(i) * c + j];
      }
      gv[i] += static_cast<float>(acc);
    }
  });
}

/// out[i, c] = m[i, c] + v[c]
inline Var bcast_add_row(Var m, Var v) {
  Tape& t = *m.tape;
  const Tensor& mv = t.value(m);
  const Tensor& vv = t.value(v);
  if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
    throw std::invalid_argument("bcast_add_row: shape mismatch");
  const int n = mv.dim(0), c = mv.dim(1);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(i) * c + j] = mv[static_cast<int64_t>(i) * c + j] + vv[j];
  return t.append(std::move(out), "bcast_add_row", {m.id, v.id}, [n, c](Tape& t, const Tape::Node& n_) {
    Tensor& gm = detail::grd(n_, t, 0);
    Tensor& gv = detail::grd(n_, t, 1);
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        gm[static_cast<int64_t>(i) * c + j] += n_.grad[static_cast<int64_t>(i) * c + j];
        acc += n_.grad[static_cast<int64_t>(i) * c + j];
      }
      gv[j] += static_cast<float>(acc);
    }
  });
}

/// out = v - s with a scalar node broadcast over v.
inline Var sub_bscalar(Var v, Var s) {
  Tape& t = *v.tape;
  if (t.value(s).size() != 1) throw std::invalid_argument("sub_bscalar: s must be scalar");
  Tensor out(t.value(v).shape());
  const float sv = t.value(s)[0];
  for (int64_t i = 0; i < out.size(); ++i) out[i] = t.value(v)[i] - sv;
  return t.append(std::move(out), "sub_bscalar", {v.id, s.id}, [](Tape& t, const Tape::Node& n) {
    Tensor& gv = detail::grd(n, t, 0);
    Tensor& gs = detail::grd(n, t, 1);
    double acc = 0.0;
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      gv[i] += n.grad[i];
      acc += n.grad[i];
    }
    gs[0] -= static_cast<float>(acc);
  });
}

inline Var get_elem(Var v, int idx) {
  Tape& t = *v.tape;
  if (idx < 0 || idx >= t.value(v).size()) throw std::invalid_argument("get_elem: index out of range");
  Tensor out({1});
  out[0] = t.value(v)[idx];
  return t.append(std::move(out), "get_elem", {v.id}, [idx](Tape& t, const Tape::Node& n) {
    detail::grd(n, t, 0)[idx] += n.grad[0];
  });
}

// ---- losses ----

/// Softmax cross-entropy against an integer label: lse(z) - z[label].
inline Var cross_entropy(Var logits, int label) {
  Tape& t = *logits.tape;
  const Tensor& z = t.value(logits);
  if (z.rank() != 1 || label < 0 || label >= z.dim(0))
    throw std::invalid_argument("cross_entropy: bad logits/label");
  float hi = z.max();
  double acc = 0.0;
  for (int64_t i = 0; i < z.size(); ++i) acc += std::exp(static_cast<double>(z[i]) - hi);
  const double lse = hi + std::log(acc);
  Tensor out({1});
  out[0] = static_cast<float>(lse - z[label]);
  return t.append(std::move(out), "cross_entropy", {logits.id}, [label, lse](Tape& t, const Tape::Node& n) {
    const Tensor& z = detail::val(n, t, 0);
    Tensor& g = detail::grd(n, t, 0);
    for (int64_t i = 0; i < z.size(); ++i) {
      float p = static_cast<float>(std::exp(static_cast<double>(z[i]) - lse));
      g[i] += n.grad[0] * (p - (i == label ? 1.0f : 0.0f));
    }
  });
}

/// Shannon entropy (nats) of softmax(v): lse(v) - <softmax(v), v>.
inline Var softmax_entropy(Var v) {
  Var lse = logsumexp1d(v);
  Var p = vexp(sub_bscalar(v, lse));
  return sub(lse, dot(p, v));
}

/// Min-max rescale (v - min) / (max - min + eps) as a tape node, with
/// subgradients at the first argmin/argmax.
inline Var normalize_scores_node(Var s, float eps = 1e-5f) {
  Tape& t = *s.tape;
  const Tensor& sv = t.value(s);
  if (!(eps > 0)) throw std::invalid_argument("normalize_scores_node: eps must be > 0");
  int amin = 0, amax = 0;
  for (int64_t i = 1; i < sv.size(); ++i) {
    if (sv[i] < sv[amin]) amin = static_cast<int>(i);
    if (sv[i] > sv[amax]) amax = static_cast<int>(i);
  }
  const double denom = static_cast<double>(sv[amax]) - sv[amin] + eps;
  Tensor out(sv.shape());
  for (int64_t i = 0; i < sv.size(); ++i)
    out[i] = static_cast<float>((static_cast<double>(sv[i]) - sv[amin]) / denom);
  return t.append(std::move(out), "normalize_scores", {s.id},
                  [amin, amax, denom](Tape& t, const Tape::Node& n) {
                    const Tensor& sv = detail::val(n, t, 0);
                    Tensor& g = detail::grd(n, t, 0);
                    double gsum = 0.0, gdot = 0.0;
                    for (int64_t i = 0; i < n.grad.size(); ++i) {
                      gsum += n.grad[i];
                      gdot += static_cast<double>(n.grad[i]) * (static_cast<double>(sv[i]) - sv[amin]);
                    }
                    for (int64_t i = 0; i < n.grad.size(); ++i) g[i] += static_cast<float>(n.grad[i] / denom);
                    g[amin] -= static_cast<float>(gsum / denom);
                    const double range_term = gdot / (denom * denom);
                    g[amax] -= static_cast<float>(range_term);
                    g[amin] += static_cast<float>(range_term);
                  });
}

// ---- finite differences ----

/// Central-difference gradient estimate of a scalar function. Coordinates
/// where fn returned a non-finite value are reported in the thrown error.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                                double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_difference: step must be > 0");
  Tensor g(x.shape());
  std::vector<int64_t> bad;
  Tensor xp = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    const float orig = xp[i];
    const float hi = static_cast<float>(orig + step);
    const float lo = static_cast<float>(orig - step);
    // effective step after float32 rounding of the evaluation points
    const double denom = static_cast<double>(hi) - static_cast<double>(lo);
    if (denom == 0.0)
      throw std::invalid_argument("finite_difference: step vanishes at coordinate " + std::to_string(i));
    xp[i] = hi;
    const double fplus = fn(xp);
    xp[i] = lo;
    const double fminus = fn(xp);
    xp[i] = orig;
    if (!std::isfinite(fplus) || !std::isfinite(fminus)) {
      bad.push_back(i);
      g[i] = 0.0f;
      continue;
    }
    g[i] = static_cast<float>((fplus - fminus) / denom);
  }
  if (!bad.empty()) {
    std::string msg = "finite_difference: non-finite fn value at coordinates";
    for (int64_t i : bad) msg += " " + std::to_string(i);
    throw std::runtime_error(msg);
  }
  return g;
}

}  // namespace ptopk
