#include "trajmae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "trajmae/rng.hpp"

namespace trajmae {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw std::logic_error("record: input belongs to another graph");
    needs = needs || v.requires_grad();
  }
  Node n{std::move(value), {}, needs, {}};
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

double* Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

std::vector<double> Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw std::logic_error("backward: loss belongs to another graph");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
  }
  if (backward_done_) throw std::logic_error("backward: graph already differentiated");
  backward_done_ = true;
  double* g = grad_buffer(loss.id());
  if (g == nullptr) return;
  g[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

void AttentionLayout::add_group(std::span<const std::size_t> queries, std::span<const std::size_t> keys) {
  q_rows.insert(q_rows.end(), queries.begin(), queries.end());
  q_offsets.push_back(q_rows.size());
  k_rows.insert(k_rows.end(), keys.begin(), keys.end());
  k_offsets.push_back(k_rows.size());
}

void Segments::add(std::span<const std::size_t> r) {
  rows.insert(rows.end(), r.begin(), r.end());
  offsets.push_back(rows.size());
}

namespace ad {
namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// True when b is a trailing suffix of a (b broadcasts over a's leading axes).
bool broadcasts(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

Graph& graph_of(Var a) { return a.graph(); }

}  // namespace

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!broadcasts(av.shape(), bv.shape())) shape_fail("add", av.shape(), bv.shape());
  Tensor out(av.shape());
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % nb];
  const std::size_t ai = a.id(), bi = b.id();
  return graph_of(a).record(std::move(out), {a, b}, [ai, bi, nb](Graph& g, std::span<const double> go) {
    if (double* ga = g.grad_buffer(ai)) {
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (double* gb = g.grad_buffer(bi)) {
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!broadcasts(av.shape(), bv.shape())) shape_fail("sub", av.shape(), bv.shape());
  Tensor out(av.shape());
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % nb];
  const std::size_t ai = a.id(), bi = b.id();
  return graph_of(a).record(std::move(out), {a, b}, [ai, bi, nb](Graph& g, std::span<const double> go) {
    if (double* ga = g.grad_buffer(ai)) {
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (double* gb = g.grad_buffer(bi)) {
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!broadcasts(av.shape(), bv.shape())) shape_fail("mul", av.shape(), bv.shape());
  Tensor out(av.shape());
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % nb];
  const std::size_t ai = a.id(), bi = b.id();
  return graph_of(a).record(std::move(out), {a, b}, [ai, bi, nb](Graph& g, std::span<const double> go) {
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    if (double* ga = g.grad_buffer(ai)) {
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i % nb];
    }
    if (double* gb = g.grad_buffer(bi)) {
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, s](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
}

namespace {
thread_local RegionTrace* g_trace = nullptr;
}  // namespace

RegionTrace::RegionTrace() noexcept : prev_(g_trace) { g_trace = this; }
RegionTrace::~RegionTrace() { g_trace = prev_; }
bool RegionTrace::active() noexcept { return g_trace != nullptr; }
void RegionTrace::note(std::uint64_t piece) noexcept {
  if (g_trace != nullptr) g_trace->hash_ = mix64(g_trace->hash_ ^ (piece + 0x9e3779b97f4a7c15ULL));
}

Var relu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (RegionTrace::active()) {
    for (std::size_t i = 0; i < out.size(); ++i) RegionTrace::note(av[i] > 0.0);
  }
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai](Graph& g, std::span<const double> go) {
    const Tensor& av = g.value(ai);
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (av[i] > 0.0) ga[i] += go[i];
    }
  });
}

Var huber(Var a, double delta) {
  if (!(delta > 0.0)) throw ShapeError("huber: delta must be positive");
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double r = av[i];
    const double ar = std::fabs(r);
    out[i] = ar <= delta ? 0.5 * r * r : delta * (ar - 0.5 * delta);
  }
  if (RegionTrace::active()) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      RegionTrace::note(std::fabs(av[i]) <= delta ? 0 : (av[i] > 0.0 ? 1 : 2));
    }
  }
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, delta](Graph& g, std::span<const double> go) {
    const Tensor& av = g.value(ai);
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double r = av[i];
      const double d = std::fabs(r) <= delta ? r : (r > 0.0 ? delta : -delta);
      ga[i] += go[i] * d;
    }
  });
}

namespace {

// c[n,m] += a[n,k] b[k,m]
void gemm_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// da[n,k] += g[n,m] b[k,m]^T ; db[k,m] += a[n,k]^T g[n,m]
void gemm_backward(const double* a, const double* b, const double* g, double* da, double* db, std::size_t n,
                   std::size_t k, std::size_t m) {
  if (da != nullptr) {
    std::vector<double> bt(k * m);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
    }
    gemm_acc(g, bt.data(), da, n, m, k);
  }
  if (db != nullptr) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* gi = g + i * m;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = ai[p];
        if (aip == 0.0) continue;
        double* dbp = db + p * m;
        for (std::size_t j = 0; j < m; ++j) dbp[j] += aip * gi[j];
      }
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || bv.rank() != 2 || av.cols() != bv.dim(0)) shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t n = av.rows(), k = av.cols(), m = bv.dim(1);
  Shape os = av.shape();
  os.back() = m;
  Tensor out(os);
  gemm_acc(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  const std::size_t ai = a.id(), bi = b.id();
  return graph_of(a).record(std::move(out), {a, b}, [ai, bi, n, k, m](Graph& g, std::span<const double> go) {
    gemm_backward(g.value(ai).data().data(), g.value(bi).data().data(), go.data(), g.grad_buffer(ai),
                  g.grad_buffer(bi), n, k, m);
  });
}

Var linear(Var x, Var w, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.cols() != wv.dim(0)) shape_fail("linear", xv.shape(), wv.shape());
  if (bv.size() != wv.dim(1)) shape_fail("linear(bias)", wv.shape(), bv.shape());
  const std::size_t n = xv.rows(), k = xv.cols(), m = wv.dim(1);
  Shape os = xv.shape();
  os.back() = m;
  Tensor out(os);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  gemm_acc(xv.data().data(), wv.data().data(), out.data().data(), n, k, m);
  const std::size_t xi = x.id(), wi = w.id(), bi = bias.id();
  return graph_of(x).record(std::move(out), {x, w, bias},
                            [xi, wi, bi, n, k, m](Graph& g, std::span<const double> go) {
                              gemm_backward(g.value(xi).data().data(), g.value(wi).data().data(), go.data(),
                                            g.grad_buffer(xi), g.grad_buffer(wi), n, k, m);
                              if (double* gb = g.grad_buffer(bi)) {
                                for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
                                }
                              }
                            });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, r, c](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  const Tensor& av = a.value();
  if (shape_numel(shape) != av.size()) shape_fail("reshape", av.shape(), shape);
  Tensor out(std::move(shape), av.storage());
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total_axis = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
    }
    widths.push_back(s[axis] * inner);
    total_axis += s[axis];
  }
  Shape os = s0;
  os[axis] = total_axis;
  Tensor out(os);
  const std::size_t row = total_axis * inner;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * row + off));
    }
    off += widths[p];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return graph_of(parts[0]).record(
      std::move(out), parts, [ids, widths, outer, row](Graph& g, std::span<const double> go) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (double* gp = g.grad_buffer(ids[p])) {
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < widths[p]; ++j) gp[o * widths[p] + j] += go[o * row + off + j];
            }
          }
          off += widths[p];
        }
      });
}

Var gather_rows(Var a, std::span<const std::size_t> idx) {
  const Tensor& av = a.value();
  if (av.rank() < 1) throw ShapeError("gather_rows: scalar input");
  const std::size_t n = av.dim(0);
  const std::size_t w = n == 0 ? 0 : av.size() / n;
  Shape os = av.shape();
  os[0] = idx.size();
  Tensor out(os);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " + shape_str(av.shape()));
    }
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * w), w,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, ix = std::move(ix), w](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < ix.size(); ++i) {
      for (std::size_t j = 0; j < w; ++j) ga[ix[i] * w + j] += go[i * w + j];
    }
  });
}

Var scatter_rows(Var a, std::span<const std::size_t> idx, std::size_t rows) {
  const Tensor& av = a.value();
  if (av.rank() < 1 || av.dim(0) != idx.size()) {
    throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for input " + shape_str(av.shape()));
  }
  const std::size_t w = idx.empty() ? (av.rank() > 1 ? shape_numel(Shape(av.shape().begin() + 1, av.shape().end())) : 1)
                                    : av.size() / idx.size();
  Shape os = av.shape();
  os[0] = rows;
  Tensor out(os);
  std::vector<bool> seen(rows, false);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows || seen[idx[i]]) {
      throw ShapeError("scatter_rows: index " + std::to_string(idx[i]) + " out of range or repeated");
    }
    seen[idx[i]] = true;
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(i * w), w,
                out.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * w));
  }
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, ix = std::move(ix), w](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < ix.size(); ++i) {
      for (std::size_t j = 0; j < w; ++j) ga[i * w + j] += go[ix[i] * w + j];
    }
  });
}

Var pick(Var a, std::span<const std::size_t> flat_idx) {
  const Tensor& av = a.value();
  Tensor out(Shape{flat_idx.size()});
  for (std::size_t i = 0; i < flat_idx.size(); ++i) {
    if (flat_idx[i] >= av.size()) throw ShapeError("pick: index out of range for " + shape_str(av.shape()));
    out[i] = av[flat_idx[i]];
  }
  std::vector<std::size_t> ix(flat_idx.begin(), flat_idx.end());
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, ix = std::move(ix)](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < ix.size(); ++i) ga[ix[i]] += go[i];
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  if (axis >= av.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(av.shape()));
  const std::size_t len = av.dim(axis);
  if (len == 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " has length 0 in " + shape_str(av.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  Tensor out(av.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  }
  const std::size_t ai = a.id();
  Tensor saved = out;
  return graph_of(a).record(std::move(out), {a},
                            [ai, saved = std::move(saved), outer, inner, len](Graph& g, std::span<const double> go) {
                              double* ga = g.grad_buffer(ai);
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t in = 0; in < inner; ++in) {
                                  const std::size_t base = o * len * inner + in;
                                  double dot = 0.0;
                                  for (std::size_t j = 0; j < len; ++j) {
                                    dot += go[base + j * inner] * saved[base + j * inner];
                                  }
                                  for (std::size_t j = 0; j < len; ++j) {
                                    const std::size_t p = base + j * inner;
                                    ga[p] += saved[p] * (go[p] - dot);
                                  }
                                }
                              }
                            });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  if (av.rank() < 1 || av.cols() == 0) throw ShapeError("log_softmax: empty last axis in " + shape_str(av.shape()));
  const std::size_t len = av.cols(), rows = av.rows();
  Tensor out(av.shape());
  Tensor probs(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * len;
    double mx = *std::max_element(x, x + len);
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < len; ++j) {
      out[r * len + j] = x[j] - lse;
      probs[r * len + j] = std::exp(x[j] - lse);
    }
  }
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a},
                            [ai, probs = std::move(probs), len, rows](Graph& g, std::span<const double> go) {
                              double* ga = g.grad_buffer(ai);
                              for (std::size_t r = 0; r < rows; ++r) {
                                double s = 0.0;
                                for (std::size_t j = 0; j < len; ++j) s += go[r * len + j];
                                for (std::size_t j = 0; j < len; ++j) {
                                  ga[r * len + j] += go[r * len + j] - probs[r * len + j] * s;
                                }
                              }
                            });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (xv.rank() < 1 || gamma.value().size() != d || beta.value().size() != d) {
    shape_fail("layer_norm", xv.shape(), gamma.shape());
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return graph_of(x).record(
      std::move(out), {x, gamma, beta},
      [xi, gi, bi, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, std::span<const double> go) {
        const Tensor& gv = g.value(gi);
        double* gx = g.grad_buffer(xi);
        double* gg = g.grad_buffer(gi);
        double* gb = g.grad_buffer(bi);
        std::vector<double> dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = go.data() + r * d;
          const double* hr = xhat.data().data() + r * d;
          if (gg != nullptr) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
          }
          if (gb != nullptr) {
            for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
          }
          if (gx != nullptr) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = gr[j] * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * hr[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (dxh[j] - m1 - hr[j] * m2);
          }
        }
      });
}

namespace {

// Orders key indices by (key row, value row) content so reductions over keys
// are independent of how the rows were laid out.
void canonical_key_order(const Tensor& k, const Tensor& v, std::vector<std::size_t>& keys) {
  const std::size_t d = k.cols();
  std::sort(keys.begin(), keys.end(), [&](std::size_t a, std::size_t b) {
    const double* ka = k.data().data() + a * d;
    const double* kb = k.data().data() + b * d;
    for (std::size_t j = 0; j < d; ++j) {
      if (ka[j] != kb[j]) return ka[j] < kb[j];
    }
    const double* va = v.data().data() + a * d;
    const double* vb = v.data().data() + b * d;
    for (std::size_t j = 0; j < d; ++j) {
      if (va[j] != vb[j]) return va[j] < vb[j];
    }
    return false;
  });
}

}  // namespace

Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) shape_fail("attention", qv.shape(), kv.shape());
  if (qv.cols() != kv.cols() || kv.shape() != vv.shape()) shape_fail("attention", qv.shape(), kv.shape());
  const std::size_t d = qv.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t nq = qv.dim(0), nk = kv.dim(0);
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<bool> seen(nq, false);
  for (std::size_t r : layout.q_rows) {
    if (r >= nq || seen[r]) throw ShapeError("attention: query row " + std::to_string(r) + " out of range or repeated");
    seen[r] = true;
  }
  for (std::size_t r : layout.k_rows) {
    if (r >= nk) throw ShapeError("attention: key row " + std::to_string(r) + " out of range");
  }

  // Sorted keys per group, and softmax probabilities per (query, head, key).
  std::vector<std::size_t> keys = layout.k_rows;
  std::vector<std::size_t> p_offset(layout.groups() + 1, 0);
  for (std::size_t gi = 0; gi < layout.groups(); ++gi) {
    const std::size_t nqg = layout.q_offsets[gi + 1] - layout.q_offsets[gi];
    const std::size_t nkg = layout.k_offsets[gi + 1] - layout.k_offsets[gi];
    p_offset[gi + 1] = p_offset[gi] + nqg * nkg * heads;
  }
  std::vector<double> probs(p_offset.back());
  Tensor out(Shape{nq, d});
  std::vector<double> e;
  for (std::size_t gi = 0; gi < layout.groups(); ++gi) {
    const std::size_t k0 = layout.k_offsets[gi], k1 = layout.k_offsets[gi + 1];
    const std::size_t nkg = k1 - k0;
    if (nkg == 0) continue;
    std::vector<std::size_t> gk(keys.begin() + static_cast<std::ptrdiff_t>(k0),
                                keys.begin() + static_cast<std::ptrdiff_t>(k1));
    canonical_key_order(kv, vv, gk);
    std::copy(gk.begin(), gk.end(), keys.begin() + static_cast<std::ptrdiff_t>(k0));
    e.resize(nkg);
    for (std::size_t qi = layout.q_offsets[gi]; qi < layout.q_offsets[gi + 1]; ++qi) {
      const std::size_t row = layout.q_rows[qi];
      const std::size_t local = qi - layout.q_offsets[gi];
      for (std::size_t h = 0; h < heads; ++h) {
        const double* qr = qv.data().data() + row * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nkg; ++j) {
          const double* kr = kv.data().data() + gk[j] * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
          e[j] = s * sc;
          mx = std::max(mx, e[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < nkg; ++j) {
          e[j] = std::exp(e[j] - mx);
          z += e[j];
        }
        double* pr = probs.data() + p_offset[gi] + (local * heads + h) * nkg;
        double* orow = out.data().data() + row * d + h * dh;
        for (std::size_t j = 0; j < nkg; ++j) {
          const double p = e[j] / z;
          pr[j] = p;
          const double* vr = vv.data().data() + gk[j] * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vr[c];
        }
      }
    }
  }

  const std::size_t qid = q.id(), kid = k.id(), vid = v.id();
  return graph_of(q).record(
      std::move(out), {q, k, v},
      [qid, kid, vid, layout, keys = std::move(keys), probs = std::move(probs), p_offset = std::move(p_offset), heads,
       d, dh, sc](Graph& g, std::span<const double> go) {
        const Tensor& qv = g.value(qid);
        const Tensor& kv = g.value(kid);
        const Tensor& vv = g.value(vid);
        double* gq = g.grad_buffer(qid);
        double* gk = g.grad_buffer(kid);
        double* gv = g.grad_buffer(vid);
        std::vector<double> ds;
        for (std::size_t gi = 0; gi < layout.groups(); ++gi) {
          const std::size_t k0 = layout.k_offsets[gi];
          const std::size_t nkg = layout.k_offsets[gi + 1] - k0;
          if (nkg == 0) continue;
          ds.resize(nkg);
          for (std::size_t qi = layout.q_offsets[gi]; qi < layout.q_offsets[gi + 1]; ++qi) {
            const std::size_t row = layout.q_rows[qi];
            const std::size_t local = qi - layout.q_offsets[gi];
            for (std::size_t h = 0; h < heads; ++h) {
              const double* pr = probs.data() + p_offset[gi] + (local * heads + h) * nkg;
              const double* gor = go.data() + row * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < nkg; ++j) {
                const std::size_t kr = keys[k0 + j];
                const double* vr = vv.data().data() + kr * d + h * dh;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dp += gor[c] * vr[c];
                ds[j] = dp;
                dot += pr[j] * dp;
                if (gv != nullptr) {
                  double* gvr = gv + kr * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvr[c] += pr[j] * gor[c];
                }
              }
              const double* qr = qv.data().data() + row * d + h * dh;
              double* gqr = gq != nullptr ? gq + row * d + h * dh : nullptr;
              for (std::size_t j = 0; j < nkg; ++j) {
                const double s = pr[j] * (ds[j] - dot) * sc;
                if (s == 0.0) continue;
                const std::size_t kr = keys[k0 + j];
                if (gqr != nullptr) {
                  const double* krow = kv.data().data() + kr * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqr[c] += s * krow[c];
                }
                if (gk != nullptr) {
                  double* gkr = gk + kr * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkr[c] += s * qr[c];
                }
              }
            }
          }
        }
      });
}

Var segment_mean(Var a, const Segments& seg) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("segment_mean: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t n = av.dim(0), d = av.dim(1);
  for (std::size_t r : seg.rows) {
    if (r >= n) throw ShapeError("segment_mean: row " + std::to_string(r) + " out of range");
  }
  Tensor out(Shape{seg.count(), d});
  std::vector<double> col;
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const std::size_t r0 = seg.offsets[s], r1 = seg.offsets[s + 1];
    if (r0 == r1) continue;
    for (std::size_t c = 0; c < d; ++c) {
      col.clear();
      for (std::size_t i = r0; i < r1; ++i) col.push_back(av[seg.rows[i] * d + c]);
      std::sort(col.begin(), col.end());
      double sum = 0.0;
      for (double x : col) sum += x;
      out[s * d + c] = sum / static_cast<double>(r1 - r0);
    }
  }
  const std::size_t ai = a.id();
  return graph_of(a).record(std::move(out), {a}, [ai, seg, d](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const std::size_t r0 = seg.offsets[s], r1 = seg.offsets[s + 1];
      if (r0 == r1) continue;
      const double inv = 1.0 / static_cast<double>(r1 - r0);
      for (std::size_t i = r0; i < r1; ++i) {
        for (std::size_t c = 0; c < d; ++c) ga[seg.rows[i] * d + c] += go[s * d + c] * inv;
      }
    }
  });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.data()) s += x;
  const std::size_t ai = a.id();
  return graph_of(a).record(Tensor::scalar(s), {a}, [ai](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    const std::size_t n = g.value(ai).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += go[0];
  });
}

Var mean(Var a) {
  const Tensor& av = a.value();
  if (av.size() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double x : av.data()) s += x;
  const double n = static_cast<double>(av.size());
  const std::size_t ai = a.id();
  return graph_of(a).record(Tensor::scalar(s / n), {a}, [ai, n](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    const std::size_t cnt = g.value(ai).size();
    for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[0] / n;
  });
}

Var masked_mean(Var a, const std::vector<bool>& selector) {
  const Tensor& av = a.value();
  if (selector.size() != av.size()) {
    throw ShapeError("masked_mean: selector of " + std::to_string(selector.size()) + " entries for " +
                     shape_str(av.shape()));
  }
  double s = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (selector[i]) {
      s += av[i];
      ++cnt;
    }
  }
  if (cnt == 0) throw ShapeError("masked_mean: empty selection");
  const double n = static_cast<double>(cnt);
  const std::size_t ai = a.id();
  return graph_of(a).record(Tensor::scalar(s / n), {a}, [ai, selector, n](Graph& g, std::span<const double> go) {
    double* ga = g.grad_buffer(ai);
    for (std::size_t i = 0; i < selector.size(); ++i) {
      if (selector[i]) ga[i] += go[0] / n;
    }
  });
}

}  // namespace ad
}  // namespace trajmae
