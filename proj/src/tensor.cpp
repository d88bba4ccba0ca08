#include "fnac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fnac {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tape& tape_of(const Tensor& t) {
  if (!t.valid()) throw std::logic_error("tensor handle is empty");
  return *t.tape();
}

void require_same_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands live on different tapes");
}

}  // namespace

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
const std::vector<double>& Tensor::value() const { return tape_->node(id_).value; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }
int64_t Tensor::size() const { return static_cast<int64_t>(value().size()); }

const std::vector<double>& Tensor::grad() const {
  auto& n = tape_->node(id_);
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

double Tensor::item() const {
  const auto& v = value();
  if (v.size() != 1) {
    throw std::logic_error("item(): tensor has shape " + shape_str(shape()) + ", expected a scalar");
  }
  return v[0];
}

Tensor Tape::emplace(Shape shape, std::vector<double> value, std::vector<int> inputs,
                     BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (int in : n.inputs) {
    if (node(in).requires_grad) n.requires_grad = true;
  }
  n.backward = n.requires_grad ? std::move(backward) : BackwardFn{};
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("leaf: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(data);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::constant(Shape shape, std::vector<double> data) {
  return leaf(std::move(shape), std::move(data), false);
}

Tensor Tape::scalar(double v) { return leaf({1}, {v}, false); }

Tensor Tape::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> data(static_cast<size_t>(numel(shape)), v);
  return leaf(std::move(shape), std::move(data), requires_grad);
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss is not on this tape");
  if (loss.size() != 1) {
    throw std::logic_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  Adjoints adj(nodes_.size());
  adj[static_cast<size_t>(loss.id())] = {1.0};
  for (int i = loss.id(); i >= 0; --i) {
    auto& a = adj[static_cast<size_t>(i)];
    if (a.empty()) continue;
    Node& n = node(i);
    if (!n.requires_grad) continue;
    if (n.backward) n.backward(*this, adj, i);
    if (n.inputs.empty()) {
      // leaf: fold this pass's adjoint into the persistent accumulator
      if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
      for (size_t k = 0; k < a.size(); ++k) n.grad[k] += a[k];
    }
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

namespace {

// Adjoint buffer of node `id`, allocated on first touch.
std::vector<double>& abuf(Tape::Adjoints&, int);

}  // namespace

// TapeOps gives op implementations access to tape internals without widening
// the public surface.
struct TapeOps {
  using Adjoints = Tape::Adjoints;
  using BackwardFn = Tape::BackwardFn;

  static const std::vector<double>& val(Tape& t, int id) { return t.node(id).value; }
  static const Shape& shp(Tape& t, int id) { return t.node(id).shape; }
  static bool needs_grad(Tape& t, int id) { return t.node(id).requires_grad; }

  static std::vector<double>& adj(Tape& t, Adjoints& a, int id) {
    auto& buf = a[static_cast<size_t>(id)];
    if (buf.empty()) buf.assign(t.node(id).value.size(), 0.0);
    return buf;
  }

  static Tensor make(Tape& t, Shape shape, std::vector<double> value, std::vector<int> inputs,
                     BackwardFn backward) {
    return t.emplace(std::move(shape), std::move(value), std::move(inputs), std::move(backward));
  }
};

using Ops = TapeOps;

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double),
                          void (*bwd)(double av, double bv, double g, double& da, double& db)) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const int ia = a.id(), ib = b.id();
  return Ops::make(
      t, a.shape(), std::move(out), {ia, ib},
      [ia, ib, bwd](Tape& tp, Tape::Adjoints& adj, int self) {
        const auto& g = adj[static_cast<size_t>(self)];
        const auto& av2 = Ops::val(tp, ia);
        const auto& bv2 = Ops::val(tp, ib);
        const bool ga = Ops::needs_grad(tp, ia);
        const bool gb = Ops::needs_grad(tp, ib);
        std::vector<double>* da = ga ? &Ops::adj(tp, adj, ia) : nullptr;
        std::vector<double>* db = gb ? &Ops::adj(tp, adj, ib) : nullptr;
        double dump = 0.0;
        for (size_t i = 0; i < g.size(); ++i) {
          double& ra = da ? (*da)[i] : dump;
          double& rb = db ? (*db)[i] : dump;
          bwd(av2[i], bv2[i], g[i], ra, rb);
        }
      });
}

Tensor elementwise_unary(const Tensor& a, const char* name, double (*fwd)(double),
                         double (*dfdx)(double x, double y)) {
  Tape& t = tape_of(a);
  (void)name;
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const int ia = a.id();
  const int self_inputs = ia;
  return Ops::make(t, a.shape(), std::move(out), {self_inputs},
                   [ia, dfdx](Tape& tp, Tape::Adjoints& adj, int self) {
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& yv = Ops::val(tp, self);
                     const auto& xv = Ops::val(tp, ia);
                     if (!Ops::needs_grad(tp, ia)) return;
                     auto& da = Ops::adj(tp, adj, ia);
                     for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfdx(xv[i], yv[i]);
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da += g;
        db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da += g;
        db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da += g * y;
        db += g * x;
      });
}

Tensor scale(const Tensor& a, double c) {
  Tape& t = tape_of(a);
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
  const int ia = a.id();
  return Ops::make(t, a.shape(), std::move(out), {ia},
                   [ia, c](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ia)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& da = Ops::adj(tp, adj, ia);
                     for (size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
                   });
}

Tensor exp(const Tensor& a) {
  return elementwise_unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return elementwise_unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return elementwise_unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return elementwise_unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sum_all(const Tensor& a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value()) s += v;
  const int ia = a.id();
  return Ops::make(t, {1}, {s}, {ia}, [ia](Tape& tp, Tape::Adjoints& adj, int self) {
    if (!Ops::needs_grad(tp, ia)) return;
    const double g = adj[static_cast<size_t>(self)][0];
    auto& da = Ops::adj(tp, adj, ia);
    for (double& d : da) d += g;
  });
}

Tensor mean_all(const Tensor& a) {
  Tape& t = tape_of(a);
  const auto& av = a.value();
  require(!av.empty(), "mean_all: empty tensor");
  double s = 0.0;
  for (double v : av) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  const int ia = a.id();
  return Ops::make(t, {1}, {s * inv}, {ia}, [ia, inv](Tape& tp, Tape::Adjoints& adj, int self) {
    if (!Ops::needs_grad(tp, ia)) return;
    const double g = adj[static_cast<size_t>(self)][0] * inv;
    auto& da = Ops::adj(tp, adj, ia);
    for (double& d : da) d += g;
  });
}

namespace {

Tensor axis_reduce(const Tensor& a, int axis, bool mean, const char* name) {
  Tape& t = tape_of(a);
  require(a.shape().size() == 2, std::string(name) + ": expects 2-D input, got " + shape_str(a.shape()));
  require(axis == 0 || axis == 1, std::string(name) + ": axis must be 0 or 1");
  const int r = a.shape()[0], c = a.shape()[1];
  const auto& av = a.value();
  const int out_len = axis == 0 ? c : r;
  const int count = axis == 0 ? r : c;
  std::vector<double> out(static_cast<size_t>(out_len), 0.0);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<size_t>(axis == 0 ? j : i)] += av[static_cast<size_t>(i) * c + j];
    }
  }
  const double inv = mean ? 1.0 / count : 1.0;
  if (mean) {
    for (double& v : out) v *= inv;
  }
  const int ia = a.id();
  return Ops::make(t, {out_len}, std::move(out), {ia},
                   [ia, axis, r, c, inv](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ia)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& da = Ops::adj(tp, adj, ia);
                     for (int i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) {
                         da[static_cast<size_t>(i) * c + j] += inv * g[static_cast<size_t>(axis == 0 ? j : i)];
                       }
                     }
                   });
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis) { return axis_reduce(a, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& a, int axis) { return axis_reduce(a, axis, true, "mean_axis"); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  require(k == k2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const size_t brow = static_cast<size_t>(p) * n;
      const size_t orow = static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) out[orow + j] += aip * bv[brow + j];
    }
  }
  const int ia = a.id(), ib = b.id();
  return Ops::make(t, {m, n}, std::move(out), {ia, ib},
                   [ia, ib, m, k, n](Tape& tp, Tape::Adjoints& adj, int self) {
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& av2 = Ops::val(tp, ia);
                     const auto& bv2 = Ops::val(tp, ib);
                     if (Ops::needs_grad(tp, ia)) {
                       auto& da = Ops::adj(tp, adj, ia);  // g (m x n) * b^T (n x k)
                       for (int i = 0; i < m; ++i) {
                         for (int j = 0; j < n; ++j) {
                           const double gij = g[static_cast<size_t>(i) * n + j];
                           if (gij == 0.0) continue;
                           for (int p = 0; p < k; ++p) {
                             da[static_cast<size_t>(i) * k + p] += gij * bv2[static_cast<size_t>(p) * n + j];
                           }
                         }
                       }
                     }
                     if (Ops::needs_grad(tp, ib)) {
                       auto& db = Ops::adj(tp, adj, ib);  // a^T (k x m) * g (m x n)
                       for (int i = 0; i < m; ++i) {
                         for (int p = 0; p < k; ++p) {
                           const double aip = av2[static_cast<size_t>(i) * k + p];
                           if (aip == 0.0) continue;
                           for (int j = 0; j < n; ++j) {
                             db[static_cast<size_t>(p) * n + j] += aip * g[static_cast<size_t>(i) * n + j];
                           }
                         }
                       }
                     }
                   });
}

Tensor transpose(const Tensor& a) {
  Tape& t = tape_of(a);
  require(a.shape().size() == 2, "transpose: expects 2-D input, got " + shape_str(a.shape()));
  const int r = a.shape()[0], c = a.shape()[1];
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    }
  }
  const int ia = a.id();
  return Ops::make(t, {c, r}, std::move(out), {ia},
                   [ia, r, c](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ia)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& da = Ops::adj(tp, adj, ia);
                     for (int i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) {
                         da[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
                       }
                     }
                   });
}

Tensor diag(const Tensor& a) {
  Tape& t = tape_of(a);
  require(a.shape().size() == 2 && a.shape()[0] == a.shape()[1],
          "diag: expects a square matrix, got " + shape_str(a.shape()));
  const int n = a.shape()[0];
  const auto& av = a.value();
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = av[static_cast<size_t>(i) * n + i];
  const int ia = a.id();
  return Ops::make(t, {n}, std::move(out), {ia},
                   [ia, n](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ia)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& da = Ops::adj(tp, adj, ia);
                     for (int i = 0; i < n; ++i) da[static_cast<size_t>(i) * n + i] += g[static_cast<size_t>(i)];
                   });
}

Tensor row_softmax(const Tensor& a, double temperature) {
  Tape& t = tape_of(a);
  require(temperature > 0.0, "row_softmax: temperature must be > 0, got " + std::to_string(temperature));
  require(a.shape().size() == 2, "row_softmax: expects 2-D input, got " + shape_str(a.shape()));
  const int r = a.shape()[0], c = a.shape()[1];
  const auto& av = a.value();
  std::vector<double> out(av.size());
  const double inv_t = 1.0 / temperature;
  for (int i = 0; i < r; ++i) {
    const size_t row = static_cast<size_t>(i) * c;
    double mx = av[row];
    for (int j = 1; j < c; ++j) mx = std::max(mx, av[row + j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp((av[row + j] - mx) * inv_t);
      out[row + j] = e;
      denom += e;
    }
    for (int j = 0; j < c; ++j) out[row + j] /= denom;
  }
  const int ia = a.id();
  return Ops::make(t, a.shape(), std::move(out), {ia},
                   [ia, r, c, inv_t](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ia)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& p = Ops::val(tp, self);
                     auto& da = Ops::adj(tp, adj, ia);
                     for (int i = 0; i < r; ++i) {
                       const size_t row = static_cast<size_t>(i) * c;
                       double dot = 0.0;
                       for (int j = 0; j < c; ++j) dot += g[row + j] * p[row + j];
                       for (int j = 0; j < c; ++j) {
                         da[row + j] += inv_t * p[row + j] * (g[row + j] - dot);
                       }
                     }
                   });
}

Tensor l2_normalize(const Tensor& a) {
  Tape& t = tape_of(a);
  const auto& sh = a.shape();
  require(sh.size() >= 2, "l2_normalize: expects rank >= 2, got " + shape_str(sh));
  const int outer = sh[0];
  const int mid = sh[1];
  int64_t inner = 1;
  for (size_t k = 2; k < sh.size(); ++k) inner *= sh[k];
  const auto& av = a.value();
  std::vector<double> out(av.size());
  std::vector<double> norms(static_cast<size_t>(outer) * inner);
  std::vector<uint8_t> clamped(norms.size(), 0);
  for (int o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double ss = 0.0;
      for (int m = 0; m < mid; ++m) {
        const double v = av[(static_cast<size_t>(o) * mid + m) * inner + in];
        ss += v * v;
      }
      double nrm = std::sqrt(ss);
      const size_t fi = static_cast<size_t>(o) * inner + in;
      if (nrm < kNormEps) {
        nrm = kNormEps;
        clamped[fi] = 1;
        ++t.warnings().zero_norm_rows;
      }
      norms[fi] = nrm;
      for (int m = 0; m < mid; ++m) {
        const size_t idx = (static_cast<size_t>(o) * mid + m) * inner + in;
        out[idx] = av[idx] / nrm;
      }
    }
  }
  const int ia = a.id();
  return Ops::make(
      t, sh, std::move(out), {ia},
      [ia, outer, mid, inner, norms, clamped](Tape& tp, Tape::Adjoints& adj, int self) {
        if (!Ops::needs_grad(tp, ia)) return;
        const auto& g = adj[static_cast<size_t>(self)];
        const auto& y = Ops::val(tp, self);
        auto& da = Ops::adj(tp, adj, ia);
        for (int o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            const size_t fi = static_cast<size_t>(o) * inner + in;
            const double nrm = norms[fi];
            if (clamped[fi]) {
              // denominator is the constant eps here
              for (int m = 0; m < mid; ++m) {
                const size_t idx = (static_cast<size_t>(o) * mid + m) * inner + in;
                da[idx] += g[idx] / nrm;
              }
              continue;
            }
            double dot = 0.0;
            for (int m = 0; m < mid; ++m) {
              const size_t idx = (static_cast<size_t>(o) * mid + m) * inner + in;
              dot += g[idx] * y[idx];
            }
            for (int m = 0; m < mid; ++m) {
              const size_t idx = (static_cast<size_t>(o) * mid + m) * inner + in;
              da[idx] += (g[idx] - y[idx] * dot) / nrm;
            }
          }
        }
      });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_same_tape(m, v);
  Tape& t = tape_of(m);
  require(m.shape().size() == 2 && v.shape().size() == 1 && m.shape()[1] == v.shape()[0],
          "add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const int r = m.shape()[0], c = m.shape()[1];
  const auto& mv = m.value();
  const auto& vv = v.value();
  std::vector<double> out(mv.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<size_t>(i) * c + j] = mv[static_cast<size_t>(i) * c + j] + vv[static_cast<size_t>(j)];
    }
  }
  const int im = m.id(), iv = v.id();
  return Ops::make(t, m.shape(), std::move(out), {im, iv},
                   [im, iv, r, c](Tape& tp, Tape::Adjoints& adj, int self) {
                     const auto& g = adj[static_cast<size_t>(self)];
                     if (Ops::needs_grad(tp, im)) {
                       auto& dm = Ops::adj(tp, adj, im);
                       for (size_t i = 0; i < g.size(); ++i) dm[i] += g[i];
                     }
                     if (Ops::needs_grad(tp, iv)) {
                       auto& dv = Ops::adj(tp, adj, iv);
                       for (int i = 0; i < r; ++i) {
                         for (int j = 0; j < c; ++j) dv[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
                       }
                     }
                   });
}

namespace {

void require_features_map(const Tensor& features, const Tensor& map, const char* name) {
  const auto& fs = features.shape();
  const auto& ms = map.shape();
  require(fs.size() == 4 && ms.size() == 3 && fs[0] == ms[0] && fs[2] == ms[1] && fs[3] == ms[2],
          std::string(name) + ": expects b x d x h x w features and b x h x w map, got " +
              shape_str(fs) + " and " + shape_str(ms));
}

}  // namespace

Tensor mul_map(const Tensor& features, const Tensor& map) {
  require_same_tape(features, map);
  Tape& t = tape_of(features);
  require_features_map(features, map, "mul_map");
  const auto& fs = features.shape();
  const int b = fs[0], d = fs[1];
  const int64_t hw = static_cast<int64_t>(fs[2]) * fs[3];
  const auto& fv = features.value();
  const auto& mv = map.value();
  std::vector<double> out(fv.size());
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < d; ++c) {
      for (int64_t p = 0; p < hw; ++p) {
        const size_t fi = (static_cast<size_t>(i) * d + c) * hw + p;
        out[fi] = fv[fi] * mv[static_cast<size_t>(i) * hw + p];
      }
    }
  }
  const int iff = features.id(), im = map.id();
  return Ops::make(t, fs, std::move(out), {iff, im},
                   [iff, im, b, d, hw](Tape& tp, Tape::Adjoints& adj, int self) {
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& fv2 = Ops::val(tp, iff);
                     const auto& mv2 = Ops::val(tp, im);
                     const bool gf = Ops::needs_grad(tp, iff);
                     const bool gm = Ops::needs_grad(tp, im);
                     std::vector<double>* df = gf ? &Ops::adj(tp, adj, iff) : nullptr;
                     std::vector<double>* dm = gm ? &Ops::adj(tp, adj, im) : nullptr;
                     for (int i = 0; i < b; ++i) {
                       for (int c = 0; c < d; ++c) {
                         for (int64_t p = 0; p < hw; ++p) {
                           const size_t fi = (static_cast<size_t>(i) * d + c) * hw + p;
                           const size_t mi = static_cast<size_t>(i) * hw + p;
                           if (df) (*df)[fi] += g[fi] * mv2[mi];
                           if (dm) (*dm)[mi] += g[fi] * fv2[fi];
                         }
                       }
                     }
                   });
}

namespace {

Tensor spatial_reduce(const Tensor& x, bool mean, const char* name) {
  Tape& t = tape_of(x);
  require(x.shape().size() == 4, std::string(name) + ": expects b x d x h x w input, got " + shape_str(x.shape()));
  const int b = x.shape()[0], d = x.shape()[1];
  const int64_t hw = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
  const auto& xv = x.value();
  std::vector<double> out(static_cast<size_t>(b) * d, 0.0);
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < d; ++c) {
      double s = 0.0;
      for (int64_t p = 0; p < hw; ++p) s += xv[(static_cast<size_t>(i) * d + c) * hw + p];
      out[static_cast<size_t>(i) * d + c] = mean ? s / static_cast<double>(hw) : s;
    }
  }
  const double w = mean ? 1.0 / static_cast<double>(hw) : 1.0;
  const int ix = x.id();
  return Ops::make(t, {b, d}, std::move(out), {ix},
                   [ix, b, d, hw, w](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ix)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& dx = Ops::adj(tp, adj, ix);
                     for (int i = 0; i < b; ++i) {
                       for (int c = 0; c < d; ++c) {
                         const double gv = g[static_cast<size_t>(i) * d + c] * w;
                         for (int64_t p = 0; p < hw; ++p) {
                           dx[(static_cast<size_t>(i) * d + c) * hw + p] += gv;
                         }
                       }
                     }
                   });
}

}  // namespace

Tensor sum_spatial(const Tensor& x) { return spatial_reduce(x, false, "sum_spatial"); }
Tensor avg_pool_spatial(const Tensor& x) { return spatial_reduce(x, true, "avg_pool_spatial"); }

Tensor reshape_patches(const Tensor& x, int b, int h, int w) {
  Tape& t = tape_of(x);
  require(x.shape().size() == 2, "reshape_patches: expects 2-D input, got " + shape_str(x.shape()));
  const int64_t hw = static_cast<int64_t>(h) * w;
  require(x.shape()[0] == b * hw, "reshape_patches: row count " + std::to_string(x.shape()[0]) +
                                      " != b*h*w = " + std::to_string(b * hw));
  const int d = x.shape()[1];
  const auto& xv = x.value();
  std::vector<double> out(xv.size());
  // (i*hw + p, c) -> (i, c, p)
  for (int i = 0; i < b; ++i) {
    for (int64_t p = 0; p < hw; ++p) {
      for (int c = 0; c < d; ++c) {
        out[(static_cast<size_t>(i) * d + c) * hw + p] = xv[(static_cast<size_t>(i) * hw + p) * d + c];
      }
    }
  }
  const int ix = x.id();
  return Ops::make(t, {b, d, h, w}, std::move(out), {ix},
                   [ix, b, d, hw](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ix)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     auto& dx = Ops::adj(tp, adj, ix);
                     for (int i = 0; i < b; ++i) {
                       for (int64_t p = 0; p < hw; ++p) {
                         for (int c = 0; c < d; ++c) {
                           dx[(static_cast<size_t>(i) * hw + p) * d + c] += g[(static_cast<size_t>(i) * d + c) * hw + p];
                         }
                       }
                     }
                   });
}

Tensor audio_visual_map(const Tensor& audio, const Tensor& visual) {
  require_same_tape(audio, visual);
  Tape& t = tape_of(audio);
  const auto& as = audio.shape();
  const auto& vs = visual.shape();
  require(as.size() == 2 && vs.size() == 4 && as[0] == vs[0] && as[1] == vs[1],
          "audio_visual_map: expects b x d audio and b x d x h x w visual, got " + shape_str(as) +
              " and " + shape_str(vs));
  const int b = as[0], d = as[1], h = vs[2], w = vs[3];
  const int64_t hw = static_cast<int64_t>(h) * w;
  const auto& av = audio.value();
  const auto& vv = visual.value();
  std::vector<double> out(static_cast<size_t>(b) * hw, 0.0);
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < d; ++c) {
      const double a = av[static_cast<size_t>(i) * d + c];
      if (a == 0.0) continue;
      for (int64_t p = 0; p < hw; ++p) {
        out[static_cast<size_t>(i) * hw + p] += a * vv[(static_cast<size_t>(i) * d + c) * hw + p];
      }
    }
  }
  const int iaud = audio.id(), ivis = visual.id();
  return Ops::make(t, {b, h, w}, std::move(out), {iaud, ivis},
                   [iaud, ivis, b, d, hw](Tape& tp, Tape::Adjoints& adj, int self) {
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& av2 = Ops::val(tp, iaud);
                     const auto& vv2 = Ops::val(tp, ivis);
                     const bool ga = Ops::needs_grad(tp, iaud);
                     const bool gv = Ops::needs_grad(tp, ivis);
                     std::vector<double>* da = ga ? &Ops::adj(tp, adj, iaud) : nullptr;
                     std::vector<double>* dv = gv ? &Ops::adj(tp, adj, ivis) : nullptr;
                     for (int i = 0; i < b; ++i) {
                       for (int c = 0; c < d; ++c) {
                         const size_t ai = static_cast<size_t>(i) * d + c;
                         for (int64_t p = 0; p < hw; ++p) {
                           const size_t vi = (static_cast<size_t>(i) * d + c) * hw + p;
                           const double gp = g[static_cast<size_t>(i) * hw + p];
                           if (da) (*da)[ai] += gp * vv2[vi];
                           if (dv) (*dv)[vi] += gp * av2[ai];
                         }
                       }
                     }
                   });
}

Tensor minmax_scale_maps(const Tensor& x) {
  Tape& t = tape_of(x);
  require(x.shape().size() == 3, "minmax_scale_maps: expects b x h x w input, got " + shape_str(x.shape()));
  const int b = x.shape()[0];
  const int64_t hw = static_cast<int64_t>(x.shape()[1]) * x.shape()[2];
  const auto& xv = x.value();
  std::vector<double> out(xv.size());
  std::vector<int64_t> imins(static_cast<size_t>(b)), imaxs(static_cast<size_t>(b));
  std::vector<double> ranges(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const size_t row = static_cast<size_t>(i) * hw;
    int64_t imin = 0, imax = 0;
    for (int64_t p = 1; p < hw; ++p) {
      if (xv[row + p] < xv[row + imin]) imin = p;
      if (xv[row + p] > xv[row + imax]) imax = p;
    }
    const double mn = xv[row + imin], mx = xv[row + imax];
    const double range = mx - mn;
    imins[static_cast<size_t>(i)] = imin;
    imaxs[static_cast<size_t>(i)] = imax;
    ranges[static_cast<size_t>(i)] = range;
    if (range < kNormEps) {
      ++t.warnings().constant_maps;
      for (int64_t p = 0; p < hw; ++p) out[row + p] = 0.5;
    } else {
      for (int64_t p = 0; p < hw; ++p) out[row + p] = (xv[row + p] - mn) / range;
    }
  }
  const int ix = x.id();
  return Ops::make(
      t, x.shape(), std::move(out), {ix},
      [ix, b, hw, imins, imaxs, ranges](Tape& tp, Tape::Adjoints& adj, int self) {
        if (!Ops::needs_grad(tp, ix)) return;
        const auto& g = adj[static_cast<size_t>(self)];
        const auto& y = Ops::val(tp, self);
        auto& dx = Ops::adj(tp, adj, ix);
        for (int i = 0; i < b; ++i) {
          const double range = ranges[static_cast<size_t>(i)];
          if (range < kNormEps) continue;  // constant map: output is flat 0.5
          const size_t row = static_cast<size_t>(i) * hw;
          double gsum = 0.0, gysum = 0.0;
          for (int64_t p = 0; p < hw; ++p) {
            gsum += g[row + p];
            gysum += g[row + p] * y[row + p];
          }
          for (int64_t p = 0; p < hw; ++p) dx[row + p] += g[row + p] / range;
          dx[row + static_cast<size_t>(imins[static_cast<size_t>(i)])] += (gysum - gsum) / range;
          dx[row + static_cast<size_t>(imaxs[static_cast<size_t>(i)])] -= gysum / range;
        }
      });
}

Tensor normalize_map(const Tensor& x) {
  Tape& t = tape_of(x);
  require(x.shape().size() == 3, "normalize_map: expects b x h x w input, got " + shape_str(x.shape()));
  const int b = x.shape()[0];
  const int64_t hw = static_cast<int64_t>(x.shape()[1]) * x.shape()[2];
  const auto& xv = x.value();
  std::vector<double> out(xv.size());
  std::vector<double> denoms(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const size_t row = static_cast<size_t>(i) * hw;
    double s = 0.0;
    for (int64_t p = 0; p < hw; ++p) s += xv[row + p];
    denoms[static_cast<size_t>(i)] = s;
    if (s < kNormEps) {
      ++t.warnings().empty_mask_fallbacks;
      const double u = 1.0 / static_cast<double>(hw);
      for (int64_t p = 0; p < hw; ++p) out[row + p] = u;
    } else {
      for (int64_t p = 0; p < hw; ++p) out[row + p] = xv[row + p] / s;
    }
  }
  const int ix = x.id();
  return Ops::make(t, x.shape(), std::move(out), {ix},
                   [ix, b, hw, denoms](Tape& tp, Tape::Adjoints& adj, int self) {
                     if (!Ops::needs_grad(tp, ix)) return;
                     const auto& g = adj[static_cast<size_t>(self)];
                     const auto& y = Ops::val(tp, self);
                     auto& dx = Ops::adj(tp, adj, ix);
                     for (int i = 0; i < b; ++i) {
                       const double s = denoms[static_cast<size_t>(i)];
                       if (s < kNormEps) continue;  // uniform fallback: constant output
                       const size_t row = static_cast<size_t>(i) * hw;
                       double dot = 0.0;
                       for (int64_t p = 0; p < hw; ++p) dot += g[row + p] * y[row + p];
                       for (int64_t p = 0; p < hw; ++p) dx[row + p] += (g[row + p] - dot) / s;
                     }
                   });
}

Tensor detach(const Tensor& a) {
  Tape& t = tape_of(a);
  return t.leaf(a.shape(), a.value(), false);
}

}  // namespace fnac
