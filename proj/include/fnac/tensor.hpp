#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace fnac {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Counters for recoverable numeric fallbacks (clamped norms, constant maps,
// empty masks). Owned per tape so concurrent tapes never share state.
struct WarningCounters {
  int64_t zero_norm_rows = 0;
  int64_t constant_maps = 0;
  int64_t empty_mask_fallbacks = 0;
};

class Tape;

// Cheap handle to a node on a Tape. The tape owns all storage; values are
// immutable after creation, grads accumulate across backward() calls.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  int64_t size() const;
  // Scalar convenience accessor; requires numel == 1.
  double item() const;

  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are recorded in topological order by
// construction; backward() walks the tape once in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false);
  Tensor constant(Shape shape, std::vector<double> data);
  Tensor scalar(double v);
  Tensor full(Shape shape, double v, bool requires_grad = false);

  // Accumulates d(loss)/d(node) into the grad field of every requires_grad
  // node reachable from `loss`. `loss` must be a scalar produced on this tape.
  void backward(const Tensor& loss);
  void zero_grad();

  WarningCounters& warnings() { return warnings_; }
  const WarningCounters& warnings() const { return warnings_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  friend class Tensor;
  friend struct TapeOps;

  using Adjoints = std::vector<std::vector<double>>;
  using BackwardFn = std::function<void(Tape&, Adjoints&, int)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // lazily sized on first accumulation
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  Tensor emplace(Shape shape, std::vector<double> value, std::vector<int> inputs,
                 BackwardFn backward);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  std::vector<Node> nodes_;
  WarningCounters warnings_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// 2-D only. axis=0 collapses rows (result length cols), axis=1 collapses cols.
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor diag(const Tensor& a);

// Rows exponentiated at x/temperature, normalized to sum 1. Stabilized by
// row-max subtraction. temperature must be > 0.
Tensor row_softmax(const Tensor& a, double temperature);

// Unit-normalizes every fiber along axis 1 (rows of a 2-D tensor, channel
// fibers of a 4-D tensor). Denominators clamped at kNormEps; clamps bump the
// zero_norm_rows warning counter.
Tensor l2_normalize(const Tensor& a);

// Adds vector v (length c) to every row of m (r x c).
Tensor add_rowvec(const Tensor& m, const Tensor& v);

// ---- spatial ops (b x d x h x w features, b x h x w maps) ----
// out[i,c,p] = features[i,c,p] * map[i,p]
Tensor mul_map(const Tensor& features, const Tensor& map);
// out[i,c] = sum_p x[i,c,p]
Tensor sum_spatial(const Tensor& x);
// out[i,c] = mean_p x[i,c,p]
Tensor avg_pool_spatial(const Tensor& x);
// (b*h*w) x d patch-major matrix -> b x d x h x w
Tensor reshape_patches(const Tensor& x, int b, int h, int w);
// out[i,p] = sum_c audio[i,c] * visual[i,c,p]
Tensor audio_visual_map(const Tensor& audio, const Tensor& visual);
// Per-sample min-max scaling of b x h x w maps to [0,1]; a constant map
// becomes all 0.5 (constant_maps counter).
Tensor minmax_scale_maps(const Tensor& x);
// Per-sample normalization of b x h x w maps to sum 1; an (effectively)
// all-zero map falls back to uniform weights (empty_mask_fallbacks counter).
Tensor normalize_map(const Tensor& x);

// Value copy with gradient flow cut.
Tensor detach(const Tensor& a);

constexpr double kNormEps = 1e-12;

}  // namespace fnac
