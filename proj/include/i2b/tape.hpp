#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "i2b/errors.hpp"
#include "i2b/tensor.hpp"

namespace i2b {

// Reverse-mode autodiff over 2-D nodes.
//
// A Tape records primitive operations in creation order; creation order is a
// topological order by construction, so backward() is a single reverse sweep
// that visits each node exactly once. Gradients of leaf nodes are added into
// the external Tensor's grad, and repeated backward calls keep accumulating
// there (callers zero grads between optimizer steps).
//
// With grad disabled the same ops run the same arithmetic and skip only the
// bookkeeping, which is what makes sampling-time values bit-identical to the
// training-time forward.
class Tape {
 public:
  using Ref = int;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // -- inputs ---------------------------------------------------------------
  // Leaf bound to an external tensor; backward accumulates into t.grad.
  Ref leaf(Tensor& t);
  // Unowned constant; never receives gradient.
  Ref constant(std::size_t rows, std::size_t cols, std::vector<double> data);
  Ref constant_row(const std::vector<double>& v);

  // -- elementwise ----------------------------------------------------------
  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref mul(Ref a, Ref b);
  Ref min_elem(Ref a, Ref b);
  Ref scale(Ref a, double c);
  Ref add_scalar(Ref a, double c);
  Ref exp_elem(Ref a);
  Ref log_elem(Ref a);
  Ref clamp(Ref a, double lo, double hi);
  Ref silu(Ref a);

  // -- linear algebra / shaping ----------------------------------------------
  Ref matmul(Ref a, Ref b, bool transpose_a = false, bool transpose_b = false);
  Ref add_rowvec(Ref a, Ref row);  // broadcast a 1xC row over every row of a
  Ref concat_rows(Ref a, Ref b);
  Ref concat_cols(Ref a, Ref b);
  Ref slice_rows(Ref a, std::size_t r0, std::size_t r1);  // [r0, r1)
  Ref slice_cols(Ref a, std::size_t c0, std::size_t c1);  // [c0, c1)
  Ref mean_rows(Ref a);  // 1xC column means

  // -- model building blocks -------------------------------------------------
  // Gather rows of a table by token id (the embedding lookup).
  Ref embed(Ref table, const std::vector<int>& ids);
  // Row-wise RMS normalization; w is either 1xC (shared scale) or the same
  // shape as x (per-row scale, used by latent norm modulation).
  Ref rms_norm(Ref x, Ref w);
  // Row-wise softmax over scores with a causal mask: column j is visible to
  // row i iff j < prefix_cols (always-attendable slots, e.g. the PSA pseudo
  // slot) or j - prefix_cols <= i. Requires cols == prefix_cols + rows.
  // Masked entries come out exactly 0.
  Ref causal_softmax(Ref scores, std::size_t prefix_cols);
  Ref row_log_softmax(Ref logits);
  // Shannon entropy of each row's softmax distribution, in nats; Lx1.
  Ref row_entropy(Ref logits);
  // Gather scalar entries (row, col) into a 1xN node.
  Ref pick(Ref m, const std::vector<std::pair<int, int>>& coords);
  Ref sum(Ref a);   // 1x1
  Ref mean(Ref a);  // 1x1

  // -- evaluation -------------------------------------------------------------
  const std::vector<double>& val(Ref r) const { return nodes_[r].val; }
  std::size_t val_rows(Ref r) const { return nodes_[r].rows; }
  std::size_t val_cols(Ref r) const { return nodes_[r].cols; }
  double scalar(Ref r) const;

  // Reverse sweep from a 1x1 loss node, seeding d(loss)/d(loss) = seed.
  // Node gradients are reset first; leaf tensors keep accumulating.
  void backward(Ref loss, double seed = 1.0);

 private:
  struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<double> val;
    std::vector<double> grad;            // lazily sized in backward
    std::function<void(Tape&)> back;     // empty for constants / no-grad
    Tensor* bound = nullptr;             // leaf target
  };

  Ref push(std::size_t rows, std::size_t cols);
  Node& node(Ref r) { return nodes_[r]; }
  std::vector<double>& grad_of(Ref r);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// ---------------------------------------------------------------------------
// Free-standing numeric ops shared by the tape kernels and callers that do
// not need gradients.

// Max-stabilized softmax with compensated summation; the output sums to 1
// within 1e-12 even at vocabulary lengths in the tens of thousands.
std::vector<double> softmax(const std::vector<double>& logits);

// output_i = w_i * x_i / sqrt(mean(x^2) + 1e-6)
std::vector<double> rms_normalize(const std::vector<double>& x,
                                  const std::vector<double>& w);

// Central finite differences against the analytic gradient stored in
// theta.grad. f() evaluates the scalar objective at theta's current data.
// Returns max_i |analytic_i - central_i| / max(1, |analytic_i|).
double finite_difference_check(const std::function<double()>& f, Tensor& theta,
                               double step);

// Compensated sum, exposed for tests that measure probability mass.
double kahan_sum(const std::vector<double>& v);

}  // namespace i2b
