#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

#include "mi2m/common.hpp"

namespace mi2m::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Lightweight handle into a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode tape over Eigen matrices. Nodes are created in topological
// order by construction; backward() walks them in reverse.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // lazily sized; empty until first accumulation
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;  // reads nodes_[self].grad
  };

  Var leaf(Mat value, bool requires_grad = false);

  // Accumulation buffer for node `id`, zero-initialised to the value shape.
  Mat& grad_buf(int id);

  const Node& node(int id) const { return nodes_[id]; }
  Node& node(int id) { return nodes_[id]; }
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates; `loss` must be 1x1.
  void backward(Var loss);

  // Gradient of a leaf/parameter var after backward(); zero matrix if the
  // node was never reached.
  Mat grad_of(Var v) const;

  int emplace(Mat value, bool requires_grad, std::function<void(Tape&, int)> bw);

 private:
  std::vector<Node> nodes_;
};

// --- elementwise / structural ops -------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);       // same shape
Var sub(Var a, Var b);       // same shape
Var mul(Var a, Var b);       // Hadamard
Var affine(Var a, double scale, double shift);  // scale*a + shift
Var add_rowvec(Var a, Var v);  // v is 1 x cols, broadcast over rows
Var add_colvec(Var a, Var v);  // v is rows x 1, broadcast over cols

Var sigmoid(Var a);
Var tanh_(Var a);
Var relu(Var a);
Var gelu(Var a);
Var exp_(Var a);
Var log_(Var a);

Var softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int r0, int n);
Var slice_cols(Var a, int c0, int n);
Var gather_rows(Var a, std::vector<int> idx);

// Copy of `x` with each row in `idx` replaced by the broadcast row vector
// `row` (1 x cols). Grad flows to the untouched rows of x and into `row`.
Var mask_rows(Var x, std::vector<int> idx, Var row);

Var reshape(Var a, int rows, int cols);
Var sum_all(Var a);   // 1x1
Var mean_all(Var a);  // 1x1
Var mean_rows(Var a); // 1 x cols, column means over rows

// Sum over rows i of -log softmax(logits_i)[target_i]; caller scales to a
// mean. Softmax is recomputed in backward to avoid caching a |V|-wide copy.
Var nll_rows(Var logits, std::vector<int> targets);

// softmax((logits + noise) / tau) per row; with hard=true the forward value
// is the exact one-hot at the row argmax and the gradient is straight-through
// via the relaxed softmax.
Var gumbel_softmax_rows(Var logits, const Mat& noise, double tau, bool hard);

// Generic gather over the parent's flat (column-major) storage; entries < 0
// read as zero. Backward scatter-adds. Used for im2col and upsampling maps.
struct IndexMap {
  int rows = 0, cols = 0;
  std::vector<int64_t> idx;  // rows*cols entries, column-major
  int64_t at(int r, int c) const { return idx[static_cast<size_t>(c) * rows + r]; }
  int64_t& at(int r, int c) { return idx[static_cast<size_t>(c) * rows + r]; }
};

Var gather_flat(Var a, const IndexMap& map);

}  // namespace mi2m::ad
