#pragma once

#include <Eigen/Dense>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace slottok::ad {

using Mat = Eigen::MatrixXd;

// A named trainable parameter. Lives outside any Graph; graphs reference it
// through leaf nodes and the trainer accumulates gradients into `grad`.
struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;
  bool no_decay = false;

  Tensor() = default;
  Tensor(std::string n, Mat v, bool no_dec = false)
      : name(std::move(n)), value(std::move(v)), no_decay(no_dec) {
    grad = Mat::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape over Eigen double matrices. One graph per forward pass;
// values are computed eagerly, backward replays the tape in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Mat m);                 // constant leaf, no gradient
  Var leaf(Mat m);                  // leaf that tracks its gradient (probes)
  Var param(Tensor& t);             // leaf bound to a parameter

  // In inference mode parameters enter as constants: no backward closures are
  // recorded, which keeps sampling loops lean. Off by default.
  void set_inference(bool on) { inference_ = on; }
  bool inference() const { return inference_; }

  const Mat& val(Var v) const;
  const Mat& grad(Var v) const;     // valid after backward()

  void backward(Var loss);
  void backward(const std::vector<std::pair<Var, Mat>>& seeds);

  // Adds every bound parameter's node gradient into Tensor::grad.
  void accumulate_param_grads(double scale = 1.0);

  std::size_t num_nodes() const { return nodes_.size(); }

  // --- elementwise / broadcast arithmetic ---
  Var add(Var a, Var b);
  Var add_rowbc(Var a, Var row);    // row: 1×C added to every row of a
  Var add_colbc(Var a, Var col);    // col: R×1 added to every column of a
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var mul_rowbc(Var a, Var row);
  Var smul(Var a, double k);
  Var affine(Var a, double k, double c);   // k*a + c
  Var mul_snode(Var a, Var s);      // s is 1×1
  Var div_snode(Var a, Var s);      // s is 1×1

  // --- linear algebra ---
  Var matmul(Var a, Var b);
  Var transpose(Var a);

  // --- reductions ---
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var rowsum(Var a);                // N×C -> N×1
  Var colsum(Var a);                // N×C -> 1×C
  Var rowmean(Var a);
  Var colmean(Var a);

  // --- nonlinearities ---
  Var sigmoid(Var a);
  Var tanh_(Var a);
  Var relu(Var a);
  Var silu(Var a);
  Var exp_(Var a);
  Var log_(Var a);
  Var sqrt_(Var a);
  Var square(Var a);

  // --- normalizations / attention pieces ---
  Var softmax_rows(Var a);
  Var softmax_cols(Var a);
  Var log_softmax_rows(Var a);
  // y_ij = (a_ij + eps) / sum_j (a_ij + eps); weighted-mean renormalization
  Var norm_rows_sum(Var a, double eps);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
  // x is C×S; rows are split into `groups` contiguous blocks, each block is
  // normalized over all its elements; gamma/beta are C×1 per-channel affine.
  Var group_norm(Var x, int groups, Var gamma, Var beta, double eps = 1e-6);
  Var l2norm_rows(Var x, double eps = 1e-12);

  // --- shape ops ---
  Var concat_rows(Var a, Var b);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var a, int r0, int n);
  Var slice_cols(Var a, int c0, int n);

  // --- gather / embedding ---
  Var embed_rows(Var table, const std::vector<int>& ids);

  // --- convolution / resampling (feature maps stored C×(H·W)) ---
  Var conv2d(Var x, Var w, Var b, int c_in, int h, int w_in, int c_out,
             int k, int stride, int pad);
  Var upsample2(Var x, int h, int w);

  // --- quantization / losses ---
  Var straight_through(Var z, Mat quantized);
  Var detach(Var a);
  Var mse(Var a, Var b);            // mean squared error over all elements
  Var sse(Var a, Var b);            // summed squared error
  // -mean over active rows of logp(i, target[i])
  Var pick_nll_mean(Var logp, const std::vector<int>& targets,
                    const std::vector<bool>& active);

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void()> back;     // empty for leaves / no-grad nodes
    bool needs_grad = false;
    Tensor* bound = nullptr;
  };

  int make(Mat val, bool needs_grad, std::function<void()> back = {});
  Mat& grad_ref(int id);
  void add_grad(int id, const Mat& g);
  void check_same_graph(Var v) const;

  std::deque<Node> nodes_;
  bool inference_ = false;

  friend struct Var;
};

// Helpers for building feature-map convolutions.
void im2col(const Mat& x, int c_in, int h, int w, int k, int stride, int pad,
            Mat& cols);
void col2im(const Mat& cols, int c_in, int h, int w, int k, int stride,
            int pad, Mat& gx);

inline Var operator+(Var a, Var b) { return a.g->add(a, b); }
inline Var operator-(Var a, Var b) { return a.g->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.g->mul(a, b); }

bool all_finite(const Mat& m);

}  // namespace slottok::ad
