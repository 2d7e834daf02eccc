#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmx {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major f64 array. Everything in the toolkit is 64-bit; MI
// estimates go through exp/log and do not survive float32 well.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v);
  static Tensor scalar(double v);
  static Tensor row(std::vector<double> v);
  static Tensor from(std::vector<int> s, std::vector<double> v);

  int numel() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  double& operator[](int i) { return data[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

int numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

enum class Padding { same, valid };

// Reverse-mode tape. Nodes are appended in execution order, which is also a
// topological order, so the backward pass is a single reverse sweep that
// visits each node once. backward() zeroes gradient buffers first and is
// therefore idempotent. Non-finite values are rejected at op boundaries and
// reported with the offending node id.
//
// A tape is confined to one thread. Borrowed buffers (borrow_param /
// borrow_const) must outlive the tape; they are not copied.
class Tape {
 public:
  struct Var {
    int id = -1;
    bool ok() const { return id >= 0; }
  };

  // leaves
  Var input(const Tensor& t);        // copied, differentiable
  Var constant(const Tensor& t);     // copied, no gradient
  Var borrow_param(const Tensor* t); // external storage, differentiable
  Var borrow_const(const Tensor* t); // external storage, no gradient

  // elementwise
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var affine(Var a, double scale, double shift);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);
  // clipping as identity in the backward pass (training-loop use only;
  // attack projections happen outside the tape)
  Var clip_st(Var a, double lo, double hi);

  // linear algebra / structure
  Var matmul(Var a, Var b);              // [m,k]x[k,n]
  Var add_rowvec(Var m, Var r);          // [m,n] + [n]
  Var add_chanvec(Var x, Var b);         // [n,c,h,w] + [c]
  Var conv2d(Var x, Var k, Padding pad); // stride 1, odd kernel for same
  Var maxpool2(Var x);                   // 2x2, even spatial dims
  Var upsample2(Var x);                  // nearest neighbour 2x
  Var reshape(Var a, std::vector<int> shape);
  Var concat_cols(Var a, Var b);                    // [m,n1]|[m,n2]
  Var gather_rows(Var a, const std::vector<int>& idx);

  // reductions
  Var mean(Var a);
  Var sum(Var a);
  Var l1_norm(Var a);
  Var l2_norm(Var a);

  // margin of the true/target class against the runner-up, the scalar the
  // classifier attack criteria are built from; ties break to the first index
  Var logit_margin(Var logits, int label, double kappa, bool targeted);
  // mean softmax cross-entropy against constant one-hot rows
  Var xent_logits(Var logits, Var onehot);

  void backward(Var scalar_out);

  const Tensor& val(Var v) const;
  const Tensor& grad(Var v) const; // valid after backward; zeros if unreached
  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    leaf, add, sub, mul, div, affine, relu, sigmoid, exp_, log_, clip_st,
    matmul, add_rowvec, add_chanvec, conv2d, maxpool2, upsample2, reshape,
    concat_cols, gather_rows, mean, sum, l1_norm, l2_norm, logit_margin,
    xent_logits,
  };

  struct Node {
    Op op;
    int a = -1, b = -1;
    Tensor out;
    Tensor grad;
    const Tensor* ext = nullptr; // borrowed leaf storage
    bool needs_grad = false;
    double p0 = 0.0, p1 = 0.0;   // op scalars (scale/shift, clip bounds, kappa)
    int i0 = 0, i1 = 0;          // op ints (label, picked index, padding)
    std::vector<int> iv;         // permutation / argmax indices
  };

  const Tensor& value_of(const Node& n) const { return n.ext ? *n.ext : n.out; }
  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Node n, const char* opname);
  Var leaf(const Tensor* borrowed, Tensor owned, bool needs_grad);
  void check_var(Var v, const char* opname) const;
  void backward_node(int id);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
  Tensor empty_grad_;
};

}  // namespace mmx
