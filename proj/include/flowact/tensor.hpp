#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowact/rng.hpp"

namespace flowact {

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// Tensors are value handles over shared storage. A kernel records a backward
// rule on the innermost active Graph if (a) a Graph is active and (b) any
// input requires grad; otherwise it is a plain forward computation, which is
// what inference uses. Every kernel validates that its output is finite and
// throws on NaN/Inf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int ndim() const;
  int dim(int axis) const;
  int64_t numel() const;
  int rows() const { return dim(0); }  // 2-D convenience
  int cols() const { return dim(1); }

  double* data();
  const double* data() const;
  double at(int i) const;
  double at(int i, int j) const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool value);
  // Tensors are shared handles, so gradient storage is reachable through a
  // const handle (same as shared_ptr). Lazily allocated, zero-filled.
  double* grad() const;
  bool grad_allocated() const;
  void zero_grad();

  // Deep copy of values (no graph edge, never requires grad).
  Tensor detached_copy() const;

  std::string shape_str() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;

  friend class Graph;
  friend Tensor make_tensor(std::vector<int> shape, bool requires_grad);
};

// Records operations in execution order; backward() replays the records in
// exact reverse order, which is a reverse topological order of the DAG.
// Graphs nest as an RAII stack: constructing one makes it current, so kernels
// called in its scope are recorded onto it.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current();

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires-grad tensor reachable from the recorded ops. loss must be scalar.
  void backward(const Tensor& loss);

  size_t num_nodes() const { return nodes_.size(); }

  void record(const char* op_name, std::function<void()> backward_fn);

 private:
  struct Node {
    const char* op;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
};

// When active, every kernel output is rounded through 32-bit floats. This is
// the inference-only reduced-precision mode; training always runs in full
// doubles so finite-difference checks stay meaningful.
class Float32Mode {
 public:
  Float32Mode();
  ~Float32Mode();
  static bool active();
};

// ---- kernels -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k) x (k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (m,k) x (n,k) -> (m,n)
Tensor add(const Tensor& a, const Tensor& b);        // same shape, or b is a row vector
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise, or b is a row vector
Tensor scale(const Tensor& a, double s);
Tensor softmax(const Tensor& x);                     // over the last axis
Tensor rms_norm(const Tensor& x, const Tensor& gain);
Tensor swish(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 2-D, axis 0 or 1
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor sum(const Tensor& x);  // scalar
Tensor sinusoidal_encode(double tau, int width);
Tensor rotary_apply(const Tensor& x, const std::vector<int>& positions, int head_dim);

const std::vector<std::string>& kernel_names();

// ---- gradient oracle -----------------------------------------------------

// Central finite differences against the recorded backward pass. scalar_fn
// must rebuild the scalar loss from scratch on every call (it is evaluated
// 2 x numel times per parameter). Returns the worst relative error over all
// coordinates of all params. h must lie in [1e-7, 1e-3].
double grad_check(const std::function<Tensor()>& scalar_fn,
                  const std::vector<Tensor>& params, double h);

}  // namespace flowact
