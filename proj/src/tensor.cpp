#include "flowact/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace flowact {

namespace {

thread_local std::vector<Graph*> g_graph_stack;
thread_local int g_f32_depth = 0;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_to_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              a.shape_str() + " vs " + b.shape_str());
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what + ", got " + a.shape_str());
}

// Fixed-order dot product (4 independent accumulators, combined in a fixed
// tree) so results are identical from run to run.
double dot(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// out(m,n) += A(m,k) * B(k,n)
void mm_nn_acc(double* out, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = out + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// out(m,n) += A(m,k) * B(n,k)^T
void mm_nt_acc(double* out, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = out + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] += dot(arow, b + static_cast<int64_t>(j) * k, k);
  }
}

// out(k,n) += A(m,k)^T * B(m,n)
void mm_tn_acc(double* out, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    const double* brow = b + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      double* crow = out + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
constexpr double kRmsEps = 1e-8;

}  // namespace

// ---- Tensor ----------------------------------------------------------------

struct Tensor::Impl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched
  bool requires_grad = false;
};

Tensor make_tensor(std::vector<int> shape, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in shape");
  }
  Tensor t;
  t.impl_ = std::make_shared<Tensor::Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(shape_numel(t.impl_->shape), 0.0);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return make_tensor(std::move(shape), requires_grad);
}

Tensor Tensor::constant(std::vector<int> shape, double value) {
  Tensor t = make_tensor(std::move(shape), false);
  for (auto& v : t.impl_->data) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  if (static_cast<int64_t>(data.size()) != t.numel()) {
    throw std::invalid_argument("tensor: data length does not match shape " + t.shape_str());
  }
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = rng.normal() * stddev;
  return t;
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= ndim()) throw std::invalid_argument("tensor: axis out of range");
  return impl_->shape[axis];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

double Tensor::at(int i) const { return impl_->data.at(i); }

double Tensor::at(int i, int j) const {
  if (ndim() != 2) throw std::invalid_argument("tensor: at(i,j) on non-2D tensor");
  return impl_->data.at(static_cast<int64_t>(i) * dim(1) + j);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str());
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

double* Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad.data();
}

bool Tensor::grad_allocated() const { return !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detached_copy() const {
  Tensor t = make_tensor(impl_->shape, false);
  t.impl_->data = impl_->data;
  return t;
}

std::string Tensor::shape_str() const { return shape_to_str(impl_->shape); }

// ---- Graph -----------------------------------------------------------------

Graph::Graph() { g_graph_stack.push_back(this); }

Graph::~Graph() { g_graph_stack.pop_back(); }

Graph* Graph::current() { return g_graph_stack.empty() ? nullptr : g_graph_stack.back(); }

void Graph::record(const char* op_name, std::function<void()> backward_fn) {
  nodes_.push_back(Node{op_name, std::move(backward_fn)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
  }
  loss.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
}

// ---- Float32Mode -----------------------------------------------------------

Float32Mode::Float32Mode() { ++g_f32_depth; }
Float32Mode::~Float32Mode() { --g_f32_depth; }
bool Float32Mode::active() { return g_f32_depth > 0; }

// ---- kernel plumbing -------------------------------------------------------

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (Graph::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Finalize a kernel output: optional float32 rounding, then the hard
// finiteness check.
void finalize(const char* op, Tensor& out) {
  double* p = out.data();
  const int64_t n = out.numel();
  if (Float32Mode::active()) {
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  }
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw std::runtime_error(std::string(op) + ": non-finite value in output " +
                               out.shape_str());
    }
  }
}

void check_finite_inputs(const char* op, const Tensor& t) {
  const double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(p[i])) {
      throw std::runtime_error(std::string(op) + ": non-finite value in input");
    }
  }
}

}  // namespace

// ---- kernels ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) shape_error("matmul", a, b);
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool rec = want_grad({&a, &b});
  Tensor out = make_tensor({m, n}, rec);
  mm_nn_acc(out.data(), a.data(), b.data(), m, k, n);
  finalize("matmul", out);
  if (rec) {
    Graph::current()->record("matmul", [a, b, out, m, k, n]() mutable {
      const double* dc = out.grad();
      if (a.requires_grad()) mm_nt_acc(a.grad(), dc, b.data(), m, n, k);
      if (b.requires_grad()) mm_tn_acc(b.grad(), a.data(), dc, m, k, n);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const bool rec = want_grad({&a, &b});
  Tensor out = make_tensor({m, n}, rec);
  mm_nt_acc(out.data(), a.data(), b.data(), m, k, n);
  finalize("matmul_nt", out);
  if (rec) {
    Graph::current()->record("matmul_nt", [a, b, out, m, k, n]() mutable {
      const double* dc = out.grad();
      if (a.requires_grad()) mm_nn_acc(a.grad(), dc, b.data(), m, n, k);
      if (b.requires_grad()) mm_tn_acc(b.grad(), dc, a.data(), m, n, k);
    });
  }
  return out;
}

namespace {

// add/sub/mul share the same broadcast contract: identical shapes, or a 2-D
// lhs with a row-vector rhs (shape (n) or (1,n)) applied per row.
enum class BcKind { same, row };

BcKind broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BcKind::same;
  if (a.ndim() == 2 && b.ndim() == 1 && a.cols() == b.dim(0)) return BcKind::row;
  if (a.ndim() == 2 && b.ndim() == 2 && b.rows() == 1 && a.cols() == b.cols()) return BcKind::row;
  shape_error(op, a, b);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const BcKind kind = broadcast_kind("add", a, b);
  const bool rec = want_grad({&a, &b});
  Tensor out = make_tensor(a.shape(), rec);
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (kind == BcKind::same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  } else {
    const int cols = a.cols();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % cols];
  }
  finalize("add", out);
  if (rec) {
    Graph::current()->record("add", [a, b, out, kind]() mutable {
      const double* dc = out.grad();
      const int64_t count = out.numel();
      if (a.requires_grad()) {
        double* da = a.grad();
        for (int64_t i = 0; i < count; ++i) da[i] += dc[i];
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        if (kind == BcKind::same) {
          for (int64_t i = 0; i < count; ++i) db[i] += dc[i];
        } else {
          const int cols = a.cols();
          for (int64_t i = 0; i < count; ++i) db[i % cols] += dc[i];
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const BcKind kind = broadcast_kind("sub", a, b);
  const bool rec = want_grad({&a, &b});
  Tensor out = make_tensor(a.shape(), rec);
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (kind == BcKind::same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  } else {
    const int cols = a.cols();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % cols];
  }
  finalize("sub", out);
  if (rec) {
    Graph::current()->record("sub", [a, b, out, kind]() mutable {
      const double* dc = out.grad();
      const int64_t count = out.numel();
      if (a.requires_grad()) {
        double* da = a.grad();
        for (int64_t i = 0; i < count; ++i) da[i] += dc[i];
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        if (kind == BcKind::same) {
          for (int64_t i = 0; i < count; ++i) db[i] -= dc[i];
        } else {
          const int cols = a.cols();
          for (int64_t i = 0; i < count; ++i) db[i % cols] -= dc[i];
        }
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const BcKind kind = broadcast_kind("mul", a, b);
  const bool rec = want_grad({&a, &b});
  Tensor out = make_tensor(a.shape(), rec);
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (kind == BcKind::same) {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  } else {
    const int cols = a.cols();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % cols];
  }
  finalize("mul", out);
  if (rec) {
    Graph::current()->record("mul", [a, b, out, kind]() mutable {
      const double* dc = out.grad();
      const int64_t count = out.numel();
      const double* pa2 = a.data();
      const double* pb2 = b.data();
      const int cols = (kind == BcKind::row) ? a.cols() : 0;
      if (a.requires_grad()) {
        double* da = a.grad();
        if (kind == BcKind::same) {
          for (int64_t i = 0; i < count; ++i) da[i] += dc[i] * pb2[i];
        } else {
          for (int64_t i = 0; i < count; ++i) da[i] += dc[i] * pb2[i % cols];
        }
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        if (kind == BcKind::same) {
          for (int64_t i = 0; i < count; ++i) db[i] += dc[i] * pa2[i];
        } else {
          for (int64_t i = 0; i < count; ++i) db[i % cols] += dc[i] * pa2[i];
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  const bool rec = want_grad({&a});
  Tensor out = make_tensor(a.shape(), rec);
  const int64_t n = a.numel();
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  finalize("scale", out);
  if (rec) {
    Graph::current()->record("scale", [a, out, s]() mutable {
      const double* dc = out.grad();
      double* da = a.grad();
      const int64_t count = out.numel();
      for (int64_t i = 0; i < count; ++i) da[i] += dc[i] * s;
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.ndim() < 1 || x.ndim() > 2) shape_error("softmax", x, "expected 1-D or 2-D input");
  check_finite_inputs("softmax", x);
  const int cols = x.ndim() == 2 ? x.cols() : x.dim(0);
  const int rows = static_cast<int>(x.numel() / cols);
  const bool rec = want_grad({&x});
  Tensor out = make_tensor(x.shape(), rec);
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < rows; ++i) {
    const double* r = px + static_cast<int64_t>(i) * cols;
    double* o = po + static_cast<int64_t>(i) * cols;
    double mx = r[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      o[j] = std::exp(r[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < cols; ++j) o[j] *= inv;
  }
  finalize("softmax", out);
  if (rec) {
    Graph::current()->record("softmax", [x, out, rows, cols]() mutable {
      const double* dy = out.grad();
      const double* y = out.data();
      double* dx = x.grad();
      for (int i = 0; i < rows; ++i) {
        const int64_t off = static_cast<int64_t>(i) * cols;
        double dotv = 0.0;
        for (int j = 0; j < cols; ++j) dotv += dy[off + j] * y[off + j];
        for (int j = 0; j < cols; ++j) dx[off + j] += y[off + j] * (dy[off + j] - dotv);
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  if (x.ndim() < 1 || x.ndim() > 2) shape_error("rms_norm", x, "expected 1-D or 2-D input");
  const int cols = x.ndim() == 2 ? x.cols() : x.dim(0);
  if (gain.ndim() != 1 || gain.dim(0) != cols) shape_error("rms_norm", x, gain);
  const int rows = static_cast<int>(x.numel() / cols);
  const bool rec = want_grad({&x, &gain});
  Tensor out = make_tensor(x.shape(), rec);
  const double* px = x.data();
  const double* pg = gain.data();
  double* po = out.data();
  std::vector<double> inv_rms(rows);
  for (int i = 0; i < rows; ++i) {
    const double* r = px + static_cast<int64_t>(i) * cols;
    double ms = 0.0;
    for (int j = 0; j < cols; ++j) ms += r[j] * r[j];
    ms /= cols;
    inv_rms[i] = 1.0 / std::sqrt(ms + kRmsEps);
    double* o = po + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) o[j] = r[j] * inv_rms[i] * pg[j];
  }
  finalize("rms_norm", out);
  if (rec) {
    Graph::current()->record(
        "rms_norm", [x, gain, out, rows, cols, inv_rms = std::move(inv_rms)]() mutable {
          const double* dy = out.grad();
          const double* px2 = x.data();
          const double* pg2 = gain.data();
          for (int i = 0; i < rows; ++i) {
            const int64_t off = static_cast<int64_t>(i) * cols;
            const double ir = inv_rms[i];
            if (x.requires_grad()) {
              double dotv = 0.0;
              for (int j = 0; j < cols; ++j) dotv += dy[off + j] * pg2[j] * px2[off + j];
              const double c = dotv * ir * ir * ir / cols;
              double* dx = x.grad();
              for (int j = 0; j < cols; ++j) {
                dx[off + j] += dy[off + j] * pg2[j] * ir - px2[off + j] * c;
              }
            }
            if (gain.requires_grad()) {
              double* dg = gain.grad();
              for (int j = 0; j < cols; ++j) dg[j] += dy[off + j] * px2[off + j] * ir;
            }
          }
        });
  }
  return out;
}

Tensor swish(const Tensor& x) {
  const bool rec = want_grad({&x});
  Tensor out = make_tensor(x.shape(), rec);
  const int64_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sigmoid(px[i]);
  finalize("swish", out);
  if (rec) {
    Graph::current()->record("swish", [x, out]() mutable {
      const double* dc = out.grad();
      const double* px2 = x.data();
      double* dx = x.grad();
      const int64_t count = out.numel();
      for (int64_t i = 0; i < count; ++i) {
        const double sg = sigmoid(px2[i]);
        dx[i] += dc[i] * sg * (1.0 + px2[i] * (1.0 - sg));
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const bool rec = want_grad({&x});
  Tensor out = make_tensor(x.shape(), rec);
  const int64_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const double v = px[i];
    po[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  finalize("gelu", out);
  if (rec) {
    Graph::current()->record("gelu", [x, out]() mutable {
      const double* dc = out.grad();
      const double* px2 = x.data();
      double* dx = x.grad();
      const int64_t count = out.numel();
      for (int64_t i = 0; i < count; ++i) {
        const double v = px2[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double d =
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        dx[i] += dc[i] * d;
      }
    });
  }
  return out;
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) shape_error("embedding_gather", table, "expected 2-D table");
  const int vocab = table.rows(), width = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("embedding_gather: token id " + std::to_string(id) +
                                  " out of range for vocab " + std::to_string(vocab));
    }
  }
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw std::invalid_argument("embedding_gather: empty id list");
  const bool rec = want_grad({&table});
  Tensor out = make_tensor({n, width}, rec);
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<int64_t>(i) * width,
                table.data() + static_cast<int64_t>(ids[i]) * width, sizeof(double) * width);
  }
  finalize("embedding_gather", out);
  if (rec) {
    Graph::current()->record("embedding_gather", [table, out, ids, width]() mutable {
      const double* dc = out.grad();
      double* dt = table.grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        double* row = dt + static_cast<int64_t>(ids[i]) * width;
        const double* src = dc + static_cast<int64_t>(i) * width;
        for (int j = 0; j < width; ++j) row[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  for (const Tensor& p : parts) {
    if (p.ndim() != 2) shape_error("concat", p, "expected 2-D inputs");
  }
  int rows = parts[0].rows(), cols = parts[0].cols();
  for (size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0) {
      if (parts[i].cols() != cols) shape_error("concat", parts[0], parts[i]);
      rows += parts[i].rows();
    } else {
      if (parts[i].rows() != rows) shape_error("concat", parts[0], parts[i]);
      cols += parts[i].cols();
    }
  }
  bool rec = false;
  if (Graph::current() != nullptr) {
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
  }
  Tensor out = make_tensor({rows, cols}, rec);
  if (axis == 0) {
    int64_t off = 0;
    for (const Tensor& p : parts) {
      std::memcpy(out.data() + off, p.data(), sizeof(double) * p.numel());
      off += p.numel();
    }
  } else {
    int col_off = 0;
    for (const Tensor& p : parts) {
      for (int i = 0; i < rows; ++i) {
        std::memcpy(out.data() + static_cast<int64_t>(i) * cols + col_off,
                    p.data() + static_cast<int64_t>(i) * p.cols(), sizeof(double) * p.cols());
      }
      col_off += p.cols();
    }
  }
  finalize("concat", out);
  if (rec) {
    Graph::current()->record("concat", [parts, out, axis, rows, cols]() mutable {
      const double* dc = out.grad();
      if (axis == 0) {
        int64_t off = 0;
        for (Tensor& p : const_cast<std::vector<Tensor>&>(parts)) {
          if (p.requires_grad()) {
            double* dp = p.grad();
            for (int64_t i = 0; i < p.numel(); ++i) dp[i] += dc[off + i];
          }
          off += p.numel();
        }
      } else {
        int col_off = 0;
        for (Tensor& p : const_cast<std::vector<Tensor>&>(parts)) {
          if (p.requires_grad()) {
            double* dp = p.grad();
            for (int i = 0; i < rows; ++i) {
              const double* src = dc + static_cast<int64_t>(i) * cols + col_off;
              double* dst = dp + static_cast<int64_t>(i) * p.cols();
              for (int j = 0; j < p.cols(); ++j) dst[j] += src[j];
            }
          }
          col_off += p.cols();
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (x.ndim() != 2) shape_error("slice", x, "expected 2-D input");
  if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  const int bound = x.dim(axis);
  if (start < 0 || len <= 0 || start + len > bound) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                x.shape_str());
  }
  const int rows = x.rows(), cols = x.cols();
  const bool rec = want_grad({&x});
  Tensor out = make_tensor(axis == 0 ? std::vector<int>{len, cols} : std::vector<int>{rows, len},
                           rec);
  if (axis == 0) {
    std::memcpy(out.data(), x.data() + static_cast<int64_t>(start) * cols,
                sizeof(double) * out.numel());
  } else {
    for (int i = 0; i < rows; ++i) {
      std::memcpy(out.data() + static_cast<int64_t>(i) * len,
                  x.data() + static_cast<int64_t>(i) * cols + start, sizeof(double) * len);
    }
  }
  finalize("slice", out);
  if (rec) {
    Graph::current()->record("slice", [x, out, axis, start, len, rows, cols]() mutable {
      const double* dc = out.grad();
      double* dx = x.grad();
      if (axis == 0) {
        double* dst = dx + static_cast<int64_t>(start) * cols;
        for (int64_t i = 0; i < out.numel(); ++i) dst[i] += dc[i];
      } else {
        for (int i = 0; i < rows; ++i) {
          double* dst = dx + static_cast<int64_t>(i) * cols + start;
          const double* src = dc + static_cast<int64_t>(i) * len;
          for (int j = 0; j < len; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool rec = want_grad({&x});
  Tensor out = make_tensor({1}, rec);
  const double* px = x.data();
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
  out.data()[0] = s;
  finalize("sum", out);
  if (rec) {
    Graph::current()->record("sum", [x, out]() mutable {
      const double g = out.grad()[0];
      double* dx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor sinusoidal_encode(double tau, int width) {
  if (width < 2 || width % 2 != 0) {
    throw std::invalid_argument("sinusoidal_encode: width must be even and >= 2, got " +
                                std::to_string(width));
  }
  // First half sines, second half cosines, frequencies geometric in
  // [1, 1e4]. Constant w.r.t. the graph (tau is never differentiated).
  Tensor out = make_tensor({width}, false);
  const int half = width / 2;
  double* po = out.data();
  for (int i = 0; i < half; ++i) {
    const double freq = half == 1 ? 1.0 : std::pow(10000.0, static_cast<double>(i) / (half - 1));
    po[i] = std::sin(tau * freq);
    po[half + i] = std::cos(tau * freq);
  }
  finalize("sinusoidal_encode", out);
  return out;
}

Tensor rotary_apply(const Tensor& x, const std::vector<int>& positions, int head_dim) {
  if (x.ndim() != 2) shape_error("rotary_apply", x, "expected 2-D input");
  if (head_dim <= 0 || head_dim % 2 != 0 || x.cols() % head_dim != 0) {
    throw std::invalid_argument("rotary_apply: head_dim " + std::to_string(head_dim) +
                                " incompatible with " + x.shape_str());
  }
  if (static_cast<int>(positions.size()) != x.rows()) {
    throw std::invalid_argument("rotary_apply: positions length " +
                                std::to_string(positions.size()) + " vs rows " +
                                std::to_string(x.rows()));
  }
  const int rows = x.rows(), cols = x.cols();
  const int heads = cols / head_dim, half = head_dim / 2;
  const bool rec = want_grad({&x});
  Tensor out = make_tensor({rows, cols}, rec);
  // Precompute per (position-row, pair-index) sin/cos.
  std::vector<double> cs(static_cast<size_t>(rows) * half), sn(static_cast<size_t>(rows) * half);
  for (int i = 0; i < rows; ++i) {
    for (int p = 0; p < half; ++p) {
      const double inv_freq = std::pow(10000.0, -2.0 * p / head_dim);
      const double angle = positions[i] * inv_freq;
      cs[static_cast<size_t>(i) * half + p] = std::cos(angle);
      sn[static_cast<size_t>(i) * half + p] = std::sin(angle);
    }
  }
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < rows; ++i) {
    for (int h = 0; h < heads; ++h) {
      const int64_t base = static_cast<int64_t>(i) * cols + static_cast<int64_t>(h) * head_dim;
      for (int p = 0; p < half; ++p) {
        const double c = cs[static_cast<size_t>(i) * half + p];
        const double s = sn[static_cast<size_t>(i) * half + p];
        const double x1 = px[base + p], x2 = px[base + half + p];
        po[base + p] = x1 * c - x2 * s;
        po[base + half + p] = x1 * s + x2 * c;
      }
    }
  }
  finalize("rotary_apply", out);
  if (rec) {
    Graph::current()->record(
        "rotary_apply",
        [x, out, rows, cols, heads, half, head_dim, cs = std::move(cs),
         sn = std::move(sn)]() mutable {
          const double* dc = out.grad();
          double* dx = x.grad();
          for (int i = 0; i < rows; ++i) {
            for (int h = 0; h < heads; ++h) {
              const int64_t base =
                  static_cast<int64_t>(i) * cols + static_cast<int64_t>(h) * head_dim;
              for (int p = 0; p < half; ++p) {
                const double c = cs[static_cast<size_t>(i) * half + p];
                const double s = sn[static_cast<size_t>(i) * half + p];
                const double g1 = dc[base + p], g2 = dc[base + half + p];
                dx[base + p] += g1 * c + g2 * s;
                dx[base + half + p] += -g1 * s + g2 * c;
              }
            }
          }
        });
  }
  return out;
}

const std::vector<std::string>& kernel_names() {
  static const std::vector<std::string> names = {
      "matmul",    "add",   "mul",    "softmax",          "rms_norm",     "swish",
      "gelu",      "embedding_gather", "concat", "slice", "sinusoidal_encode", "rotary_apply"};
  return names;
}

// ---- gradient oracle -------------------------------------------------------

double grad_check(const std::function<Tensor()>& scalar_fn,
                  const std::vector<Tensor>& params, double h) {
  if (h < 1e-7 || h > 1e-3) {
    throw std::invalid_argument("grad_check: h must be in [1e-7, 1e-3]");
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph graph;
    Tensor loss = scalar_fn();
    if (loss.numel() != 1) {
      throw std::invalid_argument("grad_check: function output must be scalar, got " +
                                  loss.shape_str());
    }
    graph.backward(loss);
    for (const Tensor& p : params) {
      Tensor& pm = const_cast<Tensor&>(p);
      analytic.emplace_back(pm.grad(), pm.grad() + pm.numel());
      pm.zero_grad();
    }
  }
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = const_cast<Tensor&>(params[pi]);
    double* values = p.data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double f_plus = scalar_fn().item();
      values[i] = saved - h;
      const double f_minus = scalar_fn().item();
      values[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double an = analytic[pi][i];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace flowact
