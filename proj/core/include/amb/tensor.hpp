#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation on an
// explicit gradient tape. Training math runs in 32-bit floats; the same code
// instantiates with double so tests can compare against 64-bit references.
//
// Recording model: ops execute eagerly. While a Tape is active (per thread),
// any op whose inputs are tracked on that tape appends a node holding the
// input node ids and a backward rule. backward() walks the node list once in
// reverse; recording order is the topological order. A tape is single-use.
//
// Tensors copy shallowly (shared storage). Op outputs and anything without a
// tape attachment are treated as immutable after construction, which makes
// untracked tensors safe to share across threads. Tape recording itself is
// single-threaded per training step.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "amb/errors.hpp"

namespace amb {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return s.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename Real>
class Tape;

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<Real>>(checked_size(shape_), Real(0))) {}

  Tensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<Real>>(std::move(values))) {
    if (checked_size(shape_) != static_cast<std::int64_t>(data_->size()))
      throw ShapeError("tensor: " + shape_str(shape_) + " does not hold " +
                       std::to_string(data_->size()) + " values");
  }

  static Tensor scalar(Real v) { return Tensor({1}, std::vector<Real>{v}); }

  static Tensor full(Shape shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  std::span<Real> data() { return data_ ? std::span<Real>(*data_) : std::span<Real>(); }
  std::span<const Real> data() const {
    return data_ ? std::span<const Real>(*data_) : std::span<const Real>();
  }

  Real item() const {
    if (size() != 1) throw ContractError("item: tensor " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
  }

  // Row-major element access; test/debug convenience.
  Real at(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size())
      throw ShapeError("at: rank mismatch for " + shape_str(shape_));
    std::int64_t off = 0;
    std::size_t d = 0;
    for (std::int64_t i : idx) off = off * shape_[d] + i, ++d;
    return (*data_)[off];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  // Identifier into the gradient tape the tensor was last recorded on.
  int node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }
  void bind_node(int node, std::uint64_t tape_id) {
    node_ = node;
    tape_id_ = tape_id;
  }

  const std::shared_ptr<std::vector<Real>>& storage() const { return data_; }

  // Shares storage, drops any tape attachment.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

 private:
  static std::int64_t checked_size(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor: empty shape");
    for (std::int64_t d : s)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(s));
    return shape_size(s);
  }

  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
  bool requires_grad_ = false;
  int node_ = -1;
  std::uint64_t tape_id_ = 0;
};

// Gradients for the watched leaves of one backward pass, keyed by node id.
template <typename Real>
class GradientMap {
 public:
  const Tensor<Real>& at(int node) const {
    auto it = by_node_.find(node);
    if (it == by_node_.end())
      throw ContractError("gradient map: node " + std::to_string(node) + " was not watched");
    return it->second;
  }
  bool contains(int node) const { return by_node_.count(node) != 0; }
  std::size_t size() const { return by_node_.size(); }

 private:
  template <typename R>
  friend class Tape;
  std::unordered_map<int, Tensor<Real>> by_node_;
};

template <typename Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const Real>)>;

  Tape() : id_(next_id().fetch_add(1, std::memory_order_relaxed)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active_slot() == this) active_slot() = nullptr;
  }

  // Makes the tape the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() noexcept { return active_slot(); }

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<int>& node_inputs(int node) const { return nodes_.at(node).inputs; }

  bool tracks(const Tensor<Real>& t) const { return t.node() >= 0 && t.tape_id() == id_; }
  int node_of(const Tensor<Real>& t) const { return tracks(t) ? t.node() : -1; }

  // Registers a requires_grad leaf; idempotent within one tape.
  int watch(Tensor<Real>& leaf) {
    if (!leaf.requires_grad()) throw ContractError("watch: tensor does not require grad");
    if (tracks(leaf)) return leaf.node();
    int id = add_node({}, leaf.size(), nullptr);
    watched_.push_back({id, leaf.shape()});
    leaf.bind_node(id, id_);
    return id;
  }

  // Appends an op node and binds the output tensor to it.
  void record(Tensor<Real>& out, std::vector<int> inputs, BackwardFn fn) {
    int id = add_node(std::move(inputs), out.size(), std::move(fn));
    out.bind_node(id, id_);
  }

  // Reverse pass from a scalar loss. Single-use: a second call is an error.
  // Watched leaves the loss never touched get zero gradients.
  GradientMap<Real> backward(const Tensor<Real>& loss) {
    if (consumed_) throw ContractError("backward: tape already consumed");
    consumed_ = true;
    if (loss.size() != 1)
      throw ContractError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
    if (!tracks(loss)) throw ContractError("backward: loss is not recorded on this tape");

    grads_.assign(nodes_.size(), {});
    grad(loss.node())[0] = Real(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, std::span<const Real>(grads_[i]));
    }

    GradientMap<Real> out;
    for (auto& w : watched_) {
      std::vector<Real> g = grads_[w.node].empty()
                                ? std::vector<Real>(nodes_[w.node].size, Real(0))
                                : std::move(grads_[w.node]);
      out.by_node_.emplace(w.node, Tensor<Real>(w.shape, std::move(g)));
    }
    grads_.clear();
    return out;
  }

  // Gradient accumulator for a node, zero-initialized on first touch.
  // Valid only inside backward rules.
  std::span<Real> grad(int node) {
    auto& g = grads_.at(node);
    if (g.empty()) g.assign(nodes_[node].size, Real(0));
    return std::span<Real>(g);
  }

 private:
  struct Node {
    std::vector<int> inputs;
    std::int64_t size;
    BackwardFn backward;
  };

  int add_node(std::vector<int> inputs, std::int64_t size, BackwardFn fn) {
    inputs.erase(std::remove_if(inputs.begin(), inputs.end(), [](int i) { return i < 0; }),
                 inputs.end());
    nodes_.push_back({std::move(inputs), size, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  static Tape*& active_slot() noexcept {
    thread_local Tape* slot = nullptr;
    return slot;
  }
  static std::atomic<std::uint64_t>& next_id() noexcept {
    static std::atomic<std::uint64_t> counter{1};
    return counter;
  }

  struct Watched {
    int node;
    Shape shape;
  };

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<Real>> grads_;
  std::vector<Watched> watched_;
  bool consumed_ = false;
};

namespace detail {

// c += a(m x k) * b(k x n), all row-major. The inner j loop is contiguous in
// b and c, so it vectorizes without reassociating any accumulation chain.
template <typename Real>
inline void matmul_accum(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k,
                         std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      const Real* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// db(k x n) += a(m x k)^T * g(m x n)
template <typename Real>
inline void outer_accum(const Real* a, const Real* g, Real* db, std::int64_t m, std::int64_t k,
                        std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    const Real* gi = g + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      Real* dbp = db + p * n;
      for (std::int64_t j = 0; j < n; ++j) dbp[j] += av * gi[j];
    }
  }
}

template <typename Real>
inline void transpose_copy(const Real* src, Real* dst, std::int64_t r, std::int64_t c) {
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
}

// Overflow-safe logistic; both branches avoid exp of a positive argument.
template <typename Real>
inline Real stable_sigmoid(Real v) {
  return v >= Real(0) ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
}

// Broadcast classification for binary elementwise ops. Supported forms:
// identical shapes, scalar with tensor, and a smaller operand whose shape
// equals the trailing dimensions of the larger one.
enum class Bcast { same, b_over_a, a_over_b };

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename Real>
inline Bcast bcast_kind(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.size() == 1 || is_suffix(b.shape(), a.shape())) return Bcast::b_over_a;
  if (a.size() == 1 || is_suffix(a.shape(), b.shape())) return Bcast::a_over_b;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Splits an N-d shape at `axis` into outer/n/inner extents.
inline void axis_extents(const Shape& s, std::size_t axis, std::int64_t& outer, std::int64_t& n,
                         std::int64_t& inner) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename Real>
inline bool any_tracked(Tape<Real>* t, std::initializer_list<const Tensor<Real>*> xs) {
  if (!t) return false;
  for (const auto* x : xs)
    if (t->tracks(*x)) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out({m, n});
  detail::matmul_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&a, &b})) {
    const int an = tape->node_of(a), bn = tape->node_of(b);
    auto ad = a.storage(), bd = b.storage();
    tape->record(out, {an, bn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      if (an >= 0) {
        std::vector<Real> bt(static_cast<std::size_t>(k * n));
        detail::transpose_copy(bd->data(), bt.data(), k, n);
        detail::matmul_accum(g.data(), bt.data(), tp.grad(an).data(), m, n, k);
      }
      if (bn >= 0) detail::outer_accum(ad->data(), g.data(), tp.grad(bn).data(), m, k, n);
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected 2-d, got " + shape_str(x.shape()));
  const std::int64_t r = x.dim(0), c = x.dim(1);
  Tensor<Real> out({c, r});
  detail::transpose_copy(x.data().data(), out.data().data(), r, c);

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      std::vector<Real> gt(g.size());
      detail::transpose_copy(g.data(), gt.data(), c, r);
      auto gx = tp.grad(xn);
      for (std::size_t i = 0; i < gt.size(); ++i) gx[i] += gt[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// binary elementwise with limited broadcasting

namespace detail {

// Applies fwd(a_i, b_i) with b broadcast over a (Bcast::b_over_a layout).
template <typename Real, class F>
inline void bcast_apply(const Real* big, const Real* small, Real* out, std::int64_t big_n,
                        std::int64_t small_n, F&& f) {
  for (std::int64_t i = 0; i < big_n; ++i) out[i] = f(big[i], small[i % small_n]);
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const detail::Bcast kind = detail::bcast_kind("add", a, b);
  const Tensor<Real>& big = (kind == detail::Bcast::a_over_b) ? b : a;
  const Tensor<Real>& small = (kind == detail::Bcast::a_over_b) ? a : b;
  Tensor<Real> out(big.shape());
  detail::bcast_apply(big.data().data(), small.data().data(), out.data().data(), big.size(),
                      small.size(), [](Real x, Real y) { return x + y; });

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&a, &b})) {
    const int bign = tape->node_of(big), smalln = tape->node_of(small);
    const std::int64_t bs = big.size(), ss = small.size();
    tape->record(out, {bign, smalln}, [=](Tape<Real>& tp, std::span<const Real> g) {
      if (bign >= 0) {
        auto gb = tp.grad(bign);
        for (std::int64_t i = 0; i < bs; ++i) gb[i] += g[i];
      }
      if (smalln >= 0) {
        auto gs = tp.grad(smalln);
        for (std::int64_t i = 0; i < bs; ++i) gs[i % ss] += g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const detail::Bcast kind = detail::bcast_kind("mul", a, b);
  const Tensor<Real>& big = (kind == detail::Bcast::a_over_b) ? b : a;
  const Tensor<Real>& small = (kind == detail::Bcast::a_over_b) ? a : b;
  Tensor<Real> out(big.shape());
  detail::bcast_apply(big.data().data(), small.data().data(), out.data().data(), big.size(),
                      small.size(), [](Real x, Real y) { return x * y; });

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&a, &b})) {
    const int bign = tape->node_of(big), smalln = tape->node_of(small);
    auto bigd = big.storage(), smalld = small.storage();
    const std::int64_t bs = big.size(), ss = small.size();
    tape->record(out, {bign, smalln}, [=](Tape<Real>& tp, std::span<const Real> g) {
      if (bign >= 0) {
        auto gb = tp.grad(bign);
        const Real* sd = smalld->data();
        for (std::int64_t i = 0; i < bs; ++i) gb[i] += g[i] * sd[i % ss];
      }
      if (smalln >= 0) {
        auto gs = tp.grad(smalln);
        const Real* bd = bigd->data();
        for (std::int64_t i = 0; i < bs; ++i) gs[i % ss] += g[i] * bd[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, Real c) {
  Tensor<Real> out(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) od[i] = ad[i] + c;
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&a})) {
    const int an = tape->node_of(a);
    tape->record(out, {an}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto ga = tp.grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, Real c) {
  Tensor<Real> out(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) od[i] = ad[i] * c;
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&a})) {
    const int an = tape->node_of(a);
    tape->record(out, {an}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto ga = tp.grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& a) {
  return mul(a, Real(-1));
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, neg(b));
}

// ---------------------------------------------------------------------------
// unary elementwise

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) od[i] = std::tanh(xd[i]);
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto os = out.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* y = os->data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (Real(1) - y[i] * y[i]);
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) od[i] = detail::stable_sigmoid(xd[i]);
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto os = out.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* y = os->data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (Real(1) - y[i]);
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) od[i] = std::exp(xd[i]);
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto os = out.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* y = os->data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
    });
  }
  return out;
}

// Natural log; the input is clamped to >= 1e-12 so probabilities that
// underflow stay finite. The gradient uses the clamped input.
template <typename Real>
Tensor<Real> log(const Tensor<Real>& x) {
  static constexpr Real kClamp = Real(1e-12);
  Tensor<Real> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) od[i] = std::log(std::max(xd[i], kClamp));
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto xs = x.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* v = xs->data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / std::max(v[i], kClamp);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

// Max-subtracted softmax along `axis`; outputs are positive and sum to 1.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  std::int64_t outer, n, inner;
  detail::axis_extents(x.shape(), axis, outer, n, inner);
  Tensor<Real> out(x.shape());
  const Real* xd = x.data().data();
  Real* od = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      Real mx = xd[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      Real sum = Real(0);
      for (std::int64_t j = 0; j < n; ++j) {
        const Real e = std::exp(xd[base + j * inner] - mx);
        od[base + j * inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < n; ++j) od[base + j * inner] /= sum;
    }
  }

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto os = out.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* y = os->data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          Real dot = Real(0);
          for (std::int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structure ops

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs[0].shape();
  std::int64_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != ref.size())
      throw ShapeError("concat: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(ref));
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis && x.shape()[d] != ref[d])
        throw ShapeError("concat: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(ref));
    total += x.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  Tensor<Real> out(out_shape);

  std::int64_t outer, n_unused, inner;
  detail::axis_extents(out_shape, axis, outer, n_unused, inner);
  Real* od = out.data().data();
  std::int64_t col = 0;
  for (const auto& x : xs) {
    const std::int64_t xn_axis = x.shape()[axis];
    const Real* xd = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(xd + o * xn_axis * inner, xn_axis * inner,
                  od + (o * total + col) * inner);
    col += xn_axis;
  }

  Tape<Real>* tape = Tape<Real>::active();
  bool tracked = false;
  if (tape)
    for (const auto& x : xs) tracked = tracked || tape->tracks(x);
  if (tracked) {
    std::vector<int> in_nodes;
    std::vector<std::int64_t> extents;
    for (const auto& x : xs) {
      in_nodes.push_back(tape->node_of(x));
      extents.push_back(x.shape()[axis]);
    }
    std::vector<int> rec = in_nodes;
    tape->record(out, std::move(rec), [=](Tape<Real>& tp, std::span<const Real> g) {
      std::int64_t c = 0;
      for (std::size_t xi = 0; xi < in_nodes.size(); ++xi) {
        const std::int64_t ext = extents[xi];
        if (in_nodes[xi] >= 0) {
          auto gx = tp.grad(in_nodes[xi]);
          for (std::int64_t o = 0; o < outer; ++o) {
            const Real* src = g.data() + (o * total + c) * inner;
            Real* dst = gx.data() + o * ext * inner;
            for (std::int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        c += ext;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::int64_t start, std::int64_t len) {
  std::int64_t outer, n, inner;
  detail::axis_extents(x.shape(), axis, outer, n, inner);
  if (start < 0 || len <= 0 || start + len > n)
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor<Real> out(out_shape);
  const Real* xd = x.data().data();
  Real* od = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xd + (o * n + start) * inner, len * inner, od + o * len * inner);

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (std::int64_t o = 0; o < outer; ++o) {
        const Real* src = g.data() + o * len * inner;
        Real* dst = gx.data() + (o * n + start) * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Keeps x where keep != 0, writes `fill` elsewhere. The mask is a constant
// as far as gradients are concerned.
template <typename Real>
Tensor<Real> mask_fill(const Tensor<Real>& x, const Tensor<Real>& keep, Real fill) {
  if (x.shape() != keep.shape())
    throw ShapeError("mask_fill: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(keep.shape()));
  Tensor<Real> out(x.shape());
  auto xd = x.data();
  auto kd = keep.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) od[i] = kd[i] != Real(0) ? xd[i] : fill;

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    auto ks = keep.storage();
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      const Real* k = ks->data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (k[i] != Real(0)) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename Real>
Tensor<Real> reduce_sum(const Tensor<Real>& x) {
  Real s = Real(0);
  for (Real v : x.data()) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> reduce_sum(const Tensor<Real>& x, std::size_t axis) {
  std::int64_t outer, n, inner;
  detail::axis_extents(x.shape(), axis, outer, n, inner);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (d != axis) out_shape.push_back(x.shape()[d]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<Real> out(out_shape);
  const Real* xd = x.data().data();
  Real* od = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t in = 0; in < inner; ++in)
        od[o * inner + in] += xd[(o * n + j) * inner + in];

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < n; ++j)
          for (std::int64_t in = 0; in < inner; ++in)
            gx[(o * n + j) * inner + in] += g[o * inner + in];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> reduce_mean(const Tensor<Real>& x) {
  return mul(reduce_sum(x), Real(1) / static_cast<Real>(x.size()));
}

template <typename Real>
Tensor<Real> reduce_mean(const Tensor<Real>& x, std::size_t axis) {
  return mul(reduce_sum(x, axis), Real(1) / static_cast<Real>(x.shape().at(axis)));
}

// ---------------------------------------------------------------------------
// model-serving primitives

// out[r, :] = x[r, :] * s[r] for x viewed as [R x C]; s is a length-R vector.
template <typename Real>
Tensor<Real> scale_rows(const Tensor<Real>& x, const Tensor<Real>& s) {
  if (x.rank() < 1 || s.size() != x.dim(0))
    throw ShapeError("scale_rows: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(s.shape()));
  const std::int64_t r = x.dim(0), c = x.size() / x.dim(0);
  Tensor<Real> out(x.shape());
  const Real* xd = x.data().data();
  const Real* sd = s.data().data();
  Real* od = out.data().data();
  for (std::int64_t i = 0; i < r; ++i) {
    const Real sv = sd[i];
    for (std::int64_t j = 0; j < c; ++j) od[i * c + j] = xd[i * c + j] * sv;
  }

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x, &s})) {
    const int xn = tape->node_of(x), sn = tape->node_of(s);
    auto xs = x.storage(), ss = s.storage();
    tape->record(out, {xn, sn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      if (xn >= 0) {
        auto gx = tp.grad(xn);
        const Real* sv = ss->data();
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * sv[i];
      }
      if (sn >= 0) {
        auto gs = tp.grad(sn);
        const Real* xv = xs->data();
        for (std::int64_t i = 0; i < r; ++i) {
          Real acc = Real(0);
          for (std::int64_t j = 0; j < c; ++j) acc += g[i * c + j] * xv[i * c + j];
          gs[i] += acc;
        }
      }
    });
  }
  return out;
}

// Row gather from an embedding table. Row 0 is the padding row: it receives
// no gradient and is never updated.
template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table must be 2-d, got " + shape_str(table.shape()));
  const std::int64_t v = table.dim(0), e = table.dim(1);
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  for (std::int32_t id : ids)
    if (id < 0 || id >= v)
      throw ContractError("embedding_lookup: id " + std::to_string(id) + " outside table " +
                          shape_str(table.shape()));
  Tensor<Real> out({n, e});
  const Real* td = table.data().data();
  Real* od = out.data().data();
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(td + ids[i] * e, e, od + i * e);

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&table})) {
    const int tn = tape->node_of(table);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    tape->record(out, {tn}, [=, idv = std::move(idv)](Tape<Real>& tp, std::span<const Real> g) {
      auto gt = tp.grad(tn);
      for (std::int64_t i = 0; i < n; ++i) {
        if (idv[i] == 0) continue;
        Real* dst = gt.data() + idv[i] * e;
        const Real* src = g.data() + i * e;
        for (std::int64_t j = 0; j < e; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Full LSTM recurrence over a step-major sequence as one op: the unrolled
// loop that `sigmoid`/`tanh`/`mul`/`add` compositions would spread across
// hundreds of tape nodes runs here in plain buffers, with a hand-written
// backward-through-time rule. Input rows are ordered step-major — step t
// occupies rows [t*lanes, (t+1)*lanes) — and the output uses the same layout,
// holding h_t for every step. Gate order along the 4*d_h axis is input,
// forget, candidate, output. `mask_tm` (one 0/1 entry per row; empty means
// all real) freezes h and c through masked rows: they copy the previous
// step's values bit-for-bit, so trailing padding can never perturb a lane.
// Initial h and c are zero. `reverse` runs the recurrence from the last step
// toward the first without touching the data layout.
template <typename Real>
Tensor<Real> lstm_seq(const Tensor<Real>& x_tm, const Tensor<Real>& wx, const Tensor<Real>& wh,
                      const Tensor<Real>& b, std::span<const Real> mask_tm, std::int64_t steps,
                      std::int64_t lanes, bool reverse) {
  if (steps < 1 || lanes < 1)
    throw ShapeError("lstm_seq: steps and lanes must be >= 1, got " + std::to_string(steps) +
                     " and " + std::to_string(lanes));
  const std::int64_t rows = steps * lanes;
  if (x_tm.rank() != 2 || x_tm.dim(0) != rows)
    throw ShapeError("lstm_seq: input " + shape_str(x_tm.shape()) + " does not hold " +
                     std::to_string(steps) + "x" + std::to_string(lanes) + " rows");
  const std::int64_t d_in = x_tm.dim(1);
  if (wh.rank() != 2 || wh.dim(1) != 4 * wh.dim(0) || wx.rank() != 2 || wx.dim(0) != d_in ||
      wx.dim(1) != wh.dim(1) || b.size() != wh.dim(1))
    throw ShapeError("lstm_seq: weight shapes " + shape_str(wx.shape()) + ", " +
                     shape_str(wh.shape()) + ", " + shape_str(b.shape()) +
                     " are inconsistent with input " + shape_str(x_tm.shape()));
  if (!mask_tm.empty() && static_cast<std::int64_t>(mask_tm.size()) != rows)
    throw ShapeError("lstm_seq: mask holds " + std::to_string(mask_tm.size()) +
                     " entries, expected " + std::to_string(rows));
  const std::int64_t H = wh.dim(0), G = 4 * H;

  // Activated gates (i, f, g, o) and tanh of each cell are kept for the
  // backward rule; the raw cell sequence doubles as the per-step carry.
  auto gates = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows * G));
  auto cells = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows * H));
  auto tcells = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows * H));
  Tensor<Real> out({rows, H});

  {
    // Bias plus input projection for every step in one pass.
    Real* z = gates->data();
    const Real* bd = b.data().data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(bd, G, z + r * G);
    detail::matmul_accum(x_tm.data().data(), wx.data().data(), z, rows, d_in, G);
  }

  const std::vector<Real> zero_state(static_cast<std::size_t>(lanes * H), Real(0));
  const Real* whd = wh.data().data();
  Real* hseq = out.data().data();
  for (std::int64_t idx = 0; idx < steps; ++idx) {
    const std::int64_t t = reverse ? steps - 1 - idx : idx;
    const std::int64_t tprev = reverse ? t + 1 : t - 1;
    const Real* hp = idx == 0 ? zero_state.data() : hseq + tprev * lanes * H;
    const Real* cp = idx == 0 ? zero_state.data() : cells->data() + tprev * lanes * H;
    Real* z = gates->data() + t * lanes * G;
    detail::matmul_accum(hp, whd, z, lanes, H, G);
    for (std::int64_t l = 0; l < lanes; ++l) {
      Real* zr = z + l * G;
      Real* hr = hseq + (t * lanes + l) * H;
      Real* cr = cells->data() + (t * lanes + l) * H;
      Real* tr = tcells->data() + (t * lanes + l) * H;
      const Real* hpl = hp + l * H;
      const Real* cpl = cp + l * H;
      if (!mask_tm.empty() && mask_tm[t * lanes + l] == Real(0)) {
        std::copy_n(hpl, H, hr);
        std::copy_n(cpl, H, cr);
        std::fill_n(zr, G, Real(0));
        std::fill_n(tr, H, Real(0));
        continue;
      }
      for (std::int64_t j = 0; j < H; ++j) {
        const Real gi = detail::stable_sigmoid(zr[j]);
        const Real gf = detail::stable_sigmoid(zr[H + j]);
        const Real gg = std::tanh(zr[2 * H + j]);
        const Real go = detail::stable_sigmoid(zr[3 * H + j]);
        zr[j] = gi;
        zr[H + j] = gf;
        zr[2 * H + j] = gg;
        zr[3 * H + j] = go;
        const Real c = gf * cpl[j] + gi * gg;
        const Real tc = std::tanh(c);
        cr[j] = c;
        tr[j] = tc;
        hr[j] = go * tc;
      }
    }
  }

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x_tm, &wx, &wh, &b})) {
    const int xn = tape->node_of(x_tm), wxn = tape->node_of(wx), whn = tape->node_of(wh),
              bn = tape->node_of(b);
    auto xs = x_tm.storage(), wxs = wx.storage(), whs = wh.storage(), os = out.storage();
    std::vector<Real> mask(mask_tm.begin(), mask_tm.end());
    tape->record(out, {xn, wxn, whn, bn}, [=, mask = std::move(mask)](Tape<Real>& tp,
                                                                      std::span<const Real> g) {
      std::vector<Real> dz(static_cast<std::size_t>(rows * G), Real(0));
      std::vector<Real> dh(static_cast<std::size_t>(lanes * H), Real(0));
      std::vector<Real> dc(static_cast<std::size_t>(lanes * H), Real(0));
      std::vector<Real> wht(static_cast<std::size_t>(G * H));
      detail::transpose_copy(whs->data(), wht.data(), H, G);
      const std::vector<Real> zero_state(static_cast<std::size_t>(lanes * H), Real(0));
      const Real* hseq = os->data();
      for (std::int64_t idx = steps - 1; idx >= 0; --idx) {
        const std::int64_t t = reverse ? steps - 1 - idx : idx;
        const std::int64_t tprev = reverse ? t + 1 : t - 1;
        const Real* hp = idx == 0 ? zero_state.data() : hseq + tprev * lanes * H;
        const Real* cp = idx == 0 ? zero_state.data() : cells->data() + tprev * lanes * H;
        const Real* zrow = gates->data() + t * lanes * G;
        Real* dzrow = dz.data() + t * lanes * G;
        for (std::int64_t l = 0; l < lanes; ++l) {
          const Real* gh = g.data() + (t * lanes + l) * H;
          Real* dhl = dh.data() + l * H;
          if (!mask.empty() && mask[t * lanes + l] == Real(0)) {
            // Carried state: h and c gradients flow straight to the previous
            // step; the zero dz row keeps every weight contribution out.
            for (std::int64_t j = 0; j < H; ++j) dhl[j] += gh[j];
            continue;
          }
          const Real* zr = zrow + l * G;
          Real* dzr = dzrow + l * G;
          Real* dcl = dc.data() + l * H;
          const Real* tr = tcells->data() + (t * lanes + l) * H;
          const Real* cpl = cp + l * H;
          for (std::int64_t j = 0; j < H; ++j) {
            const Real gi = zr[j], gf = zr[H + j], gg = zr[2 * H + j], go = zr[3 * H + j];
            const Real tc = tr[j];
            const Real dht = gh[j] + dhl[j];
            const Real dct = dcl[j] + dht * go * (Real(1) - tc * tc);
            dzr[j] = dct * gg * gi * (Real(1) - gi);
            dzr[H + j] = dct * cpl[j] * gf * (Real(1) - gf);
            dzr[2 * H + j] = dct * gi * (Real(1) - gg * gg);
            dzr[3 * H + j] = dht * tc * go * (Real(1) - go);
            dcl[j] = dct * gf;
            dhl[j] = Real(0);  // replaced by the recurrent term below
          }
        }
        detail::matmul_accum(dzrow, wht.data(), dh.data(), lanes, G, H);
        if (whn >= 0 && idx > 0)
          detail::outer_accum(hp, dzrow, tp.grad(whn).data(), lanes, H, G);
      }
      if (bn >= 0) {
        auto gb = tp.grad(bn);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < G; ++j) gb[j] += dz[r * G + j];
      }
      if (wxn >= 0) detail::outer_accum(xs->data(), dz.data(), tp.grad(wxn).data(), rows, d_in, G);
      if (xn >= 0) {
        std::vector<Real> wxt(static_cast<std::size_t>(G * d_in));
        detail::transpose_copy(wxs->data(), wxt.data(), d_in, G);
        detail::matmul_accum(dz.data(), wxt.data(), tp.grad(xn).data(), rows, G, d_in);
      }
    });
  }
  return out;
}

// Metadata-only reshape (copies when tracked bookkeeping demands a node).
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<Real> out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// Swaps the leading two axes of x viewed as [d0, d1, inner].
template <typename Real>
Tensor<Real> swap01(const Tensor<Real>& x, std::int64_t d0, std::int64_t d1) {
  if (d0 <= 0 || d1 <= 0 || x.size() % (d0 * d1) != 0)
    throw ShapeError("swap01: " + shape_str(x.shape()) + " is not [" + std::to_string(d0) + "," +
                     std::to_string(d1) + ",*]");
  const std::int64_t inner = x.size() / (d0 * d1);
  Shape out_shape;
  if (x.rank() >= 2 && x.dim(0) == d0 && x.dim(1) == d1) {
    out_shape = x.shape();
    std::swap(out_shape[0], out_shape[1]);
  } else {
    out_shape = inner == 1 ? Shape{d1, d0} : Shape{d1, d0, inner};
  }
  Tensor<Real> out(out_shape);
  const Real* xd = x.data().data();
  Real* od = out.data().data();
  for (std::int64_t i = 0; i < d0; ++i)
    for (std::int64_t j = 0; j < d1; ++j)
      std::copy_n(xd + (i * d1 + j) * inner, inner, od + (j * d0 + i) * inner);

  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (std::int64_t j = 0; j < d1; ++j)
        for (std::int64_t i = 0; i < d0; ++i) {
          const Real* src = g.data() + (j * d0 + i) * inner;
          Real* dst = gx.data() + (i * d1 + j) * inner;
          for (std::int64_t t = 0; t < inner; ++t) dst[t] += src[t];
        }
    });
  }
  return out;
}

// Identity forward, no gradient flows back through the result.
template <typename Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x) {
  return x.detached();
}

// Identity forward; backward multiplies the incoming gradient by -scale.
// Turns the adversarial min-max into a single minimization pass.
template <typename Real>
Tensor<Real> gradient_reversal(const Tensor<Real>& x, Real scale) {
  if (scale < Real(0))
    throw ContractError("gradient_reversal: scale must be >= 0, got " + std::to_string(scale));
  Tensor<Real> out = x.detached();
  Tape<Real>* tape = Tape<Real>::active();
  if (detail::any_tracked<Real>(tape, {&x})) {
    const int xn = tape->node_of(x);
    tape->record(out, {xn}, [=](Tape<Real>& tp, std::span<const Real> g) {
      auto gx = tp.grad(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= scale * g[i];
    });
  }
  return out;
}

}  // namespace amb
