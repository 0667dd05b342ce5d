#pragma once

// Minimal deterministic reverse-mode differentiable array engine.
//
// Tensors are dense row-major arrays of float (training) or double
// (gradient checking). A TapeT records every primitive executed while it
// is the thread's active record; replaying the adjoints in reverse
// execution order fills the .grad() of every tracked tensor. Tensors are
// handles: copies share the underlying buffer, and buffers are immutable
// while a forward pass that referenced them is still alive.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmfuse/errors.hpp"

namespace mmfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
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

namespace detail {

inline std::atomic<bool> g_finite_audit{true};

}  // namespace detail

// Finiteness audit: when enabled (the default) every primitive scans its
// output and backward scans freshly written gradients; a NaN/Inf raises
// NumericError naming the op instead of propagating silently.
inline void set_finite_audit(bool on) { detail::g_finite_audit.store(on); }
inline bool finite_audit_enabled() { return detail::g_finite_audit.load(); }

template <typename S>
struct GradStore {
    std::vector<S> value;
    // Set once a backward pass has written here; a later pass refuses to
    // accumulate on top unless zero_grad() cleared it first.
    bool populated = false;
};

template <typename S>
class TapeT;

template <typename S>
class TensorT {
public:
    TensorT() = default;

    TensorT(Shape shape, std::vector<S> values, bool requires_grad = false)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(std::move(values))) {
        validate_shape();
        if (data_->size() != shape_numel(shape_)) {
            throw DimensionError("tensor: " + std::to_string(data_->size()) +
                                 " values do not fill shape " + shape_str(shape_));
        }
        if (finite_audit_enabled()) audit("tensor");
        if (requires_grad) enable_grad();
    }

    static TensorT full(Shape shape, S fill, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return TensorT(std::move(shape), std::vector<S>(n, fill), requires_grad);
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static TensorT ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(1), requires_grad);
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    static TensorT uniform(Shape shape, std::mt19937& rng, S lo, S hi, bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        std::size_t n = shape_numel(shape);
        std::vector<S> v(n);
        for (auto& x : v) x = static_cast<S>(dist(rng));
        return TensorT(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT normal(Shape shape, std::mt19937& rng, S mean, S stddev, bool requires_grad = false) {
        std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
        std::size_t n = shape_numel(shape);
        std::vector<S> v(n);
        for (auto& x : v) x = static_cast<S>(dist(rng));
        return TensorT(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t extent(std::size_t axis) const {
        if (axis >= shape_.size()) throw BoundsError("extent: axis out of range");
        return shape_[axis];
    }

    const std::vector<S>& values() const { return *data_; }
    std::vector<S>& values() { return *data_; }

    S item() const {
        if (size() != 1) throw ContractError("item: tensor of shape " + shape_str(shape_) + " is not scalar");
        return (*data_)[0];
    }

    S at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) throw BoundsError("at: index rank mismatch");
        std::size_t flat = 0;
        std::size_t k = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[k]) throw BoundsError("at: index out of range");
            flat = flat * shape_[k] + i;
            ++k;
        }
        return (*data_)[flat];
    }

    bool requires_grad() const { return static_cast<bool>(grad_); }

    // Marks a leaf as trainable. Must happen before the tensor is used in
    // a recorded op.
    void set_requires_grad(bool on) {
        if (on)
            enable_grad();
        else
            grad_.reset();
    }

    const std::vector<S>& grad() const {
        if (!grad_) throw ContractError("grad: tensor does not track gradients");
        return grad_->value;
    }

    bool grad_populated() const { return grad_ && grad_->populated; }

    void zero_grad() {
        if (!grad_) return;
        std::fill(grad_->value.begin(), grad_->value.end(), S(0));
        grad_->populated = false;
    }

    // Deep copy of the values, not tracked.
    TensorT detached() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<S>>(*data_);
        return t;
    }

    // -- internals used by the primitives ------------------------------

    const std::shared_ptr<std::vector<S>>& data_ptr() const { return data_; }
    const std::shared_ptr<GradStore<S>>& grad_store() const { return grad_; }

    // Construction path for primitives: the op audits its own output under
    // its own name, so the generic constructor audit is skipped.
    static TensorT tracked(Shape shape, std::vector<S> values, bool track) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<S>>(std::move(values));
        t.validate_shape();
        if (t.data_->size() != shape_numel(t.shape_))
            throw DimensionError("tensor: " + std::to_string(t.data_->size()) +
                                 " values do not fill shape " + shape_str(t.shape_));
        if (track) t.enable_grad();
        return t;
    }

private:
    void enable_grad() {
        if (!grad_) {
            grad_ = std::make_shared<GradStore<S>>();
            grad_->value.assign(data_->size(), S(0));
        }
    }

    void validate_shape() const {
        if (shape_.empty()) throw DimensionError("tensor: rank-0 shapes are not supported; use shape [1]");
        for (std::size_t e : shape_) {
            if (e == 0) throw DimensionError("tensor: zero extent in shape " + shape_str(shape_));
        }
    }

    void audit(const char* op) const {
        for (S v : *data_) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }

    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    std::shared_ptr<GradStore<S>> grad_;
};

// Context threaded through one backward replay. sink() is the only way an
// adjoint may write gradients: it enforces the explicit-zero_grad contract
// and remembers what was touched for the finiteness audit.
template <typename S>
class BackwardPassT {
public:
    explicit BackwardPassT(bool audit) : audit_(audit) {}

    std::vector<S>& sink(const std::shared_ptr<GradStore<S>>& store) {
        GradStore<S>* g = store.get();
        if (touched_.insert(g).second) {
            if (g->populated)
                throw ContractError(
                    "backward: gradient already populated from a previous pass; "
                    "call zero_grad before accumulating again");
            g->populated = true;
        }
        entry_sinks_.push_back(g);
        return g->value;
    }

    void begin_entry(const char* op) {
        op_ = op;
        entry_sinks_.clear();
    }

    void end_entry() const {
        if (!audit_) return;
        for (const GradStore<S>* g : entry_sinks_) {
            for (S v : g->value) {
                if (!std::isfinite(static_cast<double>(v)))
                    throw NumericError(std::string(op_) + ": non-finite gradient produced");
            }
        }
    }

    const char* op() const { return op_; }

private:
    bool audit_;
    const char* op_ = "";
    std::unordered_set<const GradStore<S>*> touched_;
    std::vector<GradStore<S>*> entry_sinks_;
};

namespace detail {

inline thread_local int g_no_grad_depth = 0;

}  // namespace detail

// Suppresses recording while alive; used for frozen-teacher forwards and
// evaluation.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::g_no_grad_depth; }
    ~NoGradGuard() { --detail::g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// The computation record. Constructing one makes it the calling thread's
// active record (stack discipline); primitives append their adjoints to
// it. One record belongs to one thread; concurrent training runs each use
// their own.
template <typename S>
class TapeT {
public:
    TapeT() : prev_(tl_active) { tl_active = this; }

    ~TapeT() { tl_active = prev_; }

    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* active() { return tl_active; }

    static bool recording() { return tl_active != nullptr && detail::g_no_grad_depth == 0; }

    void record(const char* op, std::function<void(BackwardPassT<S>&)> adjoint) {
        entries_.push_back({op, std::move(adjoint)});
    }

    std::size_t op_count() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

    // Seeds d(loss)=1 and replays every adjoint in reverse execution
    // order. Each record may be replayed once.
    void backward(const TensorT<S>& loss) {
        if (consumed_)
            throw ContractError("backward: record already replayed; reset it and rebuild the forward pass");
        if (entries_.empty()) throw ContractError("backward: empty computation record");
        if (loss.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw ContractError("backward: loss does not track gradients");

        BackwardPassT<S> pass(finite_audit_enabled());
        pass.begin_entry("seed");
        pass.sink(loss.grad_store())[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            pass.begin_entry(it->op);
            it->adjoint(pass);
            pass.end_entry();
        }
        consumed_ = true;
    }

private:
    struct Entry {
        const char* op;
        std::function<void(BackwardPassT<S>&)> adjoint;
    };

    std::vector<Entry> entries_;
    bool consumed_ = false;
    TapeT* prev_;
    static thread_local TapeT* tl_active;
};

template <typename S>
thread_local TapeT<S>* TapeT<S>::tl_active = nullptr;

// Replays the thread's active record.
template <typename S>
void backward(const TensorT<S>& loss) {
    TapeT<S>* t = TapeT<S>::active();
    if (!t) throw ContractError("backward: no active computation record");
    t->backward(loss);
}

// ==================== primitive helpers ====================

namespace detail {

template <typename S>
bool track_any(const TensorT<S>& a) {
    return TapeT<S>::recording() && a.requires_grad();
}

template <typename S>
bool track_any(const TensorT<S>& a, const TensorT<S>& b) {
    return TapeT<S>::recording() && (a.requires_grad() || b.requires_grad());
}

template <typename S>
void audit_output(const TensorT<S>& t, const char* op) {
    if (!finite_audit_enabled()) return;
    for (S v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

// C[n,m] += A[n,k] * B[k,m]
template <typename S>
void mm_nn(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        S* crow = c + i * m;
        const S* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* brow = b + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[n,m] += A[n,k] * B[m,k]^T
template <typename S>
void mm_nt(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C[k,m] += A[n,k]^T * B[n,m]
template <typename S>
void mm_tn(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t r = 0; r < n; ++r) {
        const S* arow = a + r * k;
        const S* brow = b + r * m;
        for (std::size_t i = 0; i < k; ++i) {
            const S av = arow[i];
            S* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ==================== matmul ====================

// Batched matrix product a[..,n,k] * b[..,k,m] -> [..,n,m]. Leading
// extents must match exactly; a rank-2 operand broadcasts across the
// other side's batch.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const std::size_t n = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::size_t k2 = sb[sb.size() - 2], m = sb[sb.size() - 1];
    if (k != k2)
        throw DimensionError("matmul: inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));

    Shape batch_a(sa.begin(), sa.end() - 2);
    Shape batch_b(sb.begin(), sb.end() - 2);
    bool bcast_a = false, bcast_b = false;
    Shape batch;
    if (batch_a == batch_b) {
        batch = batch_a;
    } else if (batch_a.empty()) {
        batch = batch_b;
        bcast_a = true;
    } else if (batch_b.empty()) {
        batch = batch_a;
        bcast_b = true;
    } else {
        throw DimensionError("matmul: batch extents differ: " + shape_str(sa) + " x " + shape_str(sb));
    }
    const std::size_t nb = shape_numel(batch);

    Shape out_shape = batch;
    out_shape.push_back(n);
    out_shape.push_back(m);
    std::vector<S> out(nb * n * m, S(0));
    const S* pa = a.values().data();
    const S* pb = b.values().data();
    for (std::size_t bi = 0; bi < nb; ++bi) {
        detail::mm_nn(pa + (bcast_a ? 0 : bi * n * k), pb + (bcast_b ? 0 : bi * k * m), out.data() + bi * n * m,
                      n, k, m);
    }

    const bool track = detail::track_any(a, b);
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    detail::audit_output(result, "matmul");
    if (track) {
        auto da = a.data_ptr();
        auto db = b.data_ptr();
        auto ga = a.grad_store();
        auto gb = b.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("matmul", [=](BackwardPassT<S>& ctx) {
            const S* g = gout->value.data();
            if (ga) {
                S* dst = ctx.sink(ga).data();
                for (std::size_t bi = 0; bi < nb; ++bi)
                    detail::mm_nt(g + bi * n * m, db->data() + (bcast_b ? 0 : bi * k * m),
                                  dst + (bcast_a ? 0 : bi * n * k), n, m, k);
            }
            if (gb) {
                S* dst = ctx.sink(gb).data();
                for (std::size_t bi = 0; bi < nb; ++bi)
                    detail::mm_tn(da->data() + (bcast_a ? 0 : bi * n * k), g + bi * n * m,
                                  dst + (bcast_b ? 0 : bi * k * m), n, k, m);
            }
        });
    }
    return result;
}

// ==================== softmax ====================

// Row-stable softmax over the last axis.
template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
    if (x.rank() < 1 || x.shape().back() < 1)
        throw DimensionError("softmax_lastdim: empty last axis in shape " + shape_str(x.shape()));
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.size() / width;
    std::vector<S> out(x.size());
    const S* px = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = px + r * width;
        S* orow = out.data() + r * width;
        S mx = row[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (std::size_t j = 0; j < width; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const S inv = S(1) / sum;
        for (std::size_t j = 0; j < width; ++j) orow[j] *= inv;
    }

    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "softmax_lastdim");
    if (track) {
        auto gx = x.grad_store();
        auto probs = result.data_ptr();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("softmax_lastdim", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const S* p = probs->data();
            const S* g = gout->value.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* prow = p + r * width;
                const S* grow = g + r * width;
                S dot = S(0);
                for (std::size_t j = 0; j < width; ++j) dot += grow[j] * prow[j];
                S* drow = dst.data() + r * width;
                for (std::size_t j = 0; j < width; ++j) drow[j] += prow[j] * (grow[j] - dot);
            }
        });
    }
    return result;
}

// ==================== elementwise ====================

namespace detail {

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    const bool track = detail::track_any(a, b);
    TensorT<S> result = TensorT<S>::tracked(a.shape(), std::move(out), track);
    detail::audit_output(result, "add");
    if (track) {
        auto ga = a.grad_store();
        auto gb = b.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("add", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            if (ga) {
                std::vector<S>& dst = ctx.sink(ga);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
            if (gb) {
                std::vector<S>& dst = ctx.sink(gb);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    const bool track = detail::track_any(a, b);
    TensorT<S> result = TensorT<S>::tracked(a.shape(), std::move(out), track);
    detail::audit_output(result, "sub");
    if (track) {
        auto ga = a.grad_store();
        auto gb = b.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("sub", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            if (ga) {
                std::vector<S>& dst = ctx.sink(ga);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
            if (gb) {
                std::vector<S>& dst = ctx.sink(gb);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    const bool track = detail::track_any(a, b);
    TensorT<S> result = TensorT<S>::tracked(a.shape(), std::move(out), track);
    detail::audit_output(result, "mul");
    if (track) {
        auto da = a.data_ptr();
        auto db = b.data_ptr();
        auto ga = a.grad_store();
        auto gb = b.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("mul", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            if (ga) {
                std::vector<S>& dst = ctx.sink(ga);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (*db)[i];
            }
            if (gb) {
                std::vector<S>& dst = ctx.sink(gb);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (*da)[i];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, double c) {
    std::vector<S> out(x.size());
    const S cs = static_cast<S>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * cs;
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "scale");
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("scale", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * cs;
        });
    }
    return result;
}

// x[.., w] + bias[w], broadcast over all leading axes.
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
    if (bias.rank() != 1 || bias.shape()[0] != x.shape().back())
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not span last axis of " +
                             shape_str(x.shape()));
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.size() / width;
    std::vector<S> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = x.values()[r * width + j] + bias.values()[j];
    const bool track = detail::track_any(x, bias);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "add_bias");
    if (track) {
        auto gx = x.grad_store();
        auto gb = bias.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("add_bias", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            if (gx) {
                std::vector<S>& dst = ctx.sink(gx);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
            if (gb) {
                std::vector<S>& dst = ctx.sink(gb);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < width; ++j) dst[j] += g[r * width + j];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
    std::vector<S> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > S(0) ? x.values()[i] : S(0);
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "relu");
    if (track) {
        auto dx = x.data_ptr();
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("relu", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*dx)[i] > S(0)) dst[i] += g[i];
        });
    }
    return result;
}

// Exact (erf) GELU.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<S> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = static_cast<double>(x.values()[i]);
        out[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "gelu");
    if (track) {
        auto dx = x.data_ptr();
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("gelu", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>((*dx)[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                dst[i] += g[i] * static_cast<S>(cdf + v * pdf);
            }
        });
    }
    return result;
}

// ln(max(x, eps)); the floor keeps losses finite on zero probabilities.
template <typename S>
TensorT<S> log_eps(const TensorT<S>& x, double eps = 1e-12) {
    std::vector<S> out(x.size());
    const S floor = static_cast<S>(eps);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x.values()[i], floor));
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "log_eps");
    if (track) {
        auto dx = x.data_ptr();
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("log_eps", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*dx)[i] > floor) dst[i] += g[i] / (*dx)[i];
        });
    }
    return result;
}

// Mean over one axis; the axis is dropped from the result.
template <typename S>
TensorT<S> mean_axis(const TensorT<S>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("mean_axis: axis out of range for " + shape_str(x.shape()));
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t red = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<S> out(outer * inner, S(0));
    const S* px = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < red; ++r) {
            const S* src = px + (o * red + r) * inner;
            S* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    const S inv = S(1) / static_cast<S>(red);
    for (S& v : out) v *= inv;

    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    detail::audit_output(result, "mean_axis");
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("mean_axis", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t r = 0; r < red; ++r) {
                    S* d = dst.data() + (o * red + r) * inner;
                    const S* src = g.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) d[i] += src[i] * inv;
                }
        });
    }
    return result;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S total = S(0);
    for (S v : x.values()) total += v;
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked({1}, {total}, track);
    detail::audit_output(result, "sum_all");
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("sum_all", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const S g = gout->value[0];
            for (S& v : dst) v += g;
        });
    }
    return result;
}

// ==================== rearrangement ====================

template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x) {
    if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 in " + shape_str(x.shape()));
    const Shape& s = x.shape();
    const std::size_t n = s[s.size() - 2], m = s[s.size() - 1];
    const std::size_t nb = x.size() / (n * m);
    Shape out_shape = s;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<S> out(x.size());
    const S* px = x.values().data();
    for (std::size_t b = 0; b < nb; ++b) {
        const S* src = px + b * n * m;
        S* dst = out.data() + b * n * m;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) dst[j * n + i] = src[i * m + j];
    }
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    detail::audit_output(result, "transpose_last2");
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("transpose_last2", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t b = 0; b < nb; ++b) {
                const S* src = g.data() + b * n * m;
                S* d = dst.data() + b * n * m;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) d[i * m + j] += src[j * n + i];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> concat_axis(const std::vector<TensorT<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat_axis: no operands");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat_axis: axis out of range for " + shape_str(s0));
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size())
            throw DimensionError("concat_axis: rank mismatch: " + shape_str(s0) + " vs " + shape_str(p.shape()));
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i])
                throw DimensionError("concat_axis: extents differ off the concat axis: " + shape_str(s0) +
                                     " vs " + shape_str(p.shape()));
        total_axis += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total_axis;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<S> out(shape_numel(out_shape));
    std::size_t offset = 0;  // in axis units
    for (const auto& p : parts) {
        const std::size_t pa = p.shape()[axis];
        const S* src = p.values().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(src + o * pa * inner, src + (o + 1) * pa * inner,
                      out.data() + (o * total_axis + offset) * inner);
        offset += pa;
    }

    bool any_rg = false;
    for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
    const bool track = TapeT<S>::recording() && any_rg;
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    detail::audit_output(result, "concat_axis");
    if (track) {
        struct Src {
            std::shared_ptr<GradStore<S>> grad;
            std::size_t extent;
        };
        std::vector<Src> srcs;
        for (const auto& p : parts) srcs.push_back({p.grad_store(), p.shape()[axis]});
        auto gout = result.grad_store();
        TapeT<S>::active()->record("concat_axis", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            std::size_t off = 0;
            for (const Src& src : srcs) {
                if (src.grad) {
                    std::vector<S>& dst = ctx.sink(src.grad);
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* from = g.data() + (o * total_axis + off) * inner;
                        S* to = dst.data() + o * src.extent * inner;
                        for (std::size_t i = 0; i < src.extent * inner; ++i) to[i] += from[i];
                    }
                }
                off += src.extent;
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> concat_axis(std::initializer_list<TensorT<S>> parts, std::size_t axis) {
    return concat_axis(std::vector<TensorT<S>>(parts), axis);
}

template <typename S>
TensorT<S> slice_axis(const TensorT<S>& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw BoundsError("slice_axis: axis out of range for " + shape_str(x.shape()));
    const Shape& s = x.shape();
    if (len == 0 || start + len > s[axis])
        throw BoundsError("slice_axis: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") outside extent " + std::to_string(s[axis]));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t full = s[axis];

    Shape out_shape = s;
    out_shape[axis] = len;
    std::vector<S> out(outer * len * inner);
    const S* px = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(px + (o * full + start) * inner, px + (o * full + start + len) * inner,
                  out.data() + o * len * inner);

    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    detail::audit_output(result, "slice_axis");
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("slice_axis", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t o = 0; o < outer; ++o) {
                const S* from = g.data() + o * len * inner;
                S* to = dst.data() + (o * full + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) to[i] += from[i];
            }
        });
    }
    return result;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(new_shape));
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(std::move(new_shape), x.values(), track);
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("reshape", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        });
    }
    return result;
}

// Stacks n copies of x along a new leading axis.
template <typename S>
TensorT<S> repeat0(const TensorT<S>& x, std::size_t n) {
    if (n == 0) throw DimensionError("repeat0: zero copies requested");
    Shape out_shape;
    out_shape.push_back(n);
    for (std::size_t e : x.shape()) out_shape.push_back(e);
    std::vector<S> out(n * x.size());
    for (std::size_t i = 0; i < n; ++i)
        std::copy(x.values().begin(), x.values().end(), out.begin() + i * x.size());
    const bool track = detail::track_any(x);
    TensorT<S> result = TensorT<S>::tracked(std::move(out_shape), std::move(out), track);
    if (track) {
        auto gx = x.grad_store();
        auto gout = result.grad_store();
        const std::size_t block = x.size();
        TapeT<S>::active()->record("repeat0", [=](BackwardPassT<S>& ctx) {
            std::vector<S>& dst = ctx.sink(gx);
            const std::vector<S>& g = gout->value;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < block; ++j) dst[j] += g[i * block + j];
        });
    }
    return result;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace mmfuse
